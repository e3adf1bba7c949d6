//! Named parameter storage and the dense layer built on it.

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{ParamId, Tape, Tensor, Var};

/// Ordered, named trainable tensors. Ids are indices into the list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces a tensor by name, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if value.shape() != self.tensors[i].shape() {
            return Err(Error::shape(
                "load parameter",
                self.tensors[i].shape(),
                value.shape(),
            ));
        }
        self.tensors[i] = value;
        Ok(())
    }

    /// Puts every tensor on `tape`. Trainable bindings record gradients;
    /// otherwise they are constants and only inputs can be differentiated.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if trainable {
                    tape.param(ParamId(i), t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        params: &mut Params,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let std = gain / (inputs as f64).sqrt();
        let w = params.add(
            format!("{name}.w"),
            rng::normal_tensor(rng, &[inputs, outputs], std),
        );
        let b = params.add(format!("{name}.b"), Tensor::zeros([outputs]));
        Linear { w, b }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.get(self.w))?.add(p.get(self.b))
    }
}
