use super::Tensor;
use crate::error::{Error, Result};

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` laid out in an output of rank `rank`, with zero stride
/// on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 {
            0
        } else {
            acc
        };
        acc *= shape[i];
    }
    strides
}

/// Visits every output index, yielding the matching flat offsets into `a` and `b`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        f(oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape.clone(), data));
    }
    let out =
        broadcast_shapes(&a.shape, &b.shape).ok_or_else(|| Error::shape(op, &a.shape, &b.shape))?;
    // Trailing-suffix fast path (bias add, per-feature gains).
    if out == a.shape && b.shape.len() <= a.shape.len() && a.shape.ends_with(&b.shape) {
        let w = b.data.len();
        let data = a
            .data
            .chunks(w)
            .flat_map(|chunk| chunk.iter().zip(&b.data).map(|(&x, &y)| f(x, y)))
            .collect();
        return Ok(Tensor::from_parts(out, data));
    }
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = Vec::with_capacity(out.iter().product());
    for_each_broadcast(&out, &sa, &sb, |ia, ib| {
        data.push(f(a.data[ia], b.data[ib]))
    });
    Ok(Tensor::from_parts(out, data))
}

/// Sums `g` down to `target`, undoing a broadcast.
pub(crate) fn reduce_to_shape(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape == target {
        return g.clone();
    }
    let n_t: usize = target.iter().product();
    let mut data = vec![0.0; n_t];
    if g.shape.len() >= target.len() && g.shape.ends_with(target) {
        for chunk in g.data.chunks(n_t) {
            for (d, v) in data.iter_mut().zip(chunk) {
                *d += v;
            }
        }
        return Tensor::from_parts(target.to_vec(), data);
    }
    let st = broadcast_strides(target, &g.shape);
    let zero = vec![0; g.shape.len()];
    let mut k = 0;
    for_each_broadcast(&g.shape, &st, &zero, |it, _| {
        data[it] += g.data[k];
        k += 1;
    });
    Tensor::from_parts(target.to_vec(), data)
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c` where `op` optionally
/// transposes. `a` is stored `[m, k]` (or `[k, m]` if `ta`), `b` is `[k, n]`
/// (or `[n, k]` if `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths checked above cover every index dgemm touches
    // for the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, "div", |a, b| a / b)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.data,
            false,
            &other.data,
            false,
            &mut out,
            0.0,
        );
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose", &self.shape, &[]));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    pub fn sum(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum())
    }

    pub fn mean(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum::<f64>() / self.data.len() as f64)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::InvalidArgument(format!(
                "sum_axis: axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &self.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor::from_parts(shape, out))
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp)
    }

    pub fn abs(&self) -> Tensor {
        self.map(f64::abs)
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(v) = self.data.iter().find(|&&v| v < 0.0 || v.is_nan()) {
            return Err(Error::domain("log", format!("negative input {v}")));
        }
        Ok(self.map(f64::ln))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(v) = self.data.iter().find(|&&v| v < 0.0 || v.is_nan()) {
            return Err(Error::domain("sqrt", format!("negative input {v}")));
        }
        Ok(self.map(f64::sqrt))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Tensor {
        let w = *self.shape.last().unwrap_or(&1);
        let mut data = self.data.clone();
        for row in data.chunks_mut(w) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Tensor::from_parts(self.shape.clone(), data)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        if axis >= first.rank() {
            return Err(Error::InvalidArgument(format!(
                "concat: axis {axis} out of range"
            )));
        }
        for p in parts {
            let same = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape("concat", &first.shape, &p.shape));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let w = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor::from_parts(shape, data))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice [{start}, {}) on axis {axis} out of range for shape {:?}",
                start + len,
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(
                &self.data[o * full + start * inner..o * full + (start + len) * inner],
            );
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        match broadcast_shapes(&self.shape, shape) {
            Some(out) if out == shape => {
                let zeros = Tensor::zeros(shape.to_vec());
                broadcast_binary(&zeros, self, "broadcast_to", |_, b| b)
            }
            _ => Err(Error::shape("broadcast_to", &self.shape, shape)),
        }
    }

    /// Row-wise normalisation over the last axis to zero mean, unit variance.
    pub fn layer_norm(&self, eps: f64) -> Tensor {
        layer_norm_forward(self, eps).0
    }
}

pub(crate) fn layer_norm_forward(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let w = *x.shape.last().unwrap_or(&1);
    let mut y = x.data.clone();
    let mut inv = Vec::with_capacity(y.len() / w);
    for row in y.chunks_mut(w) {
        let mean = row.iter().sum::<f64>() / w as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
        let is = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv.push(is);
    }
    (Tensor::from_parts(x.shape.clone(), y), inv)
}

pub(crate) fn layer_norm_backward(g: &Tensor, y: &Tensor, inv_std: &[f64]) -> Tensor {
    let w = *y.shape.last().unwrap_or(&1);
    let mut out = vec![0.0; g.data.len()];
    for (r, ((orow, grow), yrow)) in out
        .chunks_mut(w)
        .zip(g.data.chunks(w))
        .zip(y.data.chunks(w))
        .enumerate()
    {
        let mg = grow.iter().sum::<f64>() / w as f64;
        let mgy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / w as f64;
        for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
            *o = inv_std[r] * (gv - mg - yv * mgy);
        }
    }
    Tensor::from_parts(g.shape.clone(), out)
}

/// Which key rows each query row may attend to. Every query row sees one
/// contiguous block of keys, which covers both "agents of the same joint
/// sample" and "this agent's own context tokens".
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    ranges: Vec<(usize, usize)>,
}

impl AttentionLayout {
    pub fn new(ranges: Vec<(usize, usize)>) -> Result<Self> {
        if ranges.iter().any(|&(a, b)| b <= a) {
            return Err(Error::InvalidArgument(
                "attention key range must be nonempty".into(),
            ));
        }
        Ok(AttentionLayout { ranges })
    }

    /// `groups` consecutive blocks of `size` rows, each attending within itself.
    pub fn blocks(groups: usize, size: usize) -> Self {
        let ranges = (0..groups * size)
            .map(|r| {
                let g = r / size;
                (g * size, (g + 1) * size)
            })
            .collect();
        AttentionLayout { ranges }
    }

    /// Query row `(m, i)` of `samples x agents` attends to the `tokens` keys
    /// owned by agent `i`.
    pub fn per_agent(samples: usize, agents: usize, tokens: usize) -> Self {
        let ranges = (0..samples * agents)
            .map(|r| {
                let i = r % agents;
                (i * tokens, (i + 1) * tokens)
            })
            .collect();
        AttentionLayout { ranges }
    }

    pub fn queries(&self) -> usize {
        self.ranges.len()
    }

    pub fn max_key(&self) -> usize {
        self.ranges.iter().map(|r| r.1).max().unwrap_or(0)
    }

    pub(crate) fn range(&self, row: usize) -> (usize, usize) {
        self.ranges[row]
    }
}

/// Cached softmax weights from the forward pass, per (row, head).
pub(crate) struct AttentionCache {
    offsets: Vec<usize>,
    probs: Vec<f64>,
}

pub(crate) fn check_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    layout: &AttentionLayout,
) -> Result<()> {
    if q.rank() != 2 || k.rank() != 2 || v.shape != k.shape || q.shape[1] != k.shape[1] {
        return Err(Error::shape("attention", &q.shape, &k.shape));
    }
    if heads == 0 || q.shape[1] % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "attention: width {} not divisible into {heads} heads",
            q.shape[1]
        )));
    }
    if layout.queries() != q.shape[0] || layout.max_key() > k.shape[0] {
        return Err(Error::shape("attention layout", &q.shape, &k.shape));
    }
    Ok(())
}

pub(crate) fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    layout: &AttentionLayout,
) -> (Tensor, AttentionCache) {
    let d = q.shape[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let rows = q.shape[0];
    let mut out = vec![0.0; rows * d];
    let mut offsets = Vec::with_capacity(rows);
    let mut probs = Vec::new();
    for r in 0..rows {
        let (a, b) = layout.range(r);
        offsets.push(probs.len());
        for h in 0..heads {
            let qs = &q.data[r * d + h * dh..r * d + (h + 1) * dh];
            let start = probs.len();
            let mut max = f64::NEG_INFINITY;
            for j in a..b {
                let ks = &k.data[j * d + h * dh..j * d + (h + 1) * dh];
                let s = qs.iter().zip(ks).map(|(x, y)| x * y).sum::<f64>() * scale;
                max = max.max(s);
                probs.push(s);
            }
            let mut total = 0.0;
            for p in &mut probs[start..] {
                *p = (*p - max).exp();
                total += *p;
            }
            let orow = &mut out[r * d + h * dh..r * d + (h + 1) * dh];
            for (jj, p) in probs[start..].iter_mut().enumerate() {
                *p /= total;
                let vs = &v.data[(a + jj) * d + h * dh..(a + jj) * d + (h + 1) * dh];
                for (o, x) in orow.iter_mut().zip(vs) {
                    *o += *p * x;
                }
            }
        }
    }
    (
        Tensor::from_parts(vec![rows, d], out),
        AttentionCache { offsets, probs },
    )
}

pub(crate) fn attention_backward(
    g: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    layout: &AttentionLayout,
    cache: &AttentionCache,
) -> (Tensor, Tensor, Tensor) {
    let d = q.shape[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; q.data.len()];
    let mut gk = vec![0.0; k.data.len()];
    let mut gv = vec![0.0; v.data.len()];
    let mut dp = Vec::new();
    for r in 0..q.shape[0] {
        let (a, b) = layout.range(r);
        let n = b - a;
        for h in 0..heads {
            let p = &cache.probs[cache.offsets[r] + h * n..cache.offsets[r] + (h + 1) * n];
            let go = &g.data[r * d + h * dh..r * d + (h + 1) * dh];
            dp.clear();
            let mut dot = 0.0;
            for (jj, &pj) in p.iter().enumerate() {
                let j = a + jj;
                let vs = &v.data[j * d + h * dh..j * d + (h + 1) * dh];
                let dpj = go.iter().zip(vs).map(|(x, y)| x * y).sum::<f64>();
                dot += pj * dpj;
                dp.push(dpj);
                for (gvv, gov) in gv[j * d + h * dh..j * d + (h + 1) * dh].iter_mut().zip(go) {
                    *gvv += pj * gov;
                }
            }
            let qs = &q.data[r * d + h * dh..r * d + (h + 1) * dh];
            for (jj, &pj) in p.iter().enumerate() {
                let j = a + jj;
                let ds = pj * (dp[jj] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let ks = &k.data[j * d + h * dh..j * d + (h + 1) * dh];
                for (gqv, kv) in gq[r * d + h * dh..r * d + (h + 1) * dh].iter_mut().zip(ks) {
                    *gqv += ds * kv;
                }
                for (gkv, qv) in gk[j * d + h * dh..j * d + (h + 1) * dh].iter_mut().zip(qs) {
                    *gkv += ds * qv;
                }
            }
        }
    }
    (
        Tensor::from_parts(q.shape.clone(), gq),
        Tensor::from_parts(k.shape.clone(), gk),
        Tensor::from_parts(v.shape.clone(), gv),
    )
}

/// Multi-head scaled dot-product attention on value tensors.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    layout: &AttentionLayout,
) -> Result<Tensor> {
    check_attention(q, k, v, heads, layout)?;
    Ok(attention_forward(q, k, v, heads, layout).0)
}
