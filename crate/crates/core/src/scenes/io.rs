//! Line-delimited JSON corpus: one scenario per line, each carrying the
//! schema version.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::Scenario;
use crate::error::{Error, Result};

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Serialize)]
struct LineOut<'a> {
    format_version: u32,
    #[serde(flatten)]
    scenario: &'a Scenario,
}

pub fn write_corpus<W: Write>(mut w: W, scenarios: &[Scenario]) -> Result<()> {
    for s in scenarios {
        serde_json::to_writer(
            &mut w,
            &LineOut {
                format_version: CORPUS_FORMAT_VERSION,
                scenario: s,
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<Vec<Scenario>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse { line: n, message };
        let mut value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let version = value
            .as_object_mut()
            .and_then(|o| o.remove("format_version"))
            .ok_or_else(|| parse("missing format_version".into()))?;
        match version.as_u64() {
            Some(v) if v == CORPUS_FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Version {
                    found: v.min(u32::MAX as u64) as u32,
                    expected: CORPUS_FORMAT_VERSION,
                })
            }
            None => return Err(parse("format_version must be an integer".into())),
        }
        let s: Scenario = serde_json::from_value(value).map_err(|e| parse(e.to_string()))?;
        s.validate().map_err(|e| parse(e.to_string()))?;
        out.push(s);
    }
    Ok(out)
}

pub fn read_corpus_file(path: &Path) -> Result<Vec<Scenario>> {
    read_corpus(BufReader::new(File::open(path)?))
}

pub fn write_corpus_file(path: &Path, scenarios: &[Scenario]) -> Result<()> {
    write_corpus(BufWriter::new(File::create(path)?), scenarios)
}
