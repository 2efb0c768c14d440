//! JSON-lines trace files.
//!
//! Line 1 is a header object; every following line is one
//! `{"t": token, "l": layer, "a": [ids]}` record, token-major, layers in
//! order.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_set, ActivationTrace};
use crate::error::{Error, Result};
use crate::model::{fingerprint_of, ModelShape, TokenCounts};

const TRACE_FORMAT: &str = "ndpsim-trace/1";

#[derive(Serialize, Deserialize)]
struct FileHeader {
    format: String,
    fingerprint: String,
    layers: Vec<u32>,
    prefill: u32,
    decode: u32,
    sparsity: f64,
}

#[derive(Deserialize)]
struct FileRecord {
    t: u32,
    l: u32,
    a: Vec<u32>,
}

pub fn save_trace(trace: &ActivationTrace, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_trace(trace, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_trace(trace: &ActivationTrace, w: &mut impl Write) -> Result<()> {
    let h = trace.header();
    let header = FileHeader {
        format: TRACE_FORMAT.into(),
        fingerprint: h.fingerprint.clone(),
        layers: h.layer_sizes.clone(),
        prefill: h.tokens.prefill,
        decode: h.tokens.decode,
        sparsity: h.sparsity,
    };
    serde_json::to_writer(&mut *w, &header).map_err(|e| Error::Io(e.into()))?;
    w.write_all(b"\n")?;
    let mut line = String::new();
    for t in 0..trace.num_tokens() {
        for l in 0..trace.num_layers() {
            line.clear();
            write!(line, "{{\"t\":{t},\"l\":{l},\"a\":[").unwrap();
            for (k, id) in trace.active(t, l).iter().enumerate() {
                if k > 0 {
                    line.push(',');
                }
                write!(line, "{id}").unwrap();
            }
            line.push_str("]}\n");
            w.write_all(line.as_bytes())?;
        }
    }
    Ok(())
}

/// Read a trace file. When `shape` is given, the file must have been
/// recorded for that neuron inventory.
pub fn load_trace(path: &Path, shape: Option<&ModelShape>) -> Result<ActivationTrace> {
    let text = fs::read_to_string(path)?;
    parse_trace(&text, shape)
}

fn parse_trace(text: &str, shape: Option<&ModelShape>) -> Result<ActivationTrace> {
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let Some(first) = lines.first() else {
        return Err(Error::Truncated { last_good: "none (empty file)".into() });
    };
    let header: FileHeader = serde_json::from_str(first).map_err(|e| {
        if lines.len() == 1 && !complete {
            Error::Truncated { last_good: "none (header incomplete)".into() }
        } else {
            Error::Parse { line: 1, msg: e.to_string() }
        }
    })?;
    if header.format != TRACE_FORMAT {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported format {:?}", header.format),
        });
    }
    if header.fingerprint != fingerprint_of(&header.layers) {
        return Err(Error::Parse {
            line: 1,
            msg: "header fingerprint does not match its layer sizes".into(),
        });
    }
    if let Some(shape) = shape {
        if header.fingerprint != shape.fingerprint() {
            return Err(Error::Parse {
                line: 1,
                msg: format!(
                    "trace fingerprint {} does not match model {} ({})",
                    header.fingerprint,
                    shape.name,
                    shape.fingerprint()
                ),
            });
        }
    }

    let tokens = TokenCounts::new(header.prefill, header.decode);
    let num_layers = header.layers.len() as u32;
    let expected = tokens.total() as usize * num_layers as usize;
    let mut records: Vec<Vec<Vec<u32>>> = Vec::with_capacity(tokens.total() as usize);
    let mut last_good = String::from("header");
    for (k, raw) in lines[1..].iter().enumerate() {
        let lineno = k + 2;
        if k >= expected {
            if raw.trim().is_empty() {
                continue;
            }
            return Err(Error::Validation {
                line: lineno,
                msg: format!("more records than the {expected} the header declares"),
            });
        }
        let rec: FileRecord = match serde_json::from_str(raw) {
            Ok(r) => r,
            Err(_) if lineno == lines.len() && !complete => {
                return Err(Error::Truncated { last_good });
            }
            Err(e) => return Err(Error::Parse { line: lineno, msg: e.to_string() }),
        };
        let want_t = (k / num_layers as usize) as u32;
        let want_l = (k % num_layers as usize) as u32;
        if (rec.t, rec.l) != (want_t, want_l) {
            return Err(Error::Validation {
                line: lineno,
                msg: format!(
                    "expected record t={want_t} l={want_l}, found t={} l={}",
                    rec.t, rec.l
                ),
            });
        }
        check_set(&rec.a, header.layers[rec.l as usize])
            .map_err(|msg| Error::Validation { line: lineno, msg })?;
        if rec.l == 0 {
            records.push(Vec::with_capacity(num_layers as usize));
        }
        records.last_mut().unwrap().push(rec.a);
        last_good = format!("t={} l={} (line {lineno})", rec.t, rec.l);
    }
    if lines.len() - 1 < expected {
        return Err(Error::Truncated { last_good });
    }
    ActivationTrace::new(header.layers, tokens, header.sparsity, records)
}
