//! Text checkpoints. After a `msn-checkpoint 1` line, every parameter takes
//! two lines: `name rank dims...` and its values in row-major order with 17
//! significant digits, enough to reproduce each `f64` exactly.

use std::fmt::Write as _;
use std::path::Path;

use msn_core::{ParamStore, Tensor};

use crate::error::{Error, Result};

const MAGIC: &str = "msn-checkpoint 1";

pub fn format_checkpoint(store: &ParamStore) -> String {
    let mut out = String::from(MAGIC);
    out.push('\n');
    for p in store.iter() {
        let shape = p.value.shape();
        let _ = write!(out, "{} {}", p.name, shape.len());
        for d in shape {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        let vals: Vec<String> = p.value.data().iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_checkpoint(text: &str, origin: &Path) -> Result<Vec<(String, Tensor)>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == MAGIC => {}
        _ => return Err(err(1, format!("not a checkpoint (expected `{MAGIC}`)"))),
    }
    let mut out = Vec::new();
    while let Some((hl, header)) = lines.next() {
        if header.trim().is_empty() {
            continue;
        }
        let h: Vec<&str> = header.split_whitespace().collect();
        let rank: usize = h
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(hl, "expected `name rank dims...`".into()))?;
        if h.len() != 2 + rank {
            return Err(err(hl, format!("rank {rank} needs {rank} dims, found {}", h.len() - 2)));
        }
        let shape = h[2..]
            .iter()
            .map(|s| s.parse::<usize>().map_err(|e| err(hl, format!("dim `{s}`: {e}"))))
            .collect::<Result<Vec<usize>>>()?;
        let (vl, vals) = lines.next().ok_or_else(|| err(hl, format!("values missing for {}", h[0])))?;
        let data = vals
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| err(vl, format!("`{s}`: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        let t = Tensor::new(&shape, data).map_err(|e| err(vl, e.to_string()))?;
        out.push((h[0].to_string(), t));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    std::fs::write(path, format_checkpoint(store)).map_err(|e| Error::io(path, e))
}

/// Overwrites every parameter of `store`; a missing, extra or misshaped
/// entry is a configuration error.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries = parse_checkpoint(&text, path)?;
    store
        .load(entries)
        .map_err(|e| Error::Config(format!("checkpoint {} does not fit the model: {e}", path.display())))
}
