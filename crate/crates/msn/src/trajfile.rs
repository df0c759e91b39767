//! Plain-text annotation files: one `frame_id agent_id x y` record per line,
//! whitespace separated, `#` starting a comment line.

use std::fmt::Write as _;
use std::path::Path;

use msn_core::data::{group_records, Record, Trajectory};

use crate::error::{Error, Result};

/// Parses annotation text. `origin` names the source in error messages.
pub fn parse_records(text: &str, origin: &Path) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields `frame_id agent_id x y`, found {}", fields.len())));
        }
        let int = |s: &str, what: &str| s.parse::<i64>().map_err(|e| err(format!("{what} `{s}`: {e}")));
        let real = |s: &str, what: &str| match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(v) => Err(err(format!("{what} is {v}"))),
            Err(e) => Err(err(format!("{what} `{s}`: {e}"))),
        };
        out.push(Record {
            frame_id: int(fields[0], "frame_id")?,
            agent_id: int(fields[1], "agent_id")?,
            pos: [real(fields[2], "x")?, real(fields[3], "y")?],
        });
    }
    Ok(out)
}

/// Loads a file and groups it into per-agent trajectories. Agents with an
/// irregular frame stride are logged and skipped.
pub fn load_trajectory_file(path: &Path) -> Result<Vec<Trajectory>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(group_records(&parse_records(&text, path)?))
}

/// Records in file order, agents one after another. Coordinates use the
/// shortest decimal that parses back to the same `f64`.
pub fn format_trajectories(trajectories: &[Trajectory]) -> String {
    let mut out = String::new();
    for t in trajectories {
        for f in t.frames() {
            let _ = writeln!(out, "{} {} {} {}", f.frame_id, t.agent_id, f.pos[0], f.pos[1]);
        }
    }
    out
}

pub fn format_records(records: &[Record]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{} {} {} {}", r.frame_id, r.agent_id, r.pos[0], r.pos[1]);
    }
    out
}

pub fn write_trajectory_file(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    std::fs::write(path, format_trajectories(trajectories)).map_err(|e| Error::io(path, e))
}
