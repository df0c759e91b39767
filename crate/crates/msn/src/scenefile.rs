//! Scene grid text files.
//!
//! The first non-comment line is `width height cell_size origin_x origin_y`;
//! `height` rows of `width` values in `[0, 1]` follow, row 0 at `origin_y`.

use std::fmt::Write as _;
use std::path::Path;

use msn_core::context::SceneGrid;

use crate::error::{Error, Result};

pub fn parse_scene(text: &str, origin: &Path) -> Result<SceneGrid> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let (hl, header) = lines.next().ok_or_else(|| err(1, "missing scene header".into()))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 5 {
        return Err(err(hl, "header needs `width height cell_size origin_x origin_y`".into()));
    }
    let size = |s: &str| s.parse::<usize>().map_err(|e| err(hl, format!("`{s}`: {e}")));
    let real = |s: &str| s.parse::<f64>().map_err(|e| err(hl, format!("`{s}`: {e}")));
    let (width, height) = (size(h[0])?, size(h[1])?);
    let (cell, ox, oy) = (real(h[2])?, real(h[3])?, real(h[4])?);
    let mut values = Vec::with_capacity(width * height);
    for row in 0..height {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| err(hl, format!("expected {height} rows, found {row}")))?;
        let before = values.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|e| err(ln, format!("`{tok}`: {e}")))?;
            values.push(v);
        }
        if values.len() - before != width {
            return Err(err(ln, format!("expected {width} values, found {}", values.len() - before)));
        }
    }
    if let Some((ln, _)) = lines.next() {
        return Err(err(ln, format!("unexpected data after {height} rows")));
    }
    SceneGrid::new(width, height, cell, [ox, oy], values).map_err(|e| err(hl, e.to_string()))
}

/// `Ok(None)` when the file does not exist: the scene is then empty and
/// every sample gets an all-zero grid around itself.
pub fn load_scene(path: &Path) -> Result<Option<SceneGrid>> {
    match std::fs::read_to_string(path) {
        Ok(text) => parse_scene(&text, path).map(Some),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub fn format_scene(grid: &SceneGrid) -> String {
    let mut out = format!(
        "{} {} {} {} {}\n",
        grid.width, grid.height, grid.cell_size, grid.origin[0], grid.origin[1]
    );
    for row in grid.values().chunks(grid.width) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", cells.join(" "));
    }
    out
}
