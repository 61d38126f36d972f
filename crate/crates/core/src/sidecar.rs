//! ASCII sidecar files: per-vertex momenta (n reals per line) and
//! per-vertex scalars (one real per line). Values are written with 17
//! significant digits, so round trips are bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::Vec3;

pub fn save_momenta(path: impl AsRef<Path>, momenta: &[Vec3], ambient_dim: usize) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for p in momenta {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Error::validation("refusing to save non-finite momenta"));
        }
        let row: Vec<String> = p[..ambient_dim].iter().map(|c| format!("{c:.16e}")).collect();
        writeln!(text, "{}", row.join(" ")).unwrap();
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_momenta(path: impl AsRef<Path>, ambient_dim: usize) -> Result<Vec<Vec3>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != ambient_dim {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {ambient_dim} momentum components, got {}", toks.len()),
            });
        }
        let mut p = [0.0; 3];
        for (axis, tok) in toks.iter().enumerate() {
            p[axis] = tok.parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected a real number, got '{tok}'"),
            })?;
        }
        out.push(p);
    }
    Ok(out)
}

pub fn save_scalars(path: impl AsRef<Path>, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for v in values {
        if !v.is_finite() {
            return Err(Error::validation("refusing to save non-finite scalars"));
        }
        writeln!(text, "{v:.16e}").unwrap();
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_scalars(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(t.parse::<f64>().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected a real number, got '{t}'"),
        })?);
    }
    Ok(out)
}
