//! Atomic file writes and text/PGM renderings of masks.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{FgdError, Result};
use crate::tensor::Tensor;

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| FgdError::Io(e.error))?;
    Ok(())
}

/// Rank-2 tensor as whitespace-separated rows.
pub fn grid_text(t: &Tensor) -> Result<String> {
    let (h, w) = matrix_dims(t)?;
    let mut s = String::with_capacity(h * w * 12);
    for r in 0..h {
        let row: Vec<String> = t.data()[r * w..(r + 1) * w].iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    Ok(s)
}

pub fn parse_grid(text: &str) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row = line
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| FgdError::Format(format!("bad grid value {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(FgdError::Format("ragged grid".into()));
        }
        data.extend(row);
        rows += 1;
    }
    Tensor::new(vec![rows, width.unwrap_or(0)], data).map_err(|e| FgdError::Format(e.to_string()))
}

/// One value per line, with a header.
pub fn vector_csv(t: &Tensor, header: &str) -> String {
    let mut s = format!("{header}\n");
    for (i, v) in t.data().iter().enumerate() {
        let _ = writeln!(s, "{i},{v}");
    }
    s
}

/// 8-bit binary PGM, min-max normalised; a constant map renders black.
pub fn pgm(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = matrix_dims(t)?;
    let lo = t.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] => Ok((*h, *w)),
        s => Err(FgdError::dim(format!("expected a 2-D map, got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_round_trip() {
        let t = Tensor::new(vec![2, 3], vec![0.1, 2.0, -3.5, 1e-17, 0.0, 7.0]).unwrap();
        assert_eq!(parse_grid(&grid_text(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn pgm_scales_to_full_range() {
        let t = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = pgm(&t).unwrap();
        assert_eq!(&p[..11], b"P5\n3 1\n255\n");
        assert_eq!(&p[11..], &[0, 128, 255]);
        assert_eq!(&pgm(&Tensor::ones(&[1, 2])).unwrap()[11..], &[0, 0]);
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
