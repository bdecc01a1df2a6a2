//! Field serialization.
//!
//! CSV: one row per grid point, coordinates `x0..x{d-1}` then `value`.
//! Binary: `d: u64`, `n: u64`, `L: f64`, then `n^d` values as `f64`, all little-endian, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::spectral::{Field, Grid, SpectralError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed field file: {0}")]
    Format(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

pub fn write_field_csv(field: &Field, path: &Path) -> Result<(), IoError> {
    let g = field.grid();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..g.dim).map(|a| format!("x{a}")).collect();
    header.push("value".into());
    w.write_record(&header)?;
    for (i, v) in field.values().iter().enumerate() {
        let x = g.point(i);
        let mut row: Vec<String> = x[..g.dim].iter().map(|c| format!("{c:.17e}")).collect();
        row.push(format!("{v:.17e}"));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_field_csv`]; the grid is inferred from the first axis.
pub fn read_field_csv(path: &Path) -> Result<Field, IoError> {
    let mut r = csv::Reader::from_path(path)?;
    let dim = r.headers()?.len().checked_sub(1).ok_or_else(|| IoError::Format("empty header".into()))?;
    let mut values = Vec::new();
    let mut first_axis = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64, IoError> {
            rec.get(i).and_then(|s| s.trim().parse().ok()).ok_or_else(|| IoError::Format(format!("bad number in column {i}")))
        };
        first_axis.push(parse(0)?);
        values.push(parse(dim)?);
    }
    let n = (values.len() as f64).powf(1.0 / dim as f64).round() as usize;
    if n < 2 || n.pow(dim as u32) != values.len() {
        return Err(IoError::Format(format!("{} rows is not n^{dim}", values.len())));
    }
    let half_width = -first_axis[0];
    let grid = Grid::new(dim, n, half_width)?;
    Ok(Field::new(grid, values)?)
}

pub fn write_field_bin(field: &Field, path: &Path) -> Result<(), IoError> {
    let g = field.grid();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(g.dim as u64).to_le_bytes())?;
    w.write_all(&(g.n as u64).to_le_bytes())?;
    w.write_all(&g.half_width.to_le_bytes())?;
    for v in field.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_field_bin(path: &Path) -> Result<Field, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let dim = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let half_width = f64::from_le_bytes(b8);
    let grid = Grid::new(dim, n, half_width)?;
    let mut values = Vec::with_capacity(grid.len());
    for _ in 0..grid.len() {
        r.read_exact(&mut b8)?;
        values.push(f64::from_le_bytes(b8));
    }
    if r.read(&mut b8)? != 0 {
        return Err(IoError::Format("trailing bytes after field data".into()));
    }
    Ok(Field::new(grid, values)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dim: usize) -> Field {
        let g = Grid::new(dim, 8, 1.5).unwrap();
        Field::from_fn(g, |x| x.iter().map(|v| v.sin()).sum::<f64>() + 0.1).unwrap()
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for dim in 1..=3 {
            let f = sample(dim);
            let p = dir.path().join(format!("f{dim}.bin"));
            write_field_bin(&f, &p).unwrap();
            assert_eq!(read_field_bin(&p).unwrap(), f);
            assert_eq!(std::fs::metadata(&p).unwrap().len() as usize, 24 + 8 * f.grid().len());
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for dim in 1..=2 {
            let f = sample(dim);
            let p = dir.path().join("f.csv");
            write_field_csv(&f, &p).unwrap();
            assert_eq!(read_field_csv(&p).unwrap(), f);
        }
    }

    #[test]
    fn binary_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let f = sample(2);
        let p = dir.path().join("f.bin");
        write_field_bin(&f, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(u64::from_le_bytes(bytes[0..8].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 8);
        assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), 1.5);
        assert_eq!(f64::from_le_bytes(bytes[24..32].try_into().unwrap()), f.values()[0]);
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        write_field_bin(&sample(1), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(read_field_bin(&p).is_err());
    }
}
