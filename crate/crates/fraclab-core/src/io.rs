//! File formats for fields and dense matrices.
//!
//! Fields serialize to a flat binary layout
//!
//! ```text
//! header:  n: u32 LE | N: u32 LE | L: f64 LE | m: u32 LE
//! payload: num_points * m doubles, row-major, point-major component-minor
//! ```
//!
//! or to CSV with the header line `n,N,L,m` followed by one line per grid
//! point. The extension picks the format: `.bin` or `.csv`. Extension
//! slices are stacked into one field whose components are the heights, next
//! to a JSON manifest listing them.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::Array2;

use crate::error::{CoreError, Result};
use crate::extension::ExtensionSlices;
use crate::grid::{Field, GridSpec};

pub fn write_field(path: &Path, field: &Field) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => write_field_csv(path, field),
        _ => write_field_binary(path, field),
    }
}

pub fn read_field(path: &Path) -> Result<Field> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_field_csv(path),
        _ => read_field_binary(path),
    }
}

pub fn write_field_binary(path: &Path, field: &Field) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let grid = field.grid();
    w.write_all(&(grid.dim() as u32).to_le_bytes())?;
    w.write_all(&(grid.points_per_axis() as u32).to_le_bytes())?;
    w.write_all(&grid.period().to_le_bytes())?;
    w.write_all(&(field.components() as u32).to_le_bytes())?;
    for v in field.values().iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_field_binary(path: &Path) -> Result<Field> {
    let mut r = BufReader::new(File::open(path)?);
    let mut u32buf = [0u8; 4];
    let mut f64buf = [0u8; 8];
    r.read_exact(&mut u32buf)?;
    let n = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let points = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut f64buf)?;
    let period = f64::from_le_bytes(f64buf);
    r.read_exact(&mut u32buf)?;
    let m = u32::from_le_bytes(u32buf) as usize;
    let grid = GridSpec::new(n, points, period)?;
    let np = grid.num_points();
    let mut values = Array2::zeros((np, m));
    for idx in 0..np {
        for c in 0..m {
            r.read_exact(&mut f64buf)?;
            values[[idx, c]] = f64::from_le_bytes(f64buf);
        }
    }
    Field::from_values(grid, values)
}

pub fn write_field_csv(path: &Path, field: &Field) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let grid = field.grid();
    writeln!(
        w,
        "{},{},{},{}",
        grid.dim(),
        grid.points_per_axis(),
        grid.period(),
        field.components()
    )?;
    for idx in 0..grid.num_points() {
        let row: Vec<String> = (0..field.components())
            .map(|c| format!("{}", field.values()[[idx, c]]))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_field_csv(path: &Path) -> Result<Field> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| CoreError::Parse("empty field file".into()))??;
    let parts: Vec<&str> = header.trim().split(',').collect();
    if parts.len() != 4 {
        return Err(CoreError::Parse(format!(
            "field header needs n,N,L,m, got '{header}'"
        )));
    }
    let n: usize = parse(parts[0], "n")?;
    let points: usize = parse(parts[1], "N")?;
    let period: f64 = parse(parts[2], "L")?;
    let m: usize = parse(parts[3], "m")?;
    let grid = GridSpec::new(n, points, period)?;
    let np = grid.num_points();
    let mut values = Array2::zeros((np, m));
    for idx in 0..np {
        let line = lines.next().ok_or_else(|| {
            CoreError::Parse(format!("field file truncated at point {idx}"))
        })??;
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != m {
            return Err(CoreError::Parse(format!(
                "point {idx} has {} values, expected {m}",
                cols.len()
            )));
        }
        for (c, col) in cols.iter().enumerate() {
            values[[idx, c]] = parse(col, "value")?;
        }
    }
    Field::from_values(grid, values)
}

fn parse<T: std::str::FromStr>(text: &str, what: &str) -> Result<T> {
    text.trim()
        .parse()
        .map_err(|_| CoreError::Parse(format!("cannot parse {what} from '{text}'")))
}

/// Dense matrix as CSV, one row per line.
pub fn write_matrix_csv(path: &Path, matrix: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for i in 0..matrix.nrows() {
        let row: Vec<String> = (0..matrix.ncols())
            .map(|j| format!("{}", matrix[(i, j)]))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Stack the slices into one field (components = heights) and write it next
/// to a JSON manifest with the heights and diagnostics.
pub fn write_slices(path: &Path, slices: &ExtensionSlices) -> Result<()> {
    let grid = slices.base.grid().clone();
    let np = grid.num_points();
    let mut values = Array2::zeros((np, slices.slices.len()));
    for (c, slice) in slices.slices.iter().enumerate() {
        for idx in 0..np {
            values[[idx, c]] = slice.values()[[idx, 0]];
        }
    }
    let stacked = Field::from_values(grid, values)?;
    write_field(path, &stacked)?;
    let manifest = serde_json::json!({
        "heights": slices.heights,
        "order": slices.s,
        "support_warning": slices.support_warning,
        "tail_mass": slices.tail_mass,
    });
    let manifest_path = path.with_extension("heights.json");
    let mut w = BufWriter::new(File::create(&manifest_path)?);
    w.write_all(
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| CoreError::Parse(e.to_string()))?
            .as_bytes(),
    )?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn temp_path(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("fraclab-io-{}-{}", std::process::id(), name));
        p
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let grid = GridSpec::new(2, 4, 1.5).unwrap();
        let mut field = Field::zeros(grid, 3).unwrap();
        field.values_mut()[[5, 1]] = -2.25;
        let path = temp_path("a.csv");
        write_field(&path, &field).unwrap();
        let back = read_field(&path).unwrap();
        assert_eq!(field, back);
        std::fs::write(&path, "1,4\n").unwrap();
        assert!(matches!(read_field(&path), Err(CoreError::Parse(_))));
        std::fs::remove_file(&path).ok();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn binary_roundtrip_preserves_bits(seed in 0u64..1000) {
            use rand::{Rng as _, SeedableRng as _};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let grid = GridSpec::new(1, 8, 2.0).unwrap();
            let values = ndarray::Array2::from_shape_fn((8, 2), |_| rng.gen_range(-1e6..1e6));
            let field = Field::from_values(grid, values).unwrap();
            let path = temp_path(&format!("b{seed}.bin"));
            write_field(&path, &field).unwrap();
            let back = read_field(&path).unwrap();
            std::fs::remove_file(&path).ok();
            prop_assert_eq!(field, back);
        }
    }
}
