//! Matrix files.
//!
//! Binary: `rows: u32 LE`, `cols: u32 LE`, then `rows * cols` IEEE-754
//! `f32` values, little-endian, row-major. CSV: one matrix row per line,
//! comma-separated, no header.

use std::io::{Read, Write};
use std::path::Path;

use super::matrix::Matrix;
use crate::error::{Error, Result};

pub fn write_bin(m: &Matrix, mut w: impl Write) -> Result<()> {
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_bin(mut r: impl Read) -> Result<Matrix> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 8 {
        return Err(Error::Parse {
            location: "header".into(),
            message: format!("need 8 header bytes, found {}", buf.len()),
        });
    }
    let rows = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let body = &buf[8..];
    if body.len() != rows * cols * 4 {
        return Err(Error::Parse {
            location: "body".into(),
            message: format!(
                "{rows}x{cols} matrix needs {} value bytes, found {}",
                rows * cols * 4,
                body.len()
            ),
        });
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn write_csv(m: &Matrix, w: impl Write) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for r in 0..m.rows() {
        out.write_record(m.row(r).iter().map(|v| v.to_string()))
            .map_err(|e| Error::Io(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv(r: impl Read) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(r);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse { location: format!("row {}", i + 1), message: e.to_string() })?;
        if *cols.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::Parse {
                location: format!("row {}", i + 1),
                message: format!("expected {} values, found {}", cols.unwrap(), rec.len()),
            });
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f32 = field.parse().map_err(|_| Error::Parse {
                location: format!("row {}, column {}", i + 1, j + 1),
                message: format!("not a number: {field:?}"),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Matrix::from_vec(rows, cols.unwrap_or(0), data)
}

pub fn save(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    if is_csv(path) {
        write_csv(m, file)
    } else {
        write_bin(m, file)
    }
}

/// Loads by extension: `.csv` as CSV, anything else as the binary format.
pub fn load(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    if is_csv(path) {
        read_csv(file)
    } else {
        read_bin(std::io::BufReader::new(file))
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn binary_layout_is_fixed() {
        let m = Matrix::from_vec(1, 2, vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_bin(&m, &mut buf).unwrap();
        assert_eq!(&buf[..8], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&buf[8..12], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 16);
    }

    #[test]
    fn truncated_binary_rejected() {
        assert!(read_bin(&[2u8, 0, 0, 0, 2, 0, 0, 0, 0][..]).is_err());
        assert!(read_bin(&[2u8, 0][..]).is_err());
    }

    #[test]
    fn csv_errors_point_at_cell() {
        let err = read_csv("1,2\n3,x\n".as_bytes()).unwrap_err();
        match err {
            Error::Parse { location, .. } => assert_eq!(location, "row 2, column 2"),
            other => panic!("{other:?}"),
        }
        assert!(read_csv("1,2\n3\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn bin_and_csv_round_trip(rows in 0usize..6, cols in 1usize..6, seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = Matrix::random_uniform(rows, cols, 100.0, &mut rng);
            let mut buf = Vec::new();
            write_bin(&m, &mut buf).unwrap();
            prop_assert_eq!(read_bin(&buf[..]).unwrap(), m.clone());
            if rows > 0 {
                let mut text = Vec::new();
                write_csv(&m, &mut text).unwrap();
                prop_assert_eq!(read_csv(&text[..]).unwrap(), m);
            }
        }
    }
}
