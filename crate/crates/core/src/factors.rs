//! Dense factor matrices and their on-disk container.
//!
//! Container layout (all little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `CALS` |
//! | 4     | version (`u32`, currently 1) |
//! | 8     | rows (`u64`) |
//! | 8     | cols (`u64`) |
//! | 8·rows·cols | row-major `f64` values |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CALS";
pub const VERSION: u32 = 1;

/// User factors `U` (`n_users x rank`) and item factors `M` (`n_items x rank`).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    pub users: Array2<f64>,
    pub items: Array2<f64>,
}

impl FactorPair {
    pub fn new(users: Array2<f64>, items: Array2<f64>) -> Result<Self> {
        if users.ncols() != items.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "user factors have rank {}, item factors rank {}",
                users.ncols(),
                items.ncols()
            )));
        }
        Ok(FactorPair {
            users: users.as_standard_layout().into_owned(),
            items: items.as_standard_layout().into_owned(),
        })
    }

    pub fn rank(&self) -> usize {
        self.users.ncols()
    }

    pub fn n_users(&self) -> usize {
        self.users.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.items.nrows()
    }

    /// `u_i · m_j`.
    pub fn predict(&self, user: usize, item: usize) -> Result<f64> {
        if user >= self.n_users() {
            return Err(Error::IndexOutOfRange {
                index: user,
                len: self.n_users(),
            });
        }
        if item >= self.n_items() {
            return Err(Error::IndexOutOfRange {
                index: item,
                len: self.n_items(),
            });
        }
        Ok(self.predict_unchecked(user, item))
    }

    #[inline]
    pub(crate) fn predict_unchecked(&self, user: usize, item: usize) -> f64 {
        self.users.row(user).dot(&self.items.row(item))
    }

    /// Every cell of `U M^T`.
    pub fn reconstruct(&self) -> Array2<f64> {
        self.users.dot(&self.items.t())
    }

    pub fn is_finite(&self) -> bool {
        self.users.iter().chain(self.items.iter()).all(|v| v.is_finite())
    }
}

/// Writes `m` in the binary container format.
pub fn write_matrix<W: Write>(m: &Array2<f64>, mut w: W) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for v in m.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_matrix<R: Read>(mut r: R) -> Result<Array2<f64>> {
    let io = |e| Error::io("<matrix>", e);
    let mut header = [0u8; 24];
    r.read_exact(&mut header).map_err(io)?;
    if header[..4] != MAGIC {
        return Err(Error::Format("bad magic in matrix container".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let rows = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(header[16..24].try_into().unwrap()) as usize;
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("matrix dimensions overflow".into()))?;
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes).map_err(io)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

pub fn save_matrix(m: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_matrix(m, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_matrix(BufReader::new(f))
}

/// Plain CSV, one matrix row per line, no header.
pub fn write_matrix_csv<W: Write>(m: &Array2<f64>, w: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for row in m.rows() {
        w.write_record(row.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(r: R) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(r);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for record in rdr.records() {
        let record = record?;
        if *cols.get_or_insert(record.len()) != record.len() {
            return Err(Error::Format(format!("ragged csv matrix at row {rows}")));
        }
        for field in record.iter() {
            data.push(
                field
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad number {field:?}")))?,
            );
        }
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, cols.unwrap_or(0)), data).expect("shape tracked"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    #[test]
    fn predict_unit_and_orthogonal_rows() {
        let f = FactorPair::new(array![[1.0, 0.0], [0.0, 1.0]], array![[1.0, 0.0]]).unwrap();
        assert_eq!(f.predict(0, 0).unwrap(), 1.0);
        assert_eq!(f.predict(1, 0).unwrap(), 0.0);
        assert!(f.predict(2, 0).is_err());
        assert!(f.predict(0, 1).is_err());
    }

    #[test]
    fn predict_matches_scalar_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let u = Array2::from_shape_fn((3, 4), |_| rng.random_range(-2.0..2.0));
        let m = Array2::from_shape_fn((2, 4), |_| rng.random_range(-2.0..2.0));
        let f = FactorPair::new(u.clone(), m.clone()).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += u[[i, k]] * m[[j, k]];
                }
                assert!((f.predict(i, j).unwrap() - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn container_layout_is_bit_exact() {
        let m = array![[1.0, -2.5], [3.0, 0.125], [f64::MIN_POSITIVE, 7.0]];
        let mut buf = Vec::new();
        write_matrix(&m, &mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 6 * 8);
        assert_eq!(&buf[..4], b"CALS");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..16], &3u64.to_le_bytes());
        assert_eq!(&buf[16..24], &2u64.to_le_bytes());
        assert_eq!(&buf[32..40], &(-2.5f64).to_le_bytes());
        assert_eq!(read_matrix(&buf[..]).unwrap(), m);
        buf[0] = b'X';
        assert!(read_matrix(&buf[..]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = array![[0.1, 1e-300], [-3.0, 2.0 / 3.0]];
        let mut buf = Vec::new();
        write_matrix_csv(&m, &mut buf).unwrap();
        assert_eq!(read_matrix_csv(&buf[..]).unwrap(), m);
    }
}
