//! Core-elements subsampling.
//!
//! For each column of a dense slice, keep the `s = max(1, floor(n * rate))`
//! entries of largest magnitude and zero the rest. Equal magnitudes are
//! ordered by row index, smallest first, so the retained set is unique.
//!
//! Selection finds the `s`-th largest magnitude in expected linear time; one
//! pass over the column then emits every entry above it, plus the earliest
//! rows tied with it.

use std::cell::RefCell;

use ndarray::{Array2, ArrayView2};

use crate::config::{retained_count, validate_rate};
use crate::error::{Error, Result};
use crate::linalg::RowSource;

/// Masked copy of a dense `n_rows x n_cols` slice, stored column-wise with
/// only the retained `(row, value)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSketch {
    n_rows: usize,
    n_cols: usize,
    col_ptr: Vec<usize>,
    rows: Vec<u32>,
    values: Vec<f64>,
}

impl SparseSketch {
    /// Builds a sketch from per-column `(row, value)` lists. Rows must be in
    /// range and strictly increasing within each column.
    pub fn from_columns(n_rows: usize, columns: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n_cols = columns.len();
        let mut col_ptr = Vec::with_capacity(n_cols + 1);
        col_ptr.push(0);
        let mut rows = Vec::new();
        let mut values = Vec::new();
        for col in columns {
            for (k, &(r, v)) in col.iter().enumerate() {
                if r >= n_rows {
                    return Err(Error::IndexOutOfRange { index: r, len: n_rows });
                }
                if k > 0 && col[k - 1].0 >= r {
                    return Err(Error::Format("sketch rows must be strictly increasing per column".into()));
                }
                rows.push(r as u32);
                values.push(v);
            }
            col_ptr.push(rows.len());
        }
        Ok(SparseSketch {
            n_rows,
            n_cols,
            col_ptr,
            rows,
            values,
        })
    }

    /// Compressed-column parts, already validated by the caller.
    pub(crate) fn from_parts(n_rows: usize, col_ptr: Vec<usize>, rows: Vec<u32>, values: Vec<f64>) -> Self {
        debug_assert_eq!(col_ptr.last(), Some(&rows.len()));
        SparseSketch {
            n_rows,
            n_cols: col_ptr.len() - 1,
            col_ptr,
            rows,
            values,
        }
    }

    /// Keeps the entries of `x` where `keep(row, col)` is true.
    pub fn from_mask(x: &ArrayView2<f64>, keep: impl Fn(usize, usize) -> bool) -> Self {
        let (n, p) = x.dim();
        let mut columns = vec![Vec::new(); p];
        for (c, col) in columns.iter_mut().enumerate() {
            for r in 0..n {
                if keep(r, c) {
                    col.push((r, x[[r, c]]));
                }
            }
        }
        Self::from_columns(n, columns).expect("rows generated in order")
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Retained rows (ascending) and values of column `c`.
    pub fn column(&self, c: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.col_ptr[c], self.col_ptr[c + 1]);
        (&self.rows[a..b], &self.values[a..b])
    }

    pub fn kept_per_column(&self) -> Vec<usize> {
        self.col_ptr.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// True when every entry of the source slice was retained.
    pub fn is_complete(&self) -> bool {
        self.nnz() == self.n_rows * self.n_cols
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows, self.n_cols));
        for c in 0..self.n_cols {
            let (rows, vals) = self.column(c);
            for (&r, &v) in rows.iter().zip(vals) {
                out[[r as usize, c]] = v;
            }
        }
        out
    }
}

const SAMPLE: usize = 64;

#[derive(Default)]
struct Workspace {
    floors: Vec<f64>,
    hits: Vec<u64>,
    lens: Vec<usize>,
    cand_rows: Vec<u32>,
    cand_vals: Vec<f64>,
    sample: Vec<u64>,
    scratch: Vec<u64>,
}

thread_local! {
    // large fresh allocations are page-faulted in on every slice
    static WORKSPACE: RefCell<Workspace> = RefCell::new(Workspace::default());
}

fn mag(v: f64) -> u64 {
    v.abs().to_bits()
}

/// Packs eight 0/1 bytes into the low eight bits, byte `i` to bit `i`.
fn pack8(bytes: &[u8]) -> u64 {
    let g = u64::from_le_bytes(bytes.try_into().expect("eight bytes"));
    g.wrapping_mul(0x0102_0408_1020_4080) >> 56
}

/// Guess at a value no larger than the `s`-th largest of `n`, from a sample
/// of them. The caller checks the guess.
fn sampled_floor(sample: &mut [u64], n: usize, s: usize) -> f64 {
    let m = sample.len();
    let j = (m * s).div_ceil(n) * 3 / 2 + 3;
    if j >= m {
        return 0.0;
    }
    f64::from_bits(*sample.select_nth_unstable(m - j).1)
}

/// Appends the `s` largest-magnitude candidates (listed in row order) to
/// `rows`/`values`, ascending. Entries tied with the threshold are taken
/// from the smallest rows.
fn push_top(cand_rows: &[u32], cand_vals: &[f64], s: usize, scratch: &mut Vec<u64>, rows: &mut Vec<u32>, values: &mut Vec<f64>) {
    let len = cand_rows.len();
    if s >= len {
        rows.extend_from_slice(cand_rows);
        values.extend_from_slice(cand_vals);
        return;
    }
    scratch.clear();
    scratch.extend(cand_vals.iter().map(|&v| mag(v)));
    let cut = len - s;
    let threshold = *scratch.select_nth_unstable(cut).1;
    let above = scratch[cut + 1..].iter().filter(|&&v| v > threshold).count();
    let mut ties = s - above;
    let start = rows.len();
    rows.resize(start + len + 1, 0);
    values.resize(start + len + 1, 0.0);
    let mut m = start;
    for (&k, &v) in cand_rows.iter().zip(cand_vals) {
        let a = mag(v);
        let tie = (a == threshold) as usize & (ties > 0) as usize;
        rows[m] = k;
        values[m] = v;
        m += (a > threshold) as usize | tie;
        ties -= tie;
    }
    rows.truncate(m);
    values.truncate(m);
}

/// Sketches an arbitrary row source (used for both dense slices and indexed
/// factor rows).
///
/// Each column gets a floor from a strided sample of rows, and one pass
/// over the rows collects every entry at or above its column's floor. When
/// at least `s` entries survive, the floor is below the true threshold and
/// the exact selection runs on the survivors alone; otherwise the column is
/// redone in full.
pub(crate) fn sketch_rows<S: RowSource>(x: &S, rate: f64) -> SparseSketch {
    let (n, p) = (x.n_rows(), x.n_cols());
    let s = retained_count(n, rate);
    let mut col_ptr = Vec::with_capacity(p + 1);
    col_ptr.push(0);
    let mut rows = Vec::with_capacity(s.min(n) * p + 1);
    let mut values = Vec::with_capacity(s.min(n) * p + 1);
    if s >= n {
        for c in 0..p {
            for k in 0..n {
                rows.push(k as u32);
                values.push(x.row(k)[c]);
            }
            col_ptr.push(rows.len());
        }
    } else {
        WORKSPACE.with_borrow_mut(|w| {
            let words = p.div_ceil(64);
            w.floors.clear();
            w.floors.resize(words * 64, 0.0);
            if n >= 4 * SAMPLE {
                let stride = n / SAMPLE;
                w.sample.resize(p * SAMPLE, 0);
                for k in 0..SAMPLE {
                    for (c, &v) in x.row(k * stride).iter().enumerate() {
                        w.sample[c * SAMPLE + k] = mag(v);
                    }
                }
                for c in 0..p {
                    w.floors[c] = sampled_floor(&mut w.sample[c * SAMPLE..(c + 1) * SAMPLE], n, s);
                }
            }

            // bit c of hits[k * words + c / 64]: entry (k, c) clears its floor
            w.hits.clear();
            w.hits.resize(n * words, 0);
            let mut flags = vec![0u8; words * 64];
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            for k in 0..n {
                for ((f, &v), &floor) in flags.iter_mut().zip(x.row(k)).zip(&w.floors) {
                    // NaN magnitudes sort above everything, so keep them
                    *f = !(v.abs() < floor) as u8;
                }
                for (word, chunk) in w.hits[k * words..(k + 1) * words].iter_mut().zip(flags.chunks_exact(64)) {
                    *word = chunk.chunks_exact(8).enumerate().fold(0, |acc, (i, g)| acc | pack8(g) << (8 * i));
                }
            }

            w.lens.clear();
            w.lens.resize(p, 0);
            w.cand_rows.resize(n * p, 0);
            w.cand_vals.resize(n * p, 0.0);
            for k in 0..n {
                let row = x.row(k);
                for (i, &word) in w.hits[k * words..(k + 1) * words].iter().enumerate() {
                    let mut bits = word;
                    while bits != 0 {
                        let c = i * 64 + bits.trailing_zeros() as usize;
                        bits &= bits - 1;
                        let at = c * n + w.lens[c];
                        w.cand_rows[at] = k as u32;
                        w.cand_vals[at] = row[c];
                        w.lens[c] += 1;
                    }
                }
            }

            for c in 0..p {
                let base = c * n;
                if w.lens[c] < s {
                    for k in 0..n {
                        w.cand_rows[base + k] = k as u32;
                        w.cand_vals[base + k] = x.row(k)[c];
                    }
                    w.lens[c] = n;
                }
                let end = base + w.lens[c];
                push_top(&w.cand_rows[base..end], &w.cand_vals[base..end], s, &mut w.scratch, &mut rows, &mut values);
                col_ptr.push(rows.len());
            }
        });
    }
    SparseSketch {
        n_rows: n,
        n_cols: p,
        col_ptr,
        rows,
        values,
    }
}

/// Core-elements sketch of a dense `n x p` slice.
pub fn ces_sketch(x: &ArrayView2<f64>, rate: f64) -> Result<SparseSketch> {
    validate_rate(rate)?;
    if x.nrows() == 0 {
        return Err(Error::Degenerate("cannot sketch a slice with no rows".into()));
    }
    let x = x.as_standard_layout();
    let view = x.view();
    Ok(sketch_rows(&crate::linalg::DenseRows::new(&view), rate))
}

/// `X*^T X` and `X*^T y` for a sketch of the rows of `x`, touching only the
/// retained entries: row `c` of the product is `sum_k v_kc * x_k`.
pub(crate) fn sketch_products<S: RowSource>(sketch: &SparseSketch, x: &S, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let p = x.n_cols();
    let mut gram = vec![0.0; p * p];
    let mut rhs = vec![0.0; p];
    for c in 0..sketch.n_cols {
        let (rows, vals) = sketch.column(c);
        let g = &mut gram[c * p..(c + 1) * p];
        let mut acc = 0.0;
        for (&r, &v) in rows.iter().zip(vals) {
            let r = r as usize;
            acc += v * y[r];
            for (gb, xb) in g.iter_mut().zip(x.row(r)) {
                *gb += v * xb;
            }
        }
        rhs[c] = acc;
    }
    (gram, rhs)
}

/// `X*^T X` (row-major `p x p`) from the sketch and its dense source.
pub fn sketch_gram(sketch: &SparseSketch, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.dim() != (sketch.n_rows, sketch.n_cols) {
        return Err(Error::DimensionMismatch(format!(
            "sketch is {}x{} but slice is {:?}",
            sketch.n_rows,
            sketch.n_cols,
            x.dim()
        )));
    }
    let x = x.as_standard_layout();
    let view = x.view();
    let zeros = vec![0.0; sketch.n_rows];
    let (g, _) = sketch_products(sketch, &crate::linalg::DenseRows::new(&view), &zeros);
    Ok(Array2::from_shape_vec((sketch.n_cols, sketch.n_cols), g).expect("p x p"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn retained_rows(sk: &SparseSketch, c: usize) -> Vec<usize> {
        sk.column(c).0.iter().map(|&r| r as usize).collect()
    }

    #[test]
    fn rate_one_keeps_everything() {
        let x = array![[1.0, -2.0], [0.0, 3.0], [4.0, 0.5]];
        let sk = ces_sketch(&x.view(), 1.0).unwrap();
        assert!(sk.is_complete());
        assert_eq!(sk.to_dense(), x);
    }

    #[test]
    fn hand_case_keeps_sign() {
        let x = array![[3.0], [-5.0], [1.0], [0.0]];
        let sk = ces_sketch(&x.view(), 0.5).unwrap();
        assert_eq!(sk.column(0), (&[0u32, 1][..], &[3.0, -5.0][..]));
    }

    #[test]
    fn ties_prefer_smaller_rows() {
        let x = array![[1.0], [-2.0], [2.0], [2.0], [-1.0]];
        let sk = ces_sketch(&x.view(), 0.4).unwrap();
        assert_eq!(retained_rows(&sk, 0), vec![1, 2]);
        let zeros = Array2::<f64>::zeros((6, 1));
        let sk = ces_sketch(&zeros.view(), 0.5).unwrap();
        assert_eq!(retained_rows(&sk, 0), vec![0, 1, 2]);
    }

    #[test]
    fn matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &rate in &[0.1, 0.3, 0.7] {
            let x = Array2::from_shape_fn((20, 4), |_| rng.random_range(-3.0..3.0));
            let sk = ces_sketch(&x.view(), rate).unwrap();
            let s = retained_count(20, rate);
            for c in 0..4 {
                let mut order: Vec<usize> = (0..20).collect();
                order.sort_by(|&a, &b| {
                    x[[b, c]].abs().partial_cmp(&x[[a, c]].abs()).unwrap().then(a.cmp(&b))
                });
                let mut expect = order[..s].to_vec();
                expect.sort();
                assert_eq!(retained_rows(&sk, c), expect);
            }
        }
    }

    fn oracle_rows(x: &Array2<f64>, c: usize, s: usize) -> Vec<usize> {
        let n = x.nrows();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| x[[b, c]].abs().partial_cmp(&x[[a, c]].abs()).unwrap().then(a.cmp(&b)));
        let mut top = order[..s].to_vec();
        top.sort();
        top
    }

    #[test]
    fn long_columns_match_sort() {
        // long enough for the sampled floor; few distinct values force ties,
        // large values on the sample stride force the fallback
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..60 {
            let n = rng.random_range(256..2500);
            let few = trial % 3 == 0;
            let mut x = Array2::from_shape_fn((n, 3), |_| {
                if few {
                    rng.random_range(-2..3) as f64
                } else {
                    rng.random_range(-1.0..1.0)
                }
            });
            if trial % 4 == 0 {
                for k in (0..n).step_by(n / SAMPLE) {
                    x[[k, 1]] = 9.0;
                }
            }
            let rate = rng.random_range(0.001..0.9);
            let s = retained_count(n, rate);
            let sk = ces_sketch(&x.view(), rate).unwrap();
            for c in 0..3 {
                assert_eq!(retained_rows(&sk, c), oracle_rows(&x, c, s), "n={n} s={s} c={c}");
            }
        }
    }

    #[test]
    fn minimum_budget_is_one() {
        let x = array![[0.5], [2.0], [1.0]];
        let sk = ces_sketch(&x.view(), 0.1).unwrap();
        assert_eq!(sk.kept_per_column(), vec![1]);
        assert_eq!(retained_rows(&sk, 0), vec![1]);
    }

    #[test]
    fn rejects_bad_rates() {
        let x = array![[1.0]];
        assert!(ces_sketch(&x.view(), 0.0).is_err());
        assert!(ces_sketch(&x.view(), 1.01).is_err());
        assert!(ces_sketch(&Array2::<f64>::zeros((0, 2)).view(), 0.5).is_err());
    }

    #[test]
    fn sparse_product_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let n = rng.random_range(1..15);
            let p = rng.random_range(1..6);
            let x = Array2::from_shape_fn((n, p), |_| rng.random_range(-2.0..2.0));
            let sk = ces_sketch(&x.view(), rng.random_range(0.05..1.0)).unwrap();
            let dense = sk.to_dense().t().dot(&x);
            let got = sketch_gram(&sk, &x.view()).unwrap();
            for (a, b) in got.iter().zip(dense.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn from_columns_validates() {
        assert!(SparseSketch::from_columns(2, vec![vec![(2, 1.0)]]).is_err());
        assert!(SparseSketch::from_columns(3, vec![vec![(1, 1.0), (1, 2.0)]]).is_err());
    }
}
