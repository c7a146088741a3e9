//! Sparse rating matrix with missing values.
//!
//! Only observed cells are stored. Every entry is indexed twice: row-major
//! (items rated by each user) and column-major (users who rated each item),
//! both sorted by the secondary index.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed cell, in internal (dense) indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
}

/// Bidirectional map between external string IDs and dense indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IdMap {
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl IdMap {
    /// IDs `"0".."n-1"` mapped to themselves.
    pub fn identity(n: usize) -> Self {
        Self::from_sorted((0..n).map(|i| i.to_string()).collect())
    }

    fn from_sorted(ids: Vec<String>) -> Self {
        let lookup = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        IdMap { ids, lookup }
    }

    /// Builds a map over the distinct IDs. IDs that all parse as unsigned
    /// integers are ordered numerically, otherwise lexicographically, so the
    /// assignment does not depend on file order.
    pub fn from_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Self {
        let mut distinct: Vec<String> = ids.into_iter().map(str::to_string).collect();
        distinct.sort_unstable();
        distinct.dedup();
        let numeric: Option<Vec<u64>> = distinct.iter().map(|s| s.parse().ok()).collect();
        if let Some(nums) = numeric {
            let mut paired: Vec<(u64, String)> = nums.into_iter().zip(distinct).collect();
            paired.sort();
            distinct = paired.into_iter().map(|(_, s)| s).collect();
        }
        Self::from_sorted(distinct)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn id_of(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// Compressed index over one axis: for each outer position the sorted inner
/// indices and their ratings.
#[derive(Debug, Clone, PartialEq)]
struct AxisIndex {
    ptr: Vec<usize>,
    inner: Vec<u32>,
    values: Vec<f64>,
}

impl AxisIndex {
    fn lane(&self, k: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.ptr[k], self.ptr[k + 1]);
        (&self.inner[a..b], &self.values[a..b])
    }

    fn count(&self, k: usize) -> usize {
        self.ptr[k + 1] - self.ptr[k]
    }
}

/// Observed-entry store with dual row/column indexing. Immutable after
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingMatrix {
    n_users: usize,
    n_items: usize,
    rows: AxisIndex,
    cols: AxisIndex,
    user_ids: IdMap,
    item_ids: IdMap,
}

impl RatingMatrix {
    /// Builds from dense indices with explicit dimensions. External IDs are
    /// the indices themselves.
    pub fn new(n_users: usize, n_items: usize, entries: &[(usize, usize, f64)]) -> Result<Self> {
        Self::with_ids(IdMap::identity(n_users), IdMap::identity(n_items), entries)
    }

    /// Builds from dense indices, keeping the given external ID maps.
    pub fn with_ids(
        user_ids: IdMap,
        item_ids: IdMap,
        entries: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let (n_users, n_items) = (user_ids.len(), item_ids.len());
        for &(u, i, r) in entries {
            if u >= n_users {
                return Err(Error::IndexOutOfRange { index: u, len: n_users });
            }
            if i >= n_items {
                return Err(Error::IndexOutOfRange { index: i, len: n_items });
            }
            if !r.is_finite() {
                return Err(Error::NonFinite {
                    user: user_ids.id_of(u).to_string(),
                    item: item_ids.id_of(i).to_string(),
                    value: r,
                });
            }
        }
        let mut sorted = entries.to_vec();
        sorted.sort_unstable_by_key(|&(u, i, _)| (u, i));
        if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0 && w[0].1 == w[1].1) {
            return Err(Error::DuplicateEntry {
                user: user_ids.id_of(w[0].0).to_string(),
                item: item_ids.id_of(w[0].1).to_string(),
            });
        }

        let mut row_ptr = vec![0usize; n_users + 1];
        let mut col_ptr = vec![0usize; n_items + 1];
        for &(u, i, _) in &sorted {
            row_ptr[u + 1] += 1;
            col_ptr[i + 1] += 1;
        }
        for k in 0..n_users {
            row_ptr[k + 1] += row_ptr[k];
        }
        for k in 0..n_items {
            col_ptr[k + 1] += col_ptr[k];
        }
        let rows = AxisIndex {
            ptr: row_ptr,
            inner: sorted.iter().map(|&(_, i, _)| i as u32).collect(),
            values: sorted.iter().map(|&(_, _, r)| r).collect(),
        };
        // stable counting sort by item keeps users ascending within a column
        let mut fill = col_ptr.clone();
        let mut col_inner = vec![0u32; sorted.len()];
        let mut col_values = vec![0.0; sorted.len()];
        for &(u, i, r) in &sorted {
            let at = fill[i];
            col_inner[at] = u as u32;
            col_values[at] = r;
            fill[i] += 1;
        }
        let cols = AxisIndex {
            ptr: col_ptr,
            inner: col_inner,
            values: col_values,
        };
        Ok(RatingMatrix {
            n_users,
            n_items,
            rows,
            cols,
            user_ids,
            item_ids,
        })
    }

    /// Builds from external string IDs, remapping them to dense indices.
    pub fn from_external<U, I>(triples: impl IntoIterator<Item = (U, I, f64)>) -> Result<Self>
    where
        U: AsRef<str>,
        I: AsRef<str>,
    {
        let raw: Vec<(String, String, f64)> = triples
            .into_iter()
            .map(|(u, i, r)| (u.as_ref().to_string(), i.as_ref().to_string(), r))
            .collect();
        let users = IdMap::from_ids(raw.iter().map(|t| t.0.as_str()));
        let items = IdMap::from_ids(raw.iter().map(|t| t.1.as_str()));
        let entries: Vec<_> = raw
            .iter()
            .map(|(u, i, r)| (users.index_of(u).unwrap(), items.index_of(i).unwrap(), *r))
            .collect();
        Self::with_ids(users, items, &entries)
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn nnz(&self) -> usize {
        self.rows.values.len()
    }

    /// Items rated by `user` (ascending) and the ratings.
    pub fn user_ratings(&self, user: usize) -> (&[u32], &[f64]) {
        self.rows.lane(user)
    }

    /// Users who rated `item` (ascending) and the ratings.
    pub fn item_ratings(&self, item: usize) -> (&[u32], &[f64]) {
        self.cols.lane(item)
    }

    pub fn user_count(&self, user: usize) -> usize {
        self.rows.count(user)
    }

    pub fn item_count(&self, item: usize) -> usize {
        self.cols.count(item)
    }

    pub fn user_counts(&self) -> Vec<usize> {
        (0..self.n_users).map(|u| self.user_count(u)).collect()
    }

    pub fn item_counts(&self) -> Vec<usize> {
        (0..self.n_items).map(|i| self.item_count(i)).collect()
    }

    pub fn user_ids(&self) -> &IdMap {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &IdMap {
        &self.item_ids
    }

    /// Entries in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = Entry> + '_ {
        (0..self.n_users).flat_map(move |u| {
            let (items, vals) = self.rows.lane(u);
            items.iter().zip(vals).map(move |(&i, &r)| Entry {
                user: u,
                item: i as usize,
                rating: r,
            })
        })
    }

    pub fn triples(&self) -> Vec<(usize, usize, f64)> {
        self.entries().map(|e| (e.user, e.item, e.rating)).collect()
    }

    /// Swaps the roles of users and items.
    pub fn transpose(&self) -> RatingMatrix {
        RatingMatrix {
            n_users: self.n_items,
            n_items: self.n_users,
            rows: self.cols.clone(),
            cols: self.rows.clone(),
            user_ids: self.item_ids.clone(),
            item_ids: self.user_ids.clone(),
        }
    }

    /// Same dimensions and ID maps, different entries.
    pub fn restrict(&self, entries: &[(usize, usize, f64)]) -> Result<Self> {
        Self::with_ids(self.user_ids.clone(), self.item_ids.clone(), entries)
    }

    /// Reads the `user,item,rating[,date]` CSV format. The date column, if
    /// present, is ignored.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let position = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
        let (Some(pu), Some(pi), Some(pr)) = (position("user"), position("item"), position("rating"))
        else {
            return Err(Error::Format(format!(
                "expected header user,item,rating[,date], found {:?}",
                headers.iter().collect::<Vec<_>>()
            )));
        };
        let mut triples = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let field = |k: usize| record.get(k).unwrap_or("");
            let rating: f64 = field(pr).parse().map_err(|_| {
                Error::Format(format!("line {}: bad rating {:?}", line + 2, field(pr)))
            })?;
            triples.push((field(pu).to_string(), field(pi).to_string(), rating));
        }
        Self::from_external(triples)
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(f)
    }

    /// Writes the rating-triple CSV with external IDs, row-major order.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["user", "item", "rating"])?;
        for e in self.entries() {
            w.write_record([
                self.user_ids.id_of(e.user),
                self.item_ids.id_of(e.item),
                &format_rating(e.rating),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn format_rating(r: f64) -> String {
    format!("{r:?}")
}

/// Builds a matrix from integer IDs, inferring the dimensions from the IDs.
pub fn build_rating_matrix(triples: &[(u64, u64, f64)]) -> Result<RatingMatrix> {
    RatingMatrix::from_external(
        triples
            .iter()
            .map(|&(u, i, r)| (u.to_string(), i.to_string(), r)),
    )
}

/// Train/test partition of a rating matrix.
#[derive(Debug, Clone)]
pub struct HoldoutSplit {
    /// Same dimensions and ID maps as the source.
    pub train: RatingMatrix,
    pub test: Vec<(usize, usize, f64)>,
    pub fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fold {
    Train,
    Test,
}

impl HoldoutSplit {
    /// Writes the `user,item,rating,fold` manifest (external IDs).
    pub fn write_manifest<W: Write>(&self, writer: W) -> Result<()> {
        let mut rows: Vec<(usize, usize, f64, &str)> = self
            .train
            .entries()
            .map(|e| (e.user, e.item, e.rating, "train"))
            .chain(self.test.iter().map(|&(u, i, r)| (u, i, r, "test")))
            .collect();
        rows.sort_by_key(|&(u, i, _, _)| (u, i));
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["user", "item", "rating", "fold"])?;
        let (users, items) = (self.train.user_ids(), self.train.item_ids());
        for (u, i, r, fold) in rows {
            w.write_record([users.id_of(u), items.id_of(i), &format_rating(r), fold])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Reads a manifest back into a split over a freshly built ID space.
    pub fn read_manifest<R: Read>(reader: R) -> Result<HoldoutSplit> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut all = Vec::new();
        let mut folds = Vec::new();
        for record in rdr.records() {
            let record = record?;
            if record.len() < 4 {
                return Err(Error::Format("split manifest needs 4 columns".into()));
            }
            let rating: f64 = record[2]
                .parse()
                .map_err(|_| Error::Format(format!("bad rating {:?}", &record[2])))?;
            let fold = match &record[3] {
                "train" => Fold::Train,
                "test" => Fold::Test,
                other => return Err(Error::Format(format!("bad fold {other:?}"))),
            };
            all.push((record[0].to_string(), record[1].to_string(), rating));
            folds.push(fold);
        }
        let full = RatingMatrix::from_external(all.iter().map(|(u, i, r)| (u.as_str(), i.as_str(), *r)))?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for ((u, i, r), fold) in all.iter().zip(folds) {
            let t = (
                full.user_ids().index_of(u).unwrap(),
                full.item_ids().index_of(i).unwrap(),
                *r,
            );
            match fold {
                Fold::Train => train.push(t),
                Fold::Test => test.push(t),
            }
        }
        let n = train.len() + test.len();
        Ok(HoldoutSplit {
            fraction: test.len() as f64 / n.max(1) as f64,
            train: full.restrict(&train)?,
            test,
            seed: 0,
        })
    }
}

/// Randomly holds out `round(fraction_test * nnz)` entries.
///
/// Selection is stratified by user first (each user with at least two ratings
/// contributes `floor(fraction * n_u)` entries while keeping at least one
/// training rating), then the shortfall is drawn globally from entries whose
/// user and item both keep a training rating. Only if that is still not
/// enough are cold-start removals allowed.
pub fn split_holdout(r: &RatingMatrix, fraction_test: f64, seed: u64) -> Result<HoldoutSplit> {
    if !(fraction_test > 0.0 && fraction_test < 1.0) {
        return Err(Error::config(format!(
            "test fraction must lie in (0, 1), got {fraction_test}"
        )));
    }
    let n = r.nnz();
    let target = (fraction_test * n as f64).round() as usize;
    if target >= n {
        return Err(Error::EmptyTrainingSet(format!(
            "holding out {target} of {n} entries leaves nothing to train on"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let triples = r.triples();
    let mut in_test = vec![false; n];
    let mut user_train = r.user_counts();
    let mut item_train = r.item_counts();
    let mut taken = 0usize;

    // entries are row-major, so user u occupies a contiguous block
    let mut start = 0usize;
    for u in 0..r.n_users() {
        let count = r.user_count(u);
        let block: Vec<usize> = (start..start + count).collect();
        start += count;
        if count < 2 {
            continue;
        }
        let quota = ((fraction_test * count as f64).floor() as usize).min(count - 1);
        let quota = quota.min(target - taken);
        let mut candidates = block;
        candidates.shuffle(&mut rng);
        let mut picked = 0;
        for k in candidates {
            if picked == quota {
                break;
            }
            let item = triples[k].1;
            if item_train[item] < 2 {
                continue;
            }
            in_test[k] = true;
            user_train[u] -= 1;
            item_train[item] -= 1;
            picked += 1;
        }
        taken += picked;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for &k in &order {
        if taken == target {
            break;
        }
        let (u, i, _) = triples[k];
        if !in_test[k] && user_train[u] >= 2 && item_train[i] >= 2 {
            in_test[k] = true;
            user_train[u] -= 1;
            item_train[i] -= 1;
            taken += 1;
        }
    }
    for &k in &order {
        if taken == target {
            break;
        }
        if !in_test[k] {
            in_test[k] = true;
            taken += 1;
        }
    }

    let (mut train, mut test) = (Vec::with_capacity(n - target), Vec::with_capacity(target));
    for (k, t) in triples.into_iter().enumerate() {
        if in_test[k] {
            test.push(t);
        } else {
            train.push(t);
        }
    }
    Ok(HoldoutSplit {
        train: r.restrict(&train)?,
        test,
        fraction: fraction_test,
        seed,
    })
}
