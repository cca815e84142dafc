//! Interaction data: loading, per-user splitting, and the sparsity quartiles
//! that drive both augmentation budgets and group-wise evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
}

impl Interaction {
    pub fn new(user: u32, item: u32) -> Self {
        Self { user, item }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionDataset {
    num_users: usize,
    num_items: usize,
    train: Vec<Interaction>,
    val: Vec<Interaction>,
    test: Vec<Interaction>,
    histories: Vec<Vec<u32>>,
    val_items: Vec<Vec<u32>>,
    test_items: Vec<Vec<u32>>,
}

fn group_by_user(pairs: &[Interaction], num_users: usize) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new(); num_users];
    for p in pairs {
        out[p.user as usize].push(p.item);
    }
    for items in &mut out {
        items.sort_unstable();
    }
    out
}

fn check_split(
    name: &str,
    pairs: &[Interaction],
    num_users: usize,
    num_items: usize,
) -> Result<Vec<Vec<u32>>> {
    for p in pairs {
        if p.user as usize >= num_users || p.item as usize >= num_items {
            return Err(Error::Invariant(format!(
                "{name} pair ({}, {}) outside {num_users}x{num_items}",
                p.user, p.item
            )));
        }
    }
    let grouped = group_by_user(pairs, num_users);
    for (u, items) in grouped.iter().enumerate() {
        if items.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invariant(format!(
                "duplicate pair for user {u} in {name}"
            )));
        }
    }
    Ok(grouped)
}

fn sorted_intersects(a: &[u32], b: &[u32]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

impl InteractionDataset {
    /// Builds a dataset from explicit splits, validating index ranges,
    /// per-split uniqueness, and per-user disjointness of the three splits.
    pub fn from_splits(
        num_users: usize,
        num_items: usize,
        mut train: Vec<Interaction>,
        mut val: Vec<Interaction>,
        mut test: Vec<Interaction>,
    ) -> Result<Self> {
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        let histories = check_split("train", &train, num_users, num_items)?;
        let val_items = check_split("val", &val, num_users, num_items)?;
        let test_items = check_split("test", &test, num_users, num_items)?;
        for u in 0..num_users {
            if sorted_intersects(&histories[u], &val_items[u])
                || sorted_intersects(&histories[u], &test_items[u])
                || sorted_intersects(&val_items[u], &test_items[u])
            {
                return Err(Error::Invariant(format!(
                    "splits overlap for user {u}"
                )));
            }
        }
        Ok(Self {
            num_users,
            num_items,
            train,
            val,
            test,
            histories,
            val_items,
            test_items,
        })
    }

    /// Splits `pairs` per user with [`split_dataset`] and wraps the result.
    pub fn split_from(
        num_users: usize,
        num_items: usize,
        pairs: &[Interaction],
        seed: u64,
    ) -> Result<Self> {
        let (train, val, test) = split_dataset(pairs, seed);
        Self::from_splits(num_users, num_items, train, val, test)
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn train(&self) -> &[Interaction] {
        &self.train
    }

    pub fn val(&self) -> &[Interaction] {
        &self.val
    }

    pub fn test(&self) -> &[Interaction] {
        &self.test
    }

    /// Train-only per-user item sets, sorted ascending.
    pub fn histories(&self) -> &[Vec<u32>] {
        &self.histories
    }

    pub fn history(&self, user: usize) -> &[u32] {
        &self.histories[user]
    }

    pub fn held_out(&self, split: Split) -> &[Vec<u32>] {
        match split {
            Split::Val => &self.val_items,
            Split::Test => &self.test_items,
        }
    }

    pub fn total_interactions(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Val => f.write_str("val"),
            Split::Test => f.write_str("test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    pub num_users: Option<usize>,
    pub num_items: Option<usize>,
}

/// Raw pairs read from a TSV file together with the inferred index extents.
#[derive(Debug, Clone)]
pub struct PairFile {
    pub pairs: Vec<Interaction>,
    pub num_users: usize,
    pub num_items: usize,
}

/// Reads `user<TAB>item` lines. `#` comments and blank lines are skipped; the
/// first data line may be a non-numeric header. Duplicate pairs are dropped.
pub fn read_pairs(path: &Path, options: LoadOptions) -> Result<PairFile> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    let mut seen_data_line = false;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split('\t');
        let (Some(a), Some(b)) = (fields.next(), fields.next()) else {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected two tab-separated fields, got '{trimmed}'"),
            });
        };
        let parsed = (a.trim().parse::<u32>(), b.trim().parse::<u32>());
        let (user, item) = match parsed {
            (Ok(u), Ok(i)) => (u, i),
            _ if !seen_data_line && (a.trim().parse::<f64>().is_err()) => {
                // header
                seen_data_line = true;
                continue;
            }
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("non-integer id in '{trimmed}'"),
                })
            }
        };
        seen_data_line = true;
        if let Some(m) = options.num_users {
            if user as usize >= m {
                return Err(Error::Bounds {
                    line: line_no,
                    message: format!("user {user} >= {m}"),
                });
            }
        }
        if let Some(n) = options.num_items {
            if item as usize >= n {
                return Err(Error::Bounds {
                    line: line_no,
                    message: format!("item {item} >= {n}"),
                });
            }
        }
        pairs.push(Interaction::new(user, item));
    }
    if pairs.is_empty() {
        return Err(Error::NoInteractions);
    }
    let before = pairs.len();
    pairs.sort_unstable();
    pairs.dedup();
    if pairs.len() < before {
        log::warn!(
            "{}: dropped {} duplicate pairs",
            path.display(),
            before - pairs.len()
        );
    }
    let num_users = options
        .num_users
        .unwrap_or_else(|| pairs.iter().map(|p| p.user as usize + 1).max().unwrap_or(0));
    let num_items = options
        .num_items
        .unwrap_or_else(|| pairs.iter().map(|p| p.item as usize + 1).max().unwrap_or(0));
    Ok(PairFile {
        pairs,
        num_users,
        num_items,
    })
}

/// Loads an interaction file as an unsplit dataset: every pair lands in train.
pub fn load_interactions(path: &Path, options: LoadOptions) -> Result<InteractionDataset> {
    let file = read_pairs(path, options)?;
    InteractionDataset::from_splits(
        file.num_users,
        file.num_items,
        file.pairs,
        Vec::new(),
        Vec::new(),
    )
}

/// Per-user 3:1:1 partition. A user with `n` interactions gets
/// `round(n/5)` validation and test items each; users too small to fill all
/// three splits keep everything in train.
pub fn split_dataset(
    pairs: &[Interaction],
    seed: u64,
) -> (Vec<Interaction>, Vec<Interaction>, Vec<Interaction>) {
    let mut by_user: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for p in pairs {
        by_user.entry(p.user).or_default().push(p.item);
    }
    let mut rng = seed::rng_for(seed, "split");
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (user, mut items) in by_user {
        items.sort_unstable();
        items.dedup();
        items.shuffle(&mut rng);
        let n = items.len();
        let held = ((n as f64) * 0.2).round() as usize;
        let held = if n < 3 { 0 } else { held };
        if held == 0 {
            log::debug!("user {user}: {n} interactions, all kept in train");
        }
        let (t, rest) = items.split_at(n - 2 * held);
        let (v, s) = rest.split_at(held);
        train.extend(t.iter().map(|&i| Interaction::new(user, i)));
        val.extend(v.iter().map(|&i| Interaction::new(user, i)));
        test.extend(s.iter().map(|&i| Interaction::new(user, i)));
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    (train, val, test)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SparsityGroup {
    U1,
    U2,
    U3,
    U4,
}

impl SparsityGroup {
    pub const ALL: [SparsityGroup; 4] = [Self::U1, Self::U2, Self::U3, Self::U4];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SparsityGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "U{}", self.index() + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityProfile {
    pub q25: usize,
    pub q50: usize,
    pub q75: usize,
    pub group_of: Vec<SparsityGroup>,
}

impl SparsityProfile {
    pub fn quantiles(&self) -> [usize; 3] {
        [self.q25, self.q50, self.q75]
    }

    pub fn classify(&self, count: usize) -> SparsityGroup {
        if count < self.q25 {
            SparsityGroup::U1
        } else if count < self.q50 {
            SparsityGroup::U2
        } else if count < self.q75 {
            SparsityGroup::U3
        } else {
            SparsityGroup::U4
        }
    }

    /// Smallest quartile strictly above `count`, if any.
    pub fn next_tier(&self, count: usize) -> Option<usize> {
        self.quantiles().into_iter().find(|&q| count < q)
    }
}

/// Nearest-rank quantile (rank = ceil(num/den * M)) over sorted counts.
fn nearest_rank(sorted: &[usize], num: usize, den: usize) -> usize {
    let m = sorted.len();
    let rank = (num * m).div_ceil(den).max(1);
    sorted[rank - 1]
}

pub fn compute_quantiles(histories: &[Vec<u32>]) -> SparsityProfile {
    let counts: Vec<usize> = histories.iter().map(Vec::len).collect();
    quantiles_from_counts(&counts)
}

pub fn quantiles_from_counts(counts: &[usize]) -> SparsityProfile {
    assert!(!counts.is_empty(), "quantiles need at least one user");
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let mut profile = SparsityProfile {
        q25: nearest_rank(&sorted, 1, 4),
        q50: nearest_rank(&sorted, 2, 4),
        q75: nearest_rank(&sorted, 3, 4),
        group_of: Vec::new(),
    };
    profile.group_of = counts.iter().map(|&c| profile.classify(c)).collect();
    profile
}

fn write_pairs(path: &Path, pairs: &[Interaction]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        writeln!(w, "{}\t{}", p.user, p.item).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_interactions(path: &Path, pairs: &[Interaction]) -> Result<()> {
    write_pairs(path, pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub num_users: usize,
    pub num_items: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub train_only_users: usize,
}

pub const SPLIT_FILES: [&str; 4] = ["train.tsv", "val.tsv", "test.tsv", "split.json"];

/// Writes `train.tsv`, `val.tsv`, `test.tsv` and the `split.json` sidecar.
pub fn write_split(dir: &Path, dataset: &InteractionDataset, seed: u64) -> Result<SplitManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_pairs(&dir.join("train.tsv"), dataset.train())?;
    write_pairs(&dir.join("val.tsv"), dataset.val())?;
    write_pairs(&dir.join("test.tsv"), dataset.test())?;
    let train_only_users = (0..dataset.num_users())
        .filter(|&u| {
            !dataset.history(u).is_empty()
                && dataset.held_out(Split::Val)[u].is_empty()
                && dataset.held_out(Split::Test)[u].is_empty()
        })
        .count();
    let manifest = SplitManifest {
        seed,
        num_users: dataset.num_users(),
        num_items: dataset.num_items(),
        train: dataset.train().len(),
        val: dataset.val().len(),
        test: dataset.test().len(),
        train_only_users,
    };
    let path = dir.join("split.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_split(dir: &Path) -> Result<(InteractionDataset, SplitManifest)> {
    let path = dir.join("split.json");
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: SplitManifest = serde_json::from_slice(&raw)?;
    let options = LoadOptions {
        num_users: Some(manifest.num_users),
        num_items: Some(manifest.num_items),
    };
    let load = |name: &str| -> Result<Vec<Interaction>> {
        match read_pairs(&dir.join(name), options) {
            Ok(f) => Ok(f.pairs),
            Err(Error::NoInteractions) => Ok(Vec::new()),
            Err(e) => Err(e),
        }
    };
    let dataset = InteractionDataset::from_splits(
        manifest.num_users,
        manifest.num_items,
        load("train.tsv")?,
        load("val.tsv")?,
        load("test.tsv")?,
    )?;
    Ok((dataset, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_small_file() {
        let f = write_tmp("0\t0\n0\t1\n1\t0\n");
        let ds = load_interactions(f.path(), LoadOptions::default()).unwrap();
        assert_eq!(ds.num_users(), 2);
        assert_eq!(ds.num_items(), 2);
        assert_eq!(ds.history(0).len(), 2);
    }

    #[test]
    fn load_with_header_and_comments() {
        let f = write_tmp("user\titem\n# comment\n3\t4\n");
        let ds = load_interactions(f.path(), LoadOptions::default()).unwrap();
        assert_eq!((ds.num_users(), ds.num_items()), (4, 5));
    }

    #[test]
    fn empty_file_is_rejected() {
        let f = write_tmp("# nothing here\n");
        let err = load_interactions(f.path(), LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NoInteractions));
        assert_eq!(err.to_string(), "no interactions in input");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_tmp("0\t1\n2\tx\n");
        match load_interactions(f.path(), LoadOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_tmp("0\t1\n2 3\n");
        assert!(matches!(
            load_interactions(f.path(), LoadOptions::default()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn override_bounds_are_enforced() {
        let f = write_tmp("0\t1\n5\t1\n");
        let opts = LoadOptions {
            num_users: Some(3),
            num_items: None,
        };
        assert!(matches!(
            load_interactions(f.path(), opts),
            Err(Error::Bounds { line: 2, .. })
        ));
    }

    #[test]
    fn split_five_interactions() {
        let pairs: Vec<_> = (0..5).map(|i| Interaction::new(0, i)).collect();
        let (tr, va, te) = split_dataset(&pairs, 1);
        assert_eq!((tr.len(), va.len(), te.len()), (3, 1, 1));
    }

    #[test]
    fn split_single_interaction_stays_in_train() {
        let pairs = vec![Interaction::new(0, 3)];
        let (tr, va, te) = split_dataset(&pairs, 1);
        assert_eq!((tr.len(), va.len(), te.len()), (1, 0, 0));
    }

    #[test]
    fn split_is_deterministic() {
        let pairs: Vec<_> = (0..40)
            .map(|k| Interaction::new(k % 4, k / 4 + 10 * (k % 4)))
            .collect();
        assert_eq!(split_dataset(&pairs, 9), split_dataset(&pairs, 9));
        assert_ne!(split_dataset(&pairs, 9), split_dataset(&pairs, 10));
    }

    #[test]
    fn nearest_rank_small_example() {
        let p = quantiles_from_counts(&[1, 2, 3, 4]);
        assert_eq!(p.quantiles(), [1, 2, 3]);
    }

    #[test]
    fn constant_counts_put_everyone_in_top_group() {
        let p = quantiles_from_counts(&[6; 9]);
        assert_eq!(p.quantiles(), [6, 6, 6]);
        assert!(p.group_of.iter().all(|&g| g == SparsityGroup::U4));
    }

    #[test]
    fn quantiles_match_sort_oracle() {
        let counts = [100, 2, 10, 200, 10, 50, 10, 100];
        // oracle: sort, then take the ceil(alpha * M)-th smallest
        let mut sorted = counts.to_vec();
        sorted.sort();
        let m = sorted.len() as f64;
        let oracle = |alpha: f64| sorted[((alpha * m).ceil() as usize) - 1];
        let p = quantiles_from_counts(&counts);
        assert_eq!(p.q25, oracle(0.25));
        assert_eq!(p.q50, oracle(0.5));
        assert_eq!(p.q75, oracle(0.75));
        assert_eq!(p.quantiles(), [10, 10, 100]);
    }

    #[test]
    fn split_round_trip_through_files() {
        let pairs: Vec<_> = (0..30).map(|k| Interaction::new(k % 3, k)).collect();
        let ds = InteractionDataset::split_from(3, 30, &pairs, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_split(dir.path(), &ds, 4).unwrap();
        let (back, m2) = read_split(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(manifest, m2);
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let r = InteractionDataset::from_splits(
            1,
            2,
            vec![Interaction::new(0, 0)],
            vec![Interaction::new(0, 0)],
            vec![],
        );
        assert!(matches!(r, Err(Error::Invariant(_))));
    }

    fn arb_pairs() -> impl Strategy<Value = Vec<Interaction>> {
        prop::collection::btree_set((0u32..12, 0u32..40), 1..200)
            .prop_map(|s| s.into_iter().map(|(u, i)| Interaction::new(u, i)).collect())
    }

    proptest! {
        #[test]
        fn split_is_a_partition(pairs in arb_pairs(), seed in any::<u64>()) {
            let (tr, va, te) = split_dataset(&pairs, seed);
            let mut all: Vec<_> = tr.iter().chain(&va).chain(&te).copied().collect();
            all.sort();
            prop_assert_eq!(&all, &pairs);
            for u in 0..12u32 {
                let has = pairs.iter().any(|p| p.user == u);
                let kept = tr.iter().any(|p| p.user == u);
                prop_assert_eq!(has, kept);
            }
        }

        #[test]
        fn quantiles_monotone_under_additions(
            counts in prop::collection::vec(0usize..50, 1..40),
            who in any::<prop::sample::Index>(),
        ) {
            let before = quantiles_from_counts(&counts);
            let mut bumped = counts.clone();
            let idx = who.index(bumped.len());
            bumped[idx] += 1;
            let after = quantiles_from_counts(&bumped);
            prop_assert!(before.q25 <= after.q25);
            prop_assert!(before.q50 <= after.q50);
            prop_assert!(before.q75 <= after.q75);
            prop_assert!(after.q25 <= after.q50 && after.q50 <= after.q75);
        }

        #[test]
        fn groups_follow_thresholds(counts in prop::collection::vec(0usize..50, 1..40)) {
            let p = quantiles_from_counts(&counts);
            for (c, g) in counts.iter().zip(&p.group_of) {
                let expected = if *c < p.q25 { SparsityGroup::U1 }
                    else if *c < p.q50 { SparsityGroup::U2 }
                    else if *c < p.q75 { SparsityGroup::U3 }
                    else { SparsityGroup::U4 };
                prop_assert_eq!(*g, expected);
            }
        }
    }
}
