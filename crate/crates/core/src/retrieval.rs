//! Profile-guided augmentation of interaction histories.
//!
//! For each user: find the most similar users in the compressed profile
//! space, pool the items those neighbours interacted with (minus the user's
//! own history), rank the pool against the mean profile of the user's items
//! with a popularity penalty of `1/sqrt(count)`, and keep up to a
//! sparsity-dependent budget of them after re-ranking.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compress::CompressedEmbeddings;
use crate::data::{Interaction, SparsityProfile};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};
use crate::rerank::{CandidatePayload, DeterministicReranker, RerankRequest, Reranker};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub user: u32,
    /// (user, cosine), best first; ties by ascending index.
    pub neighbors: Vec<(u32, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub user: u32,
    /// (item, number of neighbours whose history contains it), ascending item.
    pub entries: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub item: u32,
    pub score: f64,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidates {
    pub user: u32,
    pub ranking: Vec<RankedCandidate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Original,
    Retrieved,
}

impl Provenance {
    pub fn tag(self) -> &'static str {
        match self {
            Provenance::Original => "orig",
            Provenance::Retrieved => "retr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedHistory {
    pub user: u32,
    /// Ascending item order, each tagged with where it came from.
    pub items: Vec<(u32, Provenance)>,
}

impl AugmentedHistory {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item_ids(&self) -> Vec<u32> {
        self.items.iter().map(|&(i, _)| i).collect()
    }

    pub fn retrieved(&self) -> impl Iterator<Item = u32> + '_ {
        self.items
            .iter()
            .filter(|(_, p)| *p == Provenance::Retrieved)
            .map(|&(i, _)| i)
    }

    pub fn original(&self) -> impl Iterator<Item = u32> + '_ {
        self.items
            .iter()
            .filter(|(_, p)| *p == Provenance::Original)
            .map(|&(i, _)| i)
    }
}

/// Row-normalized copy of a representation matrix used for cosine search.
#[derive(Debug, Clone)]
pub struct CosineIndex {
    unit: DenseMatrix,
    zero: Vec<bool>,
}

impl CosineIndex {
    pub fn new(reps: &DenseMatrix) -> Self {
        let mut unit = reps.clone();
        let mut zero = vec![false; reps.rows()];
        for (r, flag) in zero.iter_mut().enumerate() {
            let row = unit.row_mut(r);
            let n = linalg::norm(row);
            if n == 0.0 {
                *flag = true;
            } else {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        Self { unit, zero }
    }

    pub fn len(&self) -> usize {
        self.unit.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.unit.rows() == 0
    }

    /// Cosine between two indexed rows; `-inf` if either has zero norm.
    pub fn similarity(&self, a: usize, b: usize) -> f64 {
        if self.zero[a] || self.zero[b] {
            f64::NEG_INFINITY
        } else {
            linalg::dot(self.unit.row(a), self.unit.row(b))
        }
    }

    pub fn topk(&self, user: usize, k: usize) -> Result<NeighborSet> {
        let m = self.len();
        if user >= m {
            return Err(Error::Argument(format!("user {user} >= {m}")));
        }
        if k > m.saturating_sub(1) {
            return Err(Error::Argument(format!(
                "K={k} exceeds the {} other users",
                m.saturating_sub(1)
            )));
        }
        let mut scored: Vec<(u32, f64)> = (0..m)
            .filter(|&v| v != user)
            .map(|v| (v as u32, self.similarity(user, v)))
            .collect();
        let by_rank =
            |a: &(u32, f64), b: &(u32, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if k < scored.len() && k > 0 {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        } else {
            scored.truncate(k);
        }
        scored.sort_by(by_rank);
        Ok(NeighborSet {
            user: user as u32,
            neighbors: scored,
        })
    }
}

/// The `k` users most cosine-similar to `user`, excluding `user` itself.
pub fn topk_similar_users(
    user: usize,
    user_reps: &CompressedEmbeddings,
    k: usize,
) -> Result<NeighborSet> {
    CosineIndex::new(&user_reps.values).topk(user, k)
}

pub fn collect_candidates(
    user: usize,
    neighbors: &NeighborSet,
    histories: &[Vec<u32>],
) -> CandidateSet {
    let own = &histories[user];
    let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
    for &(v, _) in &neighbors.neighbors {
        for &item in &histories[v as usize] {
            if own.binary_search(&item).is_err() {
                *counts.entry(item).or_insert(0) += 1;
            }
        }
    }
    CandidateSet {
        user: user as u32,
        entries: counts.into_iter().collect(),
    }
}

/// Mean of the item representations over `history`.
pub fn pooled_representation(history: &[u32], item_reps: &CompressedEmbeddings) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Err(Error::Argument(
            "user has no train history to pool a representation from".into(),
        ));
    }
    let mut pooled = vec![0.0; item_reps.dim()];
    for &j in history {
        linalg::axpy(1.0, item_reps.row(j as usize), &mut pooled);
    }
    let n = history.len() as f64;
    pooled.iter_mut().for_each(|v| *v /= n);
    Ok(pooled)
}

pub fn rank_candidates(
    user: usize,
    candidates: &CandidateSet,
    item_reps: &CompressedEmbeddings,
    history: &[u32],
) -> Result<RankedCandidates> {
    let pooled = pooled_representation(history, item_reps)?;
    let mut ranking: Vec<RankedCandidate> = candidates
        .entries
        .iter()
        .map(|&(item, count)| {
            let cos = linalg::cosine(&pooled, item_reps.row(item as usize)).unwrap_or(0.0);
            RankedCandidate {
                item,
                score: cos / f64::from(count).sqrt(),
                count,
            }
        })
        .collect();
    ranking.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item.cmp(&b.item)));
    Ok(RankedCandidates {
        user: user as u32,
        ranking,
    })
}

/// Number of items to add so the user crosses the next quartile above its
/// current history size; zero at or above the top quartile.
pub fn sparsity_budget(history_size: usize, profile: &SparsityProfile) -> usize {
    match profile.next_tier(history_size) {
        Some(t) => t - history_size + 1,
        None => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub items: Vec<u32>,
    pub fell_back: bool,
}

/// Size of the candidate pool shown to the reranker.
pub fn pool_size(budget: usize, pool_cap: Option<usize>) -> usize {
    pool_cap.unwrap_or_else(|| 30.max(3 * budget)).max(budget)
}

#[derive(Debug, Clone, Copy)]
pub struct RerankContext<'a> {
    pub instruction: &'a str,
    pub item_profiles: &'a [String],
    pub pool_cap: Option<usize>,
}

impl Default for RerankContext<'_> {
    fn default() -> Self {
        Self {
            instruction: crate::rerank::DEFAULT_INSTRUCTION,
            item_profiles: &[],
            pool_cap: None,
        }
    }
}

fn deterministic_prefix(ranked: &RankedCandidates, budget: usize) -> Vec<u32> {
    ranked.ranking.iter().take(budget).map(|c| c.item).collect()
}

/// Selects at most `budget` items from the ranked pool via `reranker`.
/// Answers naming items outside the pool, repeating items, or exceeding the
/// budget are discarded in favour of the deterministic top-`budget`; a short
/// but valid answer is topped up from the ranking.
pub fn rerank(
    reranker: &dyn Reranker,
    user_profile: &str,
    ranked: &RankedCandidates,
    budget: usize,
    ctx: &RerankContext<'_>,
) -> Selection {
    if budget == 0 || ranked.ranking.is_empty() {
        return Selection {
            items: Vec::new(),
            fell_back: false,
        };
    }
    let pool: Vec<RankedCandidate> = ranked
        .ranking
        .iter()
        .take(pool_size(budget, ctx.pool_cap))
        .copied()
        .collect();
    let k = budget.min(pool.len());
    let request = RerankRequest {
        instruction: ctx.instruction.to_string(),
        user_profile: user_profile.to_string(),
        candidates: pool
            .iter()
            .map(|c| CandidatePayload {
                id: c.item,
                profile: ctx
                    .item_profiles
                    .get(c.item as usize)
                    .cloned()
                    .unwrap_or_default(),
                score: c.score,
            })
            .collect(),
        k,
    };
    let fallback = |reason: String| {
        log::warn!("user {}: reranker fallback ({reason})", ranked.user);
        Selection {
            items: deterministic_prefix(ranked, budget),
            fell_back: true,
        }
    };
    let raw = match reranker.select(&request) {
        Ok(raw) => raw,
        Err(e) => return fallback(e.to_string()),
    };
    if raw.len() > k {
        return fallback(format!("{} items returned for k={k}", raw.len()));
    }
    let mut chosen: Vec<u32> = Vec::with_capacity(k);
    for id in raw {
        let Ok(id) = u32::try_from(id) else {
            return fallback(format!("invalid id {id}"));
        };
        if !pool.iter().any(|c| c.item == id) {
            return fallback(format!("item {id} is not in the candidate pool"));
        }
        if chosen.contains(&id) {
            return fallback(format!("item {id} selected twice"));
        }
        chosen.push(id);
    }
    for c in &ranked.ranking {
        if chosen.len() >= k {
            break;
        }
        if !chosen.contains(&c.item) {
            chosen.push(c.item);
        }
    }
    Selection {
        items: chosen,
        fell_back: false,
    }
}

pub fn augment_history(user: usize, history: &[u32], selected: &[u32]) -> Result<AugmentedHistory> {
    let mut items: Vec<(u32, Provenance)> =
        history.iter().map(|&i| (i, Provenance::Original)).collect();
    for &i in selected {
        if history.binary_search(&i).is_ok() {
            return Err(Error::Invariant(format!(
                "retrieved item {i} already in history of user {user}"
            )));
        }
        items.push((i, Provenance::Retrieved));
    }
    items.sort_by_key(|&(i, _)| i);
    if items.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Invariant(format!(
            "duplicate retrieved item for user {user}"
        )));
    }
    Ok(AugmentedHistory {
        user: user as u32,
        items,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k_users: usize,
    pub pool_cap: Option<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k_users: 100,
            pool_cap: None,
        }
    }
}

/// Per-user intermediate results, kept for inspection and testing.
#[derive(Debug, Clone, PartialEq)]
pub struct UserRetrieval {
    pub neighbors: NeighborSet,
    pub candidates: CandidateSet,
    pub ranked: RankedCandidates,
    pub budget: usize,
    pub selection: Selection,
    pub augmented: AugmentedHistory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmentation {
    pub users: Vec<UserRetrieval>,
    pub k_users: usize,
    pub quantiles: [usize; 3],
    pub reranker: String,
}

impl Augmentation {
    pub fn fallback_count(&self) -> usize {
        self.users.iter().filter(|u| u.selection.fell_back).count()
    }

    pub fn augmented_histories(&self) -> Vec<Vec<u32>> {
        self.users.iter().map(|u| u.augmented.item_ids()).collect()
    }

    pub fn budgets(&self) -> Vec<usize> {
        self.users.iter().map(|u| u.budget).collect()
    }

    pub fn sidecar(&self) -> AugmentationSidecar {
        AugmentationSidecar {
            k_users: self.k_users,
            quantiles: self.quantiles,
            reranker: self.reranker.clone(),
            fallback_count: self.fallback_count(),
            budgets: self.budgets(),
            retrieved: self
                .users
                .iter()
                .map(|u| u.augmented.retrieved().count())
                .collect(),
        }
    }
}

pub struct AugmentInputs<'a> {
    pub histories: &'a [Vec<u32>],
    pub user_reps: &'a CompressedEmbeddings,
    pub item_reps: &'a CompressedEmbeddings,
    pub profile: &'a SparsityProfile,
    pub user_profiles: &'a [String],
    pub item_profiles: &'a [String],
    pub instruction: &'a str,
}

fn retrieve_user(
    user: usize,
    index: &CosineIndex,
    k_users: usize,
    inputs: &AugmentInputs<'_>,
    config: &RetrievalConfig,
    reranker: &dyn Reranker,
) -> Result<UserRetrieval> {
    let history = &inputs.histories[user];
    let neighbors = index.topk(user, k_users)?;
    let candidates = collect_candidates(user, &neighbors, inputs.histories);
    let budget = sparsity_budget(history.len(), inputs.profile);
    let ranked = if history.is_empty() {
        // no pooled representation without a history; such users get nothing
        RankedCandidates {
            user: user as u32,
            ranking: Vec::new(),
        }
    } else {
        rank_candidates(user, &candidates, inputs.item_reps, history)?
    };
    let ctx = RerankContext {
        instruction: inputs.instruction,
        item_profiles: inputs.item_profiles,
        pool_cap: config.pool_cap,
    };
    let profile_text = inputs
        .user_profiles
        .get(user)
        .map(String::as_str)
        .unwrap_or("");
    let selection = rerank(reranker, profile_text, &ranked, budget, &ctx);
    let augmented = augment_history(user, history, &selection.items)?;
    Ok(UserRetrieval {
        neighbors,
        candidates,
        ranked,
        budget,
        selection,
        augmented,
    })
}

/// Runs the whole retrieval stage for every user. Output is keyed by user and
/// independent of scheduling; `max_in_flight` bounds concurrent reranker calls.
pub fn augment_all(
    inputs: &AugmentInputs<'_>,
    config: &RetrievalConfig,
    reranker: &dyn Reranker,
    max_in_flight: Option<usize>,
) -> Result<Augmentation> {
    let m = inputs.histories.len();
    if inputs.user_reps.rows() != m {
        return Err(Error::Argument(format!(
            "{} user representations for {m} users",
            inputs.user_reps.rows()
        )));
    }
    let k_users = if config.k_users > m.saturating_sub(1) {
        log::warn!(
            "retrieval.k_users={} exceeds M-1={}; clamping",
            config.k_users,
            m.saturating_sub(1)
        );
        m.saturating_sub(1)
    } else {
        config.k_users
    };
    let index = CosineIndex::new(&inputs.user_reps.values);
    let run = || -> Result<Vec<UserRetrieval>> {
        (0..m)
            .into_par_iter()
            .map(|u| retrieve_user(u, &index, k_users, inputs, config, reranker))
            .collect()
    };
    let users = match max_in_flight {
        Some(cap) => rayon::ThreadPoolBuilder::new()
            .num_threads(cap.max(1))
            .build()
            .map_err(|e| Error::Argument(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    Ok(Augmentation {
        users,
        k_users,
        quantiles: inputs.profile.quantiles(),
        reranker: reranker.identity(),
    })
}

/// Convenience wrapper for the fully offline path.
pub fn augment_all_deterministic(
    histories: &[Vec<u32>],
    user_reps: &CompressedEmbeddings,
    item_reps: &CompressedEmbeddings,
    profile: &SparsityProfile,
    config: &RetrievalConfig,
) -> Result<Augmentation> {
    let inputs = AugmentInputs {
        histories,
        user_reps,
        item_reps,
        profile,
        user_profiles: &[],
        item_profiles: &[],
        instruction: crate::rerank::DEFAULT_INSTRUCTION,
    };
    augment_all(&inputs, config, &DeterministicReranker, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSidecar {
    pub k_users: usize,
    pub quantiles: [usize; 3],
    pub reranker: String,
    pub fallback_count: usize,
    pub budgets: Vec<usize>,
    pub retrieved: Vec<usize>,
}

/// Writes `user<TAB>item<TAB>orig|retr` rows plus the JSON sidecar.
pub fn write_augmentation(tsv: &Path, sidecar: &Path, aug: &Augmentation) -> Result<()> {
    let file = fs::File::create(tsv).map_err(|e| Error::io(tsv, e))?;
    let mut w = BufWriter::new(file);
    for u in &aug.users {
        for &(item, prov) in &u.augmented.items {
            writeln!(w, "{}\t{}\t{}", u.augmented.user, item, prov.tag())
                .map_err(|e| Error::io(tsv, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(tsv, e))?;
    fs::write(sidecar, serde_json::to_vec_pretty(&aug.sidecar())?)
        .map_err(|e| Error::io(sidecar, e))
}

/// Reads an augmentation TSV back into per-user histories of `num_users`.
pub fn read_augmentation(tsv: &Path, num_users: usize) -> Result<Vec<AugmentedHistory>> {
    let file = fs::File::open(tsv).map_err(|e| Error::io(tsv, e))?;
    let mut items: Vec<Vec<(u32, Provenance)>> = vec![Vec::new(); num_users];
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(tsv, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, got {}", fields.len())));
        }
        let user: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("bad user '{}'", fields[0])))?;
        let item: u32 = fields[1]
            .parse()
            .map_err(|_| parse_err(format!("bad item '{}'", fields[1])))?;
        let prov = match fields[2] {
            "orig" => Provenance::Original,
            "retr" => Provenance::Retrieved,
            other => return Err(parse_err(format!("bad provenance '{other}'"))),
        };
        if user >= num_users {
            return Err(Error::Bounds {
                line: idx + 1,
                message: format!("user {user} >= {num_users}"),
            });
        }
        items[user].push((item, prov));
    }
    Ok(items
        .into_iter()
        .enumerate()
        .map(|(u, mut its)| {
            its.sort_by_key(|&(i, _)| i);
            AugmentedHistory {
                user: u as u32,
                items: its,
            }
        })
        .collect())
}

/// Flattens augmented histories into interaction pairs.
pub fn augmented_pairs(histories: &[AugmentedHistory]) -> Vec<Interaction> {
    histories
        .iter()
        .flat_map(|h| h.items.iter().map(move |&(i, _)| Interaction::new(h.user, i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::Side;
    use crate::data::quantiles_from_counts;
    use crate::error::Error;

    fn reps(side: Side, rows: &[Vec<f64>]) -> CompressedEmbeddings {
        CompressedEmbeddings {
            side,
            values: DenseMatrix::from_rows(rows).unwrap(),
        }
    }

    fn profile(q: [usize; 3]) -> SparsityProfile {
        SparsityProfile {
            q25: q[0],
            q50: q[1],
            q75: q[2],
            group_of: Vec::new(),
        }
    }

    #[test]
    fn identical_vector_is_top_neighbor() {
        let r = reps(Side::User, &[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let n = topk_similar_users(0, &r, 1).unwrap();
        assert_eq!(n.neighbors, vec![(1, 1.0)]);
    }

    #[test]
    fn orthogonal_user_ties_break_by_index() {
        let r = reps(
            Side::User,
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 2.0], vec![0.0, 3.0]],
        );
        let n = topk_similar_users(0, &r, 2).unwrap();
        assert_eq!(n.neighbors, vec![(1, 0.0), (2, 0.0)]);
    }

    #[test]
    fn zero_norm_users_sink_to_the_bottom() {
        let r = reps(Side::User, &[vec![1.0, 0.0], vec![0.0, 0.0], vec![-1.0, 0.0]]);
        let n = topk_similar_users(0, &r, 2).unwrap();
        assert_eq!(n.neighbors[0], (2, -1.0));
        assert_eq!(n.neighbors[1].0, 1);
        assert_eq!(n.neighbors[1].1, f64::NEG_INFINITY);
        assert!(topk_similar_users(0, &r, 3).is_err());
    }

    #[test]
    fn candidates_exclude_own_history_and_count() {
        let histories = vec![
            vec![0, 1],
            vec![0, 1, 2],
            vec![2, 3],
            vec![2],
            vec![1],
            vec![5],
        ];
        let n = NeighborSet {
            user: 0,
            neighbors: vec![(1, 0.9), (2, 0.8), (3, 0.7), (4, 0.6), (5, 0.5)],
        };
        let c = collect_candidates(0, &n, &histories);
        assert_eq!(c.entries, vec![(2, 3), (3, 1), (5, 1)]);
        let only_known = NeighborSet {
            user: 0,
            neighbors: vec![(4, 0.6)],
        };
        assert!(collect_candidates(0, &only_known, &histories).entries.is_empty());
    }

    #[test]
    fn popularity_penalty() {
        // pooled user rep = (0.8, 0.6); item 1 has cosine 0.8 and count 4
        let items = reps(
            Side::Item,
            &[vec![0.8, 0.6], vec![1.0, 0.0], vec![1.0, 0.0]],
        );
        let cands = CandidateSet {
            user: 0,
            entries: vec![(1, 4), (2, 1)],
        };
        let ranked = rank_candidates(0, &cands, &items, &[0]).unwrap();
        assert_eq!(ranked.ranking[0].item, 2);
        assert!((ranked.ranking[1].score - 0.4).abs() < 1e-12);
    }

    #[test]
    fn empty_history_cannot_be_ranked() {
        let items = reps(Side::Item, &[vec![1.0]]);
        let cands = CandidateSet {
            user: 0,
            entries: vec![],
        };
        assert!(matches!(
            rank_candidates(0, &cands, &items, &[]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn budget_examples() {
        let p = profile([5, 10, 20]);
        assert_eq!(sparsity_budget(7, &p), 4);
        assert_eq!(sparsity_budget(25, &p), 0);
        assert_eq!(sparsity_budget(20, &p), 0);
        assert_eq!(sparsity_budget(10, &p), 11);
        assert_eq!(sparsity_budget(0, &p), 6);
    }

    fn ranked_of(n: u32) -> RankedCandidates {
        RankedCandidates {
            user: 0,
            ranking: (0..n)
                .map(|i| RankedCandidate {
                    item: 100 + i,
                    score: 1.0 - f64::from(i) * 0.01,
                    count: 1,
                })
                .collect(),
        }
    }

    struct Canned(Vec<i64>);

    impl Reranker for Canned {
        fn identity(&self) -> String {
            "canned".into()
        }

        fn select(&self, _: &RerankRequest) -> Result<Vec<i64>> {
            Ok(self.0.clone())
        }
    }

    struct Failing;

    impl Reranker for Failing {
        fn identity(&self) -> String {
            "failing".into()
        }

        fn select(&self, _: &RerankRequest) -> Result<Vec<i64>> {
            Err(Error::Rerank("timeout".into()))
        }
    }

    #[test]
    fn rerank_zero_budget_is_empty() {
        let s = rerank(
            &DeterministicReranker,
            "",
            &ranked_of(10),
            0,
            &RerankContext::default(),
        );
        assert!(s.items.is_empty() && !s.fell_back);
    }

    #[test]
    fn deterministic_rerank_takes_top() {
        let s = rerank(
            &DeterministicReranker,
            "",
            &ranked_of(10),
            3,
            &RerankContext::default(),
        );
        assert_eq!(s.items, vec![100, 101, 102]);
    }

    #[test]
    fn hallucinated_id_falls_back() {
        let s = rerank(
            &Canned(vec![105, 999]),
            "",
            &ranked_of(10),
            3,
            &RerankContext::default(),
        );
        assert!(s.fell_back);
        assert_eq!(s.items, vec![100, 101, 102]);
        let s = rerank(&Failing, "", &ranked_of(10), 2, &RerankContext::default());
        assert!(s.fell_back);
        assert_eq!(s.items, vec![100, 101]);
        let s = rerank(
            &Canned(vec![101, 101]),
            "",
            &ranked_of(10),
            2,
            &RerankContext::default(),
        );
        assert!(s.fell_back);
    }

    #[test]
    fn valid_remote_choice_is_kept_and_topped_up() {
        let s = rerank(
            &Canned(vec![107, 103]),
            "",
            &ranked_of(10),
            3,
            &RerankContext::default(),
        );
        assert!(!s.fell_back);
        assert_eq!(s.items, vec![107, 103, 100]);
    }

    #[test]
    fn pool_is_truncated() {
        assert_eq!(pool_size(2, None), 30);
        assert_eq!(pool_size(20, None), 60);
        assert_eq!(pool_size(5, Some(8)), 8);
        assert_eq!(pool_size(5, Some(2)), 5);
        // an item outside the truncated pool counts as hallucinated
        let ctx = RerankContext {
            pool_cap: Some(4),
            ..RerankContext::default()
        };
        let s = rerank(&Canned(vec![108]), "", &ranked_of(10), 2, &ctx);
        assert!(s.fell_back);
    }

    #[test]
    fn augment_examples() {
        let h: Vec<u32> = (0..7).collect();
        let a = augment_history(0, &h, &[]).unwrap();
        assert_eq!(a.item_ids(), h);
        let a = augment_history(0, &h, &[10, 11, 12, 13]).unwrap();
        assert_eq!(a.len(), 11);
        assert_eq!(a.retrieved().count(), 4);
        assert!(matches!(
            augment_history(0, &h, &[3]),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn next_tier_jump() {
        let p = profile([5, 10, 20]);
        let h: Vec<u32> = (0..7).collect();
        let budget = sparsity_budget(h.len(), &p);
        let selected: Vec<u32> = (100..100 + budget as u32).collect();
        let a = augment_history(0, &h, &selected).unwrap();
        assert_eq!(a.len(), 11);
        assert!(a.len() > p.q50);
    }

    #[test]
    fn augmentation_file_round_trip() {
        let histories = vec![vec![0, 1], vec![1, 2, 3], vec![3], vec![0, 2]];
        let p = quantiles_from_counts(&[2, 3, 1, 2]);
        let u = reps(
            Side::User,
            &[vec![1.0, 0.1], vec![0.9, 0.2], vec![0.1, 1.0], vec![0.2, 0.9]],
        );
        let i = reps(
            Side::Item,
            &[vec![1.0, 0.0], vec![0.8, 0.3], vec![0.3, 0.8], vec![0.0, 1.0]],
        );
        let cfg = RetrievalConfig {
            k_users: 2,
            pool_cap: None,
        };
        let aug = augment_all_deterministic(&histories, &u, &i, &p, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let tsv = dir.path().join("aug.tsv");
        let js = dir.path().join("aug.json");
        write_augmentation(&tsv, &js, &aug).unwrap();
        let back = read_augmentation(&tsv, 4).unwrap();
        let expected: Vec<_> = aug.users.iter().map(|u| u.augmented.clone()).collect();
        assert_eq!(back, expected);
        let side: AugmentationSidecar =
            serde_json::from_slice(&std::fs::read(&js).unwrap()).unwrap();
        assert_eq!(side.budgets, aug.budgets());
        assert_eq!(side.reranker, "deterministic");
    }
}
