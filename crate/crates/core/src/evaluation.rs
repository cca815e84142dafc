//! Full-ranking top-N evaluation, sparsity-group breakdown and multi-seed
//! significance testing.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{InteractionDataset, SparsityGroup, SparsityProfile, Split};
use crate::error::{Error, Result};
use crate::model::EncoderOutput;

pub const CUTOFFS: [usize; 2] = [10, 20];

/// Items outside `mask` (sorted) by descending `e_u . e_i`, ties by index.
/// At most `top` items are returned.
pub fn full_rank(output: &EncoderOutput, user: usize, mask: &[u32], top: usize) -> Vec<u32> {
    let scores: Vec<f64> = (0..output.num_items()).map(|i| output.score(user, i)).collect();
    rank_scores(&scores, mask, top)
}

pub fn rank_scores(scores: &[f64], mask: &[u32], top: usize) -> Vec<u32> {
    let mut order: Vec<u32> = (0..scores.len() as u32)
        .filter(|i| mask.binary_search(i).is_err())
        .collect();
    let cmp = |a: &u32, b: &u32| {
        scores[*b as usize]
            .total_cmp(&scores[*a as usize])
            .then(a.cmp(b))
    };
    if top < order.len() {
        order.select_nth_unstable_by(top, cmp);
        order.truncate(top);
    }
    order.sort_unstable_by(cmp);
    order
}

pub fn recall_at(ranked: &[u32], test: &[u32], n: usize) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let hits = ranked.iter().take(n).filter(|i| test.contains(i)).count();
    hits as f64 / test.len() as f64
}

pub fn ndcg_at(ranked: &[u32], test: &[u32], n: usize) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let dcg: f64 = ranked
        .iter()
        .take(n)
        .enumerate()
        .filter(|(_, i)| test.contains(i))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..test.len().min(n)).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    dcg / idcg
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: u32,
    pub group: SparsityGroup,
    pub recall10: f64,
    pub recall20: f64,
    pub ndcg10: f64,
    pub ndcg20: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricSummary {
    pub users: usize,
    #[serde(rename = "recall@10")]
    pub recall10: f64,
    #[serde(rename = "recall@20")]
    pub recall20: f64,
    #[serde(rename = "ndcg@10")]
    pub ndcg10: f64,
    #[serde(rename = "ndcg@20")]
    pub ndcg20: f64,
}

impl MetricSummary {
    fn of<'a>(rows: impl Iterator<Item = &'a UserMetrics>) -> Self {
        let mut s = MetricSummary::default();
        for r in rows {
            s.users += 1;
            s.recall10 += r.recall10;
            s.recall20 += r.recall20;
            s.ndcg10 += r.ndcg10;
            s.ndcg20 += r.ndcg20;
        }
        if s.users > 0 {
            let n = s.users as f64;
            s.recall10 /= n;
            s.recall20 /= n;
            s.ndcg10 /= n;
            s.ndcg20 /= n;
        }
        s
    }

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Recall10 => self.recall10,
            Metric::Recall20 => self.recall20,
            Metric::Ndcg10 => self.ndcg10,
            Metric::Ndcg20 => self.ndcg20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "recall@10")]
    Recall10,
    #[serde(rename = "recall@20")]
    Recall20,
    #[serde(rename = "ndcg@10")]
    Ndcg10,
    #[serde(rename = "ndcg@20")]
    Ndcg20,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Recall10, Metric::Recall20, Metric::Ndcg10, Metric::Ndcg20];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Recall10 => "recall@10",
            Metric::Recall20 => "recall@20",
            Metric::Ndcg10 => "ndcg@10",
            Metric::Ndcg20 => "ndcg@20",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: SparsityGroup,
    #[serde(flatten)]
    pub metrics: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub overall: MetricSummary,
    pub groups: Vec<GroupSummary>,
    #[serde(default, skip_serializing)]
    pub per_user: Vec<UserMetrics>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let title = match (&self.label, self.seed) {
            (Some(l), Some(seed)) => format!("{l} seed {seed} ({})", self.split),
            (Some(l), None) => format!("{l} ({})", self.split),
            (None, Some(seed)) => format!("seed {seed} ({})", self.split),
            (None, None) => format!("{}", self.split),
        };
        let _ = writeln!(s, "{title}");
        let _ = writeln!(
            s,
            "{:<8} {:>6} {:>10} {:>10} {:>10} {:>10}",
            "group", "users", "recall@10", "recall@20", "ndcg@10", "ndcg@20"
        );
        let mut line = |name: &str, m: &MetricSummary| {
            let _ = writeln!(
                s,
                "{:<8} {:>6} {:>10.5} {:>10.5} {:>10.5} {:>10.5}",
                name, m.users, m.recall10, m.recall20, m.ndcg10, m.ndcg20
            );
        };
        line("all", &self.overall);
        for g in &self.groups {
            line(&g.group.to_string(), &g.metrics);
        }
        s
    }

    pub fn per_user_csv(&self) -> String {
        let mut s = String::from("user,group,recall@10,recall@20,ndcg@10,ndcg@20\n");
        for r in &self.per_user {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.user, r.group, r.recall10, r.recall20, r.ndcg10, r.ndcg20
            );
        }
        s
    }
}

/// Ranks every user with a non-empty held-out set against all items minus
/// their observed training items. `profile` assigns sparsity groups.
pub fn evaluate(output: &EncoderOutput, dataset: &InteractionDataset, split: Split, profile: &SparsityProfile) -> EvalReport {
    let held = dataset.held_out(split);
    let top = *CUTOFFS.iter().max().expect("cutoffs");
    let per_user: Vec<UserMetrics> = (0..dataset.num_users())
        .into_par_iter()
        .filter(|&u| !held[u].is_empty())
        .map(|u| {
            let ranked = full_rank(output, u, dataset.history(u), top);
            let test = &held[u];
            UserMetrics {
                user: u as u32,
                group: profile.group_of[u],
                recall10: recall_at(&ranked, test, 10),
                recall20: recall_at(&ranked, test, 20),
                ndcg10: ndcg_at(&ranked, test, 10),
                ndcg20: ndcg_at(&ranked, test, 20),
            }
        })
        .collect();
    let groups = SparsityGroup::ALL
        .iter()
        .map(|&g| GroupSummary {
            group: g,
            metrics: MetricSummary::of(per_user.iter().filter(|r| r.group == g)),
        })
        .collect();
    EvalReport {
        split,
        seed: None,
        label: None,
        overall: MetricSummary::of(per_user.iter()),
        groups,
        per_user,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub t: Option<f64>,
    pub p_value: f64,
    /// Differences had zero variance, so `t` is undefined.
    pub degenerate: bool,
}

/// Two-tailed paired t-test on `treatment - baseline`.
pub fn paired_t_test(baseline: &[f64], treatment: &[f64]) -> Result<PairedTest> {
    if baseline.len() != treatment.len() {
        return Err(Error::Argument(format!(
            "paired test needs equal sample counts ({} vs {})",
            baseline.len(),
            treatment.len()
        )));
    }
    let n = baseline.len();
    if n < 2 {
        return Err(Error::Argument("paired test needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = treatment.iter().zip(baseline).map(|(t, b)| t - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok(PairedTest {
            n,
            mean_diff: mean,
            sd_diff: 0.0,
            t: None,
            p_value: if mean == 0.0 { 1.0 } else { 0.0 },
            degenerate: mean != 0.0,
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Numeric(format!("t distribution: {e}")))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(PairedTest {
        n,
        mean_diff: mean,
        sd_diff: sd,
        t: Some(t),
        p_value: p,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: Metric,
    pub base_mean: f64,
    pub base_sd: f64,
    pub treat_mean: f64,
    pub treat_sd: f64,
    pub test: PairedTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    /// `None` for the overall population.
    pub group: Option<SparsityGroup>,
    pub metrics: Vec<MetricComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub comparisons: Vec<GroupComparison>,
}

impl SeedSummary {
    pub fn overall(&self, metric: Metric) -> &MetricComparison {
        self.comparisons[0]
            .metrics
            .iter()
            .find(|m| m.metric == metric)
            .expect("every metric is compared")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seeds: {:?}", self.seeds);
        let _ = writeln!(
            s,
            "{:<6} {:<10} {:>18} {:>18} {:>10} {:>10}",
            "group", "metric", "base", "treatment", "diff", "p"
        );
        for g in &self.comparisons {
            let name = g.group.map_or("all".to_string(), |g| g.to_string());
            for m in &g.metrics {
                let _ = writeln!(
                    s,
                    "{:<6} {:<10} {:>9.5}±{:<8.5} {:>9.5}±{:<8.5} {:>+10.5} {:>10.4}{}",
                    name,
                    m.metric.name(),
                    m.base_mean,
                    m.base_sd,
                    m.treat_mean,
                    m.treat_sd,
                    m.test.mean_diff,
                    m.test.p_value,
                    if m.test.degenerate { " (zero variance)" } else { "" }
                );
            }
        }
        s
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Pairs reports by seed and compares every metric overall and per group.
pub fn aggregate_seeds(baseline: &[EvalReport], treatment: &[EvalReport]) -> Result<SeedSummary> {
    if baseline.len() != treatment.len() {
        return Err(Error::Argument(format!(
            "unpaired report sets: {} baseline vs {} treatment",
            baseline.len(),
            treatment.len()
        )));
    }
    let mut pairs = Vec::with_capacity(baseline.len());
    for b in baseline {
        let seed = b
            .seed
            .ok_or_else(|| Error::Argument("baseline report without a seed".into()))?;
        let t = treatment
            .iter()
            .find(|t| t.seed == Some(seed))
            .ok_or_else(|| Error::Argument(format!("no treatment report for seed {seed}")))?;
        pairs.push((seed, b, t));
    }
    let mut seeds: Vec<u64> = pairs.iter().map(|p| p.0).collect();
    seeds.sort_unstable();
    if seeds.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Argument("duplicate seed in report set".into()));
    }
    pairs.sort_by_key(|p| p.0);

    let summary_of = |r: &EvalReport, g: Option<SparsityGroup>| -> MetricSummary {
        match g {
            None => r.overall,
            Some(g) => r
                .groups
                .iter()
                .find(|x| x.group == g)
                .map(|x| x.metrics)
                .unwrap_or_default(),
        }
    };
    let scopes = std::iter::once(None).chain(SparsityGroup::ALL.iter().map(|&g| Some(g)));
    let mut comparisons = Vec::new();
    for scope in scopes {
        let mut metrics = Vec::new();
        for metric in Metric::ALL {
            let base: Vec<f64> = pairs.iter().map(|p| summary_of(p.1, scope).get(metric)).collect();
            let treat: Vec<f64> = pairs.iter().map(|p| summary_of(p.2, scope).get(metric)).collect();
            let (base_mean, base_sd) = mean_sd(&base);
            let (treat_mean, treat_sd) = mean_sd(&treat);
            metrics.push(MetricComparison {
                metric,
                base_mean,
                base_sd,
                treat_mean,
                treat_sd,
                test: paired_t_test(&base, &treat)?,
            });
        }
        comparisons.push(GroupComparison { group: scope, metrics });
    }
    Ok(SeedSummary { seeds, comparisons })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_and_sort() {
        assert_eq!(rank_scores(&[0.9, 0.1, 0.5], &[0], 10), vec![2, 1]);
        assert_eq!(rank_scores(&[0.3; 5], &[], 10), vec![0, 1, 2, 3, 4]);
        assert_eq!(rank_scores(&[0.3; 5], &[1], 2), vec![0, 2]);
    }

    #[test]
    fn recall_cases() {
        let ranked: Vec<u32> = (0..20).collect();
        assert_eq!(recall_at(&ranked, &[0, 5, 30, 40], 10), 0.5);
        assert_eq!(recall_at(&ranked, &[25, 30], 20), 0.0);
        assert_eq!(recall_at(&ranked, &[3, 7], 10), 1.0);
    }

    #[test]
    fn ndcg_cases() {
        let v = ndcg_at(&[7, 1, 9, 2], &[7, 9], 20);
        let expected = 1.5 / (1.0 + 1.0 / 3f64.log2());
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.91972).abs() < 1e-5);
        assert_eq!(ndcg_at(&[4, 1], &[4], 10), 1.0);
        assert_eq!(ndcg_at(&[4, 1], &[5], 10), 0.0);
    }

    #[test]
    fn identical_sets_give_p_one() {
        let r = paired_t_test(&[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.mean_diff, 0.0);
        assert!(!r.degenerate);
    }

    #[test]
    fn constant_shift_is_degenerate() {
        let r = paired_t_test(&[0.25, 0.5, 0.75], &[0.5, 0.75, 1.0]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 0.0);
        assert!(r.t.is_none());
    }

    #[test]
    fn three_pair_closed_form() {
        // diffs 1, 2, 4: mean 7/3, sd sqrt(7/3)
        let r = paired_t_test(&[0.0, 0.0, 0.0], &[1.0, 2.0, 4.0]).unwrap();
        let t = (7.0 / 3.0) / ((7.0f64 / 3.0).sqrt() / 3f64.sqrt());
        assert!((r.t.unwrap() - t).abs() < 1e-12);
        // t = sqrt(7) with 2 degrees of freedom: two-tailed p = 1 - t / sqrt(2 + t^2)
        let p = 1.0 - t / (2.0 + t * t).sqrt();
        assert!((r.p_value - p).abs() < 1e-9, "{} vs {p}", r.p_value);
    }

    #[test]
    fn unpaired_lengths_error() {
        assert!(paired_t_test(&[0.1, 0.2], &[0.1]).is_err());
    }
}
