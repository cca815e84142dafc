//! Preference distributions over items and the two distribution-reshaping
//! objectives: supervised (towards the profile distribution, weighted by its
//! confidence) and self-supervised (agreement between two interaction views).

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats;
use crate::linalg::{self, DenseMatrix};
use crate::model::EncoderOutput;

/// Users processed together in one supervised-loss block.
const USER_BLOCK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Similarity::Cosine),
            "dot" => Ok(Similarity::Dot),
            other => Err(Error::Argument(format!("unknown similarity '{other}'"))),
        }
    }
}

impl std::fmt::Display for Similarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Similarity::Cosine => "cosine",
            Similarity::Dot => "dot",
        })
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!("temperature must be positive, got {tau}")))
    }
}

/// Rows scaled to unit length; zero rows stay zero. Also returns the norms.
fn unit_rows(rows: impl Iterator<Item = Vec<f64>>) -> (Vec<Vec<f64>>, Vec<f64>) {
    rows.map(|mut r| {
        let n = linalg::norm(&r);
        if n > 0.0 {
            r.iter_mut().for_each(|v| *v /= n);
        }
        (r, n)
    })
    .unzip()
}

/// `softmax(cos(user_rep, item_r) / tau)` over the rows of `item_reps`.
/// Pairs involving a zero vector get cosine 0.
pub fn softmax_distribution(user_rep: &[f64], item_reps: &DenseMatrix, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if user_rep.len() != item_reps.cols() {
        return Err(Error::Argument(format!(
            "user dim {} != item dim {}",
            user_rep.len(),
            item_reps.cols()
        )));
    }
    let mut logits: Vec<f64> = item_reps
        .iter_rows()
        .map(|row| linalg::cosine(user_rep, row).unwrap_or(0.0) / tau)
        .collect();
    linalg::softmax_in_place(&mut logits);
    Ok(logits)
}

/// Shannon entropy in nats with `0 log 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Confidence `1 - H/ln N`, clamped to `[0, 1]`. Zero when `N < 2`.
pub fn entropy_weight(probs: &[f64]) -> f64 {
    if probs.len() < 2 {
        return 0.0;
    }
    (1.0 - entropy(probs) / (probs.len() as f64).ln()).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistributionMode {
    #[default]
    Dense,
    OnTheFly,
}

impl std::str::FromStr for DistributionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(DistributionMode::Dense),
            "on_the_fly" | "on-the-fly" => Ok(DistributionMode::OnTheFly),
            other => Err(Error::Argument(format!("unknown distribution mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    Dense(DenseMatrix),
    OnTheFly { users: DenseMatrix, items: DenseMatrix },
}

/// Profile-derived item distributions for every user, with their entropy weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmDistributions {
    tau: f64,
    num_users: usize,
    num_items: usize,
    storage: Storage,
    weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSidecar {
    pub tau: f64,
    pub pca_mode: String,
    pub num_users: usize,
    pub num_items: usize,
    pub weights: Vec<f64>,
}

impl LlmDistributions {
    pub fn compute(users: &DenseMatrix, items: &DenseMatrix, tau: f64, mode: DistributionMode) -> Result<Self> {
        check_tau(tau)?;
        if users.cols() != items.cols() {
            return Err(Error::Argument(format!(
                "user dim {} != item dim {}",
                users.cols(),
                items.cols()
            )));
        }
        let rows: Vec<Vec<f64>> = (0..users.rows())
            .into_par_iter()
            .map(|u| softmax_distribution(users.row(u), items, tau))
            .collect::<Result<_>>()?;
        let weights = rows.iter().map(|r| entropy_weight(r)).collect();
        let storage = match mode {
            DistributionMode::Dense => {
                let flat = rows.into_iter().flatten().collect();
                Storage::Dense(DenseMatrix::from_vec(users.rows(), items.rows(), flat)?)
            }
            DistributionMode::OnTheFly => Storage::OnTheFly {
                users: users.clone(),
                items: items.clone(),
            },
        };
        Ok(Self {
            tau,
            num_users: users.rows(),
            num_items: items.rows(),
            storage,
            weights,
        })
    }

    /// Wraps an explicit table. Rows must be distributions.
    pub fn from_table(probs: DenseMatrix, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        for (u, row) in probs.iter_rows().enumerate() {
            check_normalized(u, row)?;
        }
        let weights = probs.iter_rows().map(entropy_weight).collect();
        Ok(Self {
            tau,
            num_users: probs.rows(),
            num_items: probs.cols(),
            storage: Storage::Dense(probs),
            weights,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, u: usize) -> f64 {
        self.weights[u]
    }

    pub fn row(&self, u: usize) -> std::borrow::Cow<'_, [f64]> {
        match &self.storage {
            Storage::Dense(m) => std::borrow::Cow::Borrowed(m.row(u)),
            Storage::OnTheFly { users, items } => std::borrow::Cow::Owned(
                softmax_distribution(users.row(u), items, self.tau).expect("validated at construction"),
            ),
        }
    }

    /// Replaces every weight, e.g. to disable weighting with all-ones.
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.num_users || weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::Argument("weights must be one value in [0,1] per user".into()));
        }
        self.weights = weights;
        Ok(self)
    }

    pub fn dense_table(&self) -> DenseMatrix {
        match &self.storage {
            Storage::Dense(m) => m.clone(),
            Storage::OnTheFly { .. } => {
                let flat = (0..self.num_users).flat_map(|u| self.row(u).into_owned()).collect();
                DenseMatrix::from_vec(self.num_users, self.num_items, flat).expect("shape")
            }
        }
    }

    pub fn write(&self, table_path: &Path, sidecar_path: &Path, pca_mode: &str) -> Result<()> {
        formats::write_matrix(table_path, &self.dense_table())?;
        let sidecar = DistributionSidecar {
            tau: self.tau,
            pca_mode: pca_mode.to_string(),
            num_users: self.num_users,
            num_items: self.num_items,
            weights: self.weights.clone(),
        };
        let text = serde_json::to_string_pretty(&sidecar)?;
        fs::write(sidecar_path, text).map_err(|e| Error::io(sidecar_path, e))
    }

    /// Loads a persisted table. Stored rows are single precision, so each row
    /// is renormalized after widening.
    pub fn read(table_path: &Path, sidecar_path: &Path) -> Result<(Self, DistributionSidecar)> {
        let mut table = formats::read_matrix(table_path)?;
        let text = fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
        let sidecar: DistributionSidecar = serde_json::from_str(&text)?;
        if table.rows() != sidecar.num_users || table.cols() != sidecar.num_items {
            return Err(Error::Format(format!(
                "distribution table is {}x{}, sidecar says {}x{}",
                table.rows(),
                table.cols(),
                sidecar.num_users,
                sidecar.num_items
            )));
        }
        for u in 0..table.rows() {
            let row = table.row_mut(u);
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        let dist = Self::from_table(table, sidecar.tau)?.with_weights(sidecar.weights.clone())?;
        Ok((dist, sidecar))
    }
}

fn check_normalized(u: usize, row: &[f64]) -> Result<()> {
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > 1e-6 || row.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::Numeric(format!(
            "profile distribution of user {u} is not normalized (sum {s})"
        )));
    }
    Ok(())
}

/// Similarity operands for one side: the raw rows plus, for cosine, unit rows and norms.
struct Operands {
    raw: Vec<Vec<f64>>,
    unit: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

impl Operands {
    fn new(rows: Vec<Vec<f64>>, sim: Similarity) -> Self {
        match sim {
            Similarity::Cosine => {
                let (unit, norms) = unit_rows(rows.iter().cloned());
                Self { raw: rows, unit, norms }
            }
            Similarity::Dot => Self {
                raw: rows,
                unit: Vec::new(),
                norms: Vec::new(),
            },
        }
    }

    fn len(&self) -> usize {
        self.raw.len()
    }

    fn sim(&self, a: usize, other: &Operands, b: usize) -> f64 {
        if self.unit.is_empty() {
            linalg::dot(&self.raw[a], &other.raw[b])
        } else {
            linalg::dot(&self.unit[a], &other.unit[b])
        }
    }

    /// Adds `coef * d sim(a, other_b) / d a` to `out`.
    fn accumulate_grad(&self, a: usize, other: &Operands, b: usize, s: f64, coef: f64, out: &mut [f64]) {
        if self.unit.is_empty() {
            linalg::axpy(coef, &other.raw[b], out);
            return;
        }
        let n = self.norms[a];
        if n == 0.0 || other.norms[b] == 0.0 {
            return;
        }
        let scale = coef / n;
        for ((o, ob), oa) in out.iter_mut().zip(&other.unit[b]).zip(&self.unit[a]) {
            *o += scale * (ob - s * oa);
        }
    }
}

fn log_softmax_in_place(values: &mut [f64]) {
    let lse = linalg::log_sum_exp(values);
    values.iter_mut().for_each(|v| *v -= lse);
}

/// Entropy-weighted cross-entropy from the profile distribution to the model's
/// full-item distribution, averaged over the distinct users in `users`.
///
/// The profile distribution is a constant. The gradient w.r.t. `output` is
/// added to `grad`.
pub fn sdr_loss(
    p_llm: &LlmDistributions,
    output: &EncoderOutput,
    users: &[u32],
    tau: f64,
    sim: Similarity,
    grad: &mut DenseMatrix,
) -> Result<f64> {
    check_tau(tau)?;
    let num_items = output.num_items();
    if p_llm.num_items() != num_items || p_llm.num_users() != output.num_users {
        return Err(Error::Argument(format!(
            "profile distributions are {}x{}, model has {}x{}",
            p_llm.num_users(),
            p_llm.num_items(),
            output.num_users,
            num_items
        )));
    }
    let mut unique: Vec<u32> = users.to_vec();
    unique.sort_unstable();
    unique.dedup();
    if unique.is_empty() {
        return Ok(0.0);
    }
    let inv_batch = 1.0 / unique.len() as f64;
    let m = output.num_users;
    let items = Operands::new((0..num_items).map(|i| output.item(i).to_vec()).collect(), sim);

    let mut loss = 0.0;
    for block in unique.chunks(USER_BLOCK) {
        let block_users = Operands::new(block.iter().map(|&u| output.user(u as usize).to_vec()).collect(), sim);
        // per user: loss term, user gradient, similarity row, logit coefficients
        let rows: Vec<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> = (0..block.len())
            .into_par_iter()
            .map(|k| {
                let u = block[k] as usize;
                let q = p_llm.row(u);
                check_normalized(u, &q)?;
                let w = p_llm.weight(u);
                let sims: Vec<f64> = (0..num_items).map(|i| block_users.sim(k, &items, i)).collect();
                let mut logp: Vec<f64> = sims.iter().map(|s| s / tau).collect();
                log_softmax_in_place(&mut logp);
                let ce: f64 = -q.iter().zip(&logp).map(|(qi, lp)| if *qi > 0.0 { qi * lp } else { 0.0 }).sum::<f64>();
                let scale = w * inv_batch / tau;
                let coefs: Vec<f64> = logp.iter().zip(q.iter()).map(|(lp, qi)| scale * (lp.exp() - qi)).collect();
                let mut gu = vec![0.0; output.values.cols()];
                if w > 0.0 {
                    for i in 0..num_items {
                        block_users.accumulate_grad(k, &items, i, sims[i], coefs[i], &mut gu);
                    }
                }
                Ok((w * ce * inv_batch, gu, sims, coefs))
            })
            .collect::<Result<_>>()?;
        for (k, (l, gu, _, _)) in rows.iter().enumerate() {
            loss += l;
            linalg::axpy(1.0, gu, grad.row_mut(block[k] as usize));
        }
        let item_grads = &mut grad.as_mut_slice()[m * output.values.cols()..];
        item_grads
            .par_chunks_mut(output.values.cols().max(1))
            .enumerate()
            .for_each(|(i, gi)| {
                for (k, (_, _, sims, coefs)) in rows.iter().enumerate() {
                    if coefs[i] != 0.0 {
                        items.accumulate_grad(i, &block_users, k, sims[i], coefs[i], gi);
                    }
                }
            });
    }
    Ok(loss)
}

/// One direction of the in-batch objective: users of one view against items
/// of the other. Returns the summed `-log p(i_k | u_k)` and scatters gradients
/// scaled by `scale`.
fn in_batch_direction(
    users: &Operands,
    items: &Operands,
    tau: f64,
    scale: f64,
    dim: usize,
) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let b = users.len();
    let rows: Vec<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> = (0..b)
        .into_par_iter()
        .map(|k| {
            let sims: Vec<f64> = (0..b).map(|j| users.sim(k, items, j)).collect();
            let mut logp: Vec<f64> = sims.iter().map(|s| s / tau).collect();
            log_softmax_in_place(&mut logp);
            let coefs: Vec<f64> = logp
                .iter()
                .enumerate()
                .map(|(j, lp)| scale / tau * (lp.exp() - if j == k { 1.0 } else { 0.0 }))
                .collect();
            let mut gu = vec![0.0; dim];
            for j in 0..b {
                users.accumulate_grad(k, items, j, sims[j], coefs[j], &mut gu);
            }
            (-logp[k], gu, sims, coefs)
        })
        .collect();
    let item_grads: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|j| {
            let mut gi = vec![0.0; dim];
            for (k, (_, _, sims, coefs)) in rows.iter().enumerate() {
                items.accumulate_grad(j, users, k, sims[j], coefs[j], &mut gi);
            }
            gi
        })
        .collect();
    let loss = rows.iter().map(|r| r.0).sum();
    let user_grads = rows.into_iter().map(|r| r.1).collect();
    (loss, user_grads, item_grads)
}

/// Bidirectional in-batch agreement between two encoder views:
/// `-(1/(2|B|)) sum [log p(i_b | u_a) + log p(i_a | u_b)]`, each softmax taken
/// over the batch's items from the opposite view.
pub fn s2dr_loss(
    view_a: &EncoderOutput,
    view_b: &EncoderOutput,
    pairs: &[(u32, u32)],
    tau: f64,
    sim: Similarity,
    grad_a: &mut DenseMatrix,
    grad_b: &mut DenseMatrix,
) -> Result<f64> {
    check_tau(tau)?;
    if view_a.values.rows() != view_b.values.rows() || view_a.num_users != view_b.num_users {
        return Err(Error::Argument("views have different shapes".into()));
    }
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let dim = view_a.values.cols();
    let m = view_a.num_users;
    let scale = 0.5 / pairs.len() as f64;
    let gather = |view: &EncoderOutput, users: bool| -> Operands {
        Operands::new(
            pairs
                .iter()
                .map(|&(u, i)| if users { view.user(u as usize) } else { view.item(i as usize) }.to_vec())
                .collect(),
            sim,
        )
    };
    let (ua, ia) = (gather(view_a, true), gather(view_a, false));
    let (ub, ib) = (gather(view_b, true), gather(view_b, false));

    let (l_ab, g_ua, g_ib) = in_batch_direction(&ua, &ib, tau, scale, dim);
    let (l_ba, g_ub, g_ia) = in_batch_direction(&ub, &ia, tau, scale, dim);
    for (k, &(u, i)) in pairs.iter().enumerate() {
        linalg::axpy(1.0, &g_ua[k], grad_a.row_mut(u as usize));
        linalg::axpy(1.0, &g_ia[k], grad_a.row_mut(m + i as usize));
        linalg::axpy(1.0, &g_ub[k], grad_b.row_mut(u as usize));
        linalg::axpy(1.0, &g_ib[k], grad_b.row_mut(m + i as usize));
    }
    Ok(scale * (l_ab + l_ba))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapingLosses {
    pub l_rec: f64,
    pub l_sdr: f64,
    pub l_s2dr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl ShapingLosses {
    pub fn total(&self) -> f64 {
        let mut t = self.l_rec;
        if self.lambda1 != 0.0 {
            t += self.lambda1 * self.l_sdr;
        }
        if self.lambda2 != 0.0 {
            t += self.lambda2 * self.l_s2dr;
        }
        t
    }
}

pub fn total_loss(l_rec: f64, l_sdr: f64, l_s2dr: f64, lambda1: f64, lambda2: f64) -> ShapingLosses {
    warn_weight_ranges(lambda1, lambda2);
    ShapingLosses {
        l_rec,
        l_sdr,
        l_s2dr,
        lambda1,
        lambda2,
    }
}

pub fn warn_weight_ranges(lambda1: f64, lambda2: f64) {
    if !(0.0..=2.0).contains(&lambda1) {
        log::warn!("lambda1 = {lambda1} is outside the usual range [0, 2]");
    }
    if !(0.0..=0.2).contains(&lambda2) {
        log::warn!("lambda2 = {lambda2} is outside the usual range [0, 0.2]");
    }
}
