//! Mini-batch Adam training with validation-based early stopping.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{self, Interaction, InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::model::{self, EmbeddingTable, EncoderKind, Triple};
use crate::objective::{Objective, ObjectiveConfig};
use crate::seed;
use crate::shaping::{LlmDistributions, Similarity};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub encoder: EncoderKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub dim: usize,
    pub layers: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub reg: f64,
    pub eval_every: usize,
    pub theta_sim: Similarity,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::LightGcn,
            learning_rate: 1e-3,
            batch_size: 4096,
            lambda1: 0.0,
            lambda2: 0.0,
            tau: 0.2,
            dim: 32,
            layers: 3,
            max_epochs: 500,
            patience: 20,
            reg: 1e-4,
            eval_every: 1,
            theta_sim: Similarity::Cosine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("tau", self.tau),
            ("batch_size", self.batch_size as f64),
            ("dim", self.dim as f64),
            ("max_epochs", self.max_epochs as f64),
            ("patience", self.patience as f64),
            ("eval_every", self.eval_every as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Argument(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("reg", self.reg)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Argument(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            tau: self.tau,
            reg: self.reg,
            theta_sim: self.theta_sim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// One bias-corrected update. A non-finite gradient leaves everything untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Argument("gradient shape does not match parameters".into()));
        }
        if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at parameter {k} (step {})",
                self.t + 1
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Seeded permutation of `pairs` for `epoch`, cut into `batch_size` chunks.
pub fn sample_epoch_batches(pairs: &[Interaction], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<Interaction>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order = pairs.to_vec();
    let mut rng = seed::rng_for_indexed(seed, "shuffle", epoch as u64);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[Interaction]>::to_vec).collect()
}

/// Attaches one uniformly drawn negative to every pair.
pub fn attach_negatives(
    batch: &[Interaction],
    histories: &[Vec<u32>],
    num_items: usize,
    rng: &mut impl rand::Rng,
) -> Result<Vec<Triple>> {
    batch
        .iter()
        .map(|p| {
            Ok(Triple {
                user: p.user,
                pos: p.item,
                neg: model::uniform_negative_sample(&histories[p.user as usize], num_items, rng)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_sdr: f64,
    pub l_s2dr: f64,
    #[serde(rename = "recall@20_val")]
    pub recall20_val: Option<f64>,
    #[serde(rename = "ndcg@20_val")]
    pub ndcg20_val: Option<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn total(&self, lambda1: f64, lambda2: f64) -> f64 {
        self.l_rec + lambda1 * self.l_sdr + lambda2 * self.l_s2dr
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Table from the best validation epoch.
    pub table: EmbeddingTable,
    pub best_epoch: usize,
    pub best_recall: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

pub struct TrainInputs<'a> {
    pub dataset: &'a InteractionDataset,
    pub augmented: Option<&'a [Vec<u32>]>,
    pub p_llm: Option<LlmDistributions>,
}

/// Trains from a seeded Xavier initialization. Each epoch's record is also
/// written as one JSON line to `metrics` when given.
pub fn train(inputs: TrainInputs<'_>, config: &TrainConfig, mut metrics: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    config.validate()?;
    let ds = inputs.dataset;
    if ds.train().is_empty() {
        return Err(Error::NoInteractions);
    }
    let objective = Objective::new(
        config.encoder,
        config.layers,
        ds.histories(),
        ds.num_items(),
        inputs.augmented,
        inputs.p_llm,
        config.objective(),
    )?;
    let profile = data::compute_quantiles(ds.histories());
    let mut table = model::init_xavier(ds.num_users(), ds.num_items(), config.dim, config.seed);
    let mut adam = Adam::new(table.values().as_slice().len(), config.learning_rate);

    let mut best = (table.clone(), 0usize, f64::NEG_INFINITY);
    let mut history = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let batches = sample_epoch_batches(ds.train(), config.batch_size, config.seed, epoch);
        let mut neg_rng = seed::rng_for_indexed(config.seed, "negatives", epoch as u64);
        let (mut l_rec, mut l_sdr, mut l_s2dr) = (0.0, 0.0, 0.0);
        for batch in &batches {
            let triples = attach_negatives(batch, ds.histories(), ds.num_items(), &mut neg_rng)?;
            let eval = objective.evaluate(&table, &triples)?;
            adam.step(table.values_mut().as_mut_slice(), eval.grad_total.as_slice())
                .map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
            l_rec += eval.losses.l_rec;
            l_sdr += eval.losses.l_sdr;
            l_s2dr += eval.losses.l_s2dr;
        }
        let nb = batches.len() as f64;
        let mut record = EpochRecord {
            epoch,
            l_rec: l_rec / nb,
            l_sdr: l_sdr / nb,
            l_s2dr: l_s2dr / nb,
            recall20_val: None,
            ndcg20_val: None,
            seconds: 0.0,
        };
        if epoch % config.eval_every == 0 || epoch == config.max_epochs {
            let report = evaluation::evaluate(&objective.encode(&table), ds, Split::Val, &profile);
            record.recall20_val = Some(report.overall.recall20);
            record.ndcg20_val = Some(report.overall.ndcg20);
            if report.overall.recall20 > best.2 {
                best = (table.clone(), epoch, report.overall.recall20);
            }
        }
        record.seconds = start.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}: l_rec {:.5} l_sdr {:.5} l_s2dr {:.5} recall@20 {:?}",
            record.l_rec,
            record.l_sdr,
            record.l_s2dr,
            record.recall20_val
        );
        if let Some(w) = metrics.as_deref_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}").map_err(|e| Error::Io {
                path: "metrics".into(),
                source: e,
            })?;
        }
        history.push(record);
        if epoch - best.1 >= config.patience {
            stopped_early = epoch < config.max_epochs;
            break;
        }
    }
    let (table, best_epoch, best_recall) = best;
    Ok(TrainOutcome {
        table,
        best_epoch,
        best_recall,
        history,
        stopped_early,
    })
}
