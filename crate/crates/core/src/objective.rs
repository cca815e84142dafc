//! The combined training objective: ranking loss plus the two weighted
//! reshaping terms, with gradients w.r.t. the embedding table.

use crate::error::{Error, Result};
use crate::graph::PropagationGraph;
use crate::linalg::{self, DenseMatrix};
use crate::model::{self, EmbeddingTable, EncoderKind, EncoderOutput, Triple, View};
use crate::shaping::{self, LlmDistributions, ShapingLosses, Similarity};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub reg: f64,
    pub theta_sim: Similarity,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            tau: 0.2,
            reg: 1e-4,
            theta_sim: Similarity::Cosine,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub losses: ShapingLosses,
    pub grad_rec: DenseMatrix,
    pub grad_sdr: Option<DenseMatrix>,
    pub grad_s2dr: Option<DenseMatrix>,
    pub grad_total: DenseMatrix,
}

pub struct Objective {
    kind: EncoderKind,
    num_users: usize,
    rec_graph: Option<PropagationGraph>,
    /// Interaction-set views for the agreement term. For LightGCN the
    /// original view is `rec_graph`.
    view_original: Option<PropagationGraph>,
    view_augmented: Option<PropagationGraph>,
    p_llm: Option<LlmDistributions>,
    config: ObjectiveConfig,
}

impl Objective {
    /// `train_histories` are the observed sets; `augmented` the fused sets.
    pub fn new(
        kind: EncoderKind,
        layers: usize,
        train_histories: &[Vec<u32>],
        num_items: usize,
        augmented: Option<&[Vec<u32>]>,
        p_llm: Option<LlmDistributions>,
        config: ObjectiveConfig,
    ) -> Result<Self> {
        shaping::warn_weight_ranges(config.lambda1, config.lambda2);
        if config.lambda1 != 0.0 && p_llm.is_none() {
            return Err(Error::MissingArtifact(
                "lambda1 > 0 needs profile distributions; run `promax retrieve` first".into(),
            ));
        }
        if config.lambda2 != 0.0 && augmented.is_none() {
            return Err(Error::MissingArtifact(
                "lambda2 > 0 needs augmented histories; run `promax retrieve` first".into(),
            ));
        }
        let rec_graph = match kind {
            EncoderKind::Mf => None,
            EncoderKind::LightGcn => Some(PropagationGraph::lightgcn(train_histories, num_items, layers)?),
        };
        let (view_original, view_augmented) = match (config.lambda2 != 0.0, augmented) {
            (true, Some(aug)) => {
                if aug.len() != train_histories.len() {
                    return Err(Error::Argument(format!(
                        "augmented histories cover {} users, expected {}",
                        aug.len(),
                        train_histories.len()
                    )));
                }
                match kind {
                    EncoderKind::Mf => (
                        Some(PropagationGraph::mean_one_hop(train_histories, num_items)?),
                        Some(PropagationGraph::mean_one_hop(aug, num_items)?),
                    ),
                    EncoderKind::LightGcn => (None, Some(PropagationGraph::lightgcn(aug, num_items, layers)?)),
                }
            }
            _ => (None, None),
        };
        Ok(Self {
            kind,
            num_users: train_histories.len(),
            rec_graph,
            view_original,
            view_augmented,
            p_llm: if config.lambda1 != 0.0 { p_llm } else { None },
            config,
        })
    }

    pub fn config(&self) -> &ObjectiveConfig {
        &self.config
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    /// Representations used for scoring.
    pub fn encode(&self, table: &EmbeddingTable) -> EncoderOutput {
        model::encode(table, self.rec_graph.as_ref(), View::Original)
    }

    pub fn evaluate(&self, table: &EmbeddingTable, batch: &[Triple]) -> Result<Evaluation> {
        if table.num_users() != self.num_users {
            return Err(Error::Argument("table does not match the objective's users".into()));
        }
        let shape = (table.values().rows(), table.dim());
        let zeros = || DenseMatrix::zeros(shape.0, shape.1);
        let cfg = &self.config;
        let out = self.encode(table);

        let mut g_out = zeros();
        let mut g_reg = zeros();
        let l_rec = model::bpr_loss_and_grad(&out, table, batch, cfg.reg, &mut g_out, &mut g_reg);
        let mut grad_rec = model::encode_backward(self.rec_graph.as_ref(), &g_out);
        linalg::axpy(1.0, g_reg.as_slice(), grad_rec.as_mut_slice());

        let mut l_sdr = 0.0;
        let mut grad_sdr = None;
        if cfg.lambda1 != 0.0 {
            let p_llm = self.p_llm.as_ref().expect("checked in new");
            let users: Vec<u32> = batch.iter().map(|t| t.user).collect();
            let mut g = zeros();
            l_sdr = shaping::sdr_loss(p_llm, &out, &users, cfg.tau, cfg.theta_sim, &mut g)?;
            grad_sdr = Some(model::encode_backward(self.rec_graph.as_ref(), &g));
        }

        let mut l_s2dr = 0.0;
        let mut grad_s2dr = None;
        if cfg.lambda2 != 0.0 {
            let original_graph = self.view_original.as_ref().or(self.rec_graph.as_ref());
            let view_a = match self.kind {
                EncoderKind::LightGcn => out.clone(),
                EncoderKind::Mf => model::encode(table, original_graph, View::Original),
            };
            let view_b = model::encode(table, self.view_augmented.as_ref(), View::Augmented);
            let pairs: Vec<(u32, u32)> = batch.iter().map(|t| (t.user, t.pos)).collect();
            let (mut ga, mut gb) = (zeros(), zeros());
            l_s2dr = shaping::s2dr_loss(&view_a, &view_b, &pairs, cfg.tau, cfg.theta_sim, &mut ga, &mut gb)?;
            let mut g = model::encode_backward(original_graph, &ga);
            let gb = model::encode_backward(self.view_augmented.as_ref(), &gb);
            linalg::axpy(1.0, gb.as_slice(), g.as_mut_slice());
            grad_s2dr = Some(g);
        }

        let mut grad_total = grad_rec.clone();
        if let Some(g) = &grad_sdr {
            linalg::axpy(cfg.lambda1, g.as_slice(), grad_total.as_mut_slice());
        }
        if let Some(g) = &grad_s2dr {
            linalg::axpy(cfg.lambda2, g.as_slice(), grad_total.as_mut_slice());
        }
        Ok(Evaluation {
            losses: ShapingLosses {
                l_rec,
                l_sdr,
                l_s2dr,
                lambda1: cfg.lambda1,
                lambda2: cfg.lambda2,
            },
            grad_rec,
            grad_sdr,
            grad_s2dr,
            grad_total,
        })
    }
}
