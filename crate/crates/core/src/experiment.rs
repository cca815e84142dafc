//! In-memory end-to-end runs: split, compress, augment, train, evaluate.

use crate::compress::{self, CompressConfig, EmbeddingMatrix, Side};
use crate::data::{self, InteractionDataset, SparsityProfile, Split};
use crate::error::Result;
use crate::evaluation::{self, EvalReport};
use crate::retrieval::{self, RetrievalConfig};
use crate::shaping::{DistributionMode, LlmDistributions};
use crate::synthetic::SyntheticData;
use crate::trainer::{self, TrainConfig, TrainInputs, TrainOutcome};

/// Everything the training stage consumes.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: InteractionDataset,
    pub profile: SparsityProfile,
    pub augmented: Vec<Vec<u32>>,
    pub p_llm: LlmDistributions,
}

impl Prepared {
    pub fn from_synthetic(
        data: &SyntheticData,
        split_seed: u64,
        compress_config: &CompressConfig,
        retrieval_config: &RetrievalConfig,
        tau: f64,
    ) -> Result<Self> {
        let dataset = InteractionDataset::split_from(data.num_users, data.num_items, &data.pairs, split_seed)?;
        let users = EmbeddingMatrix::new(Side::User, data.user_embeddings.clone())?;
        let items = EmbeddingMatrix::new(Side::Item, data.item_embeddings.clone())?;
        Self::build(dataset, &users, &items, compress_config, retrieval_config, tau)
    }

    pub fn build(
        dataset: InteractionDataset,
        users: &EmbeddingMatrix,
        items: &EmbeddingMatrix,
        compress_config: &CompressConfig,
        retrieval_config: &RetrievalConfig,
        tau: f64,
    ) -> Result<Self> {
        let compressed = compress::compress_profiles(users, items, compress_config)?;
        let profile = data::compute_quantiles(dataset.histories());
        let augmentation = retrieval::augment_all_deterministic(
            dataset.histories(),
            &compressed.users,
            &compressed.items,
            &profile,
            retrieval_config,
        )?;
        let p_llm = LlmDistributions::compute(
            &compressed.users.values,
            &compressed.items.values,
            tau,
            DistributionMode::Dense,
        )?;
        Ok(Self {
            augmented: augmentation.augmented_histories(),
            dataset,
            profile,
            p_llm,
        })
    }

    /// Trains with `config` and reports on the test split.
    pub fn run(&self, config: &TrainConfig) -> Result<(TrainOutcome, EvalReport)> {
        let shaped = config.lambda1 != 0.0 || config.lambda2 != 0.0;
        let inputs = TrainInputs {
            dataset: &self.dataset,
            augmented: shaped.then_some(self.augmented.as_slice()),
            p_llm: shaped.then(|| self.p_llm.clone()),
        };
        let outcome = trainer::train(inputs, config, None)?;
        let objective = crate::objective::Objective::new(
            config.encoder,
            config.layers,
            self.dataset.histories(),
            self.dataset.num_items(),
            None,
            None,
            crate::objective::ObjectiveConfig::default(),
        )?;
        let mut report = evaluation::evaluate(&objective.encode(&outcome.table), &self.dataset, Split::Test, &self.profile);
        report.seed = Some(config.seed);
        Ok((outcome, report))
    }
}
