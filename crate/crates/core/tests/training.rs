use promax::compress::{CompressConfig, EmbeddingMatrix, PcaMode, Side};
use promax::data::InteractionDataset;
use promax::experiment::Prepared;
use promax::model::EncoderKind;
use promax::retrieval::RetrievalConfig;
use promax::synthetic::{generate_synthetic, SyntheticConfig};
use promax::trainer::{train, TrainConfig, TrainInputs};

fn two_clusters() -> Prepared {
    let data = generate_synthetic(&SyntheticConfig::new(2, 30, 20, 0.05, 3)).unwrap();
    Prepared::from_synthetic(
        &data,
        3,
        &CompressConfig {
            kappa: 8,
            mode: PcaMode::Joint,
            pre_normalize: false,
        },
        &RetrievalConfig {
            k_users: 8,
            pool_cap: None,
        },
        0.2,
    )
    .unwrap()
}

fn config(encoder: EncoderKind, lambda1: f64, lambda2: f64) -> TrainConfig {
    TrainConfig {
        encoder,
        learning_rate: 0.01,
        batch_size: 128,
        lambda1,
        lambda2,
        dim: 16,
        layers: 2,
        max_epochs: 5,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn losses_fall_over_first_epochs() {
    let prep = two_clusters();
    for encoder in [EncoderKind::Mf, EncoderKind::LightGcn] {
        for (l1, l2) in [(0.0, 0.0), (1.0, 0.1)] {
            let cfg = config(encoder, l1, l2);
            let out = train(
                TrainInputs {
                    dataset: &prep.dataset,
                    augmented: Some(&prep.augmented),
                    p_llm: Some(prep.p_llm.clone()),
                },
                &cfg,
                None,
            )
            .unwrap();
            let first = out.history.first().unwrap();
            let last = out.history.last().unwrap();
            assert!(last.l_rec < first.l_rec, "{encoder} ({l1},{l2}): {} -> {}", first.l_rec, last.l_rec);
            assert!(last.total(l1, l2) < first.total(l1, l2));
        }
    }
}

#[test]
fn early_stopping_returns_best_table() {
    let prep = two_clusters();
    let mut cfg = config(EncoderKind::Mf, 0.0, 0.0);
    cfg.learning_rate = 0.2;
    cfg.max_epochs = 200;
    cfg.patience = 3;
    let mut log = Vec::new();
    let out = train(
        TrainInputs {
            dataset: &prep.dataset,
            augmented: None,
            p_llm: None,
        },
        &cfg,
        Some(&mut log),
    )
    .unwrap();
    assert!(out.stopped_early);
    assert!(out.history.len() < 200);
    assert_eq!(out.history.len(), out.best_epoch + cfg.patience);
    let best = out.history[out.best_epoch - 1].recall20_val.unwrap();
    assert_eq!(best, out.best_recall);
    assert!(out.history.iter().all(|r| r.recall20_val.unwrap() <= best));
    assert_eq!(String::from_utf8(log).unwrap().lines().count(), out.history.len());

    let report = promax::evaluation::evaluate(
        &promax::objective::Objective::new(
            EncoderKind::Mf,
            cfg.layers,
            prep.dataset.histories(),
            prep.dataset.num_items(),
            None,
            None,
            Default::default(),
        )
        .unwrap()
        .encode(&out.table),
        &prep.dataset,
        promax::data::Split::Val,
        &prep.profile,
    );
    assert!((report.overall.recall20 - best).abs() < 1e-12);
}

#[test]
fn seeds_reproduce_and_differ() {
    let prep = two_clusters();
    let run = |seed| {
        let mut cfg = config(EncoderKind::LightGcn, 1.0, 0.1);
        cfg.seed = seed;
        prep.run(&cfg).unwrap().0.table
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn prepared_from_raw_embeddings() {
    let data = generate_synthetic(&SyntheticConfig::new(2, 10, 8, 0.0, 9)).unwrap();
    let ds = InteractionDataset::split_from(data.num_users, data.num_items, &data.pairs, 1).unwrap();
    let users = EmbeddingMatrix::new(Side::User, data.user_embeddings.clone()).unwrap();
    let items = EmbeddingMatrix::new(Side::Item, data.item_embeddings.clone()).unwrap();
    let prep = Prepared::build(ds, &users, &items, &CompressConfig { kappa: 4, ..CompressConfig::default() }, &RetrievalConfig::default(), 0.2).unwrap();
    assert_eq!(prep.augmented.len(), data.num_users);
    for (u, aug) in prep.augmented.iter().enumerate() {
        let hist = prep.dataset.history(u);
        assert!(hist.iter().all(|i| aug.binary_search(i).is_ok()));
        assert!(aug.windows(2).all(|w| w[0] < w[1]));
    }
    assert_eq!(prep.p_llm.num_users(), data.num_users);
}
