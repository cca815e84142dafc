use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use promax::compress::{self, CompressConfig, CompressedEmbeddings, PcaMode, Side};
use promax::config::ConfigFile;
use promax::data::{self, InteractionDataset, LoadOptions, Split};
use promax::evaluation::{self, EvalReport};
use promax::formats;
use promax::model::{EmbeddingTable, EncoderKind};
use promax::objective::{Objective, ObjectiveConfig};
use promax::rerank::{DeterministicReranker, RemoteConfig, RemoteReranker, Reranker, DEFAULT_INSTRUCTION};
use promax::retrieval::{self, AugmentInputs, RetrievalConfig};
use promax::seed::derive_seed;
use promax::shaping::{DistributionMode, LlmDistributions, Similarity};
use promax::synthetic::{generate_synthetic, SyntheticConfig};
use promax::trainer::{self, TrainConfig, TrainInputs};

use crate::manifest::{Plan, RunManifest};
use crate::{Cli, Command, CompressArgs, EvalArgs, ReportArgs, RetrieveArgs, SynthArgs, TrainArgs};

pub fn run(cli: &Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let ctx = Ctx {
        root: cli.out.clone(),
        seed: cli.seed,
        force: cli.force,
        config,
    };
    match &cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Compress(a) => compress_stage(&ctx, a),
        Command::Retrieve(a) => retrieve(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Report(a) => report(&ctx, a),
    }
}

struct Ctx {
    root: PathBuf,
    seed: u64,
    force: bool,
    config: ConfigFile,
}

impl Ctx {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn dir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        fs::create_dir_all(&p).with_context(|| format!("cannot create {}", p.display()))?;
        Ok(p)
    }

    /// Flag value, else config value, else default.
    fn pick<T: std::str::FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        Ok(self.config.get(key)?.unwrap_or(default))
    }

    /// Runs `body` unless the manifest says the stage is up to date, then
    /// records its inputs and outputs.
    fn stage(
        &self,
        name: &str,
        params: &str,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        body: impl FnOnce() -> Result<()>,
    ) -> Result<()> {
        let mut manifest = RunManifest::load(&self.root)?;
        if let Plan::UpToDate = manifest.plan(&self.root, name, params, inputs, self.force)? {
            println!("{name}: up to date");
            return Ok(());
        }
        body()?;
        manifest.record(&self.root, name, params, self.seed, inputs, outputs)?;
        manifest.save(&self.root)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed {}", path.display()))
}

fn write_profiles(path: &Path, texts: &[String]) -> Result<()> {
    let body: String = texts.iter().enumerate().map(|(i, t)| format!("{i}\t{t}\n")).collect();
    fs::write(path, body).with_context(|| format!("cannot write {}", path.display()))
}

fn read_profiles(path: &Path, count: usize) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut out = vec![String::new(); count];
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, body) = line
            .split_once('\t')
            .ok_or_else(|| anyhow!("{}:{}: expected `id<TAB>text`", path.display(), n + 1))?;
        let id: usize = id
            .trim()
            .parse()
            .map_err(|_| anyhow!("{}:{}: bad id '{id}'", path.display(), n + 1))?;
        if id >= count {
            bail!("{}:{}: id {id} out of range (< {count})", path.display(), n + 1);
        }
        out[id] = body.to_string();
    }
    Ok(out)
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        clusters: a.clusters,
        users_per_cluster: a.users_per,
        items_per_cluster: a.items_per,
        noise: a.noise,
        dim: a.dim,
        seed: derive_seed(ctx.seed, "synth"),
    };
    let params = format!("{cfg:?}");
    let names = [
        "data/interactions.tsv",
        "data/user_embeddings.pmeb",
        "data/item_embeddings.pmeb",
        "data/user_profiles.tsv",
        "data/item_profiles.tsv",
    ];
    let outputs: Vec<PathBuf> = names.iter().map(|n| ctx.path(n)).collect();
    ctx.stage("synth", &params, &[], &outputs, || {
        let data = generate_synthetic(&cfg)?;
        ctx.dir("data")?;
        data::write_interactions(&outputs[0], &data.pairs)?;
        formats::write_matrix(&outputs[1], &data.user_embeddings)?;
        formats::write_matrix(&outputs[2], &data.item_embeddings)?;
        write_profiles(&outputs[3], &data.user_profiles)?;
        write_profiles(&outputs[4], &data.item_profiles)?;
        println!(
            "synth: {} users, {} items, {} interactions -> {}",
            data.num_users,
            data.num_items,
            data.pairs.len(),
            ctx.path("data").display()
        );
        Ok(())
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CompressSummary {
    kappa: usize,
    pca_mode: String,
    pre_normalize: bool,
    users: usize,
    items: usize,
    input_dim: usize,
    explained_variance: Vec<f64>,
}

fn compress_stage(ctx: &Ctx, a: &CompressArgs) -> Result<()> {
    let users_path = a.users.clone().unwrap_or_else(|| ctx.path("data/user_embeddings.pmeb"));
    let items_path = a.items.clone().unwrap_or_else(|| ctx.path("data/item_embeddings.pmeb"));
    let cfg = CompressConfig {
        kappa: ctx.pick(a.kappa, "pca.kappa", 32)?,
        mode: ctx.pick(a.pca_mode.as_deref().map(str::parse).transpose()?, "pca.mode", PcaMode::Joint)?,
        pre_normalize: a.pre_normalize || ctx.config.get("pca.pre_normalize")?.unwrap_or(false),
    };
    let params = format!("{cfg:?}");
    let mut outputs = vec![
        ctx.path("compress/users.pmeb"),
        ctx.path("compress/items.pmeb"),
        ctx.path("compress/compress.json"),
        ctx.path(if cfg.mode == PcaMode::Joint { "compress/pca_joint.pmpc" } else { "compress/pca_user.pmpc" }),
    ];
    if cfg.mode == PcaMode::PerSide {
        outputs.push(ctx.path("compress/pca_item.pmpc"));
    }
    let inputs = [users_path.clone(), items_path.clone()];
    ctx.stage("compress", &params, &inputs, &outputs, || {
        let users = compress::load_embeddings(&users_path, Side::User)?;
        let items = compress::load_embeddings(&items_path, Side::Item)?;
        let out = compress::compress_profiles(&users, &items, &cfg)?;
        ctx.dir("compress")?;
        formats::write_matrix(&outputs[0], &out.users.values)?;
        formats::write_matrix(&outputs[1], &out.items.values)?;
        out.user_model.write(&outputs[3])?;
        let mut explained = vec![out.user_model.explained_variance_ratio()];
        if let Some(m) = &out.item_model {
            m.write(&outputs[4])?;
            explained.push(m.explained_variance_ratio());
        }
        write_json(
            &outputs[2],
            &CompressSummary {
                kappa: cfg.kappa,
                pca_mode: cfg.mode.to_string(),
                pre_normalize: cfg.pre_normalize,
                users: users.rows(),
                items: items.rows(),
                input_dim: users.dim(),
                explained_variance: explained.clone(),
            },
        )?;
        println!(
            "compress: {} -> {} dims ({}), explained variance {:?}",
            users.dim(),
            cfg.kappa,
            cfg.mode,
            explained
        );
        Ok(())
    })
}

fn load_compressed(ctx: &Ctx) -> Result<(CompressedEmbeddings, CompressedEmbeddings, CompressSummary)> {
    let summary: CompressSummary = read_json(&ctx.path("compress/compress.json"))
        .context("compressed embeddings missing; run `promax compress` first")?;
    let users = formats::read_matrix(&ctx.path("compress/users.pmeb"))?;
    let items = formats::read_matrix(&ctx.path("compress/items.pmeb"))?;
    Ok((
        CompressedEmbeddings { side: Side::User, values: users },
        CompressedEmbeddings { side: Side::Item, values: items },
        summary,
    ))
}

fn retrieve(ctx: &Ctx, a: &RetrieveArgs) -> Result<()> {
    let interactions = a.interactions.clone().unwrap_or_else(|| ctx.path("data/interactions.tsv"));
    let default_profiles = |name: &str| {
        let p = ctx.path(name);
        p.exists().then_some(p)
    };
    let user_profiles = a.user_profiles.clone().or_else(|| default_profiles("data/user_profiles.tsv"));
    let item_profiles = a.item_profiles.clone().or_else(|| default_profiles("data/item_profiles.tsv"));
    let retrieval_cfg = RetrievalConfig {
        k_users: ctx.pick(a.k_users, "retrieval.k_users", 100)?,
        pool_cap: match a.pool_cap {
            Some(v) => Some(v),
            None => ctx.config.get("retrieval.pool_cap")?,
        },
    };
    let mode: String = ctx.pick(a.reranker.clone(), "reranker.mode", "deterministic".to_string())?;
    let url: Option<String> = match &a.rerank_url {
        Some(u) => Some(u.clone()),
        None => ctx.config.get("reranker.url")?,
    };
    let timeout_ms: u64 = ctx.pick(None, "reranker.timeout_ms", 30_000)?;
    let max_in_flight: usize = ctx.pick(None, "reranker.max_in_flight", 4)?;
    let instruction_path: Option<PathBuf> = ctx.config.get("reranker.instruction_path")?;
    let tau: f64 = ctx.pick(a.tau, "dist.tau", 0.2)?;
    let split_seed: u64 = ctx.pick(None, "split.seed", derive_seed(ctx.seed, "split"))?;

    let mut inputs = vec![
        interactions.clone(),
        ctx.path("compress/users.pmeb"),
        ctx.path("compress/items.pmeb"),
        ctx.path("compress/compress.json"),
    ];
    inputs.extend(user_profiles.iter().cloned());
    inputs.extend(item_profiles.iter().cloned());
    inputs.extend(instruction_path.iter().cloned());
    let outputs: Vec<PathBuf> = [
        "retrieve/train.tsv",
        "retrieve/val.tsv",
        "retrieve/test.tsv",
        "retrieve/split.json",
        "retrieve/augmentation.tsv",
        "retrieve/augmentation.json",
        "retrieve/p_llm.pmeb",
        "retrieve/p_llm.json",
    ]
    .iter()
    .map(|n| ctx.path(n))
    .collect();
    let params = format!("{retrieval_cfg:?} mode={mode} url={url:?} timeout={timeout_ms} tau={tau} split_seed={split_seed}");

    ctx.stage("retrieve", &params, &inputs, &outputs, || {
        let (users, items, summary) = load_compressed(ctx)?;
        let pairs = data::read_pairs(
            &interactions,
            LoadOptions {
                num_users: Some(users.rows()),
                num_items: Some(items.rows()),
            },
        )?;
        let dataset = InteractionDataset::split_from(users.rows(), items.rows(), &pairs.pairs, split_seed)?;
        let dir = ctx.dir("retrieve")?;
        let split = data::write_split(&dir, &dataset, split_seed)?;

        let user_texts = match &user_profiles {
            Some(p) => read_profiles(p, users.rows())?,
            None => Vec::new(),
        };
        let item_texts = match &item_profiles {
            Some(p) => read_profiles(p, items.rows())?,
            None => Vec::new(),
        };
        let instruction = match &instruction_path {
            Some(p) => fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?,
            None => DEFAULT_INSTRUCTION.to_string(),
        };
        let profile = data::compute_quantiles(dataset.histories());
        let inputs = AugmentInputs {
            histories: dataset.histories(),
            user_reps: &users,
            item_reps: &items,
            profile: &profile,
            user_profiles: &user_texts,
            item_profiles: &item_texts,
            instruction: &instruction,
        };
        let augmentation = match mode.as_str() {
            "deterministic" => retrieval::augment_all(&inputs, &retrieval_cfg, &DeterministicReranker, None)?,
            "remote" => {
                let remote = RemoteReranker::new(RemoteConfig::from_env(
                    url.clone(),
                    Duration::from_millis(timeout_ms),
                    max_in_flight,
                )?)?;
                let cap = remote.max_in_flight();
                retrieval::augment_all(&inputs, &retrieval_cfg, &remote as &dyn Reranker, Some(cap))?
            }
            other => bail!("unknown reranker mode '{other}' (deterministic | remote)"),
        };
        retrieval::write_augmentation(&outputs[4], &outputs[5], &augmentation)?;

        let p_llm = LlmDistributions::compute(&users.values, &items.values, tau, DistributionMode::Dense)?;
        p_llm.write(&outputs[6], &outputs[7], &summary.pca_mode)?;
        let added: usize = augmentation.users.iter().map(|u| u.selection.items.len()).sum();
        println!(
            "retrieve: split {}/{}/{} pairs; quartiles {:?}; {} items added; {} reranker fallbacks",
            split.train,
            split.val,
            split.test,
            profile.quantiles(),
            added,
            augmentation.fallback_count()
        );
        Ok(())
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    run: String,
    seed: u64,
    config: TrainConfig,
    best_epoch: usize,
    best_recall20_val: f64,
    epochs_run: usize,
    stopped_early: bool,
}

fn train_config(ctx: &Ctx, a: &TrainArgs) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let parse_opt = |v: &Option<String>| -> Result<Option<String>> { Ok(v.clone()) };
    let encoder: EncoderKind = ctx
        .pick(parse_opt(&a.encoder)?, "train.encoder", d.encoder.to_string())?
        .parse()?;
    let theta_sim: Similarity = ctx
        .pick(parse_opt(&a.theta_sim)?, "dist.theta_sim", d.theta_sim.to_string())?
        .parse()?;
    let cfg = TrainConfig {
        encoder,
        learning_rate: ctx.pick(a.lr, "train.lr", d.learning_rate)?,
        batch_size: ctx.pick(a.batch_size, "train.batch_size", d.batch_size)?,
        lambda1: ctx.pick(a.lambda1, "train.lambda1", d.lambda1)?,
        lambda2: ctx.pick(a.lambda2, "train.lambda2", d.lambda2)?,
        tau: ctx.pick(a.tau, "dist.tau", d.tau)?,
        dim: ctx.pick(a.dim, "train.dim", d.dim)?,
        layers: ctx.pick(a.layers, "train.layers", d.layers)?,
        max_epochs: ctx.pick(a.max_epochs, "train.max_epochs", d.max_epochs)?,
        patience: ctx.pick(a.patience, "train.patience", d.patience)?,
        reg: ctx.pick(a.reg, "train.reg", d.reg)?,
        eval_every: ctx.pick(a.eval_every, "train.eval_every", d.eval_every)?,
        theta_sim,
        seed: derive_seed(ctx.seed, "train"),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn default_run_name(cfg: &TrainConfig, seed: u64) -> String {
    format!("{}-l1_{}-l2_{}-seed{}", cfg.encoder, cfg.lambda1, cfg.lambda2, seed)
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let cfg = train_config(ctx, a)?;
    let dist_mode: DistributionMode = ctx.pick(None, "dist.mode", DistributionMode::Dense)?;
    let run = a.run.clone().unwrap_or_else(|| default_run_name(&cfg, ctx.seed));
    let split_dir = ctx.path("retrieve");
    let mut inputs: Vec<PathBuf> = data::SPLIT_FILES.iter().map(|f| split_dir.join(f)).collect();
    let mut missing = Vec::new();
    if !split_dir.join("split.json").exists() {
        missing.push("split (run `promax retrieve`)");
    }
    if cfg.lambda1 != 0.0 {
        match dist_mode {
            DistributionMode::Dense => {
                inputs.push(split_dir.join("p_llm.pmeb"));
                inputs.push(split_dir.join("p_llm.json"));
                if !split_dir.join("p_llm.pmeb").exists() {
                    missing.push("profile distributions (run `promax retrieve`)");
                }
            }
            DistributionMode::OnTheFly => {
                inputs.push(ctx.path("compress/users.pmeb"));
                inputs.push(ctx.path("compress/items.pmeb"));
                if !ctx.path("compress/users.pmeb").exists() {
                    missing.push("compressed embeddings (run `promax compress`)");
                }
            }
        }
    }
    if cfg.lambda2 != 0.0 {
        inputs.push(split_dir.join("augmentation.tsv"));
        if !split_dir.join("augmentation.tsv").exists() {
            missing.push("augmented histories (run `promax retrieve`)");
        }
    }
    if !missing.is_empty() {
        bail!("missing preprocessing artifacts: {}", missing.join(", "));
    }
    let run_dir = format!("train/{run}");
    let outputs: Vec<PathBuf> = ["checkpoint.pmck", "checkpoint.json", "metrics.jsonl"]
        .iter()
        .map(|f| ctx.path(&format!("{run_dir}/{f}")))
        .collect();
    let params = format!("{cfg:?} {dist_mode:?}");
    ctx.stage(&format!("train/{run}"), &params, &inputs, &outputs, || {
        let (dataset, _) = data::read_split(&split_dir)?;
        let p_llm = if cfg.lambda1 != 0.0 {
            Some(match dist_mode {
                DistributionMode::Dense => LlmDistributions::read(&split_dir.join("p_llm.pmeb"), &split_dir.join("p_llm.json"))?.0,
                DistributionMode::OnTheFly => {
                    let (users, items, _) = load_compressed(ctx)?;
                    LlmDistributions::compute(&users.values, &items.values, cfg.tau, DistributionMode::OnTheFly)?
                }
            })
        } else {
            None
        };
        let augmented = if cfg.lambda2 != 0.0 {
            let hist = retrieval::read_augmentation(&split_dir.join("augmentation.tsv"), dataset.num_users())?;
            Some(hist.iter().map(|h| h.item_ids()).collect::<Vec<_>>())
        } else {
            None
        };
        ctx.dir(&run_dir)?;
        let metrics_file = fs::File::create(&outputs[2])?;
        let mut metrics = BufWriter::new(metrics_file);
        let outcome = trainer::train(
            TrainInputs {
                dataset: &dataset,
                augmented: augmented.as_deref(),
                p_llm,
            },
            &cfg,
            Some(&mut metrics),
        )?;
        drop(metrics);
        outcome.table.write_checkpoint(&outputs[0])?;
        write_json(
            &outputs[1],
            &CheckpointMeta {
                run: run.clone(),
                seed: ctx.seed,
                config: cfg.clone(),
                best_epoch: outcome.best_epoch,
                best_recall20_val: outcome.best_recall,
                epochs_run: outcome.history.len(),
                stopped_early: outcome.stopped_early,
            },
        )?;
        println!(
            "train {run}: best recall@20 (val) {:.5} at epoch {} of {}",
            outcome.best_recall,
            outcome.best_epoch,
            outcome.history.len()
        );
        Ok(())
    })
}

fn resolve_run(ctx: &Ctx, run: &Option<String>) -> Result<String> {
    if let Some(r) = run {
        return Ok(r.clone());
    }
    let dir = ctx.path("train");
    let mut runs: Vec<String> = fs::read_dir(&dir)
        .with_context(|| format!("no trained runs under {}; run `promax train` first", dir.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("checkpoint.json").exists())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    runs.sort();
    match runs.len() {
        1 => Ok(runs.remove(0)),
        0 => bail!("no trained runs under {}", dir.display()),
        _ => bail!("several runs exist ({}); pick one with --run", runs.join(", ")),
    }
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let run = resolve_run(ctx, &a.run)?;
    let run_dir = ctx.path(&format!("train/{run}"));
    let split_dir = ctx.path("retrieve");
    let inputs: Vec<PathBuf> = data::SPLIT_FILES
        .iter()
        .map(|f| split_dir.join(f))
        .chain([run_dir.join("checkpoint.pmck"), run_dir.join("checkpoint.json")])
        .collect();
    let stem = format!("eval/{run}.{split}");
    let mut outputs = vec![ctx.path(&format!("{stem}.json")), ctx.path(&format!("{stem}.txt"))];
    if a.csv {
        outputs.push(ctx.path(&format!("{stem}.users.csv")));
    }
    let text_path = outputs[1].clone();
    ctx.stage(&format!("eval/{run}/{split}"), &format!("csv={}", a.csv), &inputs, &outputs, || {
        let meta: CheckpointMeta = read_json(&run_dir.join("checkpoint.json"))?;
        let table = EmbeddingTable::read_checkpoint(&run_dir.join("checkpoint.pmck"))?;
        let (dataset, _) = data::read_split(&split_dir)?;
        if table.num_users() != dataset.num_users() || table.num_items() != dataset.num_items() {
            bail!("checkpoint shape does not match the split");
        }
        let objective = Objective::new(
            meta.config.encoder,
            meta.config.layers,
            dataset.histories(),
            dataset.num_items(),
            None,
            None,
            ObjectiveConfig::default(),
        )?;
        let profile = data::compute_quantiles(dataset.histories());
        let mut report = evaluation::evaluate(&objective.encode(&table), &dataset, split, &profile);
        report.seed = Some(meta.seed);
        report.label = Some(run.clone());
        ctx.dir("eval")?;
        write_json(&outputs[0], &report)?;
        fs::write(&outputs[1], report.to_text())?;
        if a.csv {
            fs::write(&outputs[2], report.per_user_csv())?;
        }
        Ok(())
    })?;
    let text = fs::read_to_string(&text_path)?;
    if a.by_group {
        print!("{text}");
    } else {
        for line in text.lines().filter(|l| !l.starts_with('U')) {
            println!("{line}");
        }
    }
    Ok(())
}

fn load_reports(path: &Path) -> Result<Vec<EvalReport>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        let mut out = Vec::new();
        for f in files {
            out.extend(load_reports(&f)?);
        }
        return Ok(out);
    }
    let value: serde_json::Value = read_json(path)?;
    let reports = if value.is_array() {
        serde_json::from_value(value)?
    } else {
        vec![serde_json::from_value(value)?]
    };
    Ok(reports)
}

fn report(ctx: &Ctx, a: &ReportArgs) -> Result<()> {
    let base = load_reports(&a.compare[0])?;
    let treat = load_reports(&a.compare[1])?;
    if let Some(n) = a.seeds {
        if base.len() != n || treat.len() != n {
            bail!(
                "expected {n} seeds per side, found {} baseline and {} treatment reports",
                base.len(),
                treat.len()
            );
        }
    }
    let summary = evaluation::aggregate_seeds(&base, &treat)?;
    let dir = ctx.dir("report")?;
    write_json(&dir.join("summary.json"), &summary)?;
    let mut csv = String::from("group,metric,base_mean,base_sd,treat_mean,treat_sd,mean_diff,t,p_value,degenerate\n");
    for g in &summary.comparisons {
        let group = g.group.map_or("all".to_string(), |g| g.to_string());
        for m in &g.metrics {
            csv.push_str(&format!(
                "{group},{},{},{},{},{},{},{},{},{}\n",
                m.metric.name(),
                m.base_mean,
                m.base_sd,
                m.treat_mean,
                m.treat_sd,
                m.test.mean_diff,
                m.test.t.map_or(String::new(), |t| t.to_string()),
                m.test.p_value,
                m.test.degenerate
            ));
        }
    }
    fs::write(dir.join("summary.csv"), csv)?;
    print!("{}", summary.to_text());
    Ok(())
}
