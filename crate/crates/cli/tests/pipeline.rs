use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

fn promax(root: &Path, args: &[&str]) -> Output {
    promax_env(root, args, &[])
}

fn promax_env(root: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_promax"));
    cmd.arg("--out").arg(root).args(args);
    cmd.env_remove("PROMAX_RERANK_URL").env_remove("PROMAX_RERANK_KEY");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {stdout}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

const TRAIN: &[&str] = &[
    "train", "--encoder", "mf", "--lr", "0.01", "--batch-size", "256", "--layers", "2", "--max-epochs", "15",
];

fn prepare(root: &Path) {
    ok(promax(root, &["synth", "--clusters", "4", "--users-per", "25", "--items-per", "15"]));
    ok(promax(root, &["compress", "--kappa", "8"]));
    ok(promax(root, &["retrieve", "--k-users", "8"]));
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_sizes_and_reproducible_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["synth", "--clusters", "3", "--users-per", "10", "--items-per", "7"];
    ok(promax(a.path(), &args));
    ok(promax(b.path(), &args));
    for f in ["interactions.tsv", "user_embeddings.pmeb", "item_embeddings.pmeb", "user_profiles.tsv"] {
        let x = fs::read(a.path().join("data").join(f)).unwrap();
        let y = fs::read(b.path().join("data").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    let users = fs::read_to_string(a.path().join("data/user_profiles.tsv")).unwrap();
    let items = fs::read_to_string(a.path().join("data/item_profiles.tsv")).unwrap();
    assert_eq!(users.lines().count(), 30);
    assert_eq!(items.lines().count(), 21);
}

#[test]
fn usage_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = promax(dir.path(), &["synth", "--clusters", "2"]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "train.lr = 0.1\ntrain.nonsense = 3\n").unwrap();
    let out = promax(dir.path(), &["--config", cfg.to_str().unwrap(), "synth", "--clusters", "2", "--users-per", "3", "--items-per", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    let out = promax(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("promax retrieve"));
}

#[test]
fn full_pipeline_rerun_and_staleness() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    prepare(root);
    let manifest = fs::read(root.join("manifest.json")).unwrap();
    assert!(ok(promax(root, &["retrieve", "--k-users", "8"])).contains("up to date"));
    assert_eq!(fs::read(root.join("manifest.json")).unwrap(), manifest);

    let sidecar = json(&root.join("retrieve/augmentation.json"));
    assert_eq!(sidecar["fallback_count"], 0);
    assert_eq!(sidecar["reranker"], "deterministic");

    for seed in ["1", "2", "3"] {
        ok(promax(root, &[&["--seed", seed], TRAIN].concat()));
        ok(promax(root, &[&["--seed", seed], TRAIN, &["--lambda1", "1", "--lambda2", "0.1"]].concat()));
    }
    let base_run = "mf-l1_0-l2_0-seed1";
    let log = fs::read_to_string(root.join(format!("train/{base_run}/metrics.jsonl"))).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "l_rec", "l_sdr", "l_s2dr", "recall@20_val", "ndcg@20_val", "seconds"] {
        assert!(first.get(key).is_some(), "metrics line lacks {key}: {first}");
    }
    assert_eq!(log.lines().count(), 15);

    let out = ok(promax(root, &["eval", "--run", base_run, "--by-group", "--csv"]));
    for g in ["all", "U1", "U2", "U3", "U4"] {
        assert!(out.lines().any(|l| l.starts_with(g)), "missing {g} row in\n{out}");
    }
    assert!(root.join(format!("eval/{base_run}.test.users.csv")).exists());
    let out = promax(root, &["eval"]);
    assert_eq!(out.status.code(), Some(1), "ambiguous run must be rejected");

    let base = root.join("base");
    let treat = root.join("treat");
    fs::create_dir_all(&base).unwrap();
    fs::create_dir_all(&treat).unwrap();
    for seed in ["1", "2", "3"] {
        for (run, dest) in [
            (format!("mf-l1_0-l2_0-seed{seed}"), &base),
            (format!("mf-l1_1-l2_0.1-seed{seed}"), &treat),
        ] {
            ok(promax(root, &["eval", "--run", &run]));
            fs::copy(root.join(format!("eval/{run}.test.json")), dest.join(format!("{run}.json"))).unwrap();
        }
    }
    let text = ok(promax(root, &["report", "--compare", base.to_str().unwrap(), treat.to_str().unwrap(), "--seeds", "3"]));
    assert!(text.contains("recall@20"), "{text}");
    let summary = json(&root.join("report/summary.json"));
    assert_eq!(summary["seeds"].as_array().unwrap().len(), 3);
    let csv = fs::read_to_string(root.join("report/summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 4);
    let out = promax(root, &["report", "--compare", base.to_str().unwrap(), treat.to_str().unwrap(), "--seeds", "4"]);
    assert_eq!(out.status.code(), Some(1));

    fs::write(root.join("retrieve/train.tsv"), "0\t0\n").unwrap();
    let out = promax(root, TRAIN);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    ok(promax(root, &["--force", "retrieve", "--k-users", "8"]));
    ok(promax(root, TRAIN));
}

#[test]
fn zero_weights_match_plain_training() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    prepare(root);
    ok(promax(root, TRAIN));
    ok(promax(root, &[TRAIN, &["--lambda1", "0", "--lambda2", "0", "--run", "zero"]].concat()));
    let a = fs::read(root.join("train/mf-l1_0-l2_0-seed0/checkpoint.pmck")).unwrap();
    let b = fs::read(root.join("train/zero/checkpoint.pmck")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn on_the_fly_distributions_match_dense() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    prepare(root);
    let cfg = root.join("otf.conf");
    fs::write(&cfg, "dist.mode = on_the_fly\n").unwrap();
    let args = [TRAIN, &["--lambda1", "1"]].concat();
    ok(promax(root, &[&args[..], &["--run", "dense"]].concat()));
    ok(promax(root, &[&["--config", cfg.to_str().unwrap()], &args[..], &["--run", "otf"]].concat()));
    let a = fs::read_to_string(root.join("train/dense/metrics.jsonl")).unwrap();
    let b = fs::read_to_string(root.join("train/otf/metrics.jsonl")).unwrap();
    let l_sdr = |s: &str| -> Vec<f64> {
        s.lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["l_sdr"].as_f64().unwrap())
            .collect()
    };
    for (x, y) in l_sdr(&a).iter().zip(l_sdr(&b)) {
        assert!((x - y).abs() < 1e-4 * x.abs().max(1.0), "{x} vs {y}");
    }
}

/// Minimal HTTP endpoint that selects the last `k` candidates.
fn spawn_reranker(hits: Arc<AtomicUsize>, auth: Arc<Mutex<Option<String>>>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let hits = hits.clone();
            let auth = auth.clone();
            thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        *auth.lock().unwrap() = Some(line["authorization:".len()..].trim().to_string());
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
                let ids: Vec<i64> = req["candidates"].as_array().unwrap().iter().map(|c| c["id"].as_i64().unwrap()).collect();
                let k = req["k"].as_u64().unwrap() as usize;
                let selected: Vec<i64> = ids.iter().rev().take(k).copied().collect();
                hits.fetch_add(1, Ordering::SeqCst);
                let payload = serde_json::json!({ "selected": selected }).to_string();
                let _ = write!(
                    stream,
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
            });
        }
    });
    format!("http://{addr}/rerank")
}

#[test]
fn remote_reranker_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    prepare(root);
    let deterministic = fs::read(root.join("retrieve/augmentation.tsv")).unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let auth = Arc::new(Mutex::new(None));
    let url = spawn_reranker(hits.clone(), auth.clone());
    ok(promax_env(
        root,
        &["retrieve", "--k-users", "8", "--reranker", "remote"],
        &[("PROMAX_RERANK_URL", &url), ("PROMAX_RERANK_KEY", "sekret")],
    ));
    assert!(hits.load(Ordering::SeqCst) > 0);
    assert_eq!(auth.lock().unwrap().as_deref(), Some("Bearer sekret"));
    let sidecar = json(&root.join("retrieve/augmentation.json"));
    assert_eq!(sidecar["fallback_count"], 0);
    assert!(sidecar["reranker"].as_str().unwrap().starts_with("remote:"));
    assert_ne!(fs::read(root.join("retrieve/augmentation.tsv")).unwrap(), deterministic);
}

#[test]
fn unreachable_reranker_falls_back() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    prepare(root);
    let deterministic = fs::read(root.join("retrieve/augmentation.tsv")).unwrap();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let out = ok(promax_env(
        root,
        &["retrieve", "--k-users", "8", "--reranker", "remote"],
        &[("PROMAX_RERANK_URL", &format!("http://127.0.0.1:{port}/"))],
    ));
    let sidecar = json(&root.join("retrieve/augmentation.json"));
    assert!(sidecar["fallback_count"].as_u64().unwrap() > 0, "{out}");
    assert_eq!(fs::read(root.join("retrieve/augmentation.tsv")).unwrap(), deterministic);
    let out = promax(root, &["--force", "retrieve", "--reranker", "remote"]);
    assert_eq!(out.status.code(), Some(1), "remote mode without an endpoint must fail");
}
