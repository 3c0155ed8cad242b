use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "seed": 3,
  "corpus": {"n_questions": 120, "n_kp": 4, "n_pairs_train": 100, "n_pairs_test": 200,
             "vocab_size": 300, "max_len": 16},
  "model": {"d_model": 16, "n_text_layers": 1, "n_fusion_layers": 1, "n_heads": 2, "ff_mult": 2,
            "visual_channels": [4, 8], "image_size": 16},
  "pretrain": {"steps": 3, "mlm_steps": 3, "queue_size": 32, "batch_size": 8},
  "finetune": {"epochs": 1, "batch_size": 16},
  "eval": {"k": 5, "probe": {"epochs": 2}}
}"#;

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Run {
    fn new() -> Self {
        Self::with_config(TINY)
    }

    fn with_config(text: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("config.json");
        std::fs::write(&config, text).unwrap();
        let root = dir.path().join("out");
        Self { _dir: dir, root, config }
    }

    fn tqnet(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_tqnet"))
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(&self.root)
            .args(args)
            .env_remove("TQNET_OUT")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.tqnet(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap().trim().lines().last().unwrap_or("").to_string()
    }

    fn manifest_lines(&self) -> Vec<Value> {
        std::fs::read_to_string(self.root.join("manifest.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }
}

fn checkpoint_manifest(dir: &str) -> Value {
    let text = std::fs::read_to_string(Path::new(dir).join("manifest.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn tree_digest(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn gen_data_writes_corpus_files() {
    let run = Run::new();
    run.ok(&["gen-data"]);
    let corpus = run.root.join("corpus");
    for f in ["questions.jsonl", "pairs_train.jsonl", "pairs_test.jsonl", "images"] {
        assert!(corpus.join(f).exists(), "{f} missing");
    }
    assert_eq!(run.manifest_lines().len(), 1);
}

#[test]
fn gen_data_same_seed_same_content() {
    let a = Run::new();
    let b = Run::new();
    a.ok(&["gen-data"]);
    b.ok(&["gen-data"]);
    let da = tree_digest(&a.root.join("corpus"));
    assert!(!da.is_empty());
    assert_eq!(da, tree_digest(&b.root.join("corpus")));
}

#[test]
fn rerun_refused_without_force() {
    let run = Run::new();
    run.ok(&["gen-data"]);
    let again = run.tqnet(&["gen-data"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    run.ok(&["gen-data", "--force"]);
}

#[test]
fn invalid_config_exits_two() {
    let run = Run::with_config(r#"{"seed": 1, "bogus": true}"#);
    assert_eq!(run.tqnet(&["gen-data"]).status.code(), Some(2));
    let run = Run::with_config(r#"{"corpus": {"n_questions": 10, "unknown_key": 1}}"#);
    assert_eq!(run.tqnet(&["gen-data"]).status.code(), Some(2));
}

#[test]
fn unknown_subcommand_exits_two() {
    let run = Run::new();
    assert_eq!(run.tqnet(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn pretrain_records_stage_chain_and_fusion() {
    let run = Run::new();
    run.ok(&["gen-data"]);
    let mcl = run.ok(&["pretrain", "--strategy", "mcl", "--scope", "uni"]);
    let m = checkpoint_manifest(&mcl);
    assert_eq!(m["stages"], serde_json::json!(["mlm", "cl-uni"]));
    assert!(Path::new(&mcl).join("loss.csv").exists());

    let joint = run.ok(&["pretrain", "--strategy", "cl", "--fusion", "joint"]);
    assert_eq!(checkpoint_manifest(&joint)["tags"]["fusion"], "joint");

    let again = run.tqnet(&["pretrain", "--strategy", "mcl", "--scope", "uni"]);
    assert_eq!(again.status.code(), Some(2));
}

#[test]
fn pretrain_from_missing_checkpoint_exits_two() {
    let run = Run::new();
    run.ok(&["gen-data"]);
    let out = run.tqnet(&["finetune", "--from", "/nonexistent/ckpt"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cross_scope_without_images_exits_two() {
    let cfg = TINY.replace("\"max_len\": 16}", "\"max_len\": 16, \"image_fraction\": 0.0}");
    let run = Run::with_config(&cfg);
    run.ok(&["gen-data"]);
    let out = run.tqnet(&["pretrain", "--strategy", "cl", "--scope", "cross"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run.tqnet(&["eval", "--subset", "ii", "--from", "/nonexistent"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_pipeline_reports_and_csv() {
    let run = Run::new();
    run.ok(&["gen-data"]);
    let mcl = run.ok(&["pretrain"]);
    let ft = run.ok(&["finetune", "--method", "scl", "--from", &mcl]);
    let fm = checkpoint_manifest(&ft);
    assert_eq!(fm["tags"]["method"], "scl");
    assert_eq!(fm["parent"], checkpoint_manifest(&mcl)["id"]);
    assert_eq!(fm["stages"], serde_json::json!(["mlm", "cl-uni", "ft-scl"]));

    let report: Value = serde_json::from_str(&run.ok(&["eval", "--task", "similar", "--subset", "all", "--from", &ft])).unwrap();
    assert_eq!(report["metric"]["name"], "p@5");
    let v = report["metric"]["value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&v));

    let kp: Value = serde_json::from_str(&run.ok(&["eval", "--task", "kp", "--from", &mcl])).unwrap();
    assert!(kp["metrics"]["micro_f1"].is_number());
    assert!(kp["metrics"]["macro_f1"].is_number());

    let csv = std::fs::read_to_string(run.root.join("experiments.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    assert!(lines[0].starts_with("task,"));

    let pair = run.ok(&["finetune", "--method", "pair", "--from", &mcl]);
    assert_eq!(checkpoint_manifest(&pair)["tags"]["method"], "pair");
    run.ok(&["eval", "--from", &pair]);

    let random = run.ok(&["finetune", "--method", "scl"]);
    assert!(checkpoint_manifest(&random)["parent"].is_string());

    let verify = run.tqnet(&["verify", "--quick"]);
    let text = String::from_utf8_lossy(&verify.stdout);
    assert_eq!(verify.status.code(), Some(0), "{text}");
    assert!(text.contains("PASS manifest_integrity"), "{text}");
}

#[test]
fn eval_subset_ii_on_text_only_corpus_exits_two() {
    let cfg = TINY.replace("\"max_len\": 16}", "\"max_len\": 16, \"image_fraction\": 0.0}");
    let run = Run::with_config(&cfg);
    run.ok(&["gen-data"]);
    let ckpt = run.ok(&["pretrain", "--strategy", "mlm"]);
    let out = run.tqnet(&["eval", "--subset", "ii", "--from", &ckpt]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ii"));
    run.ok(&["eval", "--subset", "tt", "--from", &ckpt]);
}

#[test]
fn kp_task_rejects_pair_subsets() {
    let run = Run::new();
    run.ok(&["gen-data"]);
    let ckpt = run.ok(&["pretrain", "--strategy", "mlm"]);
    assert_eq!(run.tqnet(&["eval", "--task", "kp", "--subset", "tt", "--from", &ckpt]).status.code(), Some(2));
}

#[test]
fn verify_quick_passes_and_names_checks() {
    let run = Run::new();
    let out = run.tqnet(&["verify", "--quick"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}");
    for name in ["info_nce_oracle", "momentum_contraction", "scl_oracle", "precision_at_k_brute_force", "manifest_integrity"] {
        assert!(text.contains(name), "{name} not listed");
    }
}

#[test]
fn verify_flags_momentum_above_one() {
    let run = Run::new();
    let out = run.tqnet(&["verify", "--quick", "--momentum", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("FAIL momentum_contraction"), "{text}");
}

#[test]
fn verify_detects_orphan_artifacts() {
    let run = Run::new();
    run.ok(&["gen-data"]);
    std::fs::create_dir_all(run.root.join("checkpoints/stray")).unwrap();
    let out = run.tqnet(&["verify", "--quick"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL manifest_integrity"));
}

#[test]
fn env_var_overrides_output_root() {
    let run = Run::new();
    let other = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tqnet"))
        .arg("--config")
        .arg(&run.config)
        .arg("--out")
        .arg(&run.root)
        .arg("gen-data")
        .env("TQNET_OUT", other.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(other.path().join("corpus/questions.jsonl").exists());
    assert!(!run.root.join("corpus").exists());
}

#[test]
fn seed_flag_changes_corpus() {
    let a = Run::new();
    let b = Run::new();
    a.ok(&["gen-data"]);
    b.ok(&["--seed", "99", "gen-data"]);
    let qa = std::fs::read(a.root.join("corpus/questions.jsonl")).unwrap();
    let qb = std::fs::read(b.root.join("corpus/questions.jsonl")).unwrap();
    assert_ne!(qa, qb);
}
