use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use looprecon::losses::Stage;
use looprecon::train::{trainable, Checkpoint, Config, Manifest, ManifestShard, MANIFEST_FILE};
use looprecon::ModelConfig;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_looprecon"));
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("LOOPRECON_")) {
        c.env_remove(k);
    }
    c
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "{:?} failed:\n{}{}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn micro_config(dir: &Path) -> PathBuf {
    let mut cfg = Config::default();
    cfg.model = ModelConfig::micro();
    cfg.schedule.k_min = 1;
    cfg.schedule.k_max = 3;
    cfg.schedule.k_inf = 3;
    cfg.data.scenes = vec![2, 1];
    cfg.data.views = 3;
    cfg.data.views_max = 3;
    cfg.train.steps = 3;
    cfg.train.checkpoint_every = 2;
    cfg.optim.warmup_steps = 1;
    let path = dir.join("micro.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = micro_config(&root);
    let data = root.join("data");
    run(bin().args(["gen-data", "--config"]).arg(&config).arg("--out").arg(&data));
    Fixture { _dir: dir, root, config, data }
}

fn train(f: &Fixture, out: &str, extra: &[&str]) -> PathBuf {
    let out = f.root.join(out);
    run(bin()
        .arg("train")
        .arg("--config")
        .arg(&f.config)
        .arg("--data")
        .arg(&f.data)
        .arg("--out")
        .arg(&out)
        .args(extra));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn gen_data_writes_scenes_and_manifest() {
    let f = fixture();
    let manifest = Manifest::load(&f.data).unwrap();
    assert_eq!(manifest.shards.len(), 2);
    assert_eq!(manifest.shards.iter().map(|s| s.count).collect::<Vec<_>>(), vec![2, 1]);
    for s in &manifest.shards {
        assert_eq!(s.files.len(), s.count);
        for file in &s.files {
            let r = looprecon::synthdata::read_record(f.data.join(file)).unwrap();
            assert_eq!((r.height, r.width, r.views.len()), (32, 32, 3));
        }
    }

    let again = f.root.join("again");
    run(bin().args(["gen-data", "--config"]).arg(&f.config).arg("--out").arg(&again));
    for s in &manifest.shards {
        for file in &s.files {
            assert_eq!(std::fs::read(f.data.join(file)).unwrap(), std::fs::read(again.join(file)).unwrap());
        }
    }
    let other = f.root.join("other");
    run(bin().args(["gen-data", "--seed", "7", "--config"]).arg(&f.config).arg("--out").arg(&other));
    let file = &manifest.shards[0].files[0];
    assert_ne!(std::fs::read(f.data.join(file)).unwrap(), std::fs::read(other.join(file)).unwrap());
}

#[test]
fn manifest_counts_drive_the_mixture() {
    let m = Manifest {
        mixture_alpha: 0.5,
        shards: vec![
            ManifestShard { id: "a".into(), count: 100, files: vec![] },
            ManifestShard { id: "b".into(), count: 400, files: vec![] },
        ],
    };
    let p = m.probs().unwrap();
    assert!((p[0] - 1.0 / 3.0).abs() < 1e-12 && (p[1] - 2.0 / 3.0).abs() < 1e-12);
    let text = std::fs::read_to_string(fixture().data.join(MANIFEST_FILE)).unwrap();
    assert!(text.contains("count = 2"));
}

#[test]
fn train_writes_log_and_checkpoint_and_resumes() {
    let f = fixture();
    let out = train(&f, "run", &[]);
    let log = std::fs::read_to_string(out.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for (i, line) in log.lines().enumerate() {
        assert!(line.starts_with(&format!("step={i} k=")), "{line}");
        for key in ["lr=", "total=", "depth=", "ray=", "point=", "camera="] {
            assert!(line.contains(key), "{line}");
        }
    }
    let ckpt = Checkpoint::<f32>::load(out.join("checkpoint.djvc")).unwrap();
    assert_eq!(ckpt.step, 3);

    // Same seed, same curve.
    let again = train(&f, "run2", &[]);
    assert_eq!(std::fs::read_to_string(again.join("train.log")).unwrap(), log);
    assert_eq!(
        std::fs::read(again.join("checkpoint.djvc")).unwrap(),
        std::fs::read(out.join("checkpoint.djvc")).unwrap()
    );

    // Continue to five steps through the environment override.
    let resumed = f.root.join("run");
    run(bin()
        .env("LOOPRECON_TRAIN_STEPS", "5")
        .arg("train")
        .arg("--data")
        .arg(&f.data)
        .arg("--out")
        .arg(&resumed)
        .arg("--resume")
        .arg(out.join("checkpoint.djvc")));
    let log = std::fs::read_to_string(resumed.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(log.lines().last().unwrap().starts_with("step=4 "));

    let bad = bin()
        .args(["train", "--seed", "99", "--data"])
        .arg(&f.data)
        .arg("--out")
        .arg(f.root.join("bad"))
        .arg("--resume")
        .arg(out.join("checkpoint.djvc"))
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(stderr(&bad).contains("seed"), "{}", stderr(&bad));
}

#[test]
fn stage_two_freezes_everything_but_the_depth_decoder() {
    let f = fixture();
    let one = train(&f, "one", &[]);
    let no_init = bin()
        .args(["train", "--stage", "2", "--config"])
        .arg(&f.config)
        .arg("--data")
        .arg(&f.data)
        .arg("--out")
        .arg(f.root.join("x"))
        .output()
        .unwrap();
    assert!(!no_init.status.success());
    assert!(stderr(&no_init).contains("stage-1 checkpoint"));

    let stage1 = one.join("checkpoint.djvc");
    let two = train(&f, "two", &["--stage", "2", "--resume", stage1.to_str().unwrap()]);
    let before = Checkpoint::<f32>::load(&stage1).unwrap();
    let after = Checkpoint::<f32>::load(two.join("checkpoint.djvc")).unwrap();
    assert_eq!(after.config.train.stage, 2);
    assert_eq!(after.config.optim.warmup_steps, 0);
    let head = trainable(Stage::Two);
    assert_eq!(after.params.checksum(|n| !head(n)), before.params.checksum(|n| !head(n)));
    assert_ne!(after.params.checksum(&head), before.params.checksum(&head));
    let log = std::fs::read_to_string(two.join("train.log")).unwrap();
    assert!(log.lines().all(|l| !l.contains("conf=0.000000e0")), "{log}");
}

fn eval_json(f: &Fixture, ckpt: &Path, out: &Path, extra: &[&str]) -> serde_json::Value {
    let o = run(bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(ckpt)
        .arg("--data")
        .arg(&f.data)
        .arg("--out")
        .arg(out)
        .args(extra));
    let text = String::from_utf8(o.stdout).unwrap();
    let path = text.lines().last().unwrap().strip_prefix("wrote ").unwrap();
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn eval_writes_one_report_per_k() {
    let f = fixture();
    let ckpt = train(&f, "run", &[]).join("checkpoint.djvc");
    let out = f.root.join("eval");
    let a = eval_json(&f, &ckpt, &out, &["--k-inf", "2"]);
    let b = eval_json(&f, &ckpt, &out, &["--k-inf", "3"]);
    assert!(out.join("eval_k2.json").exists() && out.join("eval_k3.json").exists());
    assert_eq!(a["k"], 2);
    assert_eq!(b["k"], 3);
    assert_eq!(a["scenes"].as_array().unwrap().len(), 3);
    assert_eq!(a["aggregate"]["n_pairs"], 9);
    assert_ne!(a["aggregate"]["rel_l2"], b["aggregate"]["rel_l2"]);

    let head = eval_json(&f, &ckpt, &f.root.join("eval_head"), &["--k-inf", "2", "--camera-source", "head"]);
    assert_eq!(head["camera_source"], "head");
    for key in ["rel_l2", "ir", "n_points"] {
        assert_eq!(head["aggregate"][key], a["aggregate"][key]);
    }

    let zero = bin()
        .args(["eval", "--k-inf", "0", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&f.data)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!zero.status.success());
    assert!(stderr(&zero).contains("k_inf"), "{}", stderr(&zero));
}

fn analyze(f: &Fixture, ckpt: &Path, mode: &str, extra: &[&str]) -> Output {
    bin()
        .arg("analyze")
        .arg("--checkpoint")
        .arg(ckpt)
        .arg("--data")
        .arg(&f.data)
        .arg("--out")
        .arg(f.root.join("analysis"))
        .args(["--mode", mode])
        .args(extra)
        .output()
        .unwrap()
}

#[test]
fn analyze_modes_write_their_artifacts() {
    let f = fixture();
    let ckpt = train(&f, "run", &[]).join("checkpoint.djvc");
    let dir = f.root.join("analysis");

    assert!(analyze(&f, &ckpt, "trace", &[]).status.success());
    let trace = std::fs::read_to_string(dir.join("trace.tsv")).unwrap();
    let rows: Vec<&str> = trace.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.split('\t').count() == 4));

    assert!(analyze(&f, &ckpt, "probe", &["--iterations", "0,2"]).status.success());
    for it in [0, 2] {
        let probe = std::fs::read_to_string(dir.join(format!("probe_it{it}.tsv"))).unwrap();
        // 3 views × 4×4 patch grid.
        assert_eq!(probe.lines().count(), 1 + 3 * 16);
    }

    assert!(analyze(&f, &ckpt, "sweep", &[]).status.success());
    assert!(analyze(&f, &ckpt, "earlystop", &[]).status.success());
    let sweep = std::fs::read_to_string(dir.join("sweep.tsv")).unwrap();
    let early = std::fs::read_to_string(dir.join("earlystop.tsv")).unwrap();
    let last_sweep: Vec<&str> = sweep.lines().last().unwrap().split('\t').collect();
    let last_early: Vec<&str> = early.lines().last().unwrap().split('\t').collect();
    assert_eq!(last_sweep[0], "3");
    assert_eq!(last_early[1..5], last_sweep[1..5]);
    assert_eq!(last_early[5..9], last_sweep[1..5]);

    let bad = analyze(&f, &ckpt, "heatmap", &[]);
    assert!(!bad.status.success());
    let msg = stderr(&bad);
    for mode in ["trace", "probe", "sweep", "earlystop"] {
        assert!(msg.contains(mode), "{msg}");
    }
}

#[test]
fn ablation_switches_are_flags() {
    let f = fixture();
    let shared = train(&f, "shared", &["--block-variant", "shared", "--k-sampler", "fixed"]);
    let decoupled = train(&f, "decoupled", &["--block-variant", "decoupled"]);
    let a = Checkpoint::<f32>::load(shared.join("checkpoint.djvc")).unwrap();
    let b = Checkpoint::<f32>::load(decoupled.join("checkpoint.djvc")).unwrap();
    assert_eq!(a.config.schedule.k_sampler, looprecon::train::KSamplerKind::Fixed);
    assert!(a.model().unwrap().recurrent_param_count() < b.model().unwrap().recurrent_param_count());
    let log = std::fs::read_to_string(shared.join("train.log")).unwrap();
    assert!(log.lines().all(|l| l.contains(" k=3 ")));

    let bad = bin().args(["train", "--block-variant", "tied", "--data", "x", "--out", "y"]).output().unwrap();
    assert!(!bad.status.success());
}
