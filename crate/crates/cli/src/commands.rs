use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use looprecon::diagnostics::{
    attention_probe, compare_tsv, early_stop_compare, kinf_sweep, loop_states, refinement_trace, sweep_tsv, EvalOptions,
    Reduction,
};
use looprecon::eval::evaluate_prediction;
use looprecon::losses::Target;
use looprecon::metrics::MetricReport;
use looprecon::train::{load_dataset, write_dataset, Checkpoint, Config, Shard, Trainer};
use looprecon::{Model, Tensor};
use serde_json::json;

use crate::{AnalyzeArgs, EvalArgs, GenDataArgs, Overrides, TrainArgs};

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

pub const MODES: [&str; 4] = ["trace", "probe", "sweep", "earlystop"];

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

/// File (or `base`) config, then environment, then flags.
fn resolve(o: &Overrides, base: Option<&Config>) -> Result<Config> {
    let text = match (&o.config, base) {
        (Some(p), _) => fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?,
        (None, Some(c)) => c.to_toml(),
        (None, None) => String::new(),
    };
    let mut cfg = Config::from_env_and_file(&text)?;
    if let Some(d) = o.deterministic {
        cfg.train.deterministic = d;
    }
    if let Some(v) = o.block_variant {
        cfg.model.variant = v;
    }
    if let Some(k) = o.k_sampler {
        cfg.schedule.k_sampler = k;
    }
    if let Some(k) = o.k_inf {
        cfg.schedule.k_inf = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn samples(shards: &[Shard]) -> Result<Vec<(String, Tensor<f32>, Target<f32>)>> {
    let mut out = Vec::new();
    for shard in shards {
        for (i, r) in shard.records.iter().enumerate() {
            let s = r.sample::<f32>(None)?;
            out.push((format!("{}/{i}", shard.id), s.images, s.target));
        }
    }
    Ok(out)
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut cfg = resolve(&a.overrides, None)?;
    if let Some(s) = a.overrides.seed {
        cfg.data.seed = s;
    }
    cfg.validate()?;
    let manifest = write_dataset(&cfg, &a.out)?;
    let total: usize = manifest.shards.iter().map(|s| s.count).sum();
    println!("wrote {total} scenes in {} shards to {}", manifest.shards.len(), a.out.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let ckpt = a.resume.as_ref().map(Checkpoint::<f32>::load).transpose()?;
    let mut cfg = resolve(&a.overrides, ckpt.as_ref().map(|c| &c.config))?;
    if let Some(s) = a.overrides.seed {
        cfg.train.seed = s;
    }
    let starting_stage_two = a.stage == Some(2) && ckpt.as_ref().is_some_and(|c| c.config.train.stage == 1);
    if let Some(s) = a.stage {
        cfg.train.stage = s;
    }
    if starting_stage_two {
        cfg.optim.warmup_steps = 0;
    }
    cfg.validate()?;
    let (_, shards) = load_dataset(&a.data)?;
    let mut trainer = match ckpt {
        None if cfg.train.stage == 2 => return Err("stage 2 needs --resume with a stage-1 checkpoint".into()),
        None => Trainer::<f32>::new(cfg, &shards)?,
        Some(c) if starting_stage_two => Trainer::stage_two(cfg, &c, &shards)?,
        Some(c) => Trainer::resume(cfg, c, &shards)?,
    };

    create_dir(&a.out)?;
    write(&a.out.join("config.toml"), trainer.config.to_toml())?;
    let log_path = a.out.join("train.log");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| format!("{}: {e}", log_path.display()))?;
    let ckpt_path = a.out.join("checkpoint.djvc");
    let (steps, log_every, ckpt_every) = {
        let t = &trainer.config.train;
        (t.steps, t.log_every, t.checkpoint_every)
    };
    while trainer.step < steps {
        let rec = trainer.train_step()?;
        let line = rec.to_line();
        writeln!(log, "{line}").map_err(|e| format!("{}: {e}", log_path.display()))?;
        if rec.step % log_every == 0 || trainer.step == steps {
            println!("{line}");
        }
        if trainer.step % ckpt_every == 0 && trainer.step < steps {
            trainer.checkpoint().save(&ckpt_path)?;
        }
    }
    trainer.checkpoint().save(&ckpt_path)?;
    println!("saved {}", ckpt_path.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::<f32>::load(&a.checkpoint)?;
    let cfg = resolve(&a.overrides, Some(&ckpt.config))?;
    let k = cfg.schedule.k_inf;
    let model: Model<f32> = ckpt.model()?;
    let (_, shards) = load_dataset(&a.data)?;
    let mut scenes = Vec::new();
    let mut reports = Vec::new();
    for (id, images, target) in samples(&shards)? {
        let pred = model.predict(&images, k, cfg.train.depth_head())?;
        let report = evaluate_prediction(&pred, &target, a.camera_source)?;
        scenes.push(json!({ "scene": id, "metrics": report }));
        reports.push(report);
    }
    let aggregate = MetricReport::merge(&reports);
    let doc = json!({
        "k": k,
        "camera_source": a.camera_source,
        "checkpoint": a.checkpoint.display().to_string(),
        "aggregate": aggregate,
        "scenes": scenes,
    });
    create_dir(&a.out)?;
    let path = a.out.join(format!("eval_k{k}.json"));
    write(&path, serde_json::to_string_pretty(&doc)?)?;
    println!("k={k} {}", aggregate.to_kv().replace('\n', " ").trim_end());
    println!("wrote {}", path.display());
    Ok(())
}

pub fn analyze(a: &AnalyzeArgs) -> Result<()> {
    if !MODES.contains(&a.mode.as_str()) {
        return Err(format!("unknown mode {:?}; expected one of: {}", a.mode, MODES.join(", ")).into());
    }
    let ckpt = Checkpoint::<f32>::load(&a.checkpoint)?;
    let cfg = resolve(&a.overrides, Some(&ckpt.config))?;
    let k = cfg.schedule.k_inf;
    let model: Model<f32> = ckpt.model()?;
    let (_, shards) = load_dataset(&a.data)?;
    let all = samples(&shards)?;
    let opts = EvalOptions {
        depth_head: cfg.train.depth_head(),
        camera_source: a.camera_source,
    };
    let pairs: Vec<(Tensor<f32>, Target<f32>)> = all.iter().map(|(_, i, t)| (i.clone(), t.clone())).collect();
    let scene = || {
        all.get(a.scene)
            .ok_or_else(|| format!("scene {} out of range ({} scenes)", a.scene, all.len()))
    };
    create_dir(&a.out)?;
    let mut written = Vec::new();
    match a.mode.as_str() {
        "trace" => {
            let states = loop_states(&model, &scene()?.1, k)?;
            let trace = refinement_trace(&states, model.config.width, Reduction::Flatten)?;
            let path = a.out.join("trace.tsv");
            write(&path, trace.to_tsv())?;
            written.push(path);
        }
        "probe" => {
            let (gh, gw) = model.config.grid();
            let patch = a.query_patch.unwrap_or((gh / 2) * gw + gw / 2);
            let iterations: Vec<usize> = if a.iterations.is_empty() { (0..k).collect() } else { a.iterations.clone() };
            let images = &scene()?.1;
            for it in iterations {
                let probe = attention_probe(&model, images, k, (a.query_view, patch), it)?;
                let path = a.out.join(format!("probe_it{it}.tsv"));
                write(&path, probe.to_tsv())?;
                written.push(path);
            }
        }
        "sweep" => {
            let ks: Vec<usize> = if a.ks.is_empty() { (1..=k).collect() } else { a.ks.clone() };
            let rows = kinf_sweep(&model, &pairs, &ks, opts)?;
            let path = a.out.join("sweep.tsv");
            write(&path, sweep_tsv(&rows))?;
            written.push(path);
        }
        "earlystop" => {
            let rows = early_stop_compare(&model, &pairs, k, opts)?;
            let path = a.out.join("earlystop.tsv");
            write(&path, compare_tsv(&rows))?;
            written.push(path);
        }
        _ => unreachable!("mode checked above"),
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
