use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use metadiff::dataset::{generate_dataset, make_condition, ConditionVector, Dataset, Split, DATASET_FILE};
use metadiff::denoiser::Checkpoint;
use metadiff::eval::{evaluate_model, export_report, random_baseline, sample_mae, EvalReport};
use metadiff::grid::{ExtraParams, StructureGrid};
use metadiff::sampler::{generate, SampleRequest};
use metadiff::schedule::linear_schedule;
use metadiff::surrogate::{solve, ProxyParams, ProxySpec, SpectralResponse};
use metadiff::trainer::fit;
use metadiff::Error;

use crate::config::AppConfig;
use crate::{EvalArgs, Failure, GenDataArgs, InspectArgs, SampleArgs, TrainArgs};

pub const SIDECAR: &str = "samples.json";

fn header(command: &str, threads: usize, config: Value) {
    println!(
        "{}",
        json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "threads": threads,
            "config": config,
        })
    );
}

fn existing(path: Option<&PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    let path = path.ok_or_else(|| Failure::usage(format!("missing required --{flag}")))?;
    if !path.exists() {
        return Err(Failure::usage(format!("--{flag} {} does not exist", path.display())));
    }
    Ok(path.clone())
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

pub fn gen_data(a: GenDataArgs, threads: usize) -> Result<(), Failure> {
    header(
        "gen-data",
        threads,
        json!({
            "out": a.out,
            "n": a.n,
            "size": a.size,
            "seed": a.seed,
            "proxy_seed": a.proxy_seed,
            "n_features": a.n_features,
        }),
    );
    let proxy = ProxyParams::new(a.proxy_seed, a.n_features)?;
    let ds = generate_dataset(&a.out, a.n, a.size, &proxy, a.seed)?;
    let c = ds.manifest.counts;
    println!(
        "wrote {} samples (train {} / val {} / test {}), grid {}x{}, proxy seed {} -> {}",
        c.total(),
        c.train,
        c.val,
        c.test,
        a.size,
        a.size,
        a.proxy_seed,
        a.out.join(DATASET_FILE).display()
    );
    Ok(())
}

pub fn train(a: TrainArgs, threads: usize) -> Result<(), Failure> {
    let cfg = AppConfig::resolve(&a)?;
    let data = existing(cfg.data.as_ref(), "data")?;
    let out = cfg.out.clone().ok_or_else(|| Failure::usage("missing required --out"))?;
    cfg.train.validate()?;
    let ds = Dataset::load(&data)?;
    let model_cfg = cfg.denoiser(ds.manifest.quadrant_side());
    model_cfg.validate()?;
    header("train", threads, json!({ "app": cfg, "denoiser": model_cfg }));

    let sched = linear_schedule(cfg.train.timesteps)?;
    let model = metadiff::denoiser::DenoiserModel::<f32>::init(model_cfg, cfg.train.seed)?;
    let (_, report) = fit(model, &ds, &sched, &cfg.train, Some(&out), |r| {
        println!("epoch {} train_loss {} val_mae {}", r.epoch, r.train_loss, r.val_mae);
        eprintln!("epoch {} took {:.1} s", r.epoch, r.seconds);
    })?;
    if a.timing {
        std::fs::write(out.join("timing.csv"), report.timing_csv()).map_err(Error::from)?;
    }
    println!(
        "{}",
        json!({
            "best_epoch": report.best_epoch,
            "baseline_val_mae": report.baseline_val_mae,
            "checkpoint": out.join(metadiff::trainer::BEST_CHECKPOINT),
        })
    );
    Ok(())
}

/// Target spectrum and layer parameters in physical units.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionFile {
    pub spectral: Vec<f64>,
    pub w1: f64,
    pub h2: f64,
    pub n2: f64,
}

impl ConditionFile {
    fn condition(&self) -> Result<ConditionVector, Error> {
        let values: Vec<f32> = self.spectral.iter().map(|&v| v as f32).collect();
        let resp = SpectralResponse::from_slice(&values)?;
        make_condition(&resp, &ExtraParams::new(self.w1, self.h2, self.n2)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleEntry {
    pub file: String,
    pub mae: f64,
}

/// Written next to the generated grids by `sample`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub checkpoint: PathBuf,
    pub target: ConditionFile,
    /// The 55-value condition the sampler saw.
    pub condition: Vec<f32>,
    pub count: usize,
    pub guidance: f64,
    pub seed: u64,
    pub proxy: ProxySpec,
    pub samples: Vec<SampleEntry>,
}

fn grid_mae(grid: &StructureGrid, cond: &ConditionVector, proxy: &ProxyParams) -> Result<f64, Error> {
    let resp = solve(grid, &cond.extras(), proxy)?;
    sample_mae(&cond.spectral(), &resp.to_vec())
}

pub fn sample(a: SampleArgs, threads: usize) -> Result<(), Failure> {
    header(
        "sample",
        threads,
        json!({
            "checkpoint": a.checkpoint,
            "condition": a.condition,
            "count": a.count,
            "guidance": a.guidance,
            "seed": a.seed,
            "out": a.out,
        }),
    );
    let text = std::fs::read_to_string(&a.condition)
        .map_err(|e| Failure::usage(format!("--condition {}: {e}", a.condition.display())))?;
    let target: ConditionFile = serde_json::from_str(&text)
        .map_err(|e| Failure::usage(format!("--condition {}: {e}", a.condition.display())))?;
    let cond = target.condition()?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let spec = ckpt
        .meta
        .proxy
        .ok_or_else(|| Failure::usage("checkpoint does not record a surrogate; cannot score samples"))?;
    let proxy = ProxyParams::from_spec(spec)?;
    let req = SampleRequest {
        condition: cond,
        count: a.count,
        guidance_w: a.guidance,
        seed: a.seed,
    };
    let grids = generate(&ckpt.model, &ckpt.schedule, &req)?;

    std::fs::create_dir_all(&a.out).map_err(Error::from)?;
    let mut samples = Vec::with_capacity(grids.len());
    for (i, g) in grids.iter().enumerate() {
        let file = format!("sample_{i:03}.pgm");
        g.write_pgm(a.out.join(&file))?;
        let mae = grid_mae(g, &cond, &proxy)?;
        println!("{file} mae {mae}");
        samples.push(SampleEntry { file, mae });
    }
    let sidecar = Sidecar {
        checkpoint: a.checkpoint,
        target,
        condition: cond.values().to_vec(),
        count: a.count,
        guidance: a.guidance,
        seed: a.seed,
        proxy: spec,
        samples,
    };
    write_json(&a.out.join(SIDECAR), &sidecar)
}

fn finish_eval(report: &EvalReport, out: &Path) -> Result<(), Failure> {
    export_report(report, out)?;
    let summary: Value = serde_json::from_str(&report.summary_json()?).map_err(Error::from)?;
    println!("{summary}");
    Ok(())
}

fn eval_samples(dir: &Path, out: &Path) -> Result<(), Failure> {
    let sidecar_path = dir.join(SIDECAR);
    let text = std::fs::read_to_string(&sidecar_path).map_err(|e| io_failure(&sidecar_path, e))?;
    let sidecar: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::CorruptContainer(format!("{SIDECAR}: {e}")))?;
    let cond = ConditionVector::from_slice(&sidecar.condition)?;
    let proxy = ProxyParams::from_spec(sidecar.proxy)?;
    let mut maes = Vec::with_capacity(sidecar.samples.len());
    for s in &sidecar.samples {
        let grid_path = dir.join(&s.file);
        let file = std::fs::File::open(&grid_path).map_err(|e| io_failure(&grid_path, e))?;
        let grid = StructureGrid::read_pgm(file)?;
        let mae = grid_mae(&grid, &cond, &proxy)?;
        println!("{} mae {mae} sidecar {} match {}", s.file, s.mae, mae == s.mae);
        maes.push(mae);
    }
    finish_eval(&EvalReport::from_maes(maes)?, out)
}

pub fn eval(a: EvalArgs, threads: usize) -> Result<(), Failure> {
    header(
        "eval",
        threads,
        json!({
            "checkpoint": a.checkpoint,
            "data": a.data,
            "split": a.split,
            "guidance": a.guidance,
            "seed": a.seed,
            "baseline": a.baseline,
            "samples": a.samples,
            "out": a.out,
        }),
    );
    if let Some(dir) = &a.samples {
        let dir = existing(Some(dir), "samples")?;
        return eval_samples(&dir, &a.out);
    }
    let split: Split = a.split.parse()?;
    let data = existing(a.data.as_ref(), "data")?;
    if !a.baseline && a.checkpoint.is_none() {
        return Err(Failure::usage("need --checkpoint, --baseline or --samples"));
    }
    let ds = Dataset::load(&data)?;
    let proxy = ProxyParams::from_spec(ds.manifest.proxy)?;
    let report = if a.baseline {
        random_baseline(&ds, split, &proxy, a.seed)?
    } else {
        let path = existing(a.checkpoint.as_ref(), "checkpoint")?;
        let ckpt = Checkpoint::load(&path)?;
        if ckpt.meta.grid_side != ds.manifest.grid_side {
            return Err(Failure::usage(format!(
                "checkpoint generates {0}x{0} grids but the dataset holds {1}x{1}",
                ckpt.meta.grid_side, ds.manifest.grid_side
            )));
        }
        evaluate_model(&ckpt.model, &ckpt.schedule, &ds, split, &proxy, a.guidance, a.seed)?
    };
    finish_eval(&report, &a.out)
}

pub fn inspect(a: InspectArgs, threads: usize) -> Result<(), Failure> {
    header("inspect", threads, json!({ "path": a.path }));
    let path = if a.path.is_dir() { a.path.join(DATASET_FILE) } else { a.path.clone() };
    let bytes = std::fs::read(&path).map_err(|e| io_failure(&path, e))?;
    let summary = match bytes.get(..4) {
        Some(m) if m == &metadiff::denoiser::checkpoint::CHECKPOINT_MAGIC[..] => {
            let ck = Checkpoint::from_bytes(&bytes)?;
            let tensors: Vec<Value> = ck
                .model
                .layout()
                .entries
                .iter()
                .map(|e| json!({ "name": e.name, "shape": e.shape }))
                .collect();
            json!({
                "kind": "checkpoint",
                "denoiser": ck.model.config(),
                "schedule": ck.schedule.spec(),
                "meta": ck.meta,
                "parameters": ck.model.num_params(),
                "tensors": tensors,
                "checksum": "ok",
            })
        }
        Some(m) if m == &metadiff::dataset::DATASET_MAGIC[..] => {
            let ds = Dataset::from_bytes(&bytes)?;
            let q = ds.manifest.quadrant_side();
            json!({
                "kind": "dataset",
                "manifest": ds.manifest,
                "blocks": Split::ALL.iter().map(|&s| json!({
                    "split": s,
                    "grids": [ds.split(s).len(), q, q],
                    "conditions": [ds.split(s).len(), metadiff::dataset::CONDITION_LEN],
                })).collect::<Vec<_>>(),
                "checksum": "ok",
            })
        }
        _ => return Err(Error::CorruptContainer(format!("{}: unrecognized file", path.display())).into()),
    };
    println!("{}", serde_json::to_string_pretty(&summary).map_err(Error::from)?);
    Ok(())
}
