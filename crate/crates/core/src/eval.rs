//! Spectral accuracy of generated structures.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{draw_quadrant, ConditionVector, Dataset, Sample, Split, SPECTRAL_LEN};
use crate::error::{Error, Result};
use crate::grid::QuadrantGrid;
use crate::rng::{hash_f32s, stream};
use crate::sampler::{generate_many_quadrants, Guidance, NoisePredictor};
use crate::schedule::NoiseSchedule;
use crate::surrogate::{solve_quadrant, ProxyParams};

pub const HISTOGRAM_BINS: usize = 40;
pub const SAMPLES_CSV: &str = "per_sample.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const HISTOGRAM_DAT: &str = "histogram.dat";

const RANDOM_STREAM: u64 = 0x4d44_5247;

/// Mean absolute difference over the 52 spectral samples.
pub fn sample_mae(target: &[f64], generated: &[f64]) -> Result<f64> {
    for v in [target, generated] {
        if v.len() != SPECTRAL_LEN {
            return Err(Error::LengthMismatch {
                expected: SPECTRAL_LEN,
                actual: v.len(),
            });
        }
    }
    Ok(target.iter().zip(generated).map(|(a, b)| (a - b).abs()).sum::<f64>() / SPECTRAL_LEN as f64)
}

/// Smallest value with at least 95% of the list at or below it.
pub fn p95(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (95 * sorted.len()).div_ceil(100);
    Some(sorted[rank - 1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Uniform bins over `[0, max]`, or `[0, 1]` when every value is zero.
    /// The last bin is closed on the right.
    pub fn uniform(values: &[f64], bins: usize) -> Self {
        let max = values.iter().copied().fold(0.0, f64::max);
        let hi = if max > 0.0 { max } else { 1.0 };
        let edges = (0..=bins).map(|i| hi * i as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = ((v / hi) * bins as f64).floor() as usize;
            counts[b.min(bins - 1)] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub maes: Vec<f64>,
    pub mean: f64,
    pub p95: f64,
    pub histogram: Histogram,
}

#[derive(Serialize)]
struct Summary {
    count: usize,
    mean_mae: f64,
    p95_mae: f64,
    max_mae: f64,
}

impl EvalReport {
    pub fn from_maes(maes: Vec<f64>) -> Result<Self> {
        let p95 = p95(&maes).ok_or(Error::Empty("evaluation report"))?;
        let mean = maes.iter().sum::<f64>() / maes.len() as f64;
        let histogram = Histogram::uniform(&maes, HISTOGRAM_BINS);
        Ok(Self {
            maes,
            mean,
            p95,
            histogram,
        })
    }

    pub fn max(&self) -> f64 {
        self.maes.iter().copied().fold(0.0, f64::max)
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Summary {
            count: self.maes.len(),
            mean_mae: self.mean,
            p95_mae: self.p95,
            max_mae: self.max(),
        })?)
    }
}

/// Writes `per_sample.csv`, `summary.json` and a gnuplot-style `histogram.dat` into `dir`.
pub fn export_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<()> {
    if report.maes.is_empty() {
        return Err(Error::Empty("evaluation report"));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from("index,mae\n");
    for (i, m) in report.maes.iter().enumerate() {
        writeln!(csv, "{i},{m}").unwrap();
    }
    std::fs::write(dir.join(SAMPLES_CSV), csv)?;
    std::fs::write(dir.join(SUMMARY_JSON), report.summary_json()? + "\n")?;
    let mut dat = String::from("# bin_lo bin_hi count\n");
    let h = &report.histogram;
    for (i, c) in h.counts.iter().enumerate() {
        writeln!(dat, "{} {} {c}", h.edges[i], h.edges[i + 1]).unwrap();
    }
    std::fs::write(dir.join(HISTOGRAM_DAT), dat)?;
    Ok(())
}

/// Per-sample errors from a `per_sample.csv` written by [`export_report`].
pub fn read_samples_csv(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            line.split(',')
                .nth(1)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::CorruptContainer(format!("bad csv line `{line}`")))
        })
        .collect()
}

/// Produces one binary quadrant per condition.
pub trait StructureGenerator: Sync {
    fn generate(&self, conditions: &[ConditionVector], seed: u64) -> Result<Vec<QuadrantGrid>>;
}

/// The trained sampler.
pub struct DiffusionGenerator<'a, M> {
    pub model: &'a M,
    pub schedule: &'a NoiseSchedule,
    pub guidance_w: f64,
}

impl<M: NoisePredictor> StructureGenerator for DiffusionGenerator<'_, M> {
    fn generate(&self, conditions: &[ConditionVector], seed: u64) -> Result<Vec<QuadrantGrid>> {
        let guidance = Guidance::weight(self.guidance_w)?;
        generate_many_quadrants(self.model, self.schedule, conditions, guidance, seed)
    }
}

/// Ignores the condition and draws from the dataset's structure prior: the
/// chance baseline.
pub struct RandomGenerator {
    pub quadrant_side: usize,
}

impl StructureGenerator for RandomGenerator {
    fn generate(&self, conditions: &[ConditionVector], seed: u64) -> Result<Vec<QuadrantGrid>> {
        Ok(conditions
            .iter()
            .map(|c| draw_quadrant(&mut stream(seed, &[RANDOM_STREAM, hash_f32s(c.values())]), self.quadrant_side))
            .collect())
    }
}

/// Returns the structure each condition was labeled from.
pub struct OracleGenerator {
    by_condition: HashMap<Vec<u32>, QuadrantGrid>,
}

fn key(c: &ConditionVector) -> Vec<u32> {
    c.values().iter().map(|v| v.to_bits()).collect()
}

impl OracleGenerator {
    pub fn new(samples: &[Sample]) -> Self {
        let mut by_condition = HashMap::new();
        for s in samples {
            by_condition.entry(key(&s.condition)).or_insert_with(|| s.quadrant.clone());
        }
        Self { by_condition }
    }
}

impl StructureGenerator for OracleGenerator {
    fn generate(&self, conditions: &[ConditionVector], _seed: u64) -> Result<Vec<QuadrantGrid>> {
        conditions
            .iter()
            .map(|c| {
                self.by_condition
                    .get(&key(c))
                    .cloned()
                    .ok_or_else(|| Error::config("condition", "not in the oracle's sample set"))
            })
            .collect()
    }
}

/// MAE of each generated quadrant against its condition's spectrum.
pub fn score(grids: &[QuadrantGrid], conditions: &[ConditionVector], proxy: &ProxyParams) -> Result<Vec<f64>> {
    if grids.len() != conditions.len() {
        return Err(Error::LengthMismatch {
            expected: conditions.len(),
            actual: grids.len(),
        });
    }
    grids
        .par_iter()
        .zip(conditions.par_iter())
        .map(|(g, c)| {
            let resp = solve_quadrant(g, &c.extras(), proxy)?;
            sample_mae(&c.spectral(), &resp.to_vec())
        })
        .collect()
}

pub fn evaluate_conditions(
    generator: &impl StructureGenerator,
    conditions: &[ConditionVector],
    proxy: &ProxyParams,
    seed: u64,
) -> Result<EvalReport> {
    if conditions.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let grids = generator.generate(conditions, seed)?;
    EvalReport::from_maes(score(&grids, conditions, proxy)?)
}

pub fn evaluate(
    generator: &impl StructureGenerator,
    samples: &[Sample],
    proxy: &ProxyParams,
    seed: u64,
) -> Result<EvalReport> {
    let conditions: Vec<ConditionVector> = samples.iter().map(|s| s.condition).collect();
    evaluate_conditions(generator, &conditions, proxy, seed)
}

/// Generates one structure per condition of `split` and scores it.
pub fn evaluate_model(
    model: &impl NoisePredictor,
    sched: &NoiseSchedule,
    dataset: &Dataset,
    split: Split,
    proxy: &ProxyParams,
    guidance_w: f64,
    seed: u64,
) -> Result<EvalReport> {
    let generator = DiffusionGenerator {
        model,
        schedule: sched,
        guidance_w,
    };
    evaluate(&generator, dataset.split(split), proxy, seed)
}

/// Mean MAE of the chance baseline on `split`.
pub fn random_baseline(dataset: &Dataset, split: Split, proxy: &ProxyParams, seed: u64) -> Result<EvalReport> {
    let generator = RandomGenerator {
        quadrant_side: dataset.manifest.quadrant_side(),
    };
    evaluate(&generator, dataset.split(split), proxy, seed)
}
