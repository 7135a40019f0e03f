//! Ancestral generation with classifier-free guidance.
//!
//! Every chain owns a random stream keyed by the request seed, a digest of
//! its condition's contents and its index within the request. Outputs for a
//! condition therefore do not depend on batch composition, list order or
//! thread count. Identical conditions in one list get identical grids.

use rayon::prelude::*;

use crate::dataset::{ConditionVector, CONDITION_LEN, UNCONDITIONAL};
use crate::denoiser::{DenoiserModel, Real};
use crate::diffusion::{guided_noise, implied_noise, reverse_step};
use crate::error::{Error, Result};
use crate::grid::{expand_symmetric, Domain, QuadrantGrid, StructureGrid};
use crate::rng::{hash_f32s, standard_normals, stream, StreamRng};
use crate::schedule::NoiseSchedule;

/// Default guidance weight.
pub const DEFAULT_GUIDANCE: f64 = 2.0;

/// Chains advanced together in one batched network call.
const CHUNK: usize = 32;
const CHAIN_STREAM: u64 = 0x4d44_4348;

/// Anything that predicts the noise in a batch of quadrants at one timestep.
pub trait NoisePredictor: Sync {
    fn quadrant_side(&self) -> usize;
    fn timesteps(&self) -> usize;
    /// `x`: `n` row-major quadrants; `cond`: `n` condition vectors.
    fn predict(&self, x: &[f64], t: usize, cond: &[f32]) -> Result<Vec<f64>>;
}

impl<F: Real> NoisePredictor for DenoiserModel<F> {
    fn quadrant_side(&self) -> usize {
        self.config().quadrant_side
    }

    fn timesteps(&self) -> usize {
        self.config().timesteps
    }

    fn predict(&self, x: &[f64], t: usize, cond: &[f32]) -> Result<Vec<f64>> {
        let n = cond.len() / CONDITION_LEN;
        let xf: Vec<F> = x.iter().map(|&v| F::lit(v)).collect();
        let cf: Vec<F> = cond.iter().map(|&v| F::lit(f64::from(v))).collect();
        let y = self.forward(&xf, &vec![t; n], &cf)?;
        Ok(y.into_iter().map(|v| v.to_f64().expect("finite")).collect())
    }
}

/// Test double that knows the clean quadrant and reports the exact noise
/// separating it from the current state, for every condition.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    pub planted: Vec<f64>,
    pub side: usize,
    pub schedule: NoiseSchedule,
}

impl NoisePredictor for OracleDenoiser {
    fn quadrant_side(&self) -> usize {
        self.side
    }

    fn timesteps(&self) -> usize {
        self.schedule.len()
    }

    fn predict(&self, x: &[f64], t: usize, _cond: &[f32]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(x.len());
        for xi in x.chunks(self.planted.len()) {
            out.extend(implied_noise(xi, &self.planted, t, &self.schedule)?);
        }
        Ok(out)
    }
}

/// Whether the unconditional pass and the guidance mix are applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Guidance {
    /// `(1 + w) eps(c) - w eps(0)` at every step.
    Classifier(f64),
    /// Only the conditional prediction; no unconditional pass.
    ConditionalOnly,
}

impl Guidance {
    pub fn weight(w: f64) -> Result<Self> {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::OutOfRange {
                field: "guidance_w",
                value: w,
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }
        Ok(Guidance::Classifier(w))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleRequest {
    pub condition: ConditionVector,
    pub count: usize,
    pub guidance_w: f64,
    pub seed: u64,
}

struct Chain {
    cond: [f32; CONDITION_LEN],
    rng: StreamRng,
}

fn chain(cond: &ConditionVector, index: usize, seed: u64) -> Chain {
    Chain {
        cond: *cond.values(),
        rng: stream(seed, &[CHAIN_STREAM, hash_f32s(cond.values()), index as u64]),
    }
}

fn check_schedule(model: &impl NoisePredictor, sched: &NoiseSchedule) -> Result<()> {
    if model.timesteps() != sched.len() {
        return Err(Error::ScheduleMismatch {
            model: model.timesteps(),
            schedule: sched.len(),
        });
    }
    Ok(())
}

/// Runs a group of chains from `x_T ~ N(0, I)` to `x_0` together, returning
/// signed quadrants.
fn run_chunk(
    model: &impl NoisePredictor,
    sched: &NoiseSchedule,
    chains: &mut [Chain],
    guidance: Guidance,
) -> Result<Vec<Vec<f64>>> {
    let qq = model.quadrant_side().pow(2);
    let n = chains.len();
    let mut xs: Vec<Vec<f64>> = chains.iter_mut().map(|c| standard_normals(&mut c.rng, qq)).collect();
    let conds: Vec<f32> = chains.iter().flat_map(|c| c.cond).collect();
    let uncond: Vec<f32> = UNCONDITIONAL.repeat(n);
    let zero = vec![0.0; qq];
    for t in (1..=sched.len()).rev() {
        let x: Vec<f64> = xs.concat();
        let eps_c = model.predict(&x, t, &conds)?;
        let eps_u = match guidance {
            Guidance::Classifier(_) => Some(model.predict(&x, t, &uncond)?),
            Guidance::ConditionalOnly => None,
        };
        for (i, (xi, c)) in xs.iter_mut().zip(chains.iter_mut()).enumerate() {
            let ec = &eps_c[i * qq..(i + 1) * qq];
            let eps = match (&eps_u, guidance) {
                (Some(eu), Guidance::Classifier(w)) => guided_noise(ec, &eu[i * qq..(i + 1) * qq], w)?,
                _ => ec.to_vec(),
            };
            let z = if t > 1 { standard_normals(&mut c.rng, qq) } else { zero.clone() };
            *xi = reverse_step(xi, t, &eps, &z, sched)?;
        }
    }
    Ok(xs)
}

fn run_chains(
    model: &impl NoisePredictor,
    sched: &NoiseSchedule,
    mut chains: Vec<Chain>,
    guidance: Guidance,
) -> Result<Vec<QuadrantGrid>> {
    check_schedule(model, sched)?;
    let side = model.quadrant_side();
    let signed: Vec<Vec<f64>> = chains
        .par_chunks_mut(CHUNK)
        .map(|chunk| run_chunk(model, sched, chunk, guidance))
        .collect::<Result<Vec<_>>>()?
        .concat();
    signed
        .into_iter()
        .map(|x| Ok(QuadrantGrid::new(side, x, Domain::Signed)?.binarize()))
        .collect()
}

/// Binary quadrants for `req.count` independent chains on one condition.
pub fn generate_quadrants(
    model: &impl NoisePredictor,
    sched: &NoiseSchedule,
    req: &SampleRequest,
    guidance: Guidance,
) -> Result<Vec<QuadrantGrid>> {
    if req.count == 0 {
        return Err(Error::config("count", "must be at least 1"));
    }
    let chains = (0..req.count).map(|i| chain(&req.condition, i, req.seed)).collect();
    run_chains(model, sched, chains, guidance)
}

/// Full binary grids for a request, guided with `req.guidance_w`.
pub fn generate(model: &impl NoisePredictor, sched: &NoiseSchedule, req: &SampleRequest) -> Result<Vec<StructureGrid>> {
    let guidance = Guidance::weight(req.guidance_w)?;
    Ok(generate_quadrants(model, sched, req, guidance)?
        .iter()
        .map(expand_symmetric)
        .collect())
}

/// One binary quadrant per condition. Entry `i` equals the first grid of a
/// single-condition request for `conditions[i]` with the same seed.
pub fn generate_many_quadrants(
    model: &impl NoisePredictor,
    sched: &NoiseSchedule,
    conditions: &[ConditionVector],
    guidance: Guidance,
    seed: u64,
) -> Result<Vec<QuadrantGrid>> {
    let chains = conditions.iter().map(|c| chain(c, 0, seed)).collect();
    run_chains(model, sched, chains, guidance)
}

pub fn generate_many(
    model: &impl NoisePredictor,
    sched: &NoiseSchedule,
    conditions: &[ConditionVector],
    guidance_w: f64,
    seed: u64,
) -> Result<Vec<StructureGrid>> {
    let guidance = Guidance::weight(guidance_w)?;
    Ok(generate_many_quadrants(model, sched, conditions, guidance, seed)?
        .iter()
        .map(expand_symmetric)
        .collect())
}
