//! Seeded analytic stand-in for an electromagnetic solver.
//!
//! The map from a symmetric binary grid plus layer parameters to a 52-point
//! transmission response is built in three stages:
//!
//! 1. Fourteen raw features, all in `[-1, 1]`: the centered fill fraction
//!    `2f - 1`, the ten cosine-transform coefficients `(p, q)` with
//!    `p + q <= 3` of the signed quadrant (scaled by [`DCT_GAIN`] for every
//!    coefficient except `(0, 0)` and clamped), and the three normalized layer
//!    parameters mapped to `[-1, 1]`.
//! 2. A hidden layer `h = tanh(P r + q)` of width `n_features`.
//! 3. For each of the 26 frequencies `k` and each of {re, im}:
//!    `tanh(a_k . h + b_k sin(omega_k n2 h2 nu_k + phi_k))`, where
//!    `nu_k = (30 + 30 k / 25) / 60` is the frequency on a `[0.5, 1]` scale.
//!
//! All coefficients are drawn once from `rng::stream(seed, [PROXY_STREAM])`
//! in this order: `P` row-major (standard normal times `1/sqrt(14)`, with the
//! fill column scaled by [`FILL_EMPHASIS`]), `q` (standard normal times
//! `0.25`); then for component re, then im, for each hidden unit `j`: an
//! amplitude `alpha ~ N(0, 1) * 2/sqrt(n)`, a rate `kappa ~ U(0.5, 3)` and a
//! phase `psi ~ U(0, 2 pi)`, giving `a_k[j] = alpha cos(pi kappa k / 25 + psi)`;
//! finally, for re then im, for each `k`: `b ~ U(0.05, 0.3)`,
//! `omega ~ U(0.5, 2.5)`, `phi ~ U(0, 2 pi)`. Uniform draws use
//! `rand::Rng::gen_range` on `f64`.
//!
//! Every feature is a function of the quadrant alone, so mirror images give
//! identical responses. Outputs are rounded to `f32`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{reduce_quadrant, Domain, ExtraParams, QuadrantGrid, StructureGrid};
use crate::rng::{standard_normals, stream};

/// Frequency samples per component.
pub const FREQUENCY_POINTS: usize = 26;
/// Band edges of the sampled response, in THz.
pub const BAND_THZ: (f64, f64) = (30.0, 60.0);
pub const DEFAULT_FEATURES: usize = 24;

/// Highest total order `p + q` of the cosine-transform features.
pub const DCT_ORDER: usize = 3;
/// Multiplier on the non-constant cosine-transform coefficients.
pub const DCT_GAIN: f64 = 3.0;
/// Multiplier on the fill-fraction column of the hidden projection.
pub const FILL_EMPHASIS: f64 = 2.5;

const PROXY_STREAM: u64 = 0x5052_4f58;
/// Length of the vector returned by [`features`].
pub const RAW_FEATURES: usize = 1 + 10 + 3;

/// Serializable identity of a proxy: everything needed to rebuild it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxySpec {
    pub seed: u64,
    pub n_features: usize,
}

impl ProxySpec {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            n_features: DEFAULT_FEATURES,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Head {
    b: f64,
    omega: f64,
    phi: f64,
}

/// Frozen proxy coefficients.
#[derive(Clone, Debug)]
pub struct ProxyParams {
    spec: ProxySpec,
    proj: Vec<f64>,
    proj_bias: Vec<f64>,
    /// `[component][k][j]`, flattened.
    readout: Vec<f64>,
    heads: Vec<Head>,
}

impl ProxyParams {
    pub fn new(seed: u64, n_features: usize) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::config("n_features", "must be at least 1"));
        }
        let n = n_features;
        let mut rng = stream(seed, &[PROXY_STREAM]);
        let scale = 1.0 / (RAW_FEATURES as f64).sqrt();
        let mut proj = standard_normals(&mut rng, n * RAW_FEATURES);
        for (i, p) in proj.iter_mut().enumerate() {
            *p *= scale;
            if i % RAW_FEATURES == 0 {
                *p *= FILL_EMPHASIS;
            }
        }
        let proj_bias = standard_normals(&mut rng, n).into_iter().map(|v| 0.25 * v).collect();

        let amp = 2.0 / (n as f64).sqrt();
        let mut readout = vec![0.0; 2 * FREQUENCY_POINTS * n];
        for c in 0..2 {
            for j in 0..n {
                let alpha = amp * standard_normals(&mut rng, 1)[0];
                let kappa = rng.gen_range(0.5..3.0);
                let psi = rng.gen_range(0.0..2.0 * PI);
                for k in 0..FREQUENCY_POINTS {
                    let s = k as f64 / (FREQUENCY_POINTS - 1) as f64;
                    readout[(c * FREQUENCY_POINTS + k) * n + j] = alpha * (PI * kappa * s + psi).cos();
                }
            }
        }
        let heads = (0..2 * FREQUENCY_POINTS)
            .map(|_| Head {
                b: rng.gen_range(0.05..0.3),
                omega: rng.gen_range(0.5..2.5),
                phi: rng.gen_range(0.0..2.0 * PI),
            })
            .collect();
        Ok(Self {
            spec: ProxySpec { seed, n_features },
            proj,
            proj_bias,
            readout,
            heads,
        })
    }

    pub fn from_spec(spec: ProxySpec) -> Result<Self> {
        Self::new(spec.seed, spec.n_features)
    }

    pub fn spec(&self) -> ProxySpec {
        self.spec
    }
}

/// Transmission response: 26 real then 26 imaginary samples across the band.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralResponse {
    pub re: [f32; FREQUENCY_POINTS],
    pub im: [f32; FREQUENCY_POINTS],
}

impl SpectralResponse {
    pub fn zeros() -> Self {
        Self {
            re: [0.0; FREQUENCY_POINTS],
            im: [0.0; FREQUENCY_POINTS],
        }
    }

    /// `re` followed by `im`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.re.iter().chain(&self.im).map(|&v| f64::from(v)).collect()
    }

    pub fn from_slice(values: &[f32]) -> Result<Self> {
        if values.len() != 2 * FREQUENCY_POINTS {
            return Err(Error::LengthMismatch {
                expected: 2 * FREQUENCY_POINTS,
                actual: values.len(),
            });
        }
        let mut out = Self::zeros();
        out.re.copy_from_slice(&values[..FREQUENCY_POINTS]);
        out.im.copy_from_slice(&values[FREQUENCY_POINTS..]);
        Ok(out)
    }

    /// Frequency of sample `k`, in THz.
    pub fn frequency_thz(k: usize) -> f64 {
        BAND_THZ.0 + (BAND_THZ.1 - BAND_THZ.0) * k as f64 / (FREQUENCY_POINTS - 1) as f64
    }
}

fn check_binary(values: &[f64], side: usize) -> Result<()> {
    match values.iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(k) => Err(Error::NonBinaryInput {
            row: k / side,
            col: k % side,
            value: values[k],
        }),
        None => Ok(()),
    }
}

/// Raw feature vector of a binary quadrant and layer parameters.
pub fn features(quadrant: &QuadrantGrid, extra: &ExtraParams) -> Result<[f64; RAW_FEATURES]> {
    let m = quadrant.side();
    check_binary(quadrant.values(), m)?;
    let norm = extra.normalized()?;
    let signed: Vec<f64> = quadrant.values().iter().map(|&v| 2.0 * v - 1.0).collect();
    let basis = |p: usize| -> Vec<f64> {
        (0..m)
            .map(|i| (PI * p as f64 * (i as f64 + 0.5) / m as f64).cos())
            .collect()
    };
    let bases: Vec<Vec<f64>> = (0..=DCT_ORDER).map(basis).collect();

    let mut out = [0.0; RAW_FEATURES];
    let fill = quadrant.values().iter().sum::<f64>() / (m * m) as f64;
    out[0] = 2.0 * fill - 1.0;
    let mut slot = 1;
    for order in 0..=DCT_ORDER {
        for p in 0..=order {
            let q = order - p;
            let (bp, bq) = (&bases[p], &bases[q]);
            let mut acc = 0.0;
            for i in 0..m {
                let row = &signed[i * m..(i + 1) * m];
                let inner: f64 = row.iter().zip(bq).map(|(v, c)| v * c).sum();
                acc += bp[i] * inner;
            }
            acc /= (m * m) as f64;
            out[slot] = if order == 0 { acc } else { (DCT_GAIN * acc).clamp(-1.0, 1.0) };
            slot += 1;
        }
    }
    for (i, u) in norm.iter().enumerate() {
        out[slot + i] = 2.0 * u - 1.0;
    }
    Ok(out)
}

fn respond(proxy: &ProxyParams, raw: &[f64; RAW_FEATURES], extra: &ExtraParams) -> SpectralResponse {
    let n = proxy.spec.n_features;
    let hidden: Vec<f64> = (0..n)
        .map(|j| {
            let row = &proxy.proj[j * RAW_FEATURES..(j + 1) * RAW_FEATURES];
            let z: f64 = row.iter().zip(raw).map(|(w, r)| w * r).sum();
            (z + proxy.proj_bias[j]).tanh()
        })
        .collect();
    let optical = extra.n2 * extra.h2;
    let mut out = SpectralResponse::zeros();
    for c in 0..2 {
        for k in 0..FREQUENCY_POINTS {
            let idx = c * FREQUENCY_POINTS + k;
            let a = &proxy.readout[idx * n..(idx + 1) * n];
            let lin: f64 = a.iter().zip(&hidden).map(|(a, h)| a * h).sum();
            let head = proxy.heads[idx];
            let nu = SpectralResponse::frequency_thz(k) / BAND_THZ.1;
            let v = (lin + head.b * (head.omega * optical * nu + head.phi).sin()).tanh() as f32;
            if c == 0 {
                out.re[k] = v;
            } else {
                out.im[k] = v;
            }
        }
    }
    out
}

/// Response of a binary quadrant; the full grid is its mirror expansion.
pub fn solve_quadrant(quadrant: &QuadrantGrid, extra: &ExtraParams, proxy: &ProxyParams) -> Result<SpectralResponse> {
    let raw = features(quadrant, extra)?;
    Ok(respond(proxy, &raw, extra))
}

/// Response of a full binary, mirror-symmetric grid.
pub fn solve(grid: &StructureGrid, extra: &ExtraParams, proxy: &ProxyParams) -> Result<SpectralResponse> {
    check_binary(grid.values(), grid.side())?;
    if grid.side() % 2 != 0 {
        return Err(Error::shape("even grid side", grid.side()));
    }
    let q = reduce_quadrant(grid)?;
    let q = if q.domain() == Domain::Binary01 {
        q
    } else {
        QuadrantGrid::new(q.side(), q.into_values(), Domain::Binary01)?
    };
    solve_quadrant(&q, extra, proxy)
}

/// Elementwise [`solve`], evaluated in parallel; order is preserved.
pub fn solve_batch(
    grids: &[StructureGrid],
    extras: &[ExtraParams],
    proxy: &ProxyParams,
) -> Result<Vec<SpectralResponse>> {
    if grids.len() != extras.len() {
        return Err(Error::LengthMismatch {
            expected: grids.len(),
            actual: extras.len(),
        });
    }
    grids
        .par_iter()
        .zip(extras.par_iter())
        .map(|(g, e)| solve(g, e, proxy))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::expand_symmetric;
    use rand::Rng;

    fn mid_extras() -> ExtraParams {
        ExtraParams::new(2.75, 0.75, 4.25).unwrap()
    }

    fn random_quadrant(seed: u64, m: usize) -> QuadrantGrid {
        let mut rng = stream(seed, &[1]);
        let v = (0..m * m).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        QuadrantGrid::new(m, v, Domain::Binary01).unwrap()
    }

    #[test]
    fn bounded_and_deterministic() {
        let proxy = ProxyParams::new(7, DEFAULT_FEATURES).unwrap();
        for s in 0..20 {
            let g = expand_symmetric(&random_quadrant(s, 8));
            let a = solve(&g, &mid_extras(), &proxy).unwrap();
            let b = solve(&g, &mid_extras(), &ProxyParams::new(7, DEFAULT_FEATURES).unwrap()).unwrap();
            assert_eq!(a, b);
            assert!(a.to_vec().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn rejects_bad_grids() {
        let proxy = ProxyParams::new(0, 4).unwrap();
        let mut v = vec![0.0; 16];
        v[1] = 1.0;
        let asym = StructureGrid::new(4, v, Domain::Binary01).unwrap();
        assert!(matches!(solve(&asym, &mid_extras(), &proxy), Err(Error::SymmetryViolation { .. })));
        let soft = StructureGrid::filled(4, 0.5, Domain::Continuous01).unwrap();
        assert!(matches!(solve(&soft, &mid_extras(), &proxy), Err(Error::NonBinaryInput { .. })));
        assert!(ProxyParams::new(0, 0).is_err());
    }

    #[test]
    fn constant_feature_is_the_centered_fill() {
        let q = random_quadrant(3, 8);
        let f = features(&q, &mid_extras()).unwrap();
        assert!((f[0] - f[1]).abs() < 1e-12);
        assert!(f.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(&f[11..], &[0.0, 0.0, 0.0]);
    }
}
