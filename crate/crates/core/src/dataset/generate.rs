use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::container::DATASET_VERSION;
use super::{ConditionVector, Dataset, DatasetManifest, ExtraRanges, Sample, SplitCounts};
use crate::error::{Error, Result};
use crate::grid::{Domain, ExtraParams, QuadrantGrid};
use crate::rng::stream;
use crate::surrogate::{solve_quadrant, ProxyParams};

/// Range of the per-sample Bernoulli fill probability.
pub const FILL_RANGE: (f64, f64) = (0.2, 0.8);

const SAMPLE_STREAM: u64 = 0x4d44_5341;
const SHUFFLE_STREAM: u64 = 0x4d44_5348;

/// One pass of 3x3 majority voting on the full mirror-expanded grid, returned
/// as its quadrant. Cells outside the grid do not vote; ties keep the cell.
pub fn majority_smooth(q: &QuadrantGrid) -> QuadrantGrid {
    let m = q.side();
    let s = 2 * m;
    let full = |i: usize, j: usize| q.get(i.min(s - 1 - i), j.min(s - 1 - j));
    // Majority rules are mirror-equivariant, so only the quadrant needs computing.
    let mut out = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            let (mut ones, mut cells) = (0usize, 0usize);
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    if ni < 0 || nj < 0 || ni >= s as i64 || nj >= s as i64 {
                        continue;
                    }
                    cells += 1;
                    if full(ni as usize, nj as usize) == 1.0 {
                        ones += 1;
                    }
                }
            }
            out.push(match (2 * ones).cmp(&cells) {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Less => 0.0,
                std::cmp::Ordering::Equal => q.get(i, j),
            });
        }
    }
    QuadrantGrid::new(m, out, Domain::Binary01).expect("binary by construction")
}

/// Draws a quadrant from the structure prior: Bernoulli(p) cells with
/// `p ~ U(FILL_RANGE)`, then [`majority_smooth`].
pub fn draw_quadrant(rng: &mut impl Rng, m: usize) -> QuadrantGrid {
    let p = rng.gen_range(FILL_RANGE.0..FILL_RANGE.1);
    let bits = (0..m * m).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect();
    let raw = QuadrantGrid::new(m, bits, Domain::Binary01).expect("binary by construction");
    majority_smooth(&raw)
}

fn draw_sample(seed: u64, index: usize, m: usize, proxy: &ProxyParams) -> Result<Sample> {
    let mut rng = stream(seed, &[SAMPLE_STREAM, index as u64]);
    let quadrant = draw_quadrant(&mut rng, m);
    // Labels use the extras exactly as the stored f32 condition decodes them.
    let norm: [f32; 3] = [rng.gen::<f64>() as f32, rng.gen::<f64>() as f32, rng.gen::<f64>() as f32];
    let extras = ExtraParams::from_normalized(norm.map(f64::from));
    let resp = solve_quadrant(&quadrant, &extras, proxy)?;
    let condition = ConditionVector::from_parts(&resp, norm)?;
    Ok(Sample { quadrant, condition })
}

/// Builds a labeled dataset in memory, split 8:1:1 after a seeded shuffle.
pub fn generate(n: usize, grid_side: usize, proxy: &ProxyParams, seed: u64) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::config("n", format!("{n} is below the minimum of 10")));
    }
    if grid_side < 2 || grid_side % 2 != 0 {
        return Err(Error::config("size", format!("{grid_side} must be even and at least 2")));
    }
    let m = grid_side / 2;
    let mut samples = (0..n)
        .into_par_iter()
        .map(|i| draw_sample(seed, i, m, proxy).map(Some))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[SHUFFLE_STREAM]));

    let counts = SplitCounts::for_total(n);
    let mut take = |range: std::ops::Range<usize>| -> Vec<Sample> {
        order[range]
            .iter()
            .map(|&i| samples[i].take().expect("each index is taken once"))
            .collect()
    };
    let train = take(0..counts.train);
    let val = take(counts.train..counts.train + counts.val);
    let test = take(counts.train + counts.val..n);
    Ok(Dataset {
        manifest: DatasetManifest {
            version: DATASET_VERSION,
            grid_side,
            counts,
            split_ratio: [8, 1, 1],
            proxy: proxy.spec(),
            extra_ranges: ExtraRanges::default(),
            seed,
        },
        train,
        val,
        test,
    })
}

/// [`generate`], then writes the container and a readable manifest into `dir`.
pub fn generate_dataset(
    dir: impl AsRef<Path>,
    n: usize,
    grid_side: usize,
    proxy: &ProxyParams,
    seed: u64,
) -> Result<Dataset> {
    let ds = generate(n, grid_side, proxy, seed)?;
    ds.save(dir)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::expand_symmetric;

    #[test]
    fn smoothing_removes_isolated_cells() {
        let mut v = vec![0.0; 16];
        v[5] = 1.0;
        let q = QuadrantGrid::new(4, v, Domain::Binary01).unwrap();
        assert!(majority_smooth(&q).values().iter().all(|&x| x == 0.0));
        let full = QuadrantGrid::filled(4, 1.0, Domain::Binary01).unwrap();
        assert_eq!(majority_smooth(&full), full);
    }

    #[test]
    fn smoothing_matches_full_grid_pass() {
        let mut rng = stream(11, &[]);
        for _ in 0..10 {
            let m = 5;
            let raw = QuadrantGrid::new(
                m,
                (0..m * m).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect(),
                Domain::Binary01,
            )
            .unwrap();
            let g = expand_symmetric(&raw);
            let s = g.side();
            let mut expect = vec![0.0; s * s];
            for i in 0..s {
                for j in 0..s {
                    let mut ones = 0;
                    let mut cells = 0;
                    for ni in i.saturating_sub(1)..=(i + 1).min(s - 1) {
                        for nj in j.saturating_sub(1)..=(j + 1).min(s - 1) {
                            cells += 1;
                            ones += g.get(ni, nj) as usize;
                        }
                    }
                    expect[i * s + j] = if 2 * ones > cells {
                        1.0
                    } else if 2 * ones < cells {
                        0.0
                    } else {
                        g.get(i, j)
                    };
                }
            }
            assert_eq!(expand_symmetric(&majority_smooth(&raw)).values(), &expect[..]);
        }
    }

    #[test]
    fn ten_samples_split_eight_one_one() {
        let proxy = ProxyParams::new(7, 24).unwrap();
        let ds = generate(10, 8, &proxy, 1).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (8, 1, 1));
        assert!(generate(9, 8, &proxy, 1).is_err());
        assert!(generate(10, 7, &proxy, 1).is_err());
    }
}
