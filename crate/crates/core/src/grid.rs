//! Meta-atom structure grids, quadrant symmetry reduction, value-range
//! mapping and binarization.
//!
//! Mirror axes run between cells: a full grid of side `S` is the upper-left
//! `S/2` quadrant reflected across both midlines, so `full[i][j]` equals
//! `quadrant[min(i, S-1-i)][min(j, S-1-j)]`.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mirrored cells may differ by at most this much and still count as symmetric.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// Threshold applied in `[0, 1]` space by [`binarize`].
pub const BINARIZE_THRESHOLD: f64 = 0.5;

/// Refractive index of the fixed lower dielectric layer.
pub const LOWER_LAYER_INDEX: f64 = 1.4;
/// Thickness of the fixed lower dielectric layer, in micrometres.
pub const LOWER_LAYER_THICKNESS_UM: f64 = 2.0;

/// Value convention of a grid's entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Exactly `0` (air) or `1` (dielectric).
    Binary01,
    /// Diffusion space; clean data sits at `-1`/`+1`, noisy states anywhere.
    Signed,
    /// Soft occupancy in `[0, 1]`.
    Continuous01,
}

impl Domain {
    fn to_unit(self, v: f64) -> f64 {
        match self {
            Domain::Signed => (v + 1.0) / 2.0,
            Domain::Binary01 | Domain::Continuous01 => v,
        }
    }
}

/// Row-major square matrix shared by the full and quadrant grid types.
#[derive(Clone, Debug, PartialEq)]
struct Square {
    side: usize,
    values: Vec<f64>,
    domain: Domain,
}

impl Square {
    fn new(side: usize, values: Vec<f64>, domain: Domain) -> Result<Self> {
        if side == 0 {
            return Err(Error::shape("side >= 1", 0));
        }
        if values.len() != side * side {
            return Err(Error::shape(
                format!("{side}x{side} = {} values", side * side),
                values.len(),
            ));
        }
        if domain == Domain::Binary01 {
            if let Some(k) = values.iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::NonBinaryInput {
                    row: k / side,
                    col: k % side,
                    value: values[k],
                });
            }
        }
        Ok(Self { side, values, domain })
    }

    fn from_rows(rows: &[Vec<f64>], domain: Domain) -> Result<Self> {
        let side = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != side) {
            return Err(Error::shape(format!("{side} columns"), bad.len()));
        }
        Self::new(side, rows.concat(), domain)
    }

    fn binarized(&self) -> Self {
        let values = self
            .values
            .iter()
            .map(|&v| {
                if self.domain.to_unit(v) >= BINARIZE_THRESHOLD {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            side: self.side,
            values,
            domain: Domain::Binary01,
        }
    }

    fn signed(&self) -> Self {
        let values = self.values.iter().map(|&v| 2.0 * v - 1.0).collect();
        Self {
            side: self.side,
            values,
            domain: Domain::Signed,
        }
    }
}

/// Full meta-atom occupancy grid of even side `S`.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureGrid(Square);

/// Upper-left `S/2 x S/2` block of a symmetric [`StructureGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct QuadrantGrid(Square);

macro_rules! square_accessors {
    ($ty:ident) => {
        impl $ty {
            pub fn new(side: usize, values: Vec<f64>, domain: Domain) -> Result<Self> {
                Square::new(side, values, domain).map(Self)
            }

            pub fn from_rows(rows: &[Vec<f64>], domain: Domain) -> Result<Self> {
                Square::from_rows(rows, domain).map(Self)
            }

            pub fn filled(side: usize, value: f64, domain: Domain) -> Result<Self> {
                Self::new(side, vec![value; side * side], domain)
            }

            pub fn side(&self) -> usize {
                self.0.side
            }

            pub fn domain(&self) -> Domain {
                self.0.domain
            }

            /// Row-major entries.
            pub fn values(&self) -> &[f64] {
                &self.0.values
            }

            pub fn into_values(self) -> Vec<f64> {
                self.0.values
            }

            pub fn get(&self, row: usize, col: usize) -> f64 {
                self.0.values[row * self.0.side + col]
            }

            pub fn rows(&self) -> Vec<Vec<f64>> {
                self.0.values.chunks(self.0.side).map(<[f64]>::to_vec).collect()
            }

            /// Threshold at 0.5 in `[0, 1]` space; signed grids are mapped
            /// through `v -> (v + 1) / 2` first.
            pub fn binarize(&self) -> Self {
                Self(self.0.binarized())
            }

            /// `{0, 1} -> {-1, +1}`; input must be binary.
            pub fn to_signed(&self) -> Result<Self> {
                if self.0.domain != Domain::Binary01 {
                    return Err(Error::shape("binary01 grid", format!("{:?} grid", self.0.domain)));
                }
                Ok(Self(self.0.signed()))
            }
        }
    };
}

square_accessors!(StructureGrid);
square_accessors!(QuadrantGrid);

impl StructureGrid {
    pub fn flip_horizontal(&self) -> Self {
        let s = self.side();
        let mut values = Vec::with_capacity(s * s);
        for i in 0..s {
            values.extend((0..s).map(|j| self.get(i, s - 1 - j)));
        }
        Self(Square { values, ..self.0.clone() })
    }

    pub fn flip_vertical(&self) -> Self {
        let s = self.side();
        let mut values = Vec::with_capacity(s * s);
        for i in 0..s {
            values.extend((0..s).map(|j| self.get(s - 1 - i, j)));
        }
        Self(Square { values, ..self.0.clone() })
    }

    /// First mirrored pair (in row-major order) that differs by more than
    /// [`SYMMETRY_TOLERANCE`].
    pub fn symmetry_violation(&self) -> Option<(usize, usize)> {
        let s = self.side();
        if s % 2 != 0 {
            return Some((s / 2, s / 2));
        }
        for i in 0..s {
            for j in 0..s {
                let v = self.get(i, j);
                if (v - self.get(i, s - 1 - j)).abs() > SYMMETRY_TOLERANCE
                    || (v - self.get(s - 1 - i, j)).abs() > SYMMETRY_TOLERANCE
                {
                    return Some((i, j));
                }
            }
        }
        None
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetry_violation().is_none()
    }

    /// Plain-text PGM (P2) with maxval 1. Non-binary grids are binarized.
    pub fn to_pgm(&self) -> String {
        let g = self.binarize();
        let s = g.side();
        let mut out = format!("P2\n{s} {s}\n1\n");
        for row in g.values().chunks(s) {
            let line: Vec<&str> = row.iter().map(|&v| if v == 1.0 { "1" } else { "0" }).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_pgm())?;
        Ok(())
    }

    /// Parses the P2 subset written by [`StructureGrid::to_pgm`] (comments allowed).
    pub fn read_pgm(reader: impl Read) -> Result<Self> {
        let mut tokens = Vec::new();
        for line in BufReader::new(reader).lines() {
            let line = line?;
            let data = line.split('#').next().unwrap_or("");
            tokens.extend(data.split_whitespace().map(str::to_owned));
        }
        let bad = |what: &str| Error::CorruptContainer(format!("pgm: {what}"));
        let mut it = tokens.into_iter();
        if it.next().as_deref() != Some("P2") {
            return Err(bad("missing P2 magic"));
        }
        let mut num = |what: &str| -> Result<u64> {
            it.next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad(what))
        };
        let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
        if w != h || maxval == 0 {
            return Err(bad("expected a square grid with positive maxval"));
        }
        let n = (w * h) as usize;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let v = num("pixel")?;
            values.push(if v * 2 >= maxval { 1.0 } else { 0.0 });
        }
        Self::new(w as usize, values, Domain::Binary01)
    }
}

/// Mirrors a quadrant across both midlines into a full grid of twice the side.
pub fn expand_symmetric(q: &QuadrantGrid) -> StructureGrid {
    let h = q.side();
    let s = 2 * h;
    let mut values = Vec::with_capacity(s * s);
    for i in 0..s {
        let qi = i.min(s - 1 - i);
        let row = &q.values()[qi * h..(qi + 1) * h];
        values.extend_from_slice(row);
        values.extend(row.iter().rev());
    }
    StructureGrid(Square {
        side: s,
        values,
        domain: q.domain(),
    })
}

/// Upper-left quadrant of a grid that is mirror-symmetric in both axes.
pub fn reduce_quadrant(g: &StructureGrid) -> Result<QuadrantGrid> {
    if let Some((row, col)) = g.symmetry_violation() {
        return Err(Error::SymmetryViolation { row, col });
    }
    let s = g.side();
    let h = s / 2;
    let values = g
        .values()
        .chunks(s)
        .take(h)
        .flat_map(|row| row[..h].iter().copied())
        .collect();
    Ok(QuadrantGrid(Square {
        side: h,
        values,
        domain: g.domain(),
    }))
}

pub fn to_signed(g: &StructureGrid) -> Result<StructureGrid> {
    g.to_signed()
}

pub fn binarize(g: &StructureGrid) -> StructureGrid {
    g.binarize()
}

/// Layer parameters of the unit cell (lengths in micrometres).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtraParams {
    pub w1: f64,
    pub h2: f64,
    pub n2: f64,
}

impl ExtraParams {
    pub const W1_RANGE: (f64, f64) = (2.5, 3.0);
    pub const H2_RANGE: (f64, f64) = (0.5, 1.0);
    pub const N2_RANGE: (f64, f64) = (3.5, 5.0);

    pub fn new(w1: f64, h2: f64, n2: f64) -> Result<Self> {
        let e = Self { w1, h2, n2 };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |field, value: f64, (lo, hi): (f64, f64)| {
            if value >= lo && value <= hi {
                Ok(())
            } else {
                Err(Error::OutOfRange { field, value, lo, hi })
            }
        };
        check("w1", self.w1, Self::W1_RANGE)?;
        check("h2", self.h2, Self::H2_RANGE)?;
        check("n2", self.n2, Self::N2_RANGE)
    }

    /// Inverse of min-max normalization; inputs are clamped into `[0, 1]`.
    pub fn from_normalized(n: [f64; 3]) -> Self {
        let lerp = |u: f64, (lo, hi): (f64, f64)| {
            let u = u.clamp(0.0, 1.0);
            lo * (1.0 - u) + hi * u
        };
        Self {
            w1: lerp(n[0], Self::W1_RANGE),
            h2: lerp(n[1], Self::H2_RANGE),
            n2: lerp(n[2], Self::N2_RANGE),
        }
    }

    /// Min-max map of each field onto `[0, 1]`.
    pub fn normalized(&self) -> Result<[f64; 3]> {
        self.validate()?;
        let unit = |v: f64, (lo, hi): (f64, f64)| (v - lo) / (hi - lo);
        Ok([
            unit(self.w1, Self::W1_RANGE),
            unit(self.h2, Self::H2_RANGE),
            unit(self.n2, Self::N2_RANGE),
        ])
    }
}
