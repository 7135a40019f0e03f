//! Batched layers with hand-written backward passes.
//!
//! Activations are channel-major, `[C][N][H][W]`: a convolution is then a
//! single GEMM over the whole batch and channel concatenation is a plain
//! append. Parameters live in one flat buffer; layers only hold offsets.

use super::real::{matmul, Op, Real};

/// A batch of feature maps stored `[channel][sample][row][col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Act<F> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Real> Act<F> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![F::zero(); c * n * h * w],
        }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Columns of the `[C] x [N*H*W]` matrix view.
    pub fn cols(&self) -> usize {
        self.n * self.h * self.w
    }

    fn like(&self, data: Vec<F>) -> Self {
        Self { data, ..*self }
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!((self.c, self.n, self.h, self.w), (other.c, other.n, other.h, other.w));
        self.like(self.data.iter().zip(&other.data).map(|(a, b)| *a + *b).collect())
    }

    /// Channel concatenation `[self; other]`.
    pub fn concat(&self, other: &Self) -> Self {
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self {
            c: self.c + other.c,
            data,
            ..*self
        }
    }

    /// Inverse of [`Act::concat`]: the first `c` channels and the rest.
    pub fn split(&self, c: usize) -> (Self, Self) {
        let cut = c * self.cols();
        let head = Self {
            c,
            data: self.data[..cut].to_vec(),
            ..*self
        };
        let tail = Self {
            c: self.c - c,
            data: self.data[cut..].to_vec(),
            ..*self
        };
        (head, tail)
    }

    /// Adds `e[n][c]` to every pixel of channel `c` of sample `n`.
    pub fn add_per_sample_bias(&mut self, e: &[F]) {
        let hw = self.hw();
        for c in 0..self.c {
            for n in 0..self.n {
                let v = e[n * self.c + c];
                let start = (c * self.n + n) * hw;
                for x in &mut self.data[start..start + hw] {
                    *x += v;
                }
            }
        }
    }

    /// Gradient of [`Act::add_per_sample_bias`] with respect to `e`.
    pub fn sum_per_sample(&self) -> Vec<F> {
        let hw = self.hw();
        let mut e = vec![F::zero(); self.n * self.c];
        for c in 0..self.c {
            for n in 0..self.n {
                let start = (c * self.n + n) * hw;
                e[n * self.c + c] = self.data[start..start + hw].iter().copied().sum();
            }
        }
        e
    }

    /// Per-sample flattening to `[N] x [C*H*W]` rows.
    pub fn to_rows(&self) -> Vec<F> {
        let hw = self.hw();
        let mut out = vec![F::zero(); self.data.len()];
        for c in 0..self.c {
            for n in 0..self.n {
                let src = (c * self.n + n) * hw;
                let dst = n * self.c * hw + c * hw;
                out[dst..dst + hw].copy_from_slice(&self.data[src..src + hw]);
            }
        }
        out
    }

    pub fn from_rows(rows: &[F], c: usize, n: usize, h: usize, w: usize) -> Self {
        let hw = h * w;
        let mut data = vec![F::zero(); rows.len()];
        for ci in 0..c {
            for ni in 0..n {
                let dst = (ci * n + ni) * hw;
                let src = ni * c * hw + ci * hw;
                data[dst..dst + hw].copy_from_slice(&rows[src..src + hw]);
            }
        }
        Self { c, n, h, w, data }
    }
}

/// Sizes and offsets of the named tensors in a flat parameter buffer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

/// How a tensor is initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Ones,
    Zeros,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

impl ParamLayout {
    pub fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let offset = self.total;
        let entry = ParamEntry {
            name,
            shape,
            offset,
            init,
        };
        self.total += entry.len();
        self.entries.push(entry);
        offset
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    w: usize,
    b: usize,
}

impl Conv {
    /// `k` is 1 or 3; 3x3 kernels use zero padding of 1.
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        assert!(k == 1 || k == 3);
        let fan_in = cin * k * k;
        let w = layout.add(format!("{name}.weight"), vec![cout, cin, k, k], Init::FanIn(fan_in));
        let b = layout.add(format!("{name}.bias"), vec![cout], Init::FanIn(fan_in));
        Self { cin, cout, k, w, b }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// im2col for the 3x3 case: row `(ci, ky, kx)`, column `(n, y, x)`.
    fn im2col<F: Real>(&self, x: &Act<F>) -> Vec<F> {
        let (h, w, hw, ncols) = (x.h, x.w, x.hw(), x.cols());
        let mut cols = vec![F::zero(); self.rows() * ncols];
        for ci in 0..self.cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((ci * 3 + ky) * 3 + kx) * ncols..][..ncols];
                    let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    for n in 0..x.n {
                        let src = &x.data[(ci * x.n + n) * hw..][..hw];
                        for y in 0..h {
                            let sy = y + ky;
                            if sy < 1 || sy > h {
                                continue;
                            }
                            let sy = sy - 1;
                            let dst = &mut row[n * hw + y * w..][..w];
                            for xx in x_lo..x_hi {
                                dst[xx] = src[sy * w + xx + kx - 1];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<F: Real>(&self, dcols: &[F], like: &Act<F>) -> Act<F> {
        let (h, w, hw, ncols) = (like.h, like.w, like.hw(), like.cols());
        let mut dx = Act::zeros(self.cin, like.n, h, w);
        for ci in 0..self.cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &dcols[((ci * 3 + ky) * 3 + kx) * ncols..][..ncols];
                    let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    for n in 0..like.n {
                        let dst = &mut dx.data[(ci * like.n + n) * hw..][..hw];
                        for y in 0..h {
                            let sy = y + ky;
                            if sy < 1 || sy > h {
                                continue;
                            }
                            let sy = sy - 1;
                            let src = &row[n * hw + y * w..][..w];
                            for xx in x_lo..x_hi {
                                dst[sy * w + xx + kx - 1] += src[xx];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the output and the im2col buffer needed by [`Conv::backward`]
    /// (empty for 1x1 kernels, which read the input directly).
    pub fn forward<F: Real>(&self, p: &[F], x: &Act<F>) -> (Act<F>, Vec<F>) {
        debug_assert_eq!(x.c, self.cin);
        let ncols = x.cols();
        let cols = if self.k == 3 { self.im2col(x) } else { Vec::new() };
        let input = if self.k == 3 { &cols } else { &x.data };
        let mut y = Act::zeros(self.cout, x.n, x.h, x.w);
        let weight = &p[self.w..self.w + self.cout * self.rows()];
        matmul(self.cout, self.rows(), ncols, weight, Op::N, input, Op::N, &mut y.data, false);
        for co in 0..self.cout {
            let bias = p[self.b + co];
            for v in &mut y.data[co * ncols..(co + 1) * ncols] {
                *v += bias;
            }
        }
        (y, cols)
    }

    pub fn backward<F: Real>(
        &self,
        p: &[F],
        x: &Act<F>,
        cols: &[F],
        dy: &Act<F>,
        grads: &mut [F],
        need_dx: bool,
    ) -> Option<Act<F>> {
        let ncols = x.cols();
        let rows = self.rows();
        let input = if self.k == 3 { cols } else { &x.data };
        matmul(
            self.cout,
            ncols,
            rows,
            &dy.data,
            Op::N,
            input,
            Op::T,
            &mut grads[self.w..self.w + self.cout * rows],
            true,
        );
        for co in 0..self.cout {
            let s: F = dy.data[co * ncols..(co + 1) * ncols].iter().copied().sum();
            grads[self.b + co] += s;
        }
        if !need_dx {
            return None;
        }
        let weight = &p[self.w..self.w + self.cout * rows];
        let mut dcols = vec![F::zero(); rows * ncols];
        matmul(rows, self.cout, ncols, weight, Op::T, &dy.data, Op::N, &mut dcols, false);
        if self.k == 3 {
            Some(self.col2im(&dcols, x))
        } else {
            Some(x.like(dcols))
        }
    }
}

/// 2x2 stride-2 transposed convolution (doubles the spatial size).
#[derive(Clone, Debug)]
pub struct UpConv {
    pub cin: usize,
    pub cout: usize,
    w: usize,
    b: usize,
}

impl UpConv {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize) -> Self {
        let w = layout.add(format!("{name}.weight"), vec![cout, 2, 2, cin], Init::FanIn(cin));
        let b = layout.add(format!("{name}.bias"), vec![cout], Init::FanIn(cin));
        Self { cin, cout, w, b }
    }

    pub fn forward<F: Real>(&self, p: &[F], x: &Act<F>) -> Act<F> {
        let ncols = x.cols();
        let mut z = vec![F::zero(); self.cout * 4 * ncols];
        let weight = &p[self.w..self.w + self.cout * 4 * self.cin];
        matmul(self.cout * 4, self.cin, ncols, weight, Op::N, &x.data, Op::N, &mut z, false);
        let (h, w) = (x.h, x.w);
        let mut y = Act::zeros(self.cout, x.n, 2 * h, 2 * w);
        let ohw = y.hw();
        for co in 0..self.cout {
            let bias = p[self.b + co];
            for k in 0..4 {
                let (ky, kx) = (k / 2, k % 2);
                let zr = &z[(co * 4 + k) * ncols..][..ncols];
                for n in 0..x.n {
                    let out = &mut y.data[(co * x.n + n) * ohw..][..ohw];
                    for i in 0..h {
                        for j in 0..w {
                            out[(2 * i + ky) * 2 * w + 2 * j + kx] = zr[n * h * w + i * w + j] + bias;
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward<F: Real>(&self, p: &[F], x: &Act<F>, dy: &Act<F>, grads: &mut [F]) -> Act<F> {
        let ncols = x.cols();
        let (h, w) = (x.h, x.w);
        let ohw = dy.hw();
        let mut dz = vec![F::zero(); self.cout * 4 * ncols];
        for co in 0..self.cout {
            let mut db = F::zero();
            for k in 0..4 {
                let (ky, kx) = (k / 2, k % 2);
                let zr = &mut dz[(co * 4 + k) * ncols..][..ncols];
                for n in 0..x.n {
                    let g = &dy.data[(co * x.n + n) * ohw..][..ohw];
                    for i in 0..h {
                        for j in 0..w {
                            let v = g[(2 * i + ky) * 2 * w + 2 * j + kx];
                            zr[n * h * w + i * w + j] = v;
                            db += v;
                        }
                    }
                }
            }
            grads[self.b + co] += db;
        }
        let m = self.cout * 4;
        matmul(m, ncols, self.cin, &dz, Op::N, &x.data, Op::T, &mut grads[self.w..self.w + m * self.cin], true);
        let weight = &p[self.w..self.w + m * self.cin];
        let mut dx = Act::zeros(self.cin, x.n, h, w);
        matmul(self.cin, m, ncols, weight, Op::T, &dz, Op::N, &mut dx.data, false);
        dx
    }
}

pub fn avg_pool2<F: Real>(x: &Act<F>) -> Act<F> {
    let (h, w) = (x.h / 2, x.w / 2);
    let quarter = F::lit(0.25);
    let mut y = Act::zeros(x.c, x.n, h, w);
    for (plane_out, plane_in) in y.data.chunks_mut(h * w).zip(x.data.chunks(x.hw())) {
        for i in 0..h {
            for j in 0..w {
                let at = |di: usize, dj: usize| plane_in[(2 * i + di) * x.w + 2 * j + dj];
                plane_out[i * w + j] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * quarter;
            }
        }
    }
    y
}

pub fn avg_pool2_backward<F: Real>(dy: &Act<F>) -> Act<F> {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let quarter = F::lit(0.25);
    let mut dx = Act::zeros(dy.c, dy.n, h, w);
    for (plane_out, plane_in) in dx.data.chunks_mut(h * w).zip(dy.data.chunks(dy.hw())) {
        for i in 0..h {
            for j in 0..w {
                plane_out[i * w + j] = plane_in[(i / 2) * dy.w + j / 2] * quarter;
            }
        }
    }
    dx
}

pub fn silu<F: Real>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| v / (F::one() + (-v).exp())).collect()
}

/// `dL/dx` for `y = silu(x)`, given `x` and `dL/dy`.
pub fn silu_backward<F: Real>(x: &[F], dy: &[F]) -> Vec<F> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = F::one() / (F::one() + (-v).exp());
            g * s * (F::one() + v * (F::one() - s))
        })
        .collect()
}

pub fn silu_act<F: Real>(x: &Act<F>) -> Act<F> {
    x.like(silu(&x.data))
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub c: usize,
    pub groups: usize,
    gamma: usize,
    beta: usize,
}

const NORM_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(layout: &mut ParamLayout, name: &str, c: usize, groups: usize) -> Self {
        assert!(c % groups == 0, "{c} channels not divisible into {groups} groups");
        let gamma = layout.add(format!("{name}.weight"), vec![c], Init::Ones);
        let beta = layout.add(format!("{name}.bias"), vec![c], Init::Zeros);
        Self { c, groups, gamma, beta }
    }

    /// Returns the output plus `(mean, 1/std)` per `(sample, group)`.
    pub fn forward<F: Real>(&self, p: &[F], x: &Act<F>) -> (Act<F>, Vec<(F, F)>) {
        let (hw, n, cpg) = (x.hw(), x.n, self.c / self.groups);
        let count = F::from_usize(cpg * hw).unwrap();
        let eps = F::lit(NORM_EPS);
        let mut y = Act::zeros(x.c, n, x.h, x.w);
        let mut stats = Vec::with_capacity(n * self.groups);
        for ni in 0..n {
            for g in 0..self.groups {
                let planes = || (g * cpg..(g + 1) * cpg).map(|c| &x.data[(c * n + ni) * hw..][..hw]);
                let mean = planes().flatten().copied().sum::<F>() / count;
                let var = planes().flatten().map(|&v| (v - mean) * (v - mean)).sum::<F>() / count;
                let rstd = F::one() / (var + eps).sqrt();
                stats.push((mean, rstd));
                for c in g * cpg..(g + 1) * cpg {
                    let (gm, bt) = (p[self.gamma + c], p[self.beta + c]);
                    let start = (c * n + ni) * hw;
                    for k in start..start + hw {
                        y.data[k] = (x.data[k] - mean) * rstd * gm + bt;
                    }
                }
            }
        }
        (y, stats)
    }

    pub fn backward<F: Real>(&self, p: &[F], x: &Act<F>, stats: &[(F, F)], dy: &Act<F>, grads: &mut [F]) -> Act<F> {
        let (hw, n, cpg) = (x.hw(), x.n, self.c / self.groups);
        let count = F::from_usize(cpg * hw).unwrap();
        let mut dx = Act::zeros(x.c, n, x.h, x.w);
        for ni in 0..n {
            for g in 0..self.groups {
                let (mean, rstd) = stats[ni * self.groups + g];
                let (mut s1, mut s2) = (F::zero(), F::zero());
                for c in g * cpg..(g + 1) * cpg {
                    let gm = p[self.gamma + c];
                    let (mut dg, mut db) = (F::zero(), F::zero());
                    let start = (c * n + ni) * hw;
                    for k in start..start + hw {
                        let xhat = (x.data[k] - mean) * rstd;
                        let d = dy.data[k];
                        dg += d * xhat;
                        db += d;
                        s1 += d * gm;
                        s2 += d * gm * xhat;
                    }
                    grads[self.gamma + c] += dg;
                    grads[self.beta + c] += db;
                }
                let (m1, m2) = (s1 / count, s2 / count);
                for c in g * cpg..(g + 1) * cpg {
                    let gm = p[self.gamma + c];
                    let start = (c * n + ni) * hw;
                    for k in start..start + hw {
                        let xhat = (x.data[k] - mean) * rstd;
                        dx.data[k] = rstd * (dy.data[k] * gm - m1 - xhat * m2);
                    }
                }
            }
        }
        dx
    }
}

/// Fully connected layer on row-major `[N] x [din]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub din: usize,
    pub dout: usize,
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, name: &str, din: usize, dout: usize) -> Self {
        let w = layout.add(format!("{name}.weight"), vec![dout, din], Init::FanIn(din));
        let b = layout.add(format!("{name}.bias"), vec![dout], Init::FanIn(din));
        Self { din, dout, w, b }
    }

    pub fn forward<F: Real>(&self, p: &[F], x: &[F], n: usize) -> Vec<F> {
        let mut y = vec![F::zero(); n * self.dout];
        for row in y.chunks_mut(self.dout) {
            row.copy_from_slice(&p[self.b..self.b + self.dout]);
        }
        let weight = &p[self.w..self.w + self.dout * self.din];
        matmul(n, self.din, self.dout, x, Op::N, weight, Op::T, &mut y, true);
        y
    }

    pub fn backward<F: Real>(&self, p: &[F], x: &[F], dy: &[F], n: usize, grads: &mut [F], need_dx: bool) -> Option<Vec<F>> {
        matmul(self.dout, n, self.din, dy, Op::T, x, Op::N, &mut grads[self.w..self.w + self.dout * self.din], true);
        for row in dy.chunks(self.dout) {
            for (g, d) in grads[self.b..self.b + self.dout].iter_mut().zip(row) {
                *g += *d;
            }
        }
        if !need_dx {
            return None;
        }
        let weight = &p[self.w..self.w + self.dout * self.din];
        let mut dx = vec![F::zero(); n * self.din];
        matmul(n, self.dout, self.din, dy, Op::N, weight, Op::N, &mut dx, false);
        Some(dx)
    }
}

/// Pre-activation residual block:
/// `conv2(silu(norm2(conv1(silu(norm1(x)))))) + skip(x)`, where `skip` is the
/// identity or a 1x1 convolution when the width changes.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

pub struct ResCache<F> {
    x: Act<F>,
    n1: Act<F>,
    st1: Vec<(F, F)>,
    a1: Act<F>,
    cols1: Vec<F>,
    c1: Act<F>,
    n2: Act<F>,
    s2: Vec<(F, F)>,
    cols2: Vec<F>,
    a2: Act<F>,
}

impl ResBlock {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, groups: usize) -> Self {
        let norm1 = GroupNorm::new(layout, &format!("{name}.norm1"), cin, groups);
        let conv1 = Conv::new(layout, &format!("{name}.conv1"), cin, cout, 3);
        let norm2 = GroupNorm::new(layout, &format!("{name}.norm2"), cout, groups);
        let conv2 = Conv::new(layout, &format!("{name}.conv2"), cout, cout, 3);
        let skip = (cin != cout).then(|| Conv::new(layout, &format!("{name}.skip"), cin, cout, 1));
        Self {
            norm1,
            conv1,
            norm2,
            conv2,
            skip,
        }
    }

    pub fn forward<F: Real>(&self, p: &[F], x: Act<F>) -> (Act<F>, ResCache<F>) {
        let (n1, st1) = self.norm1.forward(p, &x);
        let a1 = silu_act(&n1);
        let (c1, cols1) = self.conv1.forward(p, &a1);
        let (n2, s2) = self.norm2.forward(p, &c1);
        let a2 = silu_act(&n2);
        let (c2, cols2) = self.conv2.forward(p, &a2);
        let out = match &self.skip {
            Some(conv) => c2.add(&conv.forward(p, &x).0),
            None => c2.add(&x),
        };
        let cache = ResCache {
            x,
            n1,
            st1,
            a1,
            cols1,
            c1,
            n2,
            s2,
            cols2,
            a2,
        };
        (out, cache)
    }

    pub fn backward<F: Real>(&self, p: &[F], cache: &ResCache<F>, dy: &Act<F>, grads: &mut [F]) -> Act<F> {
        let da2 = self.conv2.backward(p, &cache.a2, &cache.cols2, dy, grads, true).unwrap();
        let dn2 = cache.n2.like(silu_backward(&cache.n2.data, &da2.data));
        let dc1 = self.norm2.backward(p, &cache.c1, &cache.s2, &dn2, grads);
        let da1 = self.conv1.backward(p, &cache.a1, &cache.cols1, &dc1, grads, true).unwrap();
        let dn1 = cache.n1.like(silu_backward(&cache.n1.data, &da1.data));
        let mut dx = self.norm1.backward(p, &cache.x, &cache.st1, &dn1, grads);
        let dskip = match &self.skip {
            Some(conv) => conv.backward(p, &cache.x, &[], dy, grads, true).unwrap(),
            None => dy.clone(),
        };
        for (a, b) in dx.data.iter_mut().zip(&dskip.data) {
            *a += *b;
        }
        dx
    }
}
