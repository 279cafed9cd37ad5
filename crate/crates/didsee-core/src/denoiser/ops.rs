//! Primitive differentiable layers: conv2d (im2col), group norm, SiLU,
//! linear, nearest-neighbor upsampling, and softmax attention. Every layer
//! provides an explicit backward pass; correctness is pinned by the
//! finite-difference tests in the parent module.

use super::params::ParamSet;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;

pub fn silu_scalar(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad_scalar(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// y = x·σ(x), applied element-wise. Returns (y, cache = x).
pub fn silu_forward(x: &Array4<f64>) -> (Array4<f64>, Array4<f64>) {
    (x.mapv(silu_scalar), x.clone())
}

pub fn silu_backward(cache_x: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
    let mut gx = cache_x.mapv(silu_grad_scalar);
    gx *= gy;
    gx
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// Square-kernel 2-D convolution; weights stored as (C_out, C_in·k²).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache {
    input: Array4<f64>,
}

impl Conv2d {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            name: name.to_string(),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward(&self, ps: &ParamSet, x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let (b, cin, h, w) = x.dim();
        assert_eq!(cin, self.cin, "{}: channel mismatch", self.name);
        let (oh, ow) = self.out_hw(h, w);
        let weight = ps.mat(&self.weight_name());
        let bias = ps.vec(&self.bias_name());
        let mut y = Array4::zeros((b, self.cout, oh, ow));
        let slabs: Vec<Array3<f64>> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let col = im2col(x.index_axis(Axis(0), bi), self.k, self.stride, self.pad, oh, ow);
                let mut out = weight.dot(&col);
                for (mut row, &bv) in out.outer_iter_mut().zip(bias.iter()) {
                    row += bv;
                }
                out.into_shape_with_order((self.cout, oh, ow)).unwrap()
            })
            .collect();
        for (bi, slab) in slabs.into_iter().enumerate() {
            y.index_axis_mut(Axis(0), bi).assign(&slab);
        }
        (y, ConvCache { input: x.clone() })
    }

    /// Returns the input gradient and accumulates weight/bias gradients.
    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &ConvCache,
        gy: &Array4<f64>,
        grads: &mut ParamSet,
    ) -> Array4<f64> {
        let x = &cache.input;
        let (b, _, h, w) = x.dim();
        let (_, _, oh, ow) = gy.dim();
        let weight = ps.mat(&self.weight_name());
        let per_sample: Vec<(Array3<f64>, Array2<f64>, Array1<f64>)> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let col =
                    im2col(x.index_axis(Axis(0), bi), self.k, self.stride, self.pad, oh, ow);
                let gy2 = gy
                    .index_axis(Axis(0), bi)
                    .to_shape((self.cout, oh * ow))
                    .unwrap()
                    .to_owned();
                let gw = gy2.dot(&col.t());
                let gb = gy2.sum_axis(Axis(1));
                let gcol = weight.t().dot(&gy2);
                let gx = col2im(&gcol, self.cin, h, w, self.k, self.stride, self.pad, oh, ow);
                (gx, gw, gb)
            })
            .collect();
        let mut gx = Array4::zeros((b, self.cin, h, w));
        let mut gw_total = Array2::zeros((self.cout, self.cin * self.k * self.k));
        let mut gb_total = Array1::zeros(self.cout);
        for (bi, (gxs, gw, gb)) in per_sample.into_iter().enumerate() {
            gx.index_axis_mut(Axis(0), bi).assign(&gxs);
            gw_total += &gw;
            gb_total += &gb;
        }
        grads.accumulate(&self.weight_name(), &gw_total.into_dyn());
        grads.accumulate(&self.bias_name(), &gb_total.into_dyn());
        gx
    }
}

fn im2col(
    x: ArrayView3<'_, f64>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut col = Array2::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ci * k * k + ki * k + kj;
                let mut col_row = col.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = x.slice(s![ci, iy as usize, ..]);
                    if stride == 1 {
                        // contiguous run: ox + kj - pad in [0, w)
                        let ox_lo = pad.saturating_sub(kj);
                        let ox_hi = (w + pad - kj).min(ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix_lo = ox_lo + kj - pad;
                        let len = ox_hi - ox_lo;
                        col_row
                            .slice_mut(s![oy * ow + ox_lo..oy * ow + ox_lo + len])
                            .assign(&src.slice(s![ix_lo..ix_lo + len]));
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                col_row[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    gcol: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let mut gx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ci * k * k + ki * k + kj;
                let grow = gcol.row(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            gx[[ci, iy as usize, ix as usize]] += grow[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// group norm
// ---------------------------------------------------------------------------

const GN_EPS: f64 = 1e-5;

/// Largest group count in {8, 4, 2, 1} dividing the channel count.
pub fn group_count(channels: usize) -> usize {
    [8usize, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap()
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
}

pub struct GnCache {
    xhat: Array4<f64>,
    invstd: Array2<f64>, // (B, G)
}

impl GroupNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            channels,
            groups: group_count(channels),
        }
    }

    pub fn gamma_name(&self) -> String {
        format!("{}.g", self.name)
    }

    pub fn beta_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn forward(&self, ps: &ParamSet, x: &Array4<f64>) -> (Array4<f64>, GnCache) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let cg = c / self.groups;
        let n = (cg * h * w) as f64;
        let gamma = ps.vec(&self.gamma_name());
        let beta = ps.vec(&self.beta_name());
        let mut xhat = Array4::zeros((b, c, h, w));
        let mut invstd = Array2::zeros((b, self.groups));
        let mut y = Array4::zeros((b, c, h, w));
        for bi in 0..b {
            for g in 0..self.groups {
                let cs = g * cg;
                let block = x.slice(s![bi, cs..cs + cg, .., ..]);
                let mean = block.sum() / n;
                let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let is = 1.0 / (var + GN_EPS).sqrt();
                invstd[[bi, g]] = is;
                for ci in 0..cg {
                    let c_abs = cs + ci;
                    let (gm, bt) = (gamma[c_abs], beta[c_abs]);
                    for yy in 0..h {
                        for xx in 0..w {
                            let xh = (x[[bi, c_abs, yy, xx]] - mean) * is;
                            xhat[[bi, c_abs, yy, xx]] = xh;
                            y[[bi, c_abs, yy, xx]] = gm * xh + bt;
                        }
                    }
                }
            }
        }
        (y, GnCache { xhat, invstd })
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &GnCache,
        gy: &Array4<f64>,
        grads: &mut ParamSet,
    ) -> Array4<f64> {
        let (b, c, h, w) = gy.dim();
        let cg = c / self.groups;
        let n = (cg * h * w) as f64;
        let gamma = ps.vec(&self.gamma_name());
        let xhat = &cache.xhat;
        let mut gx = Array4::zeros((b, c, h, w));
        let mut ggamma = Array1::zeros(c);
        let mut gbeta = Array1::zeros(c);
        for ci in 0..c {
            let mut sg = 0.0;
            let mut sb = 0.0;
            for bi in 0..b {
                for yy in 0..h {
                    for xx in 0..w {
                        let g = gy[[bi, ci, yy, xx]];
                        sg += g * xhat[[bi, ci, yy, xx]];
                        sb += g;
                    }
                }
            }
            ggamma[ci] = sg;
            gbeta[ci] = sb;
        }
        for bi in 0..b {
            for g in 0..self.groups {
                let cs = g * cg;
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for ci in cs..cs + cg {
                    for yy in 0..h {
                        for xx in 0..w {
                            let gxh = gy[[bi, ci, yy, xx]] * gamma[ci];
                            s1 += gxh;
                            s2 += gxh * xhat[[bi, ci, yy, xx]];
                        }
                    }
                }
                let is = cache.invstd[[bi, g]];
                for ci in cs..cs + cg {
                    for yy in 0..h {
                        for xx in 0..w {
                            let gxh = gy[[bi, ci, yy, xx]] * gamma[ci];
                            gx[[bi, ci, yy, xx]] =
                                is / n * (n * gxh - s1 - xhat[[bi, ci, yy, xx]] * s2);
                        }
                    }
                }
            }
        }
        grads.accumulate(&self.gamma_name(), &ggamma.into_dyn());
        grads.accumulate(&self.beta_name(), &gbeta.into_dyn());
        gx
    }
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

pub struct LinearCache {
    input: Array2<f64>,
}

impl Linear {
    pub fn new(name: &str, din: usize, dout: usize) -> Self {
        Self {
            name: name.to_string(),
            din,
            dout,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn forward(&self, ps: &ParamSet, x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        let w = ps.mat(&self.weight_name());
        let b = ps.vec(&self.bias_name());
        let mut y = x.dot(&w.t());
        for mut row in y.outer_iter_mut() {
            row += &b;
        }
        (y, LinearCache { input: x.clone() })
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &LinearCache,
        gy: &Array2<f64>,
        grads: &mut ParamSet,
    ) -> Array2<f64> {
        let w = ps.mat(&self.weight_name());
        let gw = gy.t().dot(&cache.input);
        let gb = gy.sum_axis(Axis(0));
        grads.accumulate(&self.weight_name(), &gw.into_dyn());
        grads.accumulate(&self.bias_name(), &gb.into_dyn());
        gy.dot(&w)
    }
}

// ---------------------------------------------------------------------------
// nearest-neighbor 2x upsampling
// ---------------------------------------------------------------------------

pub fn upsample2_forward(x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::zeros((b, c, 2 * h, 2 * w));
    for bi in 0..b {
        for ci in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let v = x[[bi, ci, yy, xx]];
                    y[[bi, ci, 2 * yy, 2 * xx]] = v;
                    y[[bi, ci, 2 * yy, 2 * xx + 1]] = v;
                    y[[bi, ci, 2 * yy + 1, 2 * xx]] = v;
                    y[[bi, ci, 2 * yy + 1, 2 * xx + 1]] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(gy: &Array4<f64>) -> Array4<f64> {
    let (b, c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    gx[[bi, ci, yy, xx]] = gy[[bi, ci, 2 * yy, 2 * xx]]
                        + gy[[bi, ci, 2 * yy, 2 * xx + 1]]
                        + gy[[bi, ci, 2 * yy + 1, 2 * xx]]
                        + gy[[bi, ci, 2 * yy + 1, 2 * xx + 1]];
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// softmax attention (self or cross-task)
// ---------------------------------------------------------------------------

/// Row-wise softmax.
fn softmax_rows(s: &Array2<f64>) -> Array2<f64> {
    let mut a = s.clone();
    for mut row in a.outer_iter_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    a
}

/// Single-head scaled dot-product attention on token matrices.
///
/// `x_q` (C, L) provides the queries; `ctx` (C, M) provides keys and values.
/// Returns the (C, L) attention output plus the cache needed for backward.
pub fn attention_tokens(
    wq: &ArrayView2<'_, f64>,
    wk: &ArrayView2<'_, f64>,
    wv: &ArrayView2<'_, f64>,
    x_q: &Array2<f64>,
    ctx: &Array2<f64>,
) -> (Array2<f64>, AttnTokenCache) {
    let c = x_q.nrows() as f64;
    let q = wq.dot(x_q);
    let k = wk.dot(ctx);
    let v = wv.dot(ctx);
    let scores = q.t().dot(&k) / c.sqrt();
    let a = softmax_rows(&scores);
    let o = v.dot(&a.t());
    (
        o,
        AttnTokenCache {
            q,
            k,
            v,
            a,
            x_q: x_q.clone(),
            ctx: ctx.clone(),
        },
    )
}

pub struct AttnTokenCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    a: Array2<f64>,
    x_q: Array2<f64>,
    ctx: Array2<f64>,
}

pub struct AttnTokenGrads {
    pub gx_q: Array2<f64>,
    pub gctx: Array2<f64>,
    pub gwq: Array2<f64>,
    pub gwk: Array2<f64>,
    pub gwv: Array2<f64>,
}

pub fn attention_tokens_backward(
    wq: &ArrayView2<'_, f64>,
    wk: &ArrayView2<'_, f64>,
    wv: &ArrayView2<'_, f64>,
    cache: &AttnTokenCache,
    go: &Array2<f64>,
) -> AttnTokenGrads {
    let c = cache.q.nrows() as f64;
    // o = v · aᵀ
    let gv = go.dot(&cache.a);
    let ga = go.t().dot(&cache.v); // (L, M) wait: goᵀ (L,C) · v (C,M) = (L,M)
    // softmax backward per row
    let mut gs = Array2::zeros(ga.raw_dim());
    for (i, (arow, garow)) in cache.a.outer_iter().zip(ga.outer_iter()).enumerate() {
        let dot: f64 = arow.iter().zip(garow.iter()).map(|(a, g)| a * g).sum();
        for (j, (&av, &gv_)) in arow.iter().zip(garow.iter()).enumerate() {
            gs[[i, j]] = av * (gv_ - dot);
        }
    }
    gs /= c.sqrt();
    // s = qᵀ·k
    let gq = cache.k.dot(&gs.t());
    let gk = cache.q.dot(&gs);
    let gwq = gq.dot(&cache.x_q.t());
    let gwk = gk.dot(&cache.ctx.t());
    let gwv = gv.dot(&cache.ctx.t());
    let gx_q = wq.t().dot(&gq);
    let gctx = wk.t().dot(&gk) + wv.t().dot(&gv);
    AttnTokenGrads {
        gx_q,
        gctx,
        gwq,
        gwk,
        gwv,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn4(rng: &mut ChaCha8Rng, d: (usize, usize, usize, usize)) -> Array4<f64> {
        Array::from_shape_simple_fn(d, || rng.sample(StandardNormal))
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 conv with identity weight reproduces the input
        let conv = Conv2d::new("c", 2, 2, 1, 1, 0);
        let mut ps = ParamSet::new();
        let mut w = Array2::zeros((2, 2));
        w[[0, 0]] = 1.0;
        w[[1, 1]] = 1.0;
        ps.insert("c.w", w.into_dyn());
        ps.insert("c.b", Array1::zeros(2).into_dyn());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randn4(&mut rng, (2, 2, 4, 4));
        let (y, _) = conv.forward(&ps, &x);
        assert!(x.iter().zip(y.iter()).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn conv_stride2_halves_spatial() {
        let conv = Conv2d::new("c", 1, 3, 3, 2, 1);
        let mut ps = ParamSet::new();
        ps.insert("c.w", Array2::<f64>::zeros((3, 9)).into_dyn());
        ps.insert("c.b", Array1::<f64>::zeros(3).into_dyn());
        let x = Array4::zeros((1, 1, 8, 8));
        let (y, _) = conv.forward(&ps, &x);
        assert_eq!(y.dim(), (1, 3, 4, 4));
    }

    #[test]
    fn im2col_matches_naive_conv() {
        let conv = Conv2d::new("c", 2, 3, 3, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let w: Array2<f64> = Array::from_shape_simple_fn((3, 18), || rng.sample(StandardNormal));
        let b: Array1<f64> = Array::from_shape_simple_fn(3, || rng.sample(StandardNormal));
        ps.insert("c.w", w.clone().into_dyn());
        ps.insert("c.b", b.clone().into_dyn());
        let x = randn4(&mut rng, (1, 2, 5, 5));
        let (y, _) = conv.forward(&ps, &x);
        // naive direct convolution
        for co in 0..3 {
            for oy in 0..5 {
                for ox in 0..5 {
                    let mut acc = b[co];
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = oy as isize + ki as isize - 1;
                                let ix = ox as isize + kj as isize - 1;
                                if iy >= 0 && iy < 5 && ix >= 0 && ix < 5 {
                                    acc += w[[co, ci * 9 + ki * 3 + kj]]
                                        * x[[0, ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    assert!((y[[0, co, oy, ox]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    /// Central finite-difference check of conv backward wrt input, weight, bias.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let conv = Conv2d::new("c", 2, 3, 3, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        ps.insert(
            "c.w",
            Array::from_shape_simple_fn((3, 18), || rng.sample::<f64, _>(StandardNormal)).into_dyn(),
        );
        ps.insert(
            "c.b",
            Array::from_shape_simple_fn(3, || rng.sample::<f64, _>(StandardNormal)).into_dyn(),
        );
        let x = randn4(&mut rng, (2, 2, 6, 6));
        let proj = randn4(&mut rng, (2, 3, 3, 3));
        let loss = |ps: &ParamSet, x: &Array4<f64>| {
            let (y, _) = conv.forward(ps, x);
            (&y * &proj).sum()
        };
        let (y, cache) = conv.forward(&ps, &x);
        assert_eq!(y.dim(), proj.dim());
        let mut grads = ps.zeros_like();
        let gx = conv.backward(&ps, &cache, &proj, &mut grads);
        let eps = 1e-6;
        // input gradient: sample a few coordinates
        for &(bi, ci, yy, xx) in &[(0, 0, 0, 0), (1, 1, 3, 2), (0, 1, 5, 5)] {
            let mut xp = x.clone();
            xp[[bi, ci, yy, xx]] += eps;
            let mut xm = x.clone();
            xm[[bi, ci, yy, xx]] -= eps;
            let fd = (loss(&ps, &xp) - loss(&ps, &xm)) / (2.0 * eps);
            assert!(
                (gx[[bi, ci, yy, xx]] - fd).abs() < 1e-6 * fd.abs().max(1.0),
                "input grad mismatch"
            );
        }
        // weight gradient
        for &(i, j) in &[(0, 0), (2, 17), (1, 9)] {
            let mut pp = ps.clone();
            pp.get_mut("c.w")[[i, j]] += eps;
            let mut pm = ps.clone();
            pm.get_mut("c.w")[[i, j]] -= eps;
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * eps);
            assert!((grads.get("c.w")[[i, j]] - fd).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn groupnorm_normalizes_groups() {
        let gn = GroupNorm::new("n", 4);
        let mut ps = ParamSet::new();
        ps.insert("n.g", Array1::ones(4).into_dyn());
        ps.insert("n.b", Array1::zeros(4).into_dyn());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn4(&mut rng, (2, 4, 5, 5)) * 3.0 + 7.0;
        let (y, _) = gn.forward(&ps, &x);
        // groups of size 1 channel (4 channels / 4 groups): per-channel stats ~ (0, 1)
        assert_eq!(gn.groups, 4);
        for bi in 0..2 {
            for ci in 0..4 {
                let block = y.slice(s![bi, ci, .., ..]);
                let mean = block.sum() / 25.0;
                let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 25.0;
                assert!(mean.abs() < 1e-10);
                assert!((var - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn groupnorm_backward_matches_finite_differences() {
        let gn = GroupNorm::new("n", 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        ps.insert(
            "n.g",
            Array::from_shape_simple_fn(4, || 1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal))
                .into_dyn(),
        );
        ps.insert(
            "n.b",
            Array::from_shape_simple_fn(4, || rng.sample::<f64, _>(StandardNormal)).into_dyn(),
        );
        let x = randn4(&mut rng, (2, 4, 3, 3));
        let proj = randn4(&mut rng, (2, 4, 3, 3));
        let loss = |ps: &ParamSet, x: &Array4<f64>| {
            let (y, _) = gn.forward(ps, x);
            (&y * &proj).sum()
        };
        let (_, cache) = gn.forward(&ps, &x);
        let mut grads = ps.zeros_like();
        let gx = gn.backward(&ps, &cache, &proj, &mut grads);
        let eps = 1e-6;
        for &(bi, ci, yy, xx) in &[(0, 0, 0, 0), (1, 3, 2, 1), (0, 2, 1, 2)] {
            let mut xp = x.clone();
            xp[[bi, ci, yy, xx]] += eps;
            let mut xm = x.clone();
            xm[[bi, ci, yy, xx]] -= eps;
            let fd = (loss(&ps, &xp) - loss(&ps, &xm)) / (2.0 * eps);
            assert!(
                (gx[[bi, ci, yy, xx]] - fd).abs() < 1e-5 * fd.abs().max(1.0),
                "gn input grad mismatch: {} vs {}",
                gx[[bi, ci, yy, xx]],
                fd
            );
        }
        for ci in 0..4 {
            let mut pp = ps.clone();
            pp.get_mut("n.g")[ci] += eps;
            let mut pm = ps.clone();
            pm.get_mut("n.g")[ci] -= eps;
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * eps);
            assert!((grads.get("n.g")[ci] - fd).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn silu_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn4(&mut rng, (1, 2, 3, 3));
        let proj = randn4(&mut rng, (1, 2, 3, 3));
        let (_, cache) = silu_forward(&x);
        let gx = silu_backward(&cache, &proj);
        let eps = 1e-6;
        let loss = |x: &Array4<f64>| (&x.mapv(silu_scalar) * &proj).sum();
        let mut xp = x.clone();
        xp[[0, 1, 2, 2]] += eps;
        let mut xm = x.clone();
        xm[[0, 1, 2, 2]] -= eps;
        let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
        assert!((gx[[0, 1, 2, 2]] - fd).abs() < 1e-8);
    }

    #[test]
    fn upsample_round_trip_shapes_and_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn4(&mut rng, (1, 2, 3, 3));
        let y = upsample2_forward(&x);
        assert_eq!(y.dim(), (1, 2, 6, 6));
        // adjoint identity: <up(x), g> == <x, up_backward(g)>
        let g = randn4(&mut rng, (1, 2, 6, 6));
        let lhs: f64 = (&y * &g).sum();
        let rhs: f64 = (&x * &upsample2_backward(&g)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn attention_duplicated_context_equals_self_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = 4;
        let l = 6;
        let wq: Array2<f64> = Array::from_shape_simple_fn((c, c), || rng.sample(StandardNormal));
        let wk: Array2<f64> = Array::from_shape_simple_fn((c, c), || rng.sample(StandardNormal));
        let wv: Array2<f64> = Array::from_shape_simple_fn((c, c), || rng.sample(StandardNormal));
        let x: Array2<f64> = Array::from_shape_simple_fn((c, l), || rng.sample(StandardNormal));
        let (self_out, _) = attention_tokens(&wq.view(), &wk.view(), &wv.view(), &x, &x);
        let mut ctx = Array2::zeros((c, 2 * l));
        ctx.slice_mut(s![.., ..l]).assign(&x);
        ctx.slice_mut(s![.., l..]).assign(&x);
        let (dup_out, _) = attention_tokens(&wq.view(), &wk.view(), &wv.view(), &x, &ctx);
        let max_diff = self_out
            .iter()
            .zip(dup_out.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-10, "duplication invariance broken: {max_diff}");
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (c, l, m) = (3, 4, 8);
        let wq: Array2<f64> = Array::from_shape_simple_fn((c, c), || rng.sample(StandardNormal));
        let wk: Array2<f64> = Array::from_shape_simple_fn((c, c), || rng.sample(StandardNormal));
        let wv: Array2<f64> = Array::from_shape_simple_fn((c, c), || rng.sample(StandardNormal));
        let x: Array2<f64> = Array::from_shape_simple_fn((c, l), || rng.sample(StandardNormal));
        let ctx: Array2<f64> = Array::from_shape_simple_fn((c, m), || rng.sample(StandardNormal));
        let proj: Array2<f64> = Array::from_shape_simple_fn((c, l), || rng.sample(StandardNormal));
        let loss = |wq: &Array2<f64>, x: &Array2<f64>, ctx: &Array2<f64>| {
            let (o, _) = attention_tokens(&wq.view(), &wk.view(), &wv.view(), x, ctx);
            (&o * &proj).sum()
        };
        let (_, cache) = attention_tokens(&wq.view(), &wk.view(), &wv.view(), &x, &ctx);
        let g = attention_tokens_backward(&wq.view(), &wk.view(), &wv.view(), &cache, &proj);
        let eps = 1e-6;
        // query input gradient
        let mut xp = x.clone();
        xp[[1, 2]] += eps;
        let mut xm = x.clone();
        xm[[1, 2]] -= eps;
        let fd = (loss(&wq, &xp, &ctx) - loss(&wq, &xm, &ctx)) / (2.0 * eps);
        assert!((g.gx_q[[1, 2]] - fd).abs() < 1e-6 * fd.abs().max(1.0));
        // context gradient
        let mut cp = ctx.clone();
        cp[[2, 5]] += eps;
        let mut cm = ctx.clone();
        cm[[2, 5]] -= eps;
        let fd = (loss(&wq, &x, &cp) - loss(&wq, &x, &cm)) / (2.0 * eps);
        assert!((g.gctx[[2, 5]] - fd).abs() < 1e-6 * fd.abs().max(1.0));
        // wq gradient
        let mut wp = wq.clone();
        wp[[0, 1]] += eps;
        let mut wm = wq.clone();
        wm[[0, 1]] -= eps;
        let fd = (loss(&wp, &x, &ctx) - loss(&wm, &x, &ctx)) / (2.0 * eps);
        assert!((g.gwq[[0, 1]] - fd).abs() < 1e-6 * fd.abs().max(1.0));
    }
}
