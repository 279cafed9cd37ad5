//! Toy conditional encoder–decoder denoiser with timestep embedding,
//! task-switch conditioning, and cross-task attention, in 64-bit floats
//! with hand-written backprop.
//!
//! The network takes the channel concatenation `[z_x, z_d, z_t_y]` of the
//! RGB latent, raw-depth latent, and noisy target latent, plus a combined
//! timestep/task embedding, and predicts a v-tensor with the latent channel
//! count. In joint mode the depth and semantic streams run in one forward
//! pass, paired along the batch axis, so the attention layers can exchange
//! keys/values between tasks.

pub mod checkpoint;
pub mod embed;
pub mod ops;
pub mod params;

pub use embed::{embed_switch, embed_timestep, Task, TaskSwitch};
pub use params::ParamSet;

use crate::diffusion::Latent;
use crate::error::{Error, Result};
use ndarray::{s, Array1, Array2, Array4, ArrayView2, Axis};
use ops::{
    attention_tokens, attention_tokens_backward, silu_backward, silu_forward, silu_scalar,
    upsample2_backward, upsample2_forward, AttnTokenCache, Conv2d, ConvCache, GnCache, GroupNorm,
    Linear, LinearCache,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Hyperparameters of the toy denoiser.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DenoiserConfig {
    /// Channels at the outermost level; doubled per downsampling stage.
    pub base_channels: usize,
    /// Number of down/upsampling stages.
    pub depth_levels: usize,
    /// Width of the sinusoidal timestep/task embedding.
    pub time_embed_dim: usize,
    /// Resolution level carrying the attention pair; `depth_levels` means
    /// the innermost (bottleneck) feature map.
    pub attention_at_level: usize,
    /// Channel count of each latent; network input is 3 · this.
    pub latent_channels: usize,
    /// Semantic enhancer on/off: cross-task attention between paired streams.
    pub joint_mode: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth_levels: 3,
            time_embed_dim: 128,
            attention_at_level: 3,
            latent_channels: 3,
            joint_mode: false,
        }
    }
}

impl DenoiserConfig {
    pub fn input_channels(&self) -> usize {
        3 * self.latent_channels
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth_levels < 1 {
            return Err(Error::invalid_argument("depth_levels must be >= 1"));
        }
        if self.base_channels < 1 || self.latent_channels < 1 {
            return Err(Error::invalid_argument("channel counts must be >= 1"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::invalid_argument("time_embed_dim must be even"));
        }
        if self.attention_at_level > self.depth_levels {
            return Err(Error::invalid_argument(format!(
                "attention_at_level ({}) must be <= depth_levels ({})",
                self.attention_at_level, self.depth_levels
            )));
        }
        Ok(())
    }
}

/// How attention layers source their keys/values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMode {
    /// Keys/values from the stream's own tokens.
    SelfOnly,
    /// Batch holds task pairs (i, i + B/2); keys/values are the
    /// concatenation of own tokens and the partner's tokens.
    CrossPairs,
}

// ---------------------------------------------------------------------------
// residual block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    temb_proj: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

struct ResCache {
    gn1: GnCache,
    silu1_in: Array4<f64>,
    conv1: ConvCache,
    temb: LinearCache,
    gn2: GnCache,
    silu2_in: Array4<f64>,
    conv2: ConvCache,
    skip: Option<ConvCache>,
}

impl ResBlock {
    fn new(prefix: &str, cin: usize, cout: usize, time_dim: usize) -> Self {
        Self {
            gn1: GroupNorm::new(&format!("{prefix}.gn1"), cin),
            conv1: Conv2d::new(&format!("{prefix}.conv1"), cin, cout, 3, 1, 1),
            temb_proj: Linear::new(&format!("{prefix}.temb"), time_dim, cout),
            gn2: GroupNorm::new(&format!("{prefix}.gn2"), cout),
            conv2: Conv2d::new(&format!("{prefix}.conv2"), cout, cout, 3, 1, 1),
            skip: (cin != cout).then(|| Conv2d::new(&format!("{prefix}.skip"), cin, cout, 1, 1, 0)),
        }
    }

    fn forward(
        &self,
        ps: &ParamSet,
        x: &Array4<f64>,
        temb_out: &Array2<f64>,
    ) -> (Array4<f64>, ResCache) {
        let (h, gn1c) = self.gn1.forward(ps, x);
        let (a1, silu1_in) = silu_forward(&h);
        let (mut c1, conv1c) = self.conv1.forward(ps, &a1);
        let (proj, tembc) = self.temb_proj.forward(ps, temb_out);
        for bi in 0..c1.dim().0 {
            for ci in 0..c1.dim().1 {
                let p = proj[[bi, ci]];
                c1.slice_mut(s![bi, ci, .., ..]).mapv_inplace(|v| v + p);
            }
        }
        let (h2, gn2c) = self.gn2.forward(ps, &c1);
        let (a2, silu2_in) = silu_forward(&h2);
        let (c2, conv2c) = self.conv2.forward(ps, &a2);
        let (y, skipc) = match &self.skip {
            Some(skip) => {
                let (sx, sc) = skip.forward(ps, x);
                (&c2 + &sx, Some(sc))
            }
            None => (&c2 + x, None),
        };
        (
            y,
            ResCache {
                gn1: gn1c,
                silu1_in,
                conv1: conv1c,
                temb: tembc,
                gn2: gn2c,
                silu2_in,
                conv2: conv2c,
                skip: skipc,
            },
        )
    }

    /// Returns (input grad, temb grad contribution).
    fn backward(
        &self,
        ps: &ParamSet,
        cache: &ResCache,
        gy: &Array4<f64>,
        grads: &mut ParamSet,
    ) -> (Array4<f64>, Array2<f64>) {
        let ga2 = self.conv2.backward(ps, &cache.conv2, gy, grads);
        let gh2 = silu_backward(&cache.silu2_in, &ga2);
        let gc1 = self.gn2.backward(ps, &cache.gn2, &gh2, grads);
        // time projection receives the spatial sum of the post-conv1 grad
        let (b, c) = (gc1.dim().0, gc1.dim().1);
        let mut gproj = Array2::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                gproj[[bi, ci]] = gc1.slice(s![bi, ci, .., ..]).sum();
            }
        }
        let gtemb = self.temb_proj.backward(ps, &cache.temb, &gproj, grads);
        let ga1 = self.conv1.backward(ps, &cache.conv1, &gc1, grads);
        let gh1 = silu_backward(&cache.silu1_in, &ga1);
        let mut gx = self.gn1.backward(ps, &cache.gn1, &gh1, grads);
        match (&self.skip, &cache.skip) {
            (Some(skip), Some(sc)) => {
                gx += &skip.backward(ps, sc, gy, grads);
            }
            _ => gx += gy,
        }
        (gx, gtemb)
    }

    fn init(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        init_groupnorm(ps, &self.gn1);
        init_conv(ps, &self.conv1, rng, ConvInit::Kaiming);
        init_linear(ps, &self.temb_proj, rng);
        init_groupnorm(ps, &self.gn2);
        init_conv(ps, &self.conv2, rng, ConvInit::Kaiming);
        if let Some(skip) = &self.skip {
            init_conv(ps, skip, rng, ConvInit::Kaiming);
        }
    }
}

// ---------------------------------------------------------------------------
// attention block (pre-norm, residual)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct AttnBlock {
    prefix: String,
    channels: usize,
    gn: GroupNorm,
}

struct AttnCache {
    gn: GnCache,
    token_caches: Vec<AttnTokenCache>,
    outputs: Vec<Array2<f64>>, // per-sample o (C, L)
    mode: AttnMode,
}

impl AttnBlock {
    fn new(prefix: &str, channels: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            channels,
            gn: GroupNorm::new(&format!("{prefix}.gn"), channels),
        }
    }

    fn wname(&self, which: &str) -> String {
        format!("{}.{which}", self.prefix)
    }

    fn forward(&self, ps: &ParamSet, x: &Array4<f64>, mode: AttnMode) -> (Array4<f64>, AttnCache) {
        let (b, c, h, w) = x.dim();
        let l = h * w;
        let (hn, gnc) = self.gn.forward(ps, x);
        let tokens: Vec<Array2<f64>> = (0..b)
            .map(|bi| {
                hn.index_axis(Axis(0), bi)
                    .to_shape((c, l))
                    .unwrap()
                    .to_owned()
            })
            .collect();
        let wq = ps.mat(&self.wname("wq"));
        let wk = ps.mat(&self.wname("wk"));
        let wv = ps.mat(&self.wname("wv"));
        let wo = ps.mat(&self.wname("wo"));
        let bo = ps.vec(&self.wname("bo"));
        let mut token_caches = Vec::with_capacity(b);
        let mut outputs = Vec::with_capacity(b);
        let mut y = x.clone();
        for bi in 0..b {
            let ctx = match mode {
                AttnMode::SelfOnly => tokens[bi].clone(),
                AttnMode::CrossPairs => {
                    let partner = (bi + b / 2) % b;
                    cat_cols(&tokens[bi], &tokens[partner])
                }
            };
            let (o, tc) = attention_tokens(&wq, &wk, &wv, &tokens[bi], &ctx);
            let mut yt = wo.dot(&o);
            for (mut row, &bv) in yt.outer_iter_mut().zip(bo.iter()) {
                row += bv;
            }
            let yt3 = yt.into_shape_with_order((c, h, w)).unwrap();
            {
                let mut slab = y.index_axis_mut(Axis(0), bi);
                slab += &yt3;
            }
            token_caches.push(tc);
            outputs.push(o);
        }
        (
            y,
            AttnCache {
                gn: gnc,
                token_caches,
                outputs,
                mode,
            },
        )
    }

    fn backward(
        &self,
        ps: &ParamSet,
        cache: &AttnCache,
        gy: &Array4<f64>,
        grads: &mut ParamSet,
    ) -> Array4<f64> {
        let (b, c, h, w) = gy.dim();
        let l = h * w;
        let wq = ps.mat(&self.wname("wq"));
        let wk = ps.mat(&self.wname("wk"));
        let wv = ps.mat(&self.wname("wv"));
        let wo = ps.mat(&self.wname("wo"));
        let mut gwq = Array2::zeros((c, c));
        let mut gwk = Array2::zeros((c, c));
        let mut gwv = Array2::zeros((c, c));
        let mut gwo = Array2::zeros((c, c));
        let mut gbo = Array1::zeros(c);
        let mut gtokens: Vec<Array2<f64>> = (0..b).map(|_| Array2::zeros((c, l))).collect();
        for bi in 0..b {
            let gyt = gy
                .index_axis(Axis(0), bi)
                .to_shape((c, l))
                .unwrap()
                .to_owned();
            gbo += &gyt.sum_axis(Axis(1));
            gwo += &gyt.dot(&cache.outputs[bi].t());
            let go = wo.t().dot(&gyt);
            let tg = attention_tokens_backward(&wq, &wk, &wv, &cache.token_caches[bi], &go);
            gwq += &tg.gwq;
            gwk += &tg.gwk;
            gwv += &tg.gwv;
            gtokens[bi] += &tg.gx_q;
            match cache.mode {
                AttnMode::SelfOnly => gtokens[bi] += &tg.gctx,
                AttnMode::CrossPairs => {
                    let partner = (bi + b / 2) % b;
                    gtokens[bi] += &tg.gctx.slice(s![.., ..l]);
                    gtokens[partner] += &tg.gctx.slice(s![.., l..]);
                }
            }
        }
        grads.accumulate(&self.wname("wq"), &gwq.into_dyn());
        grads.accumulate(&self.wname("wk"), &gwk.into_dyn());
        grads.accumulate(&self.wname("wv"), &gwv.into_dyn());
        grads.accumulate(&self.wname("wo"), &gwo.into_dyn());
        grads.accumulate(&self.wname("bo"), &gbo.into_dyn());
        let mut gh = Array4::zeros((b, c, h, w));
        for (bi, gt) in gtokens.into_iter().enumerate() {
            gh.index_axis_mut(Axis(0), bi)
                .assign(&gt.into_shape_with_order((c, h, w)).unwrap());
        }
        let gx_gn = self.gn.backward(ps, &cache.gn, &gh, grads);
        gy + &gx_gn
    }

    fn init(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        init_groupnorm(ps, &self.gn);
        let c = self.channels;
        let std = (1.0 / c as f64).sqrt();
        for which in ["wq", "wk", "wv"] {
            let w =
                Array2::from_shape_simple_fn((c, c), || std * rng.sample::<f64, _>(StandardNormal));
            ps.insert(&self.wname(which), w.into_dyn());
        }
        // zero-initialized output projection: the block starts as identity
        ps.insert(&self.wname("wo"), Array2::<f64>::zeros((c, c)).into_dyn());
        ps.insert(&self.wname("bo"), Array1::<f64>::zeros(c).into_dyn());
    }
}

fn cat_cols(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (c, l) = a.dim();
    let m = b.ncols();
    let mut out = Array2::zeros((c, l + m));
    out.slice_mut(s![.., ..l]).assign(a);
    out.slice_mut(s![.., l..]).assign(b);
    out
}

// ---------------------------------------------------------------------------
// initialization helpers
// ---------------------------------------------------------------------------

enum ConvInit {
    Kaiming,
    Zero,
}

fn init_conv(ps: &mut ParamSet, conv: &Conv2d, rng: &mut ChaCha8Rng, kind: ConvInit) {
    let fan_in = (conv.cin * conv.k * conv.k) as f64;
    let w = match kind {
        ConvInit::Kaiming => {
            let std = (2.0 / fan_in).sqrt();
            Array2::from_shape_simple_fn((conv.cout, conv.cin * conv.k * conv.k), || {
                std * rng.sample::<f64, _>(StandardNormal)
            })
        }
        ConvInit::Zero => Array2::zeros((conv.cout, conv.cin * conv.k * conv.k)),
    };
    ps.insert(&conv.weight_name(), w.into_dyn());
    ps.insert(&conv.bias_name(), Array1::<f64>::zeros(conv.cout).into_dyn());
}

fn init_groupnorm(ps: &mut ParamSet, gn: &GroupNorm) {
    ps.insert(&gn.gamma_name(), Array1::<f64>::ones(gn.channels).into_dyn());
    ps.insert(&gn.beta_name(), Array1::<f64>::zeros(gn.channels).into_dyn());
}

fn init_linear(ps: &mut ParamSet, lin: &Linear, rng: &mut ChaCha8Rng) {
    let std = (1.0 / lin.din as f64).sqrt();
    let w = Array2::from_shape_simple_fn((lin.dout, lin.din), || {
        std * rng.sample::<f64, _>(StandardNormal)
    });
    ps.insert(&lin.weight_name(), w.into_dyn());
    ps.insert(&lin.bias_name(), Array1::<f64>::zeros(lin.dout).into_dyn());
}

// ---------------------------------------------------------------------------
// network
// ---------------------------------------------------------------------------

struct EncLevel {
    res: ResBlock,
    attn: Option<AttnBlock>,
    down: Conv2d,
}

struct DecLevel {
    up: Conv2d,
    res: ResBlock,
    attn: Option<AttnBlock>,
}

struct Architecture {
    stem: Conv2d,
    temb_fc1: Linear,
    temb_fc2: Linear,
    enc: Vec<EncLevel>,
    mid1: ResBlock,
    mid_attn: Option<AttnBlock>,
    mid2: ResBlock,
    dec: Vec<DecLevel>,
    head_gn: GroupNorm,
    head_conv: Conv2d,
}

impl Architecture {
    fn build(cfg: &DenoiserConfig) -> Self {
        let td = cfg.time_embed_dim;
        let levels = cfg.depth_levels;
        let stem = Conv2d::new("stem", cfg.input_channels(), cfg.level_channels(0), 3, 1, 1);
        let temb_fc1 = Linear::new("temb.fc1", td, td);
        let temb_fc2 = Linear::new("temb.fc2", td, td);
        let mut enc = Vec::new();
        for l in 0..levels {
            let c = cfg.level_channels(l);
            enc.push(EncLevel {
                res: ResBlock::new(&format!("enc{l}.res"), c, c, td),
                attn: (cfg.attention_at_level == l)
                    .then(|| AttnBlock::new(&format!("enc{l}.attn"), c)),
                down: Conv2d::new(&format!("enc{l}.down"), c, cfg.level_channels(l + 1), 3, 2, 1),
            });
        }
        let cm = cfg.level_channels(levels);
        let mid1 = ResBlock::new("mid.res1", cm, cm, td);
        let mid_attn =
            (cfg.attention_at_level == levels).then(|| AttnBlock::new("mid.attn", cm));
        let mid2 = ResBlock::new("mid.res2", cm, cm, td);
        let mut dec = Vec::new();
        for l in (0..levels).rev() {
            let c = cfg.level_channels(l);
            dec.push(DecLevel {
                up: Conv2d::new(&format!("dec{l}.up"), cfg.level_channels(l + 1), c, 3, 1, 1),
                res: ResBlock::new(&format!("dec{l}.res"), 2 * c, c, td),
                attn: (cfg.attention_at_level == l)
                    .then(|| AttnBlock::new(&format!("dec{l}.attn"), c)),
            });
        }
        let head_gn = GroupNorm::new("head.gn", cfg.level_channels(0));
        let head_conv = Conv2d::new(
            "head.conv",
            cfg.level_channels(0),
            cfg.latent_channels,
            3,
            1,
            1,
        );
        Self {
            stem,
            temb_fc1,
            temb_fc2,
            enc,
            mid1,
            mid_attn,
            mid2,
            dec,
            head_gn,
            head_conv,
        }
    }
}

/// Forward-pass record used by [`Denoiser::backward`].
pub struct Tape {
    temb_fc1: LinearCache,
    temb_silu_in: Array2<f64>,
    temb_fc2: LinearCache,
    temb_out: Array2<f64>,
    stem: ConvCache,
    enc: Vec<(ResCache, Option<AttnCache>, ConvCache)>,
    mid: (ResCache, Option<AttnCache>, ResCache),
    dec: Vec<(ConvCache, ResCache, Option<AttnCache>, usize)>, // usize = skip channels
    head_gn: GnCache,
    head_silu_in: Array4<f64>,
    head_conv: ConvCache,
}

/// The denoiser: configuration, named parameters, and the assembled layers.
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamSet,
    arch: Architecture,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::build(&config);
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_linear(&mut ps, &arch.temb_fc1, &mut rng);
        init_linear(&mut ps, &arch.temb_fc2, &mut rng);
        init_conv(&mut ps, &arch.stem, &mut rng, ConvInit::Kaiming);
        for level in &arch.enc {
            level.res.init(&mut ps, &mut rng);
            if let Some(a) = &level.attn {
                a.init(&mut ps, &mut rng);
            }
            init_conv(&mut ps, &level.down, &mut rng, ConvInit::Kaiming);
        }
        arch.mid1.init(&mut ps, &mut rng);
        if let Some(a) = &arch.mid_attn {
            a.init(&mut ps, &mut rng);
        }
        arch.mid2.init(&mut ps, &mut rng);
        for level in &arch.dec {
            init_conv(&mut ps, &level.up, &mut rng, ConvInit::Kaiming);
            level.res.init(&mut ps, &mut rng);
            if let Some(a) = &level.attn {
                a.init(&mut ps, &mut rng);
            }
        }
        init_groupnorm(&mut ps, &arch.head_gn);
        init_conv(&mut ps, &arch.head_conv, &mut rng, ConvInit::Zero);
        Ok(Self {
            config,
            params: ps,
            arch,
        })
    }

    /// Rebuilds a denoiser around externally provided parameters
    /// (checkpoint loading). The parameter structure must match the config.
    pub fn from_params(config: DenoiserConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let reference = Denoiser::new(config.clone(), 0)?;
        if reference.params.names() != params.names() {
            return Err(Error::format(
                "parameter names do not match the denoiser configuration",
            ));
        }
        Ok(Self {
            config,
            params,
            arch: reference.arch,
        })
    }

    /// Combined timestep + task embedding row for one stream.
    pub fn embedding_row(&self, t: usize, switch: &TaskSwitch) -> Result<Array1<f64>> {
        let dim = self.config.time_embed_dim;
        Ok(embed_timestep(t, dim)? + embed_switch(switch, dim)?)
    }

    fn validate_input(&self, x: &Array4<f64>, temb: &Array2<f64>, mode: AttnMode) -> Result<()> {
        let (b, c, h, w) = x.dim();
        if c != self.config.input_channels() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input channels", self.config.input_channels()),
                got: format!("{c}"),
            });
        }
        let div = 1usize << self.config.depth_levels;
        if h % div != 0 || w % div != 0 {
            return Err(Error::invalid_argument(format!(
                "spatial size {h}x{w} not divisible by 2^{}",
                self.config.depth_levels
            )));
        }
        if temb.dim() != (b, self.config.time_embed_dim) {
            return Err(Error::ShapeMismatch {
                expected: format!("({b}, {})", self.config.time_embed_dim),
                got: format!("{:?}", temb.dim()),
            });
        }
        if mode == AttnMode::CrossPairs && b % 2 != 0 {
            return Err(Error::invalid_argument(
                "cross-task pairing needs an even batch",
            ));
        }
        Ok(())
    }

    /// Runs the network on a batch. `x` is (B, 3·C_latent, H, W); `temb` is
    /// the per-sample combined embedding (B, time_embed_dim).
    pub fn forward(
        &self,
        x: &Array4<f64>,
        temb: &Array2<f64>,
        mode: AttnMode,
    ) -> Result<(Array4<f64>, Tape)> {
        self.validate_input(x, temb, mode)?;
        let ps = &self.params;
        let arch = &self.arch;
        let (t1, temb_fc1) = arch.temb_fc1.forward(ps, temb);
        let temb_silu_in = t1.clone();
        let a = t1.mapv(silu_scalar);
        let (temb_out, temb_fc2) = arch.temb_fc2.forward(ps, &a);
        let (mut h, stem) = arch.stem.forward(ps, x);
        let mut enc_caches = Vec::new();
        let mut skips = Vec::new();
        for level in &arch.enc {
            let (r, rc) = level.res.forward(ps, &h, &temb_out);
            let (r, ac) = match &level.attn {
                Some(attn) => {
                    let (o, c) = attn.forward(ps, &r, mode);
                    (o, Some(c))
                }
                None => (r, None),
            };
            skips.push(r.clone());
            let (d, dc) = level.down.forward(ps, &r);
            h = d;
            enc_caches.push((rc, ac, dc));
        }
        let (m1, m1c) = arch.mid1.forward(ps, &h, &temb_out);
        let (m1, mac) = match &arch.mid_attn {
            Some(attn) => {
                let (o, c) = attn.forward(ps, &m1, mode);
                (o, Some(c))
            }
            None => (m1, None),
        };
        let (m2, m2c) = arch.mid2.forward(ps, &m1, &temb_out);
        h = m2;
        let mut dec_caches = Vec::new();
        for level in &arch.dec {
            let up = upsample2_forward(&h);
            let (u, uc) = level.up.forward(ps, &up);
            let skip = skips.pop().expect("one skip per decoder level");
            let skip_ch = skip.dim().1;
            let merged = cat_channels(&u, &skip);
            let (r, rc) = level.res.forward(ps, &merged, &temb_out);
            let (r, ac) = match &level.attn {
                Some(attn) => {
                    let (o, c) = attn.forward(ps, &r, mode);
                    (o, Some(c))
                }
                None => (r, None),
            };
            h = r;
            dec_caches.push((uc, rc, ac, skip_ch));
        }
        let (hg, head_gn) = arch.head_gn.forward(ps, &h);
        let (ha, head_silu_in) = silu_forward(&hg);
        let (out, head_conv) = arch.head_conv.forward(ps, &ha);
        Ok((
            out,
            Tape {
                temb_fc1,
                temb_silu_in,
                temb_fc2,
                temb_out,
                stem,
                enc: enc_caches,
                mid: (m1c, mac, m2c),
                dec: dec_caches,
                head_gn,
                head_silu_in,
                head_conv,
            },
        ))
    }

    /// Backpropagates `gy` (same shape as the forward output) through the
    /// tape. Returns parameter gradients and the input gradient.
    pub fn backward(&self, tape: &Tape, gy: &Array4<f64>) -> (ParamSet, Array4<f64>) {
        let ps = &self.params;
        let arch = &self.arch;
        let mut grads = self.params.zeros_like();
        let mut gtemb_out: Array2<f64> = Array2::zeros(tape.temb_out.raw_dim());

        let gha = arch
            .head_conv
            .backward(ps, &tape.head_conv, gy, &mut grads);
        let ghg = silu_backward(&tape.head_silu_in, &gha);
        let mut gh = arch.head_gn.backward(ps, &tape.head_gn, &ghg, &mut grads);

        let mut skip_grads: Vec<Array4<f64>> = Vec::new();
        for (level, (uc, rc, ac, skip_ch)) in arch.dec.iter().zip(tape.dec.iter()).rev() {
            let _ = level;
            let g = gh;
            let g = match (&level.attn, ac) {
                (Some(attn), Some(c)) => attn.backward(ps, c, &g, &mut grads),
                _ => g,
            };
            let (gmerged, gt) = level.res.backward(ps, rc, &g, &mut grads);
            gtemb_out += &gt;
            let (gu, gskip) = split_channels(&gmerged, gmerged.dim().1 - skip_ch);
            skip_grads.push(gskip);
            let gup = level.up.backward(ps, uc, &gu, &mut grads);
            gh = upsample2_backward(&gup);
        }
        // decoder levels were walked innermost-last; skip_grads is ordered
        // from outermost level (dec last entry) to innermost
        skip_grads.reverse(); // now indexed by encoder level

        let (g, gt) = arch.mid2.backward(ps, &tape.mid.2, &gh, &mut grads);
        gtemb_out += &gt;
        let g = match (&arch.mid_attn, &tape.mid.1) {
            (Some(attn), Some(c)) => attn.backward(ps, c, &g, &mut grads),
            _ => g,
        };
        let (g, gt) = arch.mid1.backward(ps, &tape.mid.0, &g, &mut grads);
        gtemb_out += &gt;
        gh = g;

        for (li, (level, (rc, ac, dc))) in
            arch.enc.iter().zip(tape.enc.iter()).enumerate().rev()
        {
            let gdown_in = level.down.backward(ps, dc, &gh, &mut grads);
            let gres_out = &gdown_in + &skip_grads[li];
            let g = match (&level.attn, ac) {
                (Some(attn), Some(c)) => attn.backward(ps, c, &gres_out, &mut grads),
                _ => gres_out,
            };
            let (g, gt) = level.res.backward(ps, rc, &g, &mut grads);
            gtemb_out += &gt;
            gh = g;
        }
        let gx = arch.stem.backward(ps, &tape.stem, &gh, &mut grads);

        let ga = arch
            .temb_fc2
            .backward(ps, &tape.temb_fc2, &gtemb_out, &mut grads);
        let gt1 = {
            let sig = tape.temb_silu_in.mapv(|v| {
                let s = 1.0 / (1.0 + (-v).exp());
                s * (1.0 + v * (1.0 - s))
            });
            &sig * &ga
        };
        let _gtemb_raw = arch
            .temb_fc1
            .backward(ps, &tape.temb_fc1, &gt1, &mut grads);
        (grads, gx)
    }

    /// One-sample denoise: concatenates the three latents, embeds `(t,
    /// switch)`, and returns the predicted v-tensor.
    pub fn denoise(
        &self,
        x_lat: &Latent,
        d_lat: &Latent,
        y_lat: &Latent,
        t: usize,
        switch: &TaskSwitch,
    ) -> Result<Latent> {
        let x = stack_inputs(&[(x_lat, d_lat, y_lat)])?;
        let row = self.embedding_row(t, switch)?;
        let mut temb = Array2::zeros((1, self.config.time_embed_dim));
        temb.row_mut(0).assign(&row);
        let (out, _) = self.forward(&x, &temb, AttnMode::SelfOnly)?;
        Ok(out.index_axis(Axis(0), 0).to_owned())
    }

    /// Joint forward over the paired depth/semantic streams. Cross-task
    /// attention couples the pair when `joint_mode` is set; otherwise both
    /// streams run with plain self-attention.
    pub fn denoise_joint(
        &self,
        x_lat: &Latent,
        d_lat: &Latent,
        y_depth: &Latent,
        y_sem: &Latent,
        t: usize,
    ) -> Result<(Latent, Latent)> {
        let x = stack_inputs(&[(x_lat, d_lat, y_depth), (x_lat, d_lat, y_sem)])?;
        let mut temb = Array2::zeros((2, self.config.time_embed_dim));
        temb.row_mut(0)
            .assign(&self.embedding_row(t, &TaskSwitch::depth())?);
        temb.row_mut(1)
            .assign(&self.embedding_row(t, &TaskSwitch::semantic())?);
        let mode = if self.config.joint_mode {
            AttnMode::CrossPairs
        } else {
            AttnMode::SelfOnly
        };
        let (out, _) = self.forward(&x, &temb, mode)?;
        Ok((
            out.index_axis(Axis(0), 0).to_owned(),
            out.index_axis(Axis(0), 1).to_owned(),
        ))
    }
}

/// Channel-concatenates (x, d, y) triples into a batch tensor.
pub fn stack_inputs(samples: &[(&Latent, &Latent, &Latent)]) -> Result<Array4<f64>> {
    if samples.is_empty() {
        return Err(Error::invalid_argument("empty batch"));
    }
    let (c, h, w) = samples[0].0.dim();
    for (x, d, y) in samples {
        for lat in [x, d, y] {
            if lat.dim() != (c, h, w) {
                return Err(Error::ShapeMismatch {
                    expected: format!("({c}, {h}, {w})"),
                    got: format!("{:?}", lat.dim()),
                });
            }
        }
    }
    let mut out = Array4::zeros((samples.len(), 3 * c, h, w));
    for (bi, (x, d, y)) in samples.iter().enumerate() {
        out.slice_mut(s![bi, 0..c, .., ..]).assign(x);
        out.slice_mut(s![bi, c..2 * c, .., ..]).assign(d);
        out.slice_mut(s![bi, 2 * c..3 * c, .., ..]).assign(y);
    }
    Ok(out)
}

fn cat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    let (bs, ca, h, w) = a.dim();
    let cb = b.dim().1;
    let mut out = Array4::zeros((bs, ca + cb, h, w));
    out.slice_mut(s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(s![.., ca.., .., ..]).assign(b);
    out
}

fn split_channels(x: &Array4<f64>, first: usize) -> (Array4<f64>, Array4<f64>) {
    (
        x.slice(s![.., ..first, .., ..]).to_owned(),
        x.slice(s![.., first.., .., ..]).to_owned(),
    )
}

/// Cross-task attention on two feature streams: each stream queries its own
/// tokens against keys/values from the concatenation `own ⊕ other`. Returns
/// the raw softmax-attention output per stream.
pub fn cross_task_attention(
    z_d: &Latent,
    z_s: &Latent,
    wq: &ArrayView2<'_, f64>,
    wk: &ArrayView2<'_, f64>,
    wv: &ArrayView2<'_, f64>,
) -> Result<(Latent, Latent)> {
    if z_d.dim() != z_s.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", z_d.dim()),
            got: format!("{:?}", z_s.dim()),
        });
    }
    let (c, h, w) = z_d.dim();
    let l = h * w;
    let td = z_d.to_shape((c, l)).unwrap().to_owned();
    let ts = z_s.to_shape((c, l)).unwrap().to_owned();
    let (od, _) = attention_tokens(wq, wk, wv, &td, &cat_cols(&td, &ts));
    let (os, _) = attention_tokens(wq, wk, wv, &ts, &cat_cols(&ts, &td));
    Ok((
        od.into_shape_with_order((c, h, w)).unwrap(),
        os.into_shape_with_order((c, h, w)).unwrap(),
    ))
}
