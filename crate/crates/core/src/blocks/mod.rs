//! Vision building blocks recorded on a [`Graph`].
//!
//! Feature maps are channels-last `[B, H, W, C]`.

mod ss2d;

pub use ss2d::{scan_flops, Direction, Ss2d};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Graph, Initializer, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-5;
pub const PATCH: usize = 4;
pub const DWCONV_K: usize = 3;

/// How a freshly registered weight is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Truncated normal, std 0.02.
    Normal,
    /// All zeros (output paths).
    Zero,
}

fn dims<T: Real>(g: &Graph<'_, T>, x: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    crate::tensor::dims4(g.shape(x), op)
}

/// `y = x W + b` over the last axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        kind: Init,
        init: &mut Initializer,
    ) -> Self {
        let w = match kind {
            Init::Normal => init.trunc_normal(&[fan_in, fan_out], 0.02),
            Init::Zero => Tensor::zeros([fan_in, fan_out]),
        };
        Linear {
            w: store.add(format!("{prefix}.w"), w),
            b: bias.then(|| store.add(format!("{prefix}.b"), Tensor::zeros([fan_out]))),
            fan_in,
            fan_out,
        }
    }

    pub fn num_params(&self) -> usize {
        self.fan_in * self.fan_out + if self.b.is_some() { self.fan_out } else { 0 }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    /// Multiply-adds times two for `rows` input rows.
    pub fn flops(&self, rows: usize) -> u64 {
        2 * (rows * self.fan_in * self.fan_out) as u64
    }
}

/// Layer normalisation over the channel axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Self {
        Norm {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones([dim])),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros([dim])),
            dim,
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layernorm(x, gamma, beta, T::of(LN_EPS))
    }
}

/// Depthwise 3×3 convolution with bias, same zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct DwConv {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub channels: usize,
}

impl DwConv {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize, init: &mut Initializer) -> Self {
        // uniform with bound 1/sqrt(fan_in), fan_in = k² for a depthwise filter
        let bound = 1.0 / DWCONV_K as f64;
        DwConv {
            kernels: store.add(
                format!("{prefix}.kernels"),
                init.uniform(&[channels, DWCONV_K, DWCONV_K], -bound, bound),
            ),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros([channels])),
            channels,
        }
    }

    pub fn num_params(&self) -> usize {
        self.channels * (DWCONV_K * DWCONV_K + 1)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let k = g.param(self.kernels);
        let y = g.dwconv2d(x, k)?;
        let b = g.param(self.bias);
        g.add_bias(y, b)
    }

    pub fn flops(&self, positions: usize) -> u64 {
        2 * (DWCONV_K * DWCONV_K * positions * self.channels) as u64
    }
}

/// Non-overlapping 4×4 patches projected to `C1` channels, then layernorm.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub norm: Norm,
    pub in_channels: usize,
}

impl PatchEmbed {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        out: usize,
        init: &mut Initializer,
    ) -> Self {
        PatchEmbed {
            proj: Linear::new(
                store,
                &format!("{prefix}.proj"),
                PATCH * PATCH * in_channels,
                out,
                true,
                Init::Normal,
                init,
            ),
            norm: Norm::new(store, &format!("{prefix}.norm"), out),
            in_channels,
        }
    }

    pub fn num_params(&self) -> usize {
        self.proj.num_params() + self.norm.num_params()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, img: Var) -> Result<Var> {
        let (_, h, w, c) = dims(g, img, "patch_embed")?;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::contract(
                "patch_embed",
                format!("image extents must be divisible by 32, got {h}x{w}"),
            ));
        }
        if c != self.in_channels {
            return Err(Error::dim("patch_embed", g.shape(img), &[self.in_channels]));
        }
        let p = g.space_to_depth(img, PATCH)?;
        let y = self.proj.forward(g, p)?;
        self.norm.forward(g, y)
    }
}

/// 2×2 patch merge (`4C` channels), linear to `2C`, layernorm.
#[derive(Debug, Clone, PartialEq)]
pub struct Downsample {
    pub proj: Linear,
    pub norm: Norm,
}

impl Downsample {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize, init: &mut Initializer) -> Self {
        Downsample {
            proj: Linear::new(
                store,
                &format!("{prefix}.proj"),
                4 * channels,
                2 * channels,
                true,
                Init::Normal,
                init,
            ),
            norm: Norm::new(store, &format!("{prefix}.norm"), 2 * channels),
        }
    }

    pub fn num_params(&self) -> usize {
        self.proj.num_params() + self.norm.num_params()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (_, h, w, _) = dims(g, x, "downsample")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::contract(
                "downsample",
                format!("extents must be even, got {h}x{w}"),
            ));
        }
        let m = g.space_to_depth(x, 2)?;
        let y = self.proj.forward(g, m)?;
        self.norm.forward(g, y)
    }
}

/// Squeeze-and-excitation: `sigmoid(W₂ relu(W₁ pool(x)))`, one gate per
/// channel in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeGate {
    pub squeeze: Linear,
    pub excite: Linear,
    pub channels: usize,
}

pub const SE_REDUCTION: usize = 4;

impl SeGate {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        reduction: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(
                "se_reduction",
                format!("reduction {reduction} must divide channel count {channels}"),
            ));
        }
        let hidden = channels / reduction;
        Ok(SeGate {
            squeeze: Linear::new(
                store,
                &format!("{prefix}.squeeze"),
                channels,
                hidden,
                true,
                Init::Normal,
                init,
            ),
            excite: Linear::new(
                store,
                &format!("{prefix}.excite"),
                hidden,
                channels,
                true,
                Init::Normal,
                init,
            ),
            channels,
        })
    }

    pub fn num_params(&self) -> usize {
        self.squeeze.num_params() + self.excite.num_params()
    }

    /// Gate `[B, C]` for `x: [B, H, W, C]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x)?;
        let s = self.squeeze.forward(g, pooled)?;
        let s = g.relu(s);
        let e = self.excite.forward(g, s)?;
        Ok(g.sigmoid(e))
    }

    pub fn flops(&self, batch: usize) -> u64 {
        self.squeeze.flops(batch) + self.excite.flops(batch)
    }
}

/// The encoder block: `x + W_out(ss2d(silu(dwconv(W_in ln x))) ⊙ silu(W_g ln x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct VssmBlock {
    pub norm: Norm,
    pub in_proj: Linear,
    pub conv: DwConv,
    pub gate_proj: Linear,
    pub ss2d: Ss2d,
    pub out_proj: Linear,
}

impl VssmBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        state: usize,
        init: &mut Initializer,
    ) -> Self {
        let p = |s: &str| format!("{prefix}.{s}");
        VssmBlock {
            norm: Norm::new(store, &p("norm"), channels),
            in_proj: Linear::new(store, &p("in_proj"), channels, channels, true, Init::Normal, init),
            conv: DwConv::new(store, &p("conv"), channels, init),
            gate_proj: Linear::new(store, &p("gate_proj"), channels, channels, true, Init::Normal, init),
            ss2d: Ss2d::new(store, &p("ss2d"), channels, state, init),
            out_proj: Linear::new(store, &p("out_proj"), channels, channels, true, Init::Zero, init),
        }
    }

    pub fn num_params(&self) -> usize {
        self.norm.num_params()
            + self.in_proj.num_params()
            + self.conv.num_params()
            + self.gate_proj.num_params()
            + self.ss2d.num_params()
            + self.out_proj.num_params()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = self.norm.forward(g, x)?;
        let u = self.in_proj.forward(g, n)?;
        let u = self.conv.forward(g, u)?;
        let u = g.silu(u);
        let s = self.ss2d.forward(g, u)?;
        let gate = self.gate_proj.forward(g, n)?;
        let gate = g.silu(gate);
        let m = g.mul(s, gate)?;
        let o = self.out_proj.forward(g, m)?;
        g.add(x, o)
    }

    pub fn flops(&self, batch: usize, h: usize, w: usize) -> u64 {
        let rows = batch * h * w;
        self.in_proj.flops(rows)
            + self.conv.flops(rows)
            + self.gate_proj.flops(rows)
            + self.ss2d.flops(batch, h * w)
            + self.out_proj.flops(rows)
    }
}

/// Channel widths and block counts of the four encoder stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageDims {
    pub widths: [usize; 4],
    pub depths: [usize; 4],
}

impl StageDims {
    /// Widths double per stage starting at `c1`.
    pub fn doubling(c1: usize, depths: [usize; 4]) -> Self {
        StageDims {
            widths: [c1, 2 * c1, 4 * c1, 8 * c1],
            depths,
        }
    }

    /// `(spatial extent, channels)` of stage `k ∈ 1..=4` for a square image.
    pub fn stage_shape(&self, img_size: usize, k: usize) -> (usize, usize) {
        assert!((1..=4).contains(&k), "stages are numbered 1..=4");
        (img_size >> (k + 1), self.widths[k - 1])
    }
}

/// Patch embedding followed by four stages of VSSM blocks with three
/// downsamplings in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub dims: StageDims,
    pub embed: PatchEmbed,
    pub stages: Vec<Vec<VssmBlock>>,
    pub downs: Vec<Downsample>,
}

impl Encoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        dims: StageDims,
        state: usize,
        init: &mut Initializer,
    ) -> Self {
        let embed = PatchEmbed::new(store, &format!("{prefix}.embed"), in_channels, dims.widths[0], init);
        let mut stages = Vec::new();
        let mut downs = Vec::new();
        for s in 0..4 {
            if s > 0 {
                downs.push(Downsample::new(
                    store,
                    &format!("{prefix}.down{s}"),
                    dims.widths[s - 1],
                    init,
                ));
            }
            stages.push(
                (0..dims.depths[s])
                    .map(|i| {
                        VssmBlock::new(
                            store,
                            &format!("{prefix}.stage{}.{i}", s + 1),
                            dims.widths[s],
                            state,
                            init,
                        )
                    })
                    .collect(),
            );
        }
        Encoder {
            dims,
            embed,
            stages,
            downs,
        }
    }

    pub fn num_params(&self) -> usize {
        self.embed.num_params()
            + self.downs.iter().map(Downsample::num_params).sum::<usize>()
            + self.stages.iter().flatten().map(VssmBlock::num_params).sum::<usize>()
    }

    /// Outputs of all four stages.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, img: Var) -> Result<Vec<Var>> {
        let mut x = self.embed.forward(g, img)?;
        let mut outs = Vec::with_capacity(4);
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                x = self.downs[s - 1].forward(g, x)?;
            }
            for b in blocks {
                x = b.forward(g, x)?;
            }
            outs.push(x);
        }
        Ok(outs)
    }

    pub fn flops(&self, batch: usize, img_size: usize) -> u64 {
        let mut total = self.embed.proj.flops(batch * (img_size / PATCH).pow(2));
        for (s, blocks) in self.stages.iter().enumerate() {
            let (side, _) = self.dims.stage_shape(img_size, s + 1);
            if s > 0 {
                total += self.downs[s - 1].proj.flops(batch * side * side);
            }
            total += blocks.iter().map(|b| b.flops(batch, side, side)).sum::<u64>();
        }
        total
    }
}
