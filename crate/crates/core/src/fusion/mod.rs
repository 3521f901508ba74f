//! Two-view fusion: channel-swapping cross-view scan (CVSM) followed by the
//! three-branch combination scan with a shared decoder (MVCM).

use std::sync::Arc;

use crate::autodiff::Var;
use crate::blocks::{Direction, DwConv, Init, Linear, Norm, SeGate, Ss2d, SE_REDUCTION};
use crate::error::{Error, Result};
use crate::params::{Graph, Initializer, ParamStore};
use crate::ssm::{scan_selected, select_params, ScanStrategy, SsmLayer, SsmParams};
use crate::tensor::{Real, Tensor};

/// Channel mask: even channels are exchanged between the views.
#[inline]
pub fn swaps(channel: usize) -> bool {
    channel % 2 == 0
}

fn swap_mask(c: usize) -> Arc<[bool]> {
    (0..c).map(swaps).collect()
}

/// `w1[.., c] = v2[.., c]` and `w2[.., c] = v1[.., c]` for even `c`; odd
/// channels stay with their view.
pub fn interleave<T: Real>(v1: &Tensor<T>, v2: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if v1.shape() != v2.shape() {
        return Err(Error::dim("interleave", v1.shape(), v2.shape()));
    }
    let c = v1.last_dim();
    let mut w1 = v1.clone();
    let mut w2 = v2.clone();
    for (r1, r2) in w1.data_mut().chunks_exact_mut(c).zip(w2.data_mut().chunks_exact_mut(c)) {
        for ch in (0..c).filter(|&ch| swaps(ch)) {
            std::mem::swap(&mut r1[ch], &mut r2[ch]);
        }
    }
    Ok((w1, w2))
}

/// Returns every channel to the view it came from. The routing is its own
/// inverse, so this is [`interleave`] applied to the scanned streams.
pub fn deinterleave_merge<T: Real>(s1: &Tensor<T>, s2: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    interleave(s1, s2).map_err(|e| match e {
        Error::Dimension { lhs, rhs, .. } => Error::Dimension {
            op: "deinterleave_merge",
            lhs,
            rhs,
        },
        other => other,
    })
}

/// [`interleave`] recorded on a graph.
pub fn interleave_vars<T: Real>(g: &mut Graph<'_, T>, v1: Var, v2: Var) -> Result<(Var, Var)> {
    let mask = swap_mask(*g.shape(v1).last().unwrap_or(&0));
    let w1 = g.channel_select(v1, v2, mask.clone())?;
    let w2 = g.channel_select(v2, v1, mask)?;
    Ok((w1, w2))
}

/// Per-view `ln → linear → dwconv → silu` input stack.
#[derive(Debug, Clone, PartialEq)]
pub struct InputStack {
    pub norm: Norm,
    pub proj: Linear,
    pub conv: DwConv,
}

impl InputStack {
    fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize, init: &mut Initializer) -> Self {
        InputStack {
            norm: Norm::new(store, &format!("{prefix}.norm"), c),
            proj: Linear::new(store, &format!("{prefix}.in_proj"), c, c, true, Init::Normal, init),
            conv: DwConv::new(store, &format!("{prefix}.conv"), c, init),
        }
    }

    fn num_params(&self) -> usize {
        self.norm.num_params() + self.proj.num_params() + self.conv.num_params()
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = self.norm.forward(g, x)?;
        let u = self.proj.forward(g, n)?;
        let u = self.conv.forward(g, u)?;
        Ok(g.silu(u))
    }

    fn flops(&self, rows: usize) -> u64 {
        self.proj.flops(rows) + self.conv.flops(rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvsmBranch {
    pub input: InputStack,
    pub ss2d: Ss2d,
    pub out_proj: Linear,
}

/// Ablation switches of the cross-view swapping block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CvsmSwitches {
    pub interleave: bool,
    /// When off, the cross-view gates are fixed at 1.
    pub cross_gate: bool,
}

impl Default for CvsmSwitches {
    fn default() -> Self {
        CvsmSwitches {
            interleave: true,
            cross_gate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvsmBlock {
    pub views: [CvsmBranch; 2],
    pub se: SeGate,
    pub switches: CvsmSwitches,
    /// Both views use one parameter set.
    pub tied: bool,
}

impl CvsmBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        state: usize,
        tied: bool,
        init: &mut Initializer,
    ) -> Result<Self> {
        let mut branch = |name: &str| CvsmBranch {
            input: InputStack::new(store, &format!("{prefix}.{name}"), channels, init),
            ss2d: Ss2d::new(store, &format!("{prefix}.{name}.ss2d"), channels, state, init),
            out_proj: Linear::new(
                store,
                &format!("{prefix}.{name}.out_proj"),
                channels,
                channels,
                true,
                Init::Zero,
                init,
            ),
        };
        let views = if tied {
            let b = branch("shared");
            [b.clone(), b]
        } else {
            [branch("v1"), branch("v2")]
        };
        let se = SeGate::new(
            store,
            &format!("{prefix}.se"),
            channels,
            SE_REDUCTION.min(channels),
            init,
        )?;
        Ok(CvsmBlock {
            views,
            se,
            switches: CvsmSwitches::default(),
            tied,
        })
    }

    pub fn num_params(&self) -> usize {
        let branch = |b: &CvsmBranch| b.input.num_params() + b.ss2d.num_params() + b.out_proj.num_params();
        let views = if self.tied {
            branch(&self.views[0])
        } else {
            self.views.iter().map(branch).sum()
        };
        views + self.se.num_params()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x1: Var, x2: Var) -> Result<(Var, Var)> {
        if g.shape(x1) != g.shape(x2) {
            return Err(Error::dim("cvsm", g.shape(x1), g.shape(x2)));
        }
        let u1 = self.views[0].input.forward(g, x1)?;
        let u2 = self.views[1].input.forward(g, x2)?;
        let (w1, w2) = if self.switches.interleave {
            interleave_vars(g, u1, u2)?
        } else {
            (u1, u2)
        };
        let s1 = self.views[0].ss2d.forward(g, w1).map_err(|e| e.tagged("cvsm/v1"))?;
        let s2 = self.views[1].ss2d.forward(g, w2).map_err(|e| e.tagged("cvsm/v2"))?;
        let (z1, z2) = if self.switches.interleave {
            interleave_vars(g, s1, s2)?
        } else {
            (s1, s2)
        };
        let (o1, o2) = if self.switches.cross_gate {
            let g1 = self.se.forward(g, z1)?;
            let g2 = self.se.forward(g, z2)?;
            (g.scale_channels(z1, g2)?, g.scale_channels(z2, g1)?)
        } else {
            (z1, z2)
        };
        let p1 = self.views[0].out_proj.forward(g, o1)?;
        let p2 = self.views[1].out_proj.forward(g, o2)?;
        Ok((g.add(x1, p1)?, g.add(x2, p2)?))
    }

    pub fn flops(&self, batch: usize, h: usize, w: usize) -> u64 {
        let rows = batch * h * w;
        let per_view = |b: &CvsmBranch| b.input.flops(rows) + b.ss2d.flops(batch, h * w) + b.out_proj.flops(rows);
        self.views.iter().map(per_view).sum::<u64>() + 2 * self.se.flops(batch)
    }
}

/// One MVCM branch: input stack and a selective SSM per scan direction.
#[derive(Debug, Clone, PartialEq)]
pub struct MvcmBranch {
    pub input: InputStack,
    pub dirs: Vec<SsmLayer>,
}

impl MvcmBranch {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        state: usize,
        decoder: bool,
        init: &mut Initializer,
    ) -> Self {
        MvcmBranch {
            input: InputStack::new(store, prefix, channels, init),
            dirs: Direction::ALL
                .iter()
                .map(|d| SsmLayer::new(store, &format!("{prefix}.{}", d.name()), channels, state, decoder, init))
                .collect(),
        }
    }

    fn num_params(&self) -> usize {
        self.input.num_params() + self.dirs.iter().map(SsmLayer::num_params).sum::<usize>()
    }
}

/// Branch indices of [`MvcmBlock::branches`].
pub const V1: usize = 0;
pub const V2: usize = 1;
pub const FUSE: usize = 2;
const BRANCH_NAMES: [&str; 3] = ["v1", "v2", "fuse"];

#[derive(Debug, Clone, PartialEq)]
pub struct MvcmBlock {
    /// View 1, view 2, fused. Only the fused branch owns output projections.
    pub branches: [MvcmBranch; 3],
    pub se_norm: Norm,
    pub se: SeGate,
    pub out_proj: Linear,
    pub tied: bool,
}

impl MvcmBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        state: usize,
        tied: bool,
        init: &mut Initializer,
    ) -> Result<Self> {
        let p = |s: &str| format!("{prefix}.{s}");
        let (v1, v2) = if tied {
            let b = MvcmBranch::new(store, &p("views"), channels, state, false, init);
            (b.clone(), b)
        } else {
            (
                MvcmBranch::new(store, &p("v1"), channels, state, false, init),
                MvcmBranch::new(store, &p("v2"), channels, state, false, init),
            )
        };
        let fuse = MvcmBranch::new(store, &p("fuse"), channels, state, true, init);
        Ok(MvcmBlock {
            branches: [v1, v2, fuse],
            se_norm: Norm::new(store, &p("se_norm"), channels),
            se: SeGate::new(store, &p("se"), channels, SE_REDUCTION.min(channels), init)?,
            out_proj: Linear::new(store, &p("out_proj"), channels, channels, true, Init::Zero, init),
            tied,
        })
    }

    pub fn num_params(&self) -> usize {
        let views = if self.tied { 1 } else { 2 } * self.branches[V1].num_params();
        views
            + self.branches[FUSE].num_params()
            + self.se_norm.num_params()
            + self.se.num_params()
            + self.out_proj.num_params()
    }

    /// The three per-branch outputs `[B, H, W, C]` of the four-direction
    /// combination scan, before gating.
    pub fn scan_branches<T: Real>(&self, g: &mut Graph<'_, T>, x1: Var, x2: Var) -> Result<[Var; 3]> {
        if g.shape(x1) != g.shape(x2) {
            return Err(Error::dim("mvcm", g.shape(x1), g.shape(x2)));
        }
        let shape = g.shape(x1).to_vec();
        let (_, h, w, _) = crate::tensor::dims4(&shape, "mvcm")?;
        let xf = g.add(x1, x2)?;
        let xs = [x1, x2, xf];
        let mut u = [x1; 3];
        for b in 0..3 {
            u[b] = self.branches[b].input.forward(g, xs[b])?;
        }
        let mut acc: [Option<Var>; 3] = [None; 3];
        for (di, dir) in Direction::ALL.iter().enumerate() {
            let order: Arc<[usize]> = Arc::from(dir.order(h, w));
            let inverse: Arc<[usize]> = Arc::from(dir.inverse(h, w));
            let seqs = [
                g.gather(u[V1], order.clone())?,
                g.gather(u[V2], order.clone())?,
                g.gather(u[FUSE], order)?,
            ];
            let c_fuse = self.branches[FUSE].dirs[di].project_c(g, seqs[FUSE])?;
            for b in 0..3 {
                let y = self.branches[b].dirs[di]
                    .scan_with_c(g, seqs[b], c_fuse)
                    .map_err(|e| e.tagged(&format!("mvcm/{}/{}", BRANCH_NAMES[b], dir.name())))?;
                let y = g.gather(y, inverse.clone())?;
                acc[b] = Some(match acc[b] {
                    None => y,
                    Some(a) => g.add(a, y)?,
                });
            }
        }
        let mut out = [x1; 3];
        for b in 0..3 {
            out[b] = g.reshape(acc[b].expect("four directions"), shape.clone())?;
        }
        Ok(out)
    }

    /// `x_f + W_out(y₁ ⊙ g + y₂ ⊙ g + y_f)` with `g = se(ln(x_f))`,
    /// `x_f = x₁ + x₂`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x1: Var, x2: Var) -> Result<Var> {
        let [y1, y2, yf] = self.scan_branches(g, x1, x2)?;
        let xf = g.add(x1, x2)?;
        let n = self.se_norm.forward(g, xf)?;
        let gate = self.se.forward(g, n)?;
        let a = g.scale_channels(y1, gate)?;
        let b = g.scale_channels(y2, gate)?;
        let s = g.add(a, b)?;
        let s = g.add(s, yf)?;
        let o = self.out_proj.forward(g, s)?;
        g.add(xf, o)
    }

    pub fn flops(&self, batch: usize, h: usize, w: usize) -> u64 {
        let rows = batch * h * w;
        let c = self.out_proj.fan_in;
        let state = self.branches[FUSE].dirs[0].state;
        let inputs: u64 = self.branches.iter().map(|b| b.input.flops(rows)).sum();
        let scans = 4
            * (crate::blocks::scan_flops(batch, h * w, c, state, true)
                + 2 * crate::blocks::scan_flops(batch, h * w, c, state, false));
        inputs + scans + self.se.flops(batch) + self.out_proj.flops(rows)
    }
}

/// Pure-tensor parameters of the three-branch combination scan.
#[derive(Debug, Clone, PartialEq)]
pub struct MvcmParams<T> {
    pub v1: SsmParams<T>,
    pub v2: SsmParams<T>,
    /// Its `w_c` is the shared decoder; the view branches' `w_c` are unused.
    pub fuse: SsmParams<T>,
}

/// Three independent recurrences decoded by the fused branch's `C_t`:
/// `y_b,t = ⟨C_fuse,t, h_b,t⟩ + D_b ⊙ x_b,t`.
pub fn mvcm_scan<T: Real>(
    x_v1: &Tensor<T>,
    x_v2: &Tensor<T>,
    x_fuse: &Tensor<T>,
    p: &MvcmParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if x_v1.shape() != x_v2.shape() || x_v1.shape() != x_fuse.shape() {
        return Err(Error::dim("mvcm_scan", x_v1.shape(), x_fuse.shape()));
    }
    let fused_sel = select_params(x_fuse, &p.fuse)?;
    let run = |x: &Tensor<T>, sp: &SsmParams<T>, tag: &str| -> Result<Tensor<T>> {
        let mut sel = select_params(x, sp)?;
        sel.c = fused_sel.c.clone();
        scan_selected(x, &sp.a(), &sp.d, &sel, ScanStrategy::Sequential).map_err(|e| e.tagged(tag))
    };
    Ok((
        run(x_v1, &p.v1, "mvcm/v1")?,
        run(x_v2, &p.v2, "mvcm/v2")?,
        run(x_fuse, &p.fuse, "mvcm/fuse")?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_channel_routing() {
        let v1 = Tensor::new([1, 1, 4], vec![10.0f32, 11.0, 12.0, 13.0]).unwrap();
        let v2 = Tensor::new([1, 1, 4], vec![20.0f32, 21.0, 22.0, 23.0]).unwrap();
        let (w1, w2) = interleave(&v1, &v2).unwrap();
        assert_eq!(w1.data(), &[20.0, 11.0, 22.0, 13.0]);
        assert_eq!(w2.data(), &[10.0, 21.0, 12.0, 23.0]);
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::<f32>::zeros([1, 2, 4]);
        let b = Tensor::<f32>::zeros([1, 2, 3]);
        assert!(matches!(
            interleave(&a, &b),
            Err(Error::Dimension { op: "interleave", .. })
        ));
        assert!(matches!(
            deinterleave_merge(&a, &b),
            Err(Error::Dimension {
                op: "deinterleave_merge",
                ..
            })
        ));
    }
}
