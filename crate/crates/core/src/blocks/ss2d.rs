use std::sync::Arc;

use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{Graph, Initializer, ParamStore};
use crate::ssm::SsmLayer;
use crate::tensor::Real;

/// Traversal order of a `H×W` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    RowForward,
    RowBackward,
    ColForward,
    ColBackward,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::RowForward,
        Direction::RowBackward,
        Direction::ColForward,
        Direction::ColBackward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::RowForward => "row_fwd",
            Direction::RowBackward => "row_bwd",
            Direction::ColForward => "col_fwd",
            Direction::ColBackward => "col_bwd",
        }
    }

    /// `order[k]` is the row-major grid position visited at step `k`.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let col_major = (0..h * w).map(|k| (k % h) * w + k / h);
        match self {
            Direction::RowForward => (0..h * w).collect(),
            Direction::RowBackward => (0..h * w).rev().collect(),
            Direction::ColForward => col_major.collect(),
            Direction::ColBackward => col_major.rev().collect(),
        }
    }

    /// The permutation undoing [`Direction::order`].
    pub fn inverse(self, h: usize, w: usize) -> Vec<usize> {
        invert(&self.order(h, w))
    }
}

pub(crate) fn invert(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (k, &p) in order.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// Four directional selective scans over a feature grid, summed.
#[derive(Debug, Clone, PartialEq)]
pub struct Ss2d {
    pub dirs: Vec<SsmLayer>,
    pub channels: usize,
    pub state: usize,
}

impl Ss2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        state: usize,
        init: &mut Initializer,
    ) -> Self {
        let dirs = Direction::ALL
            .iter()
            .map(|d| SsmLayer::new(store, &format!("{prefix}.{}", d.name()), channels, state, true, init))
            .collect();
        Ss2d { dirs, channels, state }
    }

    pub fn num_params(&self) -> usize {
        self.dirs.iter().map(SsmLayer::num_params).sum()
    }

    /// One direction: reorder, scan, restore grid order. Returns `[B, HW, C]`.
    pub fn scan_direction<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, dir: Direction) -> Result<Var> {
        let (_, h, w, _) = crate::tensor::dims4(g.shape(x), "ss2d")?;
        let layer = &self.dirs[dir as usize];
        let seq = g.gather(x, Arc::from(dir.order(h, w)))?;
        let y = layer
            .forward(g, seq)
            .map_err(|e| e.tagged(&format!("ss2d/{}", dir.name())))?;
        g.gather(y, Arc::from(dir.inverse(h, w)))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let mut acc = self.scan_direction(g, x, Direction::RowForward)?;
        for dir in &Direction::ALL[1..] {
            let y = self.scan_direction(g, x, *dir)?;
            acc = g.add(acc, y)?;
        }
        g.reshape(acc, shape)
    }

    pub fn flops(&self, batch: usize, len: usize) -> u64 {
        scan_flops(batch, len, self.channels, self.state, true) * 4
    }
}

/// One direction of a selective SSM: input-dependent projections
/// (`2MKP` each) plus `9·L·N·C` for discretize, recurrence and decode.
pub fn scan_flops(batch: usize, len: usize, channels: usize, state: usize, with_c: bool) -> u64 {
    let rows = (batch * len) as u64;
    let (c, n) = (channels as u64, state as u64);
    let proj = 2 * rows * c * (n + c) + if with_c { 2 * rows * c * n } else { 0 };
    proj + 9 * rows * n * c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orders_are_permutations() {
        for (h, w) in [(1, 1), (2, 3), (4, 4), (3, 1)] {
            for d in Direction::ALL {
                let o = d.order(h, w);
                let inv = d.inverse(h, w);
                let mut seen = o.clone();
                seen.sort_unstable();
                assert_eq!(seen, (0..h * w).collect::<Vec<_>>());
                assert!((0..h * w).all(|p| o[inv[p]] == p));
            }
        }
    }

    #[test]
    fn column_order_on_2x3() {
        // grid positions 0 1 2 / 3 4 5
        assert_eq!(Direction::ColForward.order(2, 3), vec![0, 3, 1, 4, 2, 5]);
        assert_eq!(Direction::ColBackward.order(2, 3), vec![5, 2, 4, 1, 3, 0]);
    }
}
