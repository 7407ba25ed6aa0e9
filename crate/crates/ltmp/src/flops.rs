//! The analytic FLOPs model and the budget-regularised loss.
//!
//! FLOPs are counted as multiply-adds throughout. The per-module costs are
//!
//! ```text
//! phi_MSA(n, d) = 4 n d^2 + 2 n^2 d        (QKV + output projections,
//!                                            logits and weighted values)
//! phi_MLP(n, d) = 8 n d^2                   (two d <-> 4d linear layers)
//! phi_BLK(n, d) = 12 n d^2 + 2 n^2 d
//! ```
//!
//! with `n` real-valued so fractional kept-token counts `m_bar * n` plug in
//! directly. The reduction factor splits each block into its attention part,
//! which runs on the tokens entering the block, and its MLP part, which runs
//! on the tokens surviving that block's reduction:
//!
//! ```text
//! r_FLOPs = (1/L) * sum_l (2 m^{l-1} n d^2 + (m^{l-1} n)^2 d + 4 m^l n d^2)
//!                         / (6 n d^2 + n^2 d)
//! ```
//!
//! where `m^0 = 1`. Patch embedding and classification head are excluded;
//! [`r_flops_exact`] keeps them and backs the claim that dropping them
//! changes the factor by under 2% at common shapes.

use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;
use serde::Serialize;

/// `(phi_MSA, phi_MLP, phi_BLK)` for a (possibly fractional) token count.
pub fn phi_block(n_tokens: f64, d: usize) -> (f64, f64, f64) {
    assert!(n_tokens >= 0.0, "negative token count");
    let d = d as f64;
    let msa = 4.0 * n_tokens * d * d + 2.0 * n_tokens * n_tokens * d;
    let mlp = 8.0 * n_tokens * d * d;
    (msa, mlp, msa + mlp)
}

/// Patch-embedding cost: one linear projection per patch from `p*p*c`
/// raw values to `d` channels.
pub fn phi_patch_embed(n_patches: usize, patch: usize, channels: usize, d: usize) -> f64 {
    (n_patches * patch * patch * channels * d) as f64
}

/// Classification-head cost: a single linear layer on the CLS token.
pub fn phi_head(d: usize, classes: usize) -> f64 {
    (d * classes) as f64
}

/// The simplified reduction factor over per-block kept fractions
/// (`mbars[l]` is the mask mean after block `l+1`'s reduction; the implicit
/// `m^0` is 1). `n` is the unreduced token count including CLS.
pub fn r_flops_value(mbars: &[f64], n: usize, d: usize) -> f64 {
    let l = mbars.len();
    assert!(l > 0, "at least one block");
    let nf = n as f64;
    let df = d as f64;
    let den = 6.0 * nf * df * df + nf * nf * df;
    let mut acc = 0.0;
    let mut prev = 1.0;
    for &m in mbars {
        let num = 2.0 * prev * nf * df * df + (prev * nf) * (prev * nf) * df
            + 4.0 * m * nf * df * df;
        acc += num / den;
        prev = m;
    }
    // Divide the accumulated sum rather than scaling each term by 1/L so the
    // all-ones case is exactly 1 for every L.
    acc / l as f64
}

/// The unsimplified factor including patch embedding and head, both
/// independent of the masks (the head reads only CLS).
pub fn r_flops_exact(mbars: &[f64], n: usize, d: usize, pe: f64, head: f64) -> f64 {
    let l = mbars.len();
    let nf = n as f64;
    let (_, _, blk) = phi_block(nf, d);
    let vit = pe + l as f64 * blk + head;
    let mut num = pe + head;
    let mut prev = 1.0;
    for &m in mbars {
        let (msa, _, _) = phi_block(prev * nf, d);
        let (_, mlp, _) = phi_block(m * nf, d);
        num += msa + mlp;
        prev = m;
    }
    num / vit
}

/// Differentiable Eq.-13 factor over per-block mask-mean nodes (each a
/// one-element tensor). Gradients flow into every `mbar` node, and through
/// them into the thresholds.
pub fn r_flops_node(
    tape: &mut Tape,
    mbar_nodes: &[NodeId],
    n: usize,
    d: usize,
) -> Result<NodeId, TapeError> {
    let l = mbar_nodes.len();
    assert!(l > 0, "at least one block");
    let nf = n as f64;
    let df = d as f64;
    let den = 6.0 * nf * df * df + nf * nf * df;
    let one = tape.input(Tensor::scalar(1.0));
    let den_node = tape.input(Tensor::scalar(den));
    let mut acc: Option<NodeId> = None;
    let mut prev = one;
    for &m in mbar_nodes {
        let lin_prev = tape.scale(prev, 2.0 * nf * df * df);
        let sq = tape.mul(prev, prev)?;
        let quad_prev = tape.scale(sq, nf * nf * df);
        let lin_cur = tape.scale(m, 4.0 * nf * df * df);
        let s1 = tape.add(lin_prev, quad_prev)?;
        let num = tape.add(s1, lin_cur)?;
        // True division (not a reciprocal multiply) so an all-ones block
        // contributes exactly 1, mirroring `r_flops_value`.
        let term = tape.div_scalar(num, den_node)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
        prev = m;
    }
    let total = acc.expect("nonempty blocks");
    let l_node = tape.input(Tensor::scalar(l as f64));
    tape.div_scalar(total, l_node)
}

/// `(r_target - r)^2` as a value.
pub fn reg_loss(r: f64, r_target: f64) -> f64 {
    (r_target - r) * (r_target - r)
}

/// `(r_target - r)^2` on the tape.
pub fn reg_loss_node(tape: &mut Tape, r: NodeId, r_target: f64) -> Result<NodeId, TapeError> {
    let neg = tape.scale(r, -1.0);
    let diff = tape.add_const(neg, r_target);
    tape.mul(diff, diff)
}

/// `ce + lambda * reg` as a value.
pub fn total_loss(ce: f64, reg: f64, lambda: f64) -> f64 {
    ce + lambda * reg
}

/// `ce + lambda * reg` on the tape.
pub fn total_loss_node(
    tape: &mut Tape,
    ce: NodeId,
    reg: NodeId,
    lambda: f64,
) -> Result<NodeId, TapeError> {
    let weighted = tape.scale(reg, lambda);
    tape.add(ce, weighted)
}

/// Loss hyperparameters for threshold training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossConfig {
    pub r_target: f64,
    pub lambda: f64,
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            r_target: 1.0,
            lambda: 10.0,
            tau: crate::reduction::DEFAULT_TAU,
        }
    }
}

impl LossConfig {
    pub fn is_valid(&self) -> bool {
        self.r_target > 0.0 && self.r_target <= 1.0 && self.lambda >= 0.0 && self.tau > 0.0
    }
}

/// Per-block cost snapshot at the current mask means.
#[derive(Clone, Debug, Serialize)]
pub struct BlockFlops {
    pub block: usize,
    /// Mask mean after this block's reduction.
    pub mbar: f64,
    /// Attention cost at the token count entering the block.
    pub phi_msa: f64,
    /// MLP cost at the token count surviving the block.
    pub phi_mlp: f64,
    pub phi_blk: f64,
}

/// FLOPs accounting for one forward (or an averaged split).
#[derive(Clone, Debug, Serialize)]
pub struct FlopsReport {
    pub n_tokens: usize,
    pub embed_dim: usize,
    pub blocks: Vec<BlockFlops>,
    pub r_flops: f64,
    /// Absolute multiply-adds over all blocks at the current masks.
    pub total_flops: f64,
    /// Absolute multiply-adds of the unreduced model's blocks.
    pub baseline_flops: f64,
}

impl FlopsReport {
    /// Builds the report from per-block mask means.
    pub fn from_mask_means(mbars: &[f64], n: usize, d: usize) -> Self {
        let nf = n as f64;
        let (_, _, blk) = phi_block(nf, d);
        let baseline = mbars.len() as f64 * blk;
        let mut blocks = Vec::with_capacity(mbars.len());
        let mut total = 0.0;
        let mut prev = 1.0;
        for (i, &m) in mbars.iter().enumerate() {
            let (msa, _, _) = phi_block(prev * nf, d);
            let (_, mlp, _) = phi_block(m * nf, d);
            blocks.push(BlockFlops {
                block: i + 1,
                mbar: m,
                phi_msa: msa,
                phi_mlp: mlp,
                phi_blk: msa + mlp,
            });
            total += msa + mlp;
            prev = m;
        }
        FlopsReport {
            n_tokens: n,
            embed_dim: d,
            blocks,
            r_flops: r_flops_value(mbars, n, d),
            total_flops: total,
            baseline_flops: baseline,
        }
    }
}
