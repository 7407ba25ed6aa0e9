//! A small vision transformer with threshold-gated token merging and pruning.
//!
//! The model is a standard pre-norm ViT (patch embedding, CLS token,
//! positional embeddings, `L` blocks of masked attention + MLP, CLS head)
//! with the reduction modules inserted between each block's attention and
//! MLP. It runs in two execution modes:
//!
//! - **Train mode** keeps the token count fixed and carries a keep-mask.
//!   Removed tokens stay in the buffer with mask 0: they are excluded from
//!   attention by the masked softmax, their values are frozen (residual
//!   updates are gated by the mask), and they cost nothing in the FLOPs
//!   model.
//! - **Inference mode** physically gathers the kept tokens after every
//!   block's reduction, shrinking all downstream computation. Batch size
//!   is 1, since each image keeps a different token set.
//!
//! The two modes produce the same CLS logits for the same weights, inputs,
//! and thresholds — that equivalence is the correctness anchor for the whole
//! masking scheme and is enforced by tests at a 1e-9 relative tolerance.

use crate::reduction::{
    bipartite_similarity, class_attention_scores, mean_column_scores, merge_tokens,
    merge_tokens_topk, prune_tokens, prune_tokens_topk, LayerTrace, MergeWeighting,
    ReductionTrace, ThresholdSet,
};
use crate::rng::Rng;
use crate::tape::{MaskMode, NodeId, Tape, TapeError};
use crate::tensor::{Tensor, TensorError};
use serde::Serialize;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which reduction modules run between attention and MLP, and in what order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ReductionOrder {
    /// No reduction: a vanilla ViT forward.
    None,
    /// Learned thresholds, merge then prune (the default).
    Ltmp,
    /// Learned thresholds, prune then merge.
    Ltpm,
    /// Learned merge threshold only.
    MergeOnly,
    /// Learned prune threshold only.
    PruneOnly,
    /// Fixed-rate merge of `topk_k` tokens per block.
    TopkMerge,
    /// Fixed-rate prune of `topk_k` tokens per block.
    TopkPrune,
    /// Fixed-rate merge then prune, `topk_k` each.
    TopkBoth,
}

impl ReductionOrder {
    pub const ALL: [ReductionOrder; 8] = [
        ReductionOrder::None,
        ReductionOrder::Ltmp,
        ReductionOrder::Ltpm,
        ReductionOrder::MergeOnly,
        ReductionOrder::PruneOnly,
        ReductionOrder::TopkMerge,
        ReductionOrder::TopkPrune,
        ReductionOrder::TopkBoth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReductionOrder::None => "none",
            ReductionOrder::Ltmp => "ltmp",
            ReductionOrder::Ltpm => "ltpm",
            ReductionOrder::MergeOnly => "merge_only",
            ReductionOrder::PruneOnly => "prune_only",
            ReductionOrder::TopkMerge => "topk_merge",
            ReductionOrder::TopkPrune => "topk_prune",
            ReductionOrder::TopkBoth => "topk_both",
        }
    }

    /// Whether the merge module runs at all.
    pub fn merges(self) -> bool {
        matches!(
            self,
            ReductionOrder::Ltmp
                | ReductionOrder::Ltpm
                | ReductionOrder::MergeOnly
                | ReductionOrder::TopkMerge
                | ReductionOrder::TopkBoth
        )
    }

    /// Whether the prune module runs at all.
    pub fn prunes(self) -> bool {
        matches!(
            self,
            ReductionOrder::Ltmp
                | ReductionOrder::Ltpm
                | ReductionOrder::PruneOnly
                | ReductionOrder::TopkPrune
                | ReductionOrder::TopkBoth
        )
    }

    /// Fixed-rate variants take their budget from `topk_k`, not thresholds.
    pub fn is_topk(self) -> bool {
        matches!(
            self,
            ReductionOrder::TopkMerge | ReductionOrder::TopkPrune | ReductionOrder::TopkBoth
        )
    }

    fn tag(self) -> u8 {
        Self::ALL.iter().position(|&o| o == self).unwrap() as u8
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }
}

impl fmt::Display for ReductionOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReductionOrder {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        Self::ALL
            .iter()
            .find(|o| o.as_str() == s)
            .copied()
            .ok_or_else(|| ModelError::Config(format!("unknown reduction_order `{s}`")))
    }
}

/// Which attention-derived saliency drives the prune module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ImportanceKind {
    /// Mean column attention from kept tokens, normalised to (0, 1].
    MeanColumn,
    /// CLS-row attention summed over heads, range (0, heads].
    ClassAttention,
}

impl ImportanceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ImportanceKind::MeanColumn => "mean_column",
            ImportanceKind::ClassAttention => "class_attention",
        }
    }

    fn tag(self) -> u8 {
        match self {
            ImportanceKind::MeanColumn => 0,
            ImportanceKind::ClassAttention => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ImportanceKind::MeanColumn),
            1 => Some(ImportanceKind::ClassAttention),
            _ => None,
        }
    }
}

impl fmt::Display for ImportanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ImportanceKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "mean_column" => Ok(ImportanceKind::MeanColumn),
            "class_attention" => Ok(ImportanceKind::ClassAttention),
            _ => Err(ModelError::Config(format!("unknown importance_score `{s}`"))),
        }
    }
}

impl FromStr for MergeWeighting {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "size_weighted" => Ok(MergeWeighting::SizeWeighted),
            "pairwise" => Ok(MergeWeighting::Pairwise),
            _ => Err(ModelError::Config(format!("unknown merge_weighting `{s}`"))),
        }
    }
}

/// Architecture and reduction settings.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    pub reduction_order: ReductionOrder,
    pub importance_score: ImportanceKind,
    /// Tokens removed per module per block in the fixed-rate variants.
    pub topk_k: usize,
    pub merge_weighting: MergeWeighting,
}

impl ModelConfig {
    /// The desk-scale reference model: 32x32 RGB inputs, 4x4 patches
    /// (64 patch tokens + CLS = 65), four 4-head blocks of width 64,
    /// 8 classes.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            heads: 4,
            blocks: 4,
            mlp_ratio: 4,
            classes: 8,
            reduction_order: ReductionOrder::Ltmp,
            importance_score: ImportanceKind::MeanColumn,
            topk_k: 4,
            merge_weighting: MergeWeighting::SizeWeighted,
        }
    }

    pub fn n_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Patch tokens plus CLS.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            self.image_size,
            self.patch_size,
            self.channels,
            self.embed_dim,
            self.heads,
            self.blocks,
            self.mlp_ratio,
            self.classes,
        ];
        if positive.contains(&0) {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(ModelError::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.reduction_order.is_topk() && self.topk_k == 0 {
            return Err(ModelError::Config(
                "topk reduction requires topk_k >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Weights of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// All backbone weights. Field order is the declaration order used for
/// parameter slots, checkpoint layout, and checksums.
#[derive(Clone, Debug, PartialEq)]
pub struct VitParams {
    pub patch_proj: Tensor,
    pub patch_bias: Tensor,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

const TENSORS_PER_BLOCK: usize = 16;

fn randn(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.normal(0.0, std)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl VitParams {
    /// ViT-style initialisation: normal(0, 0.02) for projections and
    /// embeddings, identity layer norms, zero biases.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        let hidden = cfg.hidden_dim();
        let std = 0.02;
        let block = |rng: &mut Rng| BlockParams {
            ln1_gain: Tensor::filled(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            wq: randn(rng, &[d, d], std),
            bq: Tensor::zeros(&[d]),
            wk: randn(rng, &[d, d], std),
            bk: Tensor::zeros(&[d]),
            wv: randn(rng, &[d, d], std),
            bv: Tensor::zeros(&[d]),
            wo: randn(rng, &[d, d], std),
            bo: Tensor::zeros(&[d]),
            ln2_gain: Tensor::filled(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            w1: randn(rng, &[d, hidden], std),
            b1: Tensor::zeros(&[hidden]),
            w2: randn(rng, &[hidden, d], std),
            b2: Tensor::zeros(&[d]),
        };
        VitParams {
            patch_proj: randn(rng, &[cfg.patch_dim(), d], std),
            patch_bias: Tensor::zeros(&[d]),
            cls_token: randn(rng, &[1, d], std),
            pos_embed: randn(rng, &[cfg.n_tokens(), d], std),
            blocks: (0..cfg.blocks).map(|_| block(rng)).collect(),
            final_gain: Tensor::filled(&[d], 1.0),
            final_bias: Tensor::zeros(&[d]),
            head_w: randn(rng, &[d, cfg.classes], std),
            head_b: Tensor::zeros(&[cfg.classes]),
        }
    }

    /// All tensors in declaration order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.patch_proj,
            &self.patch_bias,
            &self.cls_token,
            &self.pos_embed,
        ];
        for b in &self.blocks {
            out.extend([
                &b.ln1_gain, &b.ln1_bias, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo,
                &b.bo, &b.ln2_gain, &b.ln2_bias, &b.w1, &b.b1, &b.w2, &b.b2,
            ]);
        }
        out.extend([
            &self.final_gain,
            &self.final_bias,
            &self.head_w,
            &self.head_b,
        ]);
        out
    }

    /// Mutable view in the same declaration order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.patch_proj,
            &mut self.patch_bias,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.wq,
                &mut b.bq,
                &mut b.wk,
                &mut b.bk,
                &mut b.wv,
                &mut b.bv,
                &mut b.wo,
                &mut b.bo,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        out.extend([
            &mut self.final_gain,
            &mut self.final_bias,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    pub fn n_slots(&self) -> usize {
        8 + TENSORS_PER_BLOCK * self.blocks.len()
    }

    /// FNV-1a over every parameter's bit pattern in declaration order; used
    /// to prove the backbone is untouched by threshold training.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for &x in t.data() {
                for byte in x.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    fn expected_shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
        let d = cfg.embed_dim;
        let hidden = cfg.hidden_dim();
        let mut shapes = vec![
            vec![cfg.patch_dim(), d],
            vec![d],
            vec![1, d],
            vec![cfg.n_tokens(), d],
        ];
        for _ in 0..cfg.blocks {
            shapes.extend([
                vec![d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, hidden],
                vec![hidden],
                vec![hidden, d],
                vec![d],
            ]);
        }
        shapes.extend([vec![d], vec![d], vec![d, cfg.classes], vec![cfg.classes]]);
        shapes
    }

    fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        let expected = Self::expected_shapes(cfg);
        if tensors.len() != expected.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (i, (t, s)) in tensors.iter().zip(&expected).enumerate() {
            if t.shape() != s.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {i} has shape {:?}, expected {:?}",
                    t.shape(),
                    s
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let patch_proj = next();
        let patch_bias = next();
        let cls_token = next();
        let pos_embed = next();
        let blocks = (0..cfg.blocks)
            .map(|_| BlockParams {
                ln1_gain: next(),
                ln1_bias: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        Ok(VitParams {
            patch_proj,
            patch_bias,
            cls_token,
            pos_embed,
            blocks,
            final_gain: next(),
            final_bias: next(),
            head_w: next(),
            head_b: next(),
        })
    }
}

/// Which parameter group receives gradients in this forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainableSet {
    /// Everything is a constant (evaluation).
    Frozen,
    /// Backbone weights are parameters, slot = declaration index.
    Backbone,
    /// Thresholds are parameters: slot 2l is theta_merge of block l,
    /// slot 2l+1 its theta_prune. The backbone enters as constants, so
    /// backward never materialises weight gradients.
    Thresholds,
}

/// Train mode carries masks at fixed token count; inference mode gathers
/// kept tokens after every block and runs on the shrunken list (batch 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Train,
    Inference,
}

/// Tape nodes of one block's weights.
#[derive(Clone, Copy, Debug)]
pub struct BlockNodes {
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Tape nodes of all weights and thresholds for one forward.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub patch_proj: NodeId,
    pub patch_bias: NodeId,
    pub cls_token: NodeId,
    pub pos_embed: NodeId,
    pub blocks: Vec<BlockNodes>,
    pub final_gain: NodeId,
    pub final_bias: NodeId,
    pub head_w: NodeId,
    pub head_b: NodeId,
    pub theta_m: Vec<NodeId>,
    pub theta_p: Vec<NodeId>,
    pub tau: f64,
}

/// Places every weight and threshold on the tape, as `param` or `input`
/// according to `trainable`.
pub fn place_params(
    tape: &mut Tape,
    params: &VitParams,
    thresholds: &ThresholdSet,
    trainable: TrainableSet,
) -> ParamNodes {
    let mut slot = 0;
    let mut place = |tape: &mut Tape, t: &Tensor| -> NodeId {
        if trainable == TrainableSet::Backbone {
            let id = tape.param(slot, t.clone());
            slot += 1;
            id
        } else {
            tape.input(t.clone())
        }
    };
    let patch_proj = place(tape, &params.patch_proj);
    let patch_bias = place(tape, &params.patch_bias);
    let cls_token = place(tape, &params.cls_token);
    let pos_embed = place(tape, &params.pos_embed);
    let blocks: Vec<BlockNodes> = params
        .blocks
        .iter()
        .map(|b| BlockNodes {
            ln1_gain: place(tape, &b.ln1_gain),
            ln1_bias: place(tape, &b.ln1_bias),
            wq: place(tape, &b.wq),
            bq: place(tape, &b.bq),
            wk: place(tape, &b.wk),
            bk: place(tape, &b.bk),
            wv: place(tape, &b.wv),
            bv: place(tape, &b.bv),
            wo: place(tape, &b.wo),
            bo: place(tape, &b.bo),
            ln2_gain: place(tape, &b.ln2_gain),
            ln2_bias: place(tape, &b.ln2_bias),
            w1: place(tape, &b.w1),
            b1: place(tape, &b.b1),
            w2: place(tape, &b.w2),
            b2: place(tape, &b.b2),
        })
        .collect();
    let final_gain = place(tape, &params.final_gain);
    let final_bias = place(tape, &params.final_bias);
    let head_w = place(tape, &params.head_w);
    let head_b = place(tape, &params.head_b);

    let mut theta_m = Vec::with_capacity(thresholds.blocks());
    let mut theta_p = Vec::with_capacity(thresholds.blocks());
    for l in 0..thresholds.blocks() {
        let tm = Tensor::scalar(thresholds.theta_merge[l]);
        let tp = Tensor::scalar(thresholds.theta_prune[l]);
        if trainable == TrainableSet::Thresholds {
            theta_m.push(tape.param(2 * l, tm));
            theta_p.push(tape.param(2 * l + 1, tp));
        } else {
            theta_m.push(tape.input(tm));
            theta_p.push(tape.input(tp));
        }
    }

    ParamNodes {
        patch_proj,
        patch_bias,
        cls_token,
        pos_embed,
        blocks,
        final_gain,
        final_bias,
        head_w,
        head_b,
        theta_m,
        theta_p,
        tau: thresholds.tau,
    }
}

/// The token buffer threading through the blocks.
///
/// `kept` is the hard keep/remove bookkeeping that drives control flow
/// (candidate sets, gathers); it follows the strict `s > theta` rule in both
/// mask modes, while the `mask` node's values may be relaxed sigmoids.
#[derive(Clone, Debug)]
pub struct TokenState {
    /// `[n_cur, d]` token values.
    pub x: NodeId,
    /// `[n_cur]` keep mask.
    pub mask: NodeId,
    /// Merge multiplicities; transfers preserve the total (= n+1 in train
    /// mode, where removed tokens stay in the buffer).
    pub sizes: Vec<f64>,
    /// Original token indices each current token represents.
    pub origins: Vec<Vec<usize>>,
    /// Current row -> original token index (the identity in train mode).
    pub global_idx: Vec<usize>,
    /// Hard keep flags, local indexing.
    pub kept: Vec<bool>,
}

impl TokenState {
    pub fn kept_local(&self) -> Vec<usize> {
        (0..self.kept.len()).filter(|&i| self.kept[i]).collect()
    }

    pub fn kept_non_cls_local(&self) -> Vec<usize> {
        // CLS is always local row 0: inference gathers keep ascending order
        // and CLS is never a removal candidate.
        (1..self.kept.len()).filter(|&i| self.kept[i]).collect()
    }
}

/// Per-head attention internals kept for the score modules.
pub struct AttentionCache {
    pub q: Vec<NodeId>,
    pub k: Vec<NodeId>,
    pub v: Vec<NodeId>,
    /// Pre-softmax logits per head.
    pub a: Vec<NodeId>,
    /// Masked softmax per head: rows sum to 1 over kept columns, masked
    /// columns are exactly zero.
    pub s: Vec<NodeId>,
    /// Head-averaged keys, the similarity features for merging.
    pub kbar: NodeId,
}

/// Splits an `[H, W*C]` raster (channel fastest within a row) into
/// non-overlapping patches, one flattened patch per row, grid row-major.
pub fn patchify(image: &Tensor, cfg: &ModelConfig) -> Result<Tensor, ModelError> {
    let (h, w, c, p) = (
        cfg.image_size,
        cfg.image_size,
        cfg.channels,
        cfg.patch_size,
    );
    if image.shape() != [h, w * c] {
        return Err(ModelError::Dim(format!(
            "image shape {:?}, expected [{h}, {}]",
            image.shape(),
            w * c
        )));
    }
    let g = h / p;
    let mut data = Vec::with_capacity(g * g * p * p * c);
    for gi in 0..g {
        for gj in 0..g {
            for pi in 0..p {
                for pj in 0..p {
                    for ch in 0..c {
                        data.push(image.at(gi * p + pi, (gj * p + pj) * c + ch));
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![g * g, p * p * c], data)?)
}

/// Projects patches, prepends CLS, adds positional embeddings; the mask
/// starts all ones and every token has size 1.
pub fn patch_embed(
    tape: &mut Tape,
    image: &Tensor,
    cfg: &ModelConfig,
    nodes: &ParamNodes,
) -> Result<TokenState, ModelError> {
    let patches = patchify(image, cfg)?;
    let pin = tape.input(patches);
    let proj = tape.matmul(pin, nodes.patch_proj)?;
    let proj = tape.add_row_vec(proj, nodes.patch_bias)?;
    let x = tape.concat_rows(&[nodes.cls_token, proj])?;
    let x = tape.add(x, nodes.pos_embed)?;
    let n = cfg.n_tokens();
    let mask = tape.input(Tensor::filled(&[n], 1.0));
    Ok(TokenState {
        x,
        mask,
        sizes: vec![1.0; n],
        origins: (0..n).map(|i| vec![i]).collect(),
        global_idx: (0..n).collect(),
        kept: vec![true; n],
    })
}

/// Multi-head attention over normalised tokens with the keep-mask applied
/// inside the softmax: masked tokens contribute exactly zero to every kept
/// token's output, making the result identical to attention over the
/// physically reduced token list.
pub fn attention_with_mask(
    tape: &mut Tape,
    x_ln: NodeId,
    mask: NodeId,
    block: &BlockNodes,
    cfg: &ModelConfig,
) -> Result<(NodeId, AttentionCache), ModelError> {
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let q = tape.matmul(x_ln, block.wq)?;
    let q = tape.add_row_vec(q, block.bq)?;
    let k = tape.matmul(x_ln, block.wk)?;
    let k = tape.add_row_vec(k, block.bk)?;
    let v = tape.matmul(x_ln, block.wv)?;
    let v = tape.add_row_vec(v, block.bv)?;

    let mut cache = AttentionCache {
        q: Vec::with_capacity(cfg.heads),
        k: Vec::with_capacity(cfg.heads),
        v: Vec::with_capacity(cfg.heads),
        a: Vec::with_capacity(cfg.heads),
        s: Vec::with_capacity(cfg.heads),
        kbar: k, // replaced below
    };
    let mut outs = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let (lo, hi) = (head * dh, (head + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let logits = tape.matmul_nt(qh, kh)?;
        let ah = tape.scale(logits, scale);
        let sh = tape.masked_softmax(ah, mask)?;
        let oh = tape.matmul(sh, vh)?;
        cache.q.push(qh);
        cache.k.push(kh);
        cache.v.push(vh);
        cache.a.push(ah);
        cache.s.push(sh);
        outs.push(oh);
    }
    let merged = tape.concat_cols(&outs)?;
    let out = tape.matmul(merged, block.wo)?;
    let out = tape.add_row_vec(out, block.bo)?;

    let mut kbar = cache.k[0];
    for &kh in &cache.k[1..] {
        kbar = tape.add(kbar, kh)?;
    }
    cache.kbar = tape.scale(kbar, 1.0 / cfg.heads as f64);

    Ok((out, cache))
}

/// What one block reports back to the forward driver.
pub struct BlockOutcome {
    pub trace: LayerTrace,
    /// Mask mean after this block's reduction, normalised by the full token
    /// count in both execution modes.
    pub mask_mean: NodeId,
}

struct MergeStageResult {
    assignments: Vec<(usize, usize)>,
    similarity: Vec<(usize, usize, f64)>,
}

fn run_merge_stage(
    tape: &mut Tape,
    state: &mut TokenState,
    cache: &AttentionCache,
    theta_m: NodeId,
    tau: f64,
    cfg: &ModelConfig,
) -> Result<MergeStageResult, ModelError> {
    let kept_nc = state.kept_non_cls_local();
    let kbar_values = tape.value(cache.kbar).clone();
    let sims = bipartite_similarity(&kbar_values, &kept_nc);
    let similarity = sims
        .a_tokens
        .iter()
        .zip(&sims.partners)
        .zip(&sims.values)
        .map(|((&a, &p), &v)| (state.global_idx[a], state.global_idx[p], v))
        .collect();
    let out = if cfg.reduction_order.is_topk() {
        merge_tokens_topk(
            tape,
            state.x,
            state.mask,
            &mut state.sizes,
            &mut state.origins,
            &sims,
            cfg.topk_k,
            cfg.merge_weighting,
        )?
    } else {
        merge_tokens(
            tape,
            state.x,
            state.mask,
            &mut state.sizes,
            &mut state.origins,
            cache.kbar,
            &sims,
            theta_m,
            tau,
            cfg.merge_weighting,
        )?
    };
    state.x = out.x;
    state.mask = out.mask;
    for &(src, _) in &out.assignments {
        state.kept[src] = false;
    }
    let assignments = out
        .assignments
        .iter()
        .map(|&(s, d)| (state.global_idx[s], state.global_idx[d]))
        .collect();
    Ok(MergeStageResult {
        assignments,
        similarity,
    })
}

fn run_prune_stage(
    tape: &mut Tape,
    state: &mut TokenState,
    importance: NodeId,
    theta_p: NodeId,
    tau: f64,
    cfg: &ModelConfig,
) -> Result<Vec<usize>, ModelError> {
    let candidates = state.kept_non_cls_local();
    let out = if cfg.reduction_order.is_topk() {
        prune_tokens_topk(tape, state.mask, importance, &candidates, cfg.topk_k)?
    } else {
        prune_tokens(tape, state.mask, importance, &candidates, theta_p, tau)?
    };
    state.mask = out.mask;
    for &tok in &out.pruned {
        state.kept[tok] = false;
    }
    Ok(out
        .pruned
        .iter()
        .map(|&tok| state.global_idx[tok])
        .collect())
}

/// One pre-norm block: masked attention with residual, the configured
/// reduction modules, then the MLP with residual. Residual adds are gated by
/// the mask so removed tokens are frozen in train mode. In inference mode
/// the kept tokens are gathered right after the reduction.
#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    tape: &mut Tape,
    state: &mut TokenState,
    block: &BlockNodes,
    theta_m: NodeId,
    theta_p: NodeId,
    layer: usize,
    cfg: &ModelConfig,
    mode: ExecMode,
    tau: f64,
) -> Result<BlockOutcome, ModelError> {
    let n_full = cfg.n_tokens();

    let ln1 = tape.layer_norm(state.x, block.ln1_gain, block.ln1_bias)?;
    let (attn, cache) = attention_with_mask(tape, ln1, state.mask, block, cfg)?;
    let gated = tape.scale_rows(attn, state.mask)?;
    state.x = tape.add(state.x, gated)?;

    let importance = match cfg.importance_score {
        ImportanceKind::MeanColumn => mean_column_scores(tape, &cache.s, state.mask)?,
        ImportanceKind::ClassAttention => class_attention_scores(tape, &cache.s)?,
    };

    let kept_before = state.kept_local().len();
    let importance_pairs: Vec<(usize, f64)> = {
        let vals = tape.value(importance).data();
        state
            .kept_non_cls_local()
            .iter()
            .map(|&i| (state.global_idx[i], vals[i]))
            .collect()
    };

    let mut merge_assignments = Vec::new();
    let mut similarity = Vec::new();
    let mut pruned_tokens = Vec::new();
    match cfg.reduction_order {
        ReductionOrder::None => {}
        ReductionOrder::Ltmp | ReductionOrder::TopkBoth => {
            let m = run_merge_stage(tape, state, &cache, theta_m, tau, cfg)?;
            merge_assignments = m.assignments;
            similarity = m.similarity;
            pruned_tokens = run_prune_stage(tape, state, importance, theta_p, tau, cfg)?;
        }
        ReductionOrder::Ltpm => {
            pruned_tokens = run_prune_stage(tape, state, importance, theta_p, tau, cfg)?;
            let m = run_merge_stage(tape, state, &cache, theta_m, tau, cfg)?;
            merge_assignments = m.assignments;
            similarity = m.similarity;
        }
        ReductionOrder::MergeOnly | ReductionOrder::TopkMerge => {
            let m = run_merge_stage(tape, state, &cache, theta_m, tau, cfg)?;
            merge_assignments = m.assignments;
            similarity = m.similarity;
        }
        ReductionOrder::PruneOnly | ReductionOrder::TopkPrune => {
            pruned_tokens = run_prune_stage(tape, state, importance, theta_p, tau, cfg)?;
        }
    }

    if mode == ExecMode::Inference {
        let kept = state.kept_local();
        state.x = tape.gather_rows(state.x, &kept)?;
        state.mask = tape.input(Tensor::filled(&[kept.len()], 1.0));
        state.sizes = kept.iter().map(|&i| state.sizes[i]).collect();
        state.origins = kept.iter().map(|&i| state.origins[i].clone()).collect();
        state.global_idx = kept.iter().map(|&i| state.global_idx[i]).collect();
        state.kept = vec![true; kept.len()];
    }

    // Mask mean over the full n+1 slots in both modes: the gathered sum
    // equals the masked sum, so the two modes produce identical means.
    let mask_sum = tape.sum_all(state.mask);
    let n_full_node = tape.input(Tensor::scalar(n_full as f64));
    let mask_mean = tape.div_scalar(mask_sum, n_full_node)?;

    let ln2 = tape.layer_norm(state.x, block.ln2_gain, block.ln2_bias)?;
    let h1 = tape.matmul(ln2, block.w1)?;
    let h1 = tape.add_row_vec(h1, block.b1)?;
    let act = tape.gelu(h1);
    let mlp = tape.matmul(act, block.w2)?;
    let mlp = tape.add_row_vec(mlp, block.b2)?;
    let gated = tape.scale_rows(mlp, state.mask)?;
    state.x = tape.add(state.x, gated)?;

    let kept_after_local = state.kept_local();
    let kept_after: Vec<usize> = kept_after_local
        .iter()
        .map(|&i| state.global_idx[i])
        .collect();
    let kept_origins = kept_after_local
        .iter()
        .map(|&i| (state.global_idx[i], state.origins[i].clone()))
        .collect();

    Ok(BlockOutcome {
        trace: LayerTrace {
            layer,
            kept_before,
            merged: merge_assignments.len(),
            pruned: pruned_tokens.len(),
            merge_assignments,
            pruned_tokens,
            kept_after,
            importance: importance_pairs,
            similarity,
            kept_origins,
        },
        mask_mean,
    })
}

/// Everything a caller needs from one forward: the tape (for building losses
/// and backpropagating), the logits node, per-block mask means for the FLOPs
/// model, and the reduction trace.
pub struct ForwardResult {
    pub tape: Tape,
    /// Rank-1 `[classes]`.
    pub logits: NodeId,
    pub mask_means: Vec<NodeId>,
    pub mask_mean_values: Vec<f64>,
    pub trace: ReductionTrace,
    /// Original indices of the tokens kept at exit.
    pub kept_final: Vec<usize>,
    pub nodes: ParamNodes,
}

/// Runs the full model on one image: patch embedding, `L` blocks with
/// reduction, final layer norm, CLS head.
pub fn model_forward(
    image: &Tensor,
    cfg: &ModelConfig,
    params: &VitParams,
    thresholds: &ThresholdSet,
    mode: ExecMode,
    mask_mode: MaskMode,
    trainable: TrainableSet,
) -> Result<ForwardResult, ModelError> {
    cfg.validate()?;
    if thresholds.blocks() != cfg.blocks {
        return Err(ModelError::Config(format!(
            "{} threshold pairs for {} blocks",
            thresholds.blocks(),
            cfg.blocks
        )));
    }
    if !thresholds.is_valid() {
        return Err(ModelError::Config("thresholds must be finite, tau > 0".into()));
    }
    if params.patch_proj.shape() != [cfg.patch_dim(), cfg.embed_dim] {
        return Err(ModelError::Dim(format!(
            "patch_proj shape {:?} does not match config",
            params.patch_proj.shape()
        )));
    }

    let mut tape = Tape::new(mask_mode);
    let nodes = place_params(&mut tape, params, thresholds, trainable);
    let mut state = patch_embed(&mut tape, image, cfg, &nodes)?;

    let mut trace = ReductionTrace::default();
    let mut mask_means = Vec::with_capacity(cfg.blocks);
    for l in 0..cfg.blocks {
        let out = block_forward(
            &mut tape,
            &mut state,
            &nodes.blocks[l],
            nodes.theta_m[l],
            nodes.theta_p[l],
            l + 1,
            cfg,
            mode,
            nodes.tau,
        )?;
        trace.layers.push(out.trace);
        mask_means.push(out.mask_mean);
    }

    let cls = tape.gather_rows(state.x, &[0])?;
    let cls = tape.layer_norm(cls, nodes.final_gain, nodes.final_bias)?;
    let logits = tape.matmul(cls, nodes.head_w)?;
    let logits = tape.add_row_vec(logits, nodes.head_b)?;
    let logits = tape.reshape(logits, vec![cfg.classes])?;

    let mask_mean_values = mask_means.iter().map(|&m| tape.value(m).item()).collect();
    let kept_final = state
        .kept_local()
        .iter()
        .map(|&i| state.global_idx[i])
        .collect();

    Ok(ForwardResult {
        tape,
        logits,
        mask_means,
        mask_mean_values,
        trace,
        kept_final,
        nodes,
    })
}

/// A trained model plus enough metadata to resume or analyse it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: VitParams,
    pub thresholds: ThresholdSet,
    pub seed: u64,
    pub step: u64,
    pub metrics: Vec<(String, f64)>,
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LTMP";
const CHECKPOINT_VERSION: u32 = 1;

fn wr_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn wr_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn wr_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_bits().to_le_bytes());
}

fn wr_str(buf: &mut Vec<u8>, s: &str) {
    wr_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn str(&mut self) -> Result<String, ModelError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| ModelError::Checkpoint("metric name is not UTF-8".into()))
    }
}

fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let cfg = &ckpt.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    wr_u32(&mut buf, CHECKPOINT_VERSION);
    for dim in [
        cfg.image_size,
        cfg.patch_size,
        cfg.channels,
        cfg.embed_dim,
        cfg.heads,
        cfg.blocks,
        cfg.mlp_ratio,
        cfg.classes,
        cfg.topk_k,
    ] {
        wr_u32(&mut buf, dim as u32);
    }
    buf.push(cfg.reduction_order.tag());
    buf.push(cfg.importance_score.tag());
    buf.push(match cfg.merge_weighting {
        MergeWeighting::SizeWeighted => 0,
        MergeWeighting::Pairwise => 1,
    });
    wr_u64(&mut buf, ckpt.seed);
    wr_u64(&mut buf, ckpt.step);
    wr_u32(&mut buf, ckpt.metrics.len() as u32);
    for (name, value) in &ckpt.metrics {
        wr_str(&mut buf, name);
        wr_f64(&mut buf, *value);
    }
    let tensors = ckpt.params.tensors();
    wr_u32(&mut buf, tensors.len() as u32);
    for t in tensors {
        wr_u32(&mut buf, t.shape().len() as u32);
        for &dim in t.shape() {
            wr_u32(&mut buf, dim as u32);
        }
        for &x in t.data() {
            wr_f64(&mut buf, x);
        }
    }
    wr_u32(&mut buf, ckpt.thresholds.blocks() as u32);
    wr_f64(&mut buf, ckpt.thresholds.tau);
    for l in 0..ckpt.thresholds.blocks() {
        wr_f64(&mut buf, ckpt.thresholds.theta_merge[l]);
        wr_f64(&mut buf, ckpt.thresholds.theta_prune[l]);
    }
    buf
}

fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let mut dims = [0usize; 9];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let order_tag = r.take(1)?[0];
    let importance_tag = r.take(1)?[0];
    let weighting_tag = r.take(1)?[0];
    let config = ModelConfig {
        image_size: dims[0],
        patch_size: dims[1],
        channels: dims[2],
        embed_dim: dims[3],
        heads: dims[4],
        blocks: dims[5],
        mlp_ratio: dims[6],
        classes: dims[7],
        topk_k: dims[8],
        reduction_order: ReductionOrder::from_tag(order_tag)
            .ok_or_else(|| ModelError::Checkpoint(format!("bad order tag {order_tag}")))?,
        importance_score: ImportanceKind::from_tag(importance_tag).ok_or_else(|| {
            ModelError::Checkpoint(format!("bad importance tag {importance_tag}"))
        })?,
        merge_weighting: match weighting_tag {
            0 => MergeWeighting::SizeWeighted,
            1 => MergeWeighting::Pairwise,
            t => return Err(ModelError::Checkpoint(format!("bad weighting tag {t}"))),
        },
    };
    config.validate().map_err(|e| {
        ModelError::Checkpoint(format!("stored config fails validation: {e}"))
    })?;
    let seed = r.u64()?;
    let step = r.u64()?;
    let n_metrics = r.u32()? as usize;
    let mut metrics = Vec::with_capacity(n_metrics);
    for _ in 0..n_metrics {
        let name = r.str()?;
        let value = r.f64()?;
        metrics.push((name, value));
    }
    let n_tensors = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f64()?);
        }
        tensors.push(Tensor::new(shape, data)?);
    }
    let params = VitParams::from_tensors(&config, tensors)?;
    let t_blocks = r.u32()? as usize;
    if t_blocks != config.blocks {
        return Err(ModelError::Checkpoint(format!(
            "{t_blocks} threshold pairs for {} blocks",
            config.blocks
        )));
    }
    let tau = r.f64()?;
    let mut thresholds = ThresholdSet {
        theta_merge: Vec::with_capacity(t_blocks),
        theta_prune: Vec::with_capacity(t_blocks),
        tau,
    };
    for _ in 0..t_blocks {
        thresholds.theta_merge.push(r.f64()?);
        thresholds.theta_prune.push(r.f64()?);
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config,
        params,
        thresholds,
        seed,
        step,
        metrics,
    })
}

/// Writes the checkpoint atomically (temp file in the same directory, then
/// rename), so a crash never leaves a half-written file at `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let bytes = encode_checkpoint(ckpt);
    let file_name = path
        .file_name()
        .ok_or_else(|| ModelError::Checkpoint(format!("bad path {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}
