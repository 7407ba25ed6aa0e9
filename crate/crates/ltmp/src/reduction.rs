//! Token reduction: importance and similarity scores, learned-threshold
//! masking with straight-through gradients, bipartite merging, pruning, and
//! the fixed-rate top-k baselines.
//!
//! The pure functions here ([`threshold_mask`], [`topk_select`],
//! [`bipartite_similarity`], ...) are independent of the autodiff tape and
//! easy to test against brute-force oracles. The `*_tokens` builders mirror
//! the same arithmetic as tape graphs so the model can differentiate through
//! the masks; they take hard control-flow decisions (which tokens merge,
//! which survive) from the tape's current mask values, so hard and relaxed
//! modes select identical token sets whenever every score is away from its
//! threshold.
//!
//! Index conventions: token 0 is CLS, which is never a merge source, never a
//! merge destination, and never pruned. "Kept order" means ascending token
//! index among tokens whose mask is on.

use crate::tape::{sigmoid, NodeId, Tape, TapeError};
use crate::tensor::Tensor;
use serde::Serialize;
use thiserror::Error;

/// Default STE temperature: soft enough that scores within roughly half a
/// unit of the threshold still receive gradient, sharp enough that the
/// surrogate tracks the hard decision.
pub const DEFAULT_TAU: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum ReductionError {
    #[error("top-k asked for k={k} out of {len} scores")]
    KTooLarge { k: usize, len: usize },
}

/// Learned per-block thresholds plus the shared STE temperature.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThresholdSet {
    pub theta_merge: Vec<f64>,
    pub theta_prune: Vec<f64>,
    pub tau: f64,
}

impl ThresholdSet {
    /// Initialisation that reproduces the unreduced model: similarity never
    /// exceeds 1 and importance scores are strictly positive, so with strict
    /// `>` comparisons nothing merges (theta_m = 1) and nothing prunes
    /// (theta_p = 0) at step 0.
    pub fn init(blocks: usize) -> Self {
        Self {
            theta_merge: vec![1.0; blocks],
            theta_prune: vec![0.0; blocks],
            tau: DEFAULT_TAU,
        }
    }

    pub fn blocks(&self) -> usize {
        self.theta_merge.len()
    }

    pub fn is_valid(&self) -> bool {
        self.tau > 0.0
            && self.theta_merge.len() == self.theta_prune.len()
            && self
                .theta_merge
                .iter()
                .chain(&self.theta_prune)
                .all(|t| t.is_finite())
    }
}

/// Hard keep mask: `1` iff `score > theta`, strict comparison.
pub fn threshold_mask(scores: &[f64], theta: f64) -> Vec<f64> {
    scores
        .iter()
        .map(|&s| if s > theta { 1.0 } else { 0.0 })
        .collect()
}

/// Straight-through surrogate derivatives of the hard mask, i.e. the exact
/// derivatives of `sigma((s - theta) / tau)`:
/// returns `(d mask / d s, d mask / d theta)`.
pub fn threshold_mask_ste_grad(s: f64, theta: f64, tau: f64) -> (f64, f64) {
    let sg = sigmoid((s - theta) / tau);
    let sp = sg * (1.0 - sg) / tau;
    (sp, -sp)
}

/// Mask update rule: a token already removed stays removed; a surviving
/// token takes its new decision. With `{0,1}` masks this is an elementwise
/// product, which also gives the relaxed-mode behaviour for free.
pub fn update_mask(prev: &[f64], decisions: &[f64]) -> Vec<f64> {
    prev.iter()
        .zip(decisions)
        .map(|(&p, &d)| p * d)
        .collect()
}

/// Indices of the `k` largest (or smallest) scores, ties broken toward the
/// lower index. The result is sorted ascending.
pub fn topk_select(scores: &[f64], k: usize, largest: bool) -> Result<Vec<usize>, ReductionError> {
    if k > scores.len() {
        return Err(ReductionError::KTooLarge {
            k,
            len: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        let cmp = scores[i].partial_cmp(&scores[j]).expect("finite scores");
        let cmp = if largest { cmp.reverse() } else { cmp };
        cmp.then(i.cmp(&j))
    });
    let mut out: Vec<usize> = order[..k].to_vec();
    out.sort_unstable();
    Ok(out)
}

/// Cosine similarity clamped to `[-1, 1]`; zero-norm inputs map to `-1`
/// (an impossible match, so degenerate keys never merge).
///
/// The denominator is `sqrt(|a|^2 * |b|^2)` rather than `|a| * |b|`: IEEE
/// square root of a rounded square recovers its argument exactly, so
/// identical vectors score exactly 1.0 and the strict `> theta_m = 1`
/// comparison stays inert at initialisation.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na2: f64 = a.iter().map(|x| x * x).sum();
    let nb2: f64 = b.iter().map(|x| x * x).sum();
    if na2 == 0.0 || nb2 == 0.0 {
        return -1.0;
    }
    (dot / (na2 * nb2).sqrt()).clamp(-1.0, 1.0)
}

/// Alternating bipartite split of the kept non-CLS tokens, in kept order:
/// 1st, 3rd, 5th, ... into set A (merge sources), 2nd, 4th, ... into set B
/// (merge destinations). CLS conceptually belongs to B but is excluded from
/// matching entirely, so it never appears here.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bipartite {
    pub set_a: Vec<usize>,
    pub set_b: Vec<usize>,
}

pub fn bipartite_partition(kept_non_cls: &[usize]) -> Bipartite {
    let mut p = Bipartite::default();
    for (pos, &tok) in kept_non_cls.iter().enumerate() {
        if pos % 2 == 0 {
            p.set_a.push(tok); // 1-based odd position
        } else {
            p.set_b.push(tok);
        }
    }
    p
}

/// Per-A-token best match in set B: the maximum cosine similarity between
/// head-averaged keys, with the argmax partner recorded. Entries are aligned
/// with `a_tokens`; `valid[i]` is false when either side has a zero-norm key
/// (similarity fixed at -1, never merged).
#[derive(Clone, Debug, Default, Serialize)]
pub struct SimilarityScores {
    pub a_tokens: Vec<usize>,
    pub partners: Vec<usize>,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    pub zero_norm_keys: usize,
}

impl SimilarityScores {
    pub fn is_empty(&self) -> bool {
        self.a_tokens.is_empty()
    }
}

/// Computes [`SimilarityScores`] from head-averaged keys (`kbar`, one row
/// per token) over the alternating partition of the kept non-CLS tokens.
/// Fewer than two kept non-CLS tokens yield an empty result.
pub fn bipartite_similarity(kbar: &Tensor, kept_non_cls: &[usize]) -> SimilarityScores {
    let mut out = SimilarityScores::default();
    if kept_non_cls.len() < 2 {
        return out;
    }
    let part = bipartite_partition(kept_non_cls);
    let norm2 = |tok: usize| -> f64 { kbar.row(tok).iter().map(|x| x * x).sum() };
    let zero_count = kept_non_cls.iter().filter(|&&t| norm2(t) == 0.0).count();
    if zero_count > 0 {
        log::debug!("bipartite_similarity: {zero_count} zero-norm keys pinned to similarity -1");
    }
    out.zero_norm_keys = zero_count;

    for &a in &part.set_a {
        let mut best = f64::NEG_INFINITY;
        let mut partner = part.set_b[0];
        let mut valid = false;
        if norm2(a) > 0.0 {
            for &b in &part.set_b {
                if norm2(b) == 0.0 {
                    continue;
                }
                let cos = cosine_similarity(kbar.row(a), kbar.row(b));
                // Strict '>' keeps the lowest-index partner on ties.
                if cos > best {
                    best = cos;
                    partner = b;
                    valid = true;
                }
            }
        }
        out.a_tokens.push(a);
        out.partners.push(partner);
        out.values.push(if valid { best } else { -1.0 });
        out.valid.push(valid);
    }
    out
}

/// How merged token values are averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum MergeWeighting {
    /// Weighted by accumulated sizes so iterated merges equal the true mean
    /// of all constituent patches (default).
    SizeWeighted,
    /// Plain pairwise average, ignoring sizes.
    Pairwise,
}

/// Result of applying the merge module on the tape.
pub struct MergeOutcome {
    pub x: NodeId,
    pub mask: NodeId,
    /// (source, destination) pairs actually merged, in application order.
    pub assignments: Vec<(usize, usize)>,
    /// Tape node of the per-A-token merge decisions, when any candidates
    /// existed.
    pub decisions: Option<NodeId>,
}

/// Builds the merge module on the tape: a threshold mask over the pair
/// similarities decides which A tokens fold into their partners. Token
/// values are updated with hard decisions only (gather / weighted average /
/// replace-row); the differentiable path to `theta_m` runs through the mask
/// that gates attention and the FLOPs budget. `sizes` and `origins` are
/// plain state updated in place; sizes are never differentiated.
#[allow(clippy::too_many_arguments)]
pub fn merge_tokens(
    tape: &mut Tape,
    x: NodeId,
    mask: NodeId,
    sizes: &mut [f64],
    origins: &mut [Vec<usize>],
    kbar: NodeId,
    sims: &SimilarityScores,
    theta_m: NodeId,
    tau: f64,
    weighting: MergeWeighting,
) -> Result<MergeOutcome, TapeError> {
    if sims.is_empty() {
        return Ok(MergeOutcome {
            x,
            mask,
            assignments: Vec::new(),
            decisions: None,
        });
    }
    let count = sims.a_tokens.len();

    // Reconstruct the similarity vector on the tape so theta_m receives STE
    // gradients through score-dependent paths. Valid pairs use the same
    // dot / (|a| |b|) arithmetic as the pure computation (bit-identical);
    // zero-norm pairs enter as the constant -1.
    let valid_pos: Vec<usize> = (0..count).filter(|&i| sims.valid[i]).collect();
    let sims_node = if valid_pos.is_empty() {
        tape.input(Tensor::from_vec(vec![-1.0; count]))
    } else {
        let a_idx: Vec<usize> = valid_pos.iter().map(|&i| sims.a_tokens[i]).collect();
        let p_idx: Vec<usize> = valid_pos.iter().map(|&i| sims.partners[i]).collect();
        let rows_a = tape.gather_rows(kbar, &a_idx)?;
        let rows_b = tape.gather_rows(kbar, &p_idx)?;
        let prod = tape.mul(rows_a, rows_b)?;
        let dots = tape.row_sums(prod)?;
        // Denominator as sqrt(|a|^2 |b|^2), matching `cosine_similarity`
        // bit for bit so tape decisions agree with the pure scores.
        let sq_a = tape.mul(rows_a, rows_a)?;
        let sq_b = tape.mul(rows_b, rows_b)?;
        let na2 = tape.row_sums(sq_a)?;
        let nb2 = tape.row_sums(sq_b)?;
        let prod_n = tape.mul(na2, nb2)?;
        let denom = tape.sqrt(prod_n)?;
        let raw = tape.div(dots, denom)?;
        let clamped = tape.clamp(raw, -1.0, 1.0)?;
        if valid_pos.len() == count {
            clamped
        } else {
            // Splice constant -1 entries for the degenerate pairs.
            let scat = tape.scatter(clamped, &valid_pos, count)?;
            let mut base = vec![0.0; count];
            for i in 0..count {
                if !sims.valid[i] {
                    base[i] = -1.0;
                }
            }
            let base = tape.input(Tensor::from_vec(base));
            tape.add(scat, base)?
        }
    };

    let decisions = tape.threshold_mask(sims_node, theta_m, tau)?;
    apply_merge_decisions(tape, x, mask, sizes, origins, sims, decisions, weighting)
}

/// Fixed-rate (ToMe-style) merge: folds exactly `min(k, |A|)` set-A tokens
/// with the highest similarities into their partners. Decisions enter the
/// tape as constants; nothing is learned.
#[allow(clippy::too_many_arguments)]
pub fn merge_tokens_topk(
    tape: &mut Tape,
    x: NodeId,
    mask: NodeId,
    sizes: &mut [f64],
    origins: &mut [Vec<usize>],
    sims: &SimilarityScores,
    k: usize,
    weighting: MergeWeighting,
) -> Result<MergeOutcome, TapeError> {
    if sims.is_empty() || k == 0 {
        return Ok(MergeOutcome {
            x,
            mask,
            assignments: Vec::new(),
            decisions: None,
        });
    }
    let count = sims.a_tokens.len();
    let chosen = topk_select(&sims.values, k.min(count), true).expect("k clamped to len");
    let mut dec = vec![0.0; count];
    for &i in &chosen {
        dec[i] = 1.0;
    }
    let decisions = tape.input(Tensor::from_vec(dec));
    apply_merge_decisions(tape, x, mask, sizes, origins, sims, decisions, weighting)
}

/// Shared tail of the merge module: applies per-A-token decisions (merge
/// when > 0.5) to token values, sizes, origins, and the mask.
#[allow(clippy::too_many_arguments)]
fn apply_merge_decisions(
    tape: &mut Tape,
    x: NodeId,
    mask: NodeId,
    sizes: &mut [f64],
    origins: &mut [Vec<usize>],
    sims: &SimilarityScores,
    decisions: NodeId,
    weighting: MergeWeighting,
) -> Result<MergeOutcome, TapeError> {
    let n = tape.value(mask).len();
    let count = sims.a_tokens.len();

    // Hard control flow from the decision node's own values: > 0.5 means
    // merge in both mask modes (sigma((s - theta)/tau) > 0.5 iff s > theta).
    let merging: Vec<usize> = (0..count)
        .filter(|&i| tape.value(decisions).data()[i] > 0.5)
        .collect();

    // Value updates in source-index order; a_tokens ascend by construction,
    // so repeated merges into one destination compound left to right and the
    // running sizes keep the average exact.
    let mut assignments = Vec::with_capacity(merging.len());
    let mut xcur = x;
    for &i in &merging {
        let src = sims.a_tokens[i];
        let dst = sims.partners[i];
        let (ws, wd) = match weighting {
            MergeWeighting::SizeWeighted => {
                let total = sizes[src] + sizes[dst];
                (sizes[src] / total, sizes[dst] / total)
            }
            MergeWeighting::Pairwise => (0.5, 0.5),
        };
        let src_row = tape.gather_rows(xcur, &[src])?;
        let dst_row = tape.gather_rows(xcur, &[dst])?;
        let src_row = tape.scale(src_row, ws);
        let dst_row = tape.scale(dst_row, wd);
        let avg = tape.add(dst_row, src_row)?;
        xcur = tape.replace_row(xcur, dst, avg)?;
        sizes[dst] += sizes[src];
        sizes[src] = 0.0;
        let moved = std::mem::take(&mut origins[src]);
        origins[dst].extend(moved);
        assignments.push((src, dst));
    }

    // Mask update: merged sources leave the kept pool. keep = 1 - decision
    // at A positions, 1 elsewhere; the new mask is the elementwise product.
    let scat = tape.scatter(decisions, &sims.a_tokens, n)?;
    let neg = tape.scale(scat, -1.0);
    let keep = tape.add_const(neg, 1.0);
    let mask = tape.mul(mask, keep)?;

    Ok(MergeOutcome {
        x: xcur,
        mask,
        assignments,
        decisions: Some(decisions),
    })
}

/// Result of applying the prune module on the tape.
pub struct PruneOutcome {
    pub mask: NodeId,
    /// Tokens whose keep decision came out 0, ascending.
    pub pruned: Vec<usize>,
    pub decisions: Option<NodeId>,
}

/// Builds the prune module on the tape: tokens in `candidates` (the kept
/// non-CLS tokens) survive iff their importance exceeds `theta_p`. The mask
/// update follows Eq. 3 semantics: already-removed entries stay zero, CLS
/// and non-candidates pass through unchanged.
pub fn prune_tokens(
    tape: &mut Tape,
    mask: NodeId,
    importance_full: NodeId,
    candidates: &[usize],
    theta_p: NodeId,
    tau: f64,
) -> Result<PruneOutcome, TapeError> {
    if candidates.is_empty() {
        return Ok(PruneOutcome {
            mask,
            pruned: Vec::new(),
            decisions: None,
        });
    }
    let cand_scores = tape.gather_rows(importance_full, candidates)?;
    let decisions = tape.threshold_mask(cand_scores, theta_p, tau)?;
    apply_prune_decisions(tape, mask, candidates, decisions)
}

/// Fixed-rate prune: removes exactly `min(k, |candidates|)` lowest-importance
/// candidates. Decisions enter the tape as constants; nothing is learned.
pub fn prune_tokens_topk(
    tape: &mut Tape,
    mask: NodeId,
    importance_full: NodeId,
    candidates: &[usize],
    k: usize,
) -> Result<PruneOutcome, TapeError> {
    if candidates.is_empty() || k == 0 {
        return Ok(PruneOutcome {
            mask,
            pruned: Vec::new(),
            decisions: None,
        });
    }
    let scores: Vec<f64> = {
        let imp = tape.value(importance_full).data();
        candidates.iter().map(|&c| imp[c]).collect()
    };
    let drop = topk_select(&scores, k.min(candidates.len()), false).expect("k clamped to len");
    let mut dec = vec![1.0; candidates.len()];
    for &i in &drop {
        dec[i] = 0.0;
    }
    let decisions = tape.input(Tensor::from_vec(dec));
    apply_prune_decisions(tape, mask, candidates, decisions)
}

/// Shared tail of the prune module: applies per-candidate keep decisions
/// (keep when > 0.5) to the mask, leaving CLS and non-candidates untouched.
fn apply_prune_decisions(
    tape: &mut Tape,
    mask: NodeId,
    candidates: &[usize],
    decisions: NodeId,
) -> Result<PruneOutcome, TapeError> {
    let n = tape.value(mask).len();
    let pruned: Vec<usize> = candidates
        .iter()
        .enumerate()
        .filter(|&(i, _)| tape.value(decisions).data()[i] <= 0.5)
        .map(|(_, &tok)| tok)
        .collect();

    let scat = tape.scatter(decisions, candidates, n)?;
    let mut base = vec![1.0; n];
    for &c in candidates {
        base[c] = 0.0;
    }
    let base = tape.input(Tensor::from_vec(base));
    let full = tape.add(scat, base)?;
    let mask = tape.mul(mask, full)?;

    Ok(PruneOutcome {
        mask,
        pruned,
        decisions: Some(decisions),
    })
}

/// Mean column attention (the default importance score): how much all kept
/// tokens attend to token `i`, averaged over heads and kept rows,
///   s_i = (1 / (h * n_kept)) * sum_heads sum_{kept k} S[k, i].
/// Built as `m^T S` per head so masked rows drop out; returns a full-length
/// vector with exact zeros at masked columns.
pub fn mean_column_scores(
    tape: &mut Tape,
    s_heads: &[NodeId],
    mask: NodeId,
) -> Result<NodeId, TapeError> {
    assert!(!s_heads.is_empty(), "at least one attention head");
    let n = tape.value(mask).len();
    let m_row = tape.reshape(mask, vec![1, n])?;
    let mut total = None;
    for &s in s_heads {
        let col_mass = tape.matmul(m_row, s)?;
        total = Some(match total {
            None => col_mass,
            Some(t) => tape.add(t, col_mass)?,
        });
    }
    let total = total.expect("nonempty heads");
    let kept = tape.sum_all(mask);
    let divisor = tape.scale(kept, s_heads.len() as f64);
    let scaled = tape.div_scalar(total, divisor)?;
    tape.reshape(scaled, vec![n])
}

/// Class attention importance (Eq. 16 variant): the CLS row of each head's
/// masked softmax, summed over heads. Unnormalised, so entries lie in
/// `(0, h]` for kept columns and are exactly 0 at masked ones.
pub fn class_attention_scores(tape: &mut Tape, s_heads: &[NodeId]) -> Result<NodeId, TapeError> {
    assert!(!s_heads.is_empty(), "at least one attention head");
    let n = tape.value(s_heads[0]).cols();
    let mut total = None;
    for &s in s_heads {
        let row = tape.gather_rows(s, &[0])?;
        total = Some(match total {
            None => row,
            Some(t) => tape.add(t, row)?,
        });
    }
    tape.reshape(total.expect("nonempty heads"), vec![n])
}

/// Per-layer record of what the reduction modules did to one sample.
#[derive(Clone, Debug, Serialize)]
pub struct LayerTrace {
    pub layer: usize,
    pub kept_before: usize,
    pub merged: usize,
    pub pruned: usize,
    /// (source, destination) merge pairs in application order.
    pub merge_assignments: Vec<(usize, usize)>,
    pub pruned_tokens: Vec<usize>,
    pub kept_after: Vec<usize>,
    /// (token, importance) over the non-class tokens alive when the layer's
    /// reduction stage began, before any merge or prune this layer.
    pub importance: Vec<(usize, f64)>,
    /// (a_token, partner, similarity) over this layer's set-A tokens.
    pub similarity: Vec<(usize, usize, f64)>,
    /// For each kept token, the original token indices it now represents.
    pub kept_origins: Vec<(usize, Vec<usize>)>,
}

/// Per-sample reduction history, one entry per block; the data behind the
/// distribution reports and token visualisations.
#[derive(Clone, Debug, Default, Serialize)]
pub struct ReductionTrace {
    pub layers: Vec<LayerTrace>,
}

impl ReductionTrace {
    /// Serialises as JSON lines, one record per layer.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for layer in &self.layers {
            out.push_str(&serde_json::to_string(layer).expect("trace serialises"));
            out.push('\n');
        }
        out
    }
}

/// Importance and similarity scores of one layer, as consumed by the
/// correlation analysis.
#[derive(Clone, Debug, Default)]
pub struct ScoreVectors {
    /// (token, importance) over the non-class tokens alive at stage entry.
    pub importance: Vec<(usize, f64)>,
    pub similarity: SimilarityScores,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::MaskMode;
    use proptest::prelude::*;

    #[test]
    fn threshold_mask_uses_strict_comparison() {
        assert_eq!(threshold_mask(&[0.7, 0.1, 0.4], 0.4), vec![1.0, 0.0, 0.0]);
        // theta below the minimum keeps everything.
        assert_eq!(threshold_mask(&[0.7, 0.1, 0.4], 0.05), vec![1.0, 1.0, 1.0]);
        // theta at the maximum drops the argmax too.
        assert_eq!(threshold_mask(&[0.7, 0.1, 0.4], 0.7), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn ste_grad_reference_values() {
        // At s = theta the sigmoid sits at 1/2, so sigma' = 1/4 and
        // d mask / d theta = -0.25 / tau = -2.5 for tau = 0.1.
        let (ds, dth) = threshold_mask_ste_grad(0.3, 0.3, 0.1);
        assert!((dth - (-2.5)).abs() < 1e-12, "{dth}");
        assert!((ds - 2.5).abs() < 1e-12);
        // Chain-rule symmetry holds everywhere.
        for (s, th) in [(0.1, 0.6), (0.9, 0.2), (0.5, 0.5)] {
            let (ds, dth) = threshold_mask_ste_grad(s, th, 0.1);
            assert_eq!(ds, -dth);
        }
        // Saturation far from the threshold.
        let (ds, dth) = threshold_mask_ste_grad(5.0, 0.0, 0.1);
        assert!(ds.abs() < 1e-15 && dth.abs() < 1e-15);
    }

    #[test]
    fn update_mask_carries_removals_forward() {
        assert_eq!(
            update_mask(&[1.0, 0.0, 1.0], &[0.0, 1.0, 1.0]),
            vec![0.0, 0.0, 1.0]
        );
        assert_eq!(
            update_mask(&[1.0, 1.0, 1.0], &[0.0, 1.0, 0.0]),
            vec![0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn topk_select_examples() {
        assert_eq!(topk_select(&[3.0, 1.0, 2.0], 2, true).unwrap(), vec![0, 2]);
        assert_eq!(topk_select(&[3.0, 1.0, 2.0], 0, true).unwrap(), Vec::<usize>::new());
        // Ties break toward the lower index.
        assert_eq!(topk_select(&[5.0, 5.0, 1.0], 1, true).unwrap(), vec![0]);
        assert_eq!(topk_select(&[2.0, 1.0, 1.0], 1, false).unwrap(), vec![1]);
        assert_eq!(
            topk_select(&[1.0], 2, true),
            Err(ReductionError::KTooLarge { k: 2, len: 1 })
        );
    }

    #[test]
    fn bipartite_partition_alternates_in_kept_order() {
        let p = bipartite_partition(&[2, 5, 7, 9, 11]);
        assert_eq!(p.set_a, vec![2, 7, 11]);
        assert_eq!(p.set_b, vec![5, 9]);
    }

    #[test]
    fn identical_keys_have_similarity_one() {
        // Tokens 1 and 2 carry the same key and land in A and B.
        let kbar = Tensor::from_rows(&[
            vec![9.0, 9.0], // CLS row, ignored
            vec![0.3, -1.2],
            vec![0.3, -1.2],
        ]);
        let sims = bipartite_similarity(&kbar, &[1, 2]);
        assert_eq!(sims.a_tokens, vec![1]);
        assert_eq!(sims.partners, vec![2]);
        assert_eq!(sims.values, vec![1.0]); // clamped, exactly 1
        assert!(sims.valid[0]);
    }

    #[test]
    fn orthogonal_keys_have_similarity_zero() {
        let kbar = Tensor::from_rows(&[
            vec![1.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ]);
        let sims = bipartite_similarity(&kbar, &[1, 2]);
        assert_eq!(sims.values, vec![0.0]);
    }

    #[test]
    fn zero_norm_keys_never_match() {
        let kbar = Tensor::from_rows(&[
            vec![1.0, 1.0],
            vec![0.0, 0.0], // degenerate A key
            vec![1.0, 0.0],
        ]);
        let sims = bipartite_similarity(&kbar, &[1, 2]);
        assert_eq!(sims.values, vec![-1.0]);
        assert!(!sims.valid[0]);
        assert_eq!(sims.zero_norm_keys, 1);
    }

    #[test]
    fn similarity_matches_exhaustive_oracle() {
        // Spec oracle: exhaustive pairwise cosine restricted to the
        // alternating partition, for several random key sets up to n = 12.
        let mut r = crate::rng::Rng::seeded(99);
        for n in [2usize, 5, 6, 9, 12] {
            let kept: Vec<usize> = (1..=n).collect();
            let kbar_rows: Vec<Vec<f64>> = (0..=n)
                .map(|_| (0..4).map(|_| r.normal(0.0, 1.0)).collect())
                .collect();
            let kbar = Tensor::from_rows(&kbar_rows);
            let sims = bipartite_similarity(&kbar, &kept);

            let part = bipartite_partition(&kept);
            assert_eq!(sims.a_tokens, part.set_a);
            for (i, &a) in part.set_a.iter().enumerate() {
                let mut best = f64::NEG_INFINITY;
                let mut arg = usize::MAX;
                for &b in &part.set_b {
                    let c = cosine_similarity(kbar.row(a), kbar.row(b));
                    if c > best {
                        best = c;
                        arg = b;
                    }
                }
                assert!((sims.values[i] - best).abs() <= 1e-12);
                assert_eq!(sims.partners[i], arg);
            }
        }
    }

    /// Convenience: tape with an x / mask / kbar triple as constants.
    fn merge_fixture(
        rows: &[Vec<f64>],
        mask: &[f64],
        theta_m: f64,
    ) -> (Tape, NodeId, NodeId, NodeId, NodeId) {
        let mut t = Tape::new(MaskMode::Hard);
        let x = t.input(Tensor::from_rows(rows));
        let m = t.input(Tensor::from_vec(mask.to_vec()));
        let kbar = t.input(Tensor::from_rows(rows)); // keys = values, fine for tests
        let th = t.input(Tensor::scalar(theta_m));
        (t, x, m, kbar, th)
    }

    #[test]
    fn theta_one_never_merges() {
        let rows = vec![
            vec![0.0, 0.0, 1.0],
            vec![1.0, 2.0, 3.0],
            vec![1.0, 2.0, 3.0], // identical to token 1: similarity exactly 1
            vec![-1.0, 0.5, 2.0],
        ];
        let (mut t, x, m, kbar, th) = merge_fixture(&rows, &[1.0; 4], 1.0);
        let kept = vec![1, 2, 3];
        let sims = bipartite_similarity(t.value(kbar), &kept);
        let mut sizes = vec![1.0; 4];
        let mut origins: Vec<Vec<usize>> = (0..4).map(|i| vec![i]).collect();
        let out = merge_tokens(
            &mut t, x, m, &mut sizes, &mut origins, kbar, &sims, th, 0.1,
            MergeWeighting::SizeWeighted,
        )
        .unwrap();
        // Cosine is clamped to <= 1 and the comparison is strict.
        assert!(out.assignments.is_empty());
        assert_eq!(t.value(out.mask).data(), &[1.0; 4]);
        assert_eq!(sizes, vec![1.0; 4]);
    }

    #[test]
    fn merging_identical_tokens_preserves_value_and_sums_size() {
        let rows = vec![
            vec![0.5, 0.5],
            vec![1.0, 2.0],
            vec![1.0, 2.0],
        ];
        let (mut t, x, m, kbar, th) = merge_fixture(&rows, &[1.0; 3], 0.9);
        let kept = vec![1, 2];
        let sims = bipartite_similarity(t.value(kbar), &kept);
        let mut sizes = vec![1.0; 3];
        let mut origins: Vec<Vec<usize>> = (0..3).map(|i| vec![i]).collect();
        let out = merge_tokens(
            &mut t, x, m, &mut sizes, &mut origins, kbar, &sims, th, 0.1,
            MergeWeighting::SizeWeighted,
        )
        .unwrap();
        assert_eq!(out.assignments, vec![(1, 2)]);
        // Destination value unchanged (average of identical rows).
        assert_eq!(t.value(out.x).row(2), &[1.0, 2.0]);
        assert_eq!(sizes, vec![1.0, 0.0, 2.0]);
        assert_eq!(origins[2], vec![2, 1]);
        // Source mask cleared, destination kept.
        assert_eq!(t.value(out.mask).data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn size_weighted_average_is_exact() {
        // Source (A) has size 1 and value v; destination (B) has size 3 and
        // value w. Nearly parallel keys force the merge; the merged value
        // must be (3w + v) / 4 and total size is conserved.
        let v = [2.0, -4.0];
        let w = [10.0, 6.0];
        let rows = vec![vec![0.1, 0.1], v.to_vec(), w.to_vec()];
        let mut t = Tape::new(MaskMode::Hard);
        let x = t.input(Tensor::from_rows(&rows));
        let m = t.input(Tensor::from_vec(vec![1.0; 3]));
        // Keys chosen parallel so similarity is exactly 1 despite distinct values.
        let kbar = t.input(Tensor::from_rows(&[
            vec![0.0, 1.0],
            vec![0.0, 2.0],
            vec![0.0, 3.0],
        ]));
        let th = t.input(Tensor::scalar(0.5));
        let sims = bipartite_similarity(t.value(kbar), &[1, 2]);
        let mut sizes = vec![1.0, 1.0, 3.0];
        let mut origins: Vec<Vec<usize>> = (0..3).map(|i| vec![i]).collect();
        let total_before: f64 = sizes.iter().sum();
        let out = merge_tokens(
            &mut t, x, m, &mut sizes, &mut origins, kbar, &sims, th, 0.1,
            MergeWeighting::SizeWeighted,
        )
        .unwrap();
        let merged = t.value(out.x).row(2);
        for j in 0..2 {
            let expect = (3.0 * w[j] + v[j]) / 4.0;
            assert!((merged[j] - expect).abs() < 1e-15);
        }
        assert_eq!(sizes, vec![1.0, 0.0, 4.0]);
        assert_eq!(sizes.iter().sum::<f64>(), total_before);
    }

    #[test]
    fn many_to_one_merges_compound_to_the_true_mean() {
        // A = {1, 3}, B = {2}; both A tokens merge into token 2. Sequential
        // size-weighted averaging must equal the mean of all three values.
        let rows = vec![
            vec![0.0],
            vec![3.0],
            vec![6.0],
            vec![12.0],
        ];
        let mut t = Tape::new(MaskMode::Hard);
        let x = t.input(Tensor::from_rows(&rows));
        let m = t.input(Tensor::from_vec(vec![1.0; 4]));
        let kbar = t.input(Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![2.0, 0.0],
            vec![3.0, 0.0],
            vec![4.0, 0.0],
        ]));
        let th = t.input(Tensor::scalar(0.9));
        let sims = bipartite_similarity(t.value(kbar), &[1, 2, 3]);
        let mut sizes = vec![1.0; 4];
        let mut origins: Vec<Vec<usize>> = (0..4).map(|i| vec![i]).collect();
        let out = merge_tokens(
            &mut t, x, m, &mut sizes, &mut origins, kbar, &sims, th, 0.1,
            MergeWeighting::SizeWeighted,
        )
        .unwrap();
        assert_eq!(out.assignments, vec![(1, 2), (3, 2)]);
        let got = t.value(out.x).at(2, 0);
        assert!((got - (3.0 + 6.0 + 12.0) / 3.0).abs() < 1e-15, "{got}");
        assert_eq!(sizes[2], 3.0);
        assert_eq!(origins[2], vec![2, 1, 3]);
    }

    #[test]
    fn pairwise_weighting_ignores_sizes() {
        let rows = vec![vec![0.0], vec![4.0], vec![8.0]];
        let mut t = Tape::new(MaskMode::Hard);
        let x = t.input(Tensor::from_rows(&rows));
        let m = t.input(Tensor::from_vec(vec![1.0; 3]));
        let kbar = t.input(Tensor::from_rows(&[
            vec![1.0],
            vec![1.0],
            vec![1.0],
        ]));
        let th = t.input(Tensor::scalar(0.5));
        let sims = bipartite_similarity(t.value(kbar), &[1, 2]);
        let mut sizes = vec![1.0, 1.0, 7.0];
        let mut origins: Vec<Vec<usize>> = (0..3).map(|i| vec![i]).collect();
        let out = merge_tokens(
            &mut t, x, m, &mut sizes, &mut origins, kbar, &sims, th, 0.1,
            MergeWeighting::Pairwise,
        )
        .unwrap();
        assert_eq!(t.value(out.x).at(2, 0), 6.0); // plain (4 + 8) / 2
        assert_eq!(sizes, vec![1.0, 0.0, 8.0]); // sizes still conserved
    }

    #[test]
    fn tape_similarity_decisions_match_pure_scores_bitwise() {
        // Plant theta exactly at each pure similarity value: with strict
        // '>' that pair must not merge, while any strictly larger pair must.
        // A single-ulp disagreement between the tape's reconstruction and
        // the pure computation would flip one of these decisions.
        let mut r = crate::rng::Rng::seeded(123);
        let rows: Vec<Vec<f64>> = (0..9)
            .map(|_| (0..5).map(|_| r.normal(0.0, 1.0)).collect())
            .collect();
        let kept: Vec<usize> = (1..9).collect();
        let pure = bipartite_similarity(&Tensor::from_rows(&rows), &kept);
        assert!(!pure.is_empty());

        for i in 0..pure.a_tokens.len() {
            let mut t = Tape::new(MaskMode::Hard);
            let x = t.input(Tensor::from_rows(&rows));
            let m = t.input(Tensor::from_vec(vec![1.0; 9]));
            let kbar = t.input(Tensor::from_rows(&rows));
            let th = t.input(Tensor::scalar(pure.values[i]));
            let mut sizes = vec![1.0; 9];
            let mut origins: Vec<Vec<usize>> = (0..9).map(|k| vec![k]).collect();
            let out = merge_tokens(
                &mut t, x, m, &mut sizes, &mut origins, kbar, &pure, th, 0.1,
                MergeWeighting::SizeWeighted,
            )
            .unwrap();
            let merged_sources: Vec<usize> =
                out.assignments.iter().map(|&(s, _)| s).collect();
            assert!(
                !merged_sources.contains(&pure.a_tokens[i]),
                "pair {i} merged at theta == its own score"
            );
            for j in 0..pure.a_tokens.len() {
                if pure.values[j] > pure.values[i] {
                    assert!(merged_sources.contains(&pure.a_tokens[j]));
                }
            }
        }
    }

    #[test]
    fn prune_theta_zero_keeps_everything() {
        let mut t = Tape::new(MaskMode::Hard);
        let mask = t.input(Tensor::from_vec(vec![1.0; 4]));
        let imp = t.input(Tensor::from_vec(vec![0.9, 0.5, 0.2, 0.3]));
        let th = t.input(Tensor::scalar(0.0));
        let out = prune_tokens(&mut t, mask, imp, &[1, 2, 3], th, 0.1).unwrap();
        assert!(out.pruned.is_empty());
        assert_eq!(t.value(out.mask).data(), &[1.0; 4]);
    }

    #[test]
    fn prune_above_max_keeps_only_cls() {
        let mut t = Tape::new(MaskMode::Hard);
        let mask = t.input(Tensor::from_vec(vec![1.0; 4]));
        let imp = t.input(Tensor::from_vec(vec![0.9, 0.5, 0.2, 0.3]));
        let th = t.input(Tensor::scalar(0.5)); // == max candidate score
        let out = prune_tokens(&mut t, mask, imp, &[1, 2, 3], th, 0.1).unwrap();
        assert_eq!(out.pruned, vec![1, 2, 3]);
        assert_eq!(t.value(out.mask).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pruned_set_is_exactly_scores_at_or_below_theta() {
        let mut t = Tape::new(MaskMode::Hard);
        let mask = t.input(Tensor::from_vec(vec![1.0; 4]));
        let imp = t.input(Tensor::from_vec(vec![0.9, 0.5, 0.2, 0.3]));
        let th = t.input(Tensor::scalar(0.25));
        let out = prune_tokens(&mut t, mask, imp, &[1, 2, 3], th, 0.1).unwrap();
        assert_eq!(out.pruned, vec![2]);
        assert_eq!(t.value(out.mask).data(), &[1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn prune_respects_previously_removed_tokens() {
        // Token 3 is already masked; a positive decision cannot revive it.
        let mut t = Tape::new(MaskMode::Hard);
        let mask = t.input(Tensor::from_vec(vec![1.0, 1.0, 0.0, 1.0]));
        let imp = t.input(Tensor::from_vec(vec![0.9, 0.5, 0.4, 0.3]));
        let th = t.input(Tensor::scalar(0.1));
        let out = prune_tokens(&mut t, mask, imp, &[1, 3], th, 0.1).unwrap();
        assert_eq!(t.value(out.mask).data(), &[1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn mean_column_scores_uniform_example() {
        // h = 1, two kept tokens, uniform attention: every column scores
        // (1 / (1 * 2)) * (0.5 + 0.5) = 0.5, and the kept scores sum to 1.
        let mut t = Tape::new(MaskMode::Hard);
        let s = t.input(Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]));
        let mask = t.input(Tensor::from_vec(vec![1.0, 1.0]));
        let scores = mean_column_scores(&mut t, &[s], mask).unwrap();
        assert_eq!(t.value(scores).data(), &[0.5, 0.5]);
    }

    #[test]
    fn class_attention_uniform_example() {
        // h = 1, CLS attends uniformly over CLS + 2 kept tokens: each
        // column scores 1/3.
        let mut t = Tape::new(MaskMode::Hard);
        let third = 1.0 / 3.0;
        let s = t.input(Tensor::from_rows(&[
            vec![third, third, third],
            vec![third, third, third],
            vec![third, third, third],
        ]));
        let scores = class_attention_scores(&mut t, &[s]).unwrap();
        for &v in t.value(scores).data() {
            assert!((v - third).abs() < 1e-15);
        }
    }

    /// Random masked-softmax cache for the score oracles: `heads` random
    /// logit matrices put through the real masked softmax.
    fn random_cache(n: usize, heads: usize, mask: &[f64], seed: u64) -> Vec<Tensor> {
        let mut r = crate::rng::Rng::seeded(seed);
        let m = Tensor::from_vec(mask.to_vec());
        (0..heads)
            .map(|_| {
                let logits = Tensor::new(
                    vec![n, n],
                    (0..n * n).map(|_| r.normal(0.0, 1.0)).collect(),
                )
                .unwrap();
                logits.masked_softmax(&m).unwrap()
            })
            .collect()
    }

    #[test]
    fn mean_column_scores_match_naive_oracle() {
        let n = 7;
        let mask = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let cache = random_cache(n, 3, &mask, 7);
        let mut t = Tape::new(MaskMode::Hard);
        let s_nodes: Vec<NodeId> = cache.iter().map(|s| t.input(s.clone())).collect();
        let m = t.input(Tensor::from_vec(mask.to_vec()));
        let scores = mean_column_scores(&mut t, &s_nodes, m).unwrap();

        // Naive double sum over kept rows, per head, then the same
        // head-then-normalise order as the builder.
        let n_kept = mask.iter().filter(|&&x| x > 0.0).count() as f64;
        for j in 0..n {
            let mut total = 0.0;
            for s in &cache {
                let mut head_sum = 0.0;
                for k in 0..n {
                    if mask[k] > 0.0 {
                        head_sum += s.at(k, j);
                    }
                }
                total += head_sum;
            }
            let expect = total / (3.0 * n_kept);
            let got = t.value(scores).data()[j];
            assert!((got - expect).abs() <= 1e-12, "col {j}: {got} vs {expect}");
            if mask[j] == 0.0 {
                assert_eq!(got, 0.0, "masked column must score exactly zero");
            }
        }
        // Kept scores are a distribution over columns: they sum to 1.
        let sum: f64 = t.value(scores).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn class_attention_scores_match_naive_oracle() {
        let n = 6;
        let mask = [1.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let cache = random_cache(n, 4, &mask, 8);
        let mut t = Tape::new(MaskMode::Hard);
        let s_nodes: Vec<NodeId> = cache.iter().map(|s| t.input(s.clone())).collect();
        let scores = class_attention_scores(&mut t, &s_nodes).unwrap();
        for j in 0..n {
            let expect: f64 = cache.iter().map(|s| s.at(0, j)).sum();
            let got = t.value(scores).data()[j];
            assert!((got - expect).abs() <= 1e-12);
            if mask[j] == 0.0 {
                assert_eq!(got, 0.0);
            }
        }
    }

    #[test]
    fn threshold_set_init_is_inert() {
        let ts = ThresholdSet::init(4);
        assert!(ts.is_valid());
        assert_eq!(ts.theta_merge, vec![1.0; 4]);
        assert_eq!(ts.theta_prune, vec![0.0; 4]);
        assert_eq!(ts.tau, DEFAULT_TAU);
    }

    #[test]
    fn topk_merge_folds_exactly_k_most_similar() {
        // Keys: tokens 1 and 3 identical (similarity 1), token 5 orthogonal
        // to everything in B. With k=1 only the (1, 2)-ish best pair merges.
        let kbar = Tensor::from_rows(&[
            vec![9.0, 9.0], // CLS, ignored
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.8, 0.6],
            vec![0.8, 0.6],
            vec![0.0, 1.0],
        ]);
        let kept: Vec<usize> = (1..6).collect();
        let sims = bipartite_similarity(&kbar, &kept);
        let mut t = Tape::new(MaskMode::Hard);
        let x = t.input(Tensor::filled(&[6, 2], 1.0));
        let mask = t.input(Tensor::from_vec(vec![1.0; 6]));
        let mut sizes = vec![1.0; 6];
        let mut origins: Vec<Vec<usize>> = (0..6).map(|i| vec![i]).collect();
        let out = merge_tokens_topk(
            &mut t,
            x,
            mask,
            &mut sizes,
            &mut origins,
            &sims,
            1,
            MergeWeighting::SizeWeighted,
        )
        .unwrap();
        assert_eq!(out.assignments.len(), 1);
        let (src, _) = out.assignments[0];
        assert_eq!(t.value(out.mask).data()[src], 0.0);
        let kept_now: f64 = t.value(out.mask).data().iter().sum();
        assert_eq!(kept_now, 5.0);
        assert_eq!(sizes.iter().sum::<f64>(), 6.0);
    }

    #[test]
    fn topk_prune_removes_exactly_k_least_important() {
        let mut t = Tape::new(MaskMode::Hard);
        let mask = t.input(Tensor::from_vec(vec![1.0; 5]));
        let imp = t.input(Tensor::from_vec(vec![9.0, 0.4, 0.1, 0.3, 0.2]));
        let candidates = vec![1, 2, 3, 4];
        let out = prune_tokens_topk(&mut t, mask, imp, &candidates, 2).unwrap();
        assert_eq!(out.pruned, vec![2, 4]);
        assert_eq!(
            t.value(out.mask).data(),
            &[1.0, 1.0, 0.0, 1.0, 0.0],
            "two least important candidates drop, CLS untouched"
        );
        // k larger than the candidate pool clamps.
        let mut t2 = Tape::new(MaskMode::Hard);
        let mask2 = t2.input(Tensor::from_vec(vec![1.0; 5]));
        let imp2 = t2.input(Tensor::from_vec(vec![9.0, 0.4, 0.1, 0.3, 0.2]));
        let all = prune_tokens_topk(&mut t2, mask2, imp2, &candidates, 99).unwrap();
        assert_eq!(all.pruned, candidates);
    }

    proptest! {
        #[test]
        fn update_mask_never_exceeds_previous(
            prev in proptest::collection::vec(proptest::bool::ANY, 1..20),
            dec in proptest::collection::vec(proptest::bool::ANY, 1..20)
        ) {
            let n = prev.len().min(dec.len());
            let p: Vec<f64> = prev[..n].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let d: Vec<f64> = dec[..n].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let u = update_mask(&p, &d);
            for i in 0..n {
                prop_assert!(u[i] <= p[i]);
                if p[i] == 1.0 {
                    prop_assert_eq!(u[i], d[i]);
                }
            }
        }

        #[test]
        fn ste_theta_gradient_is_never_positive(
            s in -2.0f64..2.0,
            th in -2.0f64..2.0,
            tau in 0.01f64..1.0
        ) {
            let (_, dth) = threshold_mask_ste_grad(s, th, tau);
            prop_assert!(dth <= 0.0);
        }

        #[test]
        fn threshold_between_order_statistics_equals_topk(
            raw in proptest::collection::vec(0.001f64..1.0, 4..24),
            kfrac in 0.0f64..1.0
        ) {
            // Deduplicate so the k-th and (k+1)-th order statistics are
            // strictly separated, the precondition of the bridge property.
            let mut sorted = raw.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            sorted.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
            prop_assume!(sorted.len() >= 3);
            let scores = sorted.clone();
            let k = 1 + ((kfrac * (scores.len() - 2) as f64) as usize);

            let mut desc = scores.clone();
            desc.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let theta = 0.5 * (desc[k - 1] + desc[k]);

            let kept_by_threshold: Vec<usize> = threshold_mask(&scores, theta)
                .iter()
                .enumerate()
                .filter(|(_, &m)| m == 1.0)
                .map(|(i, _)| i)
                .collect();
            let kept_by_topk = topk_select(&scores, k, true).unwrap();
            prop_assert_eq!(kept_by_threshold, kept_by_topk);
        }
    }
}
