//! Rank correlation between the two scores and reduction-count reports.
//!
//! The interesting empirical question about merge-vs-prune is whether
//! similarity and importance rank tokens the same way. If they did, one
//! module would subsume the other; the case for running both rests on the
//! correlation being low. [`correlation_report`] measures it the way the
//! reference protocol does: run the model with both modules in fixed top-k
//! mode so every layer sees a full candidate set, then compute Kendall's
//! tau-b per sample between a token's importance and its best-partner
//! similarity, restricted to set-A tokens (the only ones that carry a
//! similarity score), and average the per-sample taus.
//!
//! [`k_distribution_report`] summarises how many tokens each layer's merge
//! and prune stages actually removed across a split — the distribution that
//! shows merging dominating early layers and pruning catching up later.

use crate::data::Dataset;
use crate::model::{
    model_forward, Checkpoint, ExecMode, ModelError, ReductionOrder, TrainableSet,
};
use crate::tape::MaskMode;
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 observations, got {0}")]
    TooShort(usize),
    #[error("zero variance in {0}: tau is undefined when every pair is tied")]
    ZeroVariance(&'static str),
    #[error("scores must be finite")]
    NonFinite,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn pair_count(group: usize) -> u64 {
    let g = group as u64;
    g * (g - 1) / 2
}

/// Counts strict inversions (`a[i] > a[j]` for `i < j`) while merge-sorting
/// the slice in place.
fn count_inversions(a: &mut [f64]) -> u64 {
    let n = a.len();
    let mut buf = vec![0.0; n];
    let mut swaps = 0u64;
    let mut width = 1;
    while width < n {
        let mut start = 0;
        while start + width < n {
            let mid = start + width;
            let end = (start + 2 * width).min(n);
            let (mut i, mut j, mut k) = (start, mid, start);
            while i < mid && j < end {
                if a[i] <= a[j] {
                    buf[k] = a[i];
                    i += 1;
                } else {
                    buf[k] = a[j];
                    j += 1;
                    swaps += (mid - i) as u64;
                }
                k += 1;
            }
            buf[k..k + (mid - i)].copy_from_slice(&a[i..mid]);
            buf[k + (mid - i)..end].copy_from_slice(&a[j..end]);
            a[start..end].copy_from_slice(&buf[start..end]);
            start = end;
        }
        width *= 2;
    }
    swaps
}

/// Kendall's tau-b: tie-corrected rank correlation over all pairs,
/// `(C - D) / sqrt((n0 - n1)(n0 - n2))` with `n1`/`n2` the pair counts tied
/// in `x`/`y`. Computed with Knight's O(n log n) algorithm — sort by
/// `(x, y)`, then count inversions of `y` — which the tests pin against a
/// brute-force pair enumeration.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(AnalysisError::TooShort(n));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }

    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));

    // Tie pairs in x (n1) and joint tie pairs (n3), walking runs of equal x
    // and, inside each, runs of equal y.
    let mut n1 = 0u64;
    let mut n3 = 0u64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && x[idx[j]] == x[idx[i]] {
            j += 1;
        }
        n1 += pair_count(j - i);
        let mut a = i;
        while a < j {
            let mut b = a + 1;
            while b < j && y[idx[b]] == y[idx[a]] {
                b += 1;
            }
            n3 += pair_count(b - a);
            a = b;
        }
        i = j;
    }

    let mut n2 = 0u64;
    let mut y_sorted: Vec<f64> = y.to_vec();
    y_sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && y_sorted[j] == y_sorted[i] {
            j += 1;
        }
        n2 += pair_count(j - i);
        i = j;
    }

    let n0 = pair_count(n);
    if n1 == n0 {
        return Err(AnalysisError::ZeroVariance("x"));
    }
    if n2 == n0 {
        return Err(AnalysisError::ZeroVariance("y"));
    }

    let mut y_by_x: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let swaps = count_inversions(&mut y_by_x);
    // C - D: total pairs minus ties (joint ties subtracted twice, add back)
    // minus two per discordant pair.
    let numer = n0 as i128 - n1 as i128 - n2 as i128 + n3 as i128 - 2 * swaps as i128;
    let denom = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    Ok(numer as f64 / denom)
}

/// Tau between importance and similarity for one layer: each set-A entry
/// `(a, partner, sim)` is joined with `a`'s importance score.
pub fn layer_tau(
    importance: &[(usize, f64)],
    similarity: &[(usize, usize, f64)],
) -> Result<f64, AnalysisError> {
    let by_token: HashMap<usize, f64> = importance.iter().copied().collect();
    let mut imp = Vec::with_capacity(similarity.len());
    let mut sim = Vec::with_capacity(similarity.len());
    for &(a, _, s) in similarity {
        if let Some(&v) = by_token.get(&a) {
            imp.push(v);
            sim.push(s);
        }
    }
    kendall_tau(&imp, &sim)
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerCorrelation {
    pub layer: usize,
    /// Mean per-sample tau-b; `None` when no sample had enough scores.
    pub mean_tau: Option<f64>,
    pub samples_used: usize,
    pub samples_skipped: usize,
    /// Samples where this layer had fewer than `k` candidate pairs, so the
    /// top-k stages clamped.
    pub samples_clamped: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct CorrelationReport {
    pub k: usize,
    pub samples: usize,
    /// How the numbers were aggregated, recorded so the table is
    /// self-describing.
    pub method: String,
    pub layers: Vec<LayerCorrelation>,
}

impl CorrelationReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "score correlation: top-k both, k={}, {} samples\n{}\nlayer  mean_tau    used  skipped  clamped\n",
            self.k, self.samples, self.method
        );
        for l in &self.layers {
            let tau = match l.mean_tau {
                Some(t) => format!("{t:8.4}"),
                None => "     n/a".to_string(),
            };
            out.push_str(&format!(
                "{:5}  {tau}  {:6}  {:7}  {:7}\n",
                l.layer, l.samples_used, l.samples_skipped, l.samples_clamped
            ));
        }
        out
    }
}

/// Runs the checkpoint's backbone with both reduction modules forced into
/// fixed top-k mode (`k` per module per layer) and reports the per-layer
/// mean tau between importance and set-A similarity.
pub fn correlation_report(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    k: usize,
) -> Result<CorrelationReport, AnalysisError> {
    if dataset.is_empty() {
        return Err(AnalysisError::EmptyDataset);
    }
    if k == 0 {
        return Err(AnalysisError::ZeroK);
    }
    let mut cfg = ckpt.config.clone();
    cfg.reduction_order = ReductionOrder::TopkBoth;
    cfg.topk_k = k;

    let blocks = cfg.blocks;
    let mut sums = vec![0.0; blocks];
    let mut used = vec![0usize; blocks];
    let mut skipped = vec![0usize; blocks];
    let mut clamped = vec![0usize; blocks];
    for idx in 0..dataset.len() {
        let image = dataset.image_tensor(idx);
        let fwd = model_forward(
            &image,
            &cfg,
            &ckpt.params,
            &ckpt.thresholds,
            ExecMode::Inference,
            MaskMode::Hard,
            TrainableSet::Frozen,
        )?;
        for (l, layer) in fwd.trace.layers.iter().enumerate() {
            if layer.similarity.len() < k {
                clamped[l] += 1;
                log::debug!(
                    "sample {idx} layer {l}: only {} candidate pairs, k={k} clamped",
                    layer.similarity.len()
                );
            }
            match layer_tau(&layer.importance, &layer.similarity) {
                Ok(tau) => {
                    sums[l] += tau;
                    used[l] += 1;
                }
                Err(e) => {
                    skipped[l] += 1;
                    log::debug!("sample {idx} layer {l}: tau skipped ({e})");
                }
            }
        }
    }

    let layers = (0..blocks)
        .map(|l| LayerCorrelation {
            layer: l,
            mean_tau: (used[l] > 0).then(|| sums[l] / used[l] as f64),
            samples_used: used[l],
            samples_skipped: skipped[l],
            samples_clamped: clamped[l],
        })
        .collect();
    Ok(CorrelationReport {
        k,
        samples: dataset.len(),
        method: "per-sample tau-b between importance and set-A similarity, averaged over samples"
            .to_string(),
        layers,
    })
}

/// Distribution summary of one per-layer count across a split.
#[derive(Clone, Debug, Serialize)]
pub struct CountDistribution {
    /// `(count, frequency)` in ascending count order.
    pub histogram: Vec<(usize, usize)>,
    /// Linear-interpolation quartiles `[q1, median, q3]`.
    pub quartiles: [f64; 3],
    pub mean: f64,
}

fn distribution(counts: &[usize]) -> CountDistribution {
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in counts {
        *hist.entry(c).or_insert(0) += 1;
    }
    let mut sorted: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = (sorted.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    CountDistribution {
        histogram: hist.into_iter().collect(),
        quartiles: [q(0.25), q(0.5), q(0.75)],
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerKDist {
    pub layer: usize,
    pub merged: CountDistribution,
    pub pruned: CountDistribution,
}

#[derive(Clone, Debug, Serialize)]
pub struct KDistReport {
    pub samples: usize,
    pub layers: Vec<LayerKDist>,
}

impl KDistReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "reduction distribution over {} samples (q1/median/q3, mean)\nlayer                    merged                    pruned\n",
            self.samples
        );
        let cell = |d: &CountDistribution| {
            format!(
                "{:.1}/{:.1}/{:.1} ({:.2})",
                d.quartiles[0], d.quartiles[1], d.quartiles[2], d.mean
            )
        };
        for l in &self.layers {
            out.push_str(&format!(
                "{:5}  {:>24}  {:>24}\n",
                l.layer,
                cell(&l.merged),
                cell(&l.pruned)
            ));
        }
        out
    }
}

/// Per-layer histograms and quartiles of how many tokens the merge and
/// prune stages removed, over a full split, using the checkpoint's own
/// reduction configuration.
pub fn k_distribution_report(
    ckpt: &Checkpoint,
    dataset: &Dataset,
) -> Result<KDistReport, AnalysisError> {
    if dataset.is_empty() {
        return Err(AnalysisError::EmptyDataset);
    }
    let cfg = &ckpt.config;
    let mut merged: Vec<Vec<usize>> = vec![Vec::with_capacity(dataset.len()); cfg.blocks];
    let mut pruned: Vec<Vec<usize>> = vec![Vec::with_capacity(dataset.len()); cfg.blocks];
    for idx in 0..dataset.len() {
        let image = dataset.image_tensor(idx);
        let fwd = model_forward(
            &image,
            cfg,
            &ckpt.params,
            &ckpt.thresholds,
            ExecMode::Inference,
            MaskMode::Hard,
            TrainableSet::Frozen,
        )?;
        for (l, layer) in fwd.trace.layers.iter().enumerate() {
            merged[l].push(layer.merge_assignments.len());
            pruned[l].push(layer.pruned_tokens.len());
        }
    }
    let layers = (0..cfg.blocks)
        .map(|l| LayerKDist {
            layer: l,
            merged: distribution(&merged[l]),
            pruned: distribution(&pruned[l]),
        })
        .collect();
    Ok(KDistReport {
        samples: dataset.len(),
        layers,
    })
}
