//! Contrastive attention and review-layer soft masking.
//!
//! Given a fusion report with review layer `r` (and post-integrated layer
//! `k = r - 1`), each input is processed in a single forward pass:
//!
//! 1. layers `0..r` run normally with attention capture;
//! 2. just before layer `r`, the image attention of `k` and of every
//!    candidate layer is reduced to a distribution over image tokens, and the
//!    candidate with the largest Hellinger distance from `k` becomes the
//!    pre-integrated layer `i*`;
//! 3. the contrastive attention `IA = |A(k) - A(i*)|` ranks the image tokens,
//!    the lowest `floor(rho * d)` are scaled by `lambda` at the input of `r`;
//! 4. the remaining layers run and the answer is read out.
//!
//! [`contrastive_inference_two_pass`] computes the same thing with a capture
//! pass followed by a static-intervention pass; the two must agree bit for bit.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    argmax, image_attention, image_attention_from_heads, InterventionSpec, LayerAttention,
    LayerHook, Model, TokenSequence,
};
use crate::numerics::{hellinger, mask_indices_by_quantile, Matrix, ProbVec};
use crate::probe::{timed_accuracy, FusionReport};
use crate::tasks::{localization_score, SyntheticSample, Vocab};

/// How the candidate set for the pre-integrated layer is formed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CandidateStrategy {
    /// Every layer below `k`.
    All,
    /// Layers `0..=boundary`.
    Shallow { boundary: usize },
    /// Layers strictly between `boundary` and `k`.
    Deep { boundary: usize },
    /// The fusion set.
    Fusion { set: Vec<usize> },
}

impl CandidateStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            CandidateStrategy::All => "all",
            CandidateStrategy::Shallow { .. } => "shallow",
            CandidateStrategy::Deep { .. } => "deep",
            CandidateStrategy::Fusion { .. } => "fusion",
        }
    }
}

/// Default shallow/deep boundary: `floor(n_layers / 2)`.
pub fn default_boundary(n_layers: usize) -> usize {
    n_layers / 2
}

/// Candidate layers, ascending, always restricted to `[0, k)`.
pub fn candidate_set(strategy: &CandidateStrategy, n_layers: usize, k: usize) -> Result<Vec<usize>> {
    if k >= n_layers {
        return Err(Error::usage(format!(
            "post-integrated layer {k} >= n_layers {n_layers}"
        )));
    }
    let set: Vec<usize> = match strategy {
        CandidateStrategy::All => (0..k).collect(),
        CandidateStrategy::Shallow { boundary } => (0..=*boundary).filter(|&l| l < k).collect(),
        CandidateStrategy::Deep { boundary } => (boundary + 1..k).collect(),
        CandidateStrategy::Fusion { set } => {
            let mut s: Vec<usize> = set.iter().copied().filter(|&l| l < k).collect();
            s.sort_unstable();
            s.dedup();
            s
        }
    };
    if set.is_empty() {
        return Err(Error::usage(format!(
            "{} strategy yields no candidate layers below k = {k}",
            strategy.name()
        )));
    }
    Ok(set)
}

/// Layer with the largest distance; ties go to the smallest layer index.
pub fn pick_max_distance(distances: &[(usize, f64)]) -> Result<usize> {
    let mut sorted = distances.to_vec();
    sorted.sort_by_key(|&(l, _)| l);
    let mut best: Option<(usize, f64)> = None;
    for (l, d) in sorted {
        if d.is_nan() {
            return Err(Error::usage(format!("distance for layer {l} is NaN")));
        }
        match best {
            Some((_, bd)) if d <= bd => {}
            _ => best = Some((l, d)),
        }
    }
    best.map(|(l, _)| l)
        .ok_or_else(|| Error::usage("no candidate distances"))
}

/// Picks `i* = argmax_{i in C} H(attn[i], attn[k])` and returns it with every
/// candidate's distance.
pub fn select_pre_integrated(
    attn_by_layer: &BTreeMap<usize, ProbVec>,
    k: usize,
    candidates: &[usize],
) -> Result<(usize, Vec<(usize, f64)>)> {
    let post = attn_by_layer
        .get(&k)
        .ok_or_else(|| Error::usage(format!("no attention for post-integrated layer {k}")))?;
    let mut distances = Vec::with_capacity(candidates.len());
    for &c in candidates {
        let a = attn_by_layer
            .get(&c)
            .ok_or_else(|| Error::usage(format!("no attention for candidate layer {c}")))?;
        distances.push((c, hellinger(a, post)?));
    }
    Ok((pick_max_distance(&distances)?, distances))
}

/// `|a_post - a_pre|` elementwise.
pub fn contrastive_attention(a_post: &ProbVec, a_pre: &ProbVec) -> Result<Vec<f64>> {
    if a_post.len() != a_pre.len() {
        return Err(Error::usage(format!(
            "contrastive attention length mismatch: {} vs {}",
            a_post.len(),
            a_pre.len()
        )));
    }
    Ok(a_post
        .as_slice()
        .iter()
        .zip(a_pre.as_slice())
        .map(|(p, q)| (p - q).abs())
        .collect())
}

/// Soft mask for the `floor(rho * d)` lowest-IA image tokens at `review_layer`.
pub fn build_review_mask(
    ia: &[f64],
    rho: f64,
    lambda: f64,
    image_span: Range<usize>,
    review_layer: usize,
) -> Result<InterventionSpec> {
    if ia.len() != image_span.len() {
        return Err(Error::usage(format!(
            "IA has {} entries but the image span holds {}",
            ia.len(),
            image_span.len()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::usage(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let picked = mask_indices_by_quantile(ia, rho)?;
    Ok(InterventionSpec {
        layer: review_layer,
        token_indices: picked.into_iter().map(|j| image_span.start + j).collect(),
        scale: lambda,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub strategy: CandidateStrategy,
    pub rho: f64,
    pub lambda: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            strategy: CandidateStrategy::All,
            rho: 0.2,
            lambda: 0.1,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::usage(format!("rho {} outside [0, 1]", self.rho)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::usage(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub pre_integrated: usize,
    pub post_integrated: usize,
    pub review: usize,
    pub strategy: String,
    pub candidates: Vec<usize>,
    pub distances: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    /// `None` when IA is identically zero.
    pub ia: Option<f64>,
    pub pre: f64,
    pub post: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveResult {
    pub ia: Vec<f64>,
    /// Sequence positions that were scaled.
    pub masked_indices: Vec<usize>,
    pub prediction: usize,
    pub logits: Vec<f64>,
    pub selection: LayerSelection,
    pub a_pre: Vec<f64>,
    pub a_post: Vec<f64>,
}

impl ContrastiveResult {
    pub fn localization(&self, relevance: &[bool]) -> Result<Localization> {
        let ia = match localization_score(&self.ia, relevance) {
            Ok(v) => Some(v),
            Err(Error::Degenerate(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Localization {
            ia,
            pre: localization_score(&self.a_pre, relevance)?,
            post: localization_score(&self.a_post, relevance)?,
        })
    }
}

/// Everything derived from the captured attention before the review layer.
struct Plan {
    selection: LayerSelection,
    ia: Vec<f64>,
    a_pre: ProbVec,
    a_post: ProbVec,
    mask: InterventionSpec,
}

fn plan_mask(
    attention: &[LayerAttention],
    seq: &TokenSequence,
    review: usize,
    post: usize,
    candidates: &[usize],
    cfg: &ContrastConfig,
) -> Result<Plan> {
    let mut attn = BTreeMap::new();
    for &l in candidates.iter().chain(std::iter::once(&post)) {
        attn.insert(l, image_attention_from_heads(&attention[l], seq)?);
    }
    let (pre, distances) = select_pre_integrated(&attn, post, candidates)?;
    let a_post = attn.remove(&post).expect("post layer present");
    let a_pre = attn.remove(&pre).expect("selected layer present");
    let ia = contrastive_attention(&a_post, &a_pre)?;
    let mask = build_review_mask(&ia, cfg.rho, cfg.lambda, seq.image_span(), review)?;
    Ok(Plan {
        selection: LayerSelection {
            pre_integrated: pre,
            post_integrated: post,
            review,
            strategy: cfg.strategy.name().to_string(),
            candidates: candidates.to_vec(),
            distances,
        },
        ia,
        a_pre,
        a_post,
        mask,
    })
}

struct ReviewHook<'a> {
    seq: &'a TokenSequence,
    review: usize,
    post: usize,
    candidates: &'a [usize],
    cfg: &'a ContrastConfig,
    plan: Option<Plan>,
}

impl LayerHook for ReviewHook<'_> {
    fn before_layer(&mut self, layer: usize, hidden: &mut Matrix, attention: &[LayerAttention]) -> Result<()> {
        if layer != self.review {
            return Ok(());
        }
        let plan = plan_mask(attention, self.seq, self.review, self.post, self.candidates, self.cfg)?;
        plan.mask.apply(hidden);
        self.plan = Some(plan);
        Ok(())
    }
}

fn resolve(model: &Model, report: &FusionReport, cfg: &ContrastConfig) -> Result<(usize, usize, Vec<usize>)> {
    cfg.validate()?;
    let (review, post) = report.review_and_post()?;
    if review >= model.n_layers() {
        return Err(Error::Inapplicable(format!(
            "review layer {review} does not exist in a {}-layer model",
            model.n_layers()
        )));
    }
    let candidates = candidate_set(&cfg.strategy, model.n_layers(), post)?;
    Ok((review, post, candidates))
}

fn finish(plan: Plan, logits: Vec<f64>) -> ContrastiveResult {
    ContrastiveResult {
        ia: plan.ia,
        masked_indices: plan.mask.token_indices,
        prediction: argmax(&logits),
        logits,
        selection: plan.selection,
        a_pre: plan.a_pre.into_inner(),
        a_post: plan.a_post.into_inner(),
    }
}

/// Single forward pass with the review mask computed online.
pub fn contrastive_inference(
    model: &Model,
    seq: &TokenSequence,
    report: &FusionReport,
    cfg: &ContrastConfig,
) -> Result<ContrastiveResult> {
    let (review, post, candidates) = resolve(model, report, cfg)?;
    let mut hook = ReviewHook {
        seq,
        review,
        post,
        candidates: &candidates,
        cfg,
        plan: None,
    };
    let trace = model.forward_with_hook(seq, &mut hook, true)?;
    let plan = hook.plan.expect("review hook fired");
    Ok(finish(plan, trace.logits))
}

/// Reference path: capture pass, then a second pass with the mask as a static
/// intervention.
pub fn contrastive_inference_two_pass(
    model: &Model,
    seq: &TokenSequence,
    report: &FusionReport,
    cfg: &ContrastConfig,
) -> Result<ContrastiveResult> {
    let (review, post, candidates) = resolve(model, report, cfg)?;
    let capture = model.forward(seq, &[], true)?;
    // recompute the per-layer distributions through the public reduction
    let mut attn = BTreeMap::new();
    for &l in candidates.iter().chain(std::iter::once(&post)) {
        attn.insert(l, image_attention(&capture, l, seq)?);
    }
    let (pre, distances) = select_pre_integrated(&attn, post, &candidates)?;
    let ia = contrastive_attention(&attn[&post], &attn[&pre])?;
    let mask = build_review_mask(&ia, cfg.rho, cfg.lambda, seq.image_span(), review)?;
    let second = model.forward(seq, std::slice::from_ref(&mask), false)?;
    let plan = Plan {
        selection: LayerSelection {
            pre_integrated: pre,
            post_integrated: post,
            review,
            strategy: cfg.strategy.name().to_string(),
            candidates,
            distances,
        },
        ia,
        a_pre: attn.remove(&pre).expect("selected layer present"),
        a_post: attn.remove(&post).expect("post layer present"),
        mask,
    };
    Ok(finish(plan, second.logits))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContrastEval {
    pub accuracy: f64,
    pub mean_latency: f64,
    /// Mean localization of IA over samples where IA is not identically zero.
    pub mean_localization_ia: f64,
    pub mean_localization_post: f64,
    pub mean_localization_pre: f64,
    /// Pre-integrated layer -> number of samples that selected it.
    pub selection_histogram: BTreeMap<usize, usize>,
    pub results: Vec<ContrastiveResult>,
}

/// Runs [`contrastive_inference`] over `samples`.
pub fn evaluate(
    model: &Model,
    vocab: &Vocab,
    samples: &[SyntheticSample],
    report: &FusionReport,
    cfg: &ContrastConfig,
    latency_repeats: usize,
    latency_batch: usize,
) -> Result<ContrastEval> {
    resolve(model, report, cfg)?;
    let seqs: Vec<TokenSequence> = samples.iter().map(|s| vocab.sequence(s)).collect::<Result<_>>()?;
    let mut results: Vec<Option<ContrastiveResult>> = vec![None; samples.len()];
    let (accuracy, mean_latency) = timed_accuracy(samples, latency_repeats, latency_batch, |i| {
        let r = contrastive_inference(model, &seqs[i], report, cfg)?;
        let p = r.prediction;
        if results[i].is_none() {
            results[i] = Some(r);
        }
        Ok(p)
    })?;
    let results: Vec<ContrastiveResult> = results.into_iter().map(|r| r.expect("every sample ran")).collect();

    let mut histogram = BTreeMap::new();
    let (mut ia_sum, mut ia_n, mut pre_sum, mut post_sum) = (0.0, 0usize, 0.0, 0.0);
    for (r, s) in results.iter().zip(samples) {
        *histogram.entry(r.selection.pre_integrated).or_insert(0) += 1;
        let loc = r.localization(&s.relevance)?;
        if let Some(v) = loc.ia {
            ia_sum += v;
            ia_n += 1;
        }
        pre_sum += loc.pre;
        post_sum += loc.post;
    }
    let n = samples.len() as f64;
    Ok(ContrastEval {
        accuracy,
        mean_latency,
        mean_localization_ia: if ia_n > 0 { ia_sum / ia_n as f64 } else { f64::NAN },
        mean_localization_post: post_sum / n,
        mean_localization_pre: pre_sum / n,
        selection_histogram: histogram,
        results,
    })
}

/// Writes `layer,count` for every candidate layer (zero counts included).
pub fn write_histogram_csv(path: &Path, histogram: &BTreeMap<usize, usize>, candidates: &[usize]) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(fmt)?;
    w.write_record(["layer", "count"]).map_err(fmt)?;
    let mut layers: Vec<usize> = candidates.to_vec();
    layers.extend(histogram.keys().copied());
    layers.sort_unstable();
    layers.dedup();
    for l in layers {
        let c = histogram.get(&l).copied().unwrap_or(0);
        w.write_record([l.to_string(), c.to_string()]).map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
