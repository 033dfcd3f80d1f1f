//! Layer-wise visual masking sweeps and the fusion / review layer rules.
//!
//! A sweep zeroes (or scales by `lambda`) every image token at the input of
//! one layer at a time and records accuracy and latency. From the resulting
//! accuracy profile:
//!
//! * the **fusion set** `S` holds the shallow layers whose masking pushes
//!   accuracy below `delta * baseline`. The shallow regime ends at the first
//!   layer that starts a run of at least `min_plateau` layers at or above
//!   that threshold;
//! * the **review layer** `r` is the first layer past `max(S) + 1` where
//!   accuracy falls below `delta_rev * baseline` right after a layer that was
//!   above it;
//! * the **post-integrated layer** is `k = r - 1`.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, image_attention, InterventionSpec, Model, TokenSequence};
use crate::numerics::hellinger;
use crate::tasks::{SyntheticSample, Vocab};

/// Baselines within this absolute margin of chance make the rules meaningless.
pub const CHANCE_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    /// `None` for the unmasked baseline row.
    pub layer: Option<usize>,
    pub accuracy: f64,
    /// Seconds per sample.
    pub mean_latency: f64,
}

impl SweepRecord {
    pub fn inv_latency(&self) -> f64 {
        1.0 / self.mean_latency
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub baseline: SweepRecord,
    /// One row per layer, in layer order.
    pub rows: Vec<SweepRecord>,
    pub warnings: Vec<String>,
}

impl Sweep {
    pub fn accuracies(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.accuracy).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepOptions {
    pub lambda: f64,
    /// Timing repeats per batch; the median is kept.
    pub latency_repeats: usize,
    pub latency_batch: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            lambda: 0.0,
            latency_repeats: 3,
            latency_batch: 50,
        }
    }
}

/// Predicts every sample (by index) in batches, timing each batch `repeats`
/// times and keeping the median. Returns `(accuracy, seconds per sample)`;
/// accuracy comes from the first repeat.
pub(crate) fn timed_accuracy<F>(
    samples: &[SyntheticSample],
    repeats: usize,
    batch: usize,
    mut predict: F,
) -> Result<(f64, f64)>
where
    F: FnMut(usize) -> Result<usize>,
{
    if samples.is_empty() {
        return Err(Error::usage("evaluation set is empty"));
    }
    let repeats = repeats.max(1);
    let batch = batch.max(1);
    let mut hits = 0usize;
    let mut total_time = 0.0;
    for start in (0..samples.len()).step_by(batch) {
        let range = start..(start + batch).min(samples.len());
        let mut times = Vec::with_capacity(repeats);
        for rep in 0..repeats {
            let t0 = Instant::now();
            for i in range.clone() {
                let pred = predict(i)?;
                if rep == 0 && pred == samples[i].answer {
                    hits += 1;
                }
            }
            times.push(t0.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        total_time += times[times.len() / 2];
    }
    let n = samples.len() as f64;
    // timer resolution can report zero for tiny batches
    Ok((hits as f64 / n, (total_time / n).max(1e-12)))
}

/// Masks all image tokens at each layer in turn (plus one unmasked baseline).
pub fn layer_mask_sweep(
    model: &Model,
    vocab: &Vocab,
    eval_set: &[SyntheticSample],
    opts: &SweepOptions,
) -> Result<Sweep> {
    if !(opts.lambda >= 0.0 && opts.lambda.is_finite()) {
        return Err(Error::usage("probe.lambda must be finite and >= 0"));
    }
    let seqs: Vec<TokenSequence> = eval_set
        .iter()
        .map(|s| vocab.sequence(s))
        .collect::<Result<_>>()?;
    let run = |interventions: &dyn Fn(&TokenSequence) -> Vec<InterventionSpec>| {
        timed_accuracy(eval_set, opts.latency_repeats, opts.latency_batch, |i| {
            let seq = &seqs[i];
            Ok(argmax(&model.forward(seq, &interventions(seq), false)?.logits))
        })
    };

    let (acc, lat) = run(&|_| Vec::new())?;
    let baseline = SweepRecord {
        layer: None,
        accuracy: acc,
        mean_latency: lat,
    };
    let mut rows = Vec::with_capacity(model.n_layers());
    for layer in 0..model.n_layers() {
        let (acc, lat) = run(&|seq| vec![InterventionSpec::whole_image(layer, seq, opts.lambda)])?;
        rows.push(SweepRecord {
            layer: Some(layer),
            accuracy: acc,
            mean_latency: lat,
        });
    }

    let mut warnings = Vec::new();
    let chance = 1.0 / vocab.n_colors as f64;
    if baseline.accuracy <= chance + CHANCE_MARGIN {
        warnings.push(format!(
            "baseline accuracy {:.4} is at chance level ({chance:.4}); the model looks untrained",
            baseline.accuracy
        ));
    }
    Ok(Sweep {
        baseline,
        rows,
        warnings,
    })
}

/// Thresholds for the fusion and review rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionRule {
    pub delta: f64,
    pub delta_rev: f64,
    /// Run length that ends the shallow regime; `None` uses
    /// [`default_min_plateau`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_plateau: Option<usize>,
}

impl Default for FusionRule {
    fn default() -> Self {
        FusionRule {
            delta: 0.5,
            delta_rev: 0.5,
            min_plateau: None,
        }
    }
}

/// `max(2, ceil(n_layers / 8))`: 2 for the toy depths, 4 for 32-layer stacks.
pub fn default_min_plateau(n_layers: usize) -> usize {
    n_layers.div_ceil(8).max(2)
}

impl FusionRule {
    pub fn plateau(&self, n_layers: usize) -> usize {
        self.min_plateau.unwrap_or_else(|| default_min_plateau(n_layers))
    }
}

/// Shallow layers whose masking drops accuracy below `delta * baseline`.
pub fn identify_fusion_layers(
    accuracies: &[f64],
    baseline: f64,
    delta: f64,
    min_plateau: usize,
) -> Result<Vec<usize>> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::usage(format!("fusion threshold {delta} outside (0, 1]")));
    }
    if min_plateau == 0 {
        return Err(Error::usage("min_plateau must be >= 1"));
    }
    let thr = delta * baseline;
    let above = |l: usize| accuracies[l] >= thr;
    let n = accuracies.len();
    // the regime ends where a run of `min_plateau` recovered layers begins;
    // a run that reaches the last layer counts even if shorter
    let mut end = n;
    let mut seen_drop = false;
    for l in 0..n {
        if !above(l) {
            seen_drop = true;
            continue;
        }
        if !seen_drop {
            continue;
        }
        let run = (l..n).take_while(|&j| above(j)).count();
        if run >= min_plateau || l + run == n {
            end = l;
            break;
        }
    }
    Ok((0..end).filter(|&l| !above(l)).collect())
}

/// First late layer where a drop recurs after a plateau.
pub fn identify_review_layer(
    accuracies: &[f64],
    baseline: f64,
    fusion_set: &[usize],
    delta_rev: f64,
) -> Result<Option<usize>> {
    if !(delta_rev > 0.0 && delta_rev < 1.0) {
        return Err(Error::usage(format!("review threshold {delta_rev} outside (0, 1)")));
    }
    let thr = delta_rev * baseline;
    let first = fusion_set.iter().max().map_or(1, |m| m + 2);
    Ok((first.max(1)..accuracies.len())
        .find(|&l| accuracies[l] < thr && accuracies[l - 1] >= thr))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionReport {
    pub n_layers: usize,
    pub fusion_set: Vec<usize>,
    pub review_layer: Option<usize>,
    pub post_integrated: Option<usize>,
    pub baseline_accuracy: f64,
    pub chance_accuracy: f64,
    pub delta: f64,
    pub delta_rev: f64,
    pub min_plateau: usize,
}

impl FusionReport {
    /// Applies both rules to a sweep's accuracy column.
    pub fn from_accuracies(
        accuracies: &[f64],
        baseline: f64,
        chance: f64,
        rule: &FusionRule,
    ) -> Result<Self> {
        if baseline <= chance + CHANCE_MARGIN {
            return Err(Error::Inapplicable(format!(
                "baseline accuracy {baseline:.4} is within {CHANCE_MARGIN} of chance {chance:.4}"
            )));
        }
        let n = accuracies.len();
        let plateau = rule.plateau(n);
        let fusion_set = identify_fusion_layers(accuracies, baseline, rule.delta, plateau)?;
        let review_layer = identify_review_layer(accuracies, baseline, &fusion_set, rule.delta_rev)?;
        Ok(FusionReport {
            n_layers: n,
            fusion_set,
            review_layer,
            post_integrated: review_layer.map(|r| r - 1),
            baseline_accuracy: baseline,
            chance_accuracy: chance,
            delta: rule.delta,
            delta_rev: rule.delta_rev,
            min_plateau: plateau,
        })
    }

    pub fn from_sweep(sweep: &Sweep, chance: f64, rule: &FusionRule) -> Result<Self> {
        Self::from_accuracies(&sweep.accuracies(), sweep.baseline.accuracy, chance, rule)
    }

    /// `(r, k)` or an inapplicable error when no review layer was found.
    pub fn review_and_post(&self) -> Result<(usize, usize)> {
        match self.review_layer {
            Some(r) if r >= 1 => Ok((r, r - 1)),
            _ => Err(Error::Inapplicable(
                "fusion report has no review layer; contrastive masking cannot be placed".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&bad) = self.fusion_set.iter().find(|&&l| l >= self.n_layers) {
            return Err(Error::Format(format!("fusion layer {bad} >= n_layers {}", self.n_layers)));
        }
        if !self.fusion_set.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Format("fusion set must be strictly ascending".into()));
        }
        match (self.review_layer, self.post_integrated) {
            (Some(r), Some(k)) if k + 1 == r && r < self.n_layers => {
                if let Some(&m) = self.fusion_set.iter().max() {
                    if r <= m {
                        return Err(Error::Format(format!("review layer {r} not past max(S) = {m}")));
                    }
                }
                Ok(())
            }
            (None, None) => Ok(()),
            (r, k) => Err(Error::Format(format!(
                "inconsistent review/post-integrated layers {r:?}/{k:?}"
            ))),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let r: FusionReport =
            toml::from_str(text).map_err(|e| Error::Format(format!("fusion report: {e}")))?;
        r.validate()?;
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Writes `layer,accuracy,mean_latency_s,inv_latency`; the baseline row is
/// labelled `baseline` and comes first.
pub fn write_sweep_csv(path: &Path, sweep: &Sweep) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(fmt)?;
    w.write_record(["layer", "accuracy", "mean_latency_s", "inv_latency"])
        .map_err(fmt)?;
    for r in std::iter::once(&sweep.baseline).chain(&sweep.rows) {
        let layer = r.layer.map_or_else(|| "baseline".to_string(), |l| l.to_string());
        w.write_record([
            layer,
            r.accuracy.to_string(),
            r.mean_latency.to_string(),
            r.inv_latency().to_string(),
        ])
        .map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceCurve {
    /// Mean Hellinger distance of each layer's image attention to the last layer's.
    pub distances: Vec<f64>,
    pub n_used: usize,
    pub n_skipped: usize,
}

/// Per-layer mean Hellinger distance to the final layer's image attention.
/// Samples whose answer row puts no mass on the image are skipped; more than
/// 10% skipped is an error.
pub fn distance_to_final_curve(
    model: &Model,
    vocab: &Vocab,
    eval_set: &[SyntheticSample],
) -> Result<DistanceCurve> {
    if eval_set.is_empty() {
        return Err(Error::usage("evaluation set is empty"));
    }
    let n_layers = model.n_layers();
    let last = n_layers - 1;
    let mut sums = vec![0.0; n_layers];
    let mut used = 0usize;
    let mut skipped = 0usize;
    'samples: for s in eval_set {
        let seq = vocab.sequence(s)?;
        let trace = model.forward(&seq, &[], true)?;
        let mut dists = Vec::with_capacity(n_layers);
        let final_attn = match image_attention(&trace, last, &seq) {
            Ok(a) => a,
            Err(Error::Degenerate(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        for layer in 0..n_layers {
            let a = match image_attention(&trace, layer, &seq) {
                Ok(a) => a,
                Err(Error::Degenerate(_)) => {
                    skipped += 1;
                    continue 'samples;
                }
                Err(e) => return Err(e),
            };
            dists.push(if layer == last { 0.0 } else { hellinger(&a, &final_attn)? });
        }
        for (acc, d) in sums.iter_mut().zip(dists) {
            *acc += d;
        }
        used += 1;
    }
    if skipped * 10 > eval_set.len() {
        return Err(Error::degenerate(format!(
            "{skipped} of {} samples had no image attention",
            eval_set.len()
        )));
    }
    Ok(DistanceCurve {
        distances: sums.into_iter().map(|s| s / used as f64).collect(),
        n_used: used,
        n_skipped: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// LLaVA-1.5 sweep shape: drops at 2, 4, 8, 11, 12, 13 and a review drop at 29.
    fn llava_shape() -> (Vec<f64>, f64) {
        let baseline = 0.78;
        let mut acc = vec![0.70; 32];
        for l in [2, 4, 8, 11, 12, 13] {
            acc[l] = 0.04;
        }
        acc[29] = 0.12;
        (acc, baseline)
    }

    #[test]
    fn llava_fixture_reproduces_reference_layers() {
        let (acc, base) = llava_shape();
        let report = FusionReport::from_accuracies(&acc, base, 0.0, &FusionRule::default()).unwrap();
        assert_eq!(report.fusion_set, vec![2, 4, 8, 11, 12, 13]);
        assert_eq!(report.review_layer, Some(29));
        assert_eq!(report.post_integrated, Some(28));
        assert_eq!(report.min_plateau, 4);
    }

    #[test]
    fn constructed_fusion_example() {
        let acc = [0.05, 0.90, 0.04, 0.95, 0.95, 0.95];
        assert_eq!(identify_fusion_layers(&acc, 0.96, 0.5, 2).unwrap(), vec![0, 2]);
        assert!(identify_fusion_layers(&[0.9; 6], 0.9, 0.5, 2).unwrap().is_empty());
        assert!(identify_fusion_layers(&acc, 0.96, 0.0, 2).is_err());
    }

    #[test]
    fn constructed_review_example() {
        let acc = [0.02, 0.03, 0.92, 0.95, 0.95, 0.10];
        assert_eq!(identify_review_layer(&acc, 0.96, &[0, 1], 0.5).unwrap(), Some(5));
        let rising = [0.02, 0.3, 0.8, 0.9, 0.95, 0.96];
        assert_eq!(identify_review_layer(&rising, 0.96, &[0, 1], 0.5).unwrap(), None);
    }

    #[test]
    fn review_requires_plateau_before_the_drop() {
        let recovered = [0.9, 0.9, 0.05, 0.9, 0.1, 0.1];
        assert_eq!(identify_review_layer(&recovered, 0.96, &[2], 0.5).unwrap(), Some(4));
        // accuracy never recovers after the fusion layer: no review layer
        let flat = [0.9, 0.9, 0.05, 0.1, 0.1, 0.1];
        assert_eq!(identify_review_layer(&flat, 0.96, &[2], 0.5).unwrap(), None);
    }

    #[test]
    fn delta_one_collects_every_shallow_dip() {
        let acc = [0.95, 0.90, 0.96, 0.96, 0.96];
        assert_eq!(identify_fusion_layers(&acc, 0.96, 1.0, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn chance_baseline_is_inapplicable() {
        let r = FusionReport::from_accuracies(&[0.1; 4], 0.13, 0.125, &FusionRule::default());
        assert!(matches!(r, Err(Error::Inapplicable(_))));
    }

    #[test]
    fn report_toml_round_trip_and_validation() {
        let (acc, base) = llava_shape();
        let report = FusionReport::from_accuracies(&acc, base, 0.0, &FusionRule::default()).unwrap();
        let text = report.to_toml();
        assert_eq!(FusionReport::from_toml(&text).unwrap(), report);

        let mut bad = report.clone();
        bad.post_integrated = Some(27);
        assert!(FusionReport::from_toml(&bad.to_toml()).is_err());
        let mut none = report;
        none.review_layer = None;
        none.post_integrated = None;
        let back = FusionReport::from_toml(&none.to_toml()).unwrap();
        assert!(matches!(back.review_and_post(), Err(Error::Inapplicable(_))));
    }

    #[test]
    fn default_plateau_scales_with_depth() {
        assert_eq!(default_min_plateau(6), 2);
        assert_eq!(default_min_plateau(16), 2);
        assert_eq!(default_min_plateau(32), 4);
    }
}
