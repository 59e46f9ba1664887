//! Positive-perturbation faithfulness harness.
//!
//! The top `⌈k·n⌉` patches of an attribution map are removed under one of
//! three replacement protocols and the model is re-scored. AUPC sums the
//! mean score over the fraction schedule; LogOdd sums the mean log-ratio of
//! masked to unmasked scores. Lower is more faithful for both.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{explain, AttributionMap, ExplainOptions, Method};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::{forward, forward_with, predicted_class, sigmoid, ForwardOptions, ForwardRecord, ModelConfig, ModelWeights};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Scores are clamped to this floor before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Replace the patch's pixels with the image's per-channel mean.
    PixelMask,
    /// Replace the patch token (after positional encoding) with the zero vector.
    TokenMask,
    /// Zero the patch's attention column after softmax in every layer and head.
    AttentionMask,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::PixelMask, Protocol::TokenMask, Protocol::AttentionMask];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::PixelMask => "pixel-mask",
            Protocol::TokenMask => "token-mask",
            Protocol::AttentionMask => "attention-mask",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        let norm = norm.strip_suffix("-mask").unwrap_or(&norm).to_string() + "-mask";
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == norm)
            .ok_or_else(|| Error::Usage(format!("unknown protocol '{s}'; valid: pixel-mask, token-mask, attention-mask")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    /// Per-instance multi-label accuracy `(TP+TN)/(TP+TN+FP+FN)` at a 0.5 sigmoid threshold.
    MultilabelAccuracy,
    /// Sigmoid probability of the explained class.
    TargetClassProbability,
}

impl ScoreKind {
    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::MultilabelAccuracy => "multilabel-accuracy",
            ScoreKind::TargetClassProbability => "target-class-probability",
        }
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "multilabel-accuracy" | "accuracy" => Ok(ScoreKind::MultilabelAccuracy),
            "target-class-probability" | "probability" => Ok(ScoreKind::TargetClassProbability),
            _ => Err(Error::Usage(format!(
                "unknown score '{s}'; valid: multilabel-accuracy, target-class-probability"
            ))),
        }
    }
}

/// Masking fractions, strictly increasing within `(0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSchedule {
    pub fractions: Vec<f64>,
}

impl Default for PerturbationSchedule {
    /// 2% to 20% in steps of 2%.
    fn default() -> Self {
        Self {
            fractions: (1..=10).map(|k| k as f64 * 0.02).collect(),
        }
    }
}

impl PerturbationSchedule {
    pub fn new(fractions: Vec<f64>) -> Result<Self> {
        let s = Self { fractions };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fractions.is_empty() {
            return Err(Error::Parameter("perturbation schedule is empty".into()));
        }
        if self.fractions.iter().any(|&k| !(k > 0.0 && k <= 1.0)) {
            return Err(Error::Parameter("fractions must lie in (0, 1]".into()));
        }
        if self.fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter("fractions must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// One dataset entry: an image path and its binary action label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub image: PathBuf,
    pub label: Vec<u8>,
}

/// A decoded sample ready for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub image: ImageTensor<T>,
    pub label: Vec<u8>,
}

/// `(TP+TN)/(TP+TN+FP+FN)` with predictions `sigmoid(logit) >= threshold`.
pub fn multilabel_accuracy<T: Scalar>(logits: &[T], label: &[u8], threshold: f64) -> Result<f64> {
    if logits.len() != label.len() || label.is_empty() {
        return Err(Error::Dimension {
            op: "multilabel_accuracy",
            left: vec![logits.len()],
            right: vec![label.len()],
        });
    }
    let correct = logits
        .iter()
        .zip(label)
        .filter(|(&z, &y)| (sigmoid(z).as_f64() >= threshold) == (y != 0))
        .count();
    Ok(correct as f64 / label.len() as f64)
}

/// Number of patches removed at fraction `k`: `⌈k·n⌉`, with float noise
/// below `1e-9` ignored.
pub fn mask_count(k: f64, n: usize) -> usize {
    (((k * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Indices of the `⌈k·n⌉` most relevant patches. Negative relevance counts
/// as zero; ties go to the lower patch index.
pub fn select_top_patches<T: Scalar>(map: &AttributionMap<T>, k: f64) -> Vec<usize> {
    let count = mask_count(k, map.len());
    ranked_patches(map).into_iter().take(count).collect()
}

/// All patch indices ordered by descending positive relevance (stable).
pub fn ranked_patches<T: Scalar>(map: &AttributionMap<T>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..map.len()).collect();
    let key = |i: usize| map.values[i].max(T::zero());
    order.sort_by(|&a, &b| key(b).partial_cmp(&key(a)).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Replaces every pixel of the given patches with the image's per-channel mean.
pub fn mask_pixels<T: Scalar>(img: &ImageTensor<T>, cfg: &ModelConfig, patches: &[usize]) -> Result<ImageTensor<T>> {
    let means = img.channel_means();
    let mut data = img.data.clone();
    let plane = cfg.image_h * cfg.image_w;
    for &p in patches {
        if p >= cfg.num_patches() {
            return Err(Error::Parameter(format!("patch {p} out of range")));
        }
        for k in 0..cfg.patch_dim() {
            let idx = cfg.patch_element_index(p, k);
            data.data_mut()[idx] = means[idx / plane];
        }
    }
    img.with_data(data)
}

/// Pixel-mask the top `k` fraction of `map`.
pub fn mask_pixels_fraction<T: Scalar>(
    img: &ImageTensor<T>,
    cfg: &ModelConfig,
    map: &AttributionMap<T>,
    k: f64,
) -> Result<ImageTensor<T>> {
    check_fraction(k)?;
    mask_pixels(img, cfg, &select_top_patches(map, k))
}

fn check_fraction(k: f64) -> Result<()> {
    if k > 0.0 && k <= 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("fraction {k} outside (0, 1]")))
    }
}

/// Forward pass with the given patch tokens zeroed.
pub fn mask_tokens<T: Scalar>(
    img: &ImageTensor<T>,
    weights: &ModelWeights<T>,
    cfg: &ModelConfig,
    patches: &[usize],
) -> Result<ForwardRecord<T>> {
    let options = ForwardOptions {
        token_mask: patches.to_vec(),
        ..Default::default()
    };
    forward_with(img, weights, cfg, &options)
}

/// Forward pass with the given patches' attention columns zeroed in every layer.
pub fn mask_attention<T: Scalar>(
    img: &ImageTensor<T>,
    weights: &ModelWeights<T>,
    cfg: &ModelConfig,
    patches: &[usize],
) -> Result<ForwardRecord<T>> {
    let options = ForwardOptions {
        attention_mask: patches.to_vec(),
        ..Default::default()
    };
    forward_with(img, weights, cfg, &options)
}

/// Logits after removing `patches` under `protocol`.
pub fn masked_logits<T: Scalar>(
    protocol: Protocol,
    img: &ImageTensor<T>,
    weights: &ModelWeights<T>,
    cfg: &ModelConfig,
    patches: &[usize],
) -> Result<Tensor<T>> {
    let record = match protocol {
        Protocol::PixelMask => forward(&mask_pixels(img, cfg, patches)?, weights, cfg)?,
        Protocol::TokenMask => mask_tokens(img, weights, cfg, patches)?,
        Protocol::AttentionMask => mask_attention(img, weights, cfg, patches)?,
    };
    Ok(record.logits)
}

/// Area under the perturbation curve: the plain sum of per-fraction mean scores.
pub fn aupc(mean_scores: &[f64]) -> Result<f64> {
    if mean_scores.is_empty() {
        return Err(Error::Parameter("AUPC over an empty schedule".into()));
    }
    Ok(mean_scores.iter().sum())
}

/// `Σ_k ln(score_k / unmasked)` with both sides floored at [`LOG_FLOOR`].
pub fn logodd(masked: &[f64], unmasked: f64) -> Result<f64> {
    if masked.is_empty() {
        return Err(Error::Parameter("LogOdd over an empty schedule".into()));
    }
    let base = unmasked.max(LOG_FLOOR);
    Ok(masked.iter().map(|&s| (s.max(LOG_FLOOR) / base).ln()).sum())
}

/// Score of `logits` for explained class `c`.
pub fn score<T: Scalar>(kind: ScoreKind, logits: &Tensor<T>, label: &[u8], c: usize) -> Result<f64> {
    match kind {
        ScoreKind::MultilabelAccuracy => multilabel_accuracy(logits.data(), label, 0.5),
        ScoreKind::TargetClassProbability => Ok(sigmoid(logits.data()[c]).as_f64()),
    }
}

/// Aggregated curve for one (method, protocol) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: Method,
    pub protocol: Protocol,
    pub score_kind: ScoreKind,
    pub samples: usize,
    pub skipped: usize,
    pub fractions: Vec<f64>,
    pub mean_scores: Vec<f64>,
    pub unmasked_mean: f64,
    pub aupc: f64,
    pub logodd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig<T> {
    pub methods: Vec<Method>,
    pub protocols: Vec<Protocol>,
    pub schedule: PerturbationSchedule,
    pub score_kind: ScoreKind,
    pub explain: ExplainOptions<T>,
    /// Base seed; sample `i` uses `seed + i` for noise and the random control.
    pub seed: u64,
}

/// Per-sample curve: `scores[method][protocol][fraction]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleResult {
    pub target_class: usize,
    pub unmasked: f64,
    pub scores: Vec<Vec<Vec<f64>>>,
}

/// Explains one sample with every method and re-scores it under every protocol and fraction.
pub fn evaluate_sample<T: Scalar>(
    sample: &Sample<T>,
    index: usize,
    weights: &ModelWeights<T>,
    cfg: &ModelConfig,
    bench: &BenchmarkConfig<T>,
) -> Result<SampleResult> {
    if sample.label.len() != cfg.num_classes {
        return Err(Error::Data(format!(
            "label has {} entries, model has {} classes",
            sample.label.len(),
            cfg.num_classes
        )));
    }
    let record = forward(&sample.image, weights, cfg)?;
    let c = predicted_class(&record.logits);
    let unmasked = score(bench.score_kind, &record.logits, &sample.label, c)?;
    let seed = bench.seed.wrapping_add(index as u64);
    let mut options = bench.explain.clone();
    options.smooth.seed = seed;
    options.random_seed = seed;
    let mut scores = Vec::with_capacity(bench.methods.len());
    for &method in &bench.methods {
        let map = explain(method, &sample.image, &record, weights, c, &options)?;
        let ranked = ranked_patches(&map);
        let mut per_protocol = Vec::with_capacity(bench.protocols.len());
        for &protocol in &bench.protocols {
            let curve = bench
                .schedule
                .fractions
                .iter()
                .map(|&k| {
                    let patches = &ranked[..mask_count(k, map.len())];
                    let logits = masked_logits(protocol, &sample.image, weights, cfg, patches)?;
                    score(bench.score_kind, &logits, &sample.label, c)
                })
                .collect::<Result<Vec<_>>>()?;
            per_protocol.push(curve);
        }
        scores.push(per_protocol);
    }
    Ok(SampleResult {
        target_class: c,
        unmasked,
        scores,
    })
}

/// Reduces per-sample curves into one report per (method, protocol), summing
/// samples in index order.
pub fn aggregate(results: &[SampleResult], skipped: usize, bench: &BenchmarkConfig<impl Scalar>) -> Result<Vec<EvaluationReport>> {
    if results.is_empty() {
        return Err(Error::Data("no sample could be evaluated".into()));
    }
    let n = results.len() as f64;
    let nk = bench.schedule.fractions.len();
    let unmasked_mean = results.iter().map(|r| r.unmasked).sum::<f64>() / n;
    let mut reports = Vec::new();
    for (mi, &method) in bench.methods.iter().enumerate() {
        for (pi, &protocol) in bench.protocols.iter().enumerate() {
            let mut means = vec![0.0; nk];
            let mut log_terms = 0.0;
            for r in results {
                let curve = &r.scores[mi][pi];
                for (m, &s) in means.iter_mut().zip(curve) {
                    *m += s;
                }
                log_terms += logodd(curve, r.unmasked)?;
            }
            means.iter_mut().for_each(|m| *m /= n);
            reports.push(EvaluationReport {
                method,
                protocol,
                score_kind: bench.score_kind,
                samples: results.len(),
                skipped,
                fractions: bench.schedule.fractions.clone(),
                aupc: aupc(&means)?,
                logodd: log_terms / n,
                mean_scores: means,
                unmasked_mean,
            });
        }
    }
    Ok(reports)
}

/// Runs the full benchmark over decoded samples. Samples that fail are
/// skipped with a warning and counted in every report.
pub fn run_benchmark<T: Scalar>(
    samples: &[Sample<T>],
    weights: &ModelWeights<T>,
    cfg: &ModelConfig,
    bench: &BenchmarkConfig<T>,
) -> Result<Vec<EvaluationReport>> {
    run_benchmark_with_skips(samples, 0, weights, cfg, bench)
}

/// [`run_benchmark`] with `already_skipped` samples (e.g. unreadable files)
/// added to the skip count.
pub fn run_benchmark_with_skips<T: Scalar>(
    samples: &[Sample<T>],
    already_skipped: usize,
    weights: &ModelWeights<T>,
    cfg: &ModelConfig,
    bench: &BenchmarkConfig<T>,
) -> Result<Vec<EvaluationReport>> {
    bench.schedule.validate()?;
    bench.explain.smooth.validate()?;
    if samples.is_empty() && already_skipped == 0 {
        return Err(Error::Usage("dataset is empty".into()));
    }
    if bench.methods.is_empty() || bench.protocols.is_empty() {
        return Err(Error::Usage("at least one method and one protocol are required".into()));
    }
    let outcomes: Vec<Result<SampleResult>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| evaluate_sample(s, i, weights, cfg, bench))
        .collect();
    let mut skipped = already_skipped;
    let mut results = Vec::with_capacity(outcomes.len());
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => {
                log::warn!("skipping sample {i}: {e}");
                skipped += 1;
            }
        }
    }
    aggregate(&results, skipped, bench)
}

/// CSV with header `method,protocol,fraction,mean_score,n`.
pub fn reports_csv(reports: &[EvaluationReport]) -> String {
    let mut out = String::from("method,protocol,fraction,mean_score,n\n");
    for r in reports {
        for (k, s) in r.fractions.iter().zip(&r.mean_scores) {
            out.push_str(&format!("{},{},{},{:.9},{}\n", r.method, r.protocol, k, s, r.samples));
        }
    }
    out
}
