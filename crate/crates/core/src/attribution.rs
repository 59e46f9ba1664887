//! Per-patch relevance maps: RawAtt, AttGrad, AttIN, GenericAtt, AttIG and
//! SNNA (smooth noise norm attention), plus a seeded random control.
//!
//! Every method reads the [CLS] row of an `(n+1)×(n+1)` relevance matrix and
//! drops the [CLS] column, leaving one score per patch in row-major grid order.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{grad_wrt_attention, input_gradient_from_record, AttentionGradients};
use crate::image::ImageTensor;
use crate::model::{forward, ForwardRecord, ModelConfig, ModelWeights};
use crate::scalar::Scalar;
use crate::tensor::{matmul, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[serde(rename = "rawatt")]
    RawAtt,
    #[serde(rename = "attgrad")]
    AttGrad,
    #[serde(rename = "attin")]
    AttIn,
    #[serde(rename = "genericatt")]
    GenericAtt,
    #[serde(rename = "attig")]
    AttIg,
    Snna,
    /// SNNA with smoothing disabled (one sample, zero noise).
    SnnaDeterministic,
    /// Seeded uniform random scores; the faithfulness control.
    Random,
}

impl Method {
    /// The six compared methods in presentation order.
    pub const COMPARED: [Method; 6] = [
        Method::RawAtt,
        Method::AttGrad,
        Method::AttIn,
        Method::GenericAtt,
        Method::AttIg,
        Method::Snna,
    ];

    pub const ALL: [Method; 8] = [
        Method::RawAtt,
        Method::AttGrad,
        Method::AttIn,
        Method::GenericAtt,
        Method::AttIg,
        Method::Snna,
        Method::SnnaDeterministic,
        Method::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::RawAtt => "rawatt",
            Method::AttGrad => "attgrad",
            Method::AttIn => "attin",
            Method::GenericAtt => "genericatt",
            Method::AttIg => "attig",
            Method::Snna => "snna",
            Method::SnnaDeterministic => "snna-deterministic",
            Method::Random => "random",
        }
    }

    pub fn is_class_specific(self) -> bool {
        !matches!(self, Method::RawAtt | Method::AttIn | Method::Random)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let valid: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Usage(format!("unknown method '{s}'; valid methods: {}", valid.join(", ")))
            })
    }
}

/// Relevance score per patch ([CLS] excluded), row-major over the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap<T> {
    pub values: Vec<T>,
    pub method: Method,
    pub target_class: Option<usize>,
    /// Patch grid `(rows, cols)`.
    pub grid: (usize, usize),
}

impl<T: Scalar> AttributionMap<T> {
    pub fn new(values: Vec<T>, method: Method, target_class: Option<usize>, grid: (usize, usize)) -> Result<Self> {
        if values.len() != grid.0 * grid.1 {
            return Err(Error::Shape(format!(
                "{} relevance values for a {}×{} grid",
                values.len(),
                grid.0,
                grid.1
            )));
        }
        Ok(Self {
            values,
            method,
            target_class,
            grid,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values reshaped to the patch grid.
    pub fn grid_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.grid.0, self.grid.1], self.values.clone()).expect("grid matches length")
    }

    /// Copy with negative relevance clamped to zero.
    pub fn positive(&self) -> Self {
        Self {
            values: self.values.iter().map(|&v| v.max(T::zero())).collect(),
            ..self.clone()
        }
    }
}

/// SmoothGrad sampling: `m` inputs `x + N(0, σ²)` with `σ = sigma_fraction·(max(x) − min(x))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothConfig {
    pub samples: usize,
    pub sigma_fraction: f64,
    pub seed: u64,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        Self {
            samples: 5,
            sigma_fraction: 0.15,
            seed: 0,
        }
    }
}

impl SmoothConfig {
    pub fn deterministic() -> Self {
        Self {
            samples: 1,
            sigma_fraction: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples < 1 {
            return Err(Error::Parameter("smoothing needs at least one sample".into()));
        }
        if !(self.sigma_fraction >= 0.0) || !self.sigma_fraction.is_finite() {
            return Err(Error::Parameter("sigma fraction must be a finite value >= 0".into()));
        }
        Ok(())
    }

    /// The `m` perturbed inputs, drawn pixel by pixel from one seeded stream.
    pub fn noisy_inputs<T: Scalar>(&self, img: &ImageTensor<T>) -> Result<Vec<ImageTensor<T>>> {
        self.validate()?;
        let sigma = self.sigma_fraction * img.value_range().as_f64();
        if sigma == 0.0 {
            return Ok(vec![img.clone(); self.samples]);
        }
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Parameter(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.samples)
            .map(|_| {
                let noise: Vec<T> = (0..img.data.len()).map(|_| T::lit(normal.sample(&mut rng))).collect();
                let data = Tensor::new(img.data.shape().to_vec(), noise)?.add(&img.data)?;
                img.with_data(data)
            })
            .collect()
    }
}

/// Reference point for Integrated Gradients.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum IgBaseline<T> {
    Zero,
    #[default]
    ChannelMean,
    Custom(ImageTensor<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct IgConfig<T> {
    /// Number of midpoint Riemann samples along the path.
    pub steps: usize,
    pub baseline: IgBaseline<T>,
}

impl<T> Default for IgConfig<T> {
    fn default() -> Self {
        Self {
            steps: 32,
            baseline: IgBaseline::ChannelMean,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IgResult<T> {
    /// Per-pixel attribution, shaped like the image.
    pub attribution: Tensor<T>,
    /// `|Σ attribution − (f_c(x) − f_c(x'))|`.
    pub completeness_residual: T,
}

fn last<T>(v: &[T]) -> Result<&T> {
    v.last().ok_or_else(|| Error::State("forward record has no layers".into()))
}

/// Mean over the head axis of an `h×s×s` tensor, heads summed in order.
pub fn head_mean<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (h, s) = (t.shape()[0], t.shape()[1]);
    let hn = T::from_usize(h).unwrap();
    Tensor::from_fn(&[s, s], |k| {
        (0..h).fold(T::zero(), |acc, head| acc + t.data()[head * s * s + k]) / hn
    })
}

fn cls_patch_row<T: Scalar>(m: &Tensor<T>) -> Vec<T> {
    m.row(0)[1..].to_vec()
}

fn require_class<T>(grads: &AttentionGradients<T>) -> Result<usize> {
    grads
        .target_class
        .ok_or_else(|| Error::Parameter("attention gradients carry no target class".into()))
}

/// RawAtt: head-averaged last-layer attention of the [CLS] query.
pub fn raw_att<T: Scalar>(record: &ForwardRecord<T>) -> Result<AttributionMap<T>> {
    let a = head_mean(last(&record.attention)?);
    AttributionMap::new(cls_patch_row(&a), Method::RawAtt, None, record.config.grid())
}

/// AttGrad: head average of `A^L ⊙ ∇A^L`.
pub fn att_grad<T: Scalar>(record: &ForwardRecord<T>, grads: &AttentionGradients<T>) -> Result<AttributionMap<T>> {
    let c = require_class(grads)?;
    let prod = last(&record.attention)?.hadamard(last(&grads.layers)?)?;
    AttributionMap::new(cls_patch_row(&head_mean(&prod)), Method::AttGrad, Some(c), record.config.grid())
}

/// Scales column `j` of each head's attention by that head's `‖v̂_j‖`.
pub fn norm_weighted_attention<T: Scalar>(attention: &Tensor<T>, norms: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, s) = (attention.shape()[0], attention.shape()[1]);
    if norms.shape() != [h, s] {
        return Err(Error::Dimension {
            op: "norm_weighted_attention",
            left: attention.shape().to_vec(),
            right: norms.shape().to_vec(),
        });
    }
    Ok(Tensor::from_fn(attention.shape(), |k| {
        let head = k / (s * s);
        attention.data()[k] * norms.data()[head * s + k % s]
    }))
}

/// AttIN: last-layer attention column-scaled by the transformed value norms,
/// averaged over heads.
pub fn att_in<T: Scalar>(record: &ForwardRecord<T>) -> Result<AttributionMap<T>> {
    let weighted = norm_weighted_attention(last(&record.attention)?, last(&record.value_norms)?)?;
    AttributionMap::new(cls_patch_row(&head_mean(&weighted)), Method::AttIn, None, record.config.grid())
}

/// `E_h((relevance ⊙ gradient)^+)`, clamping each head before averaging.
pub fn clamped_head_mean<T: Scalar>(relevance: &Tensor<T>, gradient: &Tensor<T>) -> Result<Tensor<T>> {
    let prod = relevance.zip_map(gradient, |a, g| (a * g).max(T::zero()))?;
    Ok(head_mean(&prod))
}

/// `Π_l (M_l + I)` multiplied left to right.
pub fn rollout<T: Scalar>(layers: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = layers
        .first()
        .ok_or_else(|| Error::State("rollout over zero layers".into()))?;
    let s = first.shape()[0];
    let eye = Tensor::eye(s);
    let mut acc: Option<Tensor<T>> = None;
    for m in layers {
        let bar = m.add(&eye)?;
        acc = Some(match acc {
            None => bar,
            Some(p) => matmul(&p, &bar)?,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// GenericAtt rollout `A* = Π_l (E_h(A^l ⊙ ∇A^l)^+ + I)`.
pub fn generic_rollout<T: Scalar>(record: &ForwardRecord<T>, grads: &AttentionGradients<T>) -> Result<Tensor<T>> {
    if record.attention.len() != grads.layers.len() {
        return Err(Error::State("gradient and attention layer counts differ".into()));
    }
    let layers = record
        .attention
        .iter()
        .zip(&grads.layers)
        .map(|(a, g)| clamped_head_mean(a, g))
        .collect::<Result<Vec<_>>>()?;
    rollout(&layers)
}

pub fn generic_att<T: Scalar>(record: &ForwardRecord<T>, grads: &AttentionGradients<T>) -> Result<AttributionMap<T>> {
    let c = require_class(grads)?;
    let rolled = generic_rollout(record, grads)?;
    AttributionMap::new(cls_patch_row(&rolled), Method::GenericAtt, Some(c), record.config.grid())
}

/// Integrated Gradients along the straight path from `baseline` to `x` with a
/// midpoint Riemann sum of `steps` gradient evaluations.
pub fn integrated_gradients_with<T: Scalar>(
    x: &Tensor<T>,
    baseline: &Tensor<T>,
    steps: usize,
    mut grad: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    if steps < 1 {
        return Err(Error::Parameter("integrated gradients needs at least one step".into()));
    }
    let delta = x.sub(baseline)?;
    let mut mean = Tensor::zeros(x.shape());
    for k in 0..steps {
        let alpha = T::lit((k as f64 + 0.5) / steps as f64);
        let point = baseline.zip_map(&delta, |b, d| b + alpha * d)?;
        let g = grad(&point)?;
        let n = T::from_usize(k + 1).unwrap();
        mean = mean.zip_map(&g, |m, g| m + (g - m) / n)?;
    }
    delta.hadamard(&mean)
}

fn baseline_image<T: Scalar>(img: &ImageTensor<T>, baseline: &IgBaseline<T>) -> Result<ImageTensor<T>> {
    match baseline {
        IgBaseline::Zero => Ok(img.zeros_like()),
        IgBaseline::ChannelMean => Ok(img.channel_mean_image()),
        IgBaseline::Custom(b) => img.with_data(b.data.clone()),
    }
}

/// Integrated Gradients of `logits[c]` with respect to the input image.
pub fn integrated_gradients<T: Scalar>(
    img: &ImageTensor<T>,
    weights: &ModelWeights<T>,
    cfg: &ModelConfig,
    ig: &IgConfig<T>,
    c: usize,
) -> Result<IgResult<T>> {
    let base = baseline_image(img, &ig.baseline)?;
    let attribution = integrated_gradients_with(&img.data, &base.data, ig.steps, |point| {
        let rec = forward(&img.with_data(point.clone())?, weights, cfg)?;
        Ok(input_gradient_from_record(&rec, weights, c)?.gradient)
    })?;
    let f_x = forward(img, weights, cfg)?.logits.data()[c];
    let f_b = forward(&base, weights, cfg)?.logits.data()[c];
    let total = attribution.data().iter().fold(T::zero(), |s, &v| s + v);
    Ok(IgResult {
        attribution,
        completeness_residual: (total - (f_x - f_b)).abs(),
    })
}

/// Mean of `|IG|` over each patch's `p·p·C` entries.
pub fn pool_patches_abs<T: Scalar>(ig: &Tensor<T>, cfg: &ModelConfig) -> Result<Vec<T>> {
    let expect = [cfg.channels, cfg.image_h, cfg.image_w];
    if ig.shape() != expect {
        return Err(Error::Dimension {
            op: "pool_patches_abs",
            left: ig.shape().to_vec(),
            right: expect.to_vec(),
        });
    }
    let pd = cfg.patch_dim();
    let denom = T::from_usize(pd).unwrap();
    Ok((0..cfg.num_patches())
        .map(|p| {
            (0..pd).fold(T::zero(), |s, k| s + ig.data()[cfg.patch_element_index(p, k)].abs()) / denom
        })
        .collect())
}

/// AttIG: the GenericAtt [CLS] row masked by patch-pooled `|IG|`.
pub fn att_ig<T: Scalar>(
    record: &ForwardRecord<T>,
    grads: &AttentionGradients<T>,
    ig_map: &Tensor<T>,
) -> Result<AttributionMap<T>> {
    let c = require_class(grads)?;
    let pooled = pool_patches_abs(ig_map, &record.config)?;
    let rolled = generic_rollout(record, grads)?;
    let values = cls_patch_row(&rolled)
        .into_iter()
        .zip(pooled)
        .map(|(a, g)| a * g)
        .collect();
    AttributionMap::new(values, Method::AttIg, Some(c), record.config.grid())
}

/// SmoothGrad of the last-layer attention gradient, `h×(n+1)×(n+1)`.
/// Samples are averaged as a running mean in sampling order, so identical
/// samples reproduce a single-sample result bit for bit.
pub fn smooth_grad<T: Scalar>(
    img: &ImageTensor<T>,
    weights: &ModelWeights<T>,
    cfg: &ModelConfig,
    c: usize,
    smooth: &SmoothConfig,
) -> Result<Tensor<T>> {
    let mut mean: Option<Tensor<T>> = None;
    for (k, noisy) in smooth.noisy_inputs(img)?.iter().enumerate() {
        let rec = forward(noisy, weights, cfg)?;
        let mut grads = grad_wrt_attention(&rec, weights, c)?;
        let g = grads.layers.pop().expect("at least one layer");
        let n = T::from_usize(k + 1).unwrap();
        mean = Some(match mean {
            None => g,
            Some(m) => m.zip_map(&g, |m, g| m + (g - m) / n)?,
        });
    }
    Ok(mean.expect("samples >= 1"))
}

/// The SNNA relevance matrix `R = (Ā^1 ⋯ Ā^L) ⊙ E_h(SG)`, where
/// `Ā^l = E_h((A^l‖v̂^l‖ ⊙ ∇A^l)^+) + I`.
pub fn snna_relevance_from_parts<T: Scalar>(
    attention: &[Tensor<T>],
    value_norms: &[Tensor<T>],
    gradients: &[Tensor<T>],
    smooth_last: &Tensor<T>,
) -> Result<Tensor<T>> {
    if attention.len() != value_norms.len() || attention.len() != gradients.len() {
        return Err(Error::State("per-layer inputs have different layer counts".into()));
    }
    let layers = attention
        .iter()
        .zip(value_norms)
        .zip(gradients)
        .map(|((a, v), g)| clamped_head_mean(&norm_weighted_attention(a, v)?, g))
        .collect::<Result<Vec<_>>>()?;
    rollout(&layers)?.hadamard(&head_mean(smooth_last))
}

fn check_record_matches<T: Scalar>(img: &ImageTensor<T>, record: &ForwardRecord<T>) -> Result<()> {
    let cfg = &record.config;
    if img.data.shape() != [cfg.channels, cfg.image_h, cfg.image_w] {
        return Err(Error::State(format!(
            "record was produced for {}×{}×{} inputs, image is {:?}",
            cfg.channels,
            cfg.image_h,
            cfg.image_w,
            img.data.shape()
        )));
    }
    Ok(())
}

/// Full SNNA relevance matrix for class `c`.
pub fn snna_relevance<T: Scalar>(
    img: &ImageTensor<T>,
    record: &ForwardRecord<T>,
    weights: &ModelWeights<T>,
    c: usize,
    smooth: &SmoothConfig,
) -> Result<Tensor<T>> {
    check_record_matches(img, record)?;
    let grads = grad_wrt_attention(record, weights, c)?;
    let sg = smooth_grad(img, weights, &record.config, c, smooth)?;
    snna_relevance_from_parts(&record.attention, &record.value_norms, &grads.layers, &sg)
}

/// SNNA map: the [CLS] row of [`snna_relevance`] without the [CLS] entry,
/// keeping positive relevance only.
pub fn snna<T: Scalar>(
    img: &ImageTensor<T>,
    record: &ForwardRecord<T>,
    weights: &ModelWeights<T>,
    c: usize,
    smooth: &SmoothConfig,
) -> Result<AttributionMap<T>> {
    let r = snna_relevance(img, record, weights, c, smooth)?;
    let values = cls_patch_row(&r).into_iter().map(|v| v.max(T::zero())).collect();
    let method = if *smooth == SmoothConfig::deterministic() {
        Method::SnnaDeterministic
    } else {
        Method::Snna
    };
    AttributionMap::new(values, method, Some(c), record.config.grid())
}

/// Uniform random scores in `[0, 1)`; the control every method should beat.
pub fn random_attribution<T: Scalar>(grid: (usize, usize), seed: u64) -> AttributionMap<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..grid.0 * grid.1).map(|_| T::lit(rng.random::<f64>())).collect();
    AttributionMap::new(values, Method::Random, None, grid).expect("sized to grid")
}

/// Settings shared by [`explain`] across methods.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplainOptions<T> {
    pub smooth: SmoothConfig,
    pub ig: IgConfig<T>,
    /// Seed of the random control.
    pub random_seed: u64,
}

impl<T> Default for ExplainOptions<T> {
    fn default() -> Self {
        Self {
            smooth: SmoothConfig::default(),
            ig: IgConfig::default(),
            random_seed: 0,
        }
    }
}

/// Runs one method end to end for class `c`, reusing `record` when it was
/// produced from `img`.
pub fn explain<T: Scalar>(
    method: Method,
    img: &ImageTensor<T>,
    record: &ForwardRecord<T>,
    weights: &ModelWeights<T>,
    c: usize,
    options: &ExplainOptions<T>,
) -> Result<AttributionMap<T>> {
    let cfg = &record.config;
    if c >= cfg.num_classes {
        return Err(Error::Usage(format!("class {c} out of range for {} classes", cfg.num_classes)));
    }
    check_record_matches(img, record)?;
    let grads = || grad_wrt_attention(record, weights, c);
    match method {
        Method::RawAtt => raw_att(record),
        Method::AttIn => att_in(record),
        Method::AttGrad => att_grad(record, &grads()?),
        Method::GenericAtt => generic_att(record, &grads()?),
        Method::AttIg => {
            let ig = integrated_gradients(img, weights, cfg, &options.ig, c)?;
            att_ig(record, &grads()?, &ig.attribution)
        }
        Method::Snna => {
            let mut map = snna(img, record, weights, c, &options.smooth)?;
            map.method = Method::Snna;
            Ok(map)
        }
        Method::SnnaDeterministic => snna(img, record, weights, c, &SmoothConfig::deterministic()),
        Method::Random => Ok(random_attribution(cfg.grid(), options.random_seed)),
    }
    .and_then(|map| check_finite(map))
}

fn check_finite<T: Scalar>(map: AttributionMap<T>) -> Result<AttributionMap<T>> {
    if map.values.iter().all(|v| v.is_finite()) {
        Ok(map)
    } else {
        Err(Error::Numeric(format!("{} attribution", map.method)))
    }
}
