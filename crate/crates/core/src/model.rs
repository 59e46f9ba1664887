//! Minimal pre-norm Vision Transformer whose forward pass records everything
//! the attribution methods read: per-layer attention, per-head transformed
//! value norms, token states and logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::scalar::Scalar;
use crate::tensor::{add_row_bias, gelu, layer_norm, matmul, softmax_rows, Tensor};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub num_classes: usize,
    pub layernorm_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_size", self.patch_size),
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_h.is_multiple_of(self.patch_size) || !self.image_w.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image {}×{} is not divisible by patch size {}",
                self.image_h, self.image_w, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(self.layernorm_eps > 0.0) {
            return Err(Error::Config("layernorm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Patch grid as `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_size, self.image_w / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    /// Sequence length including the [CLS] token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.embed_dim
    }

    /// Top-left pixel `(y, x)` of a patch.
    pub fn patch_origin(&self, patch: usize) -> (usize, usize) {
        let cols = self.grid().1;
        ((patch / cols) * self.patch_size, (patch % cols) * self.patch_size)
    }

    /// Flat index into the `C×H×W` image tensor of element `k` of a patch's
    /// flattened vector. Patches flatten row-major with channels innermost.
    pub fn patch_element_index(&self, patch: usize, k: usize) -> usize {
        let (y0, x0) = self.patch_origin(patch);
        let c = k % self.channels;
        let pix = k / self.channels;
        let (dy, dx) = (pix / self.patch_size, pix % self.patch_size);
        (c * self.image_h + y0 + dy) * self.image_w + x0 + dx
    }
}

/// Weights of one encoder block. Matrices are stored `in×out` (row vector
/// times matrix); head `h` owns columns `h·d_k..(h+1)·d_k` of the Q/K/V
/// projections and rows `h·d_k..(h+1)·d_k` of the output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub norm1_gain: Tensor<T>,
    pub norm1_bias: Tensor<T>,
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub norm2_gain: Tensor<T>,
    pub norm2_bias: Tensor<T>,
    pub w_fc1: Tensor<T>,
    pub b_fc1: Tensor<T>,
    pub w_fc2: Tensor<T>,
    pub b_fc2: Tensor<T>,
}

const LAYER_TENSORS: [&str; 16] = [
    "norm1.gain",
    "norm1.bias",
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.k.bias",
    "attn.v.weight",
    "attn.v.bias",
    "attn.out.weight",
    "attn.out.bias",
    "norm2.gain",
    "norm2.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

impl<T: Scalar> LayerWeights<T> {
    fn shapes(cfg: &ModelConfig) -> [Vec<usize>; 16] {
        let (d, m) = (cfg.embed_dim, cfg.mlp_dim());
        [
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
            vec![d, m],
            vec![m],
            vec![m, d],
            vec![d],
        ]
    }

    fn tensors(&self) -> [&Tensor<T>; 16] {
        [
            &self.norm1_gain,
            &self.norm1_bias,
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.norm2_gain,
            &self.norm2_bias,
            &self.w_fc1,
            &self.b_fc1,
            &self.w_fc2,
            &self.b_fc2,
        ]
    }

    fn from_tensors(mut it: impl Iterator<Item = Tensor<T>>) -> Self {
        let mut next = || it.next().expect("layer tensor count");
        Self {
            norm1_gain: next(),
            norm1_bias: next(),
            w_q: next(),
            b_q: next(),
            w_k: next(),
            b_k: next(),
            w_v: next(),
            b_v: next(),
            w_o: next(),
            b_o: next(),
            norm2_gain: next(),
            norm2_bias: next(),
            w_fc1: next(),
            b_fc1: next(),
            w_fc2: next(),
            b_fc2: next(),
        }
    }
}

/// All model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    pub patch_projection: Tensor<T>,
    pub patch_bias: Tensor<T>,
    pub cls_token: Tensor<T>,
    pub positional_encoding: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm_gain: Tensor<T>,
    pub final_norm_bias: Tensor<T>,
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
}

/// Canonical `(name, shape)` list of every parameter tensor, in storage order.
pub fn tensor_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let mut out = vec![
        ("patch_embed.weight".to_string(), vec![cfg.patch_dim(), d]),
        ("patch_embed.bias".to_string(), vec![d]),
        ("cls_token".to_string(), vec![d]),
        ("pos_embed".to_string(), vec![cfg.seq_len(), d]),
    ];
    for l in 0..cfg.layers {
        for (name, shape) in LAYER_TENSORS.iter().zip(LayerWeights::<f32>::shapes(cfg)) {
            out.push((format!("blocks.{l}.{name}"), shape));
        }
    }
    out.push(("norm.gain".to_string(), vec![d]));
    out.push(("norm.bias".to_string(), vec![d]));
    out.push(("head.weight".to_string(), vec![d, cfg.num_classes]));
    out.push(("head.bias".to_string(), vec![cfg.num_classes]));
    out
}

impl<T: Scalar> ModelWeights<T> {
    /// Parameter tensors in [`tensor_layout`] order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![
            &self.patch_projection,
            &self.patch_bias,
            &self.cls_token,
            &self.positional_encoding,
        ];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.extend([
            &self.final_norm_gain,
            &self.final_norm_bias,
            &self.head_weight,
            &self.head_bias,
        ]);
        out
    }

    /// Assembles weights from tensors in [`tensor_layout`] order, validating shapes.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        cfg.validate()?;
        let layout = tensor_layout(cfg);
        if layout.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("counted");
        let patch_projection = next();
        let patch_bias = next();
        let cls_token = next();
        let positional_encoding = next();
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights::from_tensors((0..16).map(|_| next())))
            .collect();
        let weights = Self {
            patch_projection,
            patch_bias,
            cls_token,
            positional_encoding,
            layers,
            final_norm_gain: next(),
            final_norm_bias: next(),
            head_weight: next(),
            head_bias: next(),
        };
        weights.validate(cfg)?;
        Ok(weights)
    }

    /// Builds weights by calling `init(name, shape)` for each tensor in layout order.
    pub fn from_fn(cfg: &ModelConfig, mut init: impl FnMut(&str, &[usize]) -> Tensor<T>) -> Result<Self> {
        let tensors = tensor_layout(cfg)
            .iter()
            .map(|(name, shape)| init(name, shape))
            .collect();
        Self::from_tensors(cfg, tensors)
    }

    /// Checks every shape against `cfg` and that all values are finite.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        if self.layers.len() != cfg.layers {
            return Err(Error::Shape(format!(
                "config has {} layers, weights have {}",
                cfg.layers,
                self.layers.len()
            )));
        }
        for ((name, shape), t) in tensor_layout(cfg).iter().zip(self.tensors()) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Numeric(format!("weight tensor {name}")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        let cast_layer = |l: &LayerWeights<T>| LayerWeights::from_tensors(l.tensors().into_iter().map(|t| t.cast()));
        ModelWeights {
            patch_projection: self.patch_projection.cast(),
            patch_bias: self.patch_bias.cast(),
            cls_token: self.cls_token.cast(),
            positional_encoding: self.positional_encoding.cast(),
            layers: self.layers.iter().map(cast_layer).collect(),
            final_norm_gain: self.final_norm_gain.cast(),
            final_norm_bias: self.final_norm_bias.cast(),
            head_weight: self.head_weight.cast(),
            head_bias: self.head_bias.cast(),
        }
    }
}

/// Token states `Z^l`; row 0 is the [CLS] token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Tensor<T>,
    pub layer_index: usize,
}

/// Optional interventions applied during a forward pass. Indices are patch
/// indices (0-based, [CLS] excluded) so [CLS] can never be selected.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Patch tokens replaced by the zero vector after patchify and positional encoding.
    pub token_mask: Vec<usize>,
    /// Patch tokens whose attention columns are zeroed after softmax in every layer and head.
    pub attention_mask: Vec<usize>,
}

/// Intermediates of one encoder block retained for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache<T> {
    pub(crate) normed1: Tensor<T>,
    pub(crate) q: Tensor<T>,
    pub(crate) k: Tensor<T>,
    pub(crate) v: Tensor<T>,
    pub(crate) residual_mid: Tensor<T>,
    pub(crate) normed2: Tensor<T>,
    pub(crate) fc1_pre: Tensor<T>,
    pub(crate) fc1_act: Tensor<T>,
}

/// Everything recorded by [`forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardRecord<T> {
    pub config: ModelConfig,
    /// `A^l`, one `h×(n+1)×(n+1)` tensor per layer (after any attention mask).
    pub attention: Vec<Tensor<T>>,
    /// Per-head `‖v̂^l_j‖₂`, one `h×(n+1)` tensor per layer.
    pub value_norms: Vec<Tensor<T>>,
    /// `z^0 … z^L`.
    pub token_states: Vec<TokenSequence<T>>,
    pub pre_softmax_scores: Vec<Tensor<T>>,
    /// Pre-sigmoid class scores.
    pub logits: Tensor<T>,
    pub options: ForwardOptions,
    pub(crate) caches: Vec<LayerCache<T>>,
}

impl<T: Scalar> ForwardRecord<T> {
    /// Verifies the record holds a full set of per-layer tensors for `weights`.
    pub fn check_complete(&self, weights: &ModelWeights<T>) -> Result<()> {
        let l = weights.layers.len();
        if self.attention.len() != l
            || self.value_norms.len() != l
            || self.pre_softmax_scores.len() != l
            || self.caches.len() != l
            || self.token_states.len() != l + 1
        {
            return Err(Error::State(format!(
                "forward record is incomplete for a {l}-layer model"
            )));
        }
        Ok(())
    }
}

fn check_image<T: Scalar>(img: &ImageTensor<T>, cfg: &ModelConfig) -> Result<()> {
    let expect = [cfg.channels, cfg.image_h, cfg.image_w];
    if img.data.shape() != expect {
        return Err(Error::Dimension {
            op: "image vs config",
            left: img.data.shape().to_vec(),
            right: expect.to_vec(),
        });
    }
    Ok(())
}

/// Flattens each patch, projects it, prepends [CLS] and adds positional encodings.
pub fn patchify<T: Scalar>(
    img: &ImageTensor<T>,
    weights: &ModelWeights<T>,
    cfg: &ModelConfig,
) -> Result<TokenSequence<T>> {
    check_image(img, cfg)?;
    let n = cfg.num_patches();
    let pd = cfg.patch_dim();
    let pixels = img.data.data();
    let flat = Tensor::from_fn(&[n, pd], |k| pixels[cfg.patch_element_index(k / pd, k % pd)]);
    let mut emb = matmul(&flat, &weights.patch_projection)?;
    add_row_bias(&mut emb, &weights.patch_bias)?;
    let d = cfg.embed_dim;
    let mut tokens = Tensor::zeros(&[n + 1, d]);
    tokens.row_mut(0).copy_from_slice(weights.cls_token.data());
    for i in 0..n {
        tokens.row_mut(i + 1).copy_from_slice(emb.row(i));
    }
    let tokens = tokens.add(&weights.positional_encoding)?;
    Ok(TokenSequence {
        tokens,
        layer_index: 0,
    })
}

/// Per-token `‖v̂_j‖₂` for one head from already-projected values `v = x W^V + b^V`.
fn head_value_norms<T: Scalar>(v: &Tensor<T>, w_o: &Tensor<T>, head: usize, dk: usize) -> Vec<T> {
    let d = w_o.last_dim();
    let mut vhat = vec![T::zero(); d];
    (0..v.rows())
        .map(|j| {
            vhat.iter_mut().for_each(|x| *x = T::zero());
            for t in 0..dk {
                let vj = v.row(j)[head * dk + t];
                for (o, &w) in vhat.iter_mut().zip(w_o.row(head * dk + t)) {
                    *o = *o + vj * w;
                }
            }
            vhat.iter().fold(T::zero(), |s, &x| s + x * x).sqrt()
        })
        .collect()
}

/// Norm of the transformed value vectors `v̂_j = (z_j W^V_h + b^V_h) W^O_h` of one
/// head, for every token of `z` (the attention input, i.e. after the block's
/// first layer norm). Only one `d`-vector is alive at a time.
pub fn norm_value_projection<T: Scalar>(
    z: &Tensor<T>,
    w: &LayerWeights<T>,
    head: usize,
    heads: usize,
) -> Result<Tensor<T>> {
    let d = w.w_v.shape()[0];
    if heads == 0 || !d.is_multiple_of(heads) || head >= heads {
        return Err(Error::Parameter(format!("head {head} of {heads} is invalid for d={d}")));
    }
    let mut v = matmul(z, &w.w_v)?;
    add_row_bias(&mut v, &w.b_v)?;
    Ok(Tensor::from_vec(head_value_norms(&v, &w.w_o, head, d / heads)))
}

/// Multi-head attention output in the concatenated-heads form
/// `(Σ_j A_ij v_j) W^O`, without the output bias.
pub fn attention_output_concat<T: Scalar>(
    attention: &Tensor<T>,
    v: &Tensor<T>,
    w_o: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let context = attention_context(attention, v, heads);
    matmul(&context, w_o)
}

/// The same output computed as `Σ_h Σ_j A^h_ij v̂^h_j` with every transformed
/// value vector materialized.
pub fn attention_output_transformed<T: Scalar>(
    attention: &Tensor<T>,
    v: &Tensor<T>,
    w_o: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let (s, d) = (v.rows(), v.last_dim());
    let dk = d / heads;
    let mut out = Tensor::zeros(&[s, d]);
    for h in 0..heads {
        let vh = Tensor::from_fn(&[s, dk], |k| v.row(k / dk)[h * dk + k % dk]);
        let wo_h = Tensor::from_fn(&[dk, d], |k| w_o.row(h * dk + k / d)[k % d]);
        let vhat = matmul(&vh, &wo_h)?;
        let a = Tensor::from_fn(&[s, s], |k| attention.data()[h * s * s + k]);
        out = out.add(&matmul(&a, &vhat)?)?;
    }
    Ok(out)
}

/// Largest elementwise gap between the two attention-output forms, relative to
/// the larger of the output and transformed-value magnitudes.
pub fn reformulation_gap<T: Scalar>(
    attention: &Tensor<T>,
    v: &Tensor<T>,
    w_o: &Tensor<T>,
    heads: usize,
) -> Result<T> {
    let a = attention_output_concat(attention, v, w_o, heads)?;
    let b = attention_output_transformed(attention, v, w_o, heads)?;
    let scale = a.max_abs().max(b.max_abs());
    let gap = a.sub(&b)?.max_abs();
    Ok(if scale > T::zero() { gap / scale } else { gap })
}

fn attention_context<T: Scalar>(attention: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Tensor<T> {
    let (s, d) = (v.rows(), v.last_dim());
    let dk = d / heads;
    let mut ctx = Tensor::zeros(&[s, d]);
    for h in 0..heads {
        for i in 0..s {
            let arow = &attention.data()[(h * s + i) * s..(h * s + i + 1) * s];
            for (j, &a) in arow.iter().enumerate() {
                let vj = &v.row(j)[h * dk..(h + 1) * dk];
                let out = &mut ctx.row_mut(i)[h * dk..(h + 1) * dk];
                for (o, &x) in out.iter_mut().zip(vj) {
                    *o = *o + a * x;
                }
            }
        }
    }
    ctx
}

/// Scaled dot-product scores `q_h k_hᵀ / √d_k` for every head, `h×s×s`.
pub(crate) fn attention_scores<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, heads: usize) -> Tensor<T> {
    let (s, d) = (q.rows(), q.last_dim());
    let dk = d / heads;
    let root = T::from_usize(dk).unwrap().sqrt();
    Tensor::from_fn(&[heads, s, s], |idx| {
        let h = idx / (s * s);
        let (i, j) = ((idx / s) % s, idx % s);
        let qi = &q.row(i)[h * dk..(h + 1) * dk];
        let kj = &k.row(j)[h * dk..(h + 1) * dk];
        qi.iter().zip(kj).fold(T::zero(), |acc, (&a, &b)| acc + a * b) / root
    })
}

/// Zeroes the attention columns of the given patches in every head and row.
pub(crate) fn apply_attention_mask<T: Scalar>(a: &mut Tensor<T>, patches: &[usize]) {
    let s = a.last_dim();
    for r in 0..a.rows() {
        let row = a.row_mut(r);
        for &p in patches {
            row[p + 1] = T::zero();
        }
    }
    debug_assert!(patches.iter().all(|&p| p + 1 < s));
}

struct BlockOutput<T> {
    tokens: Tensor<T>,
    attention: Tensor<T>,
    scores: Tensor<T>,
    value_norms: Tensor<T>,
    cache: LayerCache<T>,
}

fn encoder_block<T: Scalar>(
    z: &Tensor<T>,
    w: &LayerWeights<T>,
    cfg: &ModelConfig,
    attention_mask: &[usize],
    with_mlp: bool,
) -> Result<BlockOutput<T>> {
    let eps = T::lit(cfg.layernorm_eps);
    let heads = cfg.heads;
    let normed1 = layer_norm(z, &w.norm1_gain, &w.norm1_bias, eps)?;
    let project = |wt: &Tensor<T>, b: &Tensor<T>| -> Result<Tensor<T>> {
        let mut out = matmul(&normed1, wt)?;
        add_row_bias(&mut out, b)?;
        Ok(out)
    };
    let q = project(&w.w_q, &w.b_q)?;
    let k = project(&w.w_k, &w.b_k)?;
    let v = project(&w.w_v, &w.b_v)?;
    let scores = attention_scores(&q, &k, heads);
    let mut attention = softmax_rows(&scores);
    apply_attention_mask(&mut attention, attention_mask);

    let mut y = attention_output_concat(&attention, &v, &w.w_o, heads)?;
    if cfg!(debug_assertions) {
        let gap = reformulation_gap(&attention, &v, &w.w_o, heads)?;
        debug_assert!(gap <= T::lit(1e-5), "attention reformulation gap {gap}");
    }
    add_row_bias(&mut y, &w.b_o)?;
    let residual_mid = z.add(&y)?;

    let dk = cfg.head_dim();
    let s = z.rows();
    let mut norms = Vec::with_capacity(heads * s);
    for h in 0..heads {
        norms.extend(head_value_norms(&v, &w.w_o, h, dk));
    }
    let value_norms = Tensor::new(vec![heads, s], norms)?;

    let normed2 = layer_norm(&residual_mid, &w.norm2_gain, &w.norm2_bias, eps)?;
    let mut fc1_pre = matmul(&normed2, &w.w_fc1)?;
    add_row_bias(&mut fc1_pre, &w.b_fc1)?;
    let fc1_act = gelu(&fc1_pre);
    let tokens = if with_mlp {
        let mut m = matmul(&fc1_act, &w.w_fc2)?;
        add_row_bias(&mut m, &w.b_fc2)?;
        residual_mid.add(&m)?
    } else {
        residual_mid.clone()
    };
    Ok(BlockOutput {
        tokens,
        attention,
        scores,
        value_norms,
        cache: LayerCache {
            normed1,
            q,
            k,
            v,
            residual_mid,
            normed2,
            fc1_pre,
            fc1_act,
        },
    })
}

/// One attention sub-block with its pre-norm residual: `z' = z + Attn(LN(z))`.
/// Returns the new tokens, `A^l` and the per-head value norms.
pub fn attention_layer<T: Scalar>(
    z: &TokenSequence<T>,
    w: &LayerWeights<T>,
    cfg: &ModelConfig,
) -> Result<(TokenSequence<T>, Tensor<T>, Tensor<T>)> {
    if z.tokens.shape() != [cfg.seq_len(), cfg.embed_dim] {
        return Err(Error::Dimension {
            op: "attention_layer",
            left: z.tokens.shape().to_vec(),
            right: vec![cfg.seq_len(), cfg.embed_dim],
        });
    }
    let out = encoder_block(&z.tokens, w, cfg, &[], false)?;
    Ok((
        TokenSequence {
            tokens: out.tokens,
            layer_index: z.layer_index + 1,
        },
        out.attention,
        out.value_norms,
    ))
}

/// Full forward pass recording attention, value norms, token states and logits.
pub fn forward<T: Scalar>(
    img: &ImageTensor<T>,
    weights: &ModelWeights<T>,
    cfg: &ModelConfig,
) -> Result<ForwardRecord<T>> {
    forward_with(img, weights, cfg, &ForwardOptions::default())
}

/// Forward pass with token or attention masking applied.
pub fn forward_with<T: Scalar>(
    img: &ImageTensor<T>,
    weights: &ModelWeights<T>,
    cfg: &ModelConfig,
    options: &ForwardOptions,
) -> Result<ForwardRecord<T>> {
    let n = cfg.num_patches();
    if let Some(&p) = options.token_mask.iter().chain(&options.attention_mask).find(|&&p| p >= n) {
        return Err(Error::Parameter(format!("masked patch {p} out of range for {n} patches")));
    }
    let mut z = patchify(img, weights, cfg)?;
    for &p in &options.token_mask {
        z.tokens.row_mut(p + 1).iter_mut().for_each(|x| *x = T::zero());
    }
    let l = weights.layers.len();
    let mut record = ForwardRecord {
        config: cfg.clone(),
        attention: Vec::with_capacity(l),
        value_norms: Vec::with_capacity(l),
        token_states: vec![z],
        pre_softmax_scores: Vec::with_capacity(l),
        logits: Tensor::zeros(&[cfg.num_classes]),
        options: options.clone(),
        caches: Vec::with_capacity(l),
    };
    for (idx, layer) in weights.layers.iter().enumerate() {
        let input = &record.token_states[idx].tokens;
        let out = encoder_block(input, layer, cfg, &options.attention_mask, true)?;
        if !out.tokens.all_finite() {
            return Err(Error::Numeric(format!("encoder layer {}", idx + 1)));
        }
        record.attention.push(out.attention);
        record.value_norms.push(out.value_norms);
        record.pre_softmax_scores.push(out.scores);
        record.caches.push(out.cache);
        record.token_states.push(TokenSequence {
            tokens: out.tokens,
            layer_index: idx + 1,
        });
    }
    let last = &record.token_states[l].tokens;
    let cls = Tensor::new(vec![1, cfg.embed_dim], last.row(0).to_vec())?;
    let normed = layer_norm(
        &cls,
        &weights.final_norm_gain,
        &weights.final_norm_bias,
        T::lit(cfg.layernorm_eps),
    )?;
    let mut logits = matmul(&normed, &weights.head_weight)?;
    add_row_bias(&mut logits, &weights.head_bias)?;
    if !logits.all_finite() {
        return Err(Error::Numeric("classifier head".into()));
    }
    record.logits = logits.reshape(&[cfg.num_classes])?;
    Ok(record)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Index of the largest logit (first on ties).
pub fn predicted_class<T: Scalar>(logits: &Tensor<T>) -> usize {
    logits
        .data()
        .iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
