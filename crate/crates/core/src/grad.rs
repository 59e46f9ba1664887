//! Hand-written reverse pass over a recorded forward.
//!
//! The pass walks the fixed ViT topology backwards from a seed over the
//! logits, yielding `∂f/∂A^l` at every post-softmax (post-mask) attention
//! tensor and `∂f/∂x` at the input image.

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::{forward, ForwardRecord, ModelConfig, ModelWeights};
use crate::scalar::Scalar;
use crate::tensor::{gelu_grad_scalar, layer_norm, layer_norm_backward, matmul, softmax_rows, Tensor};

/// `∂f_c/∂A^l` for every layer, each `h×(n+1)×(n+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGradients<T> {
    pub layers: Vec<Tensor<T>>,
    /// `None` when the seed was not a single class.
    pub target_class: Option<usize>,
}

impl<T: Scalar> AttentionGradients<T> {
    pub fn last(&self) -> &Tensor<T> {
        self.layers.last().expect("at least one layer")
    }
}

/// `∂f_c/∂x`, shaped like the input image (`C×H×W`).
#[derive(Clone, Debug, PartialEq)]
pub struct InputGradient<T> {
    pub gradient: Tensor<T>,
    pub target_class: usize,
}

struct Backward<T> {
    attention: Vec<Tensor<T>>,
    tokens: Tensor<T>,
}

fn class_seed<T: Scalar>(cfg: &ModelConfig, c: usize) -> Result<Tensor<T>> {
    if c >= cfg.num_classes {
        return Err(Error::Parameter(format!(
            "class {c} out of range for {} classes",
            cfg.num_classes
        )));
    }
    Ok(Tensor::from_fn(&[cfg.num_classes], |k| if k == c { T::one() } else { T::zero() }))
}

fn backward<T: Scalar>(record: &ForwardRecord<T>, weights: &ModelWeights<T>, seed: &Tensor<T>) -> Result<Backward<T>> {
    record.check_complete(weights)?;
    let cfg = &record.config;
    if seed.len() != cfg.num_classes {
        return Err(Error::Dimension {
            op: "logit seed",
            left: seed.shape().to_vec(),
            right: vec![cfg.num_classes],
        });
    }
    let (s, d, heads) = (cfg.seq_len(), cfg.embed_dim, cfg.heads);
    let dk = cfg.head_dim();
    let eps = T::lit(cfg.layernorm_eps);
    let root = T::from_usize(dk).unwrap().sqrt();
    let layers = weights.layers.len();

    // classifier head and final norm act on the [CLS] row only
    let seed_col = Tensor::new(vec![cfg.num_classes, 1], seed.data().to_vec())?;
    let d_normed = matmul(&weights.head_weight, &seed_col)?.reshape(&[1, d])?;
    let cls = Tensor::new(vec![1, d], record.token_states[layers].tokens.row(0).to_vec())?;
    let d_cls = layer_norm_backward(&cls, &weights.final_norm_gain, eps, &d_normed)?;
    let mut dz = Tensor::zeros(&[s, d]);
    dz.row_mut(0).copy_from_slice(d_cls.data());

    let mut d_attention = vec![Tensor::zeros(&[1]); layers];
    for l in (0..layers).rev() {
        let w = &weights.layers[l];
        let cache = &record.caches[l];
        let attention = &record.attention[l];

        // MLP sub-block: out = mid + fc2(gelu(fc1(LN2(mid))))
        let d_act = matmul(&dz, &w.w_fc2.transpose())?;
        let d_pre = d_act.zip_map(&cache.fc1_pre, |g, x| g * gelu_grad_scalar(x))?;
        let d_normed2 = matmul(&d_pre, &w.w_fc1.transpose())?;
        let d_mid = dz.add(&layer_norm_backward(&cache.residual_mid, &w.norm2_gain, eps, &d_normed2)?)?;

        // attention sub-block: mid = z + ctx W^O + b^O
        let d_ctx = matmul(&d_mid, &w.w_o.transpose())?;
        let mut d_att = Tensor::zeros(&[heads, s, s]);
        let mut dv = Tensor::zeros(&[s, d]);
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            for i in 0..s {
                let gi = &d_ctx.row(i)[cols.clone()];
                for j in 0..s {
                    let vj = &cache.v.row(j)[cols.clone()];
                    let g = gi.iter().zip(vj).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    d_att.data_mut()[(h * s + i) * s + j] = g;
                    let a = attention.data()[(h * s + i) * s + j];
                    for (o, &x) in dv.row_mut(j)[cols.clone()].iter_mut().zip(gi) {
                        *o = *o + a * x;
                    }
                }
            }
        }

        // softmax backward, through the (optional) post-softmax column mask
        let probs = softmax_rows(&record.pre_softmax_scores[l]);
        let mut d_probs = d_att.clone();
        for r in 0..d_probs.rows() {
            for &p in &record.options.attention_mask {
                d_probs.row_mut(r)[p + 1] = T::zero();
            }
        }
        let mut d_scores = Tensor::zeros(&[heads, s, s]);
        for r in 0..heads * s {
            let (p, g) = (probs.row(r), d_probs.row(r));
            let dot = p.iter().zip(g).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            for (o, (&pj, &gj)) in d_scores.row_mut(r).iter_mut().zip(p.iter().zip(g)) {
                *o = pj * (gj - dot);
            }
        }
        let mut dq = Tensor::zeros(&[s, d]);
        let mut dkey = Tensor::zeros(&[s, d]);
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            for i in 0..s {
                for j in 0..s {
                    let g = d_scores.data()[(h * s + i) * s + j] / root;
                    for t in cols.clone() {
                        let (qi, kj) = (cache.q.row(i)[t], cache.k.row(j)[t]);
                        dq.row_mut(i)[t] = dq.row(i)[t] + g * kj;
                        dkey.row_mut(j)[t] = dkey.row(j)[t] + g * qi;
                    }
                }
            }
        }
        let d_normed1 = matmul(&dq, &w.w_q.transpose())?
            .add(&matmul(&dkey, &w.w_k.transpose())?)?
            .add(&matmul(&dv, &w.w_v.transpose())?)?;
        let z_in = &record.token_states[l].tokens;
        dz = d_mid.add(&layer_norm_backward(z_in, &w.norm1_gain, eps, &d_normed1)?)?;
        d_attention[l] = d_att;
    }
    if d_attention.iter().any(|t| !t.all_finite()) || !dz.all_finite() {
        return Err(Error::Numeric("attention gradients".into()));
    }
    Ok(Backward {
        attention: d_attention,
        tokens: dz,
    })
}

/// Exact `∂logits[c]/∂A^l` for every layer of `record`.
pub fn grad_wrt_attention<T: Scalar>(
    record: &ForwardRecord<T>,
    weights: &ModelWeights<T>,
    c: usize,
) -> Result<AttentionGradients<T>> {
    let seed = class_seed(&record.config, c)?;
    Ok(AttentionGradients {
        layers: backward(record, weights, &seed)?.attention,
        target_class: Some(c),
    })
}

/// Attention gradients of the scalar `Σ_c seed[c]·logits[c]`.
pub fn grad_wrt_attention_seeded<T: Scalar>(
    record: &ForwardRecord<T>,
    weights: &ModelWeights<T>,
    seed: &Tensor<T>,
) -> Result<AttentionGradients<T>> {
    Ok(AttentionGradients {
        layers: backward(record, weights, seed)?.attention,
        target_class: None,
    })
}

/// Input gradient from an existing record.
pub fn input_gradient_from_record<T: Scalar>(
    record: &ForwardRecord<T>,
    weights: &ModelWeights<T>,
    c: usize,
) -> Result<InputGradient<T>> {
    let cfg = &record.config;
    let seed = class_seed(cfg, c)?;
    let mut d_tokens = backward(record, weights, &seed)?.tokens;
    for &p in &record.options.token_mask {
        d_tokens.row_mut(p + 1).iter_mut().for_each(|x| *x = T::zero());
    }
    let n = cfg.num_patches();
    let d = cfg.embed_dim;
    let d_emb = Tensor::from_fn(&[n, d], |k| d_tokens.row(k / d + 1)[k % d]);
    let d_flat = matmul(&d_emb, &weights.patch_projection.transpose())?;
    let mut gradient = Tensor::zeros(&[cfg.channels, cfg.image_h, cfg.image_w]);
    let pd = cfg.patch_dim();
    for patch in 0..n {
        for k in 0..pd {
            gradient.data_mut()[cfg.patch_element_index(patch, k)] = d_flat.row(patch)[k];
        }
    }
    Ok(InputGradient {
        gradient,
        target_class: c,
    })
}

/// Exact `∂logits[c]/∂x` including the patch embedding.
pub fn grad_wrt_input<T: Scalar>(
    img: &ImageTensor<T>,
    weights: &ModelWeights<T>,
    cfg: &ModelConfig,
    c: usize,
) -> Result<InputGradient<T>> {
    class_seed::<T>(cfg, c)?;
    let record = forward(img, weights, cfg)?;
    input_gradient_from_record(&record, weights, c)
}

/// Logit of class `c` computed from a record's final [CLS] state; handy for
/// checking a record against its logits.
pub fn class_logit<T: Scalar>(record: &ForwardRecord<T>, weights: &ModelWeights<T>, c: usize) -> Result<T> {
    let cfg = &record.config;
    let last = record.token_states.last().ok_or_else(|| Error::State("empty record".into()))?;
    let cls = Tensor::new(vec![1, cfg.embed_dim], last.tokens.row(0).to_vec())?;
    let normed = layer_norm(&cls, &weights.final_norm_gain, &weights.final_norm_bias, T::lit(cfg.layernorm_eps))?;
    let logits = matmul(&normed, &weights.head_weight)?;
    Ok(logits.data()[c] + weights.head_bias.data()[c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Normalization;
    use crate::model::{forward_with, ForwardOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(layers: usize) -> ModelConfig {
        ModelConfig {
            patch_size: 2,
            image_h: 4,
            image_w: 4,
            channels: 2,
            embed_dim: 8,
            heads: 2,
            layers,
            num_classes: 3,
            layernorm_eps: 1e-6,
        }
    }

    fn weights(cfg: &ModelConfig, seed: u64) -> ModelWeights<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelWeights::from_fn(cfg, |name, shape| {
            Tensor::from_fn(shape, |_| {
                let u: f64 = rng.random_range(-0.5..0.5);
                if name.ends_with("gain") { 1.0 + u } else { u }
            })
        })
        .unwrap()
    }

    fn image(cfg: &ModelConfig, seed: u64) -> ImageTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(
            Tensor::from_fn(&[cfg.channels, cfg.image_h, cfg.image_w], |_| rng.random_range(-1.0..1.0)),
            Normalization::uniform(cfg.channels, 0.5, 0.5),
        )
        .unwrap()
    }

    #[test]
    fn input_gradient_matches_finite_differences_in_f64() {
        let cfg = cfg(2);
        let w = weights(&cfg, 1);
        let img = image(&cfg, 2);
        let g = grad_wrt_input(&img, &w, &cfg, 1).unwrap();
        for k in 0..img.data.len() {
            let mut p = img.clone();
            p.data.data_mut()[k] += 1e-6;
            let mut m = img.clone();
            m.data.data_mut()[k] -= 1e-6;
            let fp = forward(&p, &w, &cfg).unwrap().logits.data()[1];
            let fm = forward(&m, &w, &cfg).unwrap().logits.data()[1];
            let fd = (fp - fm) / 2e-6;
            assert!((fd - g.gradient.data()[k]).abs() < 1e-7, "pixel {k}: {fd} vs {}", g.gradient.data()[k]);
        }
    }

    #[test]
    fn dead_class_has_zero_gradients() {
        let cfg = cfg(2);
        let mut w = weights(&cfg, 3);
        for r in 0..cfg.embed_dim {
            w.head_weight.set(&[r, 2], 0.0);
        }
        let rec = forward(&image(&cfg, 4), &w, &cfg).unwrap();
        let g = grad_wrt_attention(&rec, &w, 2).unwrap();
        assert!(g.layers.iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn gradients_are_linear_in_the_seed() {
        let cfg = cfg(2);
        let w = weights(&cfg, 5);
        let rec = forward(&image(&cfg, 6), &w, &cfg).unwrap();
        let a = grad_wrt_attention(&rec, &w, 0).unwrap();
        let b = grad_wrt_attention(&rec, &w, 2).unwrap();
        let both = grad_wrt_attention_seeded(&rec, &w, &Tensor::from_vec(vec![1.0, 0.0, 1.0])).unwrap();
        for l in 0..2 {
            let sum = a.layers[l].add(&b.layers[l]).unwrap();
            assert!(sum.sub(&both.layers[l]).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn zero_patch_projection_gives_zero_input_gradient() {
        let cfg = cfg(1);
        let mut w = weights(&cfg, 7);
        w.patch_projection = Tensor::zeros(w.patch_projection.shape());
        let g = grad_wrt_input(&image(&cfg, 8), &w, &cfg, 0).unwrap();
        assert!(g.gradient.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn only_cls_rows_reach_the_classifier_in_the_last_layer() {
        // with the MLP zeroed, non-[CLS] rows of the last attention never reach the head
        let cfg = cfg(1);
        let mut w = weights(&cfg, 9);
        for l in &mut w.layers {
            l.w_fc2 = Tensor::zeros(l.w_fc2.shape());
        }
        let rec = forward(&image(&cfg, 10), &w, &cfg).unwrap();
        let g = grad_wrt_attention(&rec, &w, 1).unwrap();
        let s = cfg.seq_len();
        for h in 0..cfg.heads {
            for i in 1..s {
                for j in 0..s {
                    assert_eq!(g.layers[0].at(&[h, i, j]), 0.0);
                }
            }
        }
        assert!(g.layers[0].max_abs() > 0.0);
    }

    #[test]
    fn incomplete_record_is_a_state_error() {
        let cfg = cfg(2);
        let w = weights(&cfg, 11);
        let mut rec = forward(&image(&cfg, 12), &w, &cfg).unwrap();
        rec.attention.pop();
        assert!(matches!(grad_wrt_attention(&rec, &w, 0), Err(Error::State(_))));
        assert!(matches!(grad_wrt_attention(&forward(&image(&cfg, 12), &w, &cfg).unwrap(), &w, 3), Err(Error::Parameter(_))));
    }

    #[test]
    fn masked_forward_gradients_match_finite_differences() {
        let cfg = cfg(2);
        let w = weights(&cfg, 13);
        let img = image(&cfg, 14);
        let options = ForwardOptions {
            token_mask: vec![1],
            attention_mask: vec![2],
        };
        let rec = forward_with(&img, &w, &cfg, &options).unwrap();
        let g = input_gradient_from_record(&rec, &w, 0).unwrap();
        for k in (0..img.data.len()).step_by(3) {
            let f = |delta: f64| {
                let mut x = img.clone();
                x.data.data_mut()[k] += delta;
                forward_with(&x, &w, &cfg, &options).unwrap().logits.data()[0]
            };
            let fd = (f(1e-6) - f(-1e-6)) / 2e-6;
            assert!((fd - g.gradient.data()[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn class_logit_agrees_with_record() {
        let cfg = cfg(2);
        let w = weights(&cfg, 15);
        let rec = forward(&image(&cfg, 16), &w, &cfg).unwrap();
        for c in 0..3 {
            assert!((class_logit(&rec, &w, c).unwrap() - rec.logits.data()[c]).abs() < 1e-12);
        }
    }
}
