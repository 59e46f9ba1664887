//! Deterministic tiny model and synthetic dataset.
//!
//! Every random draw comes from seeded ChaCha8 streams, so the same
//! [`FixtureSpec`] always produces a byte-identical directory.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{explain, ExplainOptions, Method};
use crate::error::Result;
use crate::evaluation::{LabeledSample, Sample};
use crate::grad::grad_wrt_attention;
use crate::image::{ImageTensor, Normalization};
use crate::io::{default_class_names, save_weights, write_bytes, write_json, DatasetManifest};
use crate::model::{forward, predicted_class, ModelConfig, ModelWeights};
use crate::tensor::{bilinear_upsample, Tensor};
use crate::viz::write_rgb_png;

/// Stream offsets keep the weight and image draws independent.
const WEIGHT_STREAM: u64 = 0x5745_4947;
const IMAGE_STREAM: u64 = 0x494d_4147;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub seed: u64,
    pub config: ModelConfig,
    pub samples: usize,
    /// Half-width of the uniform weight distribution.
    pub weight_scale: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            config: tiny_config(),
            samples: 50,
            weight_scale: 0.05,
        }
    }
}

/// Patch 4, 32×32 RGB, width 16, 2 heads, 3 layers, 4 classes.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        patch_size: 4,
        image_h: 32,
        image_w: 32,
        channels: 3,
        embed_dim: 16,
        heads: 2,
        layers: 3,
        num_classes: 4,
        layernorm_eps: 1e-6,
    }
}

/// Weights drawn from `U(-s, s)`; LayerNorm gains are `1 + U(-s, s)`.
pub fn fixture_weights(spec: &FixtureSpec) -> Result<ModelWeights<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ WEIGHT_STREAM);
    let s = spec.weight_scale;
    ModelWeights::from_fn(&spec.config, |name, shape| {
        let offset = if name.ends_with(".gain") { 1.0 } else { 0.0 };
        Tensor::from_fn(shape, |_| (offset + rng.random_range(-s..s)) as f32)
    })
}

/// One synthetic image: smooth noise plus a high-contrast square whose
/// quadrant sets the matching label bit. Returns interleaved RGB bytes.
pub fn synthetic_image(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<u8>, Vec<u8>)> {
    let (h, w, c) = (cfg.image_h, cfg.image_w, cfg.channels);
    let coarse = 4usize;
    let (fy, fx) = (h.div_ceil(coarse), w.div_ceil(coarse));
    let factor = fy.max(fx).max(1);
    let mut planes = Vec::with_capacity(c);
    for _ in 0..c {
        let grid = Tensor::from_fn(&[coarse, coarse], |_| rng.random_range(0.25..0.75));
        planes.push(bilinear_upsample(&grid, factor)?);
    }
    let side = rng.random_range(h.min(w) / 4..=h.min(w) / 3).max(1);
    let top = rng.random_range(0..=h - side);
    let left = rng.random_range(0..=w - side);
    let color: Vec<f64> = (0..c).map(|_| if rng.random_bool(0.5) { 0.95 } else { 0.05 }).collect();
    let (cy, cx) = (top + side / 2, left + side / 2);
    let quadrant = usize::from(cy >= h / 2) * 2 + usize::from(cx >= w / 2);
    let mut label: Vec<u8> = (0..cfg.num_classes).map(|_| u8::from(rng.random_bool(0.25))).collect();
    label[quadrant % cfg.num_classes] = 1;
    let mut pixels = vec![0u8; h * w * c];
    let pw = factor * coarse;
    for y in 0..h {
        for x in 0..w {
            let inside = (top..top + side).contains(&y) && (left..left + side).contains(&x);
            for ch in 0..c {
                let v = if inside { color[ch] } else { planes[ch].data()[y * pw + x] };
                pixels[(y * w + x) * c + ch] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok((pixels, label))
}

/// The synthetic dataset as `(interleaved RGB bytes, label)` pairs.
pub fn synthetic_dataset(spec: &FixtureSpec) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ IMAGE_STREAM);
    (0..spec.samples).map(|_| synthetic_image(&spec.config, &mut rng)).collect()
}

/// The synthetic dataset decoded into normalized tensors.
pub fn synthetic_samples(spec: &FixtureSpec, normalization: &Normalization) -> Result<Vec<Sample<f32>>> {
    let cfg = &spec.config;
    synthetic_dataset(spec)?
        .into_iter()
        .map(|(pixels, label)| {
            let image = ImageTensor::from_interleaved_u8(cfg.image_w, cfg.image_h, cfg.channels, &pixels, normalization.clone())?;
            Ok(Sample { image, label })
        })
        .collect()
}

pub fn sample_file_name(i: usize) -> String {
    format!("sample_{i:03}.png")
}

fn csv_rows(header: &str, values: impl IntoIterator<Item = String>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for v in values {
        out.push_str(&v);
        out.push('\n');
    }
    out
}

/// Writes `weights/`, `dataset/` and `golden/` under `out`. Golden outputs
/// describe sample 0 explained for its predicted class.
pub fn generate_fixture(spec: &FixtureSpec, out: &Path) -> Result<()> {
    let cfg = &spec.config;
    let normalization = Normalization::uniform(cfg.channels, 0.5, 0.5);
    let weights = fixture_weights(spec)?;
    save_weights(&out.join("weights"), cfg, &normalization, &weights)?;

    let data = synthetic_dataset(spec)?;
    let images = out.join("dataset").join("images");
    let mut entries = Vec::with_capacity(data.len());
    for (i, (pixels, label)) in data.iter().enumerate() {
        let name = sample_file_name(i);
        write_rgb_png(&images.join(&name), cfg.image_w, cfg.image_h, pixels)?;
        entries.push(LabeledSample {
            image: name.into(),
            label: label.clone(),
        });
    }
    let manifest = DatasetManifest {
        root: "images".into(),
        entries,
        class_names: default_class_names(),
    };
    write_json(&out.join("dataset").join("dataset.json"), &manifest)?;
    write_json(&out.join("fixture.json"), spec)?;

    let Some((pixels, _)) = data.first() else {
        return Ok(());
    };
    let golden = out.join("golden");
    let img = ImageTensor::from_interleaved_u8(cfg.image_w, cfg.image_h, cfg.channels, pixels, normalization)?;
    let record = forward(&img, &weights, cfg)?;
    let c = predicted_class(&record.logits);
    write_bytes(
        &golden.join("logits.csv"),
        csv_rows("class,logit", record.logits.data().iter().enumerate().map(|(i, v)| format!("{i},{v:e}"))).as_bytes(),
    )?;
    let grads = grad_wrt_attention(&record, &weights, c)?;
    let last = grads.last();
    let s = cfg.seq_len();
    write_bytes(
        &golden.join("grad_last_layer.csv"),
        csv_rows(
            "head,row,col,value",
            last.data().iter().enumerate().map(|(k, v)| format!("{},{},{},{v:e}", k / (s * s), k / s % s, k % s)),
        )
        .as_bytes(),
    )?;
    let (_, gw) = cfg.grid();
    for method in Method::COMPARED {
        let map = explain(method, &img, &record, &weights, c, &ExplainOptions::default())?;
        write_bytes(
            &golden.join(format!("{method}.csv")),
            csv_rows(
                "patch_index,row,col,value",
                map.values.iter().enumerate().map(|(i, v)| format!("{i},{},{},{v:e}", i / gw, i % gw)),
            )
            .as_bytes(),
        )?;
    }
    Ok(())
}
