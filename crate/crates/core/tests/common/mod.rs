//! Straight-line reference implementations used as test oracles.
//!
//! The forward pass is written once, per scalar, over plain nested loops and
//! is generic over [`Sc`]: plain `f64` for finite differences, or [`Var`] on a
//! thread-local tape for exact reverse-mode gradients. Attribution oracles
//! materialize every intermediate (full `v̂` vectors, full matrix products).
#![allow(dead_code)]

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::path::{Path, PathBuf};

use attrimap::attribution::SmoothConfig;
use attrimap::fixtures::{fixture_weights, synthetic_samples, FixtureSpec};
use attrimap::image::{ImageTensor, Normalization};
use attrimap::model::{ModelConfig, ModelWeights};
use attrimap::tensor::Tensor;

// ---------------------------------------------------------------- scalars

pub trait Sc: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self> {
    fn c(v: f64) -> Self;
    fn val(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn mulc(self, k: f64) -> Self;
    fn addc(self, k: f64) -> Self;
}

impl Sc for f64 {
    fn c(v: f64) -> Self {
        v
    }
    fn val(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn mulc(self, k: f64) -> Self {
        self * k
    }
    fn addc(self, k: f64) -> Self {
        self + k
    }
}

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    a: u32,
    da: f64,
    b: u32,
    db: f64,
}

thread_local! {
    static TAPE: RefCell<Vec<Node>> = const { RefCell::new(Vec::new()) };
}

/// A value recorded on the thread-local tape.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    pub id: u32,
    pub v: f64,
}

fn push(a: u32, da: f64, b: u32, db: f64, v: f64) -> Var {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        t.push(Node { a, da, b, db });
        Var {
            id: (t.len() - 1) as u32,
            v,
        }
    })
}

pub fn tape_reset() {
    TAPE.with(|t| t.borrow_mut().clear());
}

/// Adjoints of every tape node with respect to `out`.
pub fn backward(out: Var) -> Vec<f64> {
    TAPE.with(|t| {
        let t = t.borrow();
        let mut adj = vec![0.0; t.len()];
        adj[out.id as usize] = 1.0;
        for i in (0..=out.id as usize).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let n = t[i];
            if n.a != NONE {
                adj[n.a as usize] += g * n.da;
            }
            if n.b != NONE {
                adj[n.b as usize] += g * n.db;
            }
        }
        adj
    })
}

impl Add for Var {
    type Output = Var;
    fn add(self, o: Var) -> Var {
        push(self.id, 1.0, o.id, 1.0, self.v + o.v)
    }
}

impl Sub for Var {
    type Output = Var;
    fn sub(self, o: Var) -> Var {
        push(self.id, 1.0, o.id, -1.0, self.v - o.v)
    }
}

impl Mul for Var {
    type Output = Var;
    fn mul(self, o: Var) -> Var {
        push(self.id, o.v, o.id, self.v, self.v * o.v)
    }
}

impl Div for Var {
    type Output = Var;
    fn div(self, o: Var) -> Var {
        push(self.id, 1.0 / o.v, o.id, -self.v / (o.v * o.v), self.v / o.v)
    }
}

impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        push(self.id, -1.0, NONE, 0.0, -self.v)
    }
}

impl Sc for Var {
    fn c(v: f64) -> Self {
        push(NONE, 0.0, NONE, 0.0, v)
    }
    fn val(self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        push(self.id, e, NONE, 0.0, e)
    }
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        push(self.id, 1.0 - t * t, NONE, 0.0, t)
    }
    fn sqrt(self) -> Self {
        let r = self.v.sqrt();
        push(self.id, 0.5 / r, NONE, 0.0, r)
    }
    fn mulc(self, k: f64) -> Self {
        push(self.id, k, NONE, 0.0, self.v * k)
    }
    fn addc(self, k: f64) -> Self {
        push(self.id, 1.0, NONE, 0.0, self.v + k)
    }
}

// ---------------------------------------------------------------- model

/// Weights as plain nested vectors, matrices stored `[in][out]`.
pub struct OLayer {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Vec<Vec<f64>>,
    pub bq: Vec<f64>,
    pub wk: Vec<Vec<f64>>,
    pub bk: Vec<f64>,
    pub wv: Vec<Vec<f64>>,
    pub bv: Vec<f64>,
    pub wo: Vec<Vec<f64>>,
    pub bo: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
}

pub struct Oracle {
    pub p: usize,
    pub h_img: usize,
    pub w_img: usize,
    pub ch: usize,
    pub d: usize,
    pub heads: usize,
    pub classes: usize,
    pub eps: f64,
    pub proj: Vec<Vec<f64>>,
    pub proj_b: Vec<f64>,
    pub cls: Vec<f64>,
    pub pos: Vec<Vec<f64>>,
    pub layers: Vec<OLayer>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    pub head_w: Vec<Vec<f64>>,
    pub head_b: Vec<f64>,
}

fn vec1(t: &Tensor<f64>) -> Vec<f64> {
    t.data().to_vec()
}

fn mat(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(|r| r.to_vec()).collect()
}

impl Oracle {
    pub fn new(cfg: &ModelConfig, w: &ModelWeights<f64>) -> Self {
        Oracle {
            p: cfg.patch_size,
            h_img: cfg.image_h,
            w_img: cfg.image_w,
            ch: cfg.channels,
            d: cfg.embed_dim,
            heads: cfg.heads,
            classes: cfg.num_classes,
            eps: cfg.layernorm_eps,
            proj: mat(&w.patch_projection),
            proj_b: vec1(&w.patch_bias),
            cls: vec1(&w.cls_token),
            pos: mat(&w.positional_encoding),
            layers: w
                .layers
                .iter()
                .map(|l| OLayer {
                    ln1_g: vec1(&l.norm1_gain),
                    ln1_b: vec1(&l.norm1_bias),
                    wq: mat(&l.w_q),
                    bq: vec1(&l.b_q),
                    wk: mat(&l.w_k),
                    bk: vec1(&l.b_k),
                    wv: mat(&l.w_v),
                    bv: vec1(&l.b_v),
                    wo: mat(&l.w_o),
                    bo: vec1(&l.b_o),
                    ln2_g: vec1(&l.norm2_gain),
                    ln2_b: vec1(&l.norm2_bias),
                    w1: mat(&l.w_fc1),
                    b1: vec1(&l.b_fc1),
                    w2: mat(&l.w_fc2),
                    b2: vec1(&l.b_fc2),
                })
                .collect(),
            lnf_g: vec1(&w.final_norm_gain),
            lnf_b: vec1(&w.final_norm_bias),
            head_w: mat(&w.head_weight),
            head_b: vec1(&w.head_bias),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h_img / self.p, self.w_img / self.p)
    }

    pub fn n(&self) -> usize {
        let (a, b) = self.grid();
        a * b
    }

    pub fn s(&self) -> usize {
        self.n() + 1
    }
}

#[derive(Clone, Debug, Default)]
pub struct Opts {
    pub token_mask: Vec<usize>,
    pub attention_mask: Vec<usize>,
    /// Adds `delta` to `A^layer[head][i][j]` after softmax and masking.
    pub bump: Option<(usize, usize, usize, usize, f64)>,
}

pub struct Run<S> {
    /// Input tokens of every layer, then the final tokens.
    pub tokens: Vec<Vec<Vec<S>>>,
    /// `attention[l][h][i][j]`.
    pub attention: Vec<Vec<Vec<Vec<S>>>>,
    /// `value_norms[l][h][j]` from fully materialized `v̂` vectors.
    pub value_norms: Vec<Vec<Vec<f64>>>,
    /// Both attention-output forms per layer, for the reformulation check.
    pub concat_out: Vec<Vec<Vec<f64>>>,
    pub transformed_out: Vec<Vec<Vec<f64>>>,
    pub logits: Vec<S>,
}

fn affine<S: Sc>(x: &[S], w: &[Vec<f64>], b: &[f64]) -> Vec<S> {
    let mut out = Vec::with_capacity(b.len());
    for o in 0..b.len() {
        let mut acc = S::c(b[o]);
        for i in 0..x.len() {
            acc = acc + x[i].mulc(w[i][o]);
        }
        out.push(acc);
    }
    out
}

fn layer_norm<S: Sc>(x: &[S], g: &[f64], b: &[f64], eps: f64) -> Vec<S> {
    let d = x.len() as f64;
    let mut sum = S::c(0.0);
    for &v in x {
        sum = sum + v;
    }
    let mean = sum.mulc(1.0 / d);
    let mut sq = S::c(0.0);
    for &v in x {
        let c = v - mean;
        sq = sq + c * c;
    }
    let denom = sq.mulc(1.0 / d).addc(eps).sqrt();
    x.iter().enumerate().map(|(k, &v)| ((v - mean) / denom).mulc(g[k]).addc(b[k])).collect()
}

fn gelu<S: Sc>(x: S) -> S {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = (x + (x * x * x).mulc(0.044715)).mulc(c);
    (x * inner.tanh().addc(1.0)).mulc(0.5)
}

/// Patch tokens plus [CLS] and positional encodings, with token masking.
pub fn embed<S: Sc>(m: &Oracle, pixels: &[S], opts: &Opts) -> Vec<Vec<S>> {
    let (gh, gw) = m.grid();
    let (p, c, wi, hi) = (m.p, m.ch, m.w_img, m.h_img);
    let mut tokens = vec![m.cls.iter().zip(&m.pos[0]).map(|(&a, &b)| S::c(a + b)).collect::<Vec<S>>()];
    for gy in 0..gh {
        for gx in 0..gw {
            let mut flat = Vec::with_capacity(p * p * c);
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        flat.push(pixels[(ch * hi + gy * p + dy) * wi + gx * p + dx]);
                    }
                }
            }
            let idx = gy * gw + gx;
            let mut tok = affine(&flat, &m.proj, &m.proj_b);
            for k in 0..m.d {
                tok[k] = tok[k].addc(m.pos[idx + 1][k]);
            }
            if opts.token_mask.contains(&idx) {
                tok = vec![S::c(0.0); m.d];
            }
            tokens.push(tok);
        }
    }
    tokens
}

struct BlockOut<S> {
    tokens: Vec<Vec<S>>,
    attention: Vec<Vec<Vec<S>>>,
    norms: Vec<Vec<f64>>,
    concat: Vec<Vec<f64>>,
    transformed: Vec<Vec<f64>>,
}

fn block<S: Sc>(m: &Oracle, l: usize, z: &[Vec<S>], opts: &Opts) -> BlockOut<S> {
    let w = &m.layers[l];
    let (s, d, hn) = (z.len(), m.d, m.heads);
    let dk = d / hn;
    let x: Vec<Vec<S>> = z.iter().map(|t| layer_norm(t, &w.ln1_g, &w.ln1_b, m.eps)).collect();
    let q: Vec<Vec<S>> = x.iter().map(|t| affine(t, &w.wq, &w.bq)).collect();
    let k: Vec<Vec<S>> = x.iter().map(|t| affine(t, &w.wk, &w.bk)).collect();
    let v: Vec<Vec<S>> = x.iter().map(|t| affine(t, &w.wv, &w.bv)).collect();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut attention = Vec::with_capacity(hn);
    for h in 0..hn {
        let mut rows = Vec::with_capacity(s);
        for i in 0..s {
            let mut scores = Vec::with_capacity(s);
            for j in 0..s {
                let mut acc = S::c(0.0);
                for t in 0..dk {
                    acc = acc + q[i][h * dk + t] * k[j][h * dk + t];
                }
                scores.push(acc.mulc(scale));
            }
            let mx = scores.iter().map(|v| v.val()).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<S> = scores.iter().map(|&v| v.addc(-mx).exp()).collect();
            let mut total = S::c(0.0);
            for &v in &e {
                total = total + v;
            }
            let mut row: Vec<S> = e.iter().map(|&v| v / total).collect();
            for &pm in &opts.attention_mask {
                row[pm + 1] = S::c(0.0);
            }
            if let Some((bl, bh, bi, bj, delta)) = opts.bump {
                if bl == l && bh == h && bi == i {
                    row[bj] = row[bj].addc(delta);
                }
            }
            rows.push(row);
        }
        attention.push(rows);
    }

    // Concatenated form: context per head, then W^O.
    let mut y = Vec::with_capacity(s);
    let mut concat = Vec::with_capacity(s);
    for i in 0..s {
        let mut ctx = Vec::with_capacity(d);
        for h in 0..hn {
            for t in 0..dk {
                let mut acc = S::c(0.0);
                for j in 0..s {
                    acc = acc + attention[h][i][j] * v[j][h * dk + t];
                }
                ctx.push(acc);
            }
        }
        let zero_b = vec![0.0; d];
        let out = affine(&ctx, &w.wo, &zero_b);
        concat.push(out.iter().map(|v| v.val()).collect());
        y.push(out.iter().enumerate().map(|(o, &v)| v.addc(w.bo[o])).collect::<Vec<S>>());
    }

    // Transformed form: v̂^h_j = v^h_j W^O_h materialized, then Σ_h Σ_j A v̂.
    let mut norms = vec![vec![0.0; s]; hn];
    let mut vhat = vec![vec![vec![0.0; d]; s]; hn];
    for h in 0..hn {
        for j in 0..s {
            for o in 0..d {
                let mut acc = 0.0;
                for t in 0..dk {
                    acc += v[j][h * dk + t].val() * w.wo[h * dk + t][o];
                }
                vhat[h][j][o] = acc;
            }
            norms[h][j] = vhat[h][j].iter().map(|x| x * x).sum::<f64>().sqrt();
        }
    }
    let mut transformed = vec![vec![0.0; d]; s];
    for i in 0..s {
        for h in 0..hn {
            for j in 0..s {
                let a = attention[h][i][j].val();
                for o in 0..d {
                    transformed[i][o] += a * vhat[h][j][o];
                }
            }
        }
    }

    let mut out = Vec::with_capacity(s);
    for i in 0..s {
        let mid: Vec<S> = (0..d).map(|o| z[i][o] + y[i][o]).collect();
        let n2 = layer_norm(&mid, &w.ln2_g, &w.ln2_b, m.eps);
        let hidden: Vec<S> = affine(&n2, &w.w1, &w.b1).into_iter().map(gelu).collect();
        let mlp = affine(&hidden, &w.w2, &w.b2);
        out.push((0..d).map(|o| mid[o] + mlp[o]).collect());
    }
    BlockOut {
        tokens: out,
        attention,
        norms,
        concat,
        transformed,
    }
}

fn classify<S: Sc>(m: &Oracle, z: &[Vec<S>]) -> Vec<S> {
    let cls = layer_norm(&z[0], &m.lnf_g, &m.lnf_b, m.eps);
    affine(&cls, &m.head_w, &m.head_b)
}

/// Runs layers `from..` starting from the given layer-input tokens.
pub fn forward_from<S: Sc>(m: &Oracle, from: usize, z: Vec<Vec<S>>, opts: &Opts) -> Run<S> {
    let mut run = Run {
        tokens: vec![z],
        attention: vec![],
        value_norms: vec![],
        concat_out: vec![],
        transformed_out: vec![],
        logits: vec![],
    };
    for l in from..m.layers.len() {
        let b = block(m, l, run.tokens.last().unwrap(), opts);
        run.tokens.push(b.tokens);
        run.attention.push(b.attention);
        run.value_norms.push(b.norms);
        run.concat_out.push(b.concat);
        run.transformed_out.push(b.transformed);
    }
    run.logits = classify(m, run.tokens.last().unwrap());
    run
}

pub fn forward<S: Sc>(m: &Oracle, pixels: &[S], opts: &Opts) -> Run<S> {
    forward_from(m, 0, embed(m, pixels, opts), opts)
}

pub fn logits_f64(m: &Oracle, pixels: &[f64], opts: &Opts) -> Vec<f64> {
    forward(m, pixels, opts).logits
}

/// Exact gradients of `logits[c]` by reverse mode on the tape.
pub struct OracleGrad {
    pub logits: Vec<f64>,
    /// `∂f/∂A^l[h][i][j]`, flattened `h·s·s` per layer.
    pub attention_grad: Vec<Vec<f64>>,
    /// `attention[l]` values, flattened `h·s·s`.
    pub attention: Vec<Vec<f64>>,
    pub value_norms: Vec<Vec<Vec<f64>>>,
    /// `∂f/∂x` in `C×H×W` order.
    pub input_grad: Vec<f64>,
}

pub fn oracle_grad(m: &Oracle, pixels: &[f64], c: usize, opts: &Opts) -> OracleGrad {
    tape_reset();
    let xs: Vec<Var> = pixels.iter().map(|&v| Var::c(v)).collect();
    let run = forward(m, &xs, opts);
    let adj = backward(run.logits[c]);
    let flat = |a: &Vec<Vec<Vec<Var>>>, f: &dyn Fn(Var) -> f64| -> Vec<f64> {
        a.iter().flat_map(|h| h.iter().flat_map(|r| r.iter().map(|&v| f(v)))).collect()
    };
    let out = OracleGrad {
        logits: run.logits.iter().map(|v| v.v).collect(),
        attention_grad: run.attention.iter().map(|a| flat(a, &|v| adj[v.id as usize])).collect(),
        attention: run.attention.iter().map(|a| flat(a, &|v| v.v)).collect(),
        value_norms: run.value_norms.clone(),
        input_grad: xs.iter().map(|v| adj[v.id as usize]).collect(),
    };
    tape_reset();
    out
}

// ---------------------------------------------------------------- attribution oracles

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

pub fn predicted(m: &Oracle, pixels: &[f64]) -> usize {
    argmax(&logits_f64(m, pixels, &Opts::default()))
}

fn at(flat: &[f64], s: usize, h: usize, i: usize, j: usize) -> f64 {
    flat[(h * s + i) * s + j]
}

pub fn oracle_rawatt(m: &Oracle, g: &OracleGrad) -> Vec<f64> {
    let (s, hn) = (m.s(), m.heads);
    let a = g.attention.last().unwrap();
    (1..s).map(|j| (0..hn).map(|h| at(a, s, h, 0, j)).sum::<f64>() / hn as f64).collect()
}

pub fn oracle_attgrad(m: &Oracle, g: &OracleGrad) -> Vec<f64> {
    let (s, hn) = (m.s(), m.heads);
    let a = g.attention.last().unwrap();
    let d = g.attention_grad.last().unwrap();
    (1..s)
        .map(|j| (0..hn).map(|h| at(a, s, h, 0, j) * at(d, s, h, 0, j)).sum::<f64>() / hn as f64)
        .collect()
}

pub fn oracle_attin(m: &Oracle, g: &OracleGrad) -> Vec<f64> {
    let (s, hn) = (m.s(), m.heads);
    let a = g.attention.last().unwrap();
    let nv = g.value_norms.last().unwrap();
    (1..s)
        .map(|j| (0..hn).map(|h| at(a, s, h, 0, j) * nv[h][j]).sum::<f64>() / hn as f64)
        .collect()
}

fn matmul_sq(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let s = a.len();
    let mut out = vec![vec![0.0; s]; s];
    for i in 0..s {
        for j in 0..s {
            let mut acc = 0.0;
            for k in 0..s {
                acc += a[i][k] * b[k][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

/// `Π_l (E_h[(scale(A)·∇A)^+] + I)` where `scale` optionally multiplies column
/// `j` by `‖v̂_j‖`.
fn rollout(m: &Oracle, g: &OracleGrad, use_norms: bool) -> Vec<Vec<f64>> {
    let (s, hn) = (m.s(), m.heads);
    let mut prod: Option<Vec<Vec<f64>>> = None;
    for l in 0..g.attention.len() {
        let mut bar = vec![vec![0.0; s]; s];
        for i in 0..s {
            for j in 0..s {
                let mut acc = 0.0;
                for h in 0..hn {
                    let mut a = at(&g.attention[l], s, h, i, j);
                    if use_norms {
                        a *= g.value_norms[l][h][j];
                    }
                    let v = a * at(&g.attention_grad[l], s, h, i, j);
                    acc += if v > 0.0 { v } else { 0.0 };
                }
                bar[i][j] = acc / hn as f64 + if i == j { 1.0 } else { 0.0 };
            }
        }
        prod = Some(match prod {
            None => bar,
            Some(p) => matmul_sq(&p, &bar),
        });
    }
    prod.unwrap()
}

pub fn oracle_genericatt(m: &Oracle, g: &OracleGrad) -> Vec<f64> {
    rollout(m, g, false)[0][1..].to_vec()
}

/// Integrated Gradients with the channel-mean baseline and midpoint steps.
pub fn oracle_ig(m: &Oracle, pixels: &[f64], c: usize, steps: usize) -> Vec<f64> {
    let plane = m.h_img * m.w_img;
    let mut base = vec![0.0; pixels.len()];
    for ch in 0..m.ch {
        let mean = pixels[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64;
        base[ch * plane..(ch + 1) * plane].iter_mut().for_each(|b| *b = mean);
    }
    let mut total = vec![0.0; pixels.len()];
    for k in 0..steps {
        let alpha = (k as f64 + 0.5) / steps as f64;
        let point: Vec<f64> = pixels.iter().zip(&base).map(|(&x, &b)| b + alpha * (x - b)).collect();
        let g = oracle_grad(m, &point, c, &Opts::default());
        for (t, v) in total.iter_mut().zip(&g.input_grad) {
            *t += v;
        }
    }
    pixels
        .iter()
        .zip(&base)
        .zip(&total)
        .map(|((&x, &b), &t)| (x - b) * t / steps as f64)
        .collect()
}

pub fn oracle_attig(m: &Oracle, g: &OracleGrad, pixels: &[f64], c: usize, steps: usize) -> Vec<f64> {
    let ig = oracle_ig(m, pixels, c, steps);
    let generic = oracle_genericatt(m, g);
    let (gh, gw) = m.grid();
    let mut out = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let mut acc = 0.0;
            for ch in 0..m.ch {
                for dy in 0..m.p {
                    for dx in 0..m.p {
                        acc += ig[(ch * m.h_img + gy * m.p + dy) * m.w_img + gx * m.p + dx].abs();
                    }
                }
            }
            out.push(generic[gy * gw + gx] * acc / (m.p * m.p * m.ch) as f64);
        }
    }
    out
}

/// SNNA with SmoothGrad over the given noisy inputs.
pub fn oracle_snna(m: &Oracle, g: &OracleGrad, noisy: &[Vec<f64>], c: usize) -> Vec<f64> {
    let (s, hn) = (m.s(), m.heads);
    let mut sg = vec![0.0; hn * s * s];
    for x in noisy {
        let gi = oracle_grad(m, x, c, &Opts::default());
        for (a, b) in sg.iter_mut().zip(gi.attention_grad.last().unwrap()) {
            *a += b;
        }
    }
    let p = rollout(m, g, true);
    (1..s)
        .map(|j| {
            let sg_mean = (0..hn).map(|h| at(&sg, s, h, 0, j)).sum::<f64>() / (hn * noisy.len()) as f64;
            (p[0][j] * sg_mean).max(0.0)
        })
        .collect()
}

// ---------------------------------------------------------------- fixtures & helpers

pub struct Golden {
    pub spec: FixtureSpec,
    pub cfg: ModelConfig,
    pub weights32: ModelWeights<f32>,
    pub weights64: ModelWeights<f64>,
    pub normalization: Normalization,
    pub image32: ImageTensor<f32>,
    pub image64: ImageTensor<f64>,
    pub oracle: Oracle,
}

/// The default fixture model with its first synthetic sample.
pub fn golden() -> Golden {
    let spec = FixtureSpec {
        samples: 1,
        ..Default::default()
    };
    let cfg = spec.config.clone();
    let weights32 = fixture_weights(&spec).unwrap();
    let weights64 = weights32.cast::<f64>();
    let normalization = Normalization::uniform(cfg.channels, 0.5, 0.5);
    let image32 = synthetic_samples(&spec, &normalization).unwrap().remove(0).image;
    let image64 = image32.cast::<f64>();
    let oracle = Oracle::new(&cfg, &weights64);
    Golden {
        spec,
        cfg,
        weights32,
        weights64,
        normalization,
        image32,
        image64,
        oracle,
    }
}

pub fn noisy_pixels(img: &ImageTensor<f64>, smooth: &SmoothConfig) -> Vec<Vec<f64>> {
    smooth
        .noisy_inputs(img)
        .unwrap()
        .into_iter()
        .map(|x| x.data.data().to_vec())
        .collect()
}

/// `max|a−b| / max|b|`, or the plain gap when `b` is all zero.
pub fn rel_gap(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gap = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale > 0.0 {
        gap / scale
    } else {
        gap
    }
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

/// Compares against a recorded file, or records it when `ATTRIMAP_BLESS` is set.
pub fn check_golden_bytes(name: &str, actual: &[u8]) -> bool {
    let path = golden_dir().join(name);
    if std::env::var_os("ATTRIMAP_BLESS").is_some() {
        std::fs::create_dir_all(golden_dir()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return true;
    }
    match std::fs::read(&path) {
        Ok(expected) => expected == actual,
        Err(e) => panic!("missing golden file {}: {e} (run with ATTRIMAP_BLESS=1 to record)", path.display()),
    }
}

pub fn read_golden_csv_column(name: &str, column: usize) -> Vec<f64> {
    let text = std::fs::read_to_string(golden_dir().join(name)).unwrap();
    text.lines()
        .skip(1)
        .map(|l| l.split(',').nth(column).unwrap().parse().unwrap())
        .collect()
}

/// Recorded values for `name` (one per line after a header), recording
/// `actual` first when `ATTRIMAP_BLESS` is set.
pub fn golden_values(name: &str, actual: &[f64]) -> Vec<f64> {
    let path = golden_dir().join(name);
    if std::env::var_os("ATTRIMAP_BLESS").is_some() {
        let mut text = String::from("index,value\n");
        for (i, v) in actual.iter().enumerate() {
            text.push_str(&format!("{i},{v:.17e}\n"));
        }
        std::fs::create_dir_all(golden_dir()).unwrap();
        std::fs::write(&path, text).unwrap();
    }
    read_golden_csv_column(name, 1)
}
