//! Shared position-wise network used by the diffusion denoiser and the
//! autoregressive model.
//!
//! For position `p` of a row:
//!
//! ```text
//! a_p = b1 + pos[p] + W_t φ(t) + Σ_o C_o · emb[x_{p+o}]
//! h_p = tanh(a_p)
//! g_p = h_p + Σ_q softmax_q(⟨W_q h_p, W_k h_q⟩/√A) W_v h_q     (optional)
//! logits_p = W_out g_p + b_out
//! ```
//!
//! The offsets `o` and the attention span are either bidirectional (denoiser)
//! or causal (AR). Parameters are stored as `f32`; all arithmetic is `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Purpose};

/// Which neighbours a position may read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// Offsets `-radius..=radius`; attention over the whole row.
    Bidirectional { radius: usize },
    /// Offsets `-(width-1)..=0`; attention over earlier positions only.
    Causal { width: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_vocab: usize,
    pub output_vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub max_len: usize,
    pub mixing: Mixing,
    pub time_features: usize,
    pub attention: bool,
    pub attn_dim: usize,
}

impl NetConfig {
    fn offsets(&self) -> Vec<isize> {
        match self.mixing {
            Mixing::Bidirectional { radius } => (-(radius as isize)..=radius as isize).collect(),
            Mixing::Causal { width } => (-(width.max(1) as isize - 1)..=0).collect(),
        }
    }

    fn causal(&self) -> bool {
        matches!(self.mixing, Mixing::Causal { .. })
    }
}

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    conv: usize,
    time_w: usize,
    b1: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    w_out: usize,
    b_out: usize,
    total: usize,
}

fn tensor_specs(c: &NetConfig) -> Vec<TensorSpec> {
    let (d, h, f, a) = (c.embed_dim, c.hidden, c.time_features, c.attn_dim);
    let mut specs = vec![
        TensorSpec { name: "tok_emb".into(), shape: vec![c.input_vocab, d] },
        TensorSpec { name: "pos_emb".into(), shape: vec![c.max_len, h] },
        TensorSpec { name: "conv".into(), shape: vec![c.offsets().len(), h, d] },
    ];
    if f > 0 {
        specs.push(TensorSpec { name: "time_w".into(), shape: vec![h, f] });
    }
    specs.push(TensorSpec { name: "b1".into(), shape: vec![h] });
    if c.attention {
        specs.push(TensorSpec { name: "attn_q".into(), shape: vec![h, a] });
        specs.push(TensorSpec { name: "attn_k".into(), shape: vec![h, a] });
        specs.push(TensorSpec { name: "attn_v".into(), shape: vec![h, h] });
    }
    specs.push(TensorSpec { name: "w_out".into(), shape: vec![c.output_vocab, h] });
    specs.push(TensorSpec { name: "b_out".into(), shape: vec![c.output_vocab] });
    specs
}

fn layout(c: &NetConfig) -> Layout {
    let mut offsets = std::collections::HashMap::new();
    let mut at = 0;
    for spec in tensor_specs(c) {
        offsets.insert(spec.name.clone(), at);
        at += spec.numel();
    }
    let get = |name: &str| offsets.get(name).copied().unwrap_or(usize::MAX);
    Layout {
        tok_emb: get("tok_emb"),
        pos_emb: get("pos_emb"),
        conv: get("conv"),
        time_w: get("time_w"),
        b1: get("b1"),
        wq: get("attn_q"),
        wk: get("attn_k"),
        wv: get("attn_v"),
        w_out: get("w_out"),
        b_out: get("b_out"),
        total: at,
    }
}

/// Sinusoidal features of `t ∈ [0, 1]`: `sin(2^k π t), cos(2^k π t)`.
pub fn time_features(t: f64, count: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(count);
    let mut k = 0;
    while out.len() < count {
        let w = std::f64::consts::PI * f64::from(1u32 << k.min(30));
        out.push((w * t).sin());
        if out.len() < count {
            out.push((w * t).cos());
        }
        k += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetConfig,
    params: Vec<f32>,
}

/// Everything the backward pass needs from one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct Forward {
    rows: usize,
    cols: usize,
    ids: Vec<u32>,
    phi: Vec<f64>,
    /// per row: hidden activations h (cols × H)
    hidden: Vec<Vec<f64>>,
    /// per row: attention state, when enabled
    attn: Vec<Option<AttnCache>>,
    /// per row: mixed activations g (cols × H)
    mixed: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

#[derive(Debug, Clone)]
struct AttnCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    weights: Vec<f64>,
}

impl Forward {
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("input id {id} outside embedding table of {vocab} rows")]
    BadToken { id: u32, vocab: usize },
    #[error("{0}")]
    Shape(String),
}

fn uniform_fill(rng: &mut impl Rng, out: &mut [f32], bound: f64) {
    for v in out {
        *v = ((rng.random::<f64>() * 2.0 - 1.0) * bound) as f32;
    }
}

impl Network {
    /// Embeddings uniform in ±0.05, output projection zero.
    pub fn new(config: NetConfig, seed: u64) -> Self {
        let lay = layout(&config);
        let mut params = vec![0.0f32; lay.total];
        let mut rng = rng::stream(seed, Purpose::Init, 0);
        let (d, h, f, a) = (config.embed_dim, config.hidden, config.time_features, config.attn_dim);
        let n_off = config.offsets().len();
        uniform_fill(&mut rng, &mut params[lay.tok_emb..lay.tok_emb + config.input_vocab * d], 0.05);
        uniform_fill(&mut rng, &mut params[lay.pos_emb..lay.pos_emb + config.max_len * h], 0.05);
        let conv_bound = (6.0 / (n_off * d + h) as f64).sqrt();
        uniform_fill(&mut rng, &mut params[lay.conv..lay.conv + n_off * h * d], conv_bound);
        if f > 0 {
            uniform_fill(&mut rng, &mut params[lay.time_w..lay.time_w + h * f], (6.0 / (f + h) as f64).sqrt());
        }
        if config.attention {
            let qk = (6.0 / (h + a) as f64).sqrt();
            uniform_fill(&mut rng, &mut params[lay.wq..lay.wq + h * a], qk);
            uniform_fill(&mut rng, &mut params[lay.wk..lay.wk + h * a], qk);
            uniform_fill(&mut rng, &mut params[lay.wv..lay.wv + h * h], 0.5 * (3.0 / h as f64).sqrt());
        }
        Self { config, params }
    }

    pub fn from_parts(config: NetConfig, params: Vec<f32>) -> Result<Self, NetError> {
        let expected = layout(&config).total;
        if params.len() != expected {
            return Err(NetError::Shape(format!("expected {expected} parameters, got {}", params.len())));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        tensor_specs(&self.config)
    }

    /// Name of the tensor holding flat parameter `index`.
    pub fn tensor_of(&self, index: usize) -> Option<(String, usize)> {
        let mut at = 0;
        for spec in self.tensor_specs() {
            if index < at + spec.numel() {
                return Some((spec.name, index - at));
            }
            at += spec.numel();
        }
        None
    }

    /// Flat index range of a named tensor.
    pub fn tensor_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut at = 0;
        for spec in self.tensor_specs() {
            if spec.name == name {
                return Some(at..at + spec.numel());
            }
            at += spec.numel();
        }
        None
    }

    /// Overwrite every parameter with a uniform draw in `±scale`.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = rng::stream(seed, Purpose::Init, 1);
        uniform_fill(&mut rng, &mut self.params, scale);
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Gradient step `θ ← θ − lr · g`.
    pub fn apply_gradient(&mut self, grad: &[f64], lr: f64) {
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p = (f64::from(*p) - lr * g) as f32;
        }
    }

    pub fn forward(&self, ids: &[u32], rows: usize, cols: usize, time: Option<f64>) -> Result<Forward, NetError> {
        let c = &self.config;
        if ids.len() != rows * cols {
            return Err(NetError::Shape(format!("{} ids for a {rows}x{cols} grid", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&x| x as usize >= c.input_vocab) {
            return Err(NetError::BadToken { id: bad, vocab: c.input_vocab });
        }
        let w: Vec<f64> = self.params.iter().map(|&p| f64::from(p)).collect();
        let lay = layout(c);
        let (d, h, v) = (c.embed_dim, c.hidden, c.output_vocab);
        let offsets = c.offsets();
        let phi = if c.time_features > 0 { time_features(time.unwrap_or(0.0), c.time_features) } else { Vec::new() };

        // hidden bias shared by every position: b1 + W_t φ(t)
        let mut base = w[lay.b1..lay.b1 + h].to_vec();
        if c.time_features > 0 {
            for (hh, b) in base.iter_mut().enumerate() {
                let row = &w[lay.time_w + hh * c.time_features..lay.time_w + (hh + 1) * c.time_features];
                *b += row.iter().zip(&phi).map(|(a, b)| a * b).sum::<f64>();
            }
        }

        let mut hidden_rows = Vec::with_capacity(rows);
        let mut attn_rows = Vec::with_capacity(rows);
        let mut mixed_rows = Vec::with_capacity(rows);
        let mut logits = vec![0.0; rows * cols * v];
        for r in 0..rows {
            let row_ids = &ids[r * cols..(r + 1) * cols];
            let mut hid = vec![0.0; cols * h];
            for p in 0..cols {
                let a = &mut hid[p * h..(p + 1) * h];
                a.copy_from_slice(&base);
                let pos = lay.pos_emb + p.min(c.max_len - 1) * h;
                for (x, y) in a.iter_mut().zip(&w[pos..pos + h]) {
                    *x += y;
                }
                for (oi, &o) in offsets.iter().enumerate() {
                    let q = p as isize + o;
                    if q < 0 || q >= cols as isize {
                        continue;
                    }
                    let e = &w[lay.tok_emb + row_ids[q as usize] as usize * d..][..d];
                    let conv = &w[lay.conv + oi * h * d..][..h * d];
                    for (hh, x) in a.iter_mut().enumerate() {
                        *x += conv[hh * d..(hh + 1) * d].iter().zip(e).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                a.iter_mut().for_each(|x| *x = x.tanh());
            }
            let (mixed, cache) = if c.attention { self.attend(&w, &lay, &hid, cols) } else { (hid.clone(), None) };
            for p in 0..cols {
                let g = &mixed[p * h..(p + 1) * h];
                let out = &mut logits[(r * cols + p) * v..(r * cols + p + 1) * v];
                for (k, o) in out.iter_mut().enumerate() {
                    let wrow = &w[lay.w_out + k * h..lay.w_out + (k + 1) * h];
                    *o = w[lay.b_out + k] + wrow.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            hidden_rows.push(hid);
            attn_rows.push(cache);
            mixed_rows.push(mixed);
        }
        Ok(Forward {
            rows,
            cols,
            ids: ids.to_vec(),
            phi,
            hidden: hidden_rows,
            attn: attn_rows,
            mixed: mixed_rows,
            logits,
        })
    }

    fn visible(&self, p: usize, q: usize) -> bool {
        !self.config.causal() || q <= p
    }

    fn attend(&self, w: &[f64], lay: &Layout, hid: &[f64], cols: usize) -> (Vec<f64>, Option<AttnCache>) {
        let (h, a) = (self.config.hidden, self.config.attn_dim);
        let project = |off: usize, out_dim: usize| {
            let mut out = vec![0.0; cols * out_dim];
            for p in 0..cols {
                let x = &hid[p * h..(p + 1) * h];
                for (i, xi) in x.iter().enumerate() {
                    let wr = &w[off + i * out_dim..off + (i + 1) * out_dim];
                    for (o, wv) in out[p * out_dim..(p + 1) * out_dim].iter_mut().zip(wr) {
                        *o += xi * wv;
                    }
                }
            }
            out
        };
        let q = project(lay.wq, a);
        let k = project(lay.wk, a);
        let v = project(lay.wv, h);
        let scale = 1.0 / (a as f64).sqrt();
        let mut weights = vec![0.0; cols * cols];
        let mut mixed = hid.to_vec();
        for p in 0..cols {
            let qp = &q[p * a..(p + 1) * a];
            let row = &mut weights[p * cols..(p + 1) * cols];
            let mut max = f64::NEG_INFINITY;
            for (qq, s) in row.iter_mut().enumerate() {
                if self.visible(p, qq) {
                    *s = scale * qp.iter().zip(&k[qq * a..(qq + 1) * a]).map(|(x, y)| x * y).sum::<f64>();
                    max = max.max(*s);
                }
            }
            let mut total = 0.0;
            for (qq, s) in row.iter_mut().enumerate() {
                *s = if self.visible(p, qq) { (*s - max).exp() } else { 0.0 };
                total += *s;
            }
            row.iter_mut().for_each(|s| *s /= total);
            let out = &mut mixed[p * h..(p + 1) * h];
            for (qq, &alpha) in row.iter().enumerate() {
                if alpha == 0.0 {
                    continue;
                }
                for (o, vv) in out.iter_mut().zip(&v[qq * h..(qq + 1) * h]) {
                    *o += alpha * vv;
                }
            }
        }
        (mixed, Some(AttnCache { q, k, v, weights }))
    }

    /// Gradient of `Σ dlogits · logits` with respect to every parameter.
    pub fn backward(&self, fwd: &Forward, dlogits: &[f64]) -> Vec<f64> {
        let c = &self.config;
        let lay = layout(c);
        let w: Vec<f64> = self.params.iter().map(|&p| f64::from(p)).collect();
        let (d, h, v, f) = (c.embed_dim, c.hidden, c.output_vocab, c.time_features);
        let offsets = c.offsets();
        let cols = fwd.cols;
        let mut grad = vec![0.0; lay.total];
        for r in 0..fwd.rows {
            let row_ids = &fwd.ids[r * cols..(r + 1) * cols];
            let mixed = &fwd.mixed[r];
            let hid = &fwd.hidden[r];
            // output layer
            let mut dg = vec![0.0; cols * h];
            for p in 0..cols {
                let dl = &dlogits[(r * cols + p) * v..(r * cols + p + 1) * v];
                let g = &mixed[p * h..(p + 1) * h];
                let dgp = &mut dg[p * h..(p + 1) * h];
                for (k, &dk) in dl.iter().enumerate() {
                    if dk == 0.0 {
                        continue;
                    }
                    grad[lay.b_out + k] += dk;
                    let gw = &mut grad[lay.w_out + k * h..lay.w_out + (k + 1) * h];
                    for (gw, gg) in gw.iter_mut().zip(g) {
                        *gw += dk * gg;
                    }
                    for (x, wv) in dgp.iter_mut().zip(&w[lay.w_out + k * h..lay.w_out + (k + 1) * h]) {
                        *x += dk * wv;
                    }
                }
            }
            // attention (residual: dh starts as dg)
            let mut dh = dg.clone();
            if let Some(cache) = &fwd.attn[r] {
                self.attend_backward(&w, &lay, hid, cache, &dg, &mut dh, &mut grad, cols);
            }
            // tanh and input layer
            for p in 0..cols {
                let hp = &hid[p * h..(p + 1) * h];
                let da: Vec<f64> = dh[p * h..(p + 1) * h].iter().zip(hp).map(|(g, y)| g * (1.0 - y * y)).collect();
                for (gb, x) in grad[lay.b1..lay.b1 + h].iter_mut().zip(&da) {
                    *gb += x;
                }
                let pos = lay.pos_emb + p.min(c.max_len - 1) * h;
                for (gp, x) in grad[pos..pos + h].iter_mut().zip(&da) {
                    *gp += x;
                }
                if f > 0 {
                    for (hh, x) in da.iter().enumerate() {
                        for (ff, phi) in fwd.phi.iter().enumerate() {
                            grad[lay.time_w + hh * f + ff] += x * phi;
                        }
                    }
                }
                for (oi, &o) in offsets.iter().enumerate() {
                    let q = p as isize + o;
                    if q < 0 || q >= cols as isize {
                        continue;
                    }
                    let tok = row_ids[q as usize] as usize;
                    let e_off = lay.tok_emb + tok * d;
                    let conv_off = lay.conv + oi * h * d;
                    for (hh, &x) in da.iter().enumerate() {
                        if x == 0.0 {
                            continue;
                        }
                        for e in 0..d {
                            grad[conv_off + hh * d + e] += x * w[e_off + e];
                            grad[e_off + e] += x * w[conv_off + hh * d + e];
                        }
                    }
                }
            }
        }
        grad
    }

    #[allow(clippy::too_many_arguments)]
    fn attend_backward(
        &self,
        w: &[f64],
        lay: &Layout,
        hid: &[f64],
        cache: &AttnCache,
        dmixed: &[f64],
        dh: &mut [f64],
        grad: &mut [f64],
        cols: usize,
    ) {
        let (h, a) = (self.config.hidden, self.config.attn_dim);
        let scale = 1.0 / (a as f64).sqrt();
        let mut dq = vec![0.0; cols * a];
        let mut dk = vec![0.0; cols * a];
        let mut dv = vec![0.0; cols * h];
        for p in 0..cols {
            let alpha = &cache.weights[p * cols..(p + 1) * cols];
            let dout = &dmixed[p * h..(p + 1) * h];
            let dalpha: Vec<f64> = (0..cols)
                .map(|qq| dout.iter().zip(&cache.v[qq * h..(qq + 1) * h]).map(|(x, y)| x * y).sum())
                .collect();
            let inner: f64 = alpha.iter().zip(&dalpha).map(|(x, y)| x * y).sum();
            for qq in 0..cols {
                if alpha[qq] == 0.0 {
                    continue;
                }
                for (x, y) in dv[qq * h..(qq + 1) * h].iter_mut().zip(dout) {
                    *x += alpha[qq] * y;
                }
                let ds = alpha[qq] * (dalpha[qq] - inner) * scale;
                for i in 0..a {
                    dq[p * a + i] += ds * cache.k[qq * a + i];
                    dk[qq * a + i] += ds * cache.q[p * a + i];
                }
            }
        }
        let mut project_back = |off: usize, out_dim: usize, dproj: &[f64]| {
            for p in 0..cols {
                let x = &hid[p * h..(p + 1) * h];
                let dy = &dproj[p * out_dim..(p + 1) * out_dim];
                for i in 0..h {
                    let wrow = off + i * out_dim;
                    let mut acc = 0.0;
                    for (o, &g) in dy.iter().enumerate() {
                        grad[wrow + o] += x[i] * g;
                        acc += w[wrow + o] * g;
                    }
                    dh[p * h + i] += acc;
                }
            }
        };
        project_back(lay.wq, a, &dq);
        project_back(lay.wk, a, &dk);
        project_back(lay.wv, h, &dv);
    }
}

/// Row-wise softmax of `logits` (stride `width`).
pub fn softmax_rows(logits: &[f64], width: usize) -> Vec<f64> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        row.iter_mut().for_each(|x| *x /= total);
    }
    out
}
