//! A small decoder-only transformer with a copy head, written out by hand
//! with explicit backpropagation in f64.
//!
//! Input embedding at position t is `tok[x_t] + prev[x_{t-1}] + pos[t]`.
//! After the decoder blocks and a final layer norm, the next-token
//! distribution mixes a vocabulary softmax with a pointer distribution over
//! earlier input positions:
//!
//! ```text
//! p(v) = g * softmax(h W_out + b)[v] + (1 - g) * sum_{j <= t, x_j = v} attn_t(j)
//! ```
//!
//! where `g = sigmoid(h . w_gate + b_gate)`.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::objective::{LossBreakdown, PairObjective};
use crate::vocab::{TokenId, Vocab};

use super::{ContextIndex, DecodeState, LmBackend, LmContext};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub window: usize,
    pub init_seed: u64,
}

impl ToyConfig {
    pub fn new(vocab_size: usize) -> Self {
        ToyConfig {
            vocab_size,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            n_layers: 2,
            window: 256,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.vocab_size > 512 {
            return Err(Error::Config(format!(
                "vocab size {} outside 1..=512",
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(
                "d_model must be a positive multiple of n_heads".into(),
            ));
        }
        if self.d_ff == 0 || self.n_layers == 0 || self.window == 0 {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub w_qkv: Array2<f64>,
    pub b_qkv: Array1<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w_fc1: Array2<f64>,
    pub b_fc1: Array1<f64>,
    pub w_fc2: Array2<f64>,
    pub b_fc2: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub tok_emb: Array2<f64>,
    pub prev_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
    pub w_pq: Array2<f64>,
    pub w_pk: Array2<f64>,
    pub w_gate: Array1<f64>,
    pub b_gate: Array1<f64>,
}

macro_rules! layer_fields {
    ($l:expr, $m:ident) => {
        [
            $l.ln1_g.$m(),
            $l.ln1_b.$m(),
            $l.w_qkv.$m(),
            $l.b_qkv.$m(),
            $l.w_o.$m(),
            $l.b_o.$m(),
            $l.ln2_g.$m(),
            $l.ln2_b.$m(),
            $l.w_fc1.$m(),
            $l.b_fc1.$m(),
            $l.w_fc2.$m(),
            $l.b_fc2.$m(),
        ]
    };
}

impl Params {
    fn init(cfg: &ToyConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
        let mut normal = |rows: usize, cols: usize, std: f64| -> Array2<f64> {
            Array2::from_shape_fn((rows, cols), |_| {
                let u1: f64 = rng.gen::<f64>().max(1e-300);
                let u2: f64 = rng.gen();
                std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
        };
        let resid = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let tok_emb = normal(v, d, 0.3);
        let prev_emb = normal(v, d, 0.3);
        let pos_emb = normal(cfg.window, d, 0.1);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                w_qkv: normal(d, 3 * d, 1.0 / (d as f64).sqrt()),
                b_qkv: Array1::zeros(3 * d),
                w_o: normal(d, d, resid / (d as f64).sqrt()),
                b_o: Array1::zeros(d),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w_fc1: normal(d, f, 1.0 / (d as f64).sqrt()),
                b_fc1: Array1::zeros(f),
                w_fc2: normal(f, d, resid / (f as f64).sqrt()),
                b_fc2: Array1::zeros(d),
            })
            .collect();
        Params {
            tok_emb,
            prev_emb,
            pos_emb,
            layers,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            w_out: normal(d, v, 1.0 / (d as f64).sqrt()),
            b_out: Array1::zeros(v),
            w_pq: normal(d, d, 1.0 / (d as f64).sqrt()),
            w_pk: normal(d, d, 1.0 / (d as f64).sqrt()),
            w_gate: Array1::zeros(d),
            b_gate: Array1::zeros(1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Every parameter tensor as a flat slice, in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![
            self.tok_emb.as_slice().expect("contiguous"),
            self.prev_emb.as_slice().expect("contiguous"),
            self.pos_emb.as_slice().expect("contiguous"),
        ];
        for l in &self.layers {
            out.extend(layer_fields!(l, as_slice).map(|s| s.expect("contiguous")));
        }
        out.extend(
            [
                self.lnf_g.as_slice(),
                self.lnf_b.as_slice(),
                self.w_out.as_slice(),
                self.b_out.as_slice(),
                self.w_pq.as_slice(),
                self.w_pk.as_slice(),
                self.w_gate.as_slice(),
                self.b_gate.as_slice(),
            ]
            .map(|s| s.expect("contiguous")),
        );
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.tok_emb.as_slice_mut().expect("contiguous"),
            self.prev_emb.as_slice_mut().expect("contiguous"),
            self.pos_emb.as_slice_mut().expect("contiguous"),
        ];
        for l in &mut self.layers {
            out.extend(layer_fields!(l, as_slice_mut).map(|s| s.expect("contiguous")));
        }
        out.extend(
            [
                self.lnf_g.as_slice_mut(),
                self.lnf_b.as_slice_mut(),
                self.w_out.as_slice_mut(),
                self.b_out.as_slice_mut(),
                self.w_pq.as_slice_mut(),
                self.w_pk.as_slice_mut(),
                self.w_gate.as_slice_mut(),
                self.b_gate.as_slice_mut(),
            ]
            .map(|s| s.expect("contiguous")),
        );
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }

    fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// SHA-256 over the little-endian bytes of every parameter.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for x in t {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamState {
    m: Params,
    v: Params,
    t: u64,
}

/// Trainable toy language model.
#[derive(Clone, Debug)]
pub struct ToyLm {
    config: ToyConfig,
    vocab: Vocab,
    params: Params,
    step_count: u64,
    adam_cfg: AdamConfig,
    adam: Option<AdamState>,
}

/// Serialized model: parameters, vocabulary, step count, optimizer moments.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ToyConfig,
    pub config_hash: String,
    pub vocab: Vocab,
    pub step_count: u64,
    pub params: Params,
    adam_cfg: AdamConfig,
    adam: Option<AdamState>,
}

const CHECKPOINT_FORMAT: &str = "toylm-json-v1";

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_vec(x: &Array1<f64>, g: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    let d = x.len() as f64;
    let mean = x.sum() / d;
    let c = x - mean;
    let var = c.iter().map(|v| v * v).sum::<f64>() / d;
    c / (var + LN_EPS).sqrt() * g + b
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() / d;
        let mean_dhx = dh.dot(&xh) / d;
        let r = cache.rstd[i];
        dx.row_mut(i)
            .assign(&((&dh - mean_dh - &(&xh * mean_dhx)) * r));
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct LayerCache {
    ln1: LnCache,
    y1: Array2<f64>,
    qkv: Array2<f64>,
    att: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    y2: Array2<f64>,
    h1: Array2<f64>,
    g1: Array2<f64>,
}

/// Activations of one full-sequence forward pass.
pub(crate) struct Forward {
    input: Vec<TokenId>,
    targets: Vec<TokenId>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Array2<f64>,
    pv: Array2<f64>,
    gate: Vec<f64>,
    qp: Array2<f64>,
    kp: Array2<f64>,
    ap: Vec<Vec<f64>>,
    pc: Vec<f64>,
    p: Vec<f64>,
    pub(crate) logprobs: Vec<f64>,
}

impl Forward {
    fn first_out(&self) -> usize {
        self.input.len() - self.targets.len()
    }
}

impl ToyLm {
    pub fn new(config: ToyConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Config(format!(
                "config vocab size {} differs from vocabulary size {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        let params = Params::init(&config);
        Ok(ToyLm {
            config,
            vocab,
            params,
            step_count: 0,
            adam_cfg: AdamConfig::default(),
            adam: None,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_adam(&mut self, cfg: AdamConfig) {
        self.adam_cfg = cfg;
    }

    /// Forgets optimizer moments.
    pub fn reset_optimizer(&mut self) {
        self.adam = None;
    }

    fn embed(&self, input: &[TokenId]) -> Array2<f64> {
        let d = self.config.d_model;
        let mut x = Array2::zeros((input.len(), d));
        for (t, &tok) in input.iter().enumerate() {
            let mut row = x.row_mut(t);
            row += &self.params.tok_emb.row(tok as usize);
            row += &self.params.pos_emb.row(t);
            if t > 0 {
                row += &self.params.prev_emb.row(input[t - 1] as usize);
            }
        }
        x
    }

    /// Runs the model over `input` and scores `targets` against the last
    /// `targets.len()` positions.
    pub(crate) fn forward(&self, input: &[TokenId], targets: &[TokenId]) -> Result<Forward> {
        let cfg = &self.config;
        let t_len = input.len();
        if t_len == 0 || targets.is_empty() || targets.len() > t_len {
            return Err(Error::Empty("forward input"));
        }
        if t_len > cfg.window {
            return Err(Error::ContextOverflow {
                len: t_len,
                window: cfg.window,
            });
        }
        self.vocab.check(input)?;
        self.vocab.check(targets)?;
        let d = cfg.d_model;
        let dh = d / cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = self.embed(input);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for lp in &self.params.layers {
            let (y1, ln1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
            let qkv = y1.dot(&lp.w_qkv) + &lp.b_qkv;
            let mut o = Array2::zeros((t_len, d));
            let mut att = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
                let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut a = q.dot(&k.t()) * scale;
                for i in 0..t_len {
                    let mut row = a.row_mut(i);
                    let row = row.as_slice_mut().expect("contiguous");
                    for v in row[i + 1..].iter_mut() {
                        *v = f64::NEG_INFINITY;
                    }
                    softmax_in_place(row);
                }
                o.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&a.dot(&v));
                att.push(a);
            }
            x = x + o.dot(&lp.w_o) + &lp.b_o;
            let (y2, ln2) = layer_norm(&x, &lp.ln2_g, &lp.ln2_b);
            let h1 = y2.dot(&lp.w_fc1) + &lp.b_fc1;
            let g1 = h1.mapv(gelu);
            x = x + g1.dot(&lp.w_fc2) + &lp.b_fc2;
            layers.push(LayerCache {
                ln1,
                y1,
                qkv,
                att,
                o,
                ln2,
                y2,
                h1,
                g1,
            });
        }
        let (hf, lnf) = layer_norm(&x, &self.params.lnf_g, &self.params.lnf_b);

        let n = targets.len();
        let first = t_len - n;
        let hout = hf.slice(s![first.., ..]);
        let mut pv = hout.dot(&self.params.w_out) + &self.params.b_out;
        for mut row in pv.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("contiguous"));
        }
        let qp = hout.dot(&self.params.w_pq);
        let kp = hf.dot(&self.params.w_pk);
        let pscale = 1.0 / (d as f64).sqrt();
        let mut gate = Vec::with_capacity(n);
        let mut ap = Vec::with_capacity(n);
        let mut pc = Vec::with_capacity(n);
        let mut p = Vec::with_capacity(n);
        let mut logprobs = Vec::with_capacity(n);
        for (k, &y) in targets.iter().enumerate() {
            let t = first + k;
            let g = sigmoid(hout.row(k).dot(&self.params.w_gate) + self.params.b_gate[0]);
            let q = qp.row(k);
            let mut a: Vec<f64> = (0..=t).map(|j| q.dot(&kp.row(j)) * pscale).collect();
            softmax_in_place(&mut a);
            let c: f64 = (0..=t).filter(|&j| input[j] == y).map(|j| a[j]).sum();
            let prob = g * pv[[k, y as usize]] + (1.0 - g) * c;
            gate.push(g);
            ap.push(a);
            pc.push(c);
            p.push(prob);
            logprobs.push(prob.ln());
        }
        Ok(Forward {
            input: input.to_vec(),
            targets: targets.to_vec(),
            layers,
            lnf,
            hf,
            pv,
            gate,
            qp,
            kp,
            ap,
            pc,
            p,
            logprobs,
        })
    }

    /// Accumulates into `grads` the gradient of `sum_k upstream[k] * logprob[k]`.
    pub(crate) fn backward(&self, fwd: &Forward, upstream: &[f64], grads: &mut Params) {
        let cfg = &self.config;
        let prm = &self.params;
        let t_len = fwd.input.len();
        let d = cfg.d_model;
        let dh = d / cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let pscale = 1.0 / (d as f64).sqrt();
        let first = fwd.first_out();
        let n = fwd.targets.len();
        let v_size = cfg.vocab_size;

        let mut dhf = Array2::<f64>::zeros((t_len, d));
        let mut dlogits = Array2::<f64>::zeros((n, v_size));
        let mut dqp = Array2::<f64>::zeros((n, d));
        let mut dkp = Array2::<f64>::zeros((t_len, d));
        let mut dz = vec![0.0; n];
        for k in 0..n {
            let u = upstream[k];
            if u == 0.0 {
                continue;
            }
            let t = first + k;
            let y = fwd.targets[k] as usize;
            let g = fwd.gate[k];
            let pvy = fwd.pv[[k, y]];
            let dp = u / fwd.p[k];
            // vocabulary softmax
            let coef = dp * g * pvy;
            let mut row = dlogits.row_mut(k);
            for (dl, &pvv) in row.iter_mut().zip(fwd.pv.row(k).iter()) {
                *dl = -coef * pvv;
            }
            row[y] += coef;
            // gate
            dz[k] = dp * (pvy - fwd.pc[k]) * g * (1.0 - g);
            // pointer
            let dpc = dp * (1.0 - g);
            let a = &fwd.ap[k];
            let mass: f64 = (0..=t)
                .filter(|&j| fwd.input[j] as usize == y)
                .map(|j| a[j])
                .sum();
            for (j, &aj) in a.iter().enumerate().take(t + 1) {
                let da = if fwd.input[j] as usize == y { dpc } else { 0.0 };
                let ds = aj * (da - dpc * mass) * pscale;
                if ds != 0.0 {
                    dqp.row_mut(k).scaled_add(ds, &fwd.kp.row(j));
                    dkp.row_mut(j).scaled_add(ds, &fwd.qp.row(k));
                }
            }
        }
        let hout = fwd.hf.slice(s![first.., ..]);
        grads.w_out += &hout.t().dot(&dlogits);
        grads.b_out += &dlogits.sum_axis(Axis(0));
        let dz_arr = Array1::from(dz);
        grads.w_gate += &hout.t().dot(&dz_arr);
        grads.b_gate[0] += dz_arr.sum();
        grads.w_pq += &hout.t().dot(&dqp);
        grads.w_pk += &fwd.hf.t().dot(&dkp);
        {
            let mut dh_out = dhf.slice_mut(s![first.., ..]);
            dh_out += &dlogits.dot(&prm.w_out.t());
            dh_out += &dqp.dot(&prm.w_pq.t());
            for k in 0..n {
                dh_out.row_mut(k).scaled_add(dz_arr[k], &prm.w_gate);
            }
        }
        dhf += &dkp.dot(&prm.w_pk.t());

        let mut dx = layer_norm_backward(
            &dhf,
            &fwd.lnf,
            &prm.lnf_g,
            &mut grads.lnf_g,
            &mut grads.lnf_b,
        );

        for (li, lc) in fwd.layers.iter().enumerate().rev() {
            let lp = &prm.layers[li];
            let lg = &mut grads.layers[li];
            // MLP
            lg.w_fc2 += &lc.g1.t().dot(&dx);
            lg.b_fc2 += &dx.sum_axis(Axis(0));
            let dg1 = dx.dot(&lp.w_fc2.t());
            let dh1 = &dg1 * &lc.h1.mapv(gelu_grad);
            lg.w_fc1 += &lc.y2.t().dot(&dh1);
            lg.b_fc1 += &dh1.sum_axis(Axis(0));
            let dy2 = dh1.dot(&lp.w_fc1.t());
            dx += &layer_norm_backward(&dy2, &lc.ln2, &lp.ln2_g, &mut lg.ln2_g, &mut lg.ln2_b);
            // attention
            lg.w_o += &lc.o.t().dot(&dx);
            lg.b_o += &dx.sum_axis(Axis(0));
            let d_o = dx.dot(&lp.w_o.t());
            let mut dqkv = Array2::<f64>::zeros((t_len, 3 * d));
            for h in 0..cfg.n_heads {
                let a = &lc.att[h];
                let q = lc.qkv.slice(s![.., h * dh..(h + 1) * dh]);
                let k = lc.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
                let v = lc.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let doh = d_o.slice(s![.., h * dh..(h + 1) * dh]);
                let da = doh.dot(&v.t());
                let dv = a.t().dot(&doh);
                let mut dsc = a * &da;
                for i in 0..t_len {
                    let rowsum: f64 = dsc.row(i).sum();
                    let mut row = dsc.row_mut(i);
                    row.scaled_add(-rowsum, &a.row(i));
                }
                dsc *= scale;
                dqkv.slice_mut(s![.., h * dh..(h + 1) * dh])
                    .assign(&dsc.dot(&k));
                dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh])
                    .assign(&dsc.t().dot(&q));
                dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh])
                    .assign(&dv);
            }
            lg.w_qkv += &lc.y1.t().dot(&dqkv);
            lg.b_qkv += &dqkv.sum_axis(Axis(0));
            let dy1 = dqkv.dot(&lp.w_qkv.t());
            dx += &layer_norm_backward(&dy1, &lc.ln1, &lp.ln1_g, &mut lg.ln1_g, &mut lg.ln1_b);
        }

        for (t, &tok) in fwd.input.iter().enumerate() {
            let row = dx.row(t);
            grads.tok_emb.row_mut(tok as usize).scaled_add(1.0, &row);
            grads.pos_emb.row_mut(t).scaled_add(1.0, &row);
            if t > 0 {
                grads
                    .prev_emb
                    .row_mut(fwd.input[t - 1] as usize)
                    .scaled_add(1.0, &row);
            }
        }
    }

    /// Model input and targets for scoring `seq` after `ctx`.
    fn scoring_input(ctx: &LmContext, seq: &[TokenId]) -> (Vec<TokenId>, Vec<TokenId>) {
        let mut input = ctx.layout();
        input.extend_from_slice(&seq[..seq.len() - 1]);
        (input, seq.to_vec())
    }

    /// Loss of a batch under `objective` and its gradient, without updating.
    pub fn batch_gradient<O: PairObjective>(
        &self,
        batch: &[crate::corpus::ContrastiveInstance],
        contexts: &ContextIndex,
        objective: &O,
    ) -> Result<(LossBreakdown, Params)> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let mut grads = self.params.zeros_like();
        let mut acc = LossBreakdown::zero(objective.lambda());
        let inv = 1.0 / batch.len() as f64;
        for (index, inst) in batch.iter().enumerate() {
            let item = contexts
                .get(&inst.item_id)
                .ok_or_else(|| Error::UnknownItem(inst.item_id.clone()))?;
            let ctx = item.context(inst.with_passages, &inst.prefix);
            let (ti, tt) = Self::scoring_input(&ctx, inst.target.tokens());
            let (ni, nt) = Self::scoring_input(&ctx, inst.negative.tokens());
            let ft = self.forward(&ti, &tt)?;
            let fneg = self.forward(&ni, &nt)?;
            let pair = objective
                .pair_loss(&ft.logprobs, &fneg.logprobs)
                .map_err(|e| Error::NonFiniteLoss {
                    index,
                    item_id: inst.item_id.clone(),
                    detail: e.to_string(),
                })?;
            if !pair.breakdown.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    index,
                    item_id: inst.item_id.clone(),
                    detail: format!("{:?}", pair.breakdown),
                });
            }
            acc.accumulate(&pair.breakdown, inv);
            let up_t: Vec<f64> = pair.d_target.iter().map(|g| g * inv).collect();
            self.backward(&ft, &up_t, &mut grads);
            if pair.d_negative.iter().any(|&g| g != 0.0) {
                let up_n: Vec<f64> = pair.d_negative.iter().map(|g| g * inv).collect();
                self.backward(&fneg, &up_n, &mut grads);
            }
        }
        Ok((acc, grads))
    }

    /// Mean negative log-likelihood of each `(context, target)` pair and the
    /// gradient; used for plain language-model training.
    pub fn lm_gradient(&self, sequences: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<(f64, Params)> {
        if sequences.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let mut grads = self.params.zeros_like();
        let mut total = 0.0;
        let inv = 1.0 / sequences.len() as f64;
        for (ctx, target) in sequences {
            if target.is_empty() {
                return Err(Error::Empty("target sequence"));
            }
            let mut input = ctx.clone();
            input.extend_from_slice(&target[..target.len() - 1]);
            let fwd = self.forward(&input, target)?;
            let m = target.len() as f64;
            total -= fwd.logprobs.iter().sum::<f64>() / m * inv;
            let up = vec![-inv / m; target.len()];
            self.backward(&fwd, &up, &mut grads);
        }
        Ok((total, grads))
    }

    /// One Adam step with the given gradient.
    pub fn apply_gradient(&mut self, grads: &Params, learning_rate: f64) -> Result<()> {
        let cfg = self.adam_cfg;
        let mut grads = grads.clone();
        if !grads.all_finite() {
            return Err(Error::Checkpoint("non-finite gradient".into()));
        }
        if cfg.clip_norm > 0.0 {
            let norm = grads.norm();
            if norm > cfg.clip_norm {
                let s = cfg.clip_norm / norm;
                for t in grads.tensors_mut() {
                    t.iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        let state = self.adam.get_or_insert_with(|| AdamState {
            m: self.params.zeros_like(),
            v: self.params.zeros_like(),
            t: 0,
        });
        state.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
        let params = self.params.tensors_mut();
        let ms = state.m.tensors_mut();
        let vs = state.v.tensors_mut();
        for (((p, g), m), v) in params.into_iter().zip(grads.tensors()).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= learning_rate * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
            }
        }
        self.step_count += 1;
        if !self.params.all_finite() {
            return Err(Error::Checkpoint("parameters became non-finite".into()));
        }
        Ok(())
    }

    /// Plain gradient-descent step, used by tests that need an exact
    /// first-order update.
    pub fn sgd_step(&mut self, grads: &Params, learning_rate: f64) {
        self.params.add_scaled(grads, -learning_rate);
        self.step_count += 1;
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            config_hash: self.config.hash(),
            vocab: self.vocab.clone(),
            step_count: self.step_count,
            params: self.params.clone(),
            adam_cfg: self.adam_cfg,
            adam: self.adam.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.config.hash() != ck.config_hash {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let fresh = ToyLm::new(ck.config.clone(), ck.vocab.clone())?;
        let shapes_match = fresh
            .params
            .tensors()
            .iter()
            .zip(ck.params.tensors())
            .all(|(a, b)| a.len() == b.len())
            && fresh.params.tensors().len() == ck.params.tensors().len();
        if !shapes_match {
            return Err(Error::Checkpoint(
                "parameter shapes do not match config".into(),
            ));
        }
        Ok(ToyLm {
            config: ck.config,
            vocab: ck.vocab,
            params: ck.params,
            step_count: ck.step_count,
            adam_cfg: ck.adam_cfg,
            adam: ck.adam,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec(&self.to_checkpoint())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(serde_json::from_slice(&bytes)?)
    }
}

/// Key/value cache for incremental decoding.
#[derive(Clone, Debug)]
pub struct ToyState<'a> {
    model: &'a ToyLm,
    tokens: Vec<TokenId>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pointer_keys: Vec<f64>,
    next: Vec<f64>,
}

impl<'a> ToyState<'a> {
    fn new(model: &'a ToyLm) -> Self {
        let n = model.config.n_layers;
        ToyState {
            model,
            tokens: Vec::new(),
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            pointer_keys: Vec::new(),
            next: Vec::new(),
        }
    }
}

impl DecodeState for ToyState<'_> {
    fn next_logprobs(&self) -> &[f64] {
        &self.next
    }

    fn position(&self) -> usize {
        self.tokens.len()
    }

    fn push(&mut self, token: TokenId) -> Result<()> {
        let m = self.model;
        let cfg = &m.config;
        let prm = &m.params;
        let t = self.tokens.len();
        if t >= cfg.window {
            return Err(Error::ContextOverflow {
                len: t + 1,
                window: cfg.window,
            });
        }
        m.vocab.check(&[token])?;
        let d = cfg.d_model;
        let dh = d / cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x: Array1<f64> = &prm.tok_emb.row(token as usize) + &prm.pos_emb.row(t);
        if let Some(&prev) = self.tokens.last() {
            x += &prm.prev_emb.row(prev as usize);
        }
        self.tokens.push(token);
        let n_pos = t + 1;
        for (li, lp) in prm.layers.iter().enumerate() {
            let y1 = layer_norm_vec(&x, &lp.ln1_g, &lp.ln1_b);
            let qkv = y1.dot(&lp.w_qkv) + &lp.b_qkv;
            self.keys[li].extend(qkv.slice(s![d..2 * d]).iter());
            self.values[li].extend(qkv.slice(s![2 * d..]).iter());
            let keys = &self.keys[li];
            let values = &self.values[li];
            let mut o = Array1::<f64>::zeros(d);
            for h in 0..cfg.n_heads {
                let q = qkv.slice(s![h * dh..(h + 1) * dh]);
                let mut a: Vec<f64> = (0..n_pos)
                    .map(|j| {
                        let kj = ArrayView1::from(&keys[j * d + h * dh..j * d + (h + 1) * dh]);
                        q.dot(&kj) * scale
                    })
                    .collect();
                softmax_in_place(&mut a);
                let mut oh = o.slice_mut(s![h * dh..(h + 1) * dh]);
                for (j, aj) in a.iter().enumerate() {
                    let vj = ArrayView1::from(&values[j * d + h * dh..j * d + (h + 1) * dh]);
                    oh.scaled_add(*aj, &vj);
                }
            }
            x = x + o.dot(&lp.w_o) + &lp.b_o;
            let y2 = layer_norm_vec(&x, &lp.ln2_g, &lp.ln2_b);
            let g1 = (y2.dot(&lp.w_fc1) + &lp.b_fc1).mapv(gelu);
            x = x + g1.dot(&lp.w_fc2) + &lp.b_fc2;
        }
        let hf = layer_norm_vec(&x, &prm.lnf_g, &prm.lnf_b);
        self.pointer_keys.extend(hf.dot(&prm.w_pk).iter());
        let qp = hf.dot(&prm.w_pq);
        let pscale = 1.0 / (d as f64).sqrt();
        let mut a: Vec<f64> = (0..n_pos)
            .map(|j| qp.dot(&ArrayView1::from(&self.pointer_keys[j * d..(j + 1) * d])) * pscale)
            .collect();
        softmax_in_place(&mut a);
        let mut logits = hf.dot(&prm.w_out) + &prm.b_out;
        softmax_in_place(logits.as_slice_mut().expect("contiguous"));
        let g = sigmoid(hf.dot(&prm.w_gate) + prm.b_gate[0]);
        let mut probs: Vec<f64> = logits.iter().map(|pv| g * pv).collect();
        for (j, aj) in a.iter().enumerate() {
            probs[self.tokens[j] as usize] += (1.0 - g) * aj;
        }
        self.next = probs.into_iter().map(f64::ln).collect();
        Ok(())
    }
}

impl LmBackend for ToyLm {
    type State<'a> = ToyState<'a>;

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn window(&self) -> usize {
        self.config.window
    }

    fn start<'a>(&'a self, ctx: &LmContext) -> Result<ToyState<'a>> {
        let mut state = ToyState::new(self);
        for tok in ctx.layout() {
            state.push(tok)?;
        }
        Ok(state)
    }

    fn token_logprobs(&self, ctx: &LmContext, seq: &[TokenId]) -> Result<Vec<f64>> {
        if seq.is_empty() {
            return Err(Error::Empty("scored sequence"));
        }
        let (input, targets) = Self::scoring_input(ctx, seq);
        Ok(self.forward(&input, &targets)?.logprobs)
    }
}
