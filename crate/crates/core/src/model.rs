//! Transformer decoder with two layer-norm placements and the causal LM loss.
//!
//! The `Gpt2` variant applies layer norm before each sub-layer plus a final
//! norm; the `Grover` variant normalizes the embeddings once and then applies
//! layer norm after each sub-layer's residual add. Both variants use the same
//! tensor set (so parameter counts match for equal hyperparameters); the
//! Grover path reuses the `ln_f` tensors for the embedding norm.
//!
//! The output projection is tied to the token embedding. Forward and backward
//! are hand-written over flat row-major buffers; `loss_and_grad` is the
//! training entry point and is validated against central finite differences.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_at_acc, matmul_bt, Tensor};
use crate::Result;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Gpt2,
    Grover,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub context: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// 768/12/12, GPT2 layer-norm order (trained with LAMB at full scale).
    pub fn base() -> Self {
        ModelConfig {
            variant: Variant::Gpt2,
            context: 1024,
            d_model: 768,
            n_heads: 12,
            n_layers: 12,
            vocab: 64000,
            seed: 0,
        }
    }

    /// 1024/16/24, GPT2 layer-norm order.
    pub fn medium() -> Self {
        ModelConfig {
            d_model: 1024,
            n_heads: 16,
            n_layers: 24,
            ..Self::base()
        }
    }

    /// 1280/20/36, GROVER layer-norm order (trained with Adafactor).
    pub fn large() -> Self {
        ModelConfig {
            variant: Variant::Grover,
            d_model: 1280,
            n_heads: 20,
            n_layers: 36,
            ..Self::base()
        }
    }

    /// 1536/24/48, GROVER layer-norm order.
    pub fn mega() -> Self {
        ModelConfig {
            variant: Variant::Grover,
            d_model: 1536,
            n_heads: 24,
            n_layers: 48,
            ..Self::base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context < 1 {
            return Err(Error::InvalidConfig("context must be >= 1".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(
                "d_model must be a positive multiple of n_heads".into(),
            ));
        }
        if self.vocab == 0 || self.n_layers == 0 {
            return Err(Error::InvalidConfig("vocab and n_layers must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Canonical tensor order. Everything that iterates parameters (init,
    /// optimizers, checkpoints) follows this list.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut shapes = vec![
            ("wte".to_string(), vec![self.vocab, d]),
            ("wpe".to_string(), vec![self.context, d]),
        ];
        for l in 0..self.n_layers {
            let p = |name: &str| format!("h{l}.{name}");
            shapes.push((p("ln1.g"), vec![d]));
            shapes.push((p("ln1.b"), vec![d]));
            shapes.push((p("attn.w_qkv"), vec![d, 3 * d]));
            shapes.push((p("attn.b_qkv"), vec![3 * d]));
            shapes.push((p("attn.w_out"), vec![d, d]));
            shapes.push((p("attn.b_out"), vec![d]));
            shapes.push((p("ln2.g"), vec![d]));
            shapes.push((p("ln2.b"), vec![d]));
            shapes.push((p("mlp.w_fc"), vec![d, 4 * d]));
            shapes.push((p("mlp.b_fc"), vec![4 * d]));
            shapes.push((p("mlp.w_out"), vec![4 * d, d]));
            shapes.push((p("mlp.b_out"), vec![d]));
        }
        shapes.push(("ln_f.g".to_string(), vec![d]));
        shapes.push(("ln_f.b".to_string(), vec![d]));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<S> {
    pub ln1_g: Tensor<S>,
    pub ln1_b: Tensor<S>,
    pub w_qkv: Tensor<S>,
    pub b_qkv: Tensor<S>,
    pub w_attn_out: Tensor<S>,
    pub b_attn_out: Tensor<S>,
    pub ln2_g: Tensor<S>,
    pub ln2_b: Tensor<S>,
    pub w_fc: Tensor<S>,
    pub b_fc: Tensor<S>,
    pub w_mlp_out: Tensor<S>,
    pub b_mlp_out: Tensor<S>,
}

/// Named weight tensors for one model instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<S> {
    pub wte: Tensor<S>,
    pub wpe: Tensor<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub ln_f_g: Tensor<S>,
    pub ln_f_b: Tensor<S>,
}

impl<S: Scalar> Parameters<S> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                ln1_g: Tensor::zeros(&[d]),
                ln1_b: Tensor::zeros(&[d]),
                w_qkv: Tensor::zeros(&[d, 3 * d]),
                b_qkv: Tensor::zeros(&[3 * d]),
                w_attn_out: Tensor::zeros(&[d, d]),
                b_attn_out: Tensor::zeros(&[d]),
                ln2_g: Tensor::zeros(&[d]),
                ln2_b: Tensor::zeros(&[d]),
                w_fc: Tensor::zeros(&[d, 4 * d]),
                b_fc: Tensor::zeros(&[4 * d]),
                w_mlp_out: Tensor::zeros(&[4 * d, d]),
                b_mlp_out: Tensor::zeros(&[d]),
            })
            .collect();
        Parameters {
            wte: Tensor::zeros(&[config.vocab, d]),
            wpe: Tensor::zeros(&[config.context, d]),
            blocks,
            ln_f_g: Tensor::zeros(&[d]),
            ln_f_b: Tensor::zeros(&[d]),
        }
    }

    /// Tensors in the canonical order of [`ModelConfig::tensor_shapes`].
    pub fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = vec![
            ("wte".into(), &self.wte),
            ("wpe".into(), &self.wpe),
        ];
        for (l, blk) in self.blocks.iter().enumerate() {
            let p = |name: &str| format!("h{l}.{name}");
            out.push((p("ln1.g"), &blk.ln1_g));
            out.push((p("ln1.b"), &blk.ln1_b));
            out.push((p("attn.w_qkv"), &blk.w_qkv));
            out.push((p("attn.b_qkv"), &blk.b_qkv));
            out.push((p("attn.w_out"), &blk.w_attn_out));
            out.push((p("attn.b_out"), &blk.b_attn_out));
            out.push((p("ln2.g"), &blk.ln2_g));
            out.push((p("ln2.b"), &blk.ln2_b));
            out.push((p("mlp.w_fc"), &blk.w_fc));
            out.push((p("mlp.b_fc"), &blk.b_fc));
            out.push((p("mlp.w_out"), &blk.w_mlp_out));
            out.push((p("mlp.b_out"), &blk.b_mlp_out));
        }
        out.push(("ln_f.g".into(), &self.ln_f_g));
        out.push(("ln_f.b".into(), &self.ln_f_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = vec![
            ("wte".into(), &mut self.wte),
            ("wpe".into(), &mut self.wpe),
        ];
        for (l, blk) in self.blocks.iter_mut().enumerate() {
            let p = |name: &str| format!("h{l}.{name}");
            out.push((p("ln1.g"), &mut blk.ln1_g));
            out.push((p("ln1.b"), &mut blk.ln1_b));
            out.push((p("attn.w_qkv"), &mut blk.w_qkv));
            out.push((p("attn.b_qkv"), &mut blk.b_qkv));
            out.push((p("attn.w_out"), &mut blk.w_attn_out));
            out.push((p("attn.b_out"), &mut blk.b_attn_out));
            out.push((p("ln2.g"), &mut blk.ln2_g));
            out.push((p("ln2.b"), &mut blk.ln2_b));
            out.push((p("mlp.w_fc"), &mut blk.w_fc));
            out.push((p("mlp.b_fc"), &mut blk.b_fc));
            out.push((p("mlp.w_out"), &mut blk.w_mlp_out));
            out.push((p("mlp.b_out"), &mut blk.b_mlp_out));
        }
        out.push(("ln_f.g".into(), &mut self.ln_f_g));
        out.push(("ln_f.b".into(), &mut self.ln_f_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Parameters<T> {
        Parameters {
            wte: self.wte.cast(),
            wpe: self.wpe.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1_g: b.ln1_g.cast(),
                    ln1_b: b.ln1_b.cast(),
                    w_qkv: b.w_qkv.cast(),
                    b_qkv: b.b_qkv.cast(),
                    w_attn_out: b.w_attn_out.cast(),
                    b_attn_out: b.b_attn_out.cast(),
                    ln2_g: b.ln2_g.cast(),
                    ln2_b: b.ln2_b.cast(),
                    w_fc: b.w_fc.cast(),
                    b_fc: b.b_fc.cast(),
                    w_mlp_out: b.w_mlp_out.cast(),
                    b_mlp_out: b.b_mlp_out.cast(),
                })
                .collect(),
            ln_f_g: self.ln_f_g.cast(),
            ln_f_b: self.ln_f_b.cast(),
        }
    }
}

/// Weights ~ Normal(0, 0.02), layer-norm gains 1, biases 0. Deterministic in
/// `config.seed`.
pub fn init_params<S: Scalar>(config: &ModelConfig) -> Result<Parameters<S>> {
    config.validate()?;
    let mut params = Parameters::zeros(config);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0f64, 0.02).expect("valid stddev");
    for (name, tensor) in params.tensors_mut() {
        let leaf = name.rsplit('.').next().unwrap_or(&name);
        if leaf == "g" {
            tensor.fill(S::one());
        } else if leaf.starts_with('b') && name != "wte" && name != "wpe" {
            // biases stay zero
        } else {
            for v in tensor.as_mut_slice() {
                *v = S::cast_from(normal.sample(&mut rng));
            }
        }
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// Forward / backward kernels
// ---------------------------------------------------------------------------

struct LnCache<S> {
    x: Vec<S>,
    mean: Vec<S>,
    rstd: Vec<S>,
}

struct AttnCache<S> {
    x: Vec<S>,
    qkv: Vec<S>,
    probs: Vec<S>, // n_heads * t * t
    concat: Vec<S>,
}

struct MlpCache<S> {
    x: Vec<S>,
    pre: Vec<S>,
    act: Vec<S>,
}

struct BlockCache<S> {
    ln1: LnCache<S>,
    attn: AttnCache<S>,
    ln2: LnCache<S>,
    mlp: MlpCache<S>,
}

pub(crate) struct ForwardCache<S> {
    t: usize,
    emb_ln: Option<LnCache<S>>,
    blocks: Vec<BlockCache<S>>,
    final_ln: Option<LnCache<S>>,
    /// Final hidden state feeding the tied output projection.
    x_final: Vec<S>,
}

impl<S: Scalar> ForwardCache<S> {
    /// Attention probabilities for head `h` of layer `l` (t x t, causal rows).
    #[cfg(test)]
    pub(crate) fn attn_probs(&self, l: usize, h: usize) -> &[S] {
        let t = self.t;
        &self.blocks[l].attn.probs[h * t * t..(h + 1) * t * t]
    }
}

fn layernorm_fwd<S: Scalar>(x: &[S], g: &[S], b: &[S], t: usize, d: usize) -> (Vec<S>, LnCache<S>) {
    let mut out = vec![S::zero(); t * d];
    let mut mean = vec![S::zero(); t];
    let mut rstd = vec![S::zero(); t];
    let inv_d = S::cast_from(1.0 / d as f64);
    let eps = S::cast_from(LN_EPS);
    for row in 0..t {
        let xr = &x[row * d..(row + 1) * d];
        let mut mu = S::zero();
        for &v in xr {
            mu += v;
        }
        mu *= inv_d;
        let mut var = S::zero();
        for &v in xr {
            let c = v - mu;
            var += c * c;
        }
        var *= inv_d;
        let rs = (var + eps).sqrt().recip();
        mean[row] = mu;
        rstd[row] = rs;
        let or = &mut out[row * d..(row + 1) * d];
        for i in 0..d {
            or[i] = g[i] * ((xr[i] - mu) * rs) + b[i];
        }
    }
    (
        out,
        LnCache {
            x: x.to_vec(),
            mean,
            rstd,
        },
    )
}

/// dx is overwritten; dg/db accumulate.
fn layernorm_bwd<S: Scalar>(
    dout: &[S],
    cache: &LnCache<S>,
    g: &[S],
    t: usize,
    d: usize,
    dx: &mut Vec<S>,
    dg: &mut [S],
    db: &mut [S],
) {
    dx.clear();
    dx.resize(t * d, S::zero());
    let inv_d = S::cast_from(1.0 / d as f64);
    for row in 0..t {
        let xr = &cache.x[row * d..(row + 1) * d];
        let dor = &dout[row * d..(row + 1) * d];
        let mu = cache.mean[row];
        let rs = cache.rstd[row];
        let mut mean_dxhat = S::zero();
        let mut mean_dxhat_xhat = S::zero();
        for i in 0..d {
            let xhat = (xr[i] - mu) * rs;
            let dxhat = dor[i] * g[i];
            dg[i] += dor[i] * xhat;
            db[i] += dor[i];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let dxr = &mut dx[row * d..(row + 1) * d];
        for i in 0..d {
            let xhat = (xr[i] - mu) * rs;
            let dxhat = dor[i] * g[i];
            dxr[i] = rs * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
}

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::cast_from(0.7978845608028654); // sqrt(2/pi)
    let k = S::cast_from(0.044715);
    let half = S::cast_from(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (S::one() + inner.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::cast_from(0.7978845608028654);
    let k = S::cast_from(0.044715);
    let half = S::cast_from(0.5);
    let three = S::cast_from(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * k * x * x)
}

fn attention_fwd<S: Scalar>(
    x: &[S],
    blk: &BlockParams<S>,
    config: &ModelConfig,
    t: usize,
) -> (Vec<S>, AttnCache<S>) {
    let d = config.d_model;
    let nh = config.n_heads;
    let hd = config.head_dim();
    let scale = S::cast_from(1.0 / (hd as f64).sqrt());

    let mut qkv = vec![S::zero(); t * 3 * d];
    matmul(x, blk.w_qkv.as_slice(), t, d, 3 * d, &mut qkv);
    for row in 0..t {
        let r = &mut qkv[row * 3 * d..(row + 1) * 3 * d];
        for (v, b) in r.iter_mut().zip(blk.b_qkv.as_slice()) {
            *v += *b;
        }
    }

    let mut probs = vec![S::zero(); nh * t * t];
    let mut concat = vec![S::zero(); t * d];
    for h in 0..nh {
        let q_off = h * hd;
        let k_off = d + h * hd;
        let v_off = 2 * d + h * hd;
        let ph = &mut probs[h * t * t..(h + 1) * t * t];
        for ti in 0..t {
            let q = &qkv[ti * 3 * d + q_off..ti * 3 * d + q_off + hd];
            // causal scores for u <= ti
            let mut maxv = S::neg_infinity();
            let row = &mut ph[ti * t..(ti + 1) * t];
            for u in 0..=ti {
                let kk = &qkv[u * 3 * d + k_off..u * 3 * d + k_off + hd];
                let mut s = S::zero();
                for i in 0..hd {
                    s += q[i] * kk[i];
                }
                s *= scale;
                row[u] = s;
                if s > maxv {
                    maxv = s;
                }
            }
            let mut denom = S::zero();
            for u in 0..=ti {
                let e = (row[u] - maxv).exp();
                row[u] = e;
                denom += e;
            }
            let inv = denom.recip();
            for u in 0..=ti {
                row[u] *= inv;
            }
            // weighted sum of values
            let out = &mut concat[ti * d + h * hd..ti * d + h * hd + hd];
            for u in 0..=ti {
                let p = row[u];
                if p == S::zero() {
                    continue;
                }
                let vv = &qkv[u * 3 * d + v_off..u * 3 * d + v_off + hd];
                for i in 0..hd {
                    out[i] += p * vv[i];
                }
            }
        }
    }

    let mut out = vec![S::zero(); t * d];
    matmul(&concat, blk.w_attn_out.as_slice(), t, d, d, &mut out);
    for row in 0..t {
        let r = &mut out[row * d..(row + 1) * d];
        for (v, b) in r.iter_mut().zip(blk.b_attn_out.as_slice()) {
            *v += *b;
        }
    }

    (
        out,
        AttnCache {
            x: x.to_vec(),
            qkv,
            probs,
            concat,
        },
    )
}

fn attention_bwd<S: Scalar>(
    dout: &[S],
    cache: &AttnCache<S>,
    blk: &BlockParams<S>,
    grads: &mut BlockParams<S>,
    config: &ModelConfig,
    t: usize,
    dx: &mut Vec<S>,
) {
    let d = config.d_model;
    let nh = config.n_heads;
    let hd = config.head_dim();
    let scale = S::cast_from(1.0 / (hd as f64).sqrt());

    // Output projection.
    let mut dconcat = vec![S::zero(); t * d];
    matmul_bt(dout, blk.w_attn_out.as_slice(), t, d, d, &mut dconcat);
    matmul_at_acc(&cache.concat, dout, t, d, d, grads.w_attn_out.as_mut_slice());
    for row in 0..t {
        for (g, v) in grads
            .b_attn_out
            .as_mut_slice()
            .iter_mut()
            .zip(&dout[row * d..(row + 1) * d])
        {
            *g += *v;
        }
    }

    let mut dqkv = vec![S::zero(); t * 3 * d];
    let mut dp = vec![S::zero(); t];
    for h in 0..nh {
        let q_off = h * hd;
        let k_off = d + h * hd;
        let v_off = 2 * d + h * hd;
        let ph = &cache.probs[h * t * t..(h + 1) * t * t];
        for ti in 0..t {
            let prow = &ph[ti * t..(ti + 1) * t];
            let dconc = &dconcat[ti * d + h * hd..ti * d + h * hd + hd];
            // dV and dP
            let mut dp_dot_p = S::zero();
            for u in 0..=ti {
                let vv = &cache.qkv[u * 3 * d + v_off..u * 3 * d + v_off + hd];
                let mut acc = S::zero();
                for i in 0..hd {
                    acc += dconc[i] * vv[i];
                }
                dp[u] = acc;
                dp_dot_p += acc * prow[u];
                let dvv = &mut dqkv[u * 3 * d + v_off..u * 3 * d + v_off + hd];
                let p = prow[u];
                for i in 0..hd {
                    dvv[i] += p * dconc[i];
                }
            }
            // softmax backward + scaled dot-product backward
            let q = &cache.qkv[ti * 3 * d + q_off..ti * 3 * d + q_off + hd];
            for u in 0..=ti {
                let ds = prow[u] * (dp[u] - dp_dot_p) * scale;
                if ds == S::zero() {
                    continue;
                }
                let kk = &cache.qkv[u * 3 * d + k_off..u * 3 * d + k_off + hd];
                let dq = ti * 3 * d + q_off;
                let dk = u * 3 * d + k_off;
                for i in 0..hd {
                    dqkv[dq + i] += ds * kk[i];
                    dqkv[dk + i] += ds * q[i];
                }
            }
        }
    }

    dx.clear();
    dx.resize(t * d, S::zero());
    matmul_bt(&dqkv, blk.w_qkv.as_slice(), t, 3 * d, d, dx);
    matmul_at_acc(&cache.x, &dqkv, t, d, 3 * d, grads.w_qkv.as_mut_slice());
    for row in 0..t {
        for (g, v) in grads
            .b_qkv
            .as_mut_slice()
            .iter_mut()
            .zip(&dqkv[row * 3 * d..(row + 1) * 3 * d])
        {
            *g += *v;
        }
    }
}

fn mlp_fwd<S: Scalar>(
    x: &[S],
    blk: &BlockParams<S>,
    d: usize,
    t: usize,
) -> (Vec<S>, MlpCache<S>) {
    let dh = 4 * d;
    let mut pre = vec![S::zero(); t * dh];
    matmul(x, blk.w_fc.as_slice(), t, d, dh, &mut pre);
    for row in 0..t {
        let r = &mut pre[row * dh..(row + 1) * dh];
        for (v, b) in r.iter_mut().zip(blk.b_fc.as_slice()) {
            *v += *b;
        }
    }
    let act: Vec<S> = pre.iter().map(|&v| gelu(v)).collect();
    let mut out = vec![S::zero(); t * d];
    matmul(&act, blk.w_mlp_out.as_slice(), t, dh, d, &mut out);
    for row in 0..t {
        let r = &mut out[row * d..(row + 1) * d];
        for (v, b) in r.iter_mut().zip(blk.b_mlp_out.as_slice()) {
            *v += *b;
        }
    }
    (
        out,
        MlpCache {
            x: x.to_vec(),
            pre,
            act,
        },
    )
}

fn mlp_bwd<S: Scalar>(
    dout: &[S],
    cache: &MlpCache<S>,
    blk: &BlockParams<S>,
    grads: &mut BlockParams<S>,
    d: usize,
    t: usize,
    dx: &mut Vec<S>,
) {
    let dh = 4 * d;
    let mut dact = vec![S::zero(); t * dh];
    matmul_bt(dout, blk.w_mlp_out.as_slice(), t, d, dh, &mut dact);
    matmul_at_acc(&cache.act, dout, t, dh, d, grads.w_mlp_out.as_mut_slice());
    for row in 0..t {
        for (g, v) in grads
            .b_mlp_out
            .as_mut_slice()
            .iter_mut()
            .zip(&dout[row * d..(row + 1) * d])
        {
            *g += *v;
        }
    }
    let mut dpre = dact;
    for (dv, &p) in dpre.iter_mut().zip(&cache.pre) {
        *dv = *dv * gelu_grad(p);
    }
    dx.clear();
    dx.resize(t * d, S::zero());
    matmul_bt(&dpre, blk.w_fc.as_slice(), t, dh, d, dx);
    matmul_at_acc(&cache.x, &dpre, t, d, dh, grads.w_fc.as_mut_slice());
    for row in 0..t {
        for (g, v) in grads
            .b_fc
            .as_mut_slice()
            .iter_mut()
            .zip(&dpre[row * dh..(row + 1) * dh])
        {
            *g += *v;
        }
    }
}

fn check_ids(ids: &[u32], config: &ModelConfig) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::TooShort { min: 1, got: 0 });
    }
    if ids.len() > config.context {
        return Err(Error::ContextOverflow {
            len: ids.len(),
            context: config.context,
        });
    }
    for &id in ids {
        if id as usize >= config.vocab {
            return Err(Error::BadId {
                id,
                vocab: config.vocab,
            });
        }
    }
    Ok(())
}

/// Hidden-state pipeline shared by `forward` and `loss_and_grad`.
fn hidden_fwd<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    ids: &[u32],
) -> ForwardCache<S> {
    let t = ids.len();
    let d = config.d_model;

    let mut x = vec![S::zero(); t * d];
    for (pos, &id) in ids.iter().enumerate() {
        let te = params.wte.row(id as usize);
        let pe = params.wpe.row(pos);
        let xr = &mut x[pos * d..(pos + 1) * d];
        for i in 0..d {
            xr[i] = te[i] + pe[i];
        }
    }

    let mut emb_ln = None;
    if config.variant == Variant::Grover {
        let (y, cache) = layernorm_fwd(&x, params.ln_f_g.as_slice(), params.ln_f_b.as_slice(), t, d);
        x = y;
        emb_ln = Some(cache);
    }

    let mut blocks = Vec::with_capacity(config.n_layers);
    for blk in &params.blocks {
        match config.variant {
            Variant::Gpt2 => {
                let (a_in, ln1) =
                    layernorm_fwd(&x, blk.ln1_g.as_slice(), blk.ln1_b.as_slice(), t, d);
                let (attn_out, attn) = attention_fwd(&a_in, blk, config, t);
                for (xi, ai) in x.iter_mut().zip(&attn_out) {
                    *xi += *ai;
                }
                let (m_in, ln2) = layernorm_fwd(&x, blk.ln2_g.as_slice(), blk.ln2_b.as_slice(), t, d);
                let (mlp_out, mlp) = mlp_fwd(&m_in, blk, d, t);
                for (xi, mi) in x.iter_mut().zip(&mlp_out) {
                    *xi += *mi;
                }
                blocks.push(BlockCache { ln1, attn, ln2, mlp });
            }
            Variant::Grover => {
                let (attn_out, attn) = attention_fwd(&x, blk, config, t);
                let mut r: Vec<S> = x.iter().zip(&attn_out).map(|(&a, &b)| a + b).collect();
                let (y, ln1) = layernorm_fwd(&r, blk.ln1_g.as_slice(), blk.ln1_b.as_slice(), t, d);
                let (mlp_out, mlp) = mlp_fwd(&y, blk, d, t);
                r = y.iter().zip(&mlp_out).map(|(&a, &b)| a + b).collect();
                let (y2, ln2) = layernorm_fwd(&r, blk.ln2_g.as_slice(), blk.ln2_b.as_slice(), t, d);
                x = y2;
                blocks.push(BlockCache { ln1, attn, ln2, mlp });
            }
        }
    }

    let mut final_ln = None;
    if config.variant == Variant::Gpt2 {
        let (y, cache) = layernorm_fwd(&x, params.ln_f_g.as_slice(), params.ln_f_b.as_slice(), t, d);
        x = y;
        final_ln = Some(cache);
    }

    ForwardCache {
        t,
        emb_ln,
        blocks,
        final_ln,
        x_final: x,
    }
}

fn logits_from_hidden<S: Scalar>(params: &Parameters<S>, config: &ModelConfig, x: &[S], t: usize) -> Tensor<S> {
    let mut logits = vec![S::zero(); t * config.vocab];
    matmul_bt(x, params.wte.as_slice(), t, config.d_model, config.vocab, &mut logits);
    Tensor::from_vec(&[t, config.vocab], logits)
}

/// Full forward pass: logits for every position. `ids.len()` must be in
/// `1..=context`.
pub fn forward<S: Scalar>(params: &Parameters<S>, config: &ModelConfig, ids: &[u32]) -> Result<Tensor<S>> {
    check_ids(ids, config)?;
    let cache = hidden_fwd(params, config, ids);
    Ok(logits_from_hidden(params, config, &cache.x_final, cache.t))
}

#[cfg(test)]
pub(crate) fn forward_cached<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    ids: &[u32],
) -> Result<(Tensor<S>, ForwardCache<S>)> {
    check_ids(ids, config)?;
    let cache = hidden_fwd(params, config, ids);
    let logits = logits_from_hidden(params, config, &cache.x_final, cache.t);
    Ok((logits, cache))
}

/// Logits at the last position only; the hidden pipeline is identical to
/// [`forward`] but the output projection is computed for one row. Used by
/// the sampling loop where earlier rows are discarded anyway.
pub fn forward_last<S: Scalar>(params: &Parameters<S>, config: &ModelConfig, ids: &[u32]) -> Result<Vec<S>> {
    check_ids(ids, config)?;
    let cache = hidden_fwd(params, config, ids);
    let t = cache.t;
    let d = config.d_model;
    let last = &cache.x_final[(t - 1) * d..t * d];
    let mut logits = vec![S::zero(); config.vocab];
    matmul_bt(last, params.wte.as_slice(), 1, d, config.vocab, &mut logits);
    Ok(logits)
}

/// Mean NLL of predicting `ids[t+1]` from position `t`, t = 0..T-2.
pub fn clm_loss<S: Scalar>(logits: &Tensor<S>, ids: &[u32]) -> Result<S> {
    let t = ids.len();
    if t < 2 {
        return Err(Error::TooShort { min: 2, got: t });
    }
    assert_eq!(logits.shape(), &[t, logits.shape()[1]]);
    let vocab = logits.shape()[1];
    let mut total = S::zero();
    for pos in 0..t - 1 {
        let row = &logits.as_slice()[pos * vocab..(pos + 1) * vocab];
        let target = ids[pos + 1] as usize;
        let maxv = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for &v in row {
            sum += (v - maxv).exp();
        }
        total += maxv + sum.ln() - row[target];
    }
    Ok(total / S::cast_from((t - 1) as f64))
}

/// Loss plus gradients for every parameter tensor, for one example.
pub fn loss_and_grad<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    ids: &[u32],
) -> Result<(S, Parameters<S>)> {
    check_ids(ids, config)?;
    let t = ids.len();
    if t < 2 {
        return Err(Error::TooShort { min: 2, got: t });
    }
    let d = config.d_model;
    let vocab = config.vocab;
    let cache = hidden_fwd(params, config, ids);
    let logits = logits_from_hidden(params, config, &cache.x_final, t);

    let mut grads = Parameters::zeros(config);

    // Softmax + NLL, fused with dlogits.
    let n_pred = S::cast_from((t - 1) as f64);
    let mut loss = S::zero();
    let mut dlogits = vec![S::zero(); t * vocab];
    for pos in 0..t - 1 {
        let row = &logits.as_slice()[pos * vocab..(pos + 1) * vocab];
        let target = ids[pos + 1] as usize;
        let maxv = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for &v in row {
            sum += (v - maxv).exp();
        }
        let inv = sum.recip();
        loss += maxv + sum.ln() - row[target];
        let drow = &mut dlogits[pos * vocab..(pos + 1) * vocab];
        for (i, &v) in row.iter().enumerate() {
            drow[i] = (v - maxv).exp() * inv / n_pred;
        }
        drow[target] -= S::one() / n_pred;
    }
    loss /= n_pred;

    // Tied output projection: logits = x_final wte^T.
    let mut dx = vec![S::zero(); t * d];
    matmul(&dlogits, params.wte.as_slice(), t, vocab, d, &mut dx);
    matmul_at_acc(&dlogits, &cache.x_final, t, vocab, d, grads.wte.as_mut_slice());

    if let Some(ln) = &cache.final_ln {
        let dout = std::mem::take(&mut dx);
        layernorm_bwd(
            &dout,
            ln,
            params.ln_f_g.as_slice(),
            t,
            d,
            &mut dx,
            grads.ln_f_g.as_mut_slice(),
            grads.ln_f_b.as_mut_slice(),
        );
    }

    let mut scratch: Vec<S> = Vec::new();
    for (l, blk) in params.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[l];
        let gblk = &mut grads.blocks[l];
        match config.variant {
            Variant::Gpt2 => {
                // x2 = x1 + mlp(ln2(x1))
                mlp_bwd(&dx, &bc.mlp, blk, gblk, d, t, &mut scratch);
                let mut d_ln_in = Vec::new();
                layernorm_bwd(
                    &scratch,
                    &bc.ln2,
                    blk.ln2_g.as_slice(),
                    t,
                    d,
                    &mut d_ln_in,
                    gblk.ln2_g.as_mut_slice(),
                    gblk.ln2_b.as_mut_slice(),
                );
                for (a, b) in dx.iter_mut().zip(&d_ln_in) {
                    *a += *b;
                }
                // x1 = x0 + attn(ln1(x0))
                attention_bwd(&dx, &bc.attn, blk, gblk, config, t, &mut scratch);
                layernorm_bwd(
                    &scratch,
                    &bc.ln1,
                    blk.ln1_g.as_slice(),
                    t,
                    d,
                    &mut d_ln_in,
                    gblk.ln1_g.as_mut_slice(),
                    gblk.ln1_b.as_mut_slice(),
                );
                for (a, b) in dx.iter_mut().zip(&d_ln_in) {
                    *a += *b;
                }
            }
            Variant::Grover => {
                // x'' = ln2(x' + mlp(x'))
                let mut dr = Vec::new();
                layernorm_bwd(
                    &dx,
                    &bc.ln2,
                    blk.ln2_g.as_slice(),
                    t,
                    d,
                    &mut dr,
                    gblk.ln2_g.as_mut_slice(),
                    gblk.ln2_b.as_mut_slice(),
                );
                mlp_bwd(&dr, &bc.mlp, blk, gblk, d, t, &mut scratch);
                for (a, b) in dr.iter_mut().zip(&scratch) {
                    *a += *b;
                }
                // x' = ln1(x + attn(x))
                let mut dr2 = Vec::new();
                layernorm_bwd(
                    &dr,
                    &bc.ln1,
                    blk.ln1_g.as_slice(),
                    t,
                    d,
                    &mut dr2,
                    gblk.ln1_g.as_mut_slice(),
                    gblk.ln1_b.as_mut_slice(),
                );
                attention_bwd(&dr2, &bc.attn, blk, gblk, config, t, &mut scratch);
                dx = dr2;
                for (a, b) in dx.iter_mut().zip(&scratch) {
                    *a += *b;
                }
            }
        }
    }

    if let Some(ln) = &cache.emb_ln {
        let dout = std::mem::take(&mut dx);
        layernorm_bwd(
            &dout,
            ln,
            params.ln_f_g.as_slice(),
            t,
            d,
            &mut dx,
            grads.ln_f_g.as_mut_slice(),
            grads.ln_f_b.as_mut_slice(),
        );
    }

    // Embedding gradients.
    for (pos, &id) in ids.iter().enumerate() {
        let dxr = &dx[pos * d..(pos + 1) * d];
        let wte_row = id as usize * d;
        let wpe_row = pos * d;
        for i in 0..d {
            grads.wte.as_mut_slice()[wte_row + i] += dxr[i];
            grads.wpe.as_mut_slice()[wpe_row + i] += dxr[i];
        }
    }

    Ok((loss, grads))
}
