//! Building blocks of the encoder, expressed as tape computations.
//!
//! Every function takes a [`Binder`] so that a parameter used several times
//! in one forward pass is bound to a single tape leaf.

use std::f64::consts::PI;

use super::{BranchParams, FirstConv, FusionParams, GaborParams, ModelConfig, ScorerParams};
use crate::autodiff::{Padding, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Kernel sizes of the parallel multi-scale branches.
pub const MSFB_KERNELS: [usize; 5] = [7, 15, 17, 39, 41];

/// Lower and upper bounds applied to Gabor centre frequencies.
pub const GABOR_FREQ_MIN: f64 = 1e-3;
pub const GABOR_FREQ_MAX: f64 = 0.5;

/// Lazily binds parameters of one store onto one tape.
pub struct Binder<'s> {
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Binder {
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn get(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let v = self.store.bind(tape, id);
        self.bound[id.index()] = Some(v);
        v
    }
}

/// Centred integer offsets `-(T-1)/2 ..= (T-1)/2`.
pub fn kernel_offsets(kernel_len: usize) -> Vec<f64> {
    let half = (kernel_len / 2) as f64;
    (0..kernel_len).map(|i| i as f64 - half).collect()
}

/// Zero-mean Gabor kernels, shape `[C, 1, T]`.
pub fn gabor_kernels(tape: &mut Tape, b: &mut Binder, g: &GaborParams) -> Result<Var> {
    let c = g.channels;
    let offsets = kernel_offsets(g.kernel_len);
    let t_len = offsets.len();
    let t = tape.constant(Tensor::new(vec![1, t_len], offsets.clone())?);
    let t2 = tape.constant(Tensor::new(
        vec![1, t_len],
        offsets.iter().map(|v| v * v).collect(),
    )?);

    let log_sigma = b.get(tape, g.log_sigma);
    let log_sigma = tape.reshape(log_sigma, &[c, 1])?;
    let sigma = tape.exp(log_sigma);
    let var = tape.mul(sigma, sigma)?;
    let two_var = tape.scalar_mul(var, 2.0);
    let ratio = tape.div(t2, two_var)?;
    let neg = tape.neg(ratio);
    let envelope = tape.exp(neg);

    let freq = b.get(tape, g.freq);
    let freq = tape.clamp(freq, GABOR_FREQ_MIN, GABOR_FREQ_MAX);
    let freq = tape.reshape(freq, &[c, 1])?;
    let psi = b.get(tape, g.psi);
    let psi = tape.reshape(psi, &[c, 1])?;
    let ft = tape.mul(freq, t)?;
    let arg = tape.scalar_mul(ft, 2.0 * PI);
    let arg = tape.add(arg, psi)?;
    let carrier = tape.cos(arg);

    let raw = tape.mul(envelope, carrier)?;
    let mean = tape.mean(raw, 1, true)?;
    let centred = tape.sub(raw, mean)?;
    tape.reshape(centred, &[c, 1, t_len])
}

/// Length after `times` rounds of stride-2 pooling; lengths below two are
/// left alone.
pub fn downsampled_len(mut len: usize, times: usize) -> usize {
    for _ in 0..times {
        if len >= 2 {
            len /= 2;
        }
    }
    len
}

fn downsample(tape: &mut Tape, x: Var) -> Result<Var> {
    if tape.shape(x)[1] >= 2 {
        tape.avg_pool1d(x, 2, 2)
    } else {
        Ok(x)
    }
}

/// Concatenated outputs of the parallel branches, `[5*width, L]`.
pub fn msfb_branches(tape: &mut Tape, b: &mut Binder, p: &BranchParams, x: Var) -> Result<Var> {
    let mut outs = Vec::with_capacity(p.msfb.len());
    for &(w, bias) in &p.msfb {
        let w = b.get(tape, w);
        let bias = b.get(tape, bias);
        outs.push(tape.conv1d(x, w, Some(bias), 1, Padding::Same)?);
    }
    tape.concat(&outs, 0)
}

/// Multi-scale block: parallel branches, 1x1 fusion, stride-2 pooling.
pub fn msfb(tape: &mut Tape, b: &mut Binder, p: &BranchParams, x: Var, slope: f64) -> Result<Var> {
    let cat = msfb_branches(tape, b, p, x)?;
    let w = b.get(tape, p.fuse.0);
    let bias = b.get(tape, p.fuse.1);
    let fused = tape.conv1d(cat, w, Some(bias), 1, Padding::Same)?;
    let fused = tape.leaky_relu(fused, slope);
    downsample(tape, fused)
}

/// One feature branch: `[1, L]` segment to a `[1, D]` embedding.
///
/// The downsampled feature map is flattened into the head rather than
/// averaged over time. Averaging leaves only shift-invariant energy
/// statistics, which barely differ between z-scored beats.
pub fn branch_forward(
    tape: &mut Tape,
    b: &mut Binder,
    p: &BranchParams,
    segment: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    let kernel = match &p.first {
        FirstConv::Gabor(g) => gabor_kernels(tape, b, g)?,
        FirstConv::Plain(w) => b.get(tape, *w),
    };
    let x = tape.conv1d(segment, kernel, None, 1, Padding::Same)?;
    let x = tape.leaky_relu(x, cfg.leaky_slope);
    let mut x = msfb(tape, b, p, x, cfg.leaky_slope)?;
    for &(w, bias) in &p.stages {
        let w = b.get(tape, w);
        let bias = b.get(tape, bias);
        x = tape.conv1d(x, w, Some(bias), 1, Padding::Same)?;
        x = tape.leaky_relu(x, cfg.leaky_slope);
        x = downsample(tape, x)?;
    }
    let flat = tape.value(x).numel();
    let flat = tape.reshape(x, &[1, flat])?;
    let w = b.get(tape, p.head.0);
    let bias = b.get(tape, p.head.1);
    tape.linear(flat, w, Some(bias))
}

/// Refined nodes and the attention matrix of one PR-GAT block.
#[derive(Clone, Copy, Debug)]
pub struct GatOutput {
    pub nodes: Var,
    pub attention: Var,
}

/// Post-norm attention block over `[N, D]` nodes.
pub fn pr_gat(
    tape: &mut Tape,
    b: &mut Binder,
    p: &FusionParams,
    h: Var,
    cfg: &ModelConfig,
) -> Result<GatOutput> {
    let d = tape.shape(h)[1];
    let wq = b.get(tape, p.wq);
    let wk = b.get(tape, p.wk);
    let wv = b.get(tape, p.wv);
    let q = tape.matmul(h, wq)?;
    let k = tape.matmul(h, wk)?;
    let v = tape.matmul(h, wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scalar_mul(scores, 1.0 / (d as f64).sqrt());
    let scores = tape.leaky_relu(scores, cfg.leaky_slope);
    let attention = tape.softmax(scores, 1)?;
    let mixed = tape.matmul(attention, v)?;

    let res = tape.add(h, mixed)?;
    let (g1, b1) = (b.get(tape, p.ln1.0), b.get(tape, p.ln1.1));
    let h1 = tape.layer_norm(res, g1, b1, cfg.ln_eps)?;

    let (w1, c1) = (b.get(tape, p.ffn1.0), b.get(tape, p.ffn1.1));
    let (w2, c2) = (b.get(tape, p.ffn2.0), b.get(tape, p.ffn2.1));
    let hidden = tape.linear(h1, w1, Some(c1))?;
    let hidden = tape.leaky_relu(hidden, cfg.leaky_slope);
    let ff = tape.linear(hidden, w2, Some(c2))?;
    let res = tape.add(h1, ff)?;
    let (g2, b2) = (b.get(tape, p.ln2.0), b.get(tape, p.ln2.1));
    let nodes = tape.layer_norm(res, g2, b2, cfg.ln_eps)?;
    Ok(GatOutput { nodes, attention })
}

/// Scalar score of a `[1, D]` node.
pub fn score_node(
    tape: &mut Tape,
    b: &mut Binder,
    s: &ScorerParams,
    node: Var,
    slope: f64,
) -> Result<Var> {
    let (w1, b1) = (b.get(tape, s.hidden.0), b.get(tape, s.hidden.1));
    let (w2, b2) = (b.get(tape, s.out.0), b.get(tape, s.out.1));
    let h = tape.linear(node, w1, Some(b1))?;
    let h = tape.leaky_relu(h, slope);
    tape.linear(h, w2, Some(b2))
}

/// Pooled vector `[1, D]` and the pooling weights `[N, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct PoolOutput {
    pub pooled: Var,
    pub weights: Var,
}

/// `LN(sum_k alpha_k h_k)` with `alpha = softmax(scores)`; `scores` is `[N, 1]`.
pub fn pool_with_scores(
    tape: &mut Tape,
    nodes: Var,
    scores: Var,
    gain: Var,
    bias: Var,
    eps: f64,
) -> Result<PoolOutput> {
    let weights = tape.softmax(scores, 0)?;
    let weighted = tape.mul(nodes, weights)?;
    let n = tape.shape(nodes)[0] as f64;
    let mean = tape.mean(weighted, 0, true)?;
    let total = tape.scalar_mul(mean, n);
    let pooled = tape.layer_norm(total, gain, bias, eps)?;
    Ok(PoolOutput { pooled, weights })
}

/// Attention pooling where node `k` is scored by the scorer of `roles[k]`.
pub fn attention_pool(
    tape: &mut Tape,
    b: &mut Binder,
    p: &FusionParams,
    nodes: Var,
    roles: &[usize],
    cfg: &ModelConfig,
) -> Result<PoolOutput> {
    let mut scores = Vec::with_capacity(roles.len());
    for (k, &role) in roles.iter().enumerate() {
        let row = tape.narrow(nodes, 0, k, 1)?;
        scores.push(score_node(tape, b, &p.scorers[role], row, cfg.leaky_slope)?);
    }
    let scores = tape.concat(&scores, 0)?;
    let gain = b.get(tape, p.pool_ln.0);
    let bias = b.get(tape, p.pool_ln.1);
    pool_with_scores(tape, nodes, scores, gain, bias, cfg.ln_eps)
}

/// Intermediate values of one fusion stage.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    pub fused: Var,
    pub attention: Var,
    pub weights: Var,
}

/// PR-GAT refinement followed by attention pooling over `[1, D]` inputs.
pub fn fusion_stage(
    tape: &mut Tape,
    b: &mut Binder,
    p: &FusionParams,
    inputs: &[Var],
    roles: &[usize],
    cfg: &ModelConfig,
) -> Result<StageOutput> {
    let h = tape.concat(inputs, 0)?;
    let gat = pr_gat(tape, b, p, h, cfg)?;
    let pool = attention_pool(tape, b, p, gat.nodes, roles, cfg)?;
    Ok(StageOutput {
        fused: pool.pooled,
        attention: gat.attention,
        weights: pool.weights,
    })
}
