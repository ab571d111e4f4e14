//! Differentiable building blocks: encoder and decoder layers, the strided
//! frontend, sinusoidal positions, the optimizer, and the finite-difference
//! gradient checker that every other module's gradient claims rest on.
//!
//! Blocks register their tensors in a shared [`ParamSet`] under a dotted
//! name prefix and rebuild their computation on a fresh [`Graph`] per call.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId, ParamSet};
use crate::Mat;

/// Additive mask value for disallowed attention positions; large enough to
/// underflow to exactly zero probability after the softmax max-shift.
pub const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlockDims {
    pub d_model: usize,
    pub ffn: usize,
    pub heads: usize,
    pub conv_kernel: usize,
}

impl Default for BlockDims {
    fn default() -> Self {
        Self {
            d_model: 64,
            ffn: 128,
            heads: 2,
            conv_kernel: 7,
        }
    }
}

impl BlockDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.ffn == 0 || self.heads == 0 {
            return Err(Error::Config("block dims must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "conv_kernel {} must be odd",
                self.conv_kernel
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    FeedForward,
    SelfAttention,
    ConvAugmented,
    DecoderLayer,
}

#[derive(Clone, Copy)]
struct LnIds {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy)]
struct HeadIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

struct AttnIds {
    ln: LnIds,
    heads: Vec<HeadIds>,
    wo: ParamId,
    bo: ParamId,
}

struct FfnIds {
    ln: LnIds,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

enum BlockParams {
    FeedForward(FfnIds),
    SelfAttention(AttnIds),
    ConvAugmented {
        ln: LnIds,
        pw_in: ParamId,
        b_in: ParamId,
        dw: ParamId,
        pw_out: ParamId,
        b_out: ParamId,
    },
    DecoderLayer {
        self_attn: AttnIds,
        cross_attn: AttnIds,
        ffn: FfnIds,
    },
}

pub struct Block {
    kind: BlockKind,
    dims: BlockDims,
    params: BlockParams,
}

/// Gaussian fan-in init: entries N(0, (scale/sqrt(rows))^2).
pub fn init_mat(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    let std = scale / (rows as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

fn add_ln(prefix: &str, d: usize, params: &mut ParamSet) -> LnIds {
    LnIds {
        gamma: params.add(&format!("{prefix}.gamma"), Mat::from_elem((1, d), 1.0)),
        beta: params.add(&format!("{prefix}.beta"), Mat::zeros((1, d))),
    }
}

fn add_attn(
    prefix: &str,
    dims: &BlockDims,
    params: &mut ParamSet,
    rng: &mut impl Rng,
    scale: f64,
) -> AttnIds {
    let d = dims.d_model;
    let dh = dims.head_dim();
    let ln = add_ln(&format!("{prefix}.ln"), d, params);
    let heads = (0..dims.heads)
        .map(|h| HeadIds {
            wq: params.add(&format!("{prefix}.h{h}.wq"), init_mat(rng, d, dh, scale)),
            wk: params.add(&format!("{prefix}.h{h}.wk"), init_mat(rng, d, dh, scale)),
            wv: params.add(&format!("{prefix}.h{h}.wv"), init_mat(rng, d, dh, scale)),
        })
        .collect();
    AttnIds {
        ln,
        heads,
        wo: params.add(&format!("{prefix}.wo"), init_mat(rng, d, d, scale)),
        bo: params.add(&format!("{prefix}.bo"), Mat::zeros((1, d))),
    }
}

fn add_ffn(
    prefix: &str,
    dims: &BlockDims,
    params: &mut ParamSet,
    rng: &mut impl Rng,
    scale: f64,
) -> FfnIds {
    let d = dims.d_model;
    FfnIds {
        ln: add_ln(&format!("{prefix}.ln"), d, params),
        w1: params.add(&format!("{prefix}.w1"), init_mat(rng, d, dims.ffn, scale)),
        b1: params.add(&format!("{prefix}.b1"), Mat::zeros((1, dims.ffn))),
        w2: params.add(&format!("{prefix}.w2"), init_mat(rng, dims.ffn, d, scale)),
        b2: params.add(&format!("{prefix}.b2"), Mat::zeros((1, d))),
    }
}

impl Block {
    /// Register a block's tensors under `prefix` and return the handle.
    /// `init_scale = 0` gives all-zero weights (layer norms still start at
    /// identity), which makes every block the identity map.
    pub fn new(
        kind: BlockKind,
        dims: BlockDims,
        prefix: &str,
        params: &mut ParamSet,
        rng: &mut impl Rng,
        init_scale: f64,
    ) -> Result<Self> {
        dims.validate()?;
        let d = dims.d_model;
        let block_params = match kind {
            BlockKind::FeedForward => {
                BlockParams::FeedForward(add_ffn(prefix, &dims, params, rng, init_scale))
            }
            BlockKind::SelfAttention => {
                BlockParams::SelfAttention(add_attn(prefix, &dims, params, rng, init_scale))
            }
            BlockKind::ConvAugmented => BlockParams::ConvAugmented {
                ln: add_ln(&format!("{prefix}.ln"), d, params),
                pw_in: params.add(&format!("{prefix}.pw_in"), init_mat(rng, d, d, init_scale)),
                b_in: params.add(&format!("{prefix}.b_in"), Mat::zeros((1, d))),
                dw: params.add(
                    &format!("{prefix}.dw"),
                    init_mat(rng, dims.conv_kernel, d, init_scale),
                ),
                pw_out: params.add(&format!("{prefix}.pw_out"), init_mat(rng, d, d, init_scale)),
                b_out: params.add(&format!("{prefix}.b_out"), Mat::zeros((1, d))),
            },
            BlockKind::DecoderLayer => BlockParams::DecoderLayer {
                self_attn: add_attn(&format!("{prefix}.self"), &dims, params, rng, init_scale),
                cross_attn: add_attn(&format!("{prefix}.cross"), &dims, params, rng, init_scale),
                ffn: add_ffn(&format!("{prefix}.ffn"), &dims, params, rng, init_scale),
            },
        };
        Ok(Self {
            kind,
            dims,
            params: block_params,
        })
    }

    pub fn kind(&self) -> BlockKind {
        self.kind
    }

    fn attention(
        &self,
        g: &mut Graph,
        p: &ParamSet,
        ids: &AttnIds,
        query_side: NodeId,
        kv_side: NodeId,
        mask: Option<NodeId>,
    ) -> Result<NodeId> {
        let scale = (self.dims.head_dim() as f64).powf(-0.5);
        let mut ctxs = Vec::with_capacity(ids.heads.len());
        for h in &ids.heads {
            let wq = g.param(p, h.wq);
            let wk = g.param(p, h.wk);
            let wv = g.param(p, h.wv);
            let q = g.matmul(query_side, wq)?;
            let k = g.matmul(kv_side, wk)?;
            let v = g.matmul(kv_side, wv)?;
            let raw = g.matmul_nt(q, k)?;
            let mut scores = g.scale(raw, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let att = g.softmax_rows(scores);
            ctxs.push(g.matmul(att, v)?);
        }
        let ctx = g.concat_cols(&ctxs)?;
        let wo = g.param(p, ids.wo);
        let bo = g.param(p, ids.bo);
        let out = g.matmul(ctx, wo)?;
        g.add_row(out, bo)
    }

    fn ffn_branch(&self, g: &mut Graph, p: &ParamSet, ids: &FfnIds, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(p, ids.ln.gamma);
        let beta = g.param(p, ids.ln.beta);
        let h = g.layer_norm(x, gamma, beta)?;
        let w1 = g.param(p, ids.w1);
        let b1 = g.param(p, ids.b1);
        let w2 = g.param(p, ids.w2);
        let b2 = g.param(p, ids.b2);
        let mid = g.matmul(h, w1)?;
        let mid = g.add_row(mid, b1)?;
        let act = g.silu(mid);
        let out = g.matmul(act, w2)?;
        g.add_row(out, b2)
    }

    /// Encoder-side forward. Fails on the decoder kind, which needs memory.
    pub fn forward(&self, g: &mut Graph, p: &ParamSet, x: NodeId) -> Result<NodeId> {
        if g.dim(x).1 != self.dims.d_model {
            return Err(Error::Shape(format!(
                "block expects width {}, got {}",
                self.dims.d_model,
                g.dim(x).1
            )));
        }
        match &self.params {
            BlockParams::FeedForward(ids) => {
                let branch = self.ffn_branch(g, p, ids, x)?;
                g.add(x, branch)
            }
            BlockParams::SelfAttention(ids) => {
                let gamma = g.param(p, ids.ln.gamma);
                let beta = g.param(p, ids.ln.beta);
                let h = g.layer_norm(x, gamma, beta)?;
                let branch = self.attention(g, p, ids, h, h, None)?;
                g.add(x, branch)
            }
            BlockParams::ConvAugmented {
                ln,
                pw_in,
                b_in,
                dw,
                pw_out,
                b_out,
            } => {
                let gamma = g.param(p, ln.gamma);
                let beta = g.param(p, ln.beta);
                let h = g.layer_norm(x, gamma, beta)?;
                let win = g.param(p, *pw_in);
                let bin = g.param(p, *b_in);
                let pre = g.matmul(h, win)?;
                let pre = g.add_row(pre, bin)?;
                let pre = g.silu(pre);
                let kern = g.param(p, *dw);
                let conv = g.depthwise_conv(pre, kern)?;
                let conv = g.silu(conv);
                let wout = g.param(p, *pw_out);
                let bout = g.param(p, *b_out);
                let post = g.matmul(conv, wout)?;
                let post = g.add_row(post, bout)?;
                g.add(x, post)
            }
            BlockParams::DecoderLayer { .. } => Err(Error::Shape(
                "decoder layer needs forward_decoder with memory".into(),
            )),
        }
    }

    /// Decoder-side forward: causal self-attention over `x`, cross-attention
    /// into `memory`, then a feedforward, all with residuals.
    pub fn forward_decoder(
        &self,
        g: &mut Graph,
        p: &ParamSet,
        x: NodeId,
        memory: NodeId,
        self_mask: NodeId,
    ) -> Result<NodeId> {
        let BlockParams::DecoderLayer {
            self_attn,
            cross_attn,
            ffn,
        } = &self.params
        else {
            return Err(Error::Shape("not a decoder layer".into()));
        };
        let gamma = g.param(p, self_attn.ln.gamma);
        let beta = g.param(p, self_attn.ln.beta);
        let h = g.layer_norm(x, gamma, beta)?;
        let sa = self.attention(g, p, self_attn, h, h, Some(self_mask))?;
        let x2 = g.add(x, sa)?;

        let gamma = g.param(p, cross_attn.ln.gamma);
        let beta = g.param(p, cross_attn.ln.beta);
        let h2 = g.layer_norm(x2, gamma, beta)?;
        let ca = self.attention(g, p, cross_attn, h2, memory, None)?;
        let x3 = g.add(x2, ca)?;

        let branch = self.ffn_branch(g, p, ffn, x3)?;
        g.add(x3, branch)
    }
}

/// Strictly lower-triangular-forbidden mask: position i may attend to j <= i.
pub fn causal_mask(len: usize) -> Mat {
    Mat::from_shape_fn((len, len), |(i, j)| if j <= i { 0.0 } else { MASK_NEG })
}

/// Classic sinusoidal positions, `len x d`.
pub fn positional_encoding(len: usize, d: usize) -> Mat {
    Mat::from_shape_fn((len, d), |(t, j)| {
        let pair = (j / 2) as f64;
        let rate = (t as f64) / 10000f64.powf(2.0 * pair / d as f64);
        if j % 2 == 0 {
            rate.sin()
        } else {
            rate.cos()
        }
    })
}

/// Frame stacking for the strided frontend: row `t` of the output is the
/// concatenation of input rows `factor*t .. factor*(t+1)`, zero-padded past
/// the end. Output length is `ceil(T / factor)`.
pub fn stack_frames(frames: &Mat, factor: usize) -> Mat {
    let (t_len, f) = frames.dim();
    let out_len = t_len.div_ceil(factor);
    Mat::from_shape_fn((out_len, factor * f), |(t, j)| {
        let src = t * factor + j / f;
        if src < t_len {
            frames[(src, j % f)]
        } else {
            0.0
        }
    })
}

/// One strided projection applied before the shared encoder.
pub struct Frontend {
    pub factor: usize,
    in_dim: usize,
    w: ParamId,
    b: ParamId,
}

impl Frontend {
    pub fn new(
        prefix: &str,
        in_dim: usize,
        d_model: usize,
        factor: usize,
        params: &mut ParamSet,
        rng: &mut impl Rng,
        init_scale: f64,
    ) -> Result<Self> {
        if factor == 0 || in_dim == 0 {
            return Err(Error::Config("frontend factor and in_dim must be positive".into()));
        }
        Ok(Self {
            factor,
            in_dim,
            w: params.add(
                &format!("{prefix}.w"),
                init_mat(rng, factor * in_dim, d_model, init_scale),
            ),
            b: params.add(&format!("{prefix}.b"), Mat::zeros((1, d_model))),
        })
    }

    pub fn out_len(&self, t_len: usize) -> usize {
        t_len.div_ceil(self.factor)
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamSet, frames: &Mat) -> Result<NodeId> {
        if frames.dim().1 != self.in_dim {
            return Err(Error::Shape(format!(
                "frontend expects {} features, got {}",
                self.in_dim,
                frames.dim().1
            )));
        }
        let stacked = g.input(stack_frames(frames, self.factor));
        let w = g.param(p, self.w);
        let b = g.param(p, self.b);
        let proj = g.matmul(stacked, w)?;
        g.add_row(proj, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps of linear learning-rate ramp; constant afterwards.
    pub warmup_steps: usize,
    /// Global-norm gradient clip; infinity disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 200,
            grad_clip: 5.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: &str| Err(Error::Config(msg.into()));
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return err("learning rate must be finite and positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("adam betas must lie in [0, 1)");
        }
        if !self.eps.is_finite() || self.eps <= 0.0 {
            return err("adam epsilon must be finite and positive");
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return err("gradient clip must be positive");
        }
        Ok(())
    }
}

/// Adam with linear learning-rate warmup and global-norm clipping. A step
/// that would leave any parameter non-finite is refused in full: the error
/// is returned with parameters and moments untouched, so the last good state
/// survives divergence.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: usize,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let shapes: Vec<Mat> = params
            .ids()
            .map(|id| Array2::zeros(params.value(id).dim()))
            .collect();
        Self {
            cfg,
            m: shapes.clone(),
            v: shapes,
            step: 0,
        }
    }

    pub fn current_lr(&self) -> f64 {
        let warm = if self.cfg.warmup_steps == 0 {
            1.0
        } else {
            ((self.step as f64) / self.cfg.warmup_steps as f64).min(1.0)
        };
        self.cfg.lr * warm
    }

    /// Apply one update from the accumulated gradients.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        let ids: Vec<_> = params.ids().collect();
        let mut norm2 = 0.0;
        for id in &ids {
            norm2 += params.grad(*id).iter().map(|g| g * g).sum::<f64>();
        }
        if !norm2.is_finite() {
            return Err(Error::Numerics("gradient is not finite".into()));
        }
        let norm = norm2.sqrt();
        let clip_scale = if norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        let next = self.step + 1;
        let warm = if self.cfg.warmup_steps == 0 {
            1.0
        } else {
            (next as f64 / self.cfg.warmup_steps as f64).min(1.0)
        };
        let lr = self.cfg.lr * warm;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(next as i32);
        let bc2 = 1.0 - b2.powi(next as i32);

        // Stage the whole step before committing any of it.
        let mut staged = Vec::with_capacity(ids.len());
        for id in &ids {
            let grad = params.grad(*id).mapv(|g| g * clip_scale);
            let i = id.0;
            let m = &self.m[i] * b1 + &grad * (1.0 - b1);
            let v = &self.v[i] * b2 + &grad.mapv(|g| g * g) * (1.0 - b2);
            let value = Mat::from_shape_fn(grad.dim(), |ix| {
                let mhat = m[ix] / bc1;
                let vhat = v[ix] / bc2;
                params.value(*id)[ix] - lr * mhat / (vhat.sqrt() + self.cfg.eps)
            });
            if value.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerics(format!(
                    "update would make `{}` non-finite",
                    params.name(*id)
                )));
            }
            staged.push((m, v, value));
        }
        for (id, (m, v, value)) in ids.into_iter().zip(staged) {
            self.m[id.0] = m;
            self.v[id.0] = v;
            *params.value_mut(id) = value;
        }
        self.step = next;
        Ok(())
    }
}

/// Max over every parameter scalar of the relative disagreement between the
/// analytic gradient and a central finite difference of `build`'s loss.
///
/// The denominator is floored at 1e-6: with 64-bit arithmetic and a loss of
/// order one, a central difference resolves roughly 1e-11 absolute, so for
/// gradients much below the floor the quotient would measure the probe's own
/// roundoff rather than the backward pass. Below the floor the comparison is
/// effectively absolute, which still flags any real missing or wrong term.
///
/// `build` must construct the loss on the given graph deterministically from
/// the parameter values alone.
pub fn grad_check<F>(params: &mut ParamSet, eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<NodeId>,
{
    params.zero_grads();
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let base = g.scalar(loss);
    if !base.is_finite() {
        return Err(Error::Numerics(format!("loss is {base}")));
    }
    g.backward(loss, 1.0, params);
    let analytic: Vec<Mat> = params.ids().map(|id| params.grad(id).clone()).collect();

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, p)?;
        let v = g.scalar(loss);
        if !v.is_finite() {
            return Err(Error::Numerics(format!("perturbed loss is {v}")));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let dim = params.value(id).dim();
        for r in 0..dim.0 {
            for c in 0..dim.1 {
                let orig = params.value(id)[(r, c)];
                params.value_mut(id)[(r, c)] = orig + eps;
                let up = eval(params)?;
                params.value_mut(id)[(r, c)] = orig - eps;
                let down = eval(params)?;
                params.value_mut(id)[(r, c)] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic[k][(r, c)];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    Ok(worst)
}
