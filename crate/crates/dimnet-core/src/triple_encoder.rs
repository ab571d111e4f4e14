//! Shared encoder plus the two task encoders it feeds. The shared stack
//! exposes three intermediate taps (at 1/3, 2/3, and 3/3 of its depth) for
//! the accent branch; the CTC and attention encoders then specialize the
//! shared features per task. The attention encoder optionally concatenates an
//! accent embedding onto its input through a width-matching projection.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId, ParamSet};
use crate::nnet::{positional_encoding, Block, BlockDims, BlockKind, Frontend};
use crate::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Input feature dimensionality.
    pub in_dim: usize,
    pub dims: BlockDims,
    pub shared_depth: usize,
    pub ctc_depth: usize,
    pub att_depth: usize,
    pub subsample_factor: usize,
    /// Width of the accent embedding the attention encoder can ingest;
    /// `None` removes the concat path entirely.
    pub emb_width: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_dim: 16,
            dims: BlockDims::default(),
            shared_depth: 3,
            ctc_depth: 2,
            att_depth: 2,
            subsample_factor: 2,
            emb_width: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.shared_depth == 0 {
            return Err(Error::Config("shared_depth must be at least 1".into()));
        }
        if self.subsample_factor == 0 {
            return Err(Error::Config("subsample_factor must be at least 1".into()));
        }
        if self.in_dim == 0 {
            return Err(Error::Config("in_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Tap layer indices (1-based) for a shared stack of `depth` layers.
pub fn tap_layers(depth: usize) -> (usize, usize, usize) {
    (depth.div_ceil(3), (2 * depth).div_ceil(3), depth)
}

pub struct SharedEncoderOutput {
    pub x_se: NodeId,
    /// Outputs of the shared layers at 1/3, 2/3, and 3/3 of the depth;
    /// the last tap is `x_se` itself.
    pub taps: [NodeId; 3],
}

/// Alternate conv-augmented and self-attention layers.
fn stack_kind(i: usize) -> BlockKind {
    if i % 2 == 0 {
        BlockKind::ConvAugmented
    } else {
        BlockKind::SelfAttention
    }
}

pub struct TripleEncoder {
    cfg: EncoderConfig,
    frontend: Frontend,
    shared: Vec<Block>,
    ctc: Vec<Block>,
    att: Vec<Block>,
    /// (weight, bias) projecting Concat(x_se, emb) back to d_model.
    in_proj: Option<(ParamId, ParamId)>,
}

impl TripleEncoder {
    pub fn new(
        cfg: EncoderConfig,
        prefix: &str,
        params: &mut ParamSet,
        rng: &mut impl Rng,
        init_scale: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dims.d_model;
        let frontend = Frontend::new(
            &format!("{prefix}.frontend"),
            cfg.in_dim,
            d,
            cfg.subsample_factor,
            params,
            rng,
            init_scale,
        )?;
        let mut make_stack = |name: &str, depth: usize| -> Result<Vec<Block>> {
            (0..depth)
                .map(|i| {
                    Block::new(
                        stack_kind(i),
                        cfg.dims,
                        &format!("{prefix}.{name}.{i}"),
                        params,
                        rng,
                        init_scale,
                    )
                })
                .collect()
        };
        let shared = make_stack("shared", cfg.shared_depth)?;
        let ctc = make_stack("ctc", cfg.ctc_depth)?;
        let att = make_stack("att", cfg.att_depth)?;
        let in_proj = match cfg.emb_width {
            Some(e) => {
                let w = params.add(
                    &format!("{prefix}.att.in_proj.w"),
                    crate::nnet::init_mat(rng, d + e, d, init_scale),
                );
                let b = params.add(&format!("{prefix}.att.in_proj.b"), Mat::zeros((1, d)));
                Some((w, b))
            }
            None => None,
        };
        Ok(Self {
            cfg,
            frontend,
            shared,
            ctc,
            att,
            in_proj,
        })
    }

    pub fn cfg(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Subsampled length for `t0` input frames.
    pub fn out_len(&self, t0: usize) -> usize {
        self.frontend.out_len(t0)
    }

    pub fn shared_forward(
        &self,
        g: &mut Graph,
        p: &ParamSet,
        frames: &Mat,
    ) -> Result<SharedEncoderOutput> {
        if frames.dim().0 == 0 {
            return Err(Error::Shape("encoder input has zero frames".into()));
        }
        let x = self.frontend.forward(g, p, frames)?;
        let t = g.dim(x).0;
        let pe = g.input(positional_encoding(t, self.cfg.dims.d_model));
        let mut x = g.add(x, pe)?;
        let mut outputs = Vec::with_capacity(self.shared.len());
        for block in &self.shared {
            x = block.forward(g, p, x)?;
            outputs.push(x);
        }
        let (t1, t2, t3) = tap_layers(self.shared.len());
        Ok(SharedEncoderOutput {
            x_se: outputs[t3 - 1],
            taps: [outputs[t1 - 1], outputs[t2 - 1], outputs[t3 - 1]],
        })
    }

    pub fn ctc_encode(&self, g: &mut Graph, p: &ParamSet, x_se: NodeId) -> Result<NodeId> {
        let mut x = x_se;
        for block in &self.ctc {
            x = block.forward(g, p, x)?;
        }
        Ok(x)
    }

    /// Attention-encoder forward. A present `emb` must span 1 row
    /// (utterance-level, broadcast over time) or exactly T rows; it is
    /// concatenated onto `x_se` and projected back to model width. An absent
    /// `emb` skips both steps, so a depth-0 encoder passes `x_se` through
    /// unchanged.
    pub fn att_encode(
        &self,
        g: &mut Graph,
        p: &ParamSet,
        x_se: NodeId,
        emb: Option<NodeId>,
    ) -> Result<NodeId> {
        let t = g.dim(x_se).0;
        let mut x = x_se;
        if let Some(e) = emb {
            let (rows, width) = g.dim(e);
            let Some((w, b)) = self.in_proj else {
                return Err(Error::Shape(
                    "attention encoder was built without an embedding path".into(),
                ));
            };
            if Some(width) != self.cfg.emb_width {
                return Err(Error::Shape(format!(
                    "embedding width {width} does not match configured {:?}",
                    self.cfg.emb_width
                )));
            }
            let tiled = if rows == 1 {
                g.broadcast_row(e, t)?
            } else if rows == t {
                e
            } else {
                return Err(Error::Shape(format!(
                    "embedding spans {rows} rows, expected 1 or {t}"
                )));
            };
            let cat = g.concat_cols(&[x_se, tiled])?;
            let wn = g.param(p, w);
            let bn = g.param(p, b);
            let proj = g.matmul(cat, wn)?;
            x = g.add_row(proj, bn)?;
        }
        for block in &self.att {
            x = block.forward(g, p, x)?;
        }
        Ok(x)
    }
}
