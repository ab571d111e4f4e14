//! The accent branch: text anchors and acoustic mappings compared per space
//! by a scaled dot product (the accent shift), the shift concatenated with a
//! projected text reference into a bimodal representation, and a lightweight
//! attention classifier on top.
//!
//! Both branch inputs are detached, so no accent gradient reaches the shared
//! encoder or the CTC branch; conversely the embeddings handed to the ASR
//! side are detached before their up-projections, so ASR losses cannot train
//! the branch.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId, ParamSet};
use crate::nnet::{init_mat, Block, BlockDims, BlockKind};
use crate::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArLevel {
    Frame,
    Utterance,
}

impl std::fmt::Display for ArLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Frame => "frame",
            Self::Utterance => "utterance",
        })
    }
}

impl std::str::FromStr for ArLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame" => Ok(Self::Frame),
            "utterance" => Ok(Self::Utterance),
            other => Err(Error::Config(format!("unknown accent level `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// Classifier hidden activations.
    Dnn,
    /// Posteriors, up-projected.
    Pp,
    /// Accent shift, up-projected.
    Sim,
}

impl std::fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Dnn => "dnn",
            Self::Pp => "pp",
            Self::Sim => "sim",
        })
    }
}

impl std::str::FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dnn" => Ok(Self::Dnn),
            "pp" => Ok(Self::Pp),
            "sim" => Ok(Self::Sim),
            other => Err(Error::Config(format!("unknown embedding kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LasasConfig {
    /// Number of mapping spaces N.
    pub n_spaces: usize,
    /// Bimodal width C; the text reference fills the last C - N columns.
    pub bimodal_width: usize,
    /// Mapped width of each space's anchors and acoustics.
    pub d_k: usize,
    /// Acoustic input width (three concatenated taps).
    pub d1: usize,
    /// Text input width (fine vocab size, one-hot).
    pub d2: usize,
    pub n_accents: usize,
    /// Level used for the accent loss.
    pub level: ArLevel,
    pub classifier_blocks: usize,
    pub classifier_heads: usize,
    pub classifier_hidden: usize,
    /// UpProject target width for the pp and sim embeddings.
    pub emb_width: usize,
}

impl LasasConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_spaces == 0 {
            return Err(Error::Config("n_spaces must be at least 1".into()));
        }
        if self.bimodal_width <= self.n_spaces {
            return Err(Error::Config(format!(
                "bimodal_width {} must exceed n_spaces {}",
                self.bimodal_width, self.n_spaces
            )));
        }
        if self.d_k == 0 || self.d1 == 0 || self.d2 == 0 {
            return Err(Error::Config("d_k, d1, d2 must be positive".into()));
        }
        if self.n_accents < 2 {
            return Err(Error::Config("n_accents must be at least 2".into()));
        }
        if self.classifier_hidden == 0 || self.emb_width == 0 {
            return Err(Error::Config("classifier_hidden and emb_width must be positive".into()));
        }
        if self.bimodal_width % self.classifier_heads != 0 {
            return Err(Error::Config(format!(
                "bimodal_width {} not divisible by {} heads",
                self.bimodal_width, self.classifier_heads
            )));
        }
        Ok(())
    }

    /// Width of the embedding each kind produces.
    pub fn embedding_width(&self, kind: EmbeddingKind) -> usize {
        match kind {
            EmbeddingKind::Dnn => self.classifier_hidden,
            EmbeddingKind::Pp | EmbeddingKind::Sim => self.emb_width,
        }
    }
}

pub struct AccentOutput {
    /// Probability rows, T x K at frame level or 1 x K at utterance level.
    pub posteriors: NodeId,
    pub log_posteriors: NodeId,
    /// Pre-final-linear activations.
    pub hidden: NodeId,
    /// The accent shift this output was computed from, T x N.
    pub shift: NodeId,
}

impl AccentOutput {
    pub fn argmax(&self, g: &Graph) -> usize {
        let p = g.value(self.posteriors);
        let mut sums = vec![0.0; p.dim().1];
        for row in p.rows() {
            for (k, v) in row.iter().enumerate() {
                sums[k] += v;
            }
        }
        sums.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(k, _)| k)
            .unwrap()
    }
}

struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(
        prefix: &str,
        rows: usize,
        cols: usize,
        params: &mut ParamSet,
        rng: &mut impl Rng,
        scale: f64,
    ) -> Self {
        Self {
            w: params.add(&format!("{prefix}.w"), init_mat(rng, rows, cols, scale)),
            b: params.add(&format!("{prefix}.b"), Mat::zeros((1, cols))),
        }
    }

    fn apply(&self, g: &mut Graph, p: &ParamSet, x: NodeId) -> Result<NodeId> {
        let w = g.param(p, self.w);
        let b = g.param(p, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

pub struct AccentBranch {
    cfg: LasasConfig,
    w_t: Vec<ParamId>,
    w_a: Vec<ParamId>,
    w_td: ParamId,
    classifier: Vec<Block>,
    lin_hidden: Linear,
    lin_out: Linear,
    /// UpProjections for the pp and sim embeddings; registered under the
    /// fusion prefix because they belong to the ASR side of the detach
    /// boundary.
    up_pp: Linear,
    up_sim: Linear,
}

impl AccentBranch {
    pub fn new(
        cfg: LasasConfig,
        ar_prefix: &str,
        fusion_prefix: &str,
        params: &mut ParamSet,
        rng: &mut impl Rng,
        init_scale: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        let w_t = (0..cfg.n_spaces)
            .map(|i| {
                params.add(
                    &format!("{ar_prefix}.space{i}.w_t"),
                    init_mat(rng, cfg.d2, cfg.d_k, init_scale),
                )
            })
            .collect();
        let w_a = (0..cfg.n_spaces)
            .map(|i| {
                params.add(
                    &format!("{ar_prefix}.space{i}.w_a"),
                    init_mat(rng, cfg.d1, cfg.d_k, init_scale),
                )
            })
            .collect();
        let w_td = params.add(
            &format!("{ar_prefix}.w_td"),
            init_mat(rng, cfg.d2, cfg.bimodal_width - cfg.n_spaces, init_scale),
        );
        let dims = BlockDims {
            d_model: cfg.bimodal_width,
            ffn: 2 * cfg.bimodal_width,
            heads: cfg.classifier_heads,
            conv_kernel: 3,
        };
        let classifier = (0..cfg.classifier_blocks)
            .map(|i| {
                Block::new(
                    BlockKind::SelfAttention,
                    dims,
                    &format!("{ar_prefix}.cls{i}"),
                    params,
                    rng,
                    init_scale,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let lin_hidden = Linear::new(
            &format!("{ar_prefix}.hidden"),
            cfg.bimodal_width,
            cfg.classifier_hidden,
            params,
            rng,
            init_scale,
        );
        let lin_out = Linear::new(
            &format!("{ar_prefix}.out"),
            cfg.classifier_hidden,
            cfg.n_accents,
            params,
            rng,
            init_scale,
        );
        let up_pp = Linear::new(
            &format!("{fusion_prefix}.up_pp"),
            cfg.n_accents,
            cfg.emb_width,
            params,
            rng,
            init_scale,
        );
        let up_sim = Linear::new(
            &format!("{fusion_prefix}.up_sim"),
            cfg.n_spaces,
            cfg.emb_width,
            params,
            rng,
            init_scale,
        );
        Ok(Self {
            cfg,
            w_t,
            w_a,
            w_td,
            classifier,
            lin_hidden,
            lin_out,
            up_pp,
            up_sim,
        })
    }

    pub fn cfg(&self) -> &LasasConfig {
        &self.cfg
    }

    /// Acoustic concat of the three taps and the one-hot aligned text. With
    /// `detach` on (the normal setting), neither input lets accent gradients
    /// reach its producer; off exposes the taps to the accent loss.
    pub fn build_inputs(
        &self,
        g: &mut Graph,
        taps: &[NodeId; 3],
        aligned: &[usize],
        detach: bool,
    ) -> Result<(NodeId, NodeId)> {
        let t = aligned.len();
        for tap in taps {
            if g.dim(*tap).0 != t {
                return Err(Error::Shape(format!(
                    "aligned text spans {t} frames, tap has {}",
                    g.dim(*tap).0
                )));
            }
        }
        let cat = g.concat_cols(taps)?;
        if g.dim(cat).1 != self.cfg.d1 {
            return Err(Error::Shape(format!(
                "taps concat to width {}, config says {}",
                g.dim(cat).1,
                self.cfg.d1
            )));
        }
        let x_a = if detach { g.detach(cat) } else { cat };
        let mut onehot = Mat::zeros((t, self.cfg.d2));
        for (row, &id) in aligned.iter().enumerate() {
            if id >= self.cfg.d2 {
                return Err(Error::Shape(format!(
                    "aligned id {id} outside one-hot width {}",
                    self.cfg.d2
                )));
            }
            onehot[(row, id)] = 1.0;
        }
        let x_t = g.input(onehot);
        Ok((x_a, x_t))
    }

    /// Per-space scaled dot product between mapped acoustics and mapped text
    /// anchors, concatenated into a T x N shift.
    pub fn accent_shift(&self, g: &mut Graph, p: &ParamSet, x_a: NodeId, x_t: NodeId) -> Result<NodeId> {
        let scale = (self.cfg.d_k as f64).powf(-0.5);
        let mut cols = Vec::with_capacity(self.cfg.n_spaces);
        for i in 0..self.cfg.n_spaces {
            let wt = g.param(p, self.w_t[i]);
            let wa = g.param(p, self.w_a[i]);
            let v_t = g.matmul(x_t, wt)?;
            let v_a = g.matmul(x_a, wa)?;
            let dots = g.dot_rows(v_a, v_t)?;
            cols.push(g.scale(dots, scale));
        }
        g.concat_cols(&cols)
    }

    /// `Concat(s, x_t W_td)`, T x C.
    pub fn bimodal(&self, g: &mut Graph, p: &ParamSet, x_t: NodeId, shift: NodeId) -> Result<NodeId> {
        let w = g.param(p, self.w_td);
        let v_td = g.matmul(x_t, w)?;
        g.concat_cols(&[shift, v_td])
    }

    /// Attention blocks, optional mean-pool, then the linear stack.
    pub fn classify(
        &self,
        g: &mut Graph,
        p: &ParamSet,
        x_bm: NodeId,
        shift: NodeId,
        level: ArLevel,
    ) -> Result<AccentOutput> {
        let mut x = x_bm;
        for block in &self.classifier {
            x = block.forward(g, p, x)?;
        }
        if level == ArLevel::Utterance {
            x = g.mean_rows(x);
        }
        let pre = self.lin_hidden.apply(g, p, x)?;
        let hidden = g.silu(pre);
        let logits = self.lin_out.apply(g, p, hidden)?;
        Ok(AccentOutput {
            posteriors: g.softmax_rows(logits),
            log_posteriors: g.log_softmax_rows(logits),
            hidden,
            shift,
        })
    }

    /// Full branch forward from taps and aligned text.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &ParamSet,
        taps: &[NodeId; 3],
        aligned: &[usize],
        level: ArLevel,
        detach: bool,
    ) -> Result<AccentOutput> {
        let (x_a, x_t) = self.build_inputs(g, taps, aligned, detach)?;
        let shift = self.accent_shift(g, p, x_a, x_t)?;
        let x_bm = self.bimodal(g, p, x_t, shift)?;
        self.classify(g, p, x_bm, shift, level)
    }

    /// Weighted cross entropy against a single utterance label; frame level
    /// averages the per-frame loss.
    pub fn accent_loss(
        &self,
        g: &mut Graph,
        out: &AccentOutput,
        y_ar: usize,
        class_weights: Option<&[f64]>,
    ) -> Result<NodeId> {
        if y_ar >= self.cfg.n_accents {
            return Err(Error::Shape(format!(
                "accent label {y_ar} outside {} classes",
                self.cfg.n_accents
            )));
        }
        if let Some(w) = class_weights {
            if w.len() != self.cfg.n_accents {
                return Err(Error::Shape(format!(
                    "{} class weights for {} classes",
                    w.len(),
                    self.cfg.n_accents
                )));
            }
        }
        let rows = g.dim(out.log_posteriors).0;
        let weight = class_weights.map_or(1.0, |w| w[y_ar]);
        g.ce_loss(
            out.log_posteriors,
            &vec![y_ar; rows],
            &vec![weight; rows],
            0.0,
        )
    }

    /// Detach, then (for pp and sim) up-project into the fusion width. The
    /// projections live on the ASR side of the boundary and are trained by
    /// the ASR losses alone. `detach` off leaves the branch exposed to the
    /// ASR losses (the no-isolation ablation).
    pub fn make_embedding(
        &self,
        g: &mut Graph,
        p: &ParamSet,
        out: &AccentOutput,
        kind: EmbeddingKind,
        detach: bool,
    ) -> Result<NodeId> {
        let cut = |g: &mut Graph, x: NodeId| if detach { g.detach(x) } else { x };
        match kind {
            EmbeddingKind::Dnn => Ok(cut(g, out.hidden)),
            EmbeddingKind::Pp => {
                let c = cut(g, out.posteriors);
                self.up_pp.apply(g, p, c)
            }
            EmbeddingKind::Sim => {
                let c = cut(g, out.shift);
                self.up_sim.apply(g, p, c)
            }
        }
    }
}
