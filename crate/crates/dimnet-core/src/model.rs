//! The composed network: triple encoder, CTC head, accent branch, attention
//! decoder, and the batch objective tying them together.

use serde::{Deserialize, Serialize};

use crate::accent::{AccentBranch, AccentOutput, ArLevel, EmbeddingKind, LasasConfig};
use crate::attention::{apply_scheme, AttentionBranch, DecoderConfig, FusionScheme};
use crate::ctc::{feasible, greedy_frames, regularize_or_silence};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId, ParamSet};
use crate::nnet::{init_mat, BlockDims};
use crate::synthgen::Utterance;
use crate::triple_encoder::{EncoderConfig, SharedEncoderOutput, TripleEncoder};
use crate::vocab::BLANK_ID;
use crate::Mat;

/// Which unit inventory the CTC and accent branches run on. Two-granularity
/// keeps them on fine units while the decoder stays coarse; coarse-only
/// collapses everything onto the coarse inventory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitsMode {
    TwoGranularity,
    CoarseOnly,
}

impl std::fmt::Display for UnitsMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::TwoGranularity => "two_granularity",
            Self::CoarseOnly => "coarse_only",
        })
    }
}

impl std::str::FromStr for UnitsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_granularity" => Ok(Self::TwoGranularity),
            "coarse_only" => Ok(Self::CoarseOnly),
            other => Err(Error::Config(format!("unknown units mode `{other}`"))),
        }
    }
}

/// Branch weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_att: f64,
    pub w_ctc: f64,
    pub w_ar: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_att: 0.3,
            w_ctc: 0.3,
            w_ar: 0.4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_att, self.w_ctc, self.w_ar];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if ws.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feat_dim: usize,
    /// Fine inventory size including blank and silence.
    pub n_fine: usize,
    /// Coarse inventory size including bos, eos, unk.
    pub n_coarse: usize,
    pub n_accents: usize,
    pub dims: BlockDims,
    pub shared_depth: usize,
    pub ctc_depth: usize,
    pub att_depth: usize,
    pub decoder_depth: usize,
    pub subsample_factor: usize,
    pub scheme: FusionScheme,
    pub emb_kind: EmbeddingKind,
    pub ar_level: ArLevel,
    pub units: UnitsMode,
    /// Gradient isolation between the accent branch and its inputs.
    pub detach: bool,
    pub label_smoothing: f64,
    pub n_spaces: usize,
    pub bimodal_width: usize,
    pub d_k: usize,
    pub classifier_blocks: usize,
    pub classifier_hidden: usize,
    pub emb_width: usize,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: 16,
            n_fine: 12,
            n_coarse: 40,
            n_accents: 4,
            dims: BlockDims::default(),
            shared_depth: 3,
            ctc_depth: 2,
            att_depth: 2,
            decoder_depth: 2,
            subsample_factor: 2,
            scheme: FusionScheme::AfIed,
            emb_kind: EmbeddingKind::Pp,
            ar_level: ArLevel::Utterance,
            units: UnitsMode::TwoGranularity,
            detach: true,
            label_smoothing: 0.1,
            n_spaces: 8,
            bimodal_width: 64,
            d_k: 32,
            classifier_blocks: 1,
            classifier_hidden: 64,
            emb_width: 64,
            init_scale: 1.0,
        }
    }
}

impl ModelConfig {
    /// Vocabulary the CTC head emits over; id 0 is the blank in both modes
    /// (the coarse bos never occurs inside a transcript).
    pub fn ctc_vocab(&self) -> usize {
        match self.units {
            UnitsMode::TwoGranularity => self.n_fine,
            UnitsMode::CoarseOnly => self.n_coarse,
        }
    }

    /// Width of the fused accent embedding under the configured kind.
    pub fn fusion_width(&self) -> usize {
        self.lasas_config().embedding_width(self.emb_kind)
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            in_dim: self.feat_dim,
            dims: self.dims,
            shared_depth: self.shared_depth,
            ctc_depth: self.ctc_depth,
            att_depth: self.att_depth,
            subsample_factor: self.subsample_factor,
            emb_width: self.scheme.fuses_encoder().then(|| self.fusion_width()),
        }
    }

    pub fn lasas_config(&self) -> LasasConfig {
        LasasConfig {
            n_spaces: self.n_spaces,
            bimodal_width: self.bimodal_width,
            d_k: self.d_k,
            d1: 3 * self.dims.d_model,
            d2: self.ctc_vocab(),
            n_accents: self.n_accents,
            level: self.ar_level,
            classifier_blocks: self.classifier_blocks,
            classifier_heads: self.dims.heads,
            classifier_hidden: self.classifier_hidden,
            emb_width: self.emb_width,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            dims: self.dims,
            depth: self.decoder_depth,
            n_coarse: self.n_coarse,
            emb_width: self.scheme.fuses_decoder().then(|| self.fusion_width()),
            label_smoothing: self.label_smoothing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fine < 3 {
            return Err(Error::Config("n_fine needs blank, silence, content".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must be in [0, 1)".into()));
        }
        if self.init_scale < 0.0 {
            return Err(Error::Config("init_scale must be nonnegative".into()));
        }
        self.encoder_config().validate()?;
        self.lasas_config().validate()?;
        self.decoder_config().validate()
    }
}

pub struct DimNet {
    cfg: ModelConfig,
    pub params: ParamSet,
    pub encoder: TripleEncoder,
    ctc_w: ParamId,
    ctc_b: ParamId,
    pub accent: AccentBranch,
    pub decoder: AttentionBranch,
}

/// Everything the forward pass produces for one utterance short of teacher
/// forcing: CTC posteriors, the regularized alignment, the accent output,
/// and the fused decoder memory.
pub struct Encoded {
    pub shared: SharedEncoderOutput,
    /// Subsampled-frame log-posteriors over the CTC vocabulary.
    pub ctc_logp: NodeId,
    pub aligned: Vec<usize>,
    /// True when the greedy pass emitted only blanks and the alignment fell
    /// back to silence.
    pub silence_fallback: bool,
    pub accent: AccentOutput,
    pub x_ae: NodeId,
    /// Cross-attention memory after any decoder-side fusion.
    pub memory: NodeId,
}

/// One utterance of a training batch. `accent` of `None` masks the accent
/// loss (the non-accent-data case); `aligned` overrides the greedy alignment
/// when a caller needs the alignment frozen.
pub struct BatchItem<'a> {
    pub frames: &'a Mat,
    pub y_f: &'a [usize],
    pub y_c: &'a [usize],
    pub accent: Option<usize>,
    pub aligned: Option<Vec<usize>>,
}

impl<'a> From<&'a Utterance> for BatchItem<'a> {
    fn from(u: &'a Utterance) -> Self {
        Self {
            frames: &u.frames,
            y_f: &u.y_f,
            y_c: &u.y_c,
            accent: Some(u.accent),
            aligned: None,
        }
    }
}

pub struct BatchLosses {
    pub combined: NodeId,
    /// Batch-mean branch values, as combined (accent over unmasked items).
    pub att: f64,
    pub ctc: f64,
    pub ar: f64,
    pub n_ar: usize,
    /// Utterances whose CTC term was dropped as alignment-infeasible.
    pub skipped_ctc: usize,
}

impl DimNet {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = crate::rng::stream(seed, "model/init");
        let encoder = TripleEncoder::new(cfg.encoder_config(), "enc", &mut params, &mut rng, cfg.init_scale)?;
        let v = cfg.ctc_vocab();
        let d = cfg.dims.d_model;
        let ctc_w = params.add("ctc_head.w", init_mat(&mut rng, d, v, cfg.init_scale));
        let ctc_b = params.add("ctc_head.b", Mat::zeros((1, v)));
        let accent = AccentBranch::new(cfg.lasas_config(), "ar", "fusion", &mut params, &mut rng, cfg.init_scale)?;
        let decoder = AttentionBranch::new(cfg.decoder_config(), "asr", &mut params, &mut rng, cfg.init_scale)?;
        Ok(Self {
            cfg,
            params,
            encoder,
            ctc_w,
            ctc_b,
            accent,
            decoder,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encode(&self, g: &mut Graph, frames: &Mat) -> Result<Encoded> {
        self.encode_with_alignment(g, frames, None)
    }

    /// Forward pass with an optional frozen alignment. The greedy alignment
    /// is data, not a differentiable path, so freezing it preserves the
    /// gradient semantics while making the loss a smooth function of the
    /// parameters (finite differencing relies on this).
    pub fn encode_with_alignment(
        &self,
        g: &mut Graph,
        frames: &Mat,
        aligned: Option<&[usize]>,
    ) -> Result<Encoded> {
        let shared = self.encoder.shared_forward(g, &self.params, frames)?;
        let x_ce = self.encoder.ctc_encode(g, &self.params, shared.x_se)?;
        let w = g.param(&self.params, self.ctc_w);
        let b = g.param(&self.params, self.ctc_b);
        let logits = g.matmul(x_ce, w)?;
        let logits = g.add_row(logits, b)?;
        let ctc_logp = g.log_softmax_rows(logits);

        let (aligned, silence_fallback) = match aligned {
            Some(a) => (a.to_vec(), false),
            None => {
                let greedy = greedy_frames(g.value(ctc_logp));
                regularize_or_silence(&greedy, BLANK_ID, crate::vocab::SILENCE_ID)
            }
        };
        let accent = self.accent.forward(
            g,
            &self.params,
            &shared.taps,
            &aligned,
            self.cfg.ar_level,
            self.cfg.detach,
        )?;
        let emb = if self.cfg.scheme == FusionScheme::AfI {
            None
        } else {
            Some(self.accent.make_embedding(g, &self.params, &accent, self.cfg.emb_kind, self.cfg.detach)?)
        };
        let (enc_emb, dec_emb) = apply_scheme(self.cfg.scheme, emb)?;
        let x_ae = self.encoder.att_encode(g, &self.params, shared.x_se, enc_emb)?;
        let memory = self.decoder.fuse_memory(g, &self.params, x_ae, dec_emb)?;
        Ok(Encoded {
            shared,
            ctc_logp,
            aligned,
            silence_fallback,
            accent,
            x_ae,
            memory,
        })
    }

    /// Teacher-forced decoder pass over an encoded utterance.
    pub fn decoder_logp(&self, g: &mut Graph, enc: &Encoded, y_in: &[usize]) -> Result<NodeId> {
        self.decoder.decode_over_memory(g, &self.params, enc.memory, y_in)
    }

    /// Transcript labels the CTC branch trains on under the configured units.
    pub fn ctc_labels<'a>(&self, y_f: &'a [usize], y_c: &'a [usize]) -> &'a [usize] {
        match self.cfg.units {
            UnitsMode::TwoGranularity => y_f,
            UnitsMode::CoarseOnly => y_c,
        }
    }

    /// Combined objective over a batch. Branch means are uniform over the
    /// items carrying each loss; an infeasibly short utterance drops its CTC
    /// term rather than poisoning the batch with an infinite loss.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        batch: &[BatchItem<'_>],
        weights: &LossWeights,
        class_weights: Option<&[f64]>,
    ) -> Result<BatchLosses> {
        weights.validate()?;
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut att_terms = Vec::with_capacity(batch.len());
        let mut ctc_terms = Vec::with_capacity(batch.len());
        let mut ar_terms = Vec::new();
        let mut skipped_ctc = 0;
        for item in batch {
            let enc = self.encode_with_alignment(g, item.frames, item.aligned.as_deref())?;
            let labels = self.ctc_labels(item.y_f, item.y_c);
            let t = g.dim(enc.ctc_logp).0;
            if feasible(t, labels) {
                ctc_terms.push(g.ctc_loss(enc.ctc_logp, labels, BLANK_ID)?);
            } else {
                skipped_ctc += 1;
            }
            let (y_in, targets) = crate::attention::teacher_io(item.y_c);
            let logp = self.decoder_logp(g, &enc, &y_in)?;
            att_terms.push(self.decoder.attention_loss(g, logp, &targets)?);
            if let Some(label) = item.accent {
                ar_terms.push(self.accent.accent_loss(g, &enc.accent, label, class_weights)?);
            }
        }
        let n_ar = ar_terms.len();
        let att = mean_node(g, &att_terms);
        let ctc = mean_node(g, &ctc_terms);
        let ar = mean_node(g, &ar_terms);
        for (name, node) in [("attention", att), ("ctc", ctc), ("accent", ar)] {
            if !g.scalar(node).is_finite() {
                return Err(Error::Numerics(format!("{name} loss is not finite")));
            }
        }
        let wa = g.scale(att, weights.w_att);
        let wc = g.scale(ctc, weights.w_ctc);
        let wr = g.scale(ar, weights.w_ar);
        let partial = g.add(wa, wc)?;
        let combined = g.add(partial, wr)?;
        Ok(BatchLosses {
            combined,
            att: g.scalar(att),
            ctc: g.scalar(ctc),
            ar: g.scalar(ar),
            n_ar,
            skipped_ctc,
        })
    }
}

/// Mean of scalar nodes; an empty list contributes a constant zero.
fn mean_node(g: &mut Graph, terms: &[NodeId]) -> NodeId {
    match terms {
        [] => g.input(Mat::zeros((1, 1))),
        [one] => *one,
        [first, rest @ ..] => {
            let mut acc = *first;
            for t in rest {
                acc = g.add(acc, *t).expect("scalar terms");
            }
            g.scale(acc, 1.0 / terms.len() as f64)
        }
    }
}

/// One named finite-difference comparison from [`gradient_suite`].
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: &'static str,
    /// Worst relative error across every scalar parameter of the setup.
    pub rel_err: f64,
}

/// Central-difference oracle over the whole backward pass: each block kind in
/// isolation, the accent branch with its cross entropy, the decoder with its
/// smoothed cross entropy, and the combined objective on a two-utterance
/// batch with every isolation boundary open so the sweep reaches every
/// parameter. Every scalar is perturbed; nothing is sampled.
pub fn gradient_suite() -> Result<Vec<GradReport>> {
    use crate::nnet::{causal_mask, grad_check, Block, BlockKind};

    let mut out = Vec::new();

    let dims = BlockDims {
        d_model: 6,
        ffn: 8,
        heads: 2,
        conv_kernel: 3,
    };
    for (name, kind) in [
        ("block/feed_forward", BlockKind::FeedForward),
        ("block/self_attention", BlockKind::SelfAttention),
        ("block/conv_augmented", BlockKind::ConvAugmented),
        ("block/decoder_layer", BlockKind::DecoderLayer),
    ] {
        let mut rng = crate::rng::stream(3, "suite/blocks");
        let mut params = ParamSet::new();
        let block = Block::new(kind, dims, "b", &mut params, &mut rng, 1.0)?;
        let x_id = params.add("x", init_mat(&mut rng, 5, 6, 1.0));
        let mem_id = params.add("mem", init_mat(&mut rng, 4, 6, 1.0));
        let rel_err = grad_check(&mut params, 1e-6, |g, p| {
            let x = g.param(p, x_id);
            let y = if kind == BlockKind::DecoderLayer {
                let mem = g.param(p, mem_id);
                let mask = g.input(causal_mask(5));
                block.forward_decoder(g, p, x, mem, mask)?
            } else {
                block.forward(g, p, x)?
            };
            let sq = g.dot_rows(y, y)?;
            Ok(g.mean_rows(sq))
        })?;
        out.push(GradReport { name, rel_err });
    }

    {
        let cfg = LasasConfig {
            n_spaces: 2,
            bimodal_width: 8,
            d_k: 4,
            d1: 6,
            d2: 5,
            n_accents: 3,
            level: ArLevel::Utterance,
            classifier_blocks: 1,
            classifier_heads: 2,
            classifier_hidden: 6,
            emb_width: 7,
        };
        let mut rng = crate::rng::stream(38, "suite/lasas");
        let mut params = ParamSet::new();
        let branch = AccentBranch::new(cfg, "ar", "fusion", &mut params, &mut rng, 1.0)?;
        let taps: Vec<Mat> = (0..3).map(|_| init_mat(&mut rng, 3, 2, 1.0)).collect();
        let aligned = [1usize, 2, 3];
        let rel_err = grad_check(&mut params, 1e-6, |g, p| {
            let taps = [
                g.input(taps[0].clone()),
                g.input(taps[1].clone()),
                g.input(taps[2].clone()),
            ];
            let branch_out = branch.forward(g, p, &taps, &aligned, ArLevel::Utterance, true)?;
            branch.accent_loss(g, &branch_out, 2, Some(&[1.0, 1.0, 1.7]))
        })?;
        out.push(GradReport {
            name: "lasas/accent_ce",
            rel_err,
        });
    }

    {
        let cfg = DecoderConfig {
            dims: BlockDims {
                d_model: 8,
                ffn: 12,
                heads: 2,
                conv_kernel: 3,
            },
            depth: 1,
            n_coarse: 7,
            emb_width: Some(4),
            label_smoothing: 0.1,
        };
        let mut rng = crate::rng::stream(45, "suite/decoder");
        let mut params = ParamSet::new();
        let branch = AttentionBranch::new(cfg, "att", &mut params, &mut rng, 1.0)?;
        let x_id = params.add("x_ae", init_mat(&mut rng, 4, 8, 1.0));
        let emb_id = params.add("emb", init_mat(&mut rng, 1, 4, 1.0));
        let (y_in, targets) = crate::attention::teacher_io(&[3, 5, 4]);
        let rel_err = grad_check(&mut params, 1e-6, |g, p| {
            let x = g.param(p, x_id);
            let e = g.param(p, emb_id);
            let lp = branch.decoder_forward(g, p, x, Some(e), &y_in)?;
            branch.attention_loss(g, lp, &targets)
        })?;
        out.push(GradReport {
            name: "decoder/smoothed_ce",
            rel_err,
        });
    }

    {
        let cfg = ModelConfig {
            feat_dim: 5,
            n_fine: 7,
            n_coarse: 9,
            n_accents: 3,
            dims: BlockDims {
                d_model: 8,
                ffn: 12,
                heads: 2,
                conv_kernel: 3,
            },
            shared_depth: 1,
            ctc_depth: 1,
            att_depth: 1,
            decoder_depth: 1,
            subsample_factor: 2,
            scheme: FusionScheme::AfIed,
            emb_kind: EmbeddingKind::Pp,
            ar_level: ArLevel::Utterance,
            units: UnitsMode::TwoGranularity,
            detach: false,
            label_smoothing: 0.1,
            n_spaces: 2,
            bimodal_width: 8,
            d_k: 4,
            classifier_blocks: 1,
            classifier_hidden: 6,
            emb_width: 5,
            init_scale: 0.5,
        };
        let mut m = DimNet::new(cfg, 7)?;
        let mut rng = crate::rng::stream(5, "suite/batch");
        let frames = [init_mat(&mut rng, 8, 5, 1.0), init_mat(&mut rng, 10, 5, 1.0)];
        let y_f = [vec![2usize, 3], vec![3, 2, 4]];
        let y_c = [vec![3usize, 4], vec![4, 5, 3]];

        // Freeze the alignments at their current greedy values: the argmax
        // is data to the loss, not a differentiated path, so the sweep must
        // probe the same function the backward pass saw.
        let mut aligned = Vec::new();
        for f in &frames {
            let mut g = Graph::new();
            aligned.push(m.encode(&mut g, f)?.aligned);
        }
        let batch = |aligned: &[Vec<usize>]| -> Vec<BatchItem<'_>> {
            (0..2)
                .map(|i| BatchItem {
                    frames: &frames[i],
                    y_f: &y_f[i],
                    y_c: &y_c[i],
                    accent: Some(i),
                    aligned: Some(aligned[i].clone()),
                })
                .collect()
        };
        let w = LossWeights::default();

        let mut g = Graph::new();
        m.params.zero_grads();
        let losses = m.batch_loss(&mut g, &batch(&aligned), &w, None)?;
        g.backward(losses.combined, 1.0, &mut m.params);
        let analytic: Vec<Mat> = m.params.ids().map(|id| m.params.grad(id).clone()).collect();

        let eps = 1e-5;
        let mut worst = 0.0f64;
        let ids: Vec<_> = m.params.ids().collect();
        for (k, &id) in ids.iter().enumerate() {
            let (rows, cols) = m.params.value(id).dim();
            for r in 0..rows {
                for c in 0..cols {
                    let orig = m.params.value(id)[(r, c)];
                    let eval = |v: f64, m: &mut DimNet| -> Result<f64> {
                        m.params.value_mut(id)[(r, c)] = v;
                        let mut g = Graph::new();
                        let losses = m.batch_loss(&mut g, &batch(&aligned), &w, None)?;
                        Ok(g.scalar(losses.combined))
                    };
                    let up = eval(orig + eps, &mut m)?;
                    let down = eval(orig - eps, &mut m)?;
                    m.params.value_mut(id)[(r, c)] = orig;
                    let numeric = (up - down) / (2.0 * eps);
                    let a = analytic[k][(r, c)];
                    let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
                    worst = worst.max(rel);
                }
            }
        }
        out.push(GradReport {
            name: "model/combined_batch",
            rel_err: worst,
        });
    }

    Ok(out)
}
