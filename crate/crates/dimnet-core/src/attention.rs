//! Coarse-grained attention decoder and the four accent-fusion schemes.
//!
//! The decoder is a stack of causal cross-attention layers over the attention
//! encoder's output. A scheme decides where the accent embedding joins: at
//! the encoder input, at the decoder's cross-attention memory, both places,
//! or nowhere.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId, ParamSet};
use crate::nnet::{causal_mask, init_mat, positional_encoding, Block, BlockDims, BlockKind};
use crate::vocab::{BOS_ID, EOS_ID};
use crate::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FusionScheme {
    /// Implicit only: the embedding is ignored everywhere.
    #[serde(rename = "AF_i")]
    AfI,
    /// Implicit plus explicit fusion at the encoder input.
    #[serde(rename = "AF_ie")]
    AfIe,
    /// Implicit plus explicit fusion at the decoder memory.
    #[serde(rename = "AF_id")]
    AfId,
    /// Explicit fusion at both places.
    #[serde(rename = "AF_ied")]
    AfIed,
}

impl FusionScheme {
    pub fn fuses_encoder(self) -> bool {
        matches!(self, Self::AfIe | Self::AfIed)
    }

    pub fn fuses_decoder(self) -> bool {
        matches!(self, Self::AfId | Self::AfIed)
    }

    pub const ALL: [FusionScheme; 4] = [Self::AfI, Self::AfIe, Self::AfId, Self::AfIed];
}

impl fmt::Display for FusionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::AfI => "AF_i",
            Self::AfIe => "AF_ie",
            Self::AfId => "AF_id",
            Self::AfIed => "AF_ied",
        };
        f.write_str(s)
    }
}

impl FromStr for FusionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "AF_i" => Ok(Self::AfI),
            "AF_ie" => Ok(Self::AfIe),
            "AF_id" => Ok(Self::AfId),
            "AF_ied" => Ok(Self::AfIed),
            other => Err(Error::Config(format!(
                "unknown fusion scheme `{other}`; expected AF_i, AF_ie, AF_id, AF_ied"
            ))),
        }
    }
}

/// Route the embedding to its slots: `(encoder slot, decoder slot)`.
/// Explicit schemes require the embedding; `AF_i` ignores one if present.
pub fn apply_scheme(
    scheme: FusionScheme,
    emb: Option<NodeId>,
) -> Result<(Option<NodeId>, Option<NodeId>)> {
    if scheme != FusionScheme::AfI && emb.is_none() {
        return Err(Error::Config(format!(
            "scheme {scheme} fuses an accent embedding but none was provided"
        )));
    }
    let enc = if scheme.fuses_encoder() { emb } else { None };
    let dec = if scheme.fuses_decoder() { emb } else { None };
    Ok((enc, dec))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub dims: BlockDims,
    pub depth: usize,
    pub n_coarse: usize,
    /// Embedding width accepted at the decoder memory; `None` removes the
    /// fusion projection.
    pub emb_width: Option<usize>,
    pub label_smoothing: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            dims: BlockDims::default(),
            depth: 2,
            n_coarse: 43,
            emb_width: None,
            label_smoothing: 0.1,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.depth == 0 {
            return Err(Error::Config("decoder depth must be at least 1".into()));
        }
        if self.n_coarse < 3 {
            return Err(Error::Config("decoder needs bos/eos/unk at least".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} must be in [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

pub struct AttentionBranch {
    cfg: DecoderConfig,
    tok_emb: ParamId,
    layers: Vec<Block>,
    final_gamma: ParamId,
    final_beta: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    /// Projects Concat(x_ae, emb) back to model width for the memory.
    mem_proj: Option<(ParamId, ParamId)>,
}

impl AttentionBranch {
    pub fn new(
        cfg: DecoderConfig,
        prefix: &str,
        params: &mut ParamSet,
        rng: &mut impl Rng,
        init_scale: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dims.d_model;
        let tok_emb = params.add(
            &format!("{prefix}.tok_emb"),
            init_mat(rng, cfg.n_coarse, d, init_scale.max(0.1)),
        );
        let layers = (0..cfg.depth)
            .map(|i| {
                Block::new(
                    BlockKind::DecoderLayer,
                    cfg.dims,
                    &format!("{prefix}.layer{i}"),
                    params,
                    rng,
                    init_scale,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let final_gamma = params.add(&format!("{prefix}.final_ln.gamma"), Mat::from_elem((1, d), 1.0));
        let final_beta = params.add(&format!("{prefix}.final_ln.beta"), Mat::zeros((1, d)));
        let out_w = params.add(&format!("{prefix}.out.w"), init_mat(rng, d, cfg.n_coarse, init_scale));
        let out_b = params.add(&format!("{prefix}.out.b"), Mat::zeros((1, cfg.n_coarse)));
        let mem_proj = match cfg.emb_width {
            Some(e) => Some((
                params.add(&format!("{prefix}.mem_proj.w"), init_mat(rng, d + e, d, init_scale)),
                params.add(&format!("{prefix}.mem_proj.b"), Mat::zeros((1, d))),
            )),
            None => None,
        };
        Ok(Self {
            cfg,
            tok_emb,
            layers,
            final_gamma,
            final_beta,
            out_w,
            out_b,
            mem_proj,
        })
    }

    pub fn cfg(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Build the cross-attention memory, fusing `emb` if present. An
    /// utterance-level embedding (1 row) broadcasts over memory time.
    pub fn fuse_memory(
        &self,
        g: &mut Graph,
        p: &ParamSet,
        x_ae: NodeId,
        emb: Option<NodeId>,
    ) -> Result<NodeId> {
        let Some(e) = emb else { return Ok(x_ae) };
        let Some((w, b)) = self.mem_proj else {
            return Err(Error::Shape(
                "decoder was built without an embedding path".into(),
            ));
        };
        let t = g.dim(x_ae).0;
        let (rows, width) = g.dim(e);
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
        let cat = g.concat_cols(&[x_ae, tiled])?;
        let wn = g.param(p, w);
        let bn = g.param(p, b);
        let proj = g.matmul(cat, wn)?;
        g.add_row(proj, bn)
    }

    /// Teacher-forced decode over a prepared memory; `y_in` must start with
    /// BOS. Returns per-position coarse log-posteriors, one row per input
    /// token.
    pub fn decode_over_memory(
        &self,
        g: &mut Graph,
        p: &ParamSet,
        memory: NodeId,
        y_in: &[usize],
    ) -> Result<NodeId> {
        if y_in.first() != Some(&BOS_ID) {
            return Err(Error::Shape("decoder input must start with BOS".into()));
        }
        let table = g.param(p, self.tok_emb);
        let emb = g.embed_rows(table, y_in)?;
        let pe = g.input(positional_encoding(y_in.len(), self.cfg.dims.d_model));
        let mut x = g.add(emb, pe)?;
        let mask = g.input(causal_mask(y_in.len()));
        for layer in &self.layers {
            x = layer.forward_decoder(g, p, x, memory, mask)?;
        }
        let gamma = g.param(p, self.final_gamma);
        let beta = g.param(p, self.final_beta);
        let x = g.layer_norm(x, gamma, beta)?;
        let w = g.param(p, self.out_w);
        let b = g.param(p, self.out_b);
        let logits = g.matmul(x, w)?;
        let logits = g.add_row(logits, b)?;
        Ok(g.log_softmax_rows(logits))
    }

    pub fn decoder_forward(
        &self,
        g: &mut Graph,
        p: &ParamSet,
        x_ae: NodeId,
        emb: Option<NodeId>,
        y_in: &[usize],
    ) -> Result<NodeId> {
        let memory = self.fuse_memory(g, p, x_ae, emb)?;
        self.decode_over_memory(g, p, memory, y_in)
    }

    /// Mean label-smoothed cross entropy of the shifted targets.
    pub fn attention_loss(
        &self,
        g: &mut Graph,
        log_posteriors: NodeId,
        targets: &[usize],
    ) -> Result<NodeId> {
        g.ce_loss(
            log_posteriors,
            targets,
            &vec![1.0; targets.len()],
            self.cfg.label_smoothing,
        )
    }
}

/// Teacher-forcing convention: input rows see BOS plus the content; each row
/// predicts the next content token, with EOS closing the sequence.
pub fn teacher_io(y_c: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(y_c.len() + 1);
    input.push(BOS_ID);
    input.extend_from_slice(y_c);
    let mut targets = y_c.to_vec();
    targets.push(EOS_ID);
    (input, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;
    use rand_distr::{Distribution, StandardNormal};

    fn small_cfg() -> DecoderConfig {
        DecoderConfig {
            dims: BlockDims {
                d_model: 8,
                ffn: 12,
                heads: 2,
                conv_kernel: 3,
            },
            depth: 2,
            n_coarse: 7,
            emb_width: Some(4),
            label_smoothing: 0.1,
        }
    }

    fn rand_mat(rng: &mut impl Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| {
            let z: f64 = StandardNormal.sample(rng);
            z
        })
    }

    #[test]
    fn scheme_parsing_and_routing_table() {
        for (name, scheme) in [
            ("AF_i", FusionScheme::AfI),
            ("AF_ie", FusionScheme::AfIe),
            ("AF_id", FusionScheme::AfId),
            ("AF_ied", FusionScheme::AfIed),
        ] {
            assert_eq!(name.parse::<FusionScheme>().unwrap(), scheme);
            assert_eq!(scheme.to_string(), name);
        }
        assert!("af_x".parse::<FusionScheme>().is_err());

        let mut g = Graph::new();
        let emb = g.input(Mat::zeros((1, 4)));
        assert_eq!(apply_scheme(FusionScheme::AfI, Some(emb)).unwrap(), (None, None));
        assert_eq!(apply_scheme(FusionScheme::AfI, None).unwrap(), (None, None));
        assert_eq!(
            apply_scheme(FusionScheme::AfIe, Some(emb)).unwrap(),
            (Some(emb), None)
        );
        assert_eq!(
            apply_scheme(FusionScheme::AfId, Some(emb)).unwrap(),
            (None, Some(emb))
        );
        assert_eq!(
            apply_scheme(FusionScheme::AfIed, Some(emb)).unwrap(),
            (Some(emb), Some(emb))
        );
        for scheme in [FusionScheme::AfIe, FusionScheme::AfId, FusionScheme::AfIed] {
            assert!(matches!(apply_scheme(scheme, None), Err(Error::Config(_))));
        }
    }

    #[test]
    fn output_rows_match_input_tokens() {
        let mut rng = crate::rng::stream(41, "att-rows");
        let mut params = ParamSet::new();
        let b = AttentionBranch::new(small_cfg(), "att", &mut params, &mut rng, 1.0).unwrap();
        let x_ae = rand_mat(&mut rng, 6, 8);
        for len in 1..=5usize {
            let mut y_in = vec![BOS_ID];
            y_in.extend((0..len).map(|_| rng.gen_range(3..7)));
            let mut g = Graph::new();
            let mem = g.input(x_ae.clone());
            let lp = b.decoder_forward(&mut g, &params, mem, None, &y_in).unwrap();
            assert_eq!(g.dim(lp), (len + 1, 7));
            for row in g.value(lp).rows() {
                let sum: f64 = row.iter().map(|v| v.exp()).sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
        let mut g = Graph::new();
        let mem = g.input(x_ae);
        assert!(b.decode_over_memory(&mut g, &params, mem, &[3, 4]).is_err());
    }

    #[test]
    fn causal_mask_protects_earlier_positions() {
        let mut rng = crate::rng::stream(42, "att-causal");
        let mut params = ParamSet::new();
        let b = AttentionBranch::new(small_cfg(), "att", &mut params, &mut rng, 1.0).unwrap();
        let x_ae = rand_mat(&mut rng, 5, 8);
        let y1 = [BOS_ID, 3, 4, 5, 6];
        let mut y2 = y1;
        y2[3] = 6;
        let mut g = Graph::new();
        let mem = g.input(x_ae.clone());
        let lp1 = b.decoder_forward(&mut g, &params, mem, None, &y1).unwrap();
        let mem2 = g.input(x_ae);
        let lp2 = b.decoder_forward(&mut g, &params, mem2, None, &y2).unwrap();
        let a = g.value(lp1);
        let c = g.value(lp2);
        assert_eq!(
            a.slice(s![0..3, ..]).to_owned(),
            c.slice(s![0..3, ..]).to_owned(),
            "rows before the perturbed position must be identical"
        );
        assert_ne!(a.slice(s![3.., ..]), c.slice(s![3.., ..]));
    }

    #[test]
    fn fusion_is_live_and_zero_emb_matches_padded_memory() {
        let mut rng = crate::rng::stream(43, "att-fusion");
        let mut params = ParamSet::new();
        let b = AttentionBranch::new(small_cfg(), "att", &mut params, &mut rng, 1.0).unwrap();
        let x_ae = rand_mat(&mut rng, 5, 8);
        let y_in = [BOS_ID, 3, 4];

        let mut g = Graph::new();
        let mem_plain = g.input(x_ae.clone());
        let lp_plain = b
            .decoder_forward(&mut g, &params, mem_plain, None, &y_in)
            .unwrap();
        let mem_e = g.input(x_ae.clone());
        let emb = g.input(rand_mat(&mut rng, 1, 4));
        let lp_fused = b
            .decoder_forward(&mut g, &params, mem_e, Some(emb), &y_in)
            .unwrap();
        assert_ne!(g.value(lp_plain), g.value(lp_fused), "fusion must be live");

        // Zero embedding: the fused memory reduces to the padded projection
        // of the plain features.
        let mem_z = g.input(x_ae.clone());
        let zero_emb = g.input(Mat::zeros((1, 4)));
        let fused_zero = b.fuse_memory(&mut g, &params, mem_z, Some(zero_emb)).unwrap();
        let w = params.value(params.id("att.mem_proj.w").unwrap());
        let top = w.slice(s![0..8, ..]).to_owned();
        let bias = params.value(params.id("att.mem_proj.b").unwrap()).clone();
        let xin = g.input(x_ae);
        let wt = g.input(top);
        let bn = g.input(bias);
        let manual = g.matmul(xin, wt).unwrap();
        let manual = g.add_row(manual, bn).unwrap();
        let diff = g
            .value(fused_zero)
            .iter()
            .zip(g.value(manual).iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff <= 1e-9, "max abs diff {diff}");
    }

    #[test]
    fn loss_values_match_analytic_cases() {
        let mut rng = crate::rng::stream(44, "att-loss");
        let mut params = ParamSet::new();
        let mut cfg = small_cfg();
        cfg.label_smoothing = 0.0;
        let b = AttentionBranch::new(cfg, "att", &mut params, &mut rng, 1.0).unwrap();
        let mut g = Graph::new();
        // Perfect posteriors on targets [3, 1].
        let mut lp = Mat::from_elem((2, 7), f64::NEG_INFINITY);
        lp[(0, 3)] = 0.0;
        lp[(1, 1)] = 0.0;
        let node = g.input(lp);
        let loss = b.attention_loss(&mut g, node, &[3, 1]).unwrap();
        assert_eq!(g.scalar(loss), 0.0);

        let mut params = ParamSet::new();
        let b = AttentionBranch::new(small_cfg(), "att", &mut params, &mut rng, 1.0).unwrap();
        let uniform = g.input(Mat::from_elem((3, 7), -(7f64.ln())));
        let loss = b.attention_loss(&mut g, uniform, &[3, 4, 1]).unwrap();
        assert!((g.scalar(loss) - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn teacher_io_shifts_and_terminates() {
        let (input, targets) = teacher_io(&[5, 3, 4]);
        assert_eq!(input, vec![BOS_ID, 5, 3, 4]);
        assert_eq!(targets, vec![5, 3, 4, EOS_ID]);
        let (input, targets) = teacher_io(&[]);
        assert_eq!(input, vec![BOS_ID]);
        assert_eq!(targets, vec![EOS_ID]);
    }

    #[test]
    fn decoder_loss_gradients_match_finite_differences() {
        let mut rng = crate::rng::stream(45, "att-fd");
        let mut params = ParamSet::new();
        let b = AttentionBranch::new(small_cfg(), "att", &mut params, &mut rng, 1.0).unwrap();
        let x_id = params.add("x_ae", rand_mat(&mut rng, 4, 8));
        let emb_id = params.add("emb", rand_mat(&mut rng, 1, 4));
        let (y_in, targets) = teacher_io(&[3, 5, 4]);
        let err = crate::nnet::grad_check(&mut params, 1e-6, |g, p| {
            let x = g.param(p, x_id);
            let e = g.param(p, emb_id);
            let lp = b.decoder_forward(g, p, x, Some(e), &y_in)?;
            b.attention_loss(g, lp, &targets)
        })
        .unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }
}
