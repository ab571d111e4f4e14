//! Two-pass inference: autoregressive coarse beam search, then CTC rescoring
//! of lexicon-expanded hypotheses with optional language model scores.

use std::path::Path;

use crate::ctc::ctc_score;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{DimNet, Encoded};
use crate::vocab::{Lexicon, UnitInventory, BLANK_ID, BOS_ID, EOS_ID};
use crate::Mat;

/// Scores the next coarse token given a BOS-prefixed prefix.
pub trait StepScorer {
    fn vocab(&self) -> usize;
    /// One log-probability per coarse token; rows of the decoder output.
    fn step(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// Decodes against a frozen model by replaying the prefix over a cached
/// cross-attention memory. Each step runs in a fresh graph, so the cost is
/// quadratic in output length but memory stays bounded.
pub struct ModelScorer<'a> {
    model: &'a DimNet,
    memory: Mat,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a DimNet, g: &Graph, enc: &Encoded) -> Self {
        Self {
            model,
            memory: g.value(enc.memory).clone(),
        }
    }

    pub fn from_frames(model: &'a DimNet, frames: &Mat) -> Result<Self> {
        let mut g = Graph::new();
        let enc = model.encode(&mut g, frames)?;
        Ok(Self::new(model, &g, &enc))
    }

    /// Conventional output cap for this utterance's memory length.
    pub fn max_len(&self) -> usize {
        2 * self.memory.dim().0 + 5
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab(&self) -> usize {
        self.model.cfg().n_coarse
    }

    fn step(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mem = g.input(self.memory.clone());
        let lp = self
            .model
            .decoder
            .decode_over_memory(&mut g, &self.model.params, mem, prefix)?;
        let vals = g.value(lp);
        Ok(vals.row(vals.dim().0 - 1).to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Content tokens only, no bos or eos.
    pub y_c: Vec<usize>,
    pub att_logp: f64,
    /// Fine-side CTC score; negative infinity marks an unusable expansion.
    pub ctc_logp: f64,
    pub lm_logp: f64,
}

impl Hypothesis {
    pub fn total(&self, w1: f64, w2: f64, w3: f64) -> f64 {
        w1 * self.att_logp + w2 * self.ctc_logp + w3 * self.lm_logp
    }
}

/// Sort by score descending, breaking ties by token-id lexicographic order
/// of the sequence (a prefix sorts before its extensions).
fn sort_hyps<T>(hyps: &mut [(Vec<usize>, f64, T)]) {
    hyps.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then_with(|| a.0.cmp(&b.0))
    });
}

/// Standard beam search over coarse tokens: BOS start, EOS terminate, and a
/// hard length cap that force-terminates surviving prefixes. EOS candidates
/// compete for beam slots in the same pruning as content expansions, which
/// makes beam 1 exactly the greedy path. Returns up to `beam` hypotheses
/// sorted by attention score.
pub fn beam_search(
    scorer: &mut dyn StepScorer,
    beam: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::Config("beam must be at least 1".into()));
    }
    let vocab = scorer.vocab();
    // (BOS-prefixed sequence, accumulated log-prob, ends with eos)
    let mut active: Vec<(Vec<usize>, f64, bool)> = vec![(vec![BOS_ID], 0.0, false)];
    let mut finished: Vec<(Vec<usize>, f64, bool)> = Vec::new();
    while !active.is_empty() {
        let mut candidates: Vec<(Vec<usize>, f64, bool)> = Vec::new();
        for (prefix, logp, _) in &active {
            let row = scorer.step(prefix)?;
            if row.len() != vocab {
                return Err(Error::Shape(format!(
                    "scorer returned {} log-probs for vocab {vocab}",
                    row.len()
                )));
            }
            if prefix.len() - 1 >= max_len {
                finished.push((prefix.clone(), logp + row[EOS_ID], true));
                continue;
            }
            for (v, lp) in row.iter().enumerate() {
                if v == BOS_ID {
                    continue;
                }
                if v == EOS_ID {
                    candidates.push((prefix.clone(), logp + lp, true));
                } else {
                    let mut next = prefix.clone();
                    next.push(v);
                    candidates.push((next, logp + lp, false));
                }
            }
        }
        sort_hyps(&mut candidates);
        candidates.truncate(beam);
        let (done, open): (Vec<_>, Vec<_>) = candidates.into_iter().partition(|c| c.2);
        finished.extend(done);
        active = open;
    }
    sort_hyps(&mut finished);
    finished.truncate(beam);
    Ok(finished
        .into_iter()
        .map(|(seq, logp, _)| Hypothesis {
            y_c: seq[1..].to_vec(),
            att_logp: logp,
            ctc_logp: 0.0,
            lm_logp: 0.0,
        })
        .collect())
}

/// Language model interface; scores must be nonpositive and deterministic.
pub trait LmScorer {
    fn score(&self, y_c: &[usize]) -> f64;
}

/// The reference scorer: every content token and the closing eos are uniform
/// over the non-bos vocabulary.
pub struct UniformLm {
    pub n_coarse: usize,
}

impl LmScorer for UniformLm {
    fn score(&self, y_c: &[usize]) -> f64 {
        -((y_c.len() + 1) as f64) * ((self.n_coarse - 1) as f64).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RescoreWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl Default for RescoreWeights {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 0.3,
            w3: 0.0,
        }
    }
}

/// The declared tuning grid: attention weight fixed at 1, CTC weight swept
/// coarsely, LM weight over a few light settings.
pub fn weight_grid() -> Vec<RescoreWeights> {
    let mut grid = Vec::new();
    for w2_tenths in 0..=10 {
        for w3 in [0.0, 0.1, 0.3] {
            grid.push(RescoreWeights {
                w1: 1.0,
                w2: w2_tenths as f64 / 10.0,
                w3,
            });
        }
    }
    grid
}

pub struct Rescored {
    pub best: Hypothesis,
    /// Index of the winner in the first-pass list.
    pub best_index: usize,
    /// Every hypothesis with its ctc and lm scores filled, first-pass order.
    pub scored: Vec<Hypothesis>,
    /// Combined score per hypothesis, first-pass order.
    pub totals: Vec<f64>,
    /// Hypotheses whose expansion hit a lexicon miss.
    pub misses: usize,
    /// Every expansion was unusable; ranking fell back to attention scores.
    pub fallback: bool,
}

/// Second pass with a caller-chosen expansion from coarse hypotheses to the
/// CTC unit space. Infeasible or unexpandable hypotheses score negative
/// infinity and can only win through the attention fallback.
pub fn rescore_with<F>(
    hyps: &[Hypothesis],
    ctc_logp: &Mat,
    weights: RescoreWeights,
    lm: &dyn LmScorer,
    expand: F,
) -> Result<Rescored>
where
    F: Fn(&[usize]) -> Result<Vec<usize>>,
{
    if hyps.is_empty() {
        return Err(Error::Shape("no hypotheses to rescore".into()));
    }
    if weights.w1 < 0.0 || weights.w2 < 0.0 || weights.w3 < 0.0 {
        return Err(Error::Config("rescoring weights must be nonnegative".into()));
    }
    let mut scored = Vec::with_capacity(hyps.len());
    let mut misses = 0usize;
    for h in hyps {
        let mut h = h.clone();
        h.lm_logp = lm.score(&h.y_c);
        h.ctc_logp = match expand(&h.y_c) {
            Ok(y_f) => ctc_score(ctc_logp, &y_f, BLANK_ID)?,
            Err(Error::LexiconMiss(_)) => {
                misses += 1;
                f64::NEG_INFINITY
            }
            Err(e) => return Err(e),
        };
        scored.push(h);
    }
    let fallback = scored.iter().all(|h| h.ctc_logp == f64::NEG_INFINITY);
    let totals: Vec<f64> = scored
        .iter()
        .map(|h| {
            if fallback {
                h.att_logp
            } else {
                h.total(weights.w1, weights.w2, weights.w3)
            }
        })
        .collect();
    // Strict comparison keeps the earliest (best first-pass) hypothesis on
    // ties, so w2 = w3 = 0 reduces exactly to the first pass.
    let mut best_index = 0;
    for (i, t) in totals.iter().enumerate() {
        if *t > totals[best_index] {
            best_index = i;
        }
    }
    Ok(Rescored {
        best: scored[best_index].clone(),
        best_index,
        scored,
        totals,
        misses,
        fallback,
    })
}

/// Lexicon-expansion rescoring over fine units (the two-granularity path).
pub fn two_granularity_rescore(
    hyps: &[Hypothesis],
    ctc_logp: &Mat,
    inv: &UnitInventory,
    lexicon: &Lexicon,
    weights: RescoreWeights,
    lm: &dyn LmScorer,
) -> Result<Rescored> {
    rescore_with(hyps, ctc_logp, weights, lm, |y_c| {
        lexicon.expand_to_fine(inv, y_c)
    })
}

/// One decoded utterance for the n-best report.
pub struct NbestRecord {
    pub utt_id: String,
    pub best: Vec<usize>,
    pub hyps: Vec<Hypothesis>,
    pub totals: Vec<f64>,
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::Value::Null
    }
}

/// JSON-lines n-best output; non-finite scores serialize as null.
pub fn write_nbest_jsonl(path: &Path, records: &[NbestRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let nbest: Vec<serde_json::Value> = r
            .hyps
            .iter()
            .zip(&r.totals)
            .map(|(h, t)| {
                serde_json::json!({
                    "y_c": h.y_c,
                    "att_logp": finite_or_null(h.att_logp),
                    "ctc_logp": finite_or_null(h.ctc_logp),
                    "lm_logp": finite_or_null(h.lm_logp),
                    "total": finite_or_null(*t),
                })
            })
            .collect();
        let line = serde_json::json!({
            "utt_id": r.utt_id,
            "best": r.best,
            "nbest": nbest,
        });
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// JSON-lines accent output: `utt_id`, posterior row, argmax.
pub fn write_accent_jsonl(path: &Path, records: &[(String, Vec<f64>, usize)]) -> Result<()> {
    let mut out = String::new();
    for (utt_id, posteriors, argmax) in records {
        let line = serde_json::json!({
            "utt_id": utt_id,
            "posteriors": posteriors,
            "argmax": argmax,
        });
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
