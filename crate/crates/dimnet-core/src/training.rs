//! Multi-task training: warmup Adam over the combined objective, per-epoch
//! dev metrics, checkpoint-preserving divergence handling, and the ablation
//! switchboard.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attention::FusionScheme;
use crate::decoding::{
    beam_search, rescore_with, two_granularity_rescore, Hypothesis, LmScorer, ModelScorer,
    RescoreWeights, Rescored, UniformLm,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamSet};
use crate::metrics::{accent_accuracy, corpus_error_rate};
use crate::model::{BatchItem, DimNet, LossWeights, ModelConfig, UnitsMode};
use crate::nnet::{Adam, AdamConfig};
use crate::synthgen::{GeneratedCorpus, Utterance};
use crate::vocab::{Lexicon, UnitInventory};
use crate::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    /// Off collapses the branch encoders to depth zero, so the CTC head and
    /// the decoder both read the shared encoder output directly.
    pub triple_encoder: bool,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Fraction of training utterances whose accent label is withheld from
    /// the accent loss; the designation is fixed per seed, not per epoch.
    pub accent_mask_fraction: f64,
    /// Per-accent weights for the accent loss, `None` for uniform.
    pub class_weights: Option<Vec<f64>>,
    /// Beam width for the per-epoch dev decode.
    pub dev_beam: usize,
    /// Beam width when collecting n-best lists for rescoring.
    pub rescore_beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            triple_encoder: true,
            seed: 0,
            epochs: 8,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            accent_mask_fraction: 0.0,
            class_weights: None,
            dev_beam: 4,
            rescore_beam: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.accent_mask_fraction) {
            return Err(Error::Config(format!(
                "accent mask fraction {} outside [0, 1]",
                self.accent_mask_fraction
            )));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.model.n_accents {
                return Err(Error::Config(format!(
                    "{} class weights for {} accents",
                    w.len(),
                    self.model.n_accents
                )));
            }
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::Config(
                    "class weights must be finite and nonnegative".into(),
                ));
            }
        }
        if self.dev_beam == 0 || self.rescore_beam == 0 {
            return Err(Error::Config("beam widths must be at least 1".into()));
        }
        Ok(())
    }

    /// Model configuration with the encoder switchboard applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut cfg = self.model.clone();
        if !self.triple_encoder {
            cfg.ctc_depth = 0;
            cfg.att_depth = 0;
        }
        cfg
    }
}

/// Weighted sum of the branch losses.
pub fn combine_losses(l_att: f64, l_ctc: f64, l_ar: f64, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    for (name, v) in [("attention", l_att), ("ctc", l_ctc), ("accent", l_ar)] {
        if !v.is_finite() {
            return Err(Error::Numerics(format!("{name} loss is not finite")));
        }
    }
    Ok(weights.w_att * l_att + weights.w_ctc * l_ctc + weights.w_ar * l_ar)
}

/// Inverse-frequency accent weights, normalized so a balanced set maps to
/// all ones. Absent classes get weight zero.
pub fn inverse_frequency_weights(utts: &[Utterance], n_accents: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_accents];
    for u in utts {
        if u.accent < n_accents {
            counts[u.accent] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                total as f64 / (n_accents as f64 * c as f64)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_att: f64,
    pub l_ctc: f64,
    pub l_ar: f64,
    pub dev_wer: f64,
    pub dev_ar_acc: f64,
    pub skipped_ctc: usize,
}

pub struct TrainOutcome {
    pub model: DimNet,
    pub log: Vec<EpochRecord>,
    /// Set when training aborted on a non-finite loss or gradient; the model
    /// holds the last end-of-epoch parameters (or the initial ones).
    pub divergence: Option<String>,
}

fn snapshot(params: &ParamSet) -> Vec<Mat> {
    params.ids().map(|id| params.value(id).clone()).collect()
}

fn restore(params: &mut ParamSet, snap: &[Mat]) {
    for (id, m) in params.ids().collect::<Vec<_>>().into_iter().zip(snap) {
        *params.value_mut(id) = m.clone();
    }
}

/// The fixed per-seed designation of utterances trained without an accent
/// label.
fn accent_mask(n: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let k = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut crate::rng::stream(seed, "train/accent_mask"));
    let mut mask = vec![false; n];
    for &i in order.iter().take(k.min(n)) {
        mask[i] = true;
    }
    mask
}

pub fn train(corpus: &GeneratedCorpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::Shape("empty training set".into()));
    }
    let mut model = DimNet::new(cfg.effective_model(), cfg.seed)?;
    let mut opt = Adam::new(cfg.optimizer, &model.params);
    let masked = accent_mask(corpus.train.len(), cfg.accent_mask_fraction, cfg.seed);
    let mut shuffle_rng = crate::rng::stream(cfg.seed, "train/shuffle");
    let mut log = Vec::new();
    let mut divergence = None;
    let mut last_good = snapshot(&model.params);

    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0f64; 3];
        let mut counts = [0usize; 3];
        let mut skipped = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<BatchItem<'_>> = chunk
                .iter()
                .map(|&i| {
                    let u = &corpus.train[i];
                    BatchItem {
                        frames: &u.frames,
                        y_f: &u.y_f,
                        y_c: &u.y_c,
                        accent: (!masked[i]).then_some(u.accent),
                        aligned: None,
                    }
                })
                .collect();
            let mut g = Graph::new();
            let losses =
                match model.batch_loss(&mut g, &batch, &cfg.weights, cfg.class_weights.as_deref()) {
                    Ok(l) => l,
                    Err(Error::Numerics(msg)) => {
                        divergence = Some(format!("epoch {epoch}: {msg}"));
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                };
            model.params.zero_grads();
            g.backward(losses.combined, 1.0, &mut model.params);
            match opt.step(&mut model.params) {
                Ok(()) => {}
                Err(Error::Numerics(msg)) => {
                    divergence = Some(format!("epoch {epoch}: {msg}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            let n_att = batch.len();
            let n_ctc = batch.len() - losses.skipped_ctc;
            for (slot, (value, n)) in [
                (losses.att, n_att),
                (losses.ctc, n_ctc),
                (losses.ar, losses.n_ar),
            ]
            .iter()
            .enumerate()
            {
                sums[slot] += value * *n as f64;
                counts[slot] += n;
            }
            skipped += losses.skipped_ctc;
        }
        let mean = |i: usize| {
            if counts[i] == 0 {
                0.0
            } else {
                sums[i] / counts[i] as f64
            }
        };
        let dev = match evaluate(&model, &corpus.dev, cfg.dev_beam) {
            Ok(d) => d,
            Err(Error::Numerics(msg)) => {
                divergence = Some(format!("epoch {epoch} dev decode: {msg}"));
                break 'epochs;
            }
            Err(e) => return Err(e),
        };
        log.push(EpochRecord {
            epoch,
            l_att: mean(0),
            l_ctc: mean(1),
            l_ar: mean(2),
            dev_wer: dev.wer,
            dev_ar_acc: dev.ar_acc,
            skipped_ctc: skipped,
        });
        last_good = snapshot(&model.params);
    }
    if divergence.is_some() {
        restore(&mut model.params, &last_good);
    }
    Ok(TrainOutcome {
        model,
        log,
        divergence,
    })
}

pub fn write_metrics_jsonl(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for rec in log {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_jsonl(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(std::fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub wer: f64,
    pub ar_acc: f64,
    pub preds: Vec<usize>,
    pub hyps: Vec<Vec<usize>>,
}

/// Single-pass evaluation: beam decode for WER, posterior argmax for accent
/// accuracy.
pub fn evaluate(model: &DimNet, utts: &[Utterance], beam: usize) -> Result<EvalSummary> {
    let decoded = decode_set(model, utts, beam)?;
    summarize(model, utts, decoded.iter().map(|d| d.hyps[0].y_c.clone()), &decoded)
}

fn summarize(
    model: &DimNet,
    utts: &[Utterance],
    hyps: impl Iterator<Item = Vec<usize>>,
    decoded: &[DecodedUtt],
) -> Result<EvalSummary> {
    let hyps: Vec<Vec<usize>> = hyps.collect();
    let pairs = utts
        .iter()
        .zip(&hyps)
        .map(|(u, h)| (u.y_c.as_slice(), h.as_slice()));
    let wer = corpus_error_rate(pairs);
    let preds: Vec<usize> = decoded.iter().map(|d| d.accent_pred).collect();
    let labels: Vec<usize> = utts.iter().map(|u| u.accent).collect();
    let ar_acc = accent_accuracy(&preds, &labels, model.cfg().n_accents)?.accuracy;
    Ok(EvalSummary {
        wer,
        ar_acc,
        preds,
        hyps,
    })
}

/// Everything the second pass needs from one utterance's first pass.
pub struct DecodedUtt {
    pub utt_id: String,
    pub hyps: Vec<Hypothesis>,
    pub ctc_logp: Mat,
    pub accent_pred: usize,
    /// Mean posterior over accents.
    pub accent_posterior: Vec<f64>,
}

fn decode_one(model: &DimNet, u: &Utterance, beam: usize) -> Result<DecodedUtt> {
    let mut g = Graph::new();
    let enc = model.encode(&mut g, &u.frames)?;
    let post = g.value(enc.accent.posteriors);
    let (t, k) = post.dim();
    let posterior: Vec<f64> = (0..k)
        .map(|j| (0..t).map(|i| post[(i, j)]).sum::<f64>() / t as f64)
        .collect();
    let ctc_logp = g.value(enc.ctc_logp).clone();
    let mut scorer = ModelScorer::new(model, &g, &enc);
    let cap = scorer.max_len();
    let hyps = beam_search(&mut scorer, beam, cap)?;
    Ok(DecodedUtt {
        utt_id: u.utt_id.clone(),
        hyps,
        ctc_logp,
        accent_pred: enc.accent.argmax(&g),
        accent_posterior: posterior,
    })
}

/// First-pass decode of a whole set. Fans out across utterances up to the
/// `DIMNET_TOY_THREADS` cap; order and values are thread-count invariant.
pub fn decode_set(model: &DimNet, utts: &[Utterance], beam: usize) -> Result<Vec<DecodedUtt>> {
    if utts.is_empty() {
        return Err(Error::Shape("empty evaluation set".into()));
    }
    let workers = crate::toy_threads().min(utts.len());
    if workers == 1 {
        return utts.iter().map(|u| decode_one(model, u, beam)).collect();
    }
    let chunk = utts.len().div_ceil(workers);
    let mut results: Vec<Option<Result<DecodedUtt>>> = (0..utts.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        for (us, rs) in utts.chunks(chunk).zip(results.chunks_mut(chunk)) {
            s.spawn(move || {
                for (u, r) in us.iter().zip(rs.iter_mut()) {
                    *r = Some(decode_one(model, u, beam));
                }
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("every slot decoded"))
        .collect()
}

/// Second pass for one utterance under the configured unit inventory. In
/// coarse-only mode hypotheses are CTC-scored as-is, no expansion.
pub fn rescore_decoded(
    d: &DecodedUtt,
    units: UnitsMode,
    inv: &UnitInventory,
    lexicon: &Lexicon,
    weights: RescoreWeights,
    lm: &dyn LmScorer,
) -> Result<Rescored> {
    match units {
        UnitsMode::TwoGranularity => {
            two_granularity_rescore(&d.hyps, &d.ctc_logp, inv, lexicon, weights, lm)
        }
        UnitsMode::CoarseOnly => {
            rescore_with(&d.hyps, &d.ctc_logp, weights, lm, |y_c| Ok(y_c.to_vec()))
        }
    }
}

/// Corpus WER after rescoring every utterance with the given weights.
pub fn rescored_wer(
    model: &DimNet,
    corpus: &GeneratedCorpus,
    utts: &[Utterance],
    decoded: &[DecodedUtt],
    weights: RescoreWeights,
    lm: &dyn LmScorer,
) -> Result<f64> {
    let mut hyps = Vec::with_capacity(decoded.len());
    for d in decoded {
        let r = rescore_decoded(
            d,
            model.cfg().units,
            &corpus.inventory,
            &corpus.lexicon,
            weights,
            lm,
        )?;
        hyps.push(r.best.y_c);
    }
    let pairs = utts
        .iter()
        .zip(&hyps)
        .map(|(u, h)| (u.y_c.as_slice(), h.as_slice()));
    Ok(corpus_error_rate(pairs))
}

/// Picks the grid point with the lowest WER on `utts` (the dev set); ties
/// keep the earliest point.
pub fn tune_rescore_weights(
    model: &DimNet,
    corpus: &GeneratedCorpus,
    utts: &[Utterance],
    decoded: &[DecodedUtt],
    grid: &[RescoreWeights],
    lm: &dyn LmScorer,
) -> Result<(RescoreWeights, f64)> {
    if grid.is_empty() {
        return Err(Error::Config("empty rescoring weight grid".into()));
    }
    let mut best = (grid[0], f64::INFINITY);
    for &w in grid {
        let wer = rescored_wer(model, corpus, utts, decoded, w, lm)?;
        if wer < best.1 {
            best = (w, wer);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationAxes {
    pub units: Vec<UnitsMode>,
    pub schemes: Vec<FusionScheme>,
    pub detach: Vec<bool>,
    pub rescoring: Vec<bool>,
}

impl Default for AblationAxes {
    fn default() -> Self {
        Self {
            units: vec![UnitsMode::TwoGranularity, UnitsMode::CoarseOnly],
            schemes: vec![FusionScheme::AfIed, FusionScheme::AfI],
            detach: vec![true, false],
            rescoring: vec![false, true],
        }
    }
}

/// One aggregated ablation row: the config axes and per-seed metrics.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub units: UnitsMode,
    pub scheme: FusionScheme,
    pub detach: bool,
    pub rescoring: bool,
    pub seeds: Vec<u64>,
    pub dev_ar: Vec<f64>,
    pub dev_wer: Vec<f64>,
    pub test_ar: Vec<f64>,
    pub test_wer: Vec<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

impl AblationRow {
    pub fn mean_dev_ar(&self) -> f64 {
        mean(&self.dev_ar)
    }

    pub fn mean_dev_wer(&self) -> f64 {
        mean(&self.dev_wer)
    }

    pub fn mean_test_ar(&self) -> f64 {
        mean(&self.test_ar)
    }

    pub fn mean_test_wer(&self) -> f64 {
        mean(&self.test_wer)
    }
}

/// Trains the full cross product of the axes over the given seeds and
/// evaluates dev and test. Rescoring rows tune the weight grid on dev and
/// apply the winner to test; single-pass rows take the first-pass best from
/// the same n-best lists.
pub fn run_ablation(
    corpus: &GeneratedCorpus,
    base: &TrainConfig,
    axes: &AblationAxes,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    if axes.units.is_empty()
        || axes.schemes.is_empty()
        || axes.detach.is_empty()
        || axes.rescoring.is_empty()
    {
        return Err(Error::Config("every ablation axis needs at least one value".into()));
    }
    let mut rows = Vec::new();
    for &units in &axes.units {
        for &scheme in &axes.schemes {
            for &detach in &axes.detach {
                for &rescoring in &axes.rescoring {
                    let mut row = AblationRow {
                        units,
                        scheme,
                        detach,
                        rescoring,
                        seeds: seeds.to_vec(),
                        dev_ar: Vec::new(),
                        dev_wer: Vec::new(),
                        test_ar: Vec::new(),
                        test_wer: Vec::new(),
                    };
                    for &seed in seeds {
                        let mut cfg = base.clone();
                        cfg.seed = seed;
                        cfg.model.units = units;
                        cfg.model.scheme = scheme;
                        cfg.model.detach = detach;
                        let out = train(corpus, &cfg)?;
                        let (dev, test) = evaluate_for_ablation(&out.model, corpus, &cfg, rescoring)?;
                        row.dev_ar.push(dev.1);
                        row.dev_wer.push(dev.0);
                        row.test_ar.push(test.1);
                        row.test_wer.push(test.0);
                    }
                    rows.push(row);
                }
            }
        }
    }
    Ok(rows)
}

/// (wer, ar_acc) on dev and test for one trained model.
fn evaluate_for_ablation(
    model: &DimNet,
    corpus: &GeneratedCorpus,
    cfg: &TrainConfig,
    rescoring: bool,
) -> Result<((f64, f64), (f64, f64))> {
    let dev = decode_set(model, &corpus.dev, cfg.rescore_beam)?;
    let test = decode_set(model, &corpus.test, cfg.rescore_beam)?;
    let dev_ar = summarize(model, &corpus.dev, dev.iter().map(|d| d.hyps[0].y_c.clone()), &dev)?
        .ar_acc;
    let test_ar = summarize(
        model,
        &corpus.test,
        test.iter().map(|d| d.hyps[0].y_c.clone()),
        &test,
    )?
    .ar_acc;
    let (dev_wer, test_wer) = if rescoring {
        let lm = UniformLm {
            n_coarse: model.cfg().n_coarse,
        };
        let grid = crate::decoding::weight_grid();
        let (w, dev_wer) = tune_rescore_weights(model, corpus, &corpus.dev, &dev, &grid, &lm)?;
        let test_wer = rescored_wer(model, corpus, &corpus.test, &test, w, &lm)?;
        (dev_wer, test_wer)
    } else {
        let first = |set: &[DecodedUtt], utts: &[Utterance]| {
            corpus_error_rate(
                utts.iter()
                    .zip(set)
                    .map(|(u, d)| (u.y_c.as_slice(), d.hyps[0].y_c.as_slice())),
            )
        };
        (first(&dev, &corpus.dev), first(&test, &corpus.test))
    };
    Ok(((dev_wer, dev_ar), (test_wer, test_ar)))
}

/// Column order is the config axes first, then metric means, then the
/// per-seed values joined with `;`.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "units",
        "scheme",
        "detach",
        "rescoring",
        "n_seeds",
        "dev_ar_acc",
        "dev_wer",
        "test_ar_acc",
        "test_wer",
        "dev_ar_acc_per_seed",
        "dev_wer_per_seed",
        "test_ar_acc_per_seed",
        "test_wer_per_seed",
    ])?;
    let join = |xs: &[f64]| {
        xs.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(";")
    };
    for r in rows {
        w.write_record([
            r.units.to_string(),
            r.scheme.to_string(),
            r.detach.to_string(),
            r.rescoring.to_string(),
            r.seeds.len().to_string(),
            r.mean_dev_ar().to_string(),
            r.mean_dev_wer().to_string(),
            r.mean_test_ar().to_string(),
            r.mean_test_wer().to_string(),
            join(&r.dev_ar),
            join(&r.dev_wer),
            join(&r.test_ar),
            join(&r.test_wer),
        ])?;
    }
    w.flush()?;
    Ok(())
}
