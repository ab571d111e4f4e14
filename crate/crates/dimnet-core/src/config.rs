//! Run configuration as a flat `key = value` text file.
//!
//! One key per line, `#` starts a comment line, blank lines are skipped.
//! Keys are dotted paths grouped by subsystem (`corpus.*`, `model.*`,
//! `train.*`, `optimizer.*`, `decode.*`, `ablate.*`); later assignments win,
//! so command-line overrides are just extra assignments applied after the
//! file. `write_effective` freezes the merged result back out with every key
//! present, which is enough to reproduce a run bit for bit single-threaded.
//!
//! The model's data-bound dimensions (feature width, vocabulary sizes, accent
//! count) are deliberately not keys: they are read from the corpus artifacts
//! at training time so the two can never drift apart.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::decoding::RescoreWeights;
use crate::error::{Error, Result};
use crate::synthgen::CorpusSpec;
use crate::training::{AblationAxes, TrainConfig};

/// How per-accent weights for the accent loss are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassWeighting {
    /// Uniform: every accent contributes equally per labelled utterance.
    None,
    /// Weights proportional to inverse training-set frequency.
    InverseFrequency,
}

impl fmt::Display for ClassWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::InverseFrequency => "inverse_frequency",
        })
    }
}

impl FromStr for ClassWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "inverse_frequency" => Ok(Self::InverseFrequency),
            other => Err(Error::Config(format!(
                "unknown class weighting `{other}` (expected none or inverse_frequency)"
            ))),
        }
    }
}

/// Decode-time options shared by the `decode` and `eval` commands.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeSettings {
    pub beam: usize,
    pub weights: RescoreWeights,
    /// Skip rescoring and report the first-pass best hypothesis.
    pub single_pass: bool,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            beam: 8,
            weights: RescoreWeights::default(),
            single_pass: false,
        }
    }
}

/// Which corners of the ablation grid to run, and over which seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AblateSettings {
    pub seeds: Vec<u64>,
    pub axes: AblationAxes,
}

impl Default for AblateSettings {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            axes: AblationAxes::default(),
        }
    }
}

/// The full merged configuration for one run.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
    pub class_weighting: ClassWeighting,
    pub decode: DecodeSettings,
    pub ablate: AblateSettings,
}

impl Default for ClassWeighting {
    fn default() -> Self {
        Self::None
    }
}

/// Every recognised key, in the order `write_effective` emits them.
static KEYS: &[&str] = &[
    "corpus.n_accents",
    "corpus.n_fine",
    "corpus.n_coarse",
    "corpus.feat_dim",
    "corpus.frames_per_unit_min",
    "corpus.frames_per_unit_max",
    "corpus.utt_len_min",
    "corpus.utt_len_max",
    "corpus.accent_shift_scale",
    "corpus.accent_phoneme_fraction",
    "corpus.noise_std",
    "corpus.accent_skew",
    "corpus.seed",
    "corpus.n_train",
    "corpus.n_dev",
    "corpus.n_test",
    "model.d_model",
    "model.ffn",
    "model.heads",
    "model.conv_kernel",
    "model.shared_depth",
    "model.ctc_depth",
    "model.att_depth",
    "model.decoder_depth",
    "model.subsample_factor",
    "model.scheme",
    "model.emb_kind",
    "model.ar_level",
    "model.units",
    "model.detach",
    "model.label_smoothing",
    "model.n_spaces",
    "model.bimodal_width",
    "model.d_k",
    "model.classifier_blocks",
    "model.classifier_hidden",
    "model.emb_width",
    "model.init_scale",
    "train.triple_encoder",
    "train.seed",
    "train.epochs",
    "train.batch_size",
    "train.accent_mask_fraction",
    "train.class_weighting",
    "train.dev_beam",
    "train.rescore_beam",
    "train.w_att",
    "train.w_ctc",
    "train.w_ar",
    "optimizer.lr",
    "optimizer.beta1",
    "optimizer.beta2",
    "optimizer.eps",
    "optimizer.warmup_steps",
    "optimizer.grad_clip",
    "decode.beam",
    "decode.w1",
    "decode.w2",
    "decode.w3",
    "decode.single_pass",
    "ablate.seeds",
    "ablate.units",
    "ablate.schemes",
    "ablate.detach",
    "ablate.rescoring",
];

fn parse_num<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key `{key}` expects {what}, got `{value}`")))
}

fn parse_list<T>(key: &str, value: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<&str> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() {
        return Err(Error::Config(format!(
            "key `{key}` expects a non-empty comma-separated list"
        )));
    }
    items.into_iter().map(f).collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl Settings {
    /// All recognised keys in canonical order.
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// Defaults, then the file, in order.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut s = Self::default();
        s.apply_str(&std::fs::read_to_string(path)?)?;
        Ok(s)
    }

    /// Apply every assignment in `text`, top to bottom.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            self.apply(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Parse { line: i + 1, msg },
                other => other,
            })?;
        }
        Ok(())
    }

    /// Set one key. Unknown keys fail with the full list of valid ones.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "corpus.n_accents" => {
                self.corpus.n_accents = parse_num(key, value, "an unsigned integer")?
            }
            "corpus.n_fine" => self.corpus.n_fine = parse_num(key, value, "an unsigned integer")?,
            "corpus.n_coarse" => {
                self.corpus.n_coarse = parse_num(key, value, "an unsigned integer")?
            }
            "corpus.feat_dim" => {
                self.corpus.feat_dim = parse_num(key, value, "an unsigned integer")?
            }
            "corpus.frames_per_unit_min" => {
                self.corpus.frames_per_unit.0 = parse_num(key, value, "an unsigned integer")?
            }
            "corpus.frames_per_unit_max" => {
                self.corpus.frames_per_unit.1 = parse_num(key, value, "an unsigned integer")?
            }
            "corpus.utt_len_min" => {
                self.corpus.utt_len.0 = parse_num(key, value, "an unsigned integer")?
            }
            "corpus.utt_len_max" => {
                self.corpus.utt_len.1 = parse_num(key, value, "an unsigned integer")?
            }
            "corpus.accent_shift_scale" => {
                self.corpus.accent_shift_scale = parse_num(key, value, "a number")?
            }
            "corpus.accent_phoneme_fraction" => {
                self.corpus.accent_phoneme_fraction = parse_num(key, value, "a number")?
            }
            "corpus.noise_std" => self.corpus.noise_std = parse_num(key, value, "a number")?,
            "corpus.accent_skew" => self.corpus.accent_skew = parse_num(key, value, "a number")?,
            "corpus.seed" => self.corpus.seed = parse_num(key, value, "an unsigned integer")?,
            "corpus.n_train" => self.corpus.n_train = parse_num(key, value, "an unsigned integer")?,
            "corpus.n_dev" => self.corpus.n_dev = parse_num(key, value, "an unsigned integer")?,
            "corpus.n_test" => self.corpus.n_test = parse_num(key, value, "an unsigned integer")?,
            "model.d_model" => {
                self.train.model.dims.d_model = parse_num(key, value, "an unsigned integer")?
            }
            "model.ffn" => self.train.model.dims.ffn = parse_num(key, value, "an unsigned integer")?,
            "model.heads" => {
                self.train.model.dims.heads = parse_num(key, value, "an unsigned integer")?
            }
            "model.conv_kernel" => {
                self.train.model.dims.conv_kernel = parse_num(key, value, "an unsigned integer")?
            }
            "model.shared_depth" => {
                self.train.model.shared_depth = parse_num(key, value, "an unsigned integer")?
            }
            "model.ctc_depth" => {
                self.train.model.ctc_depth = parse_num(key, value, "an unsigned integer")?
            }
            "model.att_depth" => {
                self.train.model.att_depth = parse_num(key, value, "an unsigned integer")?
            }
            "model.decoder_depth" => {
                self.train.model.decoder_depth = parse_num(key, value, "an unsigned integer")?
            }
            "model.subsample_factor" => {
                self.train.model.subsample_factor = parse_num(key, value, "an unsigned integer")?
            }
            "model.scheme" => self.train.model.scheme = value.parse()?,
            "model.emb_kind" => self.train.model.emb_kind = value.parse()?,
            "model.ar_level" => self.train.model.ar_level = value.parse()?,
            "model.units" => self.train.model.units = value.parse()?,
            "model.detach" => self.train.model.detach = parse_num(key, value, "true or false")?,
            "model.label_smoothing" => {
                self.train.model.label_smoothing = parse_num(key, value, "a number")?
            }
            "model.n_spaces" => {
                self.train.model.n_spaces = parse_num(key, value, "an unsigned integer")?
            }
            "model.bimodal_width" => {
                self.train.model.bimodal_width = parse_num(key, value, "an unsigned integer")?
            }
            "model.d_k" => self.train.model.d_k = parse_num(key, value, "an unsigned integer")?,
            "model.classifier_blocks" => {
                self.train.model.classifier_blocks = parse_num(key, value, "an unsigned integer")?
            }
            "model.classifier_hidden" => {
                self.train.model.classifier_hidden = parse_num(key, value, "an unsigned integer")?
            }
            "model.emb_width" => {
                self.train.model.emb_width = parse_num(key, value, "an unsigned integer")?
            }
            "model.init_scale" => self.train.model.init_scale = parse_num(key, value, "a number")?,
            "train.triple_encoder" => {
                self.train.triple_encoder = parse_num(key, value, "true or false")?
            }
            "train.seed" => self.train.seed = parse_num(key, value, "an unsigned integer")?,
            "train.epochs" => self.train.epochs = parse_num(key, value, "an unsigned integer")?,
            "train.batch_size" => {
                self.train.batch_size = parse_num(key, value, "an unsigned integer")?
            }
            "train.accent_mask_fraction" => {
                self.train.accent_mask_fraction = parse_num(key, value, "a number")?
            }
            "train.class_weighting" => self.class_weighting = value.parse()?,
            "train.dev_beam" => self.train.dev_beam = parse_num(key, value, "an unsigned integer")?,
            "train.rescore_beam" => {
                self.train.rescore_beam = parse_num(key, value, "an unsigned integer")?
            }
            "train.w_att" => self.train.weights.w_att = parse_num(key, value, "a number")?,
            "train.w_ctc" => self.train.weights.w_ctc = parse_num(key, value, "a number")?,
            "train.w_ar" => self.train.weights.w_ar = parse_num(key, value, "a number")?,
            "optimizer.lr" => self.train.optimizer.lr = parse_num(key, value, "a number")?,
            "optimizer.beta1" => self.train.optimizer.beta1 = parse_num(key, value, "a number")?,
            "optimizer.beta2" => self.train.optimizer.beta2 = parse_num(key, value, "a number")?,
            "optimizer.eps" => self.train.optimizer.eps = parse_num(key, value, "a number")?,
            "optimizer.warmup_steps" => {
                self.train.optimizer.warmup_steps = parse_num(key, value, "an unsigned integer")?
            }
            "optimizer.grad_clip" => {
                self.train.optimizer.grad_clip = parse_num(key, value, "a number")?
            }
            "decode.beam" => self.decode.beam = parse_num(key, value, "an unsigned integer")?,
            "decode.w1" => self.decode.weights.w1 = parse_num(key, value, "a number")?,
            "decode.w2" => self.decode.weights.w2 = parse_num(key, value, "a number")?,
            "decode.w3" => self.decode.weights.w3 = parse_num(key, value, "a number")?,
            "decode.single_pass" => {
                self.decode.single_pass = parse_num(key, value, "true or false")?
            }
            "ablate.seeds" => {
                self.ablate.seeds =
                    parse_list(key, value, |s| parse_num(key, s, "an unsigned integer"))?
            }
            "ablate.units" => self.ablate.axes.units = parse_list(key, value, |s| s.parse())?,
            "ablate.schemes" => self.ablate.axes.schemes = parse_list(key, value, |s| s.parse())?,
            "ablate.detach" => {
                self.ablate.axes.detach =
                    parse_list(key, value, |s| parse_num(key, s, "true or false"))?
            }
            "ablate.rescoring" => {
                self.ablate.axes.rescoring =
                    parse_list(key, value, |s| parse_num(key, s, "true or false"))?
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown config key `{other}`; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Current value of `key` in the same form `apply` accepts, or `None` for
    /// an unrecognised key.
    pub fn value_of(&self, key: &str) -> Option<String> {
        let v = match key {
            "corpus.n_accents" => self.corpus.n_accents.to_string(),
            "corpus.n_fine" => self.corpus.n_fine.to_string(),
            "corpus.n_coarse" => self.corpus.n_coarse.to_string(),
            "corpus.feat_dim" => self.corpus.feat_dim.to_string(),
            "corpus.frames_per_unit_min" => self.corpus.frames_per_unit.0.to_string(),
            "corpus.frames_per_unit_max" => self.corpus.frames_per_unit.1.to_string(),
            "corpus.utt_len_min" => self.corpus.utt_len.0.to_string(),
            "corpus.utt_len_max" => self.corpus.utt_len.1.to_string(),
            "corpus.accent_shift_scale" => self.corpus.accent_shift_scale.to_string(),
            "corpus.accent_phoneme_fraction" => self.corpus.accent_phoneme_fraction.to_string(),
            "corpus.noise_std" => self.corpus.noise_std.to_string(),
            "corpus.accent_skew" => self.corpus.accent_skew.to_string(),
            "corpus.seed" => self.corpus.seed.to_string(),
            "corpus.n_train" => self.corpus.n_train.to_string(),
            "corpus.n_dev" => self.corpus.n_dev.to_string(),
            "corpus.n_test" => self.corpus.n_test.to_string(),
            "model.d_model" => self.train.model.dims.d_model.to_string(),
            "model.ffn" => self.train.model.dims.ffn.to_string(),
            "model.heads" => self.train.model.dims.heads.to_string(),
            "model.conv_kernel" => self.train.model.dims.conv_kernel.to_string(),
            "model.shared_depth" => self.train.model.shared_depth.to_string(),
            "model.ctc_depth" => self.train.model.ctc_depth.to_string(),
            "model.att_depth" => self.train.model.att_depth.to_string(),
            "model.decoder_depth" => self.train.model.decoder_depth.to_string(),
            "model.subsample_factor" => self.train.model.subsample_factor.to_string(),
            "model.scheme" => self.train.model.scheme.to_string(),
            "model.emb_kind" => self.train.model.emb_kind.to_string(),
            "model.ar_level" => self.train.model.ar_level.to_string(),
            "model.units" => self.train.model.units.to_string(),
            "model.detach" => self.train.model.detach.to_string(),
            "model.label_smoothing" => self.train.model.label_smoothing.to_string(),
            "model.n_spaces" => self.train.model.n_spaces.to_string(),
            "model.bimodal_width" => self.train.model.bimodal_width.to_string(),
            "model.d_k" => self.train.model.d_k.to_string(),
            "model.classifier_blocks" => self.train.model.classifier_blocks.to_string(),
            "model.classifier_hidden" => self.train.model.classifier_hidden.to_string(),
            "model.emb_width" => self.train.model.emb_width.to_string(),
            "model.init_scale" => self.train.model.init_scale.to_string(),
            "train.triple_encoder" => self.train.triple_encoder.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.accent_mask_fraction" => self.train.accent_mask_fraction.to_string(),
            "train.class_weighting" => self.class_weighting.to_string(),
            "train.dev_beam" => self.train.dev_beam.to_string(),
            "train.rescore_beam" => self.train.rescore_beam.to_string(),
            "train.w_att" => self.train.weights.w_att.to_string(),
            "train.w_ctc" => self.train.weights.w_ctc.to_string(),
            "train.w_ar" => self.train.weights.w_ar.to_string(),
            "optimizer.lr" => self.train.optimizer.lr.to_string(),
            "optimizer.beta1" => self.train.optimizer.beta1.to_string(),
            "optimizer.beta2" => self.train.optimizer.beta2.to_string(),
            "optimizer.eps" => self.train.optimizer.eps.to_string(),
            "optimizer.warmup_steps" => self.train.optimizer.warmup_steps.to_string(),
            "optimizer.grad_clip" => self.train.optimizer.grad_clip.to_string(),
            "decode.beam" => self.decode.beam.to_string(),
            "decode.w1" => self.decode.weights.w1.to_string(),
            "decode.w2" => self.decode.weights.w2.to_string(),
            "decode.w3" => self.decode.weights.w3.to_string(),
            "decode.single_pass" => self.decode.single_pass.to_string(),
            "ablate.seeds" => join(&self.ablate.seeds),
            "ablate.units" => join(&self.ablate.axes.units),
            "ablate.schemes" => join(&self.ablate.axes.schemes),
            "ablate.detach" => join(&self.ablate.axes.detach),
            "ablate.rescoring" => join(&self.ablate.axes.rescoring),
            _ => return None,
        };
        Some(v)
    }

    /// Freeze the merged configuration: every key, current value, canonical
    /// order. Reading the file back reproduces `self` exactly, because f64
    /// `Display` round-trips.
    pub fn write_effective(&self, path: &Path) -> Result<()> {
        let mut out = String::from("# effective configuration (all keys)\n");
        for key in KEYS {
            let value = self.value_of(key).expect("KEYS entries are recognised");
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Cross-field checks on the merged result.
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        if self.decode.beam == 0 {
            return Err(Error::Config("decode beam must be at least 1".into()));
        }
        let w = &self.decode.weights;
        if ![w.w1, w.w2, w.w3].iter().all(|x| x.is_finite()) {
            return Err(Error::Config("decode weights must be finite".into()));
        }
        if self.ablate.seeds.is_empty() {
            return Err(Error::Config("ablate.seeds must list at least one seed".into()));
        }
        let a = &self.ablate.axes;
        if a.units.is_empty() || a.schemes.is_empty() || a.detach.is_empty() || a.rescoring.is_empty()
        {
            return Err(Error::Config("ablation axes must be non-empty".into()));
        }
        Ok(())
    }
}
