//! Batch front end for the pipeline: corpus generation, training, decoding,
//! evaluation, the ablation grid, and the gradient oracle.
//!
//! Every command takes one flat `key = value` config file plus overrides
//! (`--set key=value`, then the dedicated flags), and freezes the merged
//! result as `config.effective` in its output directory, so any run can be
//! reproduced from that file alone with `DIMNET_TOY_THREADS=1`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dimnet_core::config::{ClassWeighting, Settings};
use dimnet_core::decoding::{
    write_accent_jsonl, write_nbest_jsonl, Hypothesis, NbestRecord, UniformLm,
};
use dimnet_core::metrics::{
    accent_accuracy, corpus_error_rate, per_phoneme_report, write_accent_csv, write_phoneme_csv,
    PhonemeItem,
};
use dimnet_core::model::{gradient_suite, DimNet};
use dimnet_core::synthgen::{
    generate_corpus, read_manifest, write_manifest, FrameStorage, GenMeta, GeneratedCorpus,
    Utterance,
};
use dimnet_core::training::{
    self, decode_set, inverse_frequency_weights, rescore_decoded, write_ablation_csv,
    write_metrics_jsonl, DecodedUtt, TrainConfig,
};
use dimnet_core::vocab::{Lexicon, UnitInventory};
use dimnet_core::checkpoint;

#[derive(Parser)]
#[command(
    name = "dimnet",
    version,
    about = "Joint speech and accent recognition on a synthetic corpus",
    after_help = "Config keys (for --config files and --set): run `dimnet keys`."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus into a data directory.
    GenData(GenDataArgs),
    /// Train a model on a generated data directory.
    Train(TrainArgs),
    /// Beam-decode a split and write n-best and accent posteriors.
    Decode(DecodeArgs),
    /// Decode a split and write error-rate and accent-accuracy reports.
    Eval(EvalArgs),
    /// Train and evaluate every configured corner of the ablation grid.
    Ablate(AblateArgs),
    /// Finite-difference oracle over the backward pass; prints the worst
    /// relative error per setup.
    GradCheck(GradCheckArgs),
    /// List every config key with its default value.
    Keys,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file applied over the defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Single `key=value` override applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            s.apply_str(&text)
                .with_context(|| format!("in config file {}", path.display()))?;
        }
        for pair in &self.set {
            let Some((key, value)) = pair.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{pair}`");
            };
            s.apply(key.trim(), value.trim())?;
        }
        Ok(s)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output data directory (created if absent).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Shorthand for --set corpus.seed=N.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Data directory produced by gen-data.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Run directory for checkpoint, metrics log, and frozen config.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Shorthand for --set train.seed=N.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for --set train.epochs=N.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Dev => "dev",
            Self::Test => "test",
        }
    }

    fn pick(self, corpus: &GeneratedCorpus) -> &[Utterance] {
        match self {
            Self::Train => &corpus.train,
            Self::Dev => &corpus.dev,
            Self::Test => &corpus.test,
        }
    }
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Data directory produced by gen-data.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Checkpoint file written by train.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Output directory for n-best and accent posteriors.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Which split to decode.
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Shorthand for --set decode.beam=N.
    #[arg(long)]
    beam: Option<usize>,
    /// Shorthand for --set decode.w1=X (attention weight).
    #[arg(long)]
    w1: Option<f64>,
    /// Shorthand for --set decode.w2=X (CTC weight).
    #[arg(long)]
    w2: Option<f64>,
    /// Shorthand for --set decode.w3=X (LM weight).
    #[arg(long)]
    w3: Option<f64>,
    /// Report the first-pass best hypothesis, skipping rescoring.
    #[arg(long)]
    single_pass: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    /// Worst tokens reported per accent in the phoneme table.
    #[arg(long, default_value_t = 5)]
    top_k: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Data directory produced by gen-data.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory for the grid CSV.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Decode(a) => decode(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Ablate(a) => ablate(a),
        Cmd::GradCheck(a) => grad_check(a),
        Cmd::Keys => keys(),
    }
}

fn keys() -> Result<()> {
    let s = Settings::default();
    for key in Settings::keys() {
        println!("{key} = {}", s.value_of(key).expect("known key"));
    }
    Ok(())
}

fn freeze(settings: &Settings, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    settings.write_effective(&dir.join("config.effective"))?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut settings = a.config.load()?;
    if let Some(seed) = a.seed {
        settings.corpus.seed = seed;
    }
    settings.validate()?;

    let corpus = generate_corpus(&settings.corpus)?;
    freeze(&settings, &a.out)?;
    corpus
        .inventory
        .write_files(&a.out.join("units_fine.txt"), &a.out.join("units_coarse.txt"))?;
    corpus.lexicon.write_file(&a.out.join("lexicon.txt"), &corpus.inventory)?;
    corpus.meta.write_file(&a.out.join("meta.json"))?;
    for (name, utts) in [
        ("train.jsonl", &corpus.train),
        ("dev.jsonl", &corpus.dev),
        ("test.jsonl", &corpus.test),
    ] {
        write_manifest(&a.out.join(name), utts, FrameStorage::Inline)?;
    }
    println!(
        "generated {} train / {} dev / {} test utterances into {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        a.out.display()
    );
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<GeneratedCorpus> {
    let inventory = UnitInventory::read_files(
        &dir.join("units_fine.txt"),
        &dir.join("units_coarse.txt"),
    )
    .with_context(|| format!("reading unit inventories from {}", dir.display()))?;
    let lexicon = Lexicon::read_file(&dir.join("lexicon.txt"), &inventory)?;
    let meta = GenMeta::read_file(&dir.join("meta.json"))?;
    let train = read_manifest(&dir.join("train.jsonl"))?;
    let dev = read_manifest(&dir.join("dev.jsonl"))?;
    let test = read_manifest(&dir.join("test.jsonl"))?;
    Ok(GeneratedCorpus {
        inventory,
        lexicon,
        train,
        dev,
        test,
        meta,
    })
}

/// Copy the data-bound dimensions from the corpus artifacts into the model
/// config; they are not config keys, so file and data can never disagree.
fn train_config_for(settings: &Settings, corpus: &GeneratedCorpus) -> Result<TrainConfig> {
    let mut cfg = settings.train.clone();
    cfg.model.feat_dim = corpus.meta.spec.feat_dim;
    cfg.model.n_fine = corpus.inventory.n_fine();
    cfg.model.n_coarse = corpus.inventory.n_coarse();
    cfg.model.n_accents = corpus.meta.spec.n_accents;
    cfg.class_weights = match settings.class_weighting {
        ClassWeighting::None => None,
        ClassWeighting::InverseFrequency => Some(inverse_frequency_weights(
            &corpus.train,
            cfg.model.n_accents,
        )),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut settings = a.config.load()?;
    if let Some(seed) = a.seed {
        settings.train.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        settings.train.epochs = epochs;
    }
    settings.validate()?;

    let corpus = load_corpus(&a.data)?;
    let cfg = train_config_for(&settings, &corpus)?;
    let outcome = training::train(&corpus, &cfg)?;

    freeze(&settings, &a.out)?;
    checkpoint::save(&a.out.join("checkpoint.json"), &outcome.model)?;
    write_metrics_jsonl(&a.out.join("metrics.jsonl"), &outcome.log)?;
    if let Some(msg) = outcome.divergence {
        bail!("training diverged: {msg} (last good checkpoint kept in {})", a.out.display());
    }
    match outcome.log.last() {
        Some(rec) => println!(
            "trained {} epochs; dev WER {:.4}, dev accent acc {:.4} -> {}",
            outcome.log.len(),
            rec.dev_wer,
            rec.dev_ar_acc,
            a.out.display()
        ),
        None => println!("trained 0 epochs (initial model saved) -> {}", a.out.display()),
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<DimNet> {
    if !path.exists() {
        bail!("missing checkpoint: {}", path.display());
    }
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

struct DecodeRun {
    settings: Settings,
    corpus: GeneratedCorpus,
    model: DimNet,
    decoded: Vec<DecodedUtt>,
    /// Best coarse hypothesis per utterance after the configured pass.
    best: Vec<Vec<usize>>,
    /// Per-utterance hypothesis lists as reported: rescoring fills ctc and lm
    /// scores; single pass leaves them NaN (written as null).
    hyps: Vec<Vec<Hypothesis>>,
    /// Combined per-hypothesis scores, first-pass order.
    totals: Vec<Vec<f64>>,
}

fn run_decode(a: &DecodeArgs) -> Result<DecodeRun> {
    let mut settings = a.config.load()?;
    if let Some(beam) = a.beam {
        settings.decode.beam = beam;
    }
    if let Some(w1) = a.w1 {
        settings.decode.weights.w1 = w1;
    }
    if let Some(w2) = a.w2 {
        settings.decode.weights.w2 = w2;
    }
    if let Some(w3) = a.w3 {
        settings.decode.weights.w3 = w3;
    }
    if a.single_pass {
        settings.decode.single_pass = true;
    }
    settings.validate()?;

    let corpus = load_corpus(&a.data)?;
    let model = load_model(&a.model)?;
    let utts = a.split.pick(&corpus);
    if utts.is_empty() {
        bail!("split `{}` is empty", a.split.name());
    }
    let decoded = decode_set(&model, utts, settings.decode.beam)?;

    let lm = UniformLm {
        n_coarse: model.cfg().n_coarse,
    };
    let mut best = Vec::with_capacity(decoded.len());
    let mut hyps = Vec::with_capacity(decoded.len());
    let mut totals = Vec::with_capacity(decoded.len());
    for d in &decoded {
        if settings.decode.single_pass {
            best.push(d.hyps[0].y_c.clone());
            hyps.push(
                d.hyps
                    .iter()
                    .map(|h| Hypothesis {
                        ctc_logp: f64::NAN,
                        lm_logp: f64::NAN,
                        ..h.clone()
                    })
                    .collect(),
            );
            totals.push(d.hyps.iter().map(|h| h.att_logp).collect());
        } else {
            let r = rescore_decoded(
                d,
                model.cfg().units,
                &corpus.inventory,
                &corpus.lexicon,
                settings.decode.weights,
                &lm,
            )?;
            best.push(r.best.y_c);
            hyps.push(r.scored);
            totals.push(r.totals);
        }
    }
    Ok(DecodeRun {
        settings,
        corpus,
        model,
        decoded,
        best,
        hyps,
        totals,
    })
}

fn accent_records(decoded: &[DecodedUtt]) -> Vec<(String, Vec<f64>, usize)> {
    decoded
        .iter()
        .map(|d| (d.utt_id.clone(), d.accent_posterior.clone(), d.accent_pred))
        .collect()
}

fn decode(a: DecodeArgs) -> Result<()> {
    let run = run_decode(&a)?;
    freeze(&run.settings, &a.out)?;

    let records: Vec<NbestRecord> = run
        .decoded
        .iter()
        .zip(run.best.iter().zip(run.hyps.iter().zip(&run.totals)))
        .map(|(d, (best, (hyps, totals)))| NbestRecord {
            utt_id: d.utt_id.clone(),
            best: best.clone(),
            hyps: hyps.clone(),
            totals: totals.clone(),
        })
        .collect();
    write_nbest_jsonl(&a.out.join("nbest.jsonl"), &records)?;
    write_accent_jsonl(&a.out.join("accents.jsonl"), &accent_records(&run.decoded))?;
    println!(
        "decoded {} `{}` utterances (beam {}, {}) -> {}",
        run.decoded.len(),
        a.split.name(),
        run.settings.decode.beam,
        if run.settings.decode.single_pass {
            "single pass".to_string()
        } else {
            let w = run.settings.decode.weights;
            format!("rescored w=({}, {}, {})", w.w1, w.w2, w.w3)
        },
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let run = run_decode(&a.decode)?;
    freeze(&run.settings, &a.decode.out)?;

    let utts = a.decode.split.pick(&run.corpus);
    let pairs = utts
        .iter()
        .zip(&run.best)
        .map(|(u, h)| (u.y_c.as_slice(), h.as_slice()));
    let wer = corpus_error_rate(pairs);

    let labels: Vec<usize> = utts.iter().map(|u| u.accent).collect();
    let preds: Vec<usize> = run.decoded.iter().map(|d| d.accent_pred).collect();
    let n_accents = run.model.cfg().n_accents;
    let accuracy = accent_accuracy(&preds, &labels, n_accents)?;
    write_accent_csv(&a.decode.out.join("accents.csv"), &accuracy)?;

    let fine_hyps: Vec<Vec<usize>> = run
        .best
        .iter()
        .map(|h| run.corpus.lexicon.expand_to_fine(&run.corpus.inventory, h))
        .collect::<dimnet_core::Result<_>>()?;
    let items: Vec<PhonemeItem<'_>> = utts
        .iter()
        .zip(&fine_hyps)
        .map(|(u, h)| PhonemeItem {
            accent: u.accent,
            r: &u.y_f,
            h,
        })
        .collect();
    let phonemes =
        per_phoneme_report(&items, n_accents, run.corpus.inventory.n_fine(), a.top_k)?;
    write_phoneme_csv(&a.decode.out.join("phonemes.csv"), &phonemes)?;

    let summary = serde_json::json!({
        "split": a.decode.split.name(),
        "n_utts": utts.len(),
        "beam": run.settings.decode.beam,
        "single_pass": run.settings.decode.single_pass,
        "weights": [
            run.settings.decode.weights.w1,
            run.settings.decode.weights.w2,
            run.settings.decode.weights.w3,
        ],
        "wer": wer,
        "accent_accuracy": accuracy.accuracy,
    });
    std::fs::write(
        a.decode.out.join("summary.json"),
        format!("{}\n", serde_json::to_string_pretty(&summary)?),
    )?;
    println!(
        "eval `{}`: WER {:.4}, accent acc {:.4} over {} utterances -> {}",
        a.decode.split.name(),
        wer,
        accuracy.accuracy,
        utts.len(),
        a.decode.out.display()
    );
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let settings = a.config.load()?;
    settings.validate()?;
    let corpus = load_corpus(&a.data)?;
    let base = train_config_for(&settings, &corpus)?;
    let rows = training::run_ablation(&corpus, &base, &settings.ablate.axes, &settings.ablate.seeds)?;
    freeze(&settings, &a.out)?;
    write_ablation_csv(&a.out.join("ablation.csv"), &rows)?;
    println!(
        "ablation: {} rows x {} seeds -> {}",
        rows.len(),
        settings.ablate.seeds.len(),
        a.out.join("ablation.csv").display()
    );
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    let reports = gradient_suite()?;
    let mut worst: f64 = 0.0;
    for r in &reports {
        println!("{:<24} rel err {:.3e}", r.name, r.rel_err);
        worst = worst.max(r.rel_err);
    }
    println!("max relative error: {worst:.3e}");
    if worst > a.tol {
        bail!("max relative error {worst:.3e} exceeds tolerance {:.1e}", a.tol);
    }
    Ok(())
}
