//! Synthetic accented-speech corpus generator.
//!
//! Accents are deterministic perturbations of per-phoneme acoustic templates:
//! each accent owns a small set of fine tokens whose template is pulled toward
//! a confusable target phoneme. Utterances sample coarse tokens, expand them
//! through the lexicon, and emit a few noisy frames per fine token. Everything
//! is a pure function of the spec and its seed.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::{self, Lexicon, UnitInventory, SILENCE_ID};
use crate::Mat;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusSpec {
    pub n_accents: usize,
    /// Total fine vocab size including blank and silence.
    pub n_fine: usize,
    /// Total coarse vocab size including bos/eos/unk.
    pub n_coarse: usize,
    pub feat_dim: usize,
    /// Inclusive range of frames emitted per fine token.
    pub frames_per_unit: (usize, usize),
    /// Inclusive range of coarse tokens per utterance.
    pub utt_len: (usize, usize),
    pub accent_shift_scale: f64,
    pub accent_phoneme_fraction: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// 0 gives uniform accents; values toward 1 concentrate mass on accent 0.
    pub accent_skew: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_accents: 4,
            n_fine: 12,
            n_coarse: 40,
            feat_dim: 16,
            frames_per_unit: (2, 4),
            utt_len: (4, 10),
            accent_shift_scale: 1.5,
            accent_phoneme_fraction: 0.25,
            noise_std: 0.3,
            seed: 2024,
            accent_skew: 0.0,
            n_train: 2000,
            n_dev: 200,
            n_test: 200,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.utt_len.1 == 0 {
            return err("utt_len max of 0".into());
        }
        if self.utt_len.0 == 0 || self.utt_len.0 > self.utt_len.1 {
            return err(format!("utt_len range {:?} is invalid", self.utt_len));
        }
        if self.frames_per_unit.0 == 0 || self.frames_per_unit.0 > self.frames_per_unit.1 {
            return err(format!(
                "frames_per_unit range {:?} is invalid",
                self.frames_per_unit
            ));
        }
        if self.n_fine < 4 {
            return err(format!("n_fine {} must be at least 4", self.n_fine));
        }
        if self.n_coarse < 4 {
            return err(format!("n_coarse {} must be at least 4", self.n_coarse));
        }
        if self.n_accents < 2 {
            return err(format!("n_accents {} must be at least 2", self.n_accents));
        }
        if self.feat_dim == 0 {
            return err("feat_dim must be positive".into());
        }
        if !(self.accent_phoneme_fraction > 0.0 && self.accent_phoneme_fraction <= 1.0) {
            return err(format!(
                "accent_phoneme_fraction {} must be in (0, 1]",
                self.accent_phoneme_fraction
            ));
        }
        if self.accent_phoneme_fraction * (self.n_fine as f64) < 1.0 {
            return err("accent_phoneme_fraction covers less than one fine token".into());
        }
        if self.accent_shift_scale < 0.0 || self.noise_std < 0.0 {
            return err("accent_shift_scale and noise_std must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.accent_skew) {
            return err(format!("accent_skew {} must be in [0, 1)", self.accent_skew));
        }
        Ok(())
    }

    /// Number of fine tokens each accent perturbs.
    fn accented_count(&self) -> usize {
        let usable = self.n_fine - SILENCE_ID - 1;
        ((self.accent_phoneme_fraction * self.n_fine as f64).round() as usize).clamp(1, usable)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    /// T x feat_dim; values are exactly representable as f32 so inline and
    /// binary storage round-trip identically.
    pub frames: Mat,
    pub y_f: Vec<usize>,
    pub y_c: Vec<usize>,
    pub accent: usize,
}

/// Generator internals kept for analysis: the clean templates, every accent's
/// delta table and phoneme set, and the frame-level alignment of each
/// utterance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenMeta {
    pub spec: CorpusSpec,
    /// n_fine x feat_dim clean template per fine token (blank row unused).
    pub templates: Vec<Vec<f64>>,
    /// Per accent: n_fine x feat_dim additive shift, zero off the accented set.
    pub deltas: Vec<Vec<Vec<f64>>>,
    /// Per accent: sorted fine ids it perturbs.
    pub accented: Vec<Vec<usize>>,
    /// Per accent: (perturbed fine id, confusable target fine id) pairs.
    pub confusion_targets: Vec<Vec<(usize, usize)>>,
    /// Minimum Frobenius distance between any two accents' delta tables.
    pub min_pairwise_delta_distance: f64,
    /// utt_id -> per-frame fine token id.
    pub alignments: BTreeMap<String, Vec<usize>>,
}

impl GenMeta {
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub inventory: UnitInventory,
    pub lexicon: Lexicon,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub meta: GenMeta,
}

fn standard_normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

struct Tables {
    templates: Vec<Vec<f64>>,
    deltas: Vec<Vec<Vec<f64>>>,
    accented: Vec<Vec<usize>>,
    confusion: Vec<Vec<(usize, usize)>>,
    min_pairwise: f64,
}

fn frobenius_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut acc = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        for (va, vb) in ra.iter().zip(rb) {
            acc += (va - vb) * (va - vb);
        }
    }
    acc.sqrt()
}

fn build_tables(spec: &CorpusSpec, usable: &[usize]) -> Result<Tables> {
    let mut tmpl_rng = rng::stream(spec.seed, "synthgen/templates");
    let templates: Vec<Vec<f64>> = (0..spec.n_fine)
        .map(|_| standard_normal_vec(&mut tmpl_rng, spec.feat_dim))
        .collect();

    let k = spec.accented_count();
    // Identifiability only binds when accents dominate the noise.
    let enforce = spec.accent_shift_scale > 0.0 && spec.accent_shift_scale >= 5.0 * spec.noise_std;
    for attempt in 0..16 {
        let mut rng = rng::stream(spec.seed, &format!("synthgen/deltas/{attempt}"));
        let mut deltas = vec![vec![vec![0.0; spec.feat_dim]; spec.n_fine]; spec.n_accents];
        let mut accented = Vec::with_capacity(spec.n_accents);
        let mut confusion = Vec::with_capacity(spec.n_accents);
        for a in 0..spec.n_accents {
            let mut pool = usable.to_vec();
            let mut set = Vec::with_capacity(k);
            for _ in 0..k {
                let i = rng.gen_range(0..pool.len());
                set.push(pool.swap_remove(i));
            }
            set.sort_unstable();
            let mut pairs = Vec::with_capacity(k);
            for &p in &set {
                let q = loop {
                    let cand = usable[rng.gen_range(0..usable.len())];
                    if cand != p {
                        break cand;
                    }
                };
                let dir: Vec<f64> = templates[q]
                    .iter()
                    .zip(&templates[p])
                    .map(|(tq, tp)| tq - tp)
                    .collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
                for (d, v) in deltas[a][p].iter_mut().zip(&dir) {
                    *d = spec.accent_shift_scale * v / norm;
                }
                pairs.push((p, q));
            }
            accented.push(set);
            confusion.push(pairs);
        }
        let mut min_pairwise = f64::INFINITY;
        for a in 0..spec.n_accents {
            for b in a + 1..spec.n_accents {
                min_pairwise = min_pairwise.min(frobenius_distance(&deltas[a], &deltas[b]));
            }
        }
        if !enforce || min_pairwise > 2.0 * spec.noise_std {
            return Ok(Tables {
                templates,
                deltas,
                accented,
                confusion,
                min_pairwise,
            });
        }
    }
    Err(Error::Config(
        "could not draw pairwise-distinguishable accent deltas".into(),
    ))
}

fn sample_accent(rng: &mut impl Rng, spec: &CorpusSpec) -> usize {
    if spec.accent_skew == 0.0 {
        return rng.gen_range(0..spec.n_accents);
    }
    let weights: Vec<f64> = (0..spec.n_accents)
        .map(|a| (1.0 - spec.accent_skew).powi(a as i32))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (a, w) in weights.iter().enumerate() {
        if u < *w {
            return a;
        }
        u -= w;
    }
    spec.n_accents - 1
}

fn generate_split(
    spec: &CorpusSpec,
    split: &str,
    count: usize,
    inventory: &UnitInventory,
    lexicon: &Lexicon,
    tables: &Tables,
    alignments: &mut BTreeMap<String, Vec<usize>>,
) -> Result<Vec<Utterance>> {
    let mut rng = rng::stream(spec.seed, &format!("synthgen/split/{split}"));
    let first_word = 3;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let utt_id = format!("{split}-{i:05}");
        let accent = sample_accent(&mut rng, spec);
        let len = rng.gen_range(spec.utt_len.0..=spec.utt_len.1);
        let y_c: Vec<usize> = (0..len)
            .map(|_| rng.gen_range(first_word..spec.n_coarse))
            .collect();
        let y_f = lexicon.expand_to_fine(inventory, &y_c)?;

        let mut alignment = Vec::new();
        let mut rows: Vec<f64> = Vec::new();
        for (j, &f) in y_f.iter().enumerate() {
            let mut n = rng.gen_range(spec.frames_per_unit.0..=spec.frames_per_unit.1);
            // An adjacent repeat needs a spare frame for the separating blank.
            if j > 0 && y_f[j - 1] == f {
                n = n.max(2);
            }
            let accented = tables.accented[accent].binary_search(&f).is_ok();
            for _ in 0..n {
                alignment.push(f);
                for d in 0..spec.feat_dim {
                    let mut v = tables.templates[f][d];
                    if accented {
                        v += tables.deltas[accent][f][d];
                    }
                    if spec.noise_std > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v += spec.noise_std * z;
                    }
                    rows.push(v as f32 as f64);
                }
            }
        }
        let t_len = alignment.len();
        let frames = Array2::from_shape_vec((t_len, spec.feat_dim), rows)
            .map_err(|e| Error::Shape(e.to_string()))?;
        alignments.insert(utt_id.clone(), alignment);
        out.push(Utterance {
            utt_id,
            frames,
            y_f,
            y_c,
            accent,
        });
    }
    Ok(out)
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let mut inv_rng = rng::stream(spec.seed, "synthgen/inventory");
    let (inventory, lexicon) =
        vocab::generate_inventory(spec.n_fine - 2, spec.n_coarse - 3, &mut inv_rng)?;
    let usable: Vec<usize> = (SILENCE_ID + 1..spec.n_fine).collect();
    let tables = build_tables(spec, &usable)?;

    let mut alignments = BTreeMap::new();
    let train = generate_split(
        spec,
        "train",
        spec.n_train,
        &inventory,
        &lexicon,
        &tables,
        &mut alignments,
    )?;
    let dev = generate_split(
        spec,
        "dev",
        spec.n_dev,
        &inventory,
        &lexicon,
        &tables,
        &mut alignments,
    )?;
    let test = generate_split(
        spec,
        "test",
        spec.n_test,
        &inventory,
        &lexicon,
        &tables,
        &mut alignments,
    )?;

    let meta = GenMeta {
        spec: spec.clone(),
        templates: tables.templates,
        deltas: tables.deltas,
        accented: tables.accented,
        confusion_targets: tables.confusion,
        min_pairwise_delta_distance: tables.min_pairwise,
        alignments,
    };
    Ok(GeneratedCorpus {
        inventory,
        lexicon,
        train,
        dev,
        test,
        meta,
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    utt_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    frames: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    frames_path: Option<String>,
    y_f: Vec<usize>,
    y_c: Vec<usize>,
    accent: usize,
}

/// Where a manifest keeps its frame matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameStorage {
    /// Frames embedded in the manifest line as JSON arrays.
    Inline,
    /// One binary file per utterance next to the manifest.
    External,
}

fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn rows_to_mat(rows: &[Vec<f64>]) -> Result<Mat> {
    let t = rows.len();
    let f = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != f) {
        return Err(Error::Shape("ragged frame rows".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((t, f), flat).map_err(|e| Error::Shape(e.to_string()))
}

/// Binary feature file: little-endian i32 T, i32 F, then T*F f32 row-major.
pub fn write_features(path: &Path, frames: &Mat) -> Result<()> {
    let (t, f) = frames.dim();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(t as i32).to_le_bytes())?;
    w.write_all(&(f as i32).to_le_bytes())?;
    for v in frames.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Mat> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 8];
    r.read_exact(&mut head)?;
    let t = i32::from_le_bytes(head[0..4].try_into().unwrap());
    let f = i32::from_le_bytes(head[4..8].try_into().unwrap());
    if t < 0 || f <= 0 {
        return Err(Error::Shape(format!("feature header T={t} F={f}")));
    }
    let (t, f) = (t as usize, f as usize);
    let mut bytes = vec![0u8; t * f * 4];
    r.read_exact(&mut bytes)?;
    let flat: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((t, f), flat).map_err(|e| Error::Shape(e.to_string()))
}

pub fn write_manifest(path: &Path, utterances: &[Utterance], storage: FrameStorage) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut w = BufWriter::new(File::create(path)?);
    for u in utterances {
        let record = match storage {
            FrameStorage::Inline => ManifestRecord {
                utt_id: u.utt_id.clone(),
                frames: Some(mat_to_rows(&u.frames)),
                frames_path: None,
                y_f: u.y_f.clone(),
                y_c: u.y_c.clone(),
                accent: u.accent,
            },
            FrameStorage::External => {
                let name = format!("{}.feat", u.utt_id);
                write_features(&dir.join(&name), &u.frames)?;
                ManifestRecord {
                    utt_id: u.utt_id.clone(),
                    frames: None,
                    frames_path: Some(name),
                    y_f: u.y_f.clone(),
                    y_c: u.y_c.clone(),
                    accent: u.accent,
                }
            }
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<Utterance>> {
    let dir: PathBuf = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let frames = match (&record.frames, &record.frames_path) {
            (Some(rows), None) => rows_to_mat(rows).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?,
            (None, Some(rel)) => read_features(&dir.join(rel))?,
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "need exactly one of frames, frames_path".into(),
                })
            }
        };
        out.push(Utterance {
            utt_id: record.utt_id,
            frames,
            y_f: record.y_f,
            y_c: record.y_c,
            accent: record.accent,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            n_train: 60,
            n_dev: 20,
            n_test: 20,
            seed: 7,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let mut s = small_spec();
        s.utt_len = (0, 0);
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = small_spec();
        s.n_accents = 1;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = small_spec();
        s.accent_phoneme_fraction = 0.0;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = small_spec();
        s.accent_phoneme_fraction = 0.05;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn corpus_is_lexicon_consistent_feasible_and_disjoint() {
        let spec = CorpusSpec {
            frames_per_unit: (1, 2),
            ..small_spec()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let mut seen = std::collections::HashSet::new();
        for u in corpus
            .train
            .iter()
            .chain(&corpus.dev)
            .chain(&corpus.test)
        {
            assert!(seen.insert(u.utt_id.clone()), "duplicate id {}", u.utt_id);
            let expanded = corpus
                .lexicon
                .expand_to_fine(&corpus.inventory, &u.y_c)
                .unwrap();
            assert_eq!(expanded, u.y_f, "{}", u.utt_id);
            assert!(
                ctc::feasible(u.frames.dim().0, &u.y_f),
                "{} has T={} for y_f={:?}",
                u.utt_id,
                u.frames.dim().0,
                u.y_f
            );
            let align = &corpus.meta.alignments[&u.utt_id];
            assert_eq!(align.len(), u.frames.dim().0);
            assert_eq!(ctc::collapse(align, usize::MAX), collapse_repeats(&u.y_f));
        }
        assert_eq!(corpus.train.len(), 60);
        assert_eq!(corpus.dev.len(), 20);
        assert_eq!(corpus.test.len(), 20);
    }

    /// Adjacent repeats in y_f merge in the alignment collapse, so compare
    /// against the repeat-merged reference.
    fn collapse_repeats(seq: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for &s in seq {
            if out.last() != Some(&s) {
                out.push(s);
            }
        }
        out
    }

    #[test]
    fn zero_noise_zero_shift_makes_frames_a_function_of_y_f() {
        let spec = CorpusSpec {
            noise_std: 0.0,
            accent_shift_scale: 0.0,
            frames_per_unit: (2, 2),
            utt_len: (1, 1),
            n_train: 200,
            n_dev: 0,
            n_test: 0,
            ..small_spec()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let mut by_y_f: BTreeMap<Vec<usize>, &Utterance> = BTreeMap::new();
        let mut matched = 0;
        for u in &corpus.train {
            if let Some(prev) = by_y_f.get(&u.y_f) {
                assert_eq!(prev.frames, u.frames, "{} vs {}", prev.utt_id, u.utt_id);
                matched += 1;
            } else {
                by_y_f.insert(u.y_f.clone(), u);
            }
        }
        assert!(matched > 0, "no repeated y_f in 200 one-word utterances");
    }

    #[test]
    fn same_seed_gives_byte_identical_manifests() {
        let spec = small_spec();
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.jsonl");
        let pb = dir.path().join("b.jsonl");
        write_manifest(&pa, &a.train, FrameStorage::Inline).unwrap();
        write_manifest(&pb, &b.train, FrameStorage::Inline).unwrap();
        let ba = std::fs::read(&pa).unwrap();
        let bb = std::fs::read(&pb).unwrap();
        assert!(!ba.is_empty());
        assert_eq!(ba, bb);
    }

    #[test]
    fn accent_deltas_are_identifiable_at_default_scale() {
        let spec = small_spec();
        let corpus = generate_corpus(&spec).unwrap();
        assert!(spec.accent_shift_scale >= 5.0 * spec.noise_std);
        assert!(corpus.meta.min_pairwise_delta_distance > 2.0 * spec.noise_std);
        for (a, set) in corpus.meta.accented.iter().enumerate() {
            assert_eq!(set.len(), spec.accented_count(), "accent {a}");
            for &p in set {
                assert!(p > SILENCE_ID && p < spec.n_fine);
                let norm: f64 = corpus.meta.deltas[a][p]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                assert!((norm - spec.accent_shift_scale).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn accent_skew_tilts_the_marginal() {
        let spec = CorpusSpec {
            accent_skew: 0.6,
            n_train: 400,
            ..small_spec()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let mut counts = vec![0usize; spec.n_accents];
        for u in &corpus.train {
            counts[u.accent] += 1;
        }
        assert!(counts[0] > counts[spec.n_accents - 1] * 2, "{counts:?}");
    }

    #[test]
    fn manifest_round_trips_in_both_storage_modes() {
        let spec = CorpusSpec {
            n_train: 30,
            n_dev: 0,
            n_test: 0,
            ..small_spec()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for storage in [FrameStorage::Inline, FrameStorage::External] {
            let path = dir.path().join(format!("{storage:?}.jsonl"));
            write_manifest(&path, &corpus.train, storage).unwrap();
            let back = read_manifest(&path).unwrap();
            assert_eq!(back, corpus.train, "{storage:?}");
        }
    }

    #[test]
    fn truncated_manifest_reports_the_line() {
        let spec = CorpusSpec {
            n_train: 5,
            n_dev: 0,
            n_test: 0,
            ..small_spec()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_manifest(&path, &corpus.train, FrameStorage::Inline).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
        match read_manifest(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn empty_manifest_is_an_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn gen_meta_round_trips() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen_meta.json");
        corpus.meta.write_file(&path).unwrap();
        let back = GenMeta::read_file(&path).unwrap();
        assert_eq!(back.accented, corpus.meta.accented);
        assert_eq!(back.alignments, corpus.meta.alignments);
        assert_eq!(back.spec, corpus.meta.spec);
    }

    /// Table-informed nearest-centroid probe: score each utterance's
    /// per-phoneme mean frames against every accent's shifted templates. The
    /// corpus is only considered learnable if this oracle separates accents
    /// almost perfectly on held-out data.
    #[test]
    fn linear_probe_separates_accents() {
        let spec = CorpusSpec {
            utt_len: (8, 14),
            ..CorpusSpec::default()
        };
        assert_eq!(spec.n_accents, 4);
        assert_eq!(spec.n_fine, 12);
        assert_eq!(spec.n_coarse, 40);
        assert_eq!(spec.n_train, 2000);
        let corpus = generate_corpus(&spec).unwrap();
        let meta = &corpus.meta;
        let union: Vec<usize> = {
            let mut u: Vec<usize> = meta.accented.iter().flatten().copied().collect();
            u.sort_unstable();
            u.dedup();
            u
        };
        let mut correct = 0;
        for u in &corpus.dev {
            let align = &meta.alignments[&u.utt_id];
            let mut best = (f64::INFINITY, 0usize);
            for a in 0..spec.n_accents {
                let mut score = 0.0;
                for &p in &union {
                    let rows: Vec<usize> = align
                        .iter()
                        .enumerate()
                        .filter(|(_, &f)| f == p)
                        .map(|(t, _)| t)
                        .collect();
                    if rows.is_empty() {
                        continue;
                    }
                    for d in 0..spec.feat_dim {
                        let mean: f64 =
                            rows.iter().map(|&t| u.frames[(t, d)]).sum::<f64>() / rows.len() as f64;
                        let centroid = meta.templates[p][d] + meta.deltas[a][p][d];
                        score += (mean - centroid) * (mean - centroid);
                    }
                }
                if score < best.0 {
                    best = (score, a);
                }
            }
            if best.1 == u.accent {
                correct += 1;
            }
        }
        let acc = correct as f64 / corpus.dev.len() as f64;
        assert!(acc >= 0.99, "probe accuracy {acc}");
    }
}
