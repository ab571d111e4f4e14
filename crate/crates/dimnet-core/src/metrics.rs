//! Edit-distance scoring, accent accuracy, and per-token error diagnosis.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::vocab::Lexicon;

/// One aligned step of the deterministic edit alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignOp {
    /// (ref index, hyp index)
    Match(usize, usize),
    Sub(usize, usize),
    Del(usize),
    Ins(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditStats {
    pub rate: f64,
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
    /// Set when the reference was empty but the hypothesis was not; the rate
    /// is then the raw insertion count.
    pub degenerate: bool,
}

impl EditStats {
    pub fn errors(&self) -> usize {
        self.sub + self.del + self.ins
    }
}

/// Unit-cost Levenshtein alignment, canonicalized to the minimum-cost path
/// with the fewest insertions (equivalently the most substitutions, since
/// del - ins is pinned by the length gap). That choice makes the edit
/// statistics covariant under swapping ref and hyp: substitutions stay put
/// and deletions exchange with insertions. Remaining backtrace ties resolve
/// substitution before deletion before insertion.
pub fn align(r: &[usize], h: &[usize]) -> Vec<AlignOp> {
    let (n, m) = (r.len(), h.len());
    // Lexicographic objective per cell: (edit cost, insertions used). Both
    // fields are additive along a path, so the cellwise min is the global
    // one.
    let mut d = vec![vec![(0u32, 0u32); m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = (i as u32, 0);
    }
    for j in 0..=m {
        d[0][j] = (j as u32, j as u32);
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[i - 1][j - 1];
            let sub = (diag.0 + u32::from(r[i - 1] != h[j - 1]), diag.1);
            let del = (d[i - 1][j].0 + 1, d[i - 1][j].1);
            let ins = (d[i][j - 1].0 + 1, d[i][j - 1].1 + 1);
            d[i][j] = sub.min(del).min(ins);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i][j];
        if i > 0 && j > 0 {
            let diag = d[i - 1][j - 1];
            if (diag.0 + u32::from(r[i - 1] != h[j - 1]), diag.1) == here {
                ops.push(if r[i - 1] == h[j - 1] {
                    AlignOp::Match(i - 1, j - 1)
                } else {
                    AlignOp::Sub(i - 1, j - 1)
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && (d[i - 1][j].0 + 1, d[i - 1][j].1) == here {
            ops.push(AlignOp::Del(i - 1));
            i -= 1;
        } else {
            ops.push(AlignOp::Ins(j - 1));
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

pub fn edit_error_rate(r: &[usize], h: &[usize]) -> EditStats {
    let ops = align(r, h);
    let mut s = EditStats {
        rate: 0.0,
        sub: 0,
        del: 0,
        ins: 0,
        degenerate: false,
    };
    for op in &ops {
        match op {
            AlignOp::Match(..) => {}
            AlignOp::Sub(..) => s.sub += 1,
            AlignOp::Del(_) => s.del += 1,
            AlignOp::Ins(_) => s.ins += 1,
        }
    }
    if r.is_empty() {
        s.degenerate = !h.is_empty();
        s.rate = h.len() as f64;
    } else {
        s.rate = s.errors() as f64 / r.len() as f64;
    }
    s
}

/// Pooled error rate over a corpus: total errors over total reference
/// length. Utterances with empty references contribute insertions only.
pub fn corpus_error_rate<'a, I>(pairs: I) -> f64
where
    I: IntoIterator<Item = (&'a [usize], &'a [usize])>,
{
    let mut errors = 0usize;
    let mut len = 0usize;
    for (r, h) in pairs {
        errors += edit_error_rate(r, h).errors();
        len += r.len();
    }
    if len == 0 {
        return if errors == 0 { 0.0 } else { errors as f64 };
    }
    errors as f64 / len as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerAccent {
    pub accent: usize,
    pub count: usize,
    pub correct: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub per_accent: Vec<PerAccent>,
}

pub fn accent_accuracy(preds: &[usize], labels: &[usize], n_accents: usize) -> Result<AccuracyReport> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Shape("no labels to score".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_accents) {
        return Err(Error::Shape(format!("label {bad} outside {n_accents} accents")));
    }
    let mut per: Vec<PerAccent> = (0..n_accents)
        .map(|a| PerAccent {
            accent: a,
            count: 0,
            correct: 0,
            recall: 0.0,
        })
        .collect();
    let mut correct = 0usize;
    for (&p, &l) in preds.iter().zip(labels) {
        per[l].count += 1;
        if p == l {
            per[l].correct += 1;
            correct += 1;
        }
    }
    for row in &mut per {
        row.recall = if row.count == 0 {
            0.0
        } else {
            row.correct as f64 / row.count as f64
        };
    }
    Ok(AccuracyReport {
        accuracy: correct as f64 / labels.len() as f64,
        per_accent: per,
    })
}

/// One scored utterance for the per-token report.
pub struct PhonemeItem<'a> {
    pub accent: usize,
    pub r: &'a [usize],
    pub h: &'a [usize],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeRow {
    pub accent: usize,
    pub token: usize,
    pub occurrences: usize,
    pub errors: usize,
    pub per: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeReport {
    /// One row per (accent, token) with at least one reference occurrence.
    pub rows: Vec<PhonemeRow>,
    /// Per accent: up to `top_k` erroring tokens, highest PER first, ties by
    /// token id. Error-free accents get an empty list.
    pub top: Vec<Vec<usize>>,
}

impl PhonemeReport {
    pub fn row(&self, accent: usize, token: usize) -> Option<&PhonemeRow> {
        self.rows
            .iter()
            .find(|r| r.accent == accent && r.token == token)
    }
}

/// Attribute errors to reference tokens through the deterministic alignment:
/// substitutions and deletions land on their reference token, insertions on
/// the following one (the last token when trailing).
pub fn per_phoneme_report(
    items: &[PhonemeItem<'_>],
    n_accents: usize,
    n_tokens: usize,
    top_k: usize,
) -> Result<PhonemeReport> {
    let mut occ = vec![vec![0usize; n_tokens]; n_accents];
    let mut err = vec![vec![0usize; n_tokens]; n_accents];
    for item in items {
        if item.accent >= n_accents {
            return Err(Error::Shape(format!(
                "accent {} outside {n_accents} accents",
                item.accent
            )));
        }
        if let Some(&bad) = item.r.iter().find(|&&t| t >= n_tokens) {
            return Err(Error::Shape(format!("token {bad} outside {n_tokens} tokens")));
        }
        for &t in item.r {
            occ[item.accent][t] += 1;
        }
        if item.r.is_empty() {
            continue;
        }
        for i in attributed_error_indices(item.r, item.h) {
            err[item.accent][item.r[i]] += 1;
        }
    }
    let mut rows = Vec::new();
    let mut top = Vec::with_capacity(n_accents);
    for a in 0..n_accents {
        let mut scored: Vec<PhonemeRow> = (0..n_tokens)
            .filter(|&t| occ[a][t] > 0)
            .map(|t| PhonemeRow {
                accent: a,
                token: t,
                occurrences: occ[a][t],
                errors: err[a][t],
                per: err[a][t] as f64 / occ[a][t] as f64,
            })
            .collect();
        let mut ranked: Vec<&PhonemeRow> = scored.iter().filter(|r| r.errors > 0).collect();
        ranked.sort_by(|x, y| {
            y.per
                .partial_cmp(&x.per)
                .expect("finite rates")
                .then(x.token.cmp(&y.token))
        });
        top.push(ranked.iter().take(top_k).map(|r| r.token).collect());
        rows.append(&mut scored);
    }
    Ok(PhonemeReport { rows, top })
}

/// Reference indices charged with an error, one entry per error: each
/// substitution or deletion charges its own token, each insertion the next
/// reference token still ahead of it (the last token when trailing).
fn attributed_error_indices(r: &[usize], h: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut next_ref = 0usize;
    for op in align(r, h) {
        match op {
            AlignOp::Match(i, _) => next_ref = i + 1,
            AlignOp::Sub(i, _) | AlignOp::Del(i) => {
                out.push(i);
                next_ref = i + 1;
            }
            AlignOp::Ins(_) => out.push(next_ref.min(r.len() - 1)),
        }
    }
    out
}

/// Coarse ids whose fine expansion intersects `fine_set`.
pub fn words_containing(lexicon: &Lexicon, fine_set: &BTreeSet<usize>) -> BTreeSet<usize> {
    lexicon
        .entries()
        .iter()
        .filter(|(_, fine)| fine.iter().any(|t| fine_set.contains(t)))
        .map(|(&c, _)| c)
        .collect()
}

/// Error rates of reference words inside and outside a designated set,
/// using the same attribution rule as the per-token report. Returns
/// (rate over words in the set, rate over all words).
pub fn word_subset_error_rate(
    pairs: &[(&[usize], &[usize])],
    subset: &BTreeSet<usize>,
) -> (f64, f64) {
    let (mut sub_err, mut sub_n, mut all_err, mut all_n) = (0usize, 0usize, 0usize, 0usize);
    for (r, h) in pairs {
        all_n += r.len();
        sub_n += r.iter().filter(|t| subset.contains(t)).count();
        if r.is_empty() {
            continue;
        }
        for i in attributed_error_indices(r, h) {
            all_err += 1;
            if subset.contains(&r[i]) {
                sub_err += 1;
            }
        }
    }
    let rate = |e: usize, n: usize| if n == 0 { 0.0 } else { e as f64 / n as f64 };
    (rate(sub_err, sub_n), rate(all_err, all_n))
}

/// CSV with header `accent,count,correct,recall`.
pub fn write_accent_csv(path: &Path, report: &AccuracyReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["accent", "count", "correct", "recall"])?;
    for row in &report.per_accent {
        w.write_record([
            row.accent.to_string(),
            row.count.to_string(),
            row.correct.to_string(),
            format!("{:.6}", row.recall),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// CSV with header `accent,token,occurrences,errors,per`.
pub fn write_phoneme_csv(path: &Path, report: &PhonemeReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["accent", "token", "occurrences", "errors", "per"])?;
    for row in &report.rows {
        w.write_record([
            row.accent.to_string(),
            row.token.to_string(),
            row.occurrences.to_string(),
            row.errors.to_string(),
            format!("{:.6}", row.per),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn basic_rates_and_counts() {
        let s = edit_error_rate(&[1, 2, 3], &[1, 2, 3]);
        assert_eq!((s.rate, s.sub, s.del, s.ins), (0.0, 0, 0, 0));
        assert!(!s.degenerate);

        let s = edit_error_rate(&[1, 2, 3], &[1, 9, 3]);
        assert_eq!((s.sub, s.del, s.ins), (1, 0, 0));
        assert!((s.rate - 1.0 / 3.0).abs() < 1e-15);

        let s = edit_error_rate(&[1, 2], &[]);
        assert_eq!((s.rate, s.sub, s.del, s.ins), (1.0, 0, 2, 0));

        let s = edit_error_rate(&[], &[]);
        assert_eq!(s.rate, 0.0);
        assert!(!s.degenerate);

        let s = edit_error_rate(&[], &[4, 5, 6]);
        assert_eq!(s.rate, 3.0);
        assert_eq!(s.ins, 3);
        assert!(s.degenerate);
    }

    #[test]
    fn backtrace_prefers_substitution_over_del_ins() {
        // Swapped tokens admit (S,D,I) = (2,0,0) and (0,1,1) at equal cost;
        // the substitution preference must pick the former.
        let s = edit_error_rate(&[1, 2], &[2, 1]);
        assert_eq!((s.sub, s.del, s.ins), (2, 0, 0));

        let ops = align(&[1, 2], &[2, 1]);
        assert_eq!(ops, vec![AlignOp::Sub(0, 0), AlignOp::Sub(1, 1)]);
    }

    proptest! {
        // The canonical alignment maximizes substitutions among min-cost
        // paths, so the breakdown itself is covariant under swapping ref and
        // hyp, not just the total.
        #[test]
        fn swap_keeps_subs_and_exchanges_del_with_ins(
            r in proptest::collection::vec(0usize..5, 0..12),
            h in proptest::collection::vec(0usize..5, 0..12),
        ) {
            let fwd = edit_error_rate(&r, &h);
            let rev = edit_error_rate(&h, &r);
            prop_assert_eq!(fwd.sub, rev.sub);
            prop_assert_eq!(fwd.del, rev.ins);
            prop_assert_eq!(fwd.ins, rev.del);
            prop_assert_eq!(edit_error_rate(&r, &r).errors(), 0);
        }
    }

    #[test]
    fn accuracy_and_per_accent_tally() {
        let rep = accent_accuracy(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(rep.accuracy, 1.0);
        let rep = accent_accuracy(&[0, 0, 1, 1], &[0, 1, 1, 0], 2).unwrap();
        assert_eq!(rep.accuracy, 0.5);
        assert!(accent_accuracy(&[0], &[0, 1], 2).is_err());
        assert!(accent_accuracy(&[], &[], 2).is_err());

        // Random predictions against an independent tally.
        let mut rng = crate::rng::stream(77, "metrics-tally");
        let labels: Vec<usize> = (0..200).map(|_| rng.gen_range(0..4)).collect();
        let preds: Vec<usize> = (0..200).map(|_| rng.gen_range(0..4)).collect();
        let rep = accent_accuracy(&preds, &labels, 4).unwrap();
        for a in 0..4 {
            let count = labels.iter().filter(|&&l| l == a).count();
            let correct = labels
                .iter()
                .zip(&preds)
                .filter(|(&l, &p)| l == a && p == a)
                .count();
            assert_eq!(rep.per_accent[a].count, count);
            assert_eq!(rep.per_accent[a].correct, correct);
            assert!((rep.per_accent[a].recall - correct as f64 / count as f64).abs() < 1e-15);
        }
        let total: usize = rep.per_accent.iter().map(|r| r.count).sum();
        assert_eq!(total, labels.len());
    }

    #[test]
    fn insertion_attribution_follows_the_next_reference_token() {
        // Insertion between 5 and 6 lands on 6; a trailing insertion lands
        // on the last reference token.
        let items = [PhonemeItem {
            accent: 0,
            r: &[5, 6],
            h: &[5, 9, 6],
        }];
        let rep = per_phoneme_report(&items, 1, 10, 3).unwrap();
        assert_eq!(rep.row(0, 6).unwrap().errors, 1);
        assert_eq!(rep.row(0, 5).unwrap().errors, 0);

        let items = [PhonemeItem {
            accent: 0,
            r: &[5],
            h: &[5, 9],
        }];
        let rep = per_phoneme_report(&items, 1, 10, 3).unwrap();
        assert_eq!(rep.row(0, 5).unwrap().errors, 1);
    }

    #[test]
    fn planted_corruption_tops_the_report() {
        let mut rng = crate::rng::stream(78, "metrics-planted");
        let planted: [Vec<usize>; 2] = [vec![3, 7], vec![4, 8]];
        let mut items_data = Vec::new();
        for _ in 0..300 {
            let accent = rng.gen_range(0..2usize);
            let r: Vec<usize> = (0..10).map(|_| rng.gen_range(2..10)).collect();
            let h: Vec<usize> = r
                .iter()
                .map(|&t| {
                    let p = if planted[accent].contains(&t) { 0.8 } else { 0.04 };
                    if rng.gen_bool(p) {
                        11
                    } else {
                        t
                    }
                })
                .collect();
            items_data.push((accent, r, h));
        }
        let items: Vec<PhonemeItem> = items_data
            .iter()
            .map(|(a, r, h)| PhonemeItem {
                accent: *a,
                r,
                h,
            })
            .collect();
        let rep = per_phoneme_report(&items, 2, 12, 2).unwrap();
        for (a, want) in planted.iter().enumerate() {
            let mut got = rep.top[a].clone();
            got.sort_unstable();
            assert_eq!(&got, want, "accent {a}");
        }
    }

    #[test]
    fn clean_corpus_reports_nothing() {
        let items = [
            PhonemeItem {
                accent: 0,
                r: &[2, 3, 4],
                h: &[2, 3, 4],
            },
            PhonemeItem {
                accent: 1,
                r: &[5],
                h: &[5],
            },
        ];
        let rep = per_phoneme_report(&items, 2, 6, 5).unwrap();
        assert!(rep.rows.iter().all(|r| r.errors == 0 && r.per == 0.0));
        assert!(rep.top.iter().all(Vec::is_empty));

        let one = [PhonemeItem {
            accent: 0,
            r: &[1, 1, 1],
            h: &[1, 2],
        }];
        let rep = per_phoneme_report(&one, 1, 3, 5).unwrap();
        assert_eq!(rep.rows.len(), 1);
        assert_eq!(rep.rows[0].occurrences, 3);
    }

    #[test]
    fn corpus_rate_pools_over_utterances() {
        let pairs: Vec<(&[usize], &[usize])> = vec![
            (&[1, 2, 3][..], &[1, 2, 3][..]),
            (&[1, 2][..], &[1, 9][..]),
        ];
        let rate = corpus_error_rate(pairs);
        assert!((rate - 0.2).abs() < 1e-15);
        assert_eq!(corpus_error_rate(Vec::<(&[usize], &[usize])>::new()), 0.0);
    }

    #[test]
    fn word_subset_rates_split_cleanly() {
        let subset: BTreeSet<usize> = [4].into();
        let pairs: Vec<(&[usize], &[usize])> = vec![
            (&[4, 5][..], &[9, 5][..]),
            (&[5, 4][..], &[5, 9][..]),
            (&[5, 5][..], &[5, 5][..]),
        ];
        let (inside, overall) = word_subset_error_rate(&pairs, &subset);
        assert_eq!(inside, 1.0);
        assert!((overall - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn csv_reports_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rep = accent_accuracy(&[0, 1, 1], &[0, 1, 0], 2).unwrap();
        let path = dir.path().join("accents.csv");
        write_accent_csv(&path, &rep).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("accent,count,correct,recall"));
        assert_eq!(lines.clone().count(), 2);
        assert!(lines.next().unwrap().starts_with("0,2,1,"));

        let items = [PhonemeItem {
            accent: 0,
            r: &[2, 3],
            h: &[2, 9],
        }];
        let prep = per_phoneme_report(&items, 1, 4, 2).unwrap();
        let ppath = dir.path().join("phonemes.csv");
        write_phoneme_csv(&ppath, &prep).unwrap();
        let text = std::fs::read_to_string(&ppath).unwrap();
        assert!(text.starts_with("accent,token,occurrences,errors,per\n"));
        assert!(text.contains("0,3,1,1,1.000000"));
    }
}
