//! Fine-grained CTC branch: loss, hypothesis scoring, greedy frame decoding,
//! and the Regular rule that turns a frame sequence with blanks into
//! frame-level aligned text.
//!
//! All probability work happens in the log domain over `T x V` matrices of
//! per-frame log-probabilities, where column `blank` is the blank token.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::Mat;

/// log(exp(a) + exp(b)) with -inf handled exactly.
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Minimum frame count that admits any alignment path for `labels`:
/// one frame per label plus a separating blank between adjacent duplicates.
pub fn min_frames(labels: &[usize]) -> usize {
    let dups = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + dups
}

pub fn feasible(t_len: usize, labels: &[usize]) -> bool {
    t_len >= min_frames(labels)
}

fn validate(log_probs: &Mat, labels: &[usize], blank: usize) -> Result<()> {
    let (_, v) = log_probs.dim();
    if blank >= v {
        return Err(Error::Shape(format!("ctc: blank {blank} with {v} classes")));
    }
    for &l in labels {
        if l >= v {
            return Err(Error::Shape(format!("ctc: label {l} with {v} classes")));
        }
        if l == blank {
            return Err(Error::Shape("ctc: label sequence contains blank".into()));
        }
    }
    Ok(())
}

/// Negative log-likelihood of `labels` plus its gradient with respect to
/// every log-probability entry. Infeasible labels give `+inf` loss and a
/// zero gradient.
pub fn ctc_forward_backward(
    log_probs: &Mat,
    labels: &[usize],
    blank: usize,
) -> Result<(f64, Mat)> {
    validate(log_probs, labels, blank)?;
    let (t_len, v) = log_probs.dim();
    if t_len == 0 {
        return Err(Error::Shape("ctc: zero frames".into()));
    }
    if !feasible(t_len, labels) {
        return Ok((f64::INFINITY, Array2::zeros((t_len, v))));
    }

    // Blank-interleaved extended labels: blank, y1, blank, y2, ..., blank.
    let s_len = 2 * labels.len() + 1;
    let ext = |s: usize| -> usize {
        if s % 2 == 0 {
            blank
        } else {
            labels[s / 2]
        }
    };
    let skip_ok = |s: usize| -> bool { s >= 2 && ext(s) != blank && ext(s) != ext(s - 2) };

    let ninf = f64::NEG_INFINITY;
    let mut alpha = Array2::from_elem((t_len, s_len), ninf);
    alpha[(0, 0)] = log_probs[(0, blank)];
    if s_len > 1 {
        alpha[(0, 1)] = log_probs[(0, ext(1))];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1, s)];
            if s >= 1 {
                acc = log_add(acc, alpha[(t - 1, s - 1)]);
            }
            if skip_ok(s) {
                acc = log_add(acc, alpha[(t - 1, s - 2)]);
            }
            alpha[(t, s)] = acc + log_probs[(t, ext(s))];
        }
    }
    let mut log_p = alpha[(t_len - 1, s_len - 1)];
    if s_len >= 2 {
        log_p = log_add(log_p, alpha[(t_len - 1, s_len - 2)]);
    }
    if log_p == ninf {
        // Feasible in frame count but every path has zero probability; only
        // possible if some log-prob is -inf.
        return Ok((f64::INFINITY, Array2::zeros((t_len, v))));
    }

    // beta includes the emission at its own frame, mirroring alpha.
    let mut beta = Array2::from_elem((t_len, s_len), ninf);
    beta[(t_len - 1, s_len - 1)] = log_probs[(t_len - 1, blank)];
    if s_len >= 2 {
        beta[(t_len - 1, s_len - 2)] = log_probs[(t_len - 1, ext(s_len - 2))];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1, s)];
            if s + 1 < s_len {
                acc = log_add(acc, beta[(t + 1, s + 1)]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = log_add(acc, beta[(t + 1, s + 2)]);
            }
            beta[(t, s)] = acc + log_probs[(t, ext(s))];
        }
    }

    // dL/d log_probs[t, k] = -sum_{s: ext(s)=k} exp(alpha + beta - lp - logP).
    let mut grad = Array2::zeros((t_len, v));
    for t in 0..t_len {
        let mut per_class = vec![ninf; v];
        for s in 0..s_len {
            let k = ext(s);
            let through = alpha[(t, s)] + beta[(t, s)] - log_probs[(t, k)];
            per_class[k] = log_add(per_class[k], through);
        }
        for k in 0..v {
            if per_class[k] != ninf {
                grad[(t, k)] = -(per_class[k] - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// Loss only; see [`ctc_forward_backward`].
pub fn ctc_loss(log_probs: &Mat, labels: &[usize], blank: usize) -> Result<f64> {
    ctc_forward_backward(log_probs, labels, blank).map(|(l, _)| l)
}

/// `log P(labels | log_probs)`; `-inf` when infeasible.
pub fn ctc_score(log_probs: &Mat, labels: &[usize], blank: usize) -> Result<f64> {
    ctc_loss(log_probs, labels, blank).map(|l| -l)
}

/// Per-frame argmax with blanks and repeats retained. Ties break toward the
/// lowest class index.
pub fn greedy_frames(log_probs: &Mat) -> Vec<usize> {
    log_probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Standard CTC collapse: merge adjacent repeats, then drop blanks.
pub fn collapse(frames: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &f in frames {
        if Some(f) != prev && f != blank {
            out.push(f);
        }
        prev = Some(f);
    }
    out
}

/// The Regular rule: each blank takes the nearest following non-blank id;
/// trailing blanks, which have none, take the nearest preceding non-blank id.
/// The output has no blanks and keeps length `T`.
pub fn regularize(frames: &[usize], blank: usize) -> Result<Vec<usize>> {
    if frames.is_empty() {
        return Err(Error::Shape("regularize: empty frame sequence".into()));
    }
    if frames.iter().all(|&f| f == blank) {
        return Err(Error::AllBlank);
    }
    let mut out = vec![usize::MAX; frames.len()];
    let mut next = None;
    for t in (0..frames.len()).rev() {
        if frames[t] != blank {
            next = Some(frames[t]);
        }
        if let Some(n) = next {
            out[t] = n;
        }
    }
    // Only trailing positions can still be unset; back-fill from the last
    // non-blank to their left.
    let mut prev = None;
    for t in 0..frames.len() {
        if frames[t] != blank {
            prev = Some(frames[t]);
        }
        if out[t] == usize::MAX {
            out[t] = prev.expect("non-blank exists before any trailing blank");
        }
    }
    Ok(out)
}

/// [`regularize`], substituting `silence` for every frame when the input is
/// all blanks. Returns the aligned text and whether the substitution fired.
pub fn regularize_or_silence(frames: &[usize], blank: usize, silence: usize) -> (Vec<usize>, bool) {
    match regularize(frames, blank) {
        Ok(v) => (v, false),
        Err(Error::AllBlank) => (vec![silence; frames.len()], true),
        Err(_) => unreachable!("regularize only fails on empty or all-blank input"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{log_softmax_rows, Graph, ParamSet};
    use proptest::prelude::*;
    use rand::Rng;

    fn uniform_logp(t: usize, v: usize) -> Mat {
        Mat::from_elem((t, v), -(v as f64).ln())
    }

    fn random_logp(rng: &mut impl Rng, t: usize, v: usize) -> Mat {
        log_softmax_rows(&Mat::from_shape_fn((t, v), |_| rng.gen_range(-2.0..2.0)))
    }

    /// Brute force: sum the probability of every frame path whose collapse
    /// equals `labels`.
    fn path_sum(log_probs: &Mat, labels: &[usize], blank: usize) -> f64 {
        let (t_len, v) = log_probs.dim();
        let mut total = 0.0;
        let mut path = vec![0usize; t_len];
        loop {
            if collapse(&path, blank) == labels {
                let lp: f64 = path
                    .iter()
                    .enumerate()
                    .map(|(t, &k)| log_probs[(t, k)])
                    .sum();
                total += lp.exp();
            }
            // Odometer increment over the full alphabet.
            let mut i = 0;
            loop {
                if i == t_len {
                    return total;
                }
                path[i] += 1;
                if path[i] < v {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    fn all_labels(v_nonblank: &[usize], max_len: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for base in &frontier {
                for &tok in v_nonblank {
                    let mut seq = base.clone();
                    seq.push(tok);
                    next.push(seq);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    #[test]
    fn single_frame_single_label_uniform() {
        let lp = uniform_logp(1, 2);
        let loss = ctc_loss(&lp, &[1], 0).unwrap();
        assert!((loss - -(0.5f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn two_frames_single_label_half() {
        let lp = uniform_logp(2, 2);
        let loss = ctc_loss(&lp, &[1], 0).unwrap();
        assert!((loss - -(0.75f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn infeasible_is_infinite_with_zero_grad() {
        let lp = uniform_logp(1, 3);
        let (loss, grad) = ctc_forward_backward(&lp, &[1, 2], 0).unwrap();
        assert!(loss.is_infinite() && loss > 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
        assert!(!feasible(1, &[1, 2]));
        assert!(feasible(3, &[1, 1]));
        assert!(!feasible(2, &[1, 1]));
    }

    #[test]
    fn empty_label_scores_all_blank_path() {
        let mut rng = crate::rng::stream(3, "ctc-empty");
        let lp = random_logp(&mut rng, 4, 3);
        let score = ctc_score(&lp, &[], 0).unwrap();
        let blank_sum: f64 = (0..4).map(|t| lp[(t, 0)]).sum();
        assert!((score - blank_sum).abs() < 1e-12);
    }

    #[test]
    fn matches_exhaustive_path_enumeration() {
        let mut rng = crate::rng::stream(7, "ctc-oracle");
        for t_len in 1..=4usize {
            let lp = random_logp(&mut rng, t_len, 3);
            for labels in all_labels(&[1, 2], 2) {
                let score = ctc_score(&lp, &labels, 0).unwrap();
                let oracle = path_sum(&lp, &labels, 0);
                let got = if score == f64::NEG_INFINITY {
                    0.0
                } else {
                    score.exp()
                };
                assert!(
                    (got - oracle).abs() <= 1e-12,
                    "T={t_len} labels={labels:?}: {got} vs {oracle}"
                );
            }
        }
    }

    #[test]
    fn scores_form_a_distribution() {
        let mut rng = crate::rng::stream(11, "ctc-dist");
        for t_len in 1..=4usize {
            let lp = random_logp(&mut rng, t_len, 3);
            let mut sum = 0.0;
            for labels in all_labels(&[1, 2], t_len) {
                let score = ctc_score(&lp, &labels, 0).unwrap();
                if score != f64::NEG_INFINITY {
                    assert!(score <= 1e-12, "positive log-prob {score}");
                    sum += score.exp();
                }
            }
            assert!(sum <= 1.0 + 1e-9, "T={t_len}: sum {sum}");
            assert!((sum - 1.0).abs() <= 1e-9, "T={t_len}: sum {sum}");
        }
    }

    #[test]
    fn score_is_negated_loss() {
        let mut rng = crate::rng::stream(13, "ctc-neg");
        for _ in 0..20 {
            let t_len = rng.gen_range(2..7);
            let lp = random_logp(&mut rng, t_len, 4);
            let len = rng.gen_range(0..=3);
            let labels: Vec<usize> = (0..len).map(|_| rng.gen_range(1..4)).collect();
            let loss = ctc_loss(&lp, &labels, 0).unwrap();
            let score = ctc_score(&lp, &labels, 0).unwrap();
            assert_eq!(score, -loss);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_directly() {
        let mut rng = crate::rng::stream(17, "ctc-fd");
        let t_len = 5;
        let v = 4;
        let lp = random_logp(&mut rng, t_len, v);
        let labels = [1, 2, 2];
        let (_, grad) = ctc_forward_backward(&lp, &labels, 0).unwrap();
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for t in 0..t_len {
            for k in 0..v {
                let mut up = lp.clone();
                up[(t, k)] += eps;
                let mut down = lp.clone();
                down[(t, k)] -= eps;
                let numeric = (ctc_loss(&up, &labels, 0).unwrap()
                    - ctc_loss(&down, &labels, 0).unwrap())
                    / (2.0 * eps);
                let a = grad[(t, k)];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-4, "max rel err {worst}");
    }

    #[test]
    fn gradient_flows_through_graph_log_softmax() {
        let mut rng = crate::rng::stream(19, "ctc-graph-fd");
        let t_len = 4;
        let v = 3;
        let mut params = ParamSet::new();
        let logits = params.add(
            "logits",
            Mat::from_shape_fn((t_len, v), |_| rng.gen_range(-1.0..1.0)),
        );
        let labels = [1, 2];
        let forward = |p: &ParamSet| -> f64 {
            let mut g = Graph::new();
            let nl = g.param(p, logits);
            let lp = g.log_softmax_rows(nl);
            let loss = g.ctc_loss(lp, &labels, 0).unwrap();
            g.scalar(loss)
        };
        let mut g = Graph::new();
        let nl = g.param(&params, logits);
        let lp = g.log_softmax_rows(nl);
        let loss = g.ctc_loss(lp, &labels, 0).unwrap();
        g.backward(loss, 1.0, &mut params);
        let analytic = params.grad(logits).clone();
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for t in 0..t_len {
            for k in 0..v {
                let orig = params.value(logits)[(t, k)];
                params.value_mut(logits)[(t, k)] = orig + eps;
                let up = forward(&params);
                params.value_mut(logits)[(t, k)] = orig - eps;
                let down = forward(&params);
                params.value_mut(logits)[(t, k)] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic[(t, k)];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-4, "max rel err {worst}");
    }

    #[test]
    fn greedy_takes_argmax_with_low_index_ties() {
        let lp = ndarray::array![
            [0.0, -1.0, -2.0],
            [-3.0, -0.5, -2.0],
            [-1.0, -1.0, -4.0],
            [-5.0, -4.0, -0.1],
        ];
        assert_eq!(greedy_frames(&lp), vec![0, 1, 0, 2]);
    }

    #[test]
    fn regular_rule_examples() {
        assert_eq!(regularize(&[0, 3, 0, 7, 0], 0).unwrap(), vec![3, 3, 7, 7, 7]);
        assert_eq!(regularize(&[5, 5, 5], 0).unwrap(), vec![5, 5, 5]);
        assert!(matches!(regularize(&[0, 0, 0], 0), Err(Error::AllBlank)));
        let (subst, fired) = regularize_or_silence(&[0, 0], 0, 1);
        assert_eq!(subst, vec![1, 1]);
        assert!(fired);
        let (kept, fired) = regularize_or_silence(&[0, 4], 0, 1);
        assert_eq!(kept, vec![4, 4]);
        assert!(!fired);
    }

    #[test]
    fn collapse_examples() {
        assert_eq!(collapse(&[0, 1, 1, 0, 2], 0), vec![1, 2]);
        assert_eq!(collapse(&[1, 0, 1], 0), vec![1, 1]);
        assert_eq!(collapse(&[0, 0], 0), Vec::<usize>::new());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        /// Oracle: per position, scan right for the next non-blank; if none,
        /// scan left.
        #[test]
        fn regularize_matches_scan_oracle(frames in proptest::collection::vec(0usize..5, 1..40)) {
            prop_assume!(frames.iter().any(|&f| f != 0));
            let got = regularize(&frames, 0).unwrap();
            let mut want = Vec::with_capacity(frames.len());
            for t in 0..frames.len() {
                let fwd = frames[t..].iter().find(|&&f| f != 0);
                let val = match fwd {
                    Some(&f) => f,
                    None => *frames[..t].iter().rev().find(|&&f| f != 0).unwrap(),
                };
                want.push(val);
            }
            prop_assert_eq!(&got, &want);
            prop_assert!(got.iter().all(|&f| f != 0));
            prop_assert_eq!(got.len(), frames.len());
            // Idempotence: the output has no blanks, so it maps to itself.
            prop_assert_eq!(regularize(&got, 0).unwrap(), got);
        }
    }
}
