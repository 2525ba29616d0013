//! Monotonic alignment search between text-encoder states and latent frames.
//!
//! The alignment is a path over frames t = 0..T-1 that starts at token 0, ends
//! at token S-1 and advances by at most one token per frame, maximizing the
//! summed per-cell log likelihood. Every frame is covered exactly once; a
//! brute-force enumerator of the same path space is provided as the test
//! oracle.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-cell Gaussian log likelihood of frame `t` under token `j`:
/// `sum_c [ -0.5 ln(2 pi) - logs[c,j] - 0.5 (z[c,t] - m[c,j])^2 e^{-2 logs[c,j]} ]`.
pub fn gaussian_log_lik(m: &Tensor, logs: &Tensor, z: &Tensor) -> Tensor {
    let c = m.rows();
    let s = m.cols();
    let t = z.cols();
    assert_eq!(logs.shape(), m.shape());
    assert_eq!(z.rows(), c);
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut ll = Tensor::zeros(vec![s, t]);
    for j in 0..s {
        for f in 0..t {
            let mut acc = 0.0;
            for ch in 0..c {
                let mean = m.at2(ch, j);
                let ls = logs.at2(ch, j);
                let x = z.at2(ch, f);
                let d = x - mean;
                acc += -half_ln_2pi - ls - 0.5 * d * d * (-2.0 * ls).exp();
            }
            ll.data_mut()[j * t + f] = acc;
        }
    }
    ll
}

/// Dynamic-programming search for the maximum-likelihood monotonic path.
///
/// `log_lik` is `[S, T]`. Returns the per-frame token index (length T).
/// Requires `T >= S`; ties prefer staying on the current token.
pub fn monotonic_align(log_lik: &Tensor) -> Result<Vec<usize>> {
    let s = log_lik.rows();
    let t = log_lik.cols();
    if s == 0 || t == 0 {
        return Err(Error::InvalidInput("empty alignment problem".into()));
    }
    if t < s {
        return Err(Error::InvalidInput(format!(
            "cannot align {s} tokens onto {t} frames (need T >= S)"
        )));
    }
    let neg = f64::NEG_INFINITY;
    let mut q = vec![neg; s * t];
    let mut from_advance = vec![false; s * t];
    q[0] = log_lik.at2(0, 0);
    for f in 1..t {
        // tokens reachable at frame f: j <= f and j >= s - (t - f)
        let j_lo = s.saturating_sub(t - f);
        let j_hi = f.min(s - 1);
        for j in j_lo..=j_hi {
            let stay = q[j * t + f - 1];
            let advance = if j > 0 { q[(j - 1) * t + f - 1] } else { neg };
            // ties prefer staying
            let (best, adv) = if advance > stay { (advance, true) } else { (stay, false) };
            if best == neg {
                continue;
            }
            q[j * t + f] = best + log_lik.at2(j, f);
            from_advance[j * t + f] = adv;
        }
    }
    let mut path = vec![0usize; t];
    let mut j = s - 1;
    for f in (0..t).rev() {
        path[f] = j;
        if f > 0 && from_advance[j * t + f] {
            j -= 1;
        }
    }
    Ok(path)
}

/// Token durations (frames per token) from a per-frame path.
pub fn path_to_durations(path: &[usize], num_tokens: usize) -> Vec<usize> {
    let mut d = vec![0usize; num_tokens];
    for &j in path {
        d[j] += 1;
    }
    d
}

/// Checks the structural invariants of an alignment path.
pub fn validate_path(path: &[usize], num_tokens: usize, frames: usize) -> Result<()> {
    if path.len() != frames {
        return Err(Error::Numeric("path does not cover every frame exactly once".into()));
    }
    if path.first() != Some(&0) || path.last() != Some(&(num_tokens - 1)) {
        return Err(Error::Numeric("path must start at token 0 and end at the last token".into()));
    }
    for w in path.windows(2) {
        if w[1] < w[0] || w[1] > w[0] + 1 {
            return Err(Error::Numeric("path must be non-decreasing with unit steps".into()));
        }
    }
    Ok(())
}

/// Exhaustive enumeration of every monotonic path; the independent oracle for
/// the DP search. Exponential, intended for instances with small `S x T`.
pub fn brute_force_align(log_lik: &Tensor) -> Result<(Vec<usize>, f64, bool)> {
    let s = log_lik.rows();
    let t = log_lik.cols();
    if t < s || s == 0 || t == 0 {
        return Err(Error::InvalidInput("degenerate brute-force instance".into()));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut second_equal = false;
    let mut stack: Vec<(Vec<usize>, f64)> = vec![(vec![0], log_lik.at2(0, 0))];
    while let Some((path, score)) = stack.pop() {
        let f = path.len();
        if f == t {
            if *path.last().unwrap() == s - 1 {
                match &best {
                    Some((bp, bs)) => {
                        if score > *bs {
                            best = Some((path, score));
                            second_equal = false;
                        } else if (score - bs).abs() < 1e-12 && &path != bp {
                            second_equal = true;
                        }
                    }
                    None => best = Some((path, score)),
                }
            }
            continue;
        }
        let j = *path.last().unwrap();
        for nj in [j, j + 1] {
            if nj >= s {
                continue;
            }
            // prune unreachable suffixes
            if s - 1 - nj > t - 1 - f {
                continue;
            }
            let mut np = path.clone();
            np.push(nj);
            stack.push((np, score + log_lik.at2(nj, f)));
        }
    }
    let (path, score) = best.ok_or_else(|| Error::Numeric("no valid monotonic path".into()))?;
    Ok((path, score, second_equal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_ll(rng: &mut ChaCha8Rng, s: usize, t: usize) -> Tensor {
        Tensor::new(vec![s, t], (0..s * t).map(|_| rng.gen_range(-3.0..3.0)).collect())
    }

    #[test]
    fn dp_matches_brute_force_on_all_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in 1..=5usize {
            for t in s..=7usize {
                for _ in 0..20 {
                    let ll = random_ll(&mut rng, s, t);
                    let dp = monotonic_align(&ll).unwrap();
                    let (bf, bf_score, ambiguous) = brute_force_align(&ll).unwrap();
                    let dp_score: f64 = dp.iter().enumerate().map(|(f, &j)| ll.at2(j, f)).sum();
                    assert!(
                        (dp_score - bf_score).abs() < 1e-9,
                        "S={s} T={t}: dp {dp_score} vs brute {bf_score}"
                    );
                    if !ambiguous {
                        assert_eq!(dp, bf, "S={s} T={t}");
                    }
                }
            }
        }
    }

    #[test]
    fn path_invariants_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = rng.gen_range(1..12);
            let t = rng.gen_range(s..30);
            let ll = random_ll(&mut rng, s, t);
            let path = monotonic_align(&ll).unwrap();
            validate_path(&path, s, t).unwrap();
            let durs = path_to_durations(&path, s);
            assert_eq!(durs.iter().sum::<usize>(), t);
            assert!(durs.iter().all(|&d| d >= 1), "every token gets at least one frame");
        }
    }

    #[test]
    fn rejects_more_tokens_than_frames() {
        let ll = Tensor::zeros(vec![5, 3]);
        assert!(matches!(monotonic_align(&ll), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn gaussian_log_lik_prefers_matching_frame() {
        // token 0 mean 0, token 1 mean 5; frame at 5 must like token 1 more
        let m = Tensor::new(vec![1, 2], vec![0.0, 5.0]);
        let logs = Tensor::zeros(vec![1, 2]);
        let z = Tensor::new(vec![1, 1], vec![5.0]);
        let ll = gaussian_log_lik(&m, &logs, &z);
        assert!(ll.at2(1, 0) > ll.at2(0, 0));
    }
}
