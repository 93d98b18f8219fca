//! Brute-force reference implementations of the answer metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn occurrences(seq: &[usize], gram: &[usize]) -> usize {
    (0..seq.len().saturating_sub(gram.len() - 1))
        .filter(|&i| seq.len() >= i + gram.len() && &seq[i..i + gram.len()] == gram)
        .count()
}

pub fn bleu(cand: &[usize], refr: &[usize]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut logs = Vec::new();
    for n in 1..=4 {
        if cand.len() < n {
            continue;
        }
        let total = cand.len() - n + 1;
        // Each distinct candidate n-gram counted once, clipped by the reference.
        let mut seen: Vec<&[usize]> = Vec::new();
        let mut matched = 0;
        for i in 0..total {
            let g = &cand[i..i + n];
            if seen.contains(&g) {
                continue;
            }
            seen.push(g);
            matched += occurrences(cand, g).min(occurrences(refr, g));
        }
        let p = if matched == 0 { 1e-9 / total as f64 } else { matched as f64 / total as f64 };
        logs.push(p.ln());
    }
    let geo = (logs.iter().sum::<f64>() / logs.len() as f64).exp();
    let (c, r) = (cand.len() as f64, refr.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * geo
}

fn is_subsequence(sub: &[usize], seq: &[usize]) -> bool {
    let mut it = seq.iter();
    sub.iter().all(|x| it.any(|y| y == x))
}

/// LCS by enumerating every subsequence of the candidate.
pub fn lcs(cand: &[usize], refr: &[usize]) -> usize {
    (0u32..1 << cand.len())
        .filter_map(|mask| {
            let sub: Vec<usize> = (0..cand.len()).filter(|i| mask >> i & 1 == 1).map(|i| cand[i]).collect();
            is_subsequence(&sub, refr).then_some(sub.len())
        })
        .max()
        .unwrap_or(0)
}

pub fn rouge_l(cand: &[usize], refr: &[usize]) -> f64 {
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let l = lcs(cand, refr) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, r) = (l / cand.len() as f64, l / refr.len() as f64);
    2.0 * p * r / (p + r)
}

fn alignments(cand: &[usize], refr: &[usize], i: usize, used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, out: &mut Vec<Vec<Option<usize>>>) {
    if i == cand.len() {
        out.push(cur.clone());
        return;
    }
    cur.push(None);
    alignments(cand, refr, i + 1, used, cur, out);
    cur.pop();
    for j in 0..refr.len() {
        if !used[j] && refr[j] == cand[i] {
            used[j] = true;
            cur.push(Some(j));
            alignments(cand, refr, i + 1, used, cur, out);
            cur.pop();
            used[j] = false;
        }
    }
}

/// Chunks are maximal runs of adjacent candidate tokens aligned to adjacent
/// reference tokens.
fn chunks(al: &[Option<usize>]) -> usize {
    let mut n = 0;
    for i in 0..al.len() {
        if let Some(j) = al[i] {
            let continues = i > 0 && al[i - 1].is_some_and(|p| p + 1 == j);
            if !continues {
                n += 1;
            }
        }
    }
    n
}

/// Every alignment enumerated; the most matches, then the fewest chunks.
pub fn meteor(cand: &[usize], refr: &[usize]) -> f64 {
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let mut all = Vec::new();
    alignments(cand, refr, 0, &mut vec![false; refr.len()], &mut Vec::new(), &mut all);
    let (m, ch) = all
        .iter()
        .map(|a| (a.iter().flatten().count(), chunks(a)))
        .min_by_key(|&(m, ch)| (std::cmp::Reverse(m), ch))
        .unwrap();
    if m == 0 {
        return 0.0;
    }
    let (p, r) = (m as f64 / cand.len() as f64, m as f64 / refr.len() as f64);
    let f = p * r / (0.9 * p + 0.1 * r);
    f * (1.0 - 0.5 * (ch as f64 / m as f64).powi(3))
}

pub fn accuracy(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> f64 {
    let mut hits = 0;
    for k in 0..preds.len() {
        let same = preds[k].len() == golds[k].len() && (0..preds[k].len()).all(|i| preds[k][i] == golds[k][i]);
        hits += usize::from(same);
    }
    if preds.is_empty() { 0.0 } else { hits as f64 / preds.len() as f64 }
}

/// Seeded `(candidate, reference)` pairs over a 5-token alphabet so overlaps
/// and repeats are common.
pub fn fixtures(n: usize, seed: u64) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seq = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let len = rng.gen_range(1..=8);
        (0..len).map(|_| rng.gen_range(1..=5)).collect()
    };
    (0..n).map(|_| (seq(&mut rng), seq(&mut rng))).collect()
}

/// Largest deviation between the library metrics and the oracles over the
/// fixtures, per metric name.
pub fn max_deviation(fx: &[(Vec<usize>, Vec<usize>)]) -> Vec<(&'static str, f64)> {
    use catch_core::metrics;
    let mut dev = [("bleu", 0.0f64), ("rouge_l", 0.0), ("meteor_lite", 0.0), ("accuracy", 0.0)];
    for (c, r) in fx {
        dev[0].1 = dev[0].1.max((metrics::bleu(c, r).unwrap().value - bleu(c, r)).abs());
        dev[1].1 = dev[1].1.max((metrics::rouge_l(c, r).value - rouge_l(c, r)).abs());
        dev[2].1 = dev[2].1.max((metrics::meteor_lite(c, r).value - meteor(c, r)).abs());
    }
    let preds: Vec<Vec<usize>> = fx.iter().map(|f| f.0.clone()).collect();
    let mut golds: Vec<Vec<usize>> = fx.iter().map(|f| f.1.clone()).collect();
    // Copy some predictions so exact matches occur.
    for k in (0..golds.len()).step_by(3) {
        golds[k] = preds[k].clone();
    }
    dev[3].1 = (metrics::accuracy(&preds, &golds).unwrap() - accuracy(&preds, &golds)).abs();
    dev.to_vec()
}
