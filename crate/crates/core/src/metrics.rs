//! Answer-quality metrics and the evaluation report.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BLEU_MAX_ORDER: usize = 4;
const BLEU_EPSILON: f64 = 1e-9;
const METEOR_ALPHA: f64 = 0.9;

/// Metric value plus a flag set when an input was empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub empty_input: bool,
}

impl Score {
    fn of(value: f64) -> Self {
        Self {
            value,
            empty_input: false,
        }
    }

    fn empty() -> Self {
        Self {
            value: 0.0,
            empty_input: true,
        }
    }
}

fn check_lengths<T>(p: &[T], g: &[T]) -> Result<()> {
    if p.len() != g.len() {
        return Err(Error::Contract(format!(
            "{} predictions but {} gold answers",
            p.len(),
            g.len()
        )));
    }
    Ok(())
}

/// Exact sequence-match fraction; 0 for an empty corpus.
pub fn accuracy(predictions: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<f64> {
    check_lengths(predictions, golds)?;
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// With a single gold answer per sample this is exact match.
pub fn vqa_score(predictions: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<f64> {
    accuracy(predictions, golds)
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut out = HashMap::new();
    for w in tokens.windows(n) {
        *out.entry(w).or_insert(0) += 1;
    }
    out
}

/// Sentence BLEU with uniform weights over orders 1..=4.
///
/// Orders the candidate is too short for are left out of the geometric
/// mean; orders with no clipped match use `1e-9 / total`.
pub fn bleu(candidate: &[usize], reference: &[usize]) -> Result<Score> {
    if reference.is_empty() {
        return Err(Error::Contract("BLEU reference must be nonempty".into()));
    }
    if candidate.is_empty() {
        return Ok(Score::empty());
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=BLEU_MAX_ORDER {
        if candidate.len() < n {
            break;
        }
        let total = candidate.len() - n + 1;
        let refs = ngram_counts(reference, n);
        let matched: usize = ngram_counts(candidate, n)
            .iter()
            .map(|(g, c)| (*c).min(refs.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matched == 0 {
            BLEU_EPSILON / total as f64
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
        orders += 1;
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    Ok(Score::of(bp * (log_sum / orders as f64).exp()))
}

fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with β = 1.
pub fn rouge_l(candidate: &[usize], reference: &[usize]) -> Score {
    if candidate.is_empty() || reference.is_empty() {
        return Score::empty();
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return Score::of(0.0);
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    Score::of(2.0 * p * r / (p + r))
}

/// Alignment search state: smallest chunk count among maximum-size
/// exact-token alignments.
struct Aligner<'a> {
    cand: &'a [usize],
    refs: &'a [usize],
    used: Vec<bool>,
    target: usize,
    best: usize,
}

impl Aligner<'_> {
    fn search(&mut self, i: usize, matched: usize, chunks: usize, last: Option<usize>) {
        if chunks >= self.best {
            return;
        }
        if matched == self.target {
            self.best = chunks;
            return;
        }
        if i == self.cand.len() || matched + (self.cand.len() - i) < self.target {
            return;
        }
        for j in 0..self.refs.len() {
            if !self.used[j] && self.refs[j] == self.cand[i] {
                self.used[j] = true;
                let extends = last.is_some_and(|l| l + 1 == j);
                self.search(i + 1, matched + 1, chunks + usize::from(!extends), Some(j));
                self.used[j] = false;
            }
        }
        self.search(i + 1, matched, chunks, None);
    }
}

/// `(matches, chunks)` of the best exact unigram alignment.
pub fn meteor_alignment(candidate: &[usize], reference: &[usize]) -> (usize, usize) {
    let mut ref_counts = HashMap::new();
    for t in reference {
        *ref_counts.entry(*t).or_insert(0usize) += 1;
    }
    let mut cand_counts = HashMap::new();
    for t in candidate {
        *cand_counts.entry(*t).or_insert(0usize) += 1;
    }
    let target: usize = cand_counts
        .iter()
        .map(|(t, c)| (*c).min(ref_counts.get(t).copied().unwrap_or(0)))
        .sum();
    if target == 0 {
        return (0, 0);
    }
    let mut a = Aligner {
        cand: candidate,
        refs: reference,
        used: vec![false; reference.len()],
        target,
        best: usize::MAX,
    };
    a.search(0, 0, 0, None);
    (target, a.best)
}

/// Recall-weighted unigram F-mean times the fragmentation penalty.
pub fn meteor_lite(candidate: &[usize], reference: &[usize]) -> Score {
    if candidate.is_empty() || reference.is_empty() {
        return Score::empty();
    }
    let (m, chunks) = meteor_alignment(candidate, reference);
    if m == 0 {
        return Score::of(0.0);
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    Score::of(f * (1.0 - penalty))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub vqa_score: f64,
    pub bleu: f64,
    pub rouge_l: f64,
    pub meteor: f64,
}

impl MetricSet {
    pub const NAMES: [&'static str; 5] = ["accuracy", "vqa_score", "bleu", "rouge_l", "meteor"];

    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "accuracy" => self.accuracy,
            "vqa_score" => self.vqa_score,
            "bleu" => self.bleu,
            "rouge_l" => self.rouge_l,
            "meteor" => self.meteor,
            _ => return None,
        })
    }

    /// Corpus means of the sentence-level metrics.
    pub fn compute(predictions: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<Self> {
        check_lengths(predictions, golds)?;
        let n = predictions.len().max(1) as f64;
        let mut s = MetricSet {
            accuracy: accuracy(predictions, golds)?,
            vqa_score: vqa_score(predictions, golds)?,
            ..Default::default()
        };
        for (p, g) in predictions.iter().zip(golds) {
            s.bleu += bleu(p, g)?.value / n;
            s.rouge_l += rouge_l(p, g).value / n;
            s.meteor += meteor_lite(p, g).value / n;
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: String,
    pub samples: usize,
    pub metrics: MetricSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub domains: Vec<DomainReport>,
    pub overall: MetricSet,
    pub samples: usize,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Groups `(domain, prediction, gold)` triples, keeping first-seen order.
    pub fn from_predictions(
        label: impl Into<String>,
        rows: &[(String, Vec<usize>, Vec<usize>)],
        config: serde_json::Value,
    ) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut grouped: HashMap<&str, (Vec<Vec<usize>>, Vec<Vec<usize>>)> = HashMap::new();
        for (d, p, g) in rows {
            if !grouped.contains_key(d.as_str()) {
                order.push(d.clone());
            }
            let e = grouped.entry(d.as_str()).or_default();
            e.0.push(p.clone());
            e.1.push(g.clone());
        }
        let mut domains = Vec::with_capacity(order.len());
        for d in &order {
            let (p, g) = &grouped[d.as_str()];
            domains.push(DomainReport {
                domain: d.clone(),
                samples: p.len(),
                metrics: MetricSet::compute(p, g)?,
            });
        }
        let (all_p, all_g): (Vec<_>, Vec<_>) = rows.iter().map(|(_, p, g)| (p.clone(), g.clone())).unzip();
        Ok(Self {
            label: label.into(),
            domains,
            overall: MetricSet::compute(&all_p, &all_g)?,
            samples: rows.len(),
            config,
        })
    }

    pub fn domain(&self, name: &str) -> Option<&DomainReport> {
        self.domains.iter().find(|d| d.domain == name)
    }

    /// Unweighted mean over domains of one metric.
    pub fn domain_mean(&self, metric: &str) -> f64 {
        if self.domains.is_empty() {
            return 0.0;
        }
        self.domains
            .iter()
            .filter_map(|d| d.metrics.get(metric))
            .sum::<f64>()
            / self.domains.len() as f64
    }

    /// Metric × domain grid, values ×100.
    pub fn to_table(&self) -> String {
        let mut header = vec!["metric".to_string()];
        header.extend(self.domains.iter().map(|d| d.domain.clone()));
        header.push("overall".into());
        let mut rows = vec![header];
        for name in MetricSet::NAMES {
            let mut row = vec![name.to_string()];
            for d in &self.domains {
                row.push(format!("{:.2}", 100.0 * d.metrics.get(name).unwrap_or(0.0)));
            }
            row.push(format!("{:.2}", 100.0 * self.overall.get(name).unwrap_or(0.0)));
            rows.push(row);
        }
        let mut out = format!("{}\n", self.label);
        out.push_str(&align(&rows));
        out
    }
}

/// Left-aligned first column, right-aligned remaining columns.
pub fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let mut line = String::new();
        for (c, cell) in r.iter().enumerate() {
            if c == 0 {
                let _ = write!(line, "{cell:<w$}", w = widths[0]);
            } else {
                let _ = write!(line, "  {cell:>w$}", w = widths[c]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        let g = vec![vec![1], vec![2], vec![3], vec![4]];
        assert_eq!(accuracy(&g, &g).unwrap(), 1.0);
        let none = vec![vec![9], vec![9], vec![9], vec![9]];
        assert_eq!(accuracy(&none, &g).unwrap(), 0.0);
        let three = vec![vec![1], vec![2], vec![3], vec![]];
        assert_eq!(accuracy(&three, &g).unwrap(), 0.75);
        assert_eq!(vqa_score(&three, &g).unwrap(), 0.75);
        assert!(matches!(accuracy(&g[..2], &g), Err(Error::Contract(_))));
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu(&[1, 2, 3, 4, 5], &[1, 2, 3, 4, 5]).unwrap().value, 1.0);
        let short = bleu(&[1, 2, 3], &[1, 2, 3, 4]).unwrap().value;
        assert!((short - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-15);
        assert!((short - 0.7165).abs() < 1e-4);
        assert!(bleu(&[7, 8], &[1, 2]).unwrap().value < 1e-8);
        assert!(bleu(&[], &[1]).unwrap().empty_input);
        assert!(matches!(bleu(&[1], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&[1, 2, 3], &[1, 2, 3]).value, 1.0);
        assert_eq!(rouge_l(&[1, 2, 3, 4], &[1, 3, 2, 4]).value, 0.75);
        assert_eq!(rouge_l(&[1], &[2]).value, 0.0);
        assert!(rouge_l(&[], &[2]).empty_input);
    }

    #[test]
    fn meteor_examples() {
        let n = 4.0f64;
        let same = meteor_lite(&[1, 2, 3, 4], &[1, 2, 3, 4]).value;
        assert!((same - (1.0 - 0.5 / n.powi(3))).abs() < 1e-15);
        assert_eq!(meteor_lite(&[2, 1], &[1, 2]).value, 0.5);
        assert_eq!(meteor_lite(&[5], &[6]).value, 0.0);
        assert!(meteor_lite(&[5], &[]).empty_input);
    }

    #[test]
    fn meteor_prefers_fewest_chunks() {
        // Greedy left-to-right would pair the first 1 with ref[0] and split.
        assert_eq!(meteor_alignment(&[1, 2], &[1, 3, 1, 2]), (2, 1));
    }

    #[test]
    fn report_groups_by_domain() {
        let rows = vec![
            ("a".to_string(), vec![1], vec![1]),
            ("b".to_string(), vec![2], vec![3]),
            ("a".to_string(), vec![4], vec![5]),
        ];
        let r = EvalReport::from_predictions("t", &rows, serde_json::Value::Null).unwrap();
        assert_eq!(r.domains[0].samples, 2);
        assert_eq!(r.domains[0].metrics.accuracy, 0.5);
        assert_eq!(r.domain("b").unwrap().metrics.accuracy, 0.0);
        assert!((r.overall.accuracy - 1.0 / 3.0).abs() < 1e-15);
        let table = r.to_table();
        assert!(table.contains("accuracy"));
        assert!(table.contains("50.00"));
    }
}
