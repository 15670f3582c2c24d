//! Edit distance, CER, corpus BLEU, unit distributions and Pearson correlation.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{data_err, Error, Result};

/// Levenshtein distance with unit insert, delete and substitute costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate; may exceed 1 when the hypothesis is long.
pub fn cer(hyp: &str, reference: &str) -> Result<f64> {
    let h: Vec<char> = hyp.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    if r.is_empty() {
        return Err(Error::Eval("CER is undefined for an empty reference".into()));
    }
    Ok(edit_distance(&h, &r) as f64 / r.len() as f64)
}

/// Lowercase, drop ASCII punctuation, split on whitespace.
pub fn normalize_text(s: &str) -> Vec<String> {
    let cleaned: String = s
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    #[default]
    None,
    /// Adds epsilon to matches and totals of every order.
    AddEpsilon(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuScore {
    pub score: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level single-reference BLEU-4 on a 0..100 scale.
pub fn corpus_bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>], smoothing: Smoothing) -> Result<BleuScore> {
    if hyps.len() != refs.len() {
        return Err(Error::Eval(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if refs.is_empty() {
        return Err(Error::Eval("BLEU needs at least one reference".into()));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        precisions[n] = match smoothing {
            Smoothing::None if totals[n] == 0 => 0.0,
            Smoothing::None => matches[n] as f64 / totals[n] as f64,
            Smoothing::AddEpsilon(eps) => (matches[n] as f64 + eps) / (totals[n] as f64 + eps),
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.iter().any(|&p| p <= 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuScore {
        score: score.clamp(0.0, 100.0),
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitDistribution {
    pub counts: Vec<u64>,
    pub total: u64,
    /// `None` when the corpus is empty.
    pub normalized: Option<Vec<f64>>,
}

impl UnitDistribution {
    pub fn k(&self) -> usize {
        self.counts.len()
    }
}

pub fn unit_distribution<'a>(corpus: impl IntoIterator<Item = &'a [u32]>, k: usize) -> Result<UnitDistribution> {
    let mut counts = vec![0u64; k];
    for utt in corpus {
        for &u in utt {
            let slot = counts
                .get_mut(u as usize)
                .ok_or_else(|| data_err(format!("unit {u} outside vocabulary of {k}")))?;
            *slot += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let normalized = (total > 0).then(|| counts.iter().map(|&c| c as f64 / total as f64).collect());
    Ok(UnitDistribution {
        counts,
        total,
        normalized,
    })
}

/// Sample Pearson correlation of two normalized unit distributions.
pub fn pearson(d1: &UnitDistribution, d2: &UnitDistribution) -> Result<f64> {
    if d1.k() != d2.k() {
        return Err(Error::Eval(format!("vocabularies differ: {} vs {}", d1.k(), d2.k())));
    }
    let (Some(x), Some(y)) = (&d1.normalized, &d2.normalized) else {
        return Err(Error::Eval("correlation of an empty distribution".into()));
    };
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::Eval("zero-variance distribution".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl CorrelationMatrix {
    pub fn compute(labels: Vec<String>, dists: &[UnitDistribution]) -> Result<Self> {
        if labels.len() != dists.len() {
            return Err(data_err("one label per distribution required"));
        }
        let n = dists.len();
        let mut values = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i..n {
                let r = pearson(&dists[i], &dists[j])?;
                values[i][j] = r;
                values[j][i] = r;
            }
        }
        Ok(Self { labels, values })
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.labels.iter().position(|l| l == a)?;
        let j = self.labels.iter().position(|l| l == b)?;
        Some(self.values[i][j])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("system_id");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.values) {
            out.push_str(l);
            for v in row {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Full-table Wagner-Fischer, kept separate from the rolling-row version.
    fn dp_oracle(a: &[char], b: &[char]) -> usize {
        let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in t.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            t[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let c = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                t[i][j] = (t[i - 1][j] + 1).min(t[i][j - 1] + 1).min(t[i - 1][j - 1] + c);
            }
        }
        t[a.len()][b.len()]
    }

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    fn toks(s: &str) -> Vec<String> {
        normalize_text(s)
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&chars("kitten"), &chars("sitting")), 3);
        assert_eq!(dp_oracle(&chars("kitten"), &chars("sitting")), 3);
        assert_eq!(edit_distance(&chars("abc"), &chars("abc")), 0);
        assert_eq!(edit_distance(&chars(""), &chars("abc")), 3);
        assert_eq!(edit_distance(&chars("abc"), &chars("")), 3);
    }

    #[test]
    fn edit_distance_matches_oracle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a: Vec<char> = (0..rng.gen_range(0..12)).map(|_| rng.gen_range(b'a'..b'e') as char).collect();
            let b: Vec<char> = (0..rng.gen_range(0..12)).map(|_| rng.gen_range(b'a'..b'e') as char).collect();
            assert_eq!(edit_distance(&a, &b), dp_oracle(&a, &b));
        }
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer("abc", "abc").unwrap(), 0.0);
        assert_eq!(cer("", "ab").unwrap(), 1.0);
        assert_eq!(cer("ab", "abcd").unwrap(), 0.5);
        assert_eq!(cer("abcdef", "a").unwrap(), 5.0);
        assert!(matches!(cer("a", ""), Err(Error::Eval(_))));
    }

    #[test]
    fn bleu_examples() {
        let refs = vec![toks("a b c d e"), toks("x y z w")];
        assert!((corpus_bleu(&refs, &refs, Smoothing::None).unwrap().score - 100.0).abs() < 1e-9);

        let b = corpus_bleu(&[toks("a b c d")], &[toks("a b c d e")], Smoothing::None).unwrap();
        assert_eq!(b.precisions, [1.0; 4]);
        assert!((b.brevity_penalty - (-0.25f64).exp()).abs() < 1e-12);
        assert!((b.score - 77.88).abs() < 0.01, "{}", b.score);

        let none = corpus_bleu(&[toks("a b c x d e f")], &[toks("a b c y d e f")], Smoothing::None).unwrap();
        assert_eq!(none.precisions[3], 0.0);
        assert_eq!(none.score, 0.0);
        let smoothed = corpus_bleu(&[toks("a b c x d e f")], &[toks("a b c y d e f")], Smoothing::AddEpsilon(0.1)).unwrap();
        assert!(smoothed.score > 0.0);

        assert!(matches!(corpus_bleu(&refs, &refs[..1], Smoothing::None), Err(Error::Eval(_))));
    }

    #[test]
    fn bleu_clips_repeated_ngrams() {
        let b = corpus_bleu(&[toks("the the the the")], &[toks("the cat")], Smoothing::None).unwrap();
        assert_eq!(b.precisions[0], 0.25);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_text("Hello, World!"), vec!["hello", "world"]);
        assert!(normalize_text("").is_empty());
        assert_eq!(normalize_text("a  b"), vec!["a", "b"]);
    }

    #[test]
    fn distribution_examples() {
        let d = unit_distribution([&[0u32, 0, 1][..]], 2).unwrap();
        assert_eq!(d.counts, vec![2, 1]);
        let n = d.normalized.unwrap();
        assert!((n[0] - 2.0 / 3.0).abs() < 1e-12 && (n[1] - 1.0 / 3.0).abs() < 1e-12);
        let empty = unit_distribution(std::iter::empty::<&[u32]>(), 4).unwrap();
        assert_eq!(empty.total, 0);
        assert!(empty.normalized.is_none());
        assert!(matches!(unit_distribution([&[5u32][..]], 4), Err(Error::Data(_))));
    }

    #[test]
    fn distribution_matches_concatenated_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let corpus: Vec<Vec<u32>> = (0..10)
            .map(|_| (0..rng.gen_range(1..30)).map(|_| rng.gen_range(0..8)).collect())
            .collect();
        let d = unit_distribution(corpus.iter().map(Vec::as_slice), 8).unwrap();
        let flat: Vec<u32> = corpus.concat();
        for u in 0..8u32 {
            assert_eq!(d.counts[u as usize], flat.iter().filter(|&&x| x == u).count() as u64);
        }
        let sum: f64 = d.normalized.unwrap().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    fn dist(v: &[f64]) -> UnitDistribution {
        UnitDistribution {
            counts: vec![0; v.len()],
            total: 1,
            normalized: Some(v.to_vec()),
        }
    }

    #[test]
    fn pearson_examples() {
        let a = dist(&[0.1, 0.2, 0.3, 0.4]);
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let rev = dist(&[0.4, 0.3, 0.2, 0.1]);
        assert!((pearson(&a, &rev).unwrap() + 1.0).abs() < 1e-12);
        let flat = dist(&[0.25; 4]);
        assert!(matches!(pearson(&a, &flat), Err(Error::Eval(_))));
    }

    #[test]
    fn pearson_matches_textbook_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x: Vec<u32> = (0..200).map(|_| rng.gen_range(0..10)).collect();
            let y: Vec<u32> = (0..300).map(|_| rng.gen_range(0..10)).collect();
            let dx = unit_distribution([x.as_slice()], 10).unwrap();
            let dy = unit_distribution([y.as_slice()], 10).unwrap();
            let (px, py) = (dx.normalized.clone().unwrap(), dy.normalized.clone().unwrap());
            let n = 10.0;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
            let (mx, my) = (mean(&px), mean(&py));
            let cov = px.iter().zip(&py).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0);
            let sd = |v: &[f64], m: f64| (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let want = cov / (sd(&px, mx) * sd(&py, my));
            assert!((pearson(&dx, &dy).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn correlation_matrix_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dists: Vec<_> = (0..4)
            .map(|_| {
                let v: Vec<u32> = (0..100).map(|_| rng.gen_range(0..6)).collect();
                unit_distribution([v.as_slice()], 6).unwrap()
            })
            .collect();
        let m = CorrelationMatrix::compute(vec!["A".into(), "B".into(), "C".into(), "D".into()], &dists).unwrap();
        for i in 0..4 {
            assert!((m.values[i][i] - 1.0).abs() < 1e-9);
            for j in 0..4 {
                assert!((m.values[i][j] - m.values[j][i]).abs() < 1e-9);
            }
        }
        let csv = m.to_csv();
        assert!(csv.starts_with("system_id,A,B,C,D\n"));
        assert_eq!(csv.lines().count(), 5);
    }

    proptest! {
        #[test]
        fn edit_distance_is_a_metric(a in "[a-d]{0,10}", b in "[a-d]{0,10}", c in "[a-d]{0,10}") {
            let (a, b, c) = (chars(&a), chars(&b), chars(&c));
            let ab = edit_distance(&a, &b);
            prop_assert_eq!(ab, edit_distance(&b, &a));
            prop_assert_eq!(ab == 0, a == b);
            prop_assert!(edit_distance(&a, &c) <= ab + edit_distance(&b, &c));
        }

        #[test]
        fn bleu_self_is_perfect_and_order_free(sents in prop::collection::vec("[a-e]( [a-e]){3,8}", 1..6)) {
            let refs: Vec<Vec<String>> = sents.iter().map(|s| toks(s)).collect();
            let b = corpus_bleu(&refs, &refs, Smoothing::None).unwrap();
            prop_assert!((b.score - 100.0).abs() < 1e-9);
            let mut hyps = refs.clone();
            hyps.rotate_left(1);
            let mut rot = refs.clone();
            rot.rotate_left(1);
            let shuffled = corpus_bleu(&hyps, &rot, Smoothing::None).unwrap();
            prop_assert!((shuffled.score - b.score).abs() < 1e-9);
        }

        #[test]
        fn pearson_symmetric_bounded_scale_free(
            x in prop::collection::vec(0u32..8, 20..80),
            y in prop::collection::vec(0u32..8, 20..80),
            scale in 1usize..5,
        ) {
            let dx = unit_distribution([x.as_slice()], 8).unwrap();
            let dy = unit_distribution([y.as_slice()], 8).unwrap();
            if let (Ok(r1), Ok(r2)) = (pearson(&dx, &dy), pearson(&dy, &dx)) {
                prop_assert!((r1 - r2).abs() < 1e-12);
                prop_assert!(r1.abs() <= 1.0);
                let scaled: Vec<u32> = x.iter().flat_map(|&u| std::iter::repeat_n(u, scale)).collect();
                let ds = unit_distribution([scaled.as_slice()], 8).unwrap();
                prop_assert!((pearson(&ds, &dy).unwrap() - r1).abs() < 1e-9);
            }
        }
    }
}
