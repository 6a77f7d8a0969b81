//! Evaluation metrics: corpus BLEU, DIST-n, Recall@k, MAP, Accuracy@k, and
//! the report they are collected in.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::RankedCandidates;

fn ngrams<T>(tokens: &[T], n: usize) -> impl Iterator<Item = &[T]> {
    // windows(0) panics; an empty iterator is the right answer for n = 0
    tokens.windows(n.max(1)).filter(move |_| n > 0)
}

fn counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    for g in ngrams(tokens, n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Corpus-level BLEU with uniform weights over 1..=n-gram precisions and
/// the brevity penalty. No smoothing: any zero precision gives 0.
pub fn bleu_n<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if n == 0 {
        return Err(Error::Precondition("BLEU order must be at least 1".into()));
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (c, r) in candidates.iter().zip(references) {
            let rc = counts(r, k);
            for (g, cnt) in counts(c, k) {
                matched += cnt.min(rc.get(g).copied().unwrap_or(0));
            }
            total += c.len().saturating_sub(k - 1);
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let bp = if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    Ok(bp * (log_sum / n as f64).exp())
}

/// Distinct n-grams over total n-grams across all candidates.
pub fn dist_n<T: Eq + Hash>(candidates: &[Vec<T>], n: usize) -> f64 {
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for c in candidates {
        for g in ngrams(c, n) {
            unique.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

fn truth_ranks(rankings: &[RankedCandidates], truths: &[u32]) -> Result<Vec<usize>> {
    if rankings.len() != truths.len() {
        return Err(Error::Contract(format!(
            "{} rankings but {} truths",
            rankings.len(),
            truths.len()
        )));
    }
    if rankings.is_empty() {
        return Err(Error::Precondition("no queries to score".into()));
    }
    rankings
        .iter()
        .zip(truths)
        .map(|(r, &t)| {
            r.rank_of(t)
                .ok_or_else(|| Error::Contract(format!("truth {t} missing from candidates")))
        })
        .collect()
}

/// Share of queries whose truth ranks within the top `k`.
pub fn recall_at_k(rankings: &[RankedCandidates], truths: &[u32], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Precondition("k must be at least 1".into()));
    }
    let ranks = truth_ranks(rankings, truths)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// With one relevant item per query, average precision is the reciprocal
/// rank of that item.
pub fn mean_average_precision(rankings: &[RankedCandidates], truths: &[u32]) -> Result<f64> {
    let ranks = truth_ranks(rankings, truths)?;
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Share of examples whose truth is within the first `k` predictions.
pub fn accuracy_at_k(predictions: &[Vec<u32>], truths: &[u32], k: usize) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::Contract(format!(
            "{} predictions but {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Precondition("no examples to score".into()));
    }
    if k == 0 || predictions.iter().any(|p| p.len() < k) {
        return Err(Error::Precondition(format!(
            "prediction lists shorter than k = {k}"
        )));
    }
    let hits = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| p[..k].contains(t))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: u8,
    pub split: String,
    pub metrics: BTreeMap<String, f64>,
    pub n_examples: usize,
    pub seed: u64,
    pub metadata: BTreeMap<String, String>,
    /// The resolved run configuration.
    pub config: serde_json::Value,
}

impl MetricsReport {
    /// Metric names in key order. Retrieval names carry the candidate
    /// count, 10 by default.
    pub fn expected_metrics(task: u8, n_candidates: usize) -> Vec<String> {
        let mut names: Vec<String> = match task {
            1 => ["bleu2", "bleu4", "dist1", "dist2"]
                .map(String::from)
                .to_vec(),
            2 => std::iter::once("map".to_string())
                .chain([1, 3, 5].map(|k| format!("recall_{n_candidates}@{k}")))
                .collect(),
            3 => ["acc@1", "acc@3", "acc@5"].map(String::from).to_vec(),
            _ => Vec::new(),
        };
        names.sort();
        names
    }

    pub fn validate(&self) -> Result<()> {
        let n = self
            .config
            .get("n_candidates")
            .and_then(|v| v.as_u64())
            .unwrap_or(10);
        if self
            .metrics
            .keys()
            .ne(Self::expected_metrics(self.task, n as usize).iter())
        {
            let names: Vec<&String> = self.metrics.keys().collect();
            return Err(Error::Contract(format!(
                "task {} report has metrics {names:?}",
                self.task
            )));
        }
        if let Some((k, v)) = self.metrics.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("{k} = {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::corpus::read_json(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_hand_case() {
        let c = vec![words("the cat sat")];
        let r = vec![words("the cat slept")];
        let b = bleu_n(&c, &r, 2).unwrap();
        assert!((b - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(
            bleu_n(&c, &c, 4).unwrap(),
            0.0,
            "a 3-token sentence has no 4-grams"
        );
    }

    #[test]
    fn bleu_identity_disjoint_and_mismatch() {
        let c = vec![words("a b c d e"), words("f g h i")];
        assert!((bleu_n(&c, &c, 4).unwrap() - 1.0).abs() < 1e-12);
        let d = vec![words("v w x y z"), words("p q r s")];
        assert_eq!(bleu_n(&c, &d, 2).unwrap(), 0.0);
        assert!(matches!(bleu_n(&c, &d[..1], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn bleu_brevity_penalty() {
        let c = vec![words("a b")];
        let r = vec![words("a b c d")];
        assert!((bleu_n(&c, &r, 2).unwrap() - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn dist_examples() {
        assert!((dist_n(&[words("a a b")], 1) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dist_n(&[words("a a a")], 2), 0.5);
        let same = vec![words("x"); 7];
        assert!((dist_n(&same, 1) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(dist_n::<&str>(&[vec![]], 1), 0.0);
    }

    fn ranking(ids: &[u32]) -> RankedCandidates {
        let n = ids.len() as f64;
        RankedCandidates::from_scores(
            ids.iter()
                .enumerate()
                .map(|(i, &m)| (m, 1.0 - i as f64 / (n + 1.0)))
                .collect(),
        )
    }

    #[test]
    fn recall_and_map_examples() {
        let r = ranking(&[5, 6, 7, 8, 9]);
        assert_eq!(recall_at_k(std::slice::from_ref(&r), &[8], 3).unwrap(), 0.0);
        assert_eq!(recall_at_k(std::slice::from_ref(&r), &[8], 5).unwrap(), 1.0);
        let two = [ranking(&[1, 2]), ranking(&[2, 1])];
        assert_eq!(mean_average_precision(&two, &[1, 1]).unwrap(), 0.75);
        assert!(matches!(
            recall_at_k(std::slice::from_ref(&r), &[3], 1),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            mean_average_precision(&[r], &[3]),
            Err(Error::Contract(_))
        ));
    }

    /// AP from the general definition: mean of precision@k at each relevant k.
    fn ap_oracle(order: &[u32], relevant: u32) -> f64 {
        let mut hits = 0.0;
        let mut sum = 0.0;
        for (k, &m) in order.iter().enumerate() {
            if m == relevant {
                hits += 1.0;
                sum += hits / (k + 1) as f64;
            }
        }
        sum / hits
    }

    #[test]
    fn map_matches_general_ap_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.random_range(1..=10);
            let mut ids: Vec<u32> = (0..n).collect();
            ids.shuffle(&mut rng);
            let truth = rng.random_range(0..n);
            let m = mean_average_precision(&[ranking(&ids)], &[truth]).unwrap();
            assert!((m - ap_oracle(&ids, truth)).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_examples() {
        let p = vec![vec![0, 1, 2], vec![2, 0, 1]];
        assert_eq!(accuracy_at_k(&p, &[0, 0], 1).unwrap(), 0.5);
        assert_eq!(accuracy_at_k(&p, &[0, 0], 2).unwrap(), 1.0);
        assert_eq!(accuracy_at_k(&p, &[1, 1], 3).unwrap(), 1.0);
        assert!(accuracy_at_k(&p, &[1, 1], 4).is_err());
    }

    #[test]
    fn uniform_random_predictor_accuracy_at_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 10_000;
        let mut preds = Vec::with_capacity(n);
        let mut truths = Vec::with_capacity(n);
        for _ in 0..n {
            let mut p: Vec<u32> = (0..8).collect();
            p.shuffle(&mut rng);
            preds.push(p);
            truths.push(rng.random_range(0..8));
        }
        let a = accuracy_at_k(&preds, &truths, 3).unwrap();
        assert!((a - 3.0 / 8.0).abs() <= 0.02, "{a}");
    }

    #[test]
    fn report_validation_and_json() {
        let mut r = MetricsReport {
            task: 3,
            split: "valid_seen".into(),
            metrics: [("acc@1", 0.5), ("acc@3", 0.7), ("acc@5", 0.9)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            n_examples: 10,
            seed: 1,
            metadata: BTreeMap::new(),
            config: serde_json::json!({"task": 3}),
        };
        r.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        r.save(&p).unwrap();
        assert_eq!(MetricsReport::load(&p).unwrap(), r);
        r.metrics.insert("acc@1".into(), 1.5);
        assert!(r.validate().is_err());
        r.task = 2;
        assert!(r.validate().is_err());
    }

    fn arb_rankings() -> impl Strategy<Value = (Vec<Vec<u32>>, Vec<u32>)> {
        proptest::collection::vec((1usize..=10, any::<u64>()), 1..20).prop_map(|qs| {
            let mut orders = Vec::new();
            let mut truths = Vec::new();
            for (n, seed) in qs {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut ids: Vec<u32> = (0..n as u32).collect();
                ids.shuffle(&mut rng);
                truths.push(rng.random_range(0..n as u32));
                orders.push(ids);
            }
            (orders, truths)
        })
    }

    proptest! {
        #[test]
        fn retrieval_metrics_are_bounded_and_monotone((orders, truths) in arb_rankings()) {
            let rankings: Vec<_> = orders.iter().map(|o| ranking(o)).collect();
            let mut prev = 0.0;
            for k in 1..=10 {
                let r = recall_at_k(&rankings, &truths, k).unwrap();
                prop_assert!((0.0..=1.0).contains(&r));
                prop_assert!(r >= prev);
                prev = r;
            }
            let map = mean_average_precision(&rankings, &truths).unwrap();
            prop_assert!((0.0..=1.0).contains(&map));
            prop_assert!(map >= recall_at_k(&rankings, &truths, 1).unwrap());
        }

        #[test]
        fn accuracy_is_monotone((orders, truths) in arb_rankings()) {
            let k_max = orders.iter().map(Vec::len).min().unwrap();
            let mut prev = 0.0;
            for k in 1..=k_max {
                let a = accuracy_at_k(&orders, &truths, k).unwrap();
                prop_assert!((0.0..=1.0).contains(&a) && a >= prev);
                prev = a;
            }
        }

        #[test]
        fn text_metrics_are_bounded(
            pairs in proptest::collection::vec(
                (proptest::collection::vec(0u8..4, 0..8), proptest::collection::vec(0u8..4, 0..8)),
                1..6,
            ),
            n in 1usize..=4,
        ) {
            let (c, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let b = bleu_n(&c, &r, n).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
            let d = dist_n(&c, n.min(2));
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
