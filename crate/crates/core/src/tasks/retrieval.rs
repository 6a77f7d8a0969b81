//! Meme retrieval with a cross-encoder: hinge-ranked training against
//! dynamically resampled negatives, and argmax retrieval.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, MemeCatalog, Turn};
use crate::encoder::{Bound, Model};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};
use crate::textproc::{
    encode_retrieval, meme_tokens, SequenceInput, TruncationPolicy, Vocab, RESERVED,
};

use super::{meme_examples, train_loop, Example, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task2TrainConfig {
    pub margin: f64,
    pub negatives_per_positive: usize,
    pub resample_each_epoch: bool,
    /// Chance that a token of any meme text in an item (positive or
    /// negative) is renamed, throughout the item, to a random vocabulary
    /// token absent from it. Teaches lexical matching that does not hinge on
    /// the identity of the few training memes. Renaming every candidate, not
    /// just the positive, keeps an unusual token from marking the answer.
    pub meme_token_swap: f64,
    pub train: TrainConfig,
}

impl Default for Task2TrainConfig {
    fn default() -> Self {
        Task2TrainConfig {
            margin: 0.2,
            negatives_per_positive: 5,
            resample_each_epoch: true,
            meme_token_swap: 0.7,
            train: TrainConfig::default(),
        }
    }
}

impl Task2TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Spec(format!(
                "margin {} must be positive",
                self.margin
            )));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::Spec(
                "negatives_per_positive must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.meme_token_swap) {
            return Err(Error::Spec("meme_token_swap must be a probability".into()));
        }
        self.train.validate()
    }
}

/// `max(0, p_neg - p_pos + margin)`.
pub fn hinge_loss(p_pos: f64, p_neg: f64, margin: f64) -> f64 {
    (p_neg - p_pos + margin).max(0.0)
}

fn hinge_var(g: &mut Graph, p_pos: Var, p_neg: Var, margin: f64) -> Result<Var> {
    let d = g.sub(p_neg, p_pos)?;
    let d = g.add_scalar(d, margin)?;
    g.relu(d)
}

/// `k` distinct ids drawn uniformly from `catalog_ids` without `positive`.
pub fn sample_negatives<R: Rng + ?Sized>(
    positive: u32,
    catalog_ids: &[u32],
    k: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let pool: Vec<u32> = catalog_ids
        .iter()
        .copied()
        .filter(|&m| m != positive)
        .collect();
    if pool.len() < k {
        return Err(Error::Spec(format!(
            "cannot draw {k} negatives from {} candidates",
            pool.len()
        )));
    }
    Ok(rand::seq::index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn meme_prob(
    g: &mut Graph,
    bound: &Bound,
    vocab: &Vocab,
    catalog: &MemeCatalog,
    context: &[Turn],
    response: &str,
    meme_id: u32,
    policy: &TruncationPolicy,
) -> Result<Var> {
    let meme = catalog.get(meme_id).ok_or(Error::Reference {
        kind: "meme_id",
        id: meme_id,
    })?;
    let input = encode_retrieval(vocab, catalog, context, response, meme, policy)?;
    let hidden = bound.encode(g, &input)?;
    bound.relevance_prob(g, hidden)
}

/// The matching probability of one (context, response, meme) triple.
pub fn relevance_prob(
    model: &Model,
    vocab: &Vocab,
    catalog: &MemeCatalog,
    context: &[Turn],
    response: &str,
    meme_id: u32,
    policy: &TruncationPolicy,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let p = meme_prob(
        &mut g, &bound, vocab, catalog, context, response, meme_id, policy,
    )?;
    g.value(p).item()
}

/// Candidates by descending score; equal scores by ascending meme id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidates {
    pub ranked: Vec<(u32, f64)>,
}

impl RankedCandidates {
    pub fn from_scores(mut scores: Vec<(u32, f64)>) -> Self {
        scores.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        RankedCandidates { ranked: scores }
    }

    pub fn top(&self) -> Option<u32> {
        self.ranked.first().map(|c| c.0)
    }

    /// 1-based rank of `meme_id`.
    pub fn rank_of(&self, meme_id: u32) -> Option<usize> {
        self.ranked
            .iter()
            .position(|c| c.0 == meme_id)
            .map(|i| i + 1)
    }

    pub fn ids(&self) -> Vec<u32> {
        self.ranked.iter().map(|c| c.0).collect()
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }
}

/// Scores every candidate independently; the first entry is the argmax.
pub fn retrieve(
    model: &Model,
    vocab: &Vocab,
    catalog: &MemeCatalog,
    context: &[Turn],
    response: &str,
    candidates: &[u32],
    policy: &TruncationPolicy,
) -> Result<RankedCandidates> {
    if candidates.is_empty() {
        return Err(Error::Precondition("no candidates to rank".into()));
    }
    let scores = candidates
        .iter()
        .map(|&m| {
            relevance_prob(model, vocab, catalog, context, response, m, policy).map(|p| (m, p))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankedCandidates::from_scores(scores))
}

/// One evaluation query: the ground truth plus sampled distractors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub truth: u32,
    pub candidates: Vec<u32>,
}

/// Ground truth plus `n_candidates - 1` distractors from `pool` for each
/// meme-bearing example, fixed by `seed`.
pub fn candidate_sets(
    examples: &[Example],
    pool: &[u32],
    n_candidates: usize,
    seed: u64,
) -> Result<Vec<CandidateSet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    examples
        .iter()
        .map(|e| {
            let truth = e.response.meme_id.ok_or_else(|| {
                Error::Precondition("retrieval query without a ground-truth meme".into())
            })?;
            let mut candidates = vec![truth];
            candidates.extend(sample_negatives(truth, pool, n_candidates - 1, &mut rng)?);
            Ok(CandidateSet { truth, candidates })
        })
        .collect()
}

struct Item {
    example: usize,
    positive: u32,
    negatives: Vec<u32>,
    swaps: Vec<(u32, u32)>,
}

fn token_set(tokens: impl IntoIterator<Item = u32>) -> BTreeSet<u32> {
    tokens
        .into_iter()
        .filter(|&t| t as usize >= RESERVED.len())
        .collect()
}

/// Draws an injective renaming for one item: each token of `targets` is
/// mapped with probability `p` to a token of `replacements` that is not in
/// `present` and not already used.
fn draw_swaps<R: Rng + ?Sized>(
    targets: &BTreeSet<u32>,
    present: &BTreeSet<u32>,
    replacements: &[u32],
    p: f64,
    rng: &mut R,
) -> Vec<(u32, u32)> {
    let mut swaps = Vec::new();
    if p == 0.0 {
        return swaps;
    }
    for &t in targets {
        if rng.random_bool(p) {
            let r = replacements[rng.random_range(0..replacements.len())];
            if !present.contains(&r) && swaps.iter().all(|s: &(u32, u32)| s.1 != r) {
                swaps.push((t, r));
            }
        }
    }
    swaps
}

fn apply_swaps(input: &mut SequenceInput, swaps: &[(u32, u32)]) {
    for id in &mut input.token_ids {
        if let Some(&(_, r)) = swaps.iter().find(|s| s.0 == *id) {
            *id = r;
        }
    }
}

/// Trains on every meme-bearing turn of `dialogues`. Negatives come from
/// `pool` and are redrawn each epoch when configured.
#[allow(clippy::too_many_arguments)]
pub fn train_retrieval(
    model: &mut Model,
    vocab: &Vocab,
    catalog: &MemeCatalog,
    dialogues: &[Dialogue],
    pool: &[u32],
    policy: &TruncationPolicy,
    config: &Task2TrainConfig,
) -> Result<TrainLog> {
    config.validate()?;
    let examples = meme_examples(dialogues);
    let k = config.negatives_per_positive;
    let margin = config.margin;
    let meme = |id: u32| {
        catalog.get(id).ok_or(Error::Reference {
            kind: "meme_id",
            id,
        })
    };
    // any non-reserved vocabulary token, as in random-token replacement for
    // masked language modeling
    let replacements: Vec<u32> = (RESERVED.len() as u32..vocab.len() as u32).collect();
    let text_tokens: Vec<BTreeSet<u32>> = examples
        .iter()
        .map(|e| {
            token_set(
                e.context
                    .iter()
                    .chain([e.response])
                    .flat_map(|t| vocab.encode(&t.text)),
            )
        })
        .collect();
    let meme_sets = |ids: &[u32]| -> Result<BTreeSet<u32>> {
        let mut set = BTreeSet::new();
        for &m in ids {
            set.extend(token_set(meme_tokens(vocab, meme(m)?)));
        }
        Ok(set)
    };

    let mut first: Option<Vec<Vec<u32>>> = None;
    train_loop(
        model,
        &config.train,
        |_, rng| {
            let negatives: Vec<Vec<u32>> = match &first {
                Some(n) if !config.resample_each_epoch => n.clone(),
                _ => examples
                    .iter()
                    .map(|e| sample_negatives(e.response.meme_id.unwrap_or(u32::MAX), pool, k, rng))
                    .collect::<Result<_>>()?,
            };
            first.get_or_insert_with(|| negatives.clone());
            let mut items = Vec::with_capacity(examples.len());
            for (i, negatives) in negatives.into_iter().enumerate() {
                let positive = examples[i].response.meme_id.expect("meme turn");
                let mut ids = negatives.clone();
                ids.push(positive);
                let targets = meme_sets(&ids)?;
                let present: BTreeSet<u32> = targets.union(&text_tokens[i]).copied().collect();
                let swaps = draw_swaps(
                    &targets,
                    &present,
                    &replacements,
                    config.meme_token_swap,
                    rng,
                );
                items.push(Item {
                    example: i,
                    positive,
                    negatives,
                    swaps,
                });
            }
            Ok(items)
        },
        |g, bound, item| {
            let e = &examples[item.example];
            let input = |m: u32| -> Result<SequenceInput> {
                let mut input = encode_retrieval(
                    vocab,
                    catalog,
                    e.context,
                    &e.response.text,
                    meme(m)?,
                    policy,
                )?;
                apply_swaps(&mut input, &item.swaps);
                Ok(input)
            };
            let negatives = item
                .negatives
                .iter()
                .map(|&m| input(m))
                .collect::<Result<Vec<_>>>()?;
            ranking_loss(g, bound, &input(item.positive)?, &negatives, margin)
        },
    )
}

/// Hinge loss of one positive pair against its negatives, averaged over
/// the negatives.
pub fn ranking_loss(
    g: &mut Graph,
    bound: &Bound,
    positive: &SequenceInput,
    negatives: &[SequenceInput],
    margin: f64,
) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::Contract(
            "ranking loss needs at least one negative".into(),
        ));
    }
    let mut prob = |input: &SequenceInput| -> Result<Var> {
        let hidden = bound.encode(g, input)?;
        bound.relevance_prob(g, hidden)
    };
    let pp = prob(positive)?;
    let mut terms = Vec::with_capacity(negatives.len());
    for n in negatives {
        terms.push(prob(n)?);
    }
    let mut total: Option<Var> = None;
    for pn in terms {
        let h = hinge_var(g, pp, pn, margin)?;
        total = Some(match total {
            Some(t) => g.add(t, h)?,
            None => h,
        });
    }
    let s = g.sum(total.expect("checked non-empty"))?;
    g.scale(s, 1.0 / negatives.len() as f64)
}

/// Mean positive and mean sampled-negative matching probability over the
/// meme turns of `dialogues`.
#[allow(clippy::too_many_arguments)]
pub fn score_separation(
    model: &Model,
    vocab: &Vocab,
    catalog: &MemeCatalog,
    dialogues: &[Dialogue],
    pool: &[u32],
    negatives_per_positive: usize,
    policy: &TruncationPolicy,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for e in meme_examples(dialogues) {
        let truth = e.response.meme_id.expect("meme turn");
        let p = |m| {
            relevance_prob(
                model,
                vocab,
                catalog,
                e.context,
                &e.response.text,
                m,
                policy,
            )
        };
        pos.push(p(truth)?);
        for m in sample_negatives(truth, pool, negatives_per_positive, &mut rng)? {
            neg.push(p(m)?);
        }
    }
    if pos.is_empty() {
        return Err(Error::Corpus("no meme-bearing turns".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((mean(&pos), mean(&neg)))
}
