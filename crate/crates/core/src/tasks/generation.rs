//! Response generation: next-token NLL over the response span and
//! length-unnormalized beam search.

use std::cmp::Ordering;

use crate::corpus::{Dialogue, Turn};
use crate::encoder::{Bound, Model};
use crate::error::{Error, Result};
use crate::tensor::{log_softmax, Graph, Var};
use crate::textproc::{
    encode_generation, AttentionSpec, Labels, SequenceInput, TruncationPolicy, Vocab, EOS,
};

use super::{examples, train_loop, TrainConfig, TrainLog};

/// Mean of `-log p(token | prefix)` over the labeled response positions.
pub fn nll_loss(g: &mut Graph, bound: &Bound, input: &SequenceInput) -> Result<Var> {
    let Labels::NextToken(targets) = &input.labels else {
        return Err(Error::Contract("nll_loss needs next-token labels".into()));
    };
    if targets.is_empty() {
        return Err(Error::Contract("empty label span".into()));
    }
    let hidden = bound.encode(g, input)?;
    let rows: Vec<usize> = targets.iter().map(|t| t.position - 1).collect();
    let ids: Vec<usize> = targets.iter().map(|t| t.token as usize).collect();
    let logits = bound.lm_logits_at(g, hidden, &rows)?;
    g.cross_entropy(logits, &ids)
}

/// Summed NLL and token count for one sequence, without gradients.
pub fn sequence_nll(model: &Model, input: &SequenceInput) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let loss = nll_loss(&mut g, &bound, input)?;
    let n = match &input.labels {
        Labels::NextToken(t) => t.len(),
        _ => unreachable!("checked by nll_loss"),
    };
    Ok((g.value(loss).item()? * n as f64, n))
}

pub fn train_generation(
    model: &mut Model,
    vocab: &Vocab,
    dialogues: &[Dialogue],
    policy: &TruncationPolicy,
    config: &TrainConfig,
) -> Result<TrainLog> {
    let inputs = examples(dialogues, 1)
        .iter()
        .map(|e| encode_generation(vocab, e.context, Some(&e.response.text), policy))
        .collect::<Result<Vec<_>>>()?;
    let n = inputs.len();
    train_loop(
        model,
        config,
        |_, _| Ok((0..n).collect()),
        |g, b, &i| nll_loss(g, b, &inputs[i]),
    )
}

/// Next-token log-probabilities given the tokens generated so far.
pub trait StepScorer {
    fn log_probs(&self, generated: &[u32]) -> Result<Vec<f64>>;
}

/// A decoded sequence. `tokens` excludes the end marker; `score` is the
/// summed log-probability of every emitted token including it.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub score: f64,
    pub finished: bool,
}

/// Higher score first, then the lexicographically smaller sequence.
fn rank(a: &(Vec<u32>, f64), b: &(Vec<u32>, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

fn into_hypothesis((mut seq, score): (Vec<u32>, f64), eos: u32) -> Hypothesis {
    let finished = seq.last() == Some(&eos);
    if finished {
        seq.pop();
    }
    Hypothesis {
        tokens: seq,
        score,
        finished,
    }
}

pub fn greedy(scorer: &impl StepScorer, max_len: usize, eos: u32) -> Result<Hypothesis> {
    let mut seq = Vec::new();
    let mut score = 0.0;
    for _ in 0..max_len {
        let lp = scorer.log_probs(&seq)?;
        // first maximum wins, which is the smallest id on ties
        let (best, &l) = lp
            .iter()
            .enumerate()
            .fold(None, |acc: Option<(usize, &f64)>, (i, l)| match acc {
                Some((_, m)) if m >= l => acc,
                _ => Some((i, l)),
            })
            .ok_or_else(|| Error::Contract("scorer returned no tokens".into()))?;
        seq.push(best as u32);
        score += l;
        if best as u32 == eos {
            break;
        }
    }
    Ok(into_hypothesis((seq, score), eos))
}

/// Keeps the `beam_size` best partial sequences per step. Hypotheses that
/// emit `eos` leave the beam; those still open at `max_len` count as
/// complete. Stops early once no open hypothesis can beat a finished one.
pub fn beam_search(
    scorer: &impl StepScorer,
    beam_size: usize,
    max_len: usize,
    eos: u32,
) -> Result<Hypothesis> {
    if beam_size == 0 {
        return Err(Error::Precondition("beam_size must be at least 1".into()));
    }
    let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut done: Vec<(Vec<u32>, f64)> = Vec::new();
    for _ in 0..max_len {
        let best_live = live.iter().map(|h| h.1).fold(f64::NEG_INFINITY, f64::max);
        let best_done = done.iter().map(|h| h.1).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || best_done > best_live {
            break;
        }
        let mut cands = Vec::new();
        for (seq, score) in &live {
            for (v, l) in scorer.log_probs(seq)?.into_iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut s = seq.clone();
                s.push(v as u32);
                cands.push((s, score + l));
            }
        }
        cands.sort_by(rank);
        cands.truncate(beam_size);
        live.clear();
        for c in cands {
            if c.0.last() == Some(&eos) {
                done.push(c);
            } else {
                live.push(c);
            }
        }
    }
    done.extend(live);
    done.sort_by(rank);
    let best = done
        .into_iter()
        .next()
        .ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()))?;
    Ok(into_hypothesis(best, eos))
}

/// Scores continuations of a fixed dialogue context with the prefix-LM.
pub struct ModelScorer<'m> {
    model: &'m Model,
    context: SequenceInput,
}

impl<'m> ModelScorer<'m> {
    pub fn new(
        model: &'m Model,
        vocab: &Vocab,
        context: &[Turn],
        policy: &TruncationPolicy,
    ) -> Result<Self> {
        Ok(ModelScorer {
            model,
            context: encode_generation(vocab, context, None, policy)?,
        })
    }

    /// Longest continuation that still fits the position table.
    pub fn max_new_tokens(&self) -> usize {
        self.model
            .config
            .max_positions
            .saturating_sub(self.context.len())
    }

    pub fn generate(&self, beam_size: usize, max_len: usize) -> Result<Hypothesis> {
        beam_search(self, beam_size, max_len.min(self.max_new_tokens()), EOS)
    }
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&self, generated: &[u32]) -> Result<Vec<f64>> {
        let ctx = &self.context;
        let prefix_len = ctx.len();
        let n = prefix_len + generated.len();
        let mut token_ids = ctx.token_ids.clone();
        token_ids.extend_from_slice(generated);
        let mut segment_ids = ctx.segment_ids.clone();
        segment_ids.resize(n, 1);
        let input = SequenceInput {
            token_ids,
            segment_ids,
            position_ids: (0..n).collect(),
            attention: AttentionSpec::PrefixLm { prefix_len },
            mlm_positions: Vec::new(),
            labels: Labels::None,
        };
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g);
        let hidden = bound.encode(&mut g, &input)?;
        let logits = bound.lm_logits_at(&mut g, hidden, &[n - 1])?;
        Ok(log_softmax(g.value(logits).data()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;
    use crate::textproc::LmTarget;

    /// Fixed tables keyed by the generated prefix.
    struct Table(fn(&[u32]) -> Vec<f64>);

    impl StepScorer for Table {
        fn log_probs(&self, generated: &[u32]) -> Result<Vec<f64>> {
            Ok((self.0)(generated).into_iter().map(f64::ln).collect())
        }
    }

    // tokens 0 and 1, end marker 2. Greedy takes 0 (p=.6) but every
    // continuation of 0 is weak; 1 leads to a near-certain token.
    fn toy(prefix: &[u32]) -> Vec<f64> {
        match prefix {
            [] => vec![0.6, 0.4, 1e-12],
            [0] => vec![0.34, 0.33, 0.33],
            [1] => vec![0.05, 0.95, 1e-12],
            _ => vec![1e-12, 1e-12, 1.0],
        }
    }

    #[test]
    fn beam_two_finds_exhaustive_optimum() {
        let scorer = Table(toy);
        // brute force over all length-2 sequences
        let mut best = (vec![], f64::NEG_INFINITY);
        for a in 0..3u32 {
            for b in 0..3u32 {
                let s = toy(&[])[a as usize].ln() + toy(&[a])[b as usize].ln();
                if s > best.1 {
                    best = (vec![a, b], s);
                }
            }
        }
        let h = beam_search(&scorer, 2, 2, 2).unwrap();
        assert_eq!(h.tokens, best.0);
        assert!((h.score - best.1).abs() < 1e-12);
        let g = greedy(&scorer, 2, 2).unwrap();
        assert_eq!(g.tokens, vec![0, 0]);
        assert!(g.score < h.score);
    }

    #[test]
    fn beam_one_is_greedy_and_scores_are_consistent() {
        let scorer = Table(toy);
        for max_len in 1..5 {
            let b = beam_search(&scorer, 1, max_len, 2).unwrap();
            let g = greedy(&scorer, max_len, 2).unwrap();
            assert_eq!(b, g);
            let mut seq = b.tokens.clone();
            if b.finished {
                seq.push(2);
            }
            let recomputed: f64 = (0..seq.len())
                .map(|i| toy(&seq[..i])[seq[i] as usize].ln())
                .sum();
            assert!((recomputed - b.score).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_prefer_smaller_sequence() {
        let scorer = Table(|p| match p {
            [] => vec![0.5, 0.5, 1e-12],
            _ => vec![1e-12, 1e-12, 1.0],
        });
        assert_eq!(beam_search(&scorer, 3, 4, 2).unwrap().tokens, vec![0]);
        assert_eq!(greedy(&scorer, 4, 2).unwrap().tokens, vec![0]);
        assert!(beam_search(&scorer, 0, 4, 2).is_err());
    }

    fn tiny_model(vocab: usize) -> Model {
        Model::new(
            ModelConfig {
                n_layers: 1,
                n_heads: 2,
                d_model: 8,
                d_ff: 16,
                ..ModelConfig::new(vocab, 32, 2)
            },
            0,
        )
        .unwrap()
    }

    fn labeled(targets: Vec<LmTarget>) -> SequenceInput {
        SequenceInput {
            token_ids: vec![5, 7, 8, 9, 6],
            segment_ids: vec![0, 0, 1, 1, 1],
            position_ids: (0..5).collect(),
            attention: AttentionSpec::PrefixLm { prefix_len: 2 },
            mlm_positions: vec![],
            labels: Labels::NextToken(targets),
        }
    }

    #[test]
    fn uniform_model_loss_is_log_vocab() {
        let mut m = tiny_model(20);
        m.zero_lm();
        let inp = labeled(
            (2..5)
                .map(|p| LmTarget {
                    position: p,
                    token: [5, 7, 8, 9, 6][p],
                })
                .collect(),
        );
        let (sum, n) = sequence_nll(&m, &inp).unwrap();
        assert_eq!(n, 3);
        assert!((sum / 3.0 - 20f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_label_span_is_a_contract_error() {
        let m = tiny_model(20);
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        assert!(matches!(
            nll_loss(&mut g, &b, &labeled(vec![])),
            Err(Error::Contract(_))
        ));
    }
}
