//! Meme emotion classification: cross-entropy on the [CLS] head plus the
//! masked emotion-description objective.

use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, EmotionSet, MemeCatalog};
use crate::encoder::{Bound, Model};
use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Graph, Var};
use crate::textproc::{encode_emotion, Labels, SequenceInput, TruncationPolicy, Vocab};

use super::{meme_examples, train_loop, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionTrainConfig {
    pub use_ef: bool,
    pub use_edp: bool,
    pub train: TrainConfig,
}

impl Default for EmotionTrainConfig {
    fn default() -> Self {
        EmotionTrainConfig {
            use_ef: true,
            use_edp: true,
            train: TrainConfig::default(),
        }
    }
}

/// Loss nodes; `total = ce + mlm` with unit weights.
#[derive(Clone, Copy, Debug)]
pub struct EmotionLoss {
    pub total: Var,
    pub ce: Var,
    pub mlm: Option<Var>,
}

impl EmotionLoss {
    /// `(total, ce_part, mlm_part)` as numbers.
    pub fn values(&self, g: &Graph) -> Result<(f64, f64, f64)> {
        let mlm = match self.mlm {
            Some(m) => g.value(m).item()?,
            None => 0.0,
        };
        Ok((g.value(self.total).item()?, g.value(self.ce).item()?, mlm))
    }
}

fn emotion_label(input: &SequenceInput, n_emotions: usize) -> Result<(u32, &[u32])> {
    let Labels::Emotion {
        emotion_id,
        masked_tokens,
    } = &input.labels
    else {
        return Err(Error::Contract(
            "emotion loss needs an emotion label".into(),
        ));
    };
    if *emotion_id as usize >= n_emotions {
        return Err(Error::Label {
            label: *emotion_id as usize,
            classes: n_emotions,
        });
    }
    Ok((*emotion_id, masked_tokens))
}

pub fn emotion_loss(
    g: &mut Graph,
    bound: &Bound,
    input: &SequenceInput,
    use_edp: bool,
) -> Result<EmotionLoss> {
    let (label, masked) = emotion_label(input, bound.config().n_emotions)?;
    let hidden = bound.encode(g, input)?;
    let logits = bound.emotion_logits(g, hidden)?;
    let ce = g.cross_entropy(logits, &[label as usize])?;
    let mlm = if use_edp {
        match bound.mlm_logits(g, hidden, &input.mlm_positions)? {
            Some(l) => {
                let targets: Vec<usize> = masked.iter().map(|&t| t as usize).collect();
                Some(g.cross_entropy(l, &targets)?)
            }
            None => None,
        }
    } else {
        None
    };
    let total = match mlm {
        Some(m) => g.add(ce, m)?,
        None => ce,
    };
    Ok(EmotionLoss { total, ce, mlm })
}

/// Top-`k` emotions by softmax probability; ties by ascending id.
pub fn classify_emotion(model: &Model, input: &SequenceInput, k: usize) -> Result<Vec<(u32, f64)>> {
    let e = model.config.n_emotions;
    if k == 0 || k > e {
        return Err(Error::Precondition(format!("k = {k} outside 1..={e}")));
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let hidden = bound.encode(&mut g, input)?;
    let logits = bound.emotion_logits(&mut g, hidden)?;
    let mut probs = g.value(logits).data().to_vec();
    softmax_in_place(&mut probs);
    let mut ranked: Vec<(u32, f64)> = probs
        .into_iter()
        .enumerate()
        .map(|(i, p)| (i as u32, p))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Encodes every meme-bearing turn with the configured EF/EDP layout.
pub fn emotion_inputs(
    vocab: &Vocab,
    catalog: &MemeCatalog,
    emotions: &EmotionSet,
    dialogues: &[Dialogue],
    use_ef: bool,
    use_edp: bool,
    policy: &TruncationPolicy,
) -> Result<Vec<SequenceInput>> {
    meme_examples(dialogues)
        .iter()
        .map(|e| {
            encode_emotion(
                vocab, catalog, emotions, e.context, e.response, use_ef, use_edp, policy,
            )
        })
        .collect()
}

pub fn train_emotion(
    model: &mut Model,
    vocab: &Vocab,
    catalog: &MemeCatalog,
    emotions: &EmotionSet,
    dialogues: &[Dialogue],
    policy: &TruncationPolicy,
    config: &EmotionTrainConfig,
) -> Result<TrainLog> {
    let inputs = emotion_inputs(
        vocab,
        catalog,
        emotions,
        dialogues,
        config.use_ef,
        config.use_edp,
        policy,
    )?;
    let n = inputs.len();
    train_loop(
        model,
        &config.train,
        |_, _| Ok((0..n).collect()),
        |g, b, &i| Ok(emotion_loss(g, b, &inputs[i], config.use_edp)?.total),
    )
}
