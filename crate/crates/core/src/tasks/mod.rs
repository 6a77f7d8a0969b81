//! Training and inference for the three tasks, plus the shared training
//! loop and loss log.

pub mod emotion;
pub mod generation;
pub mod retrieval;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Turn};
use crate::encoder::{Bound, Model};
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, GradAccumulator, Graph, Var};

pub use emotion::{classify_emotion, emotion_loss, EmotionLoss, EmotionTrainConfig};
pub use generation::{beam_search, greedy, nll_loss, Hypothesis, ModelScorer, StepScorer};
pub use retrieval::{
    hinge_loss, ranking_loss, relevance_prob, retrieve, sample_negatives, CandidateSet,
    RankedCandidates, Task2TrainConfig,
};

/// A response turn and the turns before it.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub dialogue_id: &'a str,
    pub context: &'a [Turn],
    pub response: &'a Turn,
}

/// Every turn that has at least `min_context` turns before it.
pub fn examples(dialogues: &[Dialogue], min_context: usize) -> Vec<Example<'_>> {
    dialogues
        .iter()
        .flat_map(|d| {
            (min_context..d.turns.len()).map(move |t| Example {
                dialogue_id: &d.dialogue_id,
                context: &d.turns[..t],
                response: &d.turns[t],
            })
        })
        .collect()
}

/// Meme-bearing turns only.
pub fn meme_examples(dialogues: &[Dialogue]) -> Vec<Example<'_>> {
    examples(dialogues, 0)
        .into_iter()
        .filter(|e| e.response.meme_id.is_some())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Examples per optimizer step; gradients are averaged over the batch.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Spec("batch_size must be positive".into()));
        }
        if !(self.adam.base_lr > 0.0 && self.adam.base_lr.is_finite()) {
            return Err(Error::Spec("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Mean example loss per epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Contract(format!("{other:?}")),
        })?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// The shared minibatch loop. `make_epoch` supplies the epoch's items
/// (the loop shuffles them); `loss` builds one item's scalar loss.
pub fn train_loop<I>(
    model: &mut Model,
    config: &TrainConfig,
    mut make_epoch: impl FnMut(usize, &mut ChaCha8Rng) -> Result<Vec<I>>,
    mut loss: impl FnMut(&mut Graph, &Bound, &I) -> Result<Var>,
) -> Result<TrainLog> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(config.adam.clone(), &model.params);
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let mut items = make_epoch(epoch, &mut rng)?;
        if items.is_empty() {
            return Err(Error::Corpus("no training examples".into()));
        }
        items.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in items.chunks(config.batch_size) {
            let mut acc = GradAccumulator::new();
            let mut batch_total = 0.0;
            for item in batch {
                let mut g = Graph::new();
                let bound = model.bind(&mut g);
                let l = loss(&mut g, &bound, item)?;
                let value = g.value(l).item()?;
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at step {}",
                        adam.steps() + 1
                    )));
                }
                batch_total += value;
                acc.add(g.backward(l)?.into_params());
            }
            acc.scale(1.0 / batch.len() as f64);
            let lr = adam.step(&mut model.params, &acc)?;
            log.rows.push(LogRow {
                step: adam.steps(),
                loss: batch_total / batch.len() as f64,
                lr,
            });
            epoch_total += batch_total;
        }
        let mean = epoch_total / items.len() as f64;
        log::info!("epoch {} mean loss {mean:.6}", epoch + 1);
        log.epoch_losses.push(mean);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, GeneratorSpec};

    #[test]
    fn example_extraction() {
        let c = generate_synthetic(
            &GeneratorSpec {
                n_dialogues: 20,
                ..GeneratorSpec::default()
            },
            1,
        )
        .unwrap();
        let turns: usize = c.dialogues.iter().map(|d| d.turns.len()).sum();
        assert_eq!(examples(&c.dialogues, 1).len(), turns - c.dialogues.len());
        let memes = meme_examples(&c.dialogues);
        assert!(memes.iter().all(|e| e.response.meme_id.is_some()));
        assert_eq!(
            memes.len(),
            c.dialogues
                .iter()
                .map(|d| d.meme_ids().count())
                .sum::<usize>()
        );
    }

    #[test]
    fn csv_log_has_header() {
        let log = TrainLog {
            rows: vec![LogRow {
                step: 1,
                loss: 0.5,
                lr: 1e-3,
            }],
            epoch_losses: vec![0.5],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        log.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text, "step,loss,lr\n1,0.5,0.001\n");
    }
}
