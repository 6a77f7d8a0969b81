use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_json, write_json, Dialogue, MemeCatalog};
use crate::error::{Error, Result};

/// Share of dialogues reserved for validation before any filtering.
pub const VALID_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<Dialogue>,
    /// Validation dialogues that reference at least one seen meme, or none at all.
    pub valid_seen: Vec<Dialogue>,
    /// Validation dialogues that reference at least one held-out meme.
    pub valid_unseen: Vec<Dialogue>,
    pub held_out_memes: BTreeSet<u32>,
}

/// Holds out `n_unseen` memes, reserves a validation share of the dialogues
/// and drops every training dialogue that mentions a held-out meme.
///
/// A validation dialogue mixing seen and held-out memes lands in both
/// validation lists; evaluation scores only the turns whose meme matches
/// the list's side.
pub fn make_split(
    dialogues: &[Dialogue],
    catalog: &MemeCatalog,
    n_unseen: usize,
    seed: u64,
) -> Result<CorpusSplit> {
    if n_unseen >= catalog.len() {
        return Err(Error::Spec(format!(
            "n_unseen = {n_unseen} must be smaller than the catalog ({})",
            catalog.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = catalog.ids();
    ids.shuffle(&mut rng);
    let held_out: BTreeSet<u32> = ids.into_iter().take(n_unseen).collect();

    let mut order: Vec<usize> = (0..dialogues.len()).collect();
    order.shuffle(&mut rng);
    let n_valid = ((dialogues.len() as f64) * VALID_FRACTION).round() as usize;
    let valid_idx: BTreeSet<usize> = order.into_iter().take(n_valid).collect();

    let mut split = CorpusSplit {
        train: Vec::new(),
        valid_seen: Vec::new(),
        valid_unseen: Vec::new(),
        held_out_memes: held_out,
    };
    for (i, d) in dialogues.iter().enumerate() {
        let has_held = d.meme_ids().any(|m| split.held_out_memes.contains(&m));
        let has_seen = d.meme_ids().any(|m| !split.held_out_memes.contains(&m));
        let has_memes = d.meme_ids().next().is_some();
        if valid_idx.contains(&i) {
            if has_seen || !has_memes {
                split.valid_seen.push(d.clone());
            }
            if has_held {
                split.valid_unseen.push(d.clone());
            }
        } else if !has_held {
            split.train.push(d.clone());
        }
    }
    Ok(split)
}

/// On-disk form of a split: dialogue ids per partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub held_out_memes: Vec<u32>,
    pub train: Vec<String>,
    pub valid_seen: Vec<String>,
    pub valid_unseen: Vec<String>,
}

impl SplitManifest {
    pub fn from_split(split: &CorpusSplit, seed: u64) -> Self {
        let ids = |ds: &[Dialogue]| ds.iter().map(|d| d.dialogue_id.clone()).collect();
        SplitManifest {
            seed,
            held_out_memes: split.held_out_memes.iter().copied().collect(),
            train: ids(&split.train),
            valid_seen: ids(&split.valid_seen),
            valid_unseen: ids(&split.valid_unseen),
        }
    }

    pub fn resolve(&self, dialogues: &[Dialogue]) -> Result<CorpusSplit> {
        let by_id: HashMap<&str, &Dialogue> = dialogues
            .iter()
            .map(|d| (d.dialogue_id.as_str(), d))
            .collect();
        let pick = |ids: &[String]| -> Result<Vec<Dialogue>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .map(|d| (*d).clone())
                        .ok_or_else(|| Error::Corpus(format!("split names unknown dialogue {id}")))
                })
                .collect()
        };
        Ok(CorpusSplit {
            train: pick(&self.train)?,
            valid_seen: pick(&self.valid_seen)?,
            valid_unseen: pick(&self.valid_unseen)?,
            held_out_memes: self.held_out_memes.iter().copied().collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, GeneratorSpec};

    fn corpus() -> crate::corpus::SyntheticCorpus {
        generate_synthetic(
            &GeneratorSpec {
                n_dialogues: 600,
                ..GeneratorSpec::default()
            },
            4,
        )
        .unwrap()
    }

    #[test]
    fn twenty_held_out_and_train_is_clean() {
        let c = corpus();
        let s = make_split(&c.dialogues, &c.catalog, 20, 9).unwrap();
        assert_eq!(s.held_out_memes.len(), 20);
        for d in &s.train {
            assert!(d.meme_ids().all(|m| !s.held_out_memes.contains(&m)));
        }
        for d in &s.valid_unseen {
            assert!(d.meme_ids().any(|m| s.held_out_memes.contains(&m)));
        }
        assert!(!s.train.is_empty());
        assert!(!s.valid_unseen.is_empty());
    }

    #[test]
    fn zero_unseen_keeps_train_portion_whole() {
        let c = corpus();
        let s = make_split(&c.dialogues, &c.catalog, 0, 9).unwrap();
        assert!(s.valid_unseen.is_empty());
        assert_eq!(s.train.len() + s.valid_seen.len(), c.dialogues.len());
    }

    #[test]
    fn n_unseen_must_be_below_catalog_size() {
        let c = corpus();
        assert!(matches!(
            make_split(&c.dialogues, &c.catalog, 40, 0),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn manifest_resolves_to_same_split() {
        let c = corpus();
        let s = make_split(&c.dialogues, &c.catalog, 20, 1).unwrap();
        let m = SplitManifest::from_split(&s, 1);
        assert_eq!(m.resolve(&c.dialogues).unwrap(), s);
    }
}
