//! Dialogue, meme and emotion records, their on-disk formats, the synthetic
//! corpus generator and the seen/unseen meme split.

mod generator;
mod split;

pub use generator::{generate_synthetic, GeneratorSpec, SyntheticCorpus};
pub use split::{make_split, CorpusSplit, SplitManifest, VALID_FRACTION};

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemeEntry {
    pub meme_id: u32,
    pub title: String,
    pub ocr_text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionEntry {
    pub emotion_id: u32,
    pub description: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    pub fn other(self) -> Speaker {
        match self {
            Speaker::A => Speaker::B,
            Speaker::B => Speaker::A,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    pub meme_id: Option<u32>,
    pub emotion_id: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// Checks turn count, speaker alternation, the meme/emotion pairing and
    /// that every reference resolves.
    pub fn validate(&self, catalog: &MemeCatalog, emotions: &EmotionSet) -> Result<()> {
        let id = &self.dialogue_id;
        if self.turns.len() < 2 {
            return Err(Error::Corpus(format!(
                "dialogue {id} has fewer than 2 turns"
            )));
        }
        for (i, pair) in self.turns.windows(2).enumerate() {
            if pair[0].speaker == pair[1].speaker {
                return Err(Error::Corpus(format!(
                    "dialogue {id}: speakers do not alternate at turn {}",
                    i + 1
                )));
            }
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.meme_id.is_some() != turn.emotion_id.is_some() {
                return Err(Error::Corpus(format!(
                    "dialogue {id}, turn {i}: emotion must be present exactly when a meme is"
                )));
            }
            if let Some(m) = turn.meme_id {
                if catalog.get(m).is_none() {
                    return Err(Error::Reference {
                        kind: "meme_id",
                        id: m,
                    });
                }
            }
            if let Some(e) = turn.emotion_id {
                if emotions.get(e).is_none() {
                    return Err(Error::Reference {
                        kind: "emotion_id",
                        id: e,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn meme_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.turns.iter().filter_map(|t| t.meme_id)
    }
}

/// The meme set, indexed by id. Serialized as a plain JSON array.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<MemeEntry>", into = "Vec<MemeEntry>")]
pub struct MemeCatalog {
    entries: Vec<MemeEntry>,
    index: HashMap<u32, usize>,
}

impl MemeCatalog {
    pub fn new(entries: Vec<MemeEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.title.trim().is_empty() {
                return Err(Error::Corpus(format!(
                    "meme {} has an empty title",
                    e.meme_id
                )));
            }
            if index.insert(e.meme_id, i).is_some() {
                return Err(Error::Corpus(format!("duplicate meme_id {}", e.meme_id)));
            }
        }
        Ok(MemeCatalog { entries, index })
    }

    pub fn get(&self, id: u32) -> Option<&MemeEntry> {
        self.index.get(&id).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[MemeEntry] {
        &self.entries
    }

    pub fn ids(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.meme_id).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

impl TryFrom<Vec<MemeEntry>> for MemeCatalog {
    type Error = Error;

    fn try_from(entries: Vec<MemeEntry>) -> Result<Self> {
        MemeCatalog::new(entries)
    }
}

impl From<MemeCatalog> for Vec<MemeEntry> {
    fn from(c: MemeCatalog) -> Self {
        c.entries
    }
}

/// Emotion inventory; ids are exactly `0..len`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<EmotionEntry>", into = "Vec<EmotionEntry>")]
pub struct EmotionSet {
    entries: Vec<EmotionEntry>,
}

impl EmotionSet {
    pub fn new(mut entries: Vec<EmotionEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.emotion_id);
        for (i, e) in entries.iter().enumerate() {
            if e.emotion_id as usize != i {
                return Err(Error::Corpus(format!(
                    "emotion ids must be exactly 0..{}, found {}",
                    entries.len(),
                    e.emotion_id
                )));
            }
            if e.description.trim().is_empty() {
                return Err(Error::Corpus(format!(
                    "emotion {} has an empty description",
                    e.emotion_id
                )));
            }
        }
        for (i, a) in entries.iter().enumerate() {
            if entries[i + 1..]
                .iter()
                .any(|b| b.description == a.description)
            {
                return Err(Error::Corpus(format!(
                    "duplicate emotion description {:?}",
                    a.description
                )));
            }
        }
        Ok(EmotionSet { entries })
    }

    pub fn get(&self, id: u32) -> Option<&EmotionEntry> {
        self.entries.get(id as usize)
    }

    pub fn description(&self, id: u32) -> Option<&str> {
        self.get(id).map(|e| e.description.as_str())
    }

    pub fn entries(&self) -> &[EmotionEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

impl TryFrom<Vec<EmotionEntry>> for EmotionSet {
    type Error = Error;

    fn try_from(entries: Vec<EmotionEntry>) -> Result<Self> {
        EmotionSet::new(entries)
    }
}

impl From<EmotionSet> for Vec<EmotionEntry> {
    fn from(e: EmotionSet) -> Self {
        e.entries
    }
}

/// Reads a JSON-lines corpus, one dialogue per line, validating each.
pub fn load_corpus(
    path: &Path,
    catalog: &MemeCatalog,
    emotions: &EmotionSet,
) -> Result<Vec<Dialogue>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(file), path, catalog, emotions)
}

pub fn parse_corpus<R: BufRead>(
    reader: R,
    path: &Path,
    catalog: &MemeCatalog,
    emotions: &EmotionSet,
) -> Result<Vec<Dialogue>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let dialogue: Dialogue = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        dialogue.validate(catalog, emotions)?;
        out.push(dialogue);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in dialogues {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
