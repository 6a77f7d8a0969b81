use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dialogue, EmotionEntry, EmotionSet, MemeCatalog, MemeEntry, Speaker, Turn};
use crate::error::{Error, Result};

const EMOTION_WORDS: &[&str] = &[
    "happy",
    "angry",
    "sad",
    "surprised",
    "scared",
    "disgusted",
    "proud",
    "shy",
    "bored",
    "confused",
    "excited",
    "calm",
    "jealous",
    "grateful",
    "lonely",
    "curious",
];

const FILLER_WORDS: &[&str] = &[
    "the", "a", "i", "you", "we", "they", "it", "this", "that", "is", "are", "was", "be", "have",
    "do", "go", "get", "make", "know", "think", "see", "come", "want", "look", "use", "find",
    "give", "tell", "work", "call", "try", "ask", "need", "feel", "leave", "put", "mean", "keep",
    "let", "begin", "seem", "help", "talk", "turn", "start", "show", "hear", "play", "run", "move",
    "like", "live", "believe", "hold", "bring", "write", "sit", "stand", "lose", "pay", "meet",
    "include", "continue", "set", "learn", "change", "lead", "watch", "follow", "stop", "speak",
    "read", "spend", "grow", "open", "walk", "win", "offer", "remember", "love", "consider",
    "appear", "buy", "wait", "serve", "send", "expect", "build", "stay", "fall", "cut", "reach",
    "kill", "remain", "today", "tomorrow", "really", "maybe", "very", "just", "now", "then",
    "here", "there", "again", "also", "still", "too", "so", "and", "but", "or", "with", "about",
    "from", "into", "over", "after", "food", "movie", "weekend", "friend", "music", "game",
    "coffee", "weather", "dinner", "class", "trip",
];

const TITLE_NOUNS: &[&str] = &[
    "cat", "dog", "panda", "frog", "duck", "bunny", "bear", "penguin", "hamster", "fox",
];

const CAPTIONS: &[&str] = &[
    "lol", "omg", "haha", "wow", "nope", "yay", "hmm", "ugh", "yikes", "oops", "whoa", "meh",
];

const SYLLABLES: &[&str] = &[
    "ka", "zo", "ri", "bu", "ne", "mo", "xi", "ta", "pu", "le", "vo", "qi", "da", "fe", "gu", "ho",
    "ji", "sa", "wu", "ye",
];

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_dialogues: usize,
    pub n_memes: usize,
    pub n_emotions: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    /// Probability that a turn carries a meme.
    pub meme_rate: f64,
    /// Probability that the emotion chain keeps its state between
    /// consecutive meme-bearing turns.
    pub stay_prob: f64,
    /// Probability that a meme-bearing turn draws its meme from the memes
    /// assigned to the turn's emotion; otherwise it draws from the memes of
    /// every other emotion. 1.0 makes meme emotion and turn emotion agree.
    pub meme_fidelity: f64,
    pub min_filler: usize,
    pub max_filler: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            n_dialogues: 2000,
            n_memes: 40,
            n_emotions: 8,
            min_turns: 4,
            max_turns: 10,
            meme_rate: 0.5,
            stay_prob: 0.6,
            meme_fidelity: 0.5,
            min_filler: 3,
            max_filler: 8,
        }
    }
}

impl GeneratorSpec {
    fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Spec(m.to_string()));
        if self.n_dialogues == 0 || self.n_memes == 0 || self.n_emotions == 0 {
            return fail("n_dialogues, n_memes and n_emotions must be positive");
        }
        if self.n_memes < self.n_emotions {
            return fail("n_memes < n_emotions leaves an emotion without memes");
        }
        if self.n_emotions == 1 && self.stay_prob < 1.0 {
            return fail("a single emotion cannot change state; set stay_prob to 1");
        }
        if self.min_turns < 2 || self.min_turns > self.max_turns {
            return fail("turn range must satisfy 2 <= min_turns <= max_turns");
        }
        if self.min_filler == 0 || self.min_filler > self.max_filler {
            return fail("filler range must satisfy 1 <= min_filler <= max_filler");
        }
        for (name, p) in [
            ("meme_rate", self.meme_rate),
            ("stay_prob", self.stay_prob),
            ("meme_fidelity", self.meme_fidelity),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Spec(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.meme_fidelity < 1.0 && self.n_emotions == 1 {
            return fail("meme_fidelity < 1 needs at least two emotions");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub catalog: MemeCatalog,
    pub emotions: EmotionSet,
    pub dialogues: Vec<Dialogue>,
    /// Emotion assigned to each meme, indexed by meme id.
    pub meme_emotion: Vec<u32>,
    /// Keyword of each meme, indexed by meme id.
    pub meme_keyword: Vec<String>,
}

/// Generates a corpus in which an emotion chain drives which memes appear.
/// Deterministic in `(spec, seed)`.
pub fn generate_synthetic(spec: &GeneratorSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let emotions = EmotionSet::new(
        (0..spec.n_emotions)
            .map(|i| EmotionEntry {
                emotion_id: i as u32,
                description: EMOTION_WORDS
                    .get(i)
                    .map_or_else(|| format!("emotion{i}"), |w| w.to_string()),
            })
            .collect(),
    )?;

    // Every emotion gets at least one meme: cycle through emotions, then shuffle.
    let mut meme_emotion: Vec<u32> = (0..spec.n_memes)
        .map(|i| (i % spec.n_emotions) as u32)
        .collect();
    meme_emotion.shuffle(&mut rng);

    let reserved: BTreeSet<&str> = EMOTION_WORDS
        .iter()
        .chain(FILLER_WORDS)
        .chain(TITLE_NOUNS)
        .chain(CAPTIONS)
        .copied()
        .collect();
    let mut keywords: Vec<String> = Vec::with_capacity(spec.n_memes);
    let mut taken = BTreeSet::new();
    while keywords.len() < spec.n_memes {
        let n_syl = rng.random_range(2..=3);
        let word: String = (0..n_syl)
            .map(|_| *SYLLABLES.choose(&mut rng).unwrap())
            .collect();
        if !reserved.contains(word.as_str()) && taken.insert(word.clone()) {
            keywords.push(word);
        }
    }

    let catalog = MemeCatalog::new(
        keywords
            .iter()
            .enumerate()
            .map(|(i, kw)| MemeEntry {
                meme_id: i as u32,
                title: format!("{kw} {}", TITLE_NOUNS.choose(&mut rng).unwrap()),
                ocr_text: format!("{kw} {}", CAPTIONS.choose(&mut rng).unwrap()),
            })
            .collect(),
    )?;

    let by_emotion: Vec<Vec<u32>> = (0..spec.n_emotions as u32)
        .map(|e| {
            (0..spec.n_memes as u32)
                .filter(|&m| meme_emotion[m as usize] == e)
                .collect()
        })
        .collect();
    let off_emotion: Vec<Vec<u32>> = (0..spec.n_emotions as u32)
        .map(|e| {
            (0..spec.n_memes as u32)
                .filter(|&m| meme_emotion[m as usize] != e)
                .collect()
        })
        .collect();

    let mut dialogues = Vec::with_capacity(spec.n_dialogues);
    for d in 0..spec.n_dialogues {
        let n_turns = rng.random_range(spec.min_turns..=spec.max_turns);
        let mut speaker = Speaker::A;
        let mut state: Option<u32> = None;
        let mut turns = Vec::with_capacity(n_turns);
        for _ in 0..n_turns {
            let n_fill = rng.random_range(spec.min_filler..=spec.max_filler);
            let mut words: Vec<&str> = (0..n_fill)
                .map(|_| *FILLER_WORDS.choose(&mut rng).unwrap())
                .collect();
            let (meme_id, emotion_id) = if rng.random_bool(spec.meme_rate) {
                let e = next_emotion(state, spec, &mut rng);
                state = Some(e);
                let pool = if rng.random_bool(spec.meme_fidelity) {
                    &by_emotion[e as usize]
                } else {
                    &off_emotion[e as usize]
                };
                let m = *pool.choose(&mut rng).unwrap();
                let at = rng.random_range(0..=words.len());
                words.insert(at, &keywords[m as usize]);
                (Some(m), Some(e))
            } else {
                (None, None)
            };
            turns.push(Turn {
                speaker,
                text: words.join(" "),
                meme_id,
                emotion_id,
            });
            speaker = speaker.other();
        }
        dialogues.push(Dialogue {
            dialogue_id: format!("d{d}"),
            turns,
        });
    }

    Ok(SyntheticCorpus {
        catalog,
        emotions,
        dialogues,
        meme_emotion,
        meme_keyword: keywords,
    })
}

fn next_emotion<R: Rng>(state: Option<u32>, spec: &GeneratorSpec, rng: &mut R) -> u32 {
    let e = spec.n_emotions as u32;
    match state {
        None => rng.random_range(0..e),
        Some(cur) => {
            if rng.random_bool(spec.stay_prob) {
                cur
            } else {
                // uniform over the other e - 1 emotions
                let r = rng.random_range(0..e - 1);
                if r >= cur {
                    r + 1
                } else {
                    r
                }
            }
        }
    }
}
