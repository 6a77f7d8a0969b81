//! Tokenization, the vocabulary, and the three task input layouts.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_json, write_json, Dialogue, EmotionSet, MemeCatalog, MemeEntry, Turn};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
pub const BOS: u32 = 5;
pub const EOS: u32 = 6;

pub const RESERVED: [&str; 7] = [
    "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]", "[BOS]", "[EOS]",
];

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Token <-> id table. Serialized as a JSON array of tokens in id order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(Error::Corpus(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Corpus(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).map(|t| self.id(&t)).collect()
    }

    /// Joins the surface forms of `ids`, skipping reserved tokens.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i as usize >= RESERVED.len())
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

/// Collects every token of the dialogue texts, meme titles, OCR texts and
/// emotion descriptions; ids follow descending frequency, then lexicographic order.
pub fn build_vocab(
    corpus: &[Dialogue],
    catalog: &MemeCatalog,
    emotions: &EmotionSet,
) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Precondition(
            "cannot build a vocabulary from no dialogues".into(),
        ));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let texts = corpus
        .iter()
        .flat_map(|d| d.turns.iter().map(|t| t.text.as_str()))
        .chain(
            catalog
                .entries()
                .iter()
                .flat_map(|m| [m.title.as_str(), m.ocr_text.as_str()]),
        )
        .chain(emotions.entries().iter().map(|e| e.description.as_str()));
    for text in texts {
        for tok in tokenize(text) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    for r in RESERVED {
        counts.remove(r);
    }
    let mut entries: Vec<(String, usize)> = counts.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(entries.into_iter().map(|(t, _)| t))
        .collect();
    Vocab::from_tokens(tokens)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionSpec {
    FullBidirectional,
    /// Positions before `prefix_len` see the whole prefix; later positions
    /// see the prefix plus themselves and earlier positions.
    PrefixLm {
        prefix_len: usize,
    },
}

impl AttentionSpec {
    pub fn allows(&self, query: usize, key: usize) -> bool {
        match *self {
            AttentionSpec::FullBidirectional => true,
            AttentionSpec::PrefixLm { prefix_len } => {
                key < prefix_len || (query >= prefix_len && key <= query)
            }
        }
    }
}

/// A language-model target: the token at `position`, predicted from the
/// hidden state at `position - 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LmTarget {
    pub position: usize,
    pub token: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Labels {
    None,
    NextToken(Vec<LmTarget>),
    Relevance(bool),
    Emotion {
        emotion_id: u32,
        /// Original ids at `mlm_positions`, in the same order.
        masked_tokens: Vec<u32>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceInput {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub position_ids: Vec<usize>,
    pub attention: AttentionSpec,
    pub mlm_positions: Vec<usize>,
    pub labels: Labels,
}

impl SequenceInput {
    fn assemble(
        context: Vec<u32>,
        response: Vec<u32>,
        attention: AttentionSpec,
        mlm_positions: Vec<usize>,
        labels: Labels,
    ) -> Self {
        let n = context.len() + response.len();
        let mut segment_ids = vec![0u8; context.len()];
        segment_ids.resize(n, 1);
        let mut token_ids = context;
        token_ids.extend(response);
        SequenceInput {
            token_ids,
            segment_ids,
            position_ids: (0..n).collect(),
            attention,
            mlm_positions,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn with_relevance(mut self, relevant: bool) -> Self {
        self.labels = Labels::Relevance(relevant);
        self
    }

    /// Checks the parallel-list, mask and label invariants against `max_len`.
    pub fn validate(&self, max_len: usize) -> Result<()> {
        let n = self.token_ids.len();
        let fail = |m: String| Err(Error::Contract(m));
        if n == 0 || n > max_len {
            return fail(format!("sequence length {n} outside 1..={max_len}"));
        }
        if self.segment_ids.len() != n || self.position_ids.len() != n {
            return fail("parallel lists differ in length".into());
        }
        if self.position_ids.iter().enumerate().any(|(i, &p)| i != p) {
            return fail("position ids must be 0..len".into());
        }
        if let AttentionSpec::PrefixLm { prefix_len } = self.attention {
            if prefix_len > n {
                return fail(format!("prefix length {prefix_len} exceeds length {n}"));
            }
        }
        if self.mlm_positions.iter().any(|&p| p >= n) {
            return fail("mlm position out of range".into());
        }
        match &self.labels {
            Labels::NextToken(ts) => {
                if ts.iter().any(|t| t.position == 0 || t.position >= n) {
                    return fail("lm target position out of range".into());
                }
            }
            Labels::Emotion { masked_tokens, .. }
                if masked_tokens.len() != self.mlm_positions.len() =>
            {
                return fail("masked token labels do not match mlm positions".into());
            }
            _ => {}
        }
        Ok(())
    }
}

/// Token budgets for the context and response sides.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationPolicy {
    pub max_context_tokens: usize,
    pub max_response_tokens: usize,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        TruncationPolicy {
            max_context_tokens: 256,
            max_response_tokens: 128,
        }
    }
}

impl TruncationPolicy {
    pub fn max_total(&self) -> usize {
        self.max_context_tokens + self.max_response_tokens
    }

    fn validate(&self) -> Result<()> {
        if self.max_context_tokens < 2 || self.max_response_tokens < 2 {
            return Err(Error::Precondition(
                "token budgets must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

fn keep_last(tokens: &mut Vec<u32>, n: usize) {
    if tokens.len() > n {
        tokens.drain(..tokens.len() - n);
    }
}

/// `[BOS] u_1 [SEP] ... u_t [SEP] | response [EOS]`. Memes and emotions in
/// the context are ignored.
pub fn encode_generation(
    vocab: &Vocab,
    context: &[Turn],
    response: Option<&str>,
    policy: &TruncationPolicy,
) -> Result<SequenceInput> {
    policy.validate()?;
    if context.is_empty() {
        return Err(Error::Precondition("generation context is empty".into()));
    }
    let mut body = Vec::new();
    for turn in context {
        body.extend(vocab.encode(&turn.text));
        body.push(SEP);
    }
    keep_last(&mut body, policy.max_context_tokens - 1);
    let mut ctx = Vec::with_capacity(body.len() + 1);
    ctx.push(BOS);
    ctx.extend(body);
    let prefix_len = ctx.len();

    let Some(response) = response else {
        return Ok(SequenceInput::assemble(
            ctx,
            Vec::new(),
            AttentionSpec::PrefixLm { prefix_len },
            Vec::new(),
            Labels::NextToken(Vec::new()),
        ));
    };
    let mut resp = vocab.encode(response);
    resp.truncate(policy.max_response_tokens - 1);
    resp.push(EOS);
    let targets = resp
        .iter()
        .enumerate()
        .map(|(i, &token)| LmTarget {
            position: prefix_len + i,
            token,
        })
        .collect();
    Ok(SequenceInput::assemble(
        ctx,
        resp,
        AttentionSpec::PrefixLm { prefix_len },
        Vec::new(),
        Labels::NextToken(targets),
    ))
}

/// Candidate meme tokens: title then OCR text.
pub fn meme_tokens(vocab: &Vocab, meme: &MemeEntry) -> Vec<u32> {
    let mut t = vocab.encode(&meme.title);
    t.extend(vocab.encode(&meme.ocr_text));
    t
}

/// `[CLS] context [SEP] response [SEP] title ocr [SEP]`; context turns are
/// `u_i` plus the title of their meme, separated by `[SEP]`.
pub fn encode_retrieval(
    vocab: &Vocab,
    catalog: &MemeCatalog,
    context: &[Turn],
    response: &str,
    candidate: &MemeEntry,
    policy: &TruncationPolicy,
) -> Result<SequenceInput> {
    policy.validate()?;
    let mut resp = vocab.encode(response);
    if resp.is_empty() {
        return Err(Error::Precondition("retrieval response is empty".into()));
    }
    let mut ctx = Vec::new();
    for (i, turn) in context.iter().enumerate() {
        if i > 0 {
            ctx.push(SEP);
        }
        ctx.extend(vocab.encode(&turn.text));
        if let Some(m) = turn.meme_id {
            let meme = catalog.get(m).ok_or(Error::Reference {
                kind: "meme_id",
                id: m,
            })?;
            ctx.extend(vocab.encode(&meme.title));
        }
    }
    keep_last(&mut ctx, policy.max_context_tokens);
    let mut cand = meme_tokens(vocab, candidate);

    // [CLS] + three [SEP]s are fixed overhead.
    let budget = policy.max_total() - 4;
    let mut overflow = (ctx.len() + resp.len() + cand.len()).saturating_sub(budget);
    let cut = overflow.min(ctx.len());
    ctx.drain(..cut);
    overflow -= cut;
    let cut = overflow.min(cand.len());
    cand.truncate(cand.len() - cut);
    overflow -= cut;
    resp.truncate(resp.len() - overflow);

    let mut left = Vec::with_capacity(ctx.len() + 2);
    left.push(CLS);
    left.extend(ctx);
    left.push(SEP);
    let mut right = resp;
    right.push(SEP);
    right.extend(cand);
    right.push(SEP);
    Ok(SequenceInput::assemble(
        left,
        right,
        AttentionSpec::FullBidirectional,
        Vec::new(),
        Labels::None,
    ))
}

/// Emotion-classification layout. Each context turn contributes
/// `u_i [SEP]`, then `title ocr [SEP]` if it has a meme, then
/// `desc(e_i) [SEP]` when `use_ef`. The response contributes
/// `u [SEP] title ocr [SEP]`, followed by its masked description and
/// `[SEP]` when `use_edp`.
#[allow(clippy::too_many_arguments)]
pub fn encode_emotion(
    vocab: &Vocab,
    catalog: &MemeCatalog,
    emotions: &EmotionSet,
    context: &[Turn],
    response: &Turn,
    use_ef: bool,
    use_edp: bool,
    policy: &TruncationPolicy,
) -> Result<SequenceInput> {
    policy.validate()?;
    let (Some(meme_id), Some(emotion_id)) = (response.meme_id, response.emotion_id) else {
        return Err(Error::Precondition(
            "emotion classification needs a response turn with a meme".into(),
        ));
    };
    let meme_of = |id: u32| {
        catalog.get(id).ok_or(Error::Reference {
            kind: "meme_id",
            id,
        })
    };
    let desc_of = |id: u32| {
        emotions
            .description(id)
            .map(|d| vocab.encode(d))
            .ok_or(Error::Reference {
                kind: "emotion_id",
                id,
            })
    };

    let mut ctx = Vec::new();
    for turn in context {
        ctx.extend(vocab.encode(&turn.text));
        ctx.push(SEP);
        if let Some(m) = turn.meme_id {
            ctx.extend(meme_tokens(vocab, meme_of(m)?));
            ctx.push(SEP);
            if use_ef {
                if let Some(e) = turn.emotion_id {
                    ctx.extend(desc_of(e)?);
                    ctx.push(SEP);
                }
            }
        }
    }
    keep_last(&mut ctx, policy.max_context_tokens);

    let mut resp = vocab.encode(&response.text);
    resp.push(SEP);
    resp.extend(meme_tokens(vocab, meme_of(meme_id)?));
    resp.push(SEP);
    let desc = if use_edp {
        desc_of(emotion_id)?
    } else {
        Vec::new()
    };
    let tail = if use_edp { desc.len() + 1 } else { 0 };

    let budget = policy.max_total() - 1 - tail;
    let mut overflow = (ctx.len() + resp.len()).saturating_sub(budget);
    let cut = overflow.min(ctx.len());
    ctx.drain(..cut);
    overflow -= cut;
    resp.truncate(resp.len() - overflow.min(resp.len()));

    let mut left = Vec::with_capacity(ctx.len() + 1);
    left.push(CLS);
    left.extend(ctx);
    let mut mlm_positions = Vec::new();
    if use_edp {
        let start = left.len() + resp.len();
        mlm_positions = (start..start + desc.len()).collect();
        resp.extend(std::iter::repeat_n(MASK, desc.len()));
        resp.push(SEP);
    }
    Ok(SequenceInput::assemble(
        left,
        resp,
        AttentionSpec::FullBidirectional,
        mlm_positions,
        Labels::Emotion {
            emotion_id,
            masked_tokens: desc,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EmotionEntry, Speaker};

    fn turn(text: &str, meme: Option<u32>, emo: Option<u32>) -> Turn {
        Turn {
            speaker: Speaker::A,
            text: text.into(),
            meme_id: meme,
            emotion_id: emo,
        }
    }

    fn fixtures() -> (Vocab, MemeCatalog, EmotionSet) {
        let catalog = MemeCatalog::new(vec![
            MemeEntry {
                meme_id: 0,
                title: "grin cat".into(),
                ocr_text: "haha".into(),
            },
            MemeEntry {
                meme_id: 1,
                title: "sad dog".into(),
                ocr_text: String::new(),
            },
        ])
        .unwrap();
        let emotions = EmotionSet::new(vec![
            EmotionEntry {
                emotion_id: 0,
                description: "happy".into(),
            },
            EmotionEntry {
                emotion_id: 1,
                description: "angry".into(),
            },
        ])
        .unwrap();
        let d = Dialogue {
            dialogue_id: "d".into(),
            turns: vec![turn("hi", None, None), turn("lol yo", Some(0), Some(1))],
        };
        let vocab = build_vocab(&[d], &catalog, &emotions).unwrap();
        (vocab, catalog, emotions)
    }

    #[test]
    fn vocab_lowercases_and_dedups() {
        let d = Dialogue {
            dialogue_id: "d".into(),
            turns: vec![turn("Hi there", None, None), turn("hi", None, None)],
        };
        let cat = MemeCatalog::new(vec![]).unwrap();
        let emo = EmotionSet::new(vec![]).unwrap();
        let v = build_vocab(std::slice::from_ref(&d), &cat, &emo).unwrap();
        assert_eq!(v.len(), RESERVED.len() + 2);
        assert_eq!(v.id("hi"), 7);
        assert_eq!(v.id("there"), 8);
        assert_eq!(v.id("nowhere"), UNK);
        assert_eq!(build_vocab(&[d], &cat, &emo).unwrap(), v);
        assert!(build_vocab(&[], &cat, &emo).is_err());
    }

    #[test]
    fn generation_layout() {
        let (v, _, _) = fixtures();
        let policy = TruncationPolicy::default();
        let s = encode_generation(&v, &[turn("hi", None, None)], Some("yo"), &policy).unwrap();
        assert_eq!(s.token_ids, vec![BOS, v.id("hi"), SEP, v.id("yo"), EOS]);
        assert_eq!(s.attention, AttentionSpec::PrefixLm { prefix_len: 3 });
        assert_eq!(s.segment_ids, vec![0, 0, 0, 1, 1]);
        let Labels::NextToken(t) = &s.labels else {
            panic!()
        };
        assert_eq!(
            t,
            &vec![
                LmTarget {
                    position: 3,
                    token: v.id("yo")
                },
                LmTarget {
                    position: 4,
                    token: EOS
                }
            ]
        );
        s.validate(policy.max_total()).unwrap();

        let inf = encode_generation(&v, &[turn("hi", None, None)], None, &policy).unwrap();
        assert_eq!(inf.token_ids, vec![BOS, v.id("hi"), SEP]);
        assert_eq!(inf.labels, Labels::NextToken(vec![]));
        assert!(encode_generation(&v, &[], None, &policy).is_err());
    }

    #[test]
    fn generation_left_truncates_context() {
        let (v, _, _) = fixtures();
        let policy = TruncationPolicy {
            max_context_tokens: 4,
            max_response_tokens: 8,
        };
        let ctx = [turn("hi hi hi", None, None), turn("yo lol", None, None)];
        let s = encode_generation(&v, &ctx, None, &policy).unwrap();
        assert_eq!(s.token_ids, vec![BOS, v.id("yo"), v.id("lol"), SEP]);
    }

    #[test]
    fn generation_ignores_memes() {
        let (v, _, _) = fixtures();
        let p = TruncationPolicy::default();
        let a = encode_generation(&v, &[turn("hi", Some(0), Some(0))], Some("yo"), &p).unwrap();
        let b = encode_generation(&v, &[turn("hi", None, None)], Some("yo"), &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn retrieval_layout() {
        let (v, c, _) = fixtures();
        let p = TruncationPolicy::default();
        let s = encode_retrieval(
            &v,
            &c,
            &[turn("hi", None, None)],
            "lol",
            c.get(0).unwrap(),
            &p,
        )
        .unwrap();
        let expect: Vec<u32> = vec![
            CLS,
            v.id("hi"),
            SEP,
            v.id("lol"),
            SEP,
            v.id("grin"),
            v.id("cat"),
            v.id("haha"),
            SEP,
        ];
        assert_eq!(s.token_ids, expect);
        assert_eq!(s.segment_ids, vec![0, 0, 0, 1, 1, 1, 1, 1, 1]);
        assert_eq!(s.attention, AttentionSpec::FullBidirectional);

        let s = encode_retrieval(
            &v,
            &c,
            &[turn("hi", None, None)],
            "lol",
            c.get(1).unwrap(),
            &p,
        )
        .unwrap();
        assert_eq!(&s.token_ids[5..], &[v.id("sad"), v.id("dog"), SEP]);
        assert!(encode_retrieval(&v, &c, &[], "  ", c.get(0).unwrap(), &p).is_err());
    }

    #[test]
    fn retrieval_context_carries_meme_titles() {
        let (v, c, _) = fixtures();
        let p = TruncationPolicy::default();
        let ctx = [turn("hi", Some(1), Some(0)), turn("yo", None, None)];
        let s = encode_retrieval(&v, &c, &ctx, "lol", c.get(0).unwrap(), &p).unwrap();
        assert_eq!(
            &s.token_ids[..6],
            &[CLS, v.id("hi"), v.id("sad"), v.id("dog"), SEP, v.id("yo")]
        );
    }

    #[test]
    fn retrieval_truncation_order() {
        let (v, c, _) = fixtures();
        let p = TruncationPolicy {
            max_context_tokens: 4,
            max_response_tokens: 4,
        };
        let ctx = [turn("hi hi hi hi hi", None, None)];
        // ctx 4 + resp 1 + cand 3 = 8 > budget 4: context gives up all 4 tokens, then
        // nothing more is needed.
        let s = encode_retrieval(&v, &c, &ctx, "lol", c.get(0).unwrap(), &p).unwrap();
        assert_eq!(s.token_ids[0], CLS);
        assert_eq!(s.len(), 8);
        assert_eq!(&s.token_ids[..2], &[CLS, SEP]);
        // a longer response forces the candidate to be cut from the right
        let s = encode_retrieval(&v, &c, &ctx, "lol lol lol", c.get(0).unwrap(), &p).unwrap();
        assert_eq!(s.len(), 8);
        assert_eq!(&s.token_ids[5..], &[SEP, v.id("grin"), SEP][..]);
    }

    #[test]
    fn emotion_flow_and_masking() {
        let (v, c, e) = fixtures();
        let p = TruncationPolicy::default();
        let ctx = [turn("hi", Some(1), Some(0))];
        let resp = turn("lol", Some(0), Some(1));

        let s = encode_emotion(&v, &c, &e, &ctx, &resp, true, false, &p).unwrap();
        let happy = v.id("happy");
        let at = s.token_ids.iter().position(|&t| t == happy).unwrap();
        // "hi [SEP] sad dog [SEP] happy"
        assert_eq!(
            &s.token_ids[at - 4..at],
            &[SEP, v.id("sad"), v.id("dog"), SEP]
        );
        assert!(s.mlm_positions.is_empty());

        let s = encode_emotion(&v, &c, &e, &ctx, &resp, true, true, &p).unwrap();
        assert_eq!(s.mlm_positions.len(), 1);
        assert_eq!(s.token_ids[s.mlm_positions[0]], MASK);
        assert_eq!(
            s.labels,
            Labels::Emotion {
                emotion_id: 1,
                masked_tokens: vec![v.id("angry")]
            }
        );
        assert!(!s.token_ids.contains(&v.id("angry")));

        let s = encode_emotion(&v, &c, &e, &ctx, &resp, false, false, &p).unwrap();
        assert!(!s.token_ids.contains(&happy));
        assert!(!s.token_ids.contains(&v.id("angry")));
        assert!(s.mlm_positions.is_empty());

        let plain = turn("lol", None, None);
        assert!(encode_emotion(&v, &c, &e, &ctx, &plain, true, true, &p).is_err());
    }

    #[test]
    fn prefix_mask_rule() {
        let a = AttentionSpec::PrefixLm { prefix_len: 2 };
        assert!(a.allows(0, 1));
        assert!(!a.allows(1, 2));
        assert!(a.allows(3, 2));
        assert!(!a.allows(2, 3));
        assert!(a.allows(3, 0));
    }
}
