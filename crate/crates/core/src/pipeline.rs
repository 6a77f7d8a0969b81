//! End-to-end runs: corpus files on disk, per-task training with
//! checkpoints and loss logs, evaluation reports, and the chat loop.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    generate_synthetic, load_corpus, make_split, write_corpus, CorpusSplit, Dialogue, EmotionSet,
    GeneratorSpec, MemeCatalog, Speaker, SplitManifest, Turn,
};
use crate::encoder::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    accuracy_at_k, bleu_n, dist_n, mean_average_precision, recall_at_k, MetricsReport,
};
use crate::tasks::emotion::{emotion_inputs, train_emotion};
use crate::tasks::generation::train_generation;
use crate::tasks::retrieval::{candidate_sets, train_retrieval};
use crate::tasks::{
    classify_emotion, examples, meme_examples, retrieve, EmotionTrainConfig, ModelScorer,
    Task2TrainConfig, TrainConfig, TrainLog,
};
use crate::tensor::{AdamConfig, Checkpoint};
use crate::textproc::{build_vocab, encode_emotion, tokenize, TruncationPolicy, Vocab};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const CATALOG_FILE: &str = "catalog.json";
pub const EMOTIONS_FILE: &str = "emotions.json";
pub const SPLIT_FILE: &str = "split.json";

/// Writes the four corpus files into `out` and returns the split.
pub fn write_synthetic_corpus(
    out: &Path,
    spec: &GeneratorSpec,
    n_unseen: usize,
    seed: u64,
) -> Result<CorpusSplit> {
    let corpus = generate_synthetic(spec, seed)?;
    let split = make_split(&corpus.dialogues, &corpus.catalog, n_unseen, seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_corpus(&out.join(CORPUS_FILE), &corpus.dialogues)?;
    corpus.catalog.save(&out.join(CATALOG_FILE))?;
    corpus.emotions.save(&out.join(EMOTIONS_FILE))?;
    SplitManifest::from_split(&split, seed).save(&out.join(SPLIT_FILE))?;
    Ok(split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: u8,
    pub corpus: PathBuf,
    pub catalog: PathBuf,
    pub emotions: PathBuf,
    pub split: PathBuf,
    pub checkpoint: PathBuf,
    pub report: Option<PathBuf>,
    /// Defaults to the checkpoint path with a `.loss.csv` suffix.
    pub loss_log: Option<PathBuf>,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Std of the token table. The LM head is tied to it, so generation
    /// wants the small default; retrieval and emotion learn faster from
    /// scratch with unit-scale vectors (1.0).
    pub token_init_std: f64,
    pub max_context_tokens: usize,
    pub max_response_tokens: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub margin: f64,
    pub negatives_per_positive: usize,
    pub resample_each_epoch: bool,
    pub meme_token_swap: f64,
    pub use_ef: bool,
    pub use_edp: bool,
    pub seed: u64,
    pub beam_size: usize,
    pub max_generation_tokens: usize,
    pub n_candidates: usize,
    /// Caps the number of evaluation queries (taken in corpus order).
    pub max_eval_examples: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: 2,
            corpus: CORPUS_FILE.into(),
            catalog: CATALOG_FILE.into(),
            emotions: EMOTIONS_FILE.into(),
            split: SPLIT_FILE.into(),
            checkpoint: "model.ckpt.json".into(),
            report: None,
            loss_log: None,
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            token_init_std: 0.02,
            max_context_tokens: 256,
            max_response_tokens: 128,
            epochs: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_steps: 200,
            margin: 0.2,
            negatives_per_positive: 5,
            resample_each_epoch: true,
            meme_token_swap: 0.7,
            use_ef: true,
            use_edp: true,
            seed: 0,
            beam_size: 5,
            max_generation_tokens: 128,
            n_candidates: 10,
            max_eval_examples: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        crate::corpus::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::corpus::write_json(path, self)
    }

    /// Points the four corpus paths at the standard names inside `dir`.
    pub fn with_corpus_dir(mut self, dir: &Path) -> Self {
        self.corpus = dir.join(CORPUS_FILE);
        self.catalog = dir.join(CATALOG_FILE);
        self.emotions = dir.join(EMOTIONS_FILE);
        self.split = dir.join(SPLIT_FILE);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.task) {
            return Err(Error::Spec(format!("task {} is not 1, 2 or 3", self.task)));
        }
        if self.beam_size == 0 || self.n_candidates == 0 {
            return Err(Error::Spec(
                "beam_size and n_candidates must be positive".into(),
            ));
        }
        if self.task != 3 && (!self.use_ef || !self.use_edp) {
            log::warn!("use_ef/use_edp only affect task 3");
        }
        self.task2().validate()
    }

    pub fn policy(&self) -> TruncationPolicy {
        TruncationPolicy {
            max_context_tokens: self.max_context_tokens,
            max_response_tokens: self.max_response_tokens,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                base_lr: self.learning_rate,
                warmup_steps: self.warmup_steps,
                ..AdamConfig::default()
            },
            seed: self.seed,
        }
    }

    pub fn task2(&self) -> Task2TrainConfig {
        Task2TrainConfig {
            margin: self.margin,
            negatives_per_positive: self.negatives_per_positive,
            resample_each_epoch: self.resample_each_epoch,
            meme_token_swap: self.meme_token_swap,
            train: self.train(),
        }
    }

    pub fn model_config(&self, vocab_size: usize, n_emotions: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            token_init_std: self.token_init_std,
            ..ModelConfig::new(vocab_size, self.policy().max_total(), n_emotions)
        }
    }

    pub fn loss_log_path(&self) -> PathBuf {
        self.loss_log.clone().unwrap_or_else(|| {
            let mut s = self.checkpoint.clone().into_os_string();
            s.push(".loss.csv");
            s.into()
        })
    }
}

pub struct LoadedCorpus {
    pub catalog: MemeCatalog,
    pub emotions: EmotionSet,
    pub dialogues: Vec<Dialogue>,
    pub split: CorpusSplit,
}

impl LoadedCorpus {
    pub fn load(config: &RunConfig) -> Result<Self> {
        let catalog = MemeCatalog::load(&config.catalog)?;
        let emotions = EmotionSet::load(&config.emotions)?;
        let dialogues = load_corpus(&config.corpus, &catalog, &emotions)?;
        let split = SplitManifest::load(&config.split)?.resolve(&dialogues)?;
        Ok(LoadedCorpus {
            catalog,
            emotions,
            dialogues,
            split,
        })
    }

    pub fn seen_memes(&self) -> Vec<u32> {
        let held = &self.split.held_out_memes;
        self.catalog
            .ids()
            .into_iter()
            .filter(|m| !held.contains(m))
            .collect()
    }

    pub fn held_out_memes(&self) -> Vec<u32> {
        self.split.held_out_memes.iter().copied().collect()
    }

    pub fn partition(&self, name: &str) -> Result<&[Dialogue]> {
        match name {
            "train" => Ok(&self.split.train),
            "valid_seen" => Ok(&self.split.valid_seen),
            "valid_unseen" => Ok(&self.split.valid_unseen),
            other => Err(Error::Spec(format!(
                "unknown split {other}; expected train, valid_seen or valid_unseen"
            ))),
        }
    }
}

/// Everything besides the weights that a checkpoint needs to be used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub task: u8,
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub use_ef: bool,
    pub use_edp: bool,
    pub policy: TruncationPolicy,
    pub run: RunConfig,
}

pub struct Trained {
    pub header: ModelHeader,
    pub model: Model,
}

impl Trained {
    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::new(self.header.clone(), self.model.params.to_map()).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint<ModelHeader> = Checkpoint::load(path)?;
        let header = ckpt.header;
        if header.model.vocab_size != header.vocab.len() {
            return Err(Error::Version(format!(
                "model expects {} tokens but the vocabulary has {}",
                header.model.vocab_size,
                header.vocab.len()
            )));
        }
        let mut model = Model::new(header.model.clone(), 0)?;
        model.params.load_map(ckpt.params)?;
        Ok(Trained { header, model })
    }

    fn expect_task(&self, task: u8) -> Result<()> {
        if self.header.task != task {
            return Err(Error::Version(format!(
                "checkpoint was trained for task {}, not task {task}",
                self.header.task
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub log: TrainLog,
    pub wall_time: Duration,
    pub seed: u64,
}

impl TrainSummary {
    pub fn line(&self) -> String {
        let loss = self
            .log
            .final_loss()
            .map_or_else(|| "n/a".to_string(), |l| format!("{l:.6}"));
        format!(
            "final_loss={loss} wall_time={:.1}s seed={}",
            self.wall_time.as_secs_f64(),
            self.seed
        )
    }
}

/// Trains the configured task on the train partition; writes the
/// checkpoint and the loss log.
pub fn train(config: &RunConfig) -> Result<(Trained, TrainSummary)> {
    config.validate()?;
    let start = Instant::now();
    let data = LoadedCorpus::load(config)?;
    let vocab = build_vocab(&data.dialogues, &data.catalog, &data.emotions)?;
    let model_cfg = config.model_config(vocab.len(), data.emotions.len());
    let mut model = Model::new(model_cfg.clone(), config.seed)?;
    let policy = config.policy();
    let train = &data.split.train;
    let log = match config.task {
        1 => train_generation(&mut model, &vocab, train, &policy, &config.train())?,
        2 => train_retrieval(
            &mut model,
            &vocab,
            &data.catalog,
            train,
            &data.seen_memes(),
            &policy,
            &config.task2(),
        )?,
        _ => train_emotion(
            &mut model,
            &vocab,
            &data.catalog,
            &data.emotions,
            train,
            &policy,
            &EmotionTrainConfig {
                use_ef: config.use_ef,
                use_edp: config.use_edp,
                train: config.train(),
            },
        )?,
    };
    let trained = Trained {
        header: ModelHeader {
            task: config.task,
            model: model_cfg,
            vocab,
            use_ef: config.use_ef,
            use_edp: config.use_edp,
            policy,
            run: config.clone(),
        },
        model,
    };
    trained.save(&config.checkpoint)?;
    log.write_csv(&config.loss_log_path())?;
    let summary = TrainSummary {
        log,
        wall_time: start.elapsed(),
        seed: config.seed,
    };
    Ok((trained, summary))
}

fn capped<T>(mut v: Vec<T>, cap: Option<usize>) -> Vec<T> {
    if let Some(c) = cap {
        v.truncate(c);
    }
    v
}

/// Evaluates a checkpoint on one partition. Only reads its inputs.
pub fn evaluate(config: &RunConfig, split_name: &str) -> Result<MetricsReport> {
    config.validate()?;
    let data = LoadedCorpus::load(config)?;
    let trained = Trained::load(&config.checkpoint)?;
    trained.expect_task(config.task)?;
    if trained.header.model.n_emotions != data.emotions.len() {
        return Err(Error::Version(format!(
            "checkpoint has {} emotions, corpus has {}",
            trained.header.model.n_emotions,
            data.emotions.len()
        )));
    }
    let dialogues = data.partition(split_name)?;
    let (metrics, n_examples, metadata) = match config.task {
        1 => eval_generation(config, &trained, dialogues)?,
        2 => eval_retrieval(config, &trained, &data, dialogues, split_name)?,
        _ => eval_emotion(config, &trained, &data, dialogues)?,
    };
    let report = MetricsReport {
        task: config.task,
        split: split_name.to_string(),
        metrics,
        n_examples,
        seed: config.seed,
        metadata,
        config: serde_json::to_value(config)?,
    };
    report.validate()?;
    if let Some(p) = &config.report {
        report.save(p)?;
    }
    Ok(report)
}

type EvalParts = (BTreeMap<String, f64>, usize, BTreeMap<String, String>);

fn eval_generation(
    config: &RunConfig,
    trained: &Trained,
    dialogues: &[Dialogue],
) -> Result<EvalParts> {
    let h = &trained.header;
    let exs = capped(examples(dialogues, 1), config.max_eval_examples);
    if exs.is_empty() {
        return Err(Error::Corpus("no evaluation examples".into()));
    }
    let mut cands = Vec::with_capacity(exs.len());
    let mut refs = Vec::with_capacity(exs.len());
    for e in &exs {
        let scorer = ModelScorer::new(&trained.model, &h.vocab, e.context, &h.policy)?;
        let hyp = scorer.generate(config.beam_size, config.max_generation_tokens)?;
        cands.push(tokenize(&h.vocab.decode(&hyp.tokens)).collect::<Vec<_>>());
        refs.push(tokenize(&e.response.text).collect::<Vec<_>>());
    }
    let metrics = BTreeMap::from([
        ("bleu2".to_string(), bleu_n(&cands, &refs, 2)?),
        ("bleu4".to_string(), bleu_n(&cands, &refs, 4)?),
        ("dist1".to_string(), dist_n(&cands, 1)),
        ("dist2".to_string(), dist_n(&cands, 2)),
    ]);
    let metadata = BTreeMap::from([
        (
            "bleu".to_string(),
            "corpus-level, no smoothing, lowercase whitespace tokens".to_string(),
        ),
        ("dist".to_string(), "corpus-level".to_string()),
        (
            "decoding".to_string(),
            format!("beam {}, unnormalized log-prob", config.beam_size),
        ),
    ]);
    Ok((metrics, exs.len(), metadata))
}

fn eval_retrieval(
    config: &RunConfig,
    trained: &Trained,
    data: &LoadedCorpus,
    dialogues: &[Dialogue],
    split_name: &str,
) -> Result<EvalParts> {
    let h = &trained.header;
    let held: &BTreeSet<u32> = &data.split.held_out_memes;
    let unseen = split_name == "valid_unseen";
    let pool = if unseen {
        data.held_out_memes()
    } else {
        data.seen_memes()
    };
    // a mixed dialogue is scored only on the turns matching the split's side
    let exs: Vec<_> = meme_examples(dialogues)
        .into_iter()
        .filter(|e| {
            e.response
                .meme_id
                .is_some_and(|m| held.contains(&m) == unseen)
        })
        .collect();
    let exs = capped(exs, config.max_eval_examples);
    if exs.is_empty() {
        return Err(Error::Corpus("no evaluation queries".into()));
    }
    let sets = candidate_sets(&exs, &pool, config.n_candidates, config.seed)?;
    let mut rankings = Vec::with_capacity(exs.len());
    for (e, s) in exs.iter().zip(&sets) {
        rankings.push(retrieve(
            &trained.model,
            &h.vocab,
            &data.catalog,
            e.context,
            &e.response.text,
            &s.candidates,
            &h.policy,
        )?);
    }
    let truths: Vec<u32> = sets.iter().map(|s| s.truth).collect();
    let n = config.n_candidates;
    let mut metrics = BTreeMap::new();
    for k in [1, 3, 5] {
        metrics.insert(
            format!("recall_{n}@{k}"),
            recall_at_k(&rankings, &truths, k)?,
        );
    }
    metrics.insert(
        "map".to_string(),
        mean_average_precision(&rankings, &truths)?,
    );
    let metadata = BTreeMap::from([(
        "candidates".to_string(),
        format!(
            "truth + {} distractors from {} memes",
            n - 1,
            if unseen { "held-out" } else { "seen" }
        ),
    )]);
    Ok((metrics, exs.len(), metadata))
}

fn eval_emotion(
    config: &RunConfig,
    trained: &Trained,
    data: &LoadedCorpus,
    dialogues: &[Dialogue],
) -> Result<EvalParts> {
    let h = &trained.header;
    let inputs = emotion_inputs(
        &h.vocab,
        &data.catalog,
        &data.emotions,
        dialogues,
        h.use_ef,
        h.use_edp,
        &h.policy,
    )?;
    let inputs = capped(inputs, config.max_eval_examples);
    if inputs.is_empty() {
        return Err(Error::Corpus("no evaluation examples".into()));
    }
    let e = h.model.n_emotions;
    let mut preds = Vec::with_capacity(inputs.len());
    let mut truths = Vec::with_capacity(inputs.len());
    for inp in &inputs {
        let ranked = classify_emotion(&trained.model, inp, e)?;
        preds.push(ranked.into_iter().map(|p| p.0).collect::<Vec<_>>());
        if let crate::textproc::Labels::Emotion { emotion_id, .. } = inp.labels {
            truths.push(emotion_id);
        }
    }
    let mut metrics = BTreeMap::new();
    for k in [1, 3, 5] {
        metrics.insert(
            format!("acc@{k}"),
            accuracy_at_k(&preds, &truths, k.min(e))?,
        );
    }
    let metadata = BTreeMap::from([(
        "configuration".to_string(),
        match (h.use_ef, h.use_edp) {
            (false, false) => "base",
            (true, false) => "ef",
            (false, true) => "edp",
            (true, true) => "ef+edp",
        }
        .to_string(),
    )]);
    Ok((metrics, inputs.len(), metadata))
}

/// The three trained models behind the chat loop.
pub struct ChatSession {
    pub generator: Trained,
    pub retriever: Trained,
    pub classifier: Trained,
    pub catalog: MemeCatalog,
    pub emotions: EmotionSet,
    pub beam_size: usize,
    pub max_generation_tokens: usize,
    history: Vec<Turn>,
}

/// One bot turn.
#[derive(Clone, Debug, PartialEq)]
pub struct Reply {
    pub text: String,
    pub meme_id: u32,
    pub emotion_id: u32,
}

impl ChatSession {
    pub fn new(
        generator: Trained,
        retriever: Trained,
        classifier: Trained,
        catalog: MemeCatalog,
        emotions: EmotionSet,
    ) -> Result<Self> {
        generator.expect_task(1)?;
        retriever.expect_task(2)?;
        classifier.expect_task(3)?;
        if classifier.header.model.n_emotions != emotions.len() {
            return Err(Error::Version("classifier and emotion set disagree".into()));
        }
        Ok(ChatSession {
            generator,
            retriever,
            classifier,
            catalog,
            emotions,
            beam_size: 5,
            max_generation_tokens: 32,
            history: Vec::new(),
        })
    }

    pub fn history(&self) -> &[Turn] {
        &self.history
    }

    /// Generates a reply to `utterance`, attaches the best meme from the
    /// whole catalog and predicts that meme's emotion.
    pub fn respond(&mut self, utterance: &str) -> Result<Reply> {
        self.history.push(Turn {
            speaker: Speaker::A,
            text: utterance.to_string(),
            meme_id: None,
            emotion_id: None,
        });
        let g = &self.generator.header;
        let scorer = ModelScorer::new(&self.generator.model, &g.vocab, &self.history, &g.policy)?;
        let hyp = scorer.generate(self.beam_size, self.max_generation_tokens)?;
        let mut text = g.vocab.decode(&hyp.tokens);
        if text.is_empty() {
            text = "...".to_string();
        }

        let r = &self.retriever.header;
        let ranked = retrieve(
            &self.retriever.model,
            &r.vocab,
            &self.catalog,
            &self.history,
            &text,
            &self.catalog.ids(),
            &r.policy,
        )?;
        let meme_id = ranked.top().expect("catalog is non-empty");

        let c = &self.classifier.header;
        // the label slot is required by the layout but unused at inference
        let turn = Turn {
            speaker: Speaker::B,
            text: text.clone(),
            meme_id: Some(meme_id),
            emotion_id: Some(0),
        };
        let input = encode_emotion(
            &c.vocab,
            &self.catalog,
            &self.emotions,
            &self.history,
            &turn,
            c.use_ef,
            c.use_edp,
            &c.policy,
        )?;
        let emotion_id = classify_emotion(&self.classifier.model, &input, 1)?[0].0;
        self.history.push(Turn {
            emotion_id: Some(emotion_id),
            ..turn
        });
        Ok(Reply {
            text,
            meme_id,
            emotion_id,
        })
    }

    /// Reads utterances until `/quit` or end of input.
    pub fn run<R: BufRead, W: Write>(&mut self, input: R, mut out: W) -> Result<()> {
        let io = |e| Error::io("<terminal>", e);
        write!(out, "> ").map_err(io)?;
        out.flush().map_err(io)?;
        for line in input.lines() {
            let line = line.map_err(io)?;
            let line = line.trim();
            if line == "/quit" {
                break;
            }
            if !line.is_empty() {
                let reply = self.respond(line)?;
                let meme = self
                    .catalog
                    .get(reply.meme_id)
                    .expect("retrieved from catalog");
                let emotion = self.emotions.description(reply.emotion_id).unwrap_or("?");
                writeln!(out, "{}", reply.text).map_err(io)?;
                writeln!(out, "  [meme {}: {}] ({emotion})", meme.meme_id, meme.title)
                    .map_err(io)?;
            }
            write!(out, "> ").map_err(io)?;
            out.flush().map_err(io)?;
        }
        writeln!(out).map_err(io)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path, task: u8) -> RunConfig {
        let spec = GeneratorSpec {
            n_dialogues: 40,
            n_memes: 12,
            n_emotions: 4,
            ..GeneratorSpec::default()
        };
        let corpus = dir.join("corpus");
        if !corpus.join(SPLIT_FILE).exists() {
            write_synthetic_corpus(&corpus, &spec, 4, 1).unwrap();
        }
        RunConfig {
            task,
            checkpoint: dir.join(format!("task{task}.json")),
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            max_context_tokens: 24,
            max_response_tokens: 16,
            epochs: 1,
            batch_size: 8,
            max_generation_tokens: 4,
            n_candidates: 4,
            max_eval_examples: Some(6),
            seed: 2,
            ..RunConfig::default()
        }
        .with_corpus_dir(&corpus)
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        let c = RunConfig {
            epochs: 7,
            use_edp: false,
            ..RunConfig::default()
        };
        c.save(&p).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), c);

        std::fs::write(&p, r#"{"epochs": 3, "learning_rat": 0.1}"#).unwrap();
        assert!(RunConfig::load(&p).is_err());
        std::fs::write(&p, r#"{"epochs": 3}"#).unwrap();
        let partial = RunConfig::load(&p).unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.margin, 0.2);
    }

    #[test]
    fn validation_and_paths() {
        assert!(RunConfig {
            task: 4,
            ..RunConfig::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            n_candidates: 0,
            ..RunConfig::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            margin: 0.0,
            ..RunConfig::default()
        }
        .validate()
        .is_err());
        let c = RunConfig {
            checkpoint: "out/m.json".into(),
            ..RunConfig::default()
        };
        assert_eq!(c.loss_log_path(), PathBuf::from("out/m.json.loss.csv"));
    }

    #[test]
    fn unknown_partition() {
        let dir = tempfile::tempdir().unwrap();
        let data = LoadedCorpus::load(&tiny(dir.path(), 2)).unwrap();
        assert!(matches!(data.partition("test"), Err(Error::Spec(_))));
        assert_eq!(data.seen_memes().len() + data.held_out_memes().len(), 12);
    }

    #[test]
    fn zero_epochs_is_the_seeded_init() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig {
            epochs: 0,
            ..tiny(dir.path(), 3)
        };
        let (trained, summary) = train(&config).unwrap();
        assert!(summary.log.rows.is_empty());
        let init = Model::new(trained.header.model.clone(), config.seed).unwrap();
        assert_eq!(init.params.to_map(), trained.model.params.to_map());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny(dir.path(), 2);
        let (trained, _) = train(&config).unwrap();
        let loaded = Trained::load(&config.checkpoint).unwrap();
        assert_eq!(loaded.header, trained.header);
        assert_eq!(loaded.model.params.to_map(), trained.model.params.to_map());
        assert!(config.loss_log_path().exists());

        let mut bad = loaded.header.clone();
        bad.model.vocab_size += 1;
        let p = dir.path().join("bad.json");
        Checkpoint::new(bad, loaded.model.params.to_map())
            .save(&p)
            .unwrap();
        assert!(matches!(Trained::load(&p), Err(Error::Version(_))));
        assert!(matches!(loaded.expect_task(1), Err(Error::Version(_))));
    }

    #[test]
    fn evaluation_leaves_inputs_alone() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig {
            report: Some(dir.path().join("r.json")),
            ..tiny(dir.path(), 1)
        };
        train(&config).unwrap();
        let before = std::fs::read(&config.checkpoint).unwrap();
        let report = evaluate(&config, "valid_seen").unwrap();
        assert_eq!(std::fs::read(&config.checkpoint).unwrap(), before);
        assert_eq!(
            MetricsReport::load(config.report.as_ref().unwrap()).unwrap(),
            report
        );
        assert_eq!(report.config["epochs"], 1);
    }

    #[test]
    fn chat_keeps_history() {
        let dir = tempfile::tempdir().unwrap();
        let models: Vec<Trained> = (1..=3)
            .map(|t| train(&tiny(dir.path(), t)).unwrap().0)
            .collect();
        let config = tiny(dir.path(), 1);
        let data = LoadedCorpus::load(&config).unwrap();
        let mut it = models.into_iter();
        let (g, r, c) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        assert!(ChatSession::new(r, g, c, data.catalog.clone(), data.emotions.clone()).is_err());

        let models: Vec<Trained> = (1..=3)
            .map(|t| Trained::load(&tiny(dir.path(), t).checkpoint).unwrap())
            .collect();
        let mut it = models.into_iter();
        let mut chat = ChatSession::new(
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            data.catalog.clone(),
            data.emotions.clone(),
        )
        .unwrap();
        chat.max_generation_tokens = 4;
        let reply = chat.respond("hello there").unwrap();
        assert!(!reply.text.is_empty());
        assert!(data.catalog.get(reply.meme_id).is_some());
        assert!((reply.emotion_id as usize) < data.emotions.len());
        assert_eq!(chat.history().len(), 2);
        assert_eq!(chat.history()[1].meme_id, Some(reply.meme_id));

        let mut out = Vec::new();
        chat.run("\nhi\n/quit\nignored\n".as_bytes(), &mut out)
            .unwrap();
        let out = String::from_utf8(out).unwrap();
        assert_eq!(out.matches("[meme ").count(), 1);
        assert_eq!(chat.history().len(), 4);
    }
}
