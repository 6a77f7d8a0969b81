use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_memedial"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn gen_corpus(dir: &Path, seed: &str) {
    let o = run(&[
        "gen-corpus",
        "--out",
        dir.to_str().unwrap(),
        "--n-dialogues",
        "40",
        "--n-memes",
        "12",
        "--n-emotions",
        "4",
        "--n-unseen",
        "4",
        "--seed",
        seed,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

const TINY: &[&str] = &[
    "--n-layers",
    "1",
    "--n-heads",
    "2",
    "--d-model",
    "16",
    "--d-ff",
    "32",
    "--max-context-tokens",
    "24",
    "--max-response-tokens",
    "16",
    "--batch-size",
    "8",
    "--epochs",
    "1",
    "--seed",
    "3",
    "--beam-size",
    "2",
    "--max-generation-tokens",
    "4",
    "--max-eval-examples",
    "8",
];

fn train(corpus: &Path, task: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--task",
        task,
        "--out",
        out.to_str().unwrap(),
        "--corpus-dir",
        corpus.to_str().unwrap(),
    ];
    // flags in `extra` replace their TINY defaults
    for pair in TINY.chunks(2) {
        if !extra.contains(&pair[0]) {
            args.extend_from_slice(pair);
        }
    }
    args.extend_from_slice(extra);
    run(&args)
}

fn eval(task: &str, ckpt: &Path, split: &str, report: &Path) -> Output {
    run(&[
        "eval",
        "--task",
        task,
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--split",
        split,
        "--report",
        report.to_str().unwrap(),
        "--n-candidates",
        "4",
    ])
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["train", "--task"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn gen_corpus_is_deterministic_and_complete() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen_corpus(a.path(), "5");
    gen_corpus(b.path(), "5");
    for f in [
        "corpus.jsonl",
        "catalog.json",
        "emotions.json",
        "split.json",
    ] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
    let split: serde_json::Value =
        serde_json::from_slice(&read(&a.path().join("split.json"))).unwrap();
    assert_eq!(split["held_out_memes"].as_array().unwrap().len(), 4);
}

#[test]
fn default_corpus_holds_out_twenty_memes() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&[
        "gen-corpus",
        "--out",
        d.path().to_str().unwrap(),
        "--n-dialogues",
        "200",
    ]);
    assert_eq!(code(&o), 0);
    let split: serde_json::Value =
        serde_json::from_slice(&read(&d.path().join("split.json"))).unwrap();
    assert_eq!(split["held_out_memes"].as_array().unwrap().len(), 20);
}

#[test]
fn missing_corpus_is_a_data_error() {
    let d = tempfile::tempdir().unwrap();
    let o = train(
        &d.path().join("nowhere"),
        "2",
        &d.path().join("m.json"),
        &[],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn train_eval_is_reproducible_and_read_only() {
    let d = tempfile::tempdir().unwrap();
    let corpus = d.path().join("corpus");
    gen_corpus(&corpus, "1");
    let ckpt = d.path().join("ret.json");
    let o = train(&corpus, "2", &ckpt, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = String::from_utf8_lossy(&o.stdout);
    assert!(
        summary.contains("final_loss=") && summary.contains("seed=3"),
        "{summary}"
    );
    let log = std::fs::read_to_string(d.path().join("ret.json.loss.csv")).unwrap();
    assert!(log.starts_with("step,loss,lr\n"));

    let before: Vec<Vec<u8>> = [ckpt.clone(), corpus.join("corpus.jsonl")]
        .iter()
        .map(|p| read(p))
        .collect();
    // same report path both times, since the report embeds its config
    let report_path = d.path().join("r.json");
    let reports: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let o = eval("2", &ckpt, "valid_unseen", &report_path);
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
            read(&report_path)
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
    assert_eq!(read(&ckpt), before[0]);
    assert_eq!(read(&corpus.join("corpus.jsonl")), before[1]);

    let report: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    let keys: Vec<&str> = report["metrics"]
        .as_object()
        .unwrap()
        .keys()
        .map(|k| k.as_str())
        .collect();
    assert_eq!(keys, ["map", "recall_4@1", "recall_4@3", "recall_4@5"]);
    assert_eq!(report["config"]["n_candidates"], 4);

    // a retrieval checkpoint cannot be evaluated as another task
    assert_eq!(
        code(&eval("3", &ckpt, "valid_seen", &d.path().join("x.json"))),
        2
    );
    assert_eq!(
        code(&eval("2", &ckpt, "bogus", &d.path().join("x.json"))),
        2
    );
}

#[test]
fn zero_epochs_keeps_the_initialization() {
    let d = tempfile::tempdir().unwrap();
    let corpus = d.path().join("corpus");
    gen_corpus(&corpus, "2");
    let a = d.path().join("a.json");
    let b = d.path().join("b.json");
    assert_eq!(code(&train(&corpus, "3", &a, &["--epochs", "0"])), 0);
    assert_eq!(code(&train(&corpus, "3", &b, &["--epochs", "0"])), 0);
    let pa: serde_json::Value = serde_json::from_slice(&read(&a)).unwrap();
    let pb: serde_json::Value = serde_json::from_slice(&read(&b)).unwrap();
    assert_eq!(pa["params"], pb["params"]);
    assert_eq!(
        std::fs::read_to_string(d.path().join("a.json.loss.csv")).unwrap(),
        ""
    );
}

#[test]
fn base_configuration_from_flags() {
    let d = tempfile::tempdir().unwrap();
    let corpus = d.path().join("corpus");
    gen_corpus(&corpus, "4");
    let ckpt = d.path().join("emo.json");
    assert_eq!(
        code(&train(&corpus, "3", &ckpt, &["--no-ef", "--no-edp"])),
        0
    );
    let r = d.path().join("r.json");
    assert_eq!(code(&eval("3", &ckpt, "valid_seen", &r)), 0);
    let report: serde_json::Value = serde_json::from_slice(&read(&r)).unwrap();
    assert_eq!(report["metadata"]["configuration"], "base");
    assert_eq!(report["config"]["use_ef"], false);
}

#[test]
fn chat_replies_with_a_meme_and_quits() {
    let d = tempfile::tempdir().unwrap();
    let corpus = d.path().join("corpus");
    gen_corpus(&corpus, "6");
    let ckpts: Vec<PathBuf> = ["1", "2", "3"]
        .iter()
        .map(|t| {
            let p = d.path().join(format!("t{t}.json"));
            let o = train(&corpus, t, &p, &[]);
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
            p
        })
        .collect();
    let mut child = bin()
        .args([
            "chat",
            "--ckpt-gen",
            ckpts[0].to_str().unwrap(),
            "--ckpt-ret",
            ckpts[1].to_str().unwrap(),
            "--ckpt-emo",
            ckpts[2].to_str().unwrap(),
            "--corpus-dir",
            corpus.to_str().unwrap(),
            "--max-generation-tokens",
            "4",
        ])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"hello there\n\n/quit\nnever read\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.matches("[meme ").count(), 1, "{text}");
    // the empty line only re-prompts
    assert_eq!(text.matches("> ").count(), 3, "{text}");
}
