use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rslm::budget::EmbeddingMatrix;
use rslm::model::{CredalRecord, TokenRecord};
use serde_json::Value;

fn rslm(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rslm"));
    cmd.args(args).env_remove("RSLM_SEED");
    if let Some(s) = seed_env {
        cmd.env("RSLM_SEED", s);
    }
    cmd.output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = rslm(args, None);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Runs a failing command and returns its exit code and error JSON.
fn fails(args: &[&str]) -> (i32, Value) {
    let out = rslm(args, None);
    assert!(!out.status.success(), "{args:?} should fail");
    let err: Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert!(err["error"].is_string());
    (out.status.code().unwrap(), err)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Toy data, blob embeddings over its 40 tokens, and a K = 10 budget.
fn toy_setup(d: &Path) {
    ok(&["make-toy-data", "--out", p(&d.join("toy"))]);
    ok(&[
        "make-synth-embeddings",
        "--tokens",
        "40",
        "--dim",
        "8",
        "--blobs",
        "20",
        "--out",
        p(&d.join("emb.txt")),
    ]);
    ok(&[
        "budget",
        "--embeddings",
        p(&d.join("emb.txt")),
        "--k",
        "10",
        "--out",
        p(&d.join("budget.json")),
    ]);
}

#[test]
fn errors_are_json_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (code, err) = fails(&[
        "budget",
        "--embeddings",
        p(&d.join("none.txt")),
        "--k",
        "2",
        "--out",
        p(&d.join("b.json")),
    ]);
    assert_eq!((code, err["kind"].as_str()), (1, Some("io")));

    let (code, err) = fails(&["budget", "--k", "2"]);
    assert_eq!((code, err["kind"].as_str()), (2, Some("usage")));

    ok(&[
        "make-synth-embeddings",
        "--tokens",
        "6",
        "--dim",
        "2",
        "--blobs",
        "2",
        "--out",
        p(&d.join("e.txt")),
    ]);
    let (_, err) = fails(&[
        "budget",
        "--embeddings",
        p(&d.join("e.txt")),
        "--k",
        "2",
        "--max-tokens",
        "5",
        "--out",
        p(&d.join("b.json")),
    ]);
    assert_eq!(err["kind"], "too_many_tokens");
    let (_, err) = fails(&[
        "budget",
        "--embeddings",
        p(&d.join("e.txt")),
        "--k",
        "7",
        "--out",
        p(&d.join("b.json")),
    ]);
    assert_eq!(err["kind"], "invalid_argument");
}

#[test]
fn seed_environment_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let synth = |name: &str, seed: &str, env: Option<&str>| {
        let out = d.join(name);
        let o = rslm(
            &[
                "make-synth-embeddings",
                "--tokens",
                "5",
                "--dim",
                "3",
                "--blobs",
                "2",
                "--seed",
                seed,
                "--out",
                p(&out.join("e.txt")),
            ],
            env,
        );
        assert!(o.status.success());
        (
            fs::read(out.join("e.txt")).unwrap(),
            json(&out.join("run.json")),
        )
    };
    let (a, run_a) = synth("a", "1", Some("5"));
    let (b, run_b) = synth("b", "5", None);
    let (c, _) = synth("c", "1", None);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(
        (run_a["seed"].as_u64(), run_a["seed_source"].as_str()),
        (Some(5), Some("env"))
    );
    assert_eq!(run_b["seed_source"], "flag");
}

#[test]
fn run_json_records_resolved_defaults_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&[
        "make-synth-embeddings",
        "--tokens",
        "12",
        "--dim",
        "4",
        "--blobs",
        "3",
        "--format",
        "binary",
        "--out",
        p(&d.join("e.bin")),
    ]);
    ok(&[
        "make-synth-embeddings",
        "--tokens",
        "12",
        "--dim",
        "4",
        "--blobs",
        "3",
        "--out",
        p(&d.join("e.txt")),
    ]);
    assert_eq!(
        EmbeddingMatrix::load(d.join("e.bin")).unwrap(),
        EmbeddingMatrix::load(d.join("e.txt")).unwrap()
    );

    let out = d.join("budget");
    let table = ok(&[
        "budget",
        "--embeddings",
        p(&d.join("e.bin")),
        "--k",
        "3",
        "--out",
        p(&out.join("b.json")),
        "--report",
        p(&out.join("clusters.csv")),
        "--histogram",
        p(&out.join("sizes.csv")),
    ]);
    assert!(table.contains("clusters: 3"));
    let run = json(&out.join("run.json"));
    assert_eq!(run["command"]["budget"]["linkage"], "ward");
    assert_eq!(run["command"]["budget"]["max_tokens"], 65536);
    assert_eq!(run["resolved"]["sets"], 16);
    assert!(fs::read_to_string(out.join("clusters.csv"))
        .unwrap()
        .starts_with("set_id,cardinality,centroid_distance\n"));

    let first = fs::read(out.join("b.json")).unwrap();
    fs::remove_file(out.join("b.json")).unwrap();
    ok(&["--replay", p(&out.join("run.json"))]);
    assert_eq!(fs::read(out.join("b.json")).unwrap(), first);
}

#[test]
fn train_generate_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy_setup(d);
    let corpus = d.join("toy/corpus.txt");
    let ckpt = d.join("m/rs.ckpt");
    let summary = ok(&[
        "train",
        "--corpus",
        p(&corpus),
        "--budget",
        p(&d.join("budget.json")),
        "--steps",
        "30",
        "--dim",
        "8",
        "--hidden",
        "16",
        "--context",
        "48",
        "--out",
        p(&ckpt),
    ]);
    let s: Value = serde_json::from_str(summary.trim()).unwrap();
    assert_eq!(s["steps"], 30);
    assert!(s["mean_credal_width"].is_f64());
    let log = fs::read_to_string(d.join("m/rs.ckpt.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 30);
    let run = json(&d.join("m/run.json"));
    assert_eq!(run["resolved"]["config"]["model"]["vocab_size"], 40);
    assert_eq!(run["resolved"]["config"]["train"]["loss"]["alpha"], 0.01);

    let trace = d.join("g/trace.jsonl");
    let text = ok(&[
        "generate",
        "--ckpt",
        p(&ckpt),
        "--prompt",
        "a04 b04 b05",
        "--max-len",
        "3",
        "--trace",
        p(&trace),
    ]);
    let records: Vec<TokenRecord> = fs::read_to_string(&trace)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let words: Vec<&str> = records.iter().map(|r| r.token.as_str()).collect();
    assert_eq!(text.trim(), words.join(" "));
    assert!(records.iter().all(|r| r.credal.is_some()));

    // The softmax head takes no budget; the random-set head needs one.
    let (_, err) = fails(&[
        "train",
        "--corpus",
        p(&corpus),
        "--head",
        "softmax",
        "--budget",
        p(&d.join("budget.json")),
        "--out",
        p(&d.join("x.ckpt")),
    ]);
    assert_eq!(err["kind"], "usage");
    let (_, err) = fails(&[
        "train",
        "--corpus",
        p(&corpus),
        "--out",
        p(&d.join("x.ckpt")),
    ]);
    assert_eq!(err["kind"], "usage");
}

#[test]
fn plot_data_from_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let lines: String = (0..3)
        .map(|step| {
            let r = TokenRecord {
                step,
                token_id: step as u32,
                token: format!("t{step}"),
                distribution: vec![0.5, 0.25, 0.25],
                entropy: 1.0397,
                credal: Some(CredalRecord {
                    lower: 0.25,
                    upper: 0.75,
                    width: 0.5,
                }),
                widths: None,
            };
            serde_json::to_string(&r).unwrap() + "\n"
        })
        .collect();
    fs::write(d.join("t.jsonl"), lines).unwrap();
    ok(&[
        "plot-data",
        "--trace",
        p(&d.join("t.jsonl")),
        "--out",
        p(&d.join("plots")),
    ]);
    let csv = fs::read_to_string(d.join("plots/tokens.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(csv.lines().nth(2).unwrap(), "0,1,1,t1,1.0397,0.5");

    let (_, err) = fails(&[
        "plot-data",
        "--trace",
        p(&d.join("missing.jsonl")),
        "--out",
        p(&d.join("p2")),
    ]);
    assert_eq!(err["kind"], "io");
    let (_, err) = fails(&["plot-data", "--out", p(&d.join("p3"))]);
    assert_eq!(err["kind"], "usage");
}

#[test]
fn probe_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["make-toy-data", "--out", p(&d.join("toy"))]);
    ok(&[
        "make-synth-embeddings",
        "--tokens",
        "25",
        "--dim",
        "8",
        "--blobs",
        "8",
        "--out",
        p(&d.join("e.txt")),
    ]);
    ok(&[
        "budget",
        "--embeddings",
        p(&d.join("e.txt")),
        "--k",
        "8",
        "--out",
        p(&d.join("b.json")),
    ]);
    ok(&[
        "train",
        "--corpus",
        p(&d.join("toy/qa_train.jsonl")),
        "--corpus-format",
        "qa",
        "--budget",
        p(&d.join("b.json")),
        "--steps",
        "40",
        "--dim",
        "8",
        "--hidden",
        "16",
        "--context",
        "16",
        "--out",
        p(&d.join("qa.ckpt")),
    ]);
    let probe = d.join("probe");
    let table = ok(&[
        "probe",
        "--ckpt",
        p(&d.join("qa.ckpt")),
        "--data",
        p(&d.join("toy/qa.jsonl")),
        "--corrupt",
        "swap_choices",
        "--seed",
        "3",
        "--bits",
        "--out",
        p(&probe),
    ]);
    assert!(table.contains("entropy (bits)") && table.contains("corrupted"));
    let rows = fs::read_to_string(probe.join("rows.csv")).unwrap();
    assert_eq!(rows.lines().count(), 101);
    let summary = json(&probe.join("summary.json"));
    assert_eq!(summary["entropy_unit"], "bits");
    assert_eq!(summary["config"]["corruption"], "swap_choices");
    assert_eq!(summary["config"]["seed"], 3);

    let plots = d.join("plots");
    ok(&[
        "plot-data",
        "--probe",
        p(&probe),
        "--bins",
        "5",
        "--out",
        p(&plots),
    ]);
    for name in ["hist_clean.csv", "hist_corrupted.csv"] {
        let h = fs::read_to_string(plots.join(name)).unwrap();
        let mut lines = h.lines();
        assert_eq!(lines.next(), Some("metric,bin,lower,upper,count"));
        let counts: Vec<(String, usize)> = lines
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[0].to_string(), f[4].parse().unwrap())
            })
            .collect();
        assert_eq!(counts.len(), 10);
        for metric in ["entropy", "credal_width"] {
            let n: usize = counts
                .iter()
                .filter(|(m, _)| m == metric)
                .map(|(_, c)| c)
                .sum();
            assert_eq!(n, 50, "{name} {metric}");
        }
    }
    // Correctness is the exact-match flag of the probe rows.
    let scatter = fs::read_to_string(plots.join("scatter.csv")).unwrap();
    let flags = |text: &str, col: usize| -> Vec<String> {
        text.lines()
            .skip(1)
            .map(|l| l.split(',').nth(col).unwrap().to_string())
            .collect()
    };
    assert_eq!(flags(&scatter, 4), flags(&rows, 5));
    assert!(flags(&scatter, 4).iter().all(|f| f == "0" || f == "1"));
}

#[test]
fn sweep_marks_failed_cells_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy_setup(d);
    let corpus = d.join("toy/corpus.txt");
    let emb = d.join("emb.txt");
    let out = d.join("sweep");
    let o = rslm(
        &[
            "sweep",
            "--corpus",
            p(&corpus),
            "--embeddings",
            p(&emb),
            "--ks",
            "4,41",
            "--alphas",
            "0.1",
            "--steps",
            "3",
            "--dim",
            "8",
            "--hidden",
            "8",
            "--out",
            p(&out),
        ],
        None,
    );
    assert!(!o.status.success());
    let err: Value = serde_json::from_slice(o.stderr.trim_ascii()).unwrap();
    assert_eq!(err["kind"], "sweep_failed");
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].contains(",ok,") && rows[1].contains(",failed,"));
    assert!(json(&out.join("run.json"))["failure"].is_string());

    let (_, err) = fails(&[
        "sweep",
        "--corpus",
        p(&corpus),
        "--embeddings",
        p(&emb),
        "--alphas",
        "",
        "--out",
        p(&d.join("s2")),
    ]);
    assert!(err["error"].as_str().unwrap().contains("empty sweep grid"));

    // Cell-level parallelism does not change the numbers.
    let run = |name: &str, parallel: bool| {
        let dir = d.join(name);
        let mut args = vec![
            "sweep",
            "--corpus",
            p(&corpus),
            "--embeddings",
            p(&emb),
            "--ks",
            "2,10",
            "--alphas",
            "0.1,0.01",
            "--steps",
            "3",
            "--dim",
            "8",
            "--hidden",
            "8",
            "--out",
            p(&dir),
        ];
        if parallel {
            args.push("--parallel");
        }
        ok(&args);
        fs::read(dir.join("sweep.csv")).unwrap()
    };
    assert_eq!(run("seq", false), run("par", true));
}
