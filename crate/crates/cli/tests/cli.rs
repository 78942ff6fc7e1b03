use std::path::Path;
use std::process::{Command, Output, Stdio};

const TINY: &[&str] = &[
    "--set",
    "model.d_model=16",
    "--set",
    "model.d_ff=32",
    "--set",
    "model.n_layers=1",
    "--set",
    "train.batch_size=8",
    "--set",
    "train.epochs=1",
    "--set",
    "train.cold_start_steps=20",
    "--set",
    "train.max_new_tokens=8",
    "--set",
    "eval.pool_size=4",
    "--set",
    "eval.n_seeds=1",
    "--set",
    "diagnostic.n_examples=16",
    "--set",
    "precision=\"f64\"",
    "--threads",
    "1",
];

fn rge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rge"))
        .arg("--dir")
        .arg(dir)
        .args(TINY)
        .args(args)
        .env_remove("RGE_LOG")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn prepared() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    ok(&rge(
        tmp.path(),
        &["gen-data", "--n-train", "32", "--n-eval", "12"],
    ));
    ok(&rge(
        tmp.path(),
        &[
            "--set",
            "data.n_train=32",
            "--set",
            "data.n_eval=12",
            "cold-start",
        ],
    ));
    tmp
}

#[test]
fn gen_data_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "--seed",
        "4",
        "gen-data",
        "--n-train",
        "30",
        "--n-eval",
        "10",
        "--families",
        "recolor,remove",
    ];
    let text = ok(&rge(a.path(), &args));
    assert!(text.contains("30 train and 10 eval"));
    ok(&rge(b.path(), &args));
    for f in ["train.jsonl", "eval.jsonl", "vocab.json"] {
        let x = std::fs::read(a.path().join("data").join(f)).unwrap();
        assert_eq!(
            x,
            std::fs::read(b.path().join("data").join(f)).unwrap(),
            "{f}"
        );
    }
    let train = std::fs::read_to_string(a.path().join("data/train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 31);
    assert!(!train.contains("\"select\""));
    let manifest = std::fs::read_to_string(a.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 4"));
}

#[test]
fn empty_train_split_warns() {
    let tmp = tempfile::tempdir().unwrap();
    let out = rge(tmp.path(), &["gen-data", "--n-train", "0", "--n-eval", "2"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_train is 0"));
    let train = std::fs::read_to_string(tmp.path().join("data/train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 1);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        rge(tmp.path(), &["--set", "bogus=1", "gen-data"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(rge(tmp.path(), &["no-such-command"]).status.code(), Some(1));
    let missing = rge(tmp.path(), &["cold-start"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("gen-data"));
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let io = rge(
        &blocker.join("sub"),
        &["gen-data", "--n-train", "2", "--n-eval", "2"],
    );
    assert_eq!(io.status.code(), Some(3));
    assert_eq!(rge(tmp.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn diverging_training_is_a_numeric_abort() {
    let tmp = prepared();
    let out = rge(
        tmp.path(),
        &[
            "--set",
            "train.learning_rate=1e30",
            "--set",
            "train.optimizer.grad_clip=0",
            "--set",
            "train.epochs=3",
            "train",
            "--mode",
            "baseline",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn train_eval_embed_and_report() {
    let tmp = prepared();
    let dir = tmp.path();
    let text = ok(&rge(dir, &["train", "--mode", "baseline"]));
    assert!(text.contains("oracle reads 0"), "{text}");
    let text = ok(&rge(dir, &["train", "--mode", "self_generated"]));
    assert!(!text.contains("oracle reads 0"));
    let model = dir.join("models/self_generated-seed0.ckpt");
    let text = ok(&rge(dir, &["eval", "--model", model.to_str().unwrap()]));
    assert!(text.contains("reasoning off") && text.contains("reasoning on"));

    let eval = std::fs::read_to_string(dir.join("data/eval.jsonl")).unwrap();
    let queries: Vec<String> = eval
        .lines()
        .skip(1)
        .take(4)
        .map(|l| {
            let start = l.find("\"query\":[").unwrap() + 9;
            let end = start + l[start..].find(']').unwrap();
            l[start..end].replace(',', " ")
        })
        .collect();
    let input = dir.join("queries.txt");
    std::fs::write(&input, queries.join("\n")).unwrap();
    let cold = dir.join("models/cold.ckpt");
    let embed = |mode: &str| {
        ok(&rge(
            dir,
            &[
                "embed",
                "--model",
                cold.to_str().unwrap(),
                "--mode",
                mode,
                "--input",
                input.to_str().unwrap(),
            ],
        ))
    };
    let direct = embed("direct");
    let reasoning = embed("reasoning");
    assert_eq!(direct.lines().count(), 4);
    assert!(direct.lines().all(|l| l.split(' ').count() == 16));
    assert_ne!(direct, reasoning);
    assert_eq!(direct, embed("direct"));

    let stdin = Command::new(env!("CARGO_BIN_EXE_rge"))
        .args(["embed", "--model", cold.to_str().unwrap()])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    use std::io::Write;
    stdin
        .stdin
        .as_ref()
        .unwrap()
        .write_all(queries[0].as_bytes())
        .unwrap();
    let out = stdin.wait_with_output().unwrap();
    assert_eq!(
        String::from_utf8(out.stdout).unwrap().lines().next(),
        direct.lines().next()
    );

    ok(&rge(dir, &["diagnose"]));
    let files = ok(&rge(dir, &["report"]));
    assert!(files.contains("leakage_diagnostic") && files.contains("evaluations"));
    assert!(dir.join("report/report.md").exists());
}

#[test]
fn run_all_report_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "--seed",
        "2",
        "--set",
        "data.n_train=32",
        "--set",
        "data.n_eval=12",
        "run-all",
    ];
    let sa = ok(&rge(a.path(), &args));
    ok(&rge(b.path(), &args));
    let run_dir = Path::new(
        sa.lines()
            .next()
            .unwrap()
            .trim_start_matches("run directory "),
    );
    let fp = run_dir.file_name().unwrap();
    let report_a = a.path().join(fp).join("report");
    let report_b = b.path().join(fp).join("report");
    let mut names: Vec<_> = std::fs::read_dir(&report_a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() >= 9);
    for n in &names {
        assert_eq!(
            std::fs::read(report_a.join(n)).unwrap(),
            std::fs::read(report_b.join(n)).unwrap(),
            "{n:?}"
        );
    }
    let comparison = names
        .iter()
        .find(|n| {
            n.to_string_lossy().starts_with("supervision_comparison")
                && n.to_string_lossy().ends_with(".csv")
        })
        .unwrap();
    let csv = std::fs::read_to_string(report_a.join(comparison)).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let out = tempfile::tempdir().unwrap();
    let results = a.path().join(fp).join("results.json");
    let listed = ok(&rge(
        a.path(),
        &[
            "report",
            results.to_str().unwrap(),
            "--out",
            out.path().to_str().unwrap(),
        ],
    ));
    assert!(listed.contains("supervision_comparison"));
    let md = std::fs::read_to_string(out.path().join(format!(
        "supervision_comparison-{}.md",
        fp.to_string_lossy()
    )))
    .unwrap();
    assert_eq!(
        md.lines()
            .filter(|l| l.starts_with("| ") && !l.contains("---"))
            .count(),
        4
    );
}

#[test]
fn env_overrides_apply() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_rge"))
        .arg("--dir")
        .arg(tmp.path())
        .args(["gen-data", "--n-eval", "1"])
        .env("RGE_DATA__N_TRAIN", "3")
        .output()
        .unwrap();
    assert!(ok(&out).contains("3 train and 1 eval"));
    let cfg = std::fs::read_to_string(tmp.path().join("config.toml")).unwrap();
    assert!(cfg.contains("n_train = 3"));
}
