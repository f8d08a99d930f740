mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::write_small_config;

fn ctxsteer(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ctxsteer"));
    cmd.args(args).env_remove("CTXSTEER_OUT");
    if let Some(dir) = env_out {
        cmd.env("CTXSTEER_OUT", dir);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());
    let config = config.to_str().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    let synth = ctxsteer(&["synth", "--config", config, "--out", out], None);
    assert_eq!(code(&synth), 0, "{}", String::from_utf8_lossy(&synth.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&synth.stdout).unwrap();
    assert_eq!(summary["corpus_samples"], 54);

    // no vectors yet
    let eval = ctxsteer(&["eval", "--config", config, "--out", out], None);
    assert_eq!(code(&eval), 3);
    assert!(String::from_utf8_lossy(&eval.stderr).contains("vfv.json"));

    let short = ctxsteer(
        &["latency", "--n-tokens", "100", "--config", config, "--out", out],
        None,
    );
    assert_eq!(code(&short), 2);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[injection]\nalpha = \"strong\"\n").unwrap();
    assert_eq!(
        code(&ctxsteer(
            &["synth", "--config", bad.to_str().unwrap(), "--out", out],
            None
        )),
        2
    );
    std::fs::write(&bad, "bogus_key = 1\n").unwrap();
    assert_eq!(
        code(&ctxsteer(
            &["synth", "--config", bad.to_str().unwrap(), "--out", out],
            None
        )),
        2
    );
    assert_eq!(code(&ctxsteer(&["synth", "--config", "/nonexistent.toml"], None)), 2);
    assert_eq!(
        code(&ctxsteer(
            &["eval", "--config", config, "--out", out, "--layers", "3,99"],
            None
        )),
        2
    );
}

#[test]
fn output_directory_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());
    let config = config.to_str().unwrap();
    let (from_env, from_flag) = (dir.path().join("env"), dir.path().join("flag"));

    assert_eq!(code(&ctxsteer(&["synth", "--config", config], Some(&from_env))), 0);
    assert!(from_env.join("corpus.jsonl").is_file());

    let flag = from_flag.to_str().unwrap();
    let both = ctxsteer(&["synth", "--config", config, "--out", flag], Some(&from_env));
    assert_eq!(code(&both), 0);
    assert!(from_flag.join("corpus.jsonl").is_file());
    assert_eq!(
        std::fs::read(from_env.join("corpus.jsonl")).unwrap(),
        std::fs::read(from_flag.join("corpus.jsonl")).unwrap()
    );

    // a different seed gives a different corpus
    let other = dir.path().join("other");
    assert_eq!(
        code(&ctxsteer(&["synth", "--config", config, "--seed", "6"], Some(&other))),
        0
    );
    assert_ne!(
        std::fs::read(other.join("corpus.jsonl")).unwrap(),
        std::fs::read(from_flag.join("corpus.jsonl")).unwrap()
    );
}

#[test]
fn qa_scoring_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("answers.jsonl");
    std::fs::write(
        &input,
        concat!(
            "{\"format\":\"ctxsteer-qa\",\"version\":1}\n",
            "{\"question_id\":\"q1\",\"label\":\"yes\",\"answer\":\"Yes, there is.\"}\n",
            "{\"question_id\":\"q2\",\"label\":\"no\",\"answer\":\"yes\"}\n",
            "{\"question_id\":\"q3\",\"label\":\"no\",\"answer\":\"No.\"}\n",
            "{\"question_id\":\"q4\",\"label\":\"yes\",\"answer\":\"no\"}\n",
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = ctxsteer(
        &["qa", "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["accuracy"], 50.0);
    assert_eq!(report["yes_ratio"], 50.0);
    assert!(out.join("qa_report.json").is_file());
}
