use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "preset=toy
d_model=8
n_heads=2
d_ffn=12
n_enc_layers=1
n_dec_layers=1
adapter_bottleneck=2
task_pairs=60
style_sentences=60
pretrain_sentences=60
pretrain_epochs=1
adapter_epochs=1
task_epochs=1
max_valid=4
eval_examples=3
decode_max_len=8
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_styleswap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_run(dir: &Path) -> String {
    let cfg = dir.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let run_dir = dir.join("run");
    let d = run_dir.to_str().unwrap().to_string();
    let o = run(&[
        "pipeline",
        "--config",
        cfg.to_str().unwrap(),
        "--dir",
        &d,
        "--tasks",
        "headline",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    d
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        &["--bogus"][..],
        &["train-adapter"][..],
        &["generate", "--style", "s9", "--task", "headline"][..],
        &[][..],
    ] {
        let o = run(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn gradcheck_passes_and_exits_zero() {
    let o = run(&["gradcheck", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("max relative error"));
    assert!(out.lines().filter(|l| l.starts_with("param ")).count() == 20);
}

#[test]
fn runtime_failures_exit_one_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("r");
    let o = run(&[
        "generate",
        "--task",
        "headline",
        "--style",
        "s1",
        "--dir",
        d.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().filter(|l| l.starts_with("error:")).count(), 1, "{err}");

    let o = run(&["gen-data", "--set", "no_such_key=3", "--dir", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no_such_key"));

    let o = run(&["gen-data", "--preset", "huge", "--dir", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn styles_differ_only_by_the_adapter_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = tiny_run(dir.path());
    assert!(Path::new(&d)
        .join("reports/headline.inverse-para.enc.s2.metrics")
        .exists());

    let mut checksums = Vec::new();
    for style in ["s0", "s1"] {
        let out = dir.path().join(format!("{style}.txt"));
        let o = run(&[
            "generate",
            "--task",
            "headline",
            "--style",
            style,
            "--beam",
            "2",
            "--dir",
            &d,
            "--output",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let lines: Vec<String> = stderr(&o)
            .lines()
            .filter(|l| l.starts_with("base checksum"))
            .map(|l| l.split_whitespace().nth(2).unwrap().to_string())
            .collect();
        assert_eq!(lines.len(), 2, "{}", stderr(&o));
        assert_eq!(lines[0], lines[1], "installing the adapter changed the base");
        checksums.push(lines[0].clone());
        assert!(out.exists());
    }
    assert_eq!(checksums[0], checksums[1]);

    // subcommands on an existing run directory pick up its run.cfg
    let o = run(&["evaluate", "--task", "headline", "--dir", &d]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 4);

    // and refuse a conflicting override
    let o = run(&["train-adapter", "--style", "s1", "--seed", "77", "--dir", &d]);
    assert_eq!(o.status.code(), Some(1));
}
