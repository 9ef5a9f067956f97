use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const MOONS: &str = include_str!("../../core/presets/moons.toml");

/// The moons preset shrunk to a few seconds of work.
fn small_moons() -> String {
    let small = [
        ("name", "\"moons-cli\""),
        ("dataset_size", "200"),
        ("test_size", "100"),
        ("labeled_ratio", "\"1/10\""),
        ("epochs_per_iteration", "3"),
        ("oracle_epochs", "3"),
        ("widths", "[8]"),
        ("seeds", "[1]"),
    ];
    MOONS
        .lines()
        .map(|line| {
            let key = line.split('=').next().unwrap().trim();
            match small.iter().find(|(k, _)| *k == key) {
                Some((k, v)) => format!("{k} = {v}"),
                None => line.to_string(),
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn dmt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmt"))
        .current_dir(dir)
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dmt(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        dmt(dir.path(), &["ablate", "no-such-variant"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn failures_print_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.toml"),
        "name = \"x\"\nalphas = [0.5, 0.2]\n",
    )
    .unwrap();
    let o = dmt(dir.path(), &["--config", "bad.toml", "split"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    let line: serde_json::Value = serde_json::from_str(err.trim().lines().last().unwrap()).unwrap();
    assert_eq!(line["error"], "config");
    assert!(!line["message"].as_str().unwrap().is_empty());

    let o = dmt(dir.path(), &["split"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn moons_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.toml"), small_moons()).unwrap();
    let base = ["--config", "small.toml", "--out", "out"];
    let run = |extra: &[&str]| {
        let args: Vec<&str> = base.iter().chain(extra).copied().collect();
        dmt(d, &args)
    };

    let text = stdout(&run(&["split"]));
    assert!(text.contains("20 labeled, 180 unlabeled"), "{text}");
    assert!(d.join("out/split-s1.json").exists());

    let text = stdout(&run(&["dmt"]));
    assert!(text.lines().next().unwrap().starts_with("run"));
    assert_eq!(text.lines().filter(|l| l.starts_with("dmt ")).count(), 5);

    // a second invocation resumes from the run log instead of retraining
    let again = stdout(&run(&["dmt"]));
    assert_eq!(
        text.lines()
            .filter(|l| l.starts_with("dmt "))
            .map(|l| &l[..60])
            .collect::<Vec<_>>(),
        again
            .lines()
            .filter(|l| l.starts_with("dmt "))
            .map(|l| &l[..60])
            .collect::<Vec<_>>()
    );

    let eval = stdout(&run(&["eval"]));
    assert_eq!(eval.lines().count(), 7);

    let stats = stdout(&run(&["stats"]));
    assert_eq!(stats.matches("top-20%").count(), 5);

    let ckpt = "out/checkpoints/baseline-s1-i0-F.ckpt";
    let text = stdout(&run(&["label", "--checkpoint", ckpt, "--alpha", "0.5"]));
    assert!(text.starts_with("90 of 180"), "{text}");
    let stats = stdout(&run(&["stats", "--labels", "out/labels"]));
    assert!(stats.contains("       90 "), "{stats}");

    let text = stdout(&run(&["eval", "--checkpoint", ckpt]));
    assert!(text.contains("accuracy") && text.contains("fine-grained"));

    stdout(&run(&["plot", "curves"]));
    stdout(&run(&["plot", "quantiles", "--labels", "out/labels"]));
    for f in [
        "curves.png",
        "curves.json",
        "quantiles.png",
        "quantiles.json",
    ] {
        assert!(d.join("out/plots").join(f).exists(), "{f}");
    }
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("out/plots/curves.json")).unwrap())
            .unwrap();
    assert_eq!(sidecar["series"][0]["points"].as_array().unwrap().len(), 6);
}
