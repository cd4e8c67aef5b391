//! End-to-end checks of the installed binary: exit codes, stage chaining,
//! and report rendering, all against a throwaway cache root.

use std::path::Path;
use std::process::{Command, Output};

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(
        &path,
        r#"
[data]
channels = 4
samples = 24
frames = 3
window = 12
concepts = 2
blocks = 2
clips_per_block = 2
latent_dim = 3
joint_dim = 6
cond_tokens = 2
cond_dim = 3
noise_eeg = 0.0
noise_emb = 0.0

[render]
height = 11
width = 11

[metrics]
nway_repeats = 10
classifier = "oracle"

[semantic]
hidden = [8]
epochs = 2

[perceptual]
embed_dim = 4
model_dim = 4
heads = 2
ffn_dim = 8
layers = 1
epochs = 2

[diffusion]
steps = 4
epochs = 2
hidden = 8
time_dim = 4
"#,
    )
    .unwrap();
    path
}

fn mindcine(cache: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mindcine"))
        .args(args)
        .args(["--cache", cache.to_str().unwrap()])
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn stages_chain_and_the_report_renders() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let cache = tmp.path().join("cache");

    let gen = mindcine(&cache, &["gen", "-c", cfg.to_str().unwrap()]);
    assert!(gen.status.success(), "{}", stderr(&gen));
    assert!(stdout(&gen).contains("dataset:"), "{}", stdout(&gen));

    let eval = mindcine(&cache, &["eval", "-c", cfg.to_str().unwrap()]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let text = stdout(&eval);
    assert!(text.contains("ssim"), "{text}");
    assert!(text.contains("report: "), "{text}");

    // rerunning is a pure cache read and prints the identical table
    let again = mindcine(&cache, &["eval", "-c", cfg.to_str().unwrap()]);
    assert_eq!(text, stdout(&again));

    let csv = mindcine(
        &cache,
        &["report", "-c", cfg.to_str().unwrap(), "--format", "csv"],
    );
    assert!(csv.status.success(), "{}", stderr(&csv));
    assert!(stdout(&csv).starts_with("clip_id,"), "{}", stdout(&csv));

    let out_file = tmp.path().join("report.csv");
    let to_file = mindcine(
        &cache,
        &[
            "report",
            "-c",
            cfg.to_str().unwrap(),
            "--format",
            "csv",
            "--out",
            out_file.to_str().unwrap(),
        ],
    );
    assert!(to_file.status.success());
    assert_eq!(std::fs::read_to_string(&out_file).unwrap(), stdout(&csv));
}

#[test]
fn overrides_reach_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let cache = tmp.path().join("cache");
    let out = mindcine(
        &cache,
        &["gen", "-c", cfg.to_str().unwrap(), "--set", "data.subjects=2"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("2 subject(s)"), "{}", stdout(&out));
}

#[test]
fn invalid_config_exits_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let cache = tmp.path().join("cache");
    let out = mindcine(
        &cache,
        &["gen", "-c", cfg.to_str().unwrap(), "--set", "semantic.lambda=-1.0"],
    );
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("error:"), "{}", stderr(&out));
    // nothing was generated
    assert!(!cache.join("gen").exists());
}

#[test]
fn unknown_config_key_is_named_in_the_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let out = mindcine(&cache, &["gen", "--set", "run.sneed=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("sneed"), "{}", stderr(&out));
}

#[test]
fn report_without_cached_run_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let cache = tmp.path().join("cache");
    let out = mindcine(&cache, &["report", "-c", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("run eval first"), "{}", stderr(&out));
}

#[test]
fn ablate_prints_one_row_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let cache = tmp.path().join("cache");
    let reports = tmp.path().join("reports");
    let out = mindcine(
        &cache,
        &[
            "ablate",
            "-c",
            cfg.to_str().unwrap(),
            "--out",
            reports.to_str().unwrap(),
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("variant"), "{text}");
    for name in [
        "full",
        "wo_semantic",
        "wo_perception",
        "text",
        "text_depth",
        "text_image",
    ] {
        assert!(text.contains(name), "missing {name} in {text}");
        assert!(reports.join(format!("{name}.json")).exists());
    }
}

#[test]
fn cache_env_var_is_honored() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let cache = tmp.path().join("env-cache");
    let out = Command::new(env!("CARGO_BIN_EXE_mindcine"))
        .args(["gen", "-c", cfg.to_str().unwrap()])
        .env("MINDCINE_CACHE", &cache)
        .env("RUST_LOG", "warn")
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(cache.join("gen").exists());
}
