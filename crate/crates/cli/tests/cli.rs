use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bam_core::objective::{MetricsRecord, Split};

const BIN: &str = env!("CARGO_BIN_EXE_bam");

fn small_config(mode: &str, extra: &str) -> String {
    let attention = match mode {
        "weibull" => "mode = \"weibull\"\nk = 1.0\n[prior]\nkind = \"contextual\"\nbeta = 1e-10\nd_mid = 1\n",
        "lognormal" => "mode = \"lognormal\"\nsigma = 0.5\n",
        _ => "mode = \"deterministic\"\n",
    };
    format!(
        r#"task = "synthetic"
seeds = [1]
output_dir = "out"
{extra}
[attention]
{attention}
[train]
lr = 0.03
patience = 40
max_epochs = 40

[synthetic]
train = 400
val = 100
test = 100
heads = 4

[uncertainty]
samples = 4
"#
    )
}

/// Writes `text` as `bam.toml` in a fresh directory.
fn setup(text: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bam.toml");
    std::fs::write(&path, text).unwrap();
    (dir, path)
}

fn bam(args: &[&str], root: Option<&Path>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("BAM_OUTPUT_ROOT");
    if let Some(r) = root {
        cmd.env("BAM_OUTPUT_ROOT", r);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn failed(out: &Output) -> String {
    assert!(!out.status.success(), "expected failure, got {:?}", out.status);
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn records(dir: &Path) -> Vec<MetricsRecord> {
    std::fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn tsv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}

#[test]
fn train_fits_the_synthetic_task_and_writes_its_outputs() {
    let (dir, cfg) = setup(&small_config("weibull", ""));
    let stdout = ok(&bam(&["train", path_str(&cfg)], None));
    assert!(stdout.contains("test accuracy"), "{stdout}");
    let out = dir.path().join("out");
    let recs = records(&out);
    let last_train = recs.iter().rev().find(|r| r.split == Split::Train).unwrap();
    assert!(last_train.accuracy > 0.95, "final training accuracy {}", last_train.accuracy);
    let test = recs.last().unwrap();
    assert_eq!(test.split, Split::Test);
    assert!(test.pavpu.is_some());
    assert!(recs.iter().all(|r| r.wall_ms.is_none()));
    for f in ["timing.jsonl", "summary.json", "params-seed1.txt"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn repeated_training_gives_identical_metrics() {
    let text = small_config("weibull", "").replace("max_epochs = 40", "max_epochs = 3");
    let (dir, cfg) = setup(&text);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&bam(&["train", path_str(&cfg)], Some(&a)));
    ok(&bam(&["train", path_str(&cfg)], Some(&b)));
    let read = |d: &Path| std::fs::read(d.join("out/metrics.jsonl")).unwrap();
    assert!(!read(&a).is_empty());
    assert_eq!(read(&a), read(&b));
    assert!(!dir.path().join("out").exists(), "output root was ignored");
}

#[test]
fn config_errors_exit_nonzero_with_the_field_name() {
    let (_dir, cfg) = setup(&small_config("", "").replace("lr = 0.03", "lr = -0.03"));
    let err = failed(&bam(&["train", path_str(&cfg)], None));
    assert!(err.contains("train.lr"), "{err}");
    let (_dir, cfg) = setup(&small_config("", "").replace("[train]", "[train]\nmomentum = 0.9"));
    let err = failed(&bam(&["train", path_str(&cfg)], None));
    assert!(err.contains("momentum"), "{err}");
    let err = failed(&bam(&["train", "/no/such/config.toml"], None));
    assert!(err.contains("/no/such/config.toml"), "{err}");
}

/// Trains `mode` for a few epochs and returns the directory and config.
fn trained(mode: &str, extra: &str) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let text = small_config(mode, extra).replace("max_epochs = 40", "max_epochs = 3");
    let (dir, cfg) = setup(&text);
    ok(&bam(&["train", path_str(&cfg)], None));
    let params = dir.path().join("out/params-seed1.txt");
    (dir, cfg, params)
}

#[test]
fn deterministic_eval_without_dropout_is_certain_everywhere() {
    let (dir, cfg, params) = trained("deterministic", "");
    let stdout = ok(&bam(&["eval", path_str(&cfg), path_str(&params)], None));
    assert!(stdout.contains("PAvPU"), "{stdout}");
    let rows = tsv(&dir.path().join("out/certainty.tsv"));
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().all(|r| r[4] == "1"));
}

#[test]
fn eval_with_two_samples_flags_every_test_instance() {
    let (dir, cfg, params) = trained("lognormal", "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("samples = 4", "samples = 2");
    std::fs::write(&cfg, text).unwrap();
    let stdout = ok(&bam(&["eval", path_str(&cfg), path_str(&params)], None));
    assert!(stdout.contains("2 samples"), "{stdout}");
    let rows = tsv(&dir.path().join("out/certainty.tsv"));
    assert_eq!(rows.len(), 100);
    for r in &rows {
        assert_eq!(r[3], u8::from(r[1] == r[2]).to_string());
        assert!(r[4] == "0" || r[4] == "1");
    }
}

#[test]
fn dump_attention_writes_normalized_weights_and_prior() {
    let (dir, cfg, params) = trained("weibull", "");
    let args = ["dump-attention", path_str(&cfg), path_str(&params), "--layer", "0", "--head", "2"];
    ok(&bam(&args, None));
    let weights_path = dir.path().join("out/attention-l0-h2.tsv");
    let psi_path = dir.path().join("out/psi-l0-h2.tsv");
    let first = (std::fs::read(&weights_path).unwrap(), std::fs::read(&psi_path).unwrap());

    for column in [2, 3] {
        let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
        for r in tsv(&weights_path) {
            *sums.entry(r[0].parse().unwrap()).or_default() += r[column].parse::<f64>().unwrap();
        }
        assert_eq!(sums.len(), 100);
        assert!(sums.values().all(|s| (s - 1.0).abs() < 1e-9), "column {column}");
    }
    let mut segments: BTreeMap<usize, f64> = BTreeMap::new();
    for r in tsv(&psi_path) {
        *segments.entry(r[0].parse().unwrap()).or_default() += r[2].parse::<f64>().unwrap();
    }
    assert_eq!(segments.len(), 100);
    assert!(segments.values().all(|s| (s - 1.0).abs() < 1e-9));

    ok(&bam(&args, None));
    assert_eq!(first, (std::fs::read(&weights_path).unwrap(), std::fs::read(&psi_path).unwrap()));
}

#[test]
fn dump_attention_without_a_prior_skips_psi() {
    let (dir, cfg, params) = trained("deterministic", "");
    let stdout = ok(&bam(&["dump-attention", path_str(&cfg), path_str(&params)], None));
    assert!(stdout.contains("no contextual prior"), "{stdout}");
    assert!(dir.path().join("out/attention-l0-h0.tsv").is_file());
    assert!(!dir.path().join("out/psi-l0-h0.tsv").exists());
}

#[test]
fn out_of_range_layer_or_head_is_an_error() {
    let (_dir, cfg, params) = trained("deterministic", "");
    let err = failed(&bam(&["dump-attention", path_str(&cfg), path_str(&params), "--layer", "1"], None));
    assert!(err.contains("layer 1"), "{err}");
    let err = failed(&bam(&["dump-attention", path_str(&cfg), path_str(&params), "--head", "4"], None));
    assert!(err.contains("head 4"), "{err}");
}

#[test]
fn parameters_of_another_model_are_rejected() {
    let (dir, _cfg, params) = trained("deterministic", "");
    let other = dir.path().join("other.toml");
    std::fs::write(&other, small_config("deterministic", "").replace("heads = 4", "heads = 2")).unwrap();
    let err = failed(&bam(&["eval", path_str(&other), path_str(&params)], None));
    assert!(err.starts_with("error:"), "{err}");
}

#[test]
fn verify_prints_one_line_per_check() {
    let stdout = ok(&bam(&["verify", "simplex"], None));
    assert!(stdout.lines().filter(|l| l.starts_with("PASS [simplex]")).count() == 2, "{stdout}");
    assert!(stdout.contains("0 failed"));
    let err = failed(&bam(&["verify", "everything"], None));
    assert!(err.contains("everything"), "{err}");
}
