use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const SMALL: &str = r#"
seed = 4

[task]
kind = "blobs"
hidden = [4]

[task.supervised]
epochs = 2

[data]
runs = 12
checkpoints_per_run = 4
test_fraction = 0.25

[diffusion]
steps = 5
beta_start = 0.002
beta_end = 0.2

[model]
hidden = 32
layers = 1
heads = 2
num_freqs = 8

[train]
iterations = 6
batch = 8
eval_interval = 2
eval_batches = 1

[eval]
num_prompts = 4
alignment_nets = 3
sweep_inits = 2
ood_inits = 2
ood_steps = 2
nn_prompts = 2
variance_outer = 3
variance_inner = 3
variance_top_k = 2
surface_samples = 5
surface_grid = 3

[eval.onestep]
num_inits = 2
lrs = [0.01]
weight_decays = [0.0]

[sweep]
hidden = [16, 32]
runs = [3, 9]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_paramdiff"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

/// Shared config, dataset and trained model.
struct Fixture {
    _dir: tempfile::TempDir,
    config: PathBuf,
    data: PathBuf,
    model_dir: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("small.toml");
        std::fs::write(&config, SMALL).unwrap();
        let data = dir.path().join("data");
        let model_dir = dir.path().join("model");
        ok(run(&["gen-data", "--config", s(&config), "--out", s(&data)]));
        ok(run(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&model_dir)]));
        Fixture {
            _dir: dir,
            config,
            data,
            model_dir,
        }
    })
}

fn ema(f: &Fixture) -> PathBuf {
    f.model_dir.join("model_ema.bin")
}

fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_writes_runs_and_reruns_identically() {
    let f = fixture();
    let runs = std::fs::read_dir(&f.data)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("run_"))
        .count();
    assert_eq!(runs, 12);
    let again = f.data.parent().unwrap().join("data_again");
    ok(run(&["gen-data", "--config", s(&f.config), "--out", s(&again)]));
    assert_eq!(files_in(&f.data), files_in(&again));
}

#[test]
fn gen_data_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("d");
    let o = ok(run(&["gen-data", "--config", s(&cfg), "--runs", "5", "--ckpts", "3", "--out", s(&out)]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("wrote 5 runs"));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["checkpoints_per_run"], 3);
}

#[test]
fn unknown_task_fails_without_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = run(&["gen-data", "--task", "chess", "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown task"));
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn chunk_not_below_hidden_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    // largest token is the 4×4 output weight matrix
    let text = SMALL.replace("hidden = 32\n", "hidden = 16\n");
    std::fs::write(&cfg, text).unwrap();
    let o = run(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("M < hidden"));
}

#[test]
fn usage_errors_exit_one_and_missing_inputs_exit_nonzero() {
    assert_eq!(code(&run(&["train"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["eval", "--model", "/nonexistent/m.bin", "--data", "/nonexistent", "--out", s(dir.path())]);
    assert_ne!(code(&o), 0);
}

#[test]
fn train_writes_models_report_and_config() {
    let f = fixture();
    for name in ["model_raw.bin", "model_ema.bin", "report.jsonl", "config.toml"] {
        assert!(f.model_dir.join(name).exists(), "{name}");
    }
    // 6 iterations with interval 2: records at 2, 4 and the final 6
    let report = std::fs::read_to_string(f.model_dir.join("report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 3);
}

#[test]
fn zero_iterations_writes_the_identity_model() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    ok(run(&["train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(out.path()), "--iters", "0"]));
    let traj = out.path().join("t.bin");
    ok(run(&[
        "optimize",
        "--config",
        s(&f.config),
        "--model",
        s(&out.path().join("model_ema.bin")),
        "--data",
        s(&f.data),
        "--init",
        "kaiming",
        "--steps",
        "3",
        "--out",
        s(&traj),
    ]));
    let run = paramdiff::data::read_run(&traj).unwrap();
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(f.data.join("manifest.json")).unwrap()).unwrap();
    let d = run.header.arch.param_count();
    assert_eq!(serde_json::to_value(&run.header.arch).unwrap(), manifest["arch"]);
    assert_eq!(run.checkpoints.len(), 4);
    assert!(run.checkpoints.iter().all(|c| c.theta.len() == d && c.theta == run.checkpoints[0].theta));
    let resolved = std::fs::read_to_string(out.path().join("config.toml")).unwrap();
    assert!(resolved.contains("iterations = 0"));
}

#[test]
fn no_augment_and_final_only_reach_the_resolved_config() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    ok(run(&[
        "train",
        "--config",
        s(&f.config),
        "--data",
        s(&f.data),
        "--out",
        s(out.path()),
        "--iters",
        "2",
        "--no-augment",
        "--final-only",
    ]));
    let resolved = std::fs::read_to_string(out.path().join("config.toml")).unwrap();
    assert!(resolved.contains("augment = false"));
    assert!(resolved.contains("final_only = true"));
}

#[test]
fn optimize_is_seeded_and_prints_metrics() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let go = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = ok(run(&[
            "optimize",
            "--config",
            s(&f.config),
            "--model",
            s(&ema(f)),
            "--data",
            s(&f.data),
            "--seed",
            seed,
            "--out",
            s(&out),
        ]));
        (std::fs::read(out).unwrap(), String::from_utf8_lossy(&o.stdout).into_owned())
    };
    let (a, text) = go("a.bin", "1");
    let (b, _) = go("b.bin", "1");
    let (c, _) = go("c.bin", "2");
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(text.contains("step   1") && text.contains("loss"));
}

#[test]
fn optimize_warns_on_extrapolated_prompts() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let o = ok(run(&[
        "optimize",
        "--config",
        s(&f.config),
        "--model",
        s(&ema(f)),
        "--data",
        s(&f.data),
        "--prompt=-5",
        "--out",
        s(&dir.path().join("t.bin")),
    ]));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
}

#[test]
fn eval_all_emits_seven_results_reproducibly() {
    let f = fixture();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for out in [&a, &b] {
        ok(run(&[
            "eval",
            "--config",
            s(&f.config),
            "--model",
            s(&ema(f)),
            "--data",
            s(&f.data),
            "--suite",
            "all",
            "--out",
            s(out.path()),
        ]));
    }
    let fa = files_in(a.path());
    let json: Vec<&String> = fa.iter().map(|(n, _)| n).filter(|n| n.ends_with(".json")).collect();
    assert_eq!(json.len(), 7, "{json:?}");
    assert_eq!(fa, files_in(b.path()));
}

#[test]
fn eval_alignment_reports_r2() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    ok(run(&[
        "eval",
        "--config",
        s(&f.config),
        "--model",
        s(&ema(f)),
        "--data",
        s(&f.data),
        "--suite",
        "alignment",
        "--out",
        s(out.path()),
    ]));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.path().join("alignment.json")).unwrap()).unwrap();
    assert!(v["r2"].is_number());
}

#[test]
fn sweep_grid_yields_one_row_per_cell() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    ok(run(&["sweep", "--config", s(&f.config), "--data", s(&f.data), "--out", s(out.path()), "--iters", "2"]));
    let table = std::fs::read_to_string(out.path().join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4);
    // 16 is not above the largest token (16 parameters), so those cells fail and are recorded
    let failed = table.lines().skip(1).filter(|l| l.contains("M < hidden")).count();
    assert_eq!(failed, 2, "{table}");
    assert!(out.path().join("cell_002").join("model_ema.bin").exists());
}
