//! End-to-end subcommand tests against the compiled binary.

use std::path::Path;
use std::process::{Command, Output};

use icx::dataset::load_csv;
use icx::eval::parse_sweep_csv;

const TINY_CONFIG: &str = "\
prior.n_samples_per_task = 24
prior.max_features = 4
prior.max_classes = 3
model.d_model = 16
model.n_layers = 2
model.n_heads = 2
model.d_ff = 32
model.max_features = 4
model.max_classes = 3
backbone.steps = 30
backbone.batch_size = 2
decoder.epochs = 1
decoder.steps_per_epoch = 20
decoder.batch_size = 2
sweep.folds = 3
sweep.max_context = 32
";

fn icx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icx"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn stdout_of(output: &Output) -> String {
    assert!(
        output.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&output.stderr),
        String::from_utf8_lossy(&output.stdout)
    );
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn write_tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.config");
    std::fs::write(&path, TINY_CONFIG).unwrap();
    path.display().to_string()
}

fn trace_values(report: &str) -> Vec<String> {
    let line = report
        .lines()
        .find(|l| l.starts_with("entropy trace: "))
        .unwrap_or_else(|| panic!("no trace line in {report:?}"));
    line["entropy trace: ".len()..]
        .split_whitespace()
        .map(|s| s.to_string())
        .collect()
}

#[test]
fn prior_sample_writes_reloadable_deterministic_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let output = icx(&[
            "prior-sample",
            "--config",
            &config,
            "--seed",
            "5",
            "--count",
            "3",
            "--out",
            &out.display().to_string(),
        ]);
        let text = stdout_of(&output);
        assert!(text.contains("class-count histogram"), "{text}");
    }
    for i in 0..3 {
        let a = std::fs::read(out_a.join(format!("task_{i}.csv"))).unwrap();
        let b = std::fs::read(out_b.join(format!("task_{i}.csv"))).unwrap();
        assert_eq!(a, b, "task_{i}.csv differs between identical runs");
        let ds = load_csv(&out_a.join(format!("task_{i}.csv")), "label").unwrap();
        assert!(ds.n_classes >= 2);
        assert_eq!(ds.n_rows(), 24);
    }
    assert!(out_a.join("run.config").is_file());
}

#[test]
fn train_infer_and_sweep_work_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = dir.path().join("run");
    let out_flag = out.display().to_string();

    let train_text = stdout_of(&icx(&[
        "train", "--config", &config, "--seed", "3", "--out", &out_flag,
    ]));
    let layer_rows: Vec<&str> = train_text
        .lines()
        .filter(|l| {
            let mut parts = l.split_whitespace();
            matches!(parts.next(), Some(first) if first.parse::<usize>().is_ok())
                && parts.clone().count() == 2
        })
        .collect();
    assert_eq!(layer_rows.len(), 2, "quality table rows in {train_text}");
    let checkpoint = out.join("model.ckpt");
    assert!(checkpoint.is_file());
    let ckpt_flag = checkpoint.display().to_string();

    let data = out.join("data");
    stdout_of(&icx(&[
        "prior-sample",
        "--config",
        &config,
        "--seed",
        "9",
        "--count",
        "2",
        "--out",
        &data.display().to_string(),
    ]));
    let task0 = data.join("task_0.csv").display().to_string();

    let loose = stdout_of(&icx(&["infer", "--config", &config, &ckpt_flag, &task0, "--tau", "10"]));
    assert!(loose.contains("exit layer: 1/2"), "{loose}");
    let full = stdout_of(&icx(&["infer", "--config", &config, &ckpt_flag, &task0, "--tau", "0"]));
    assert!(full.contains("exit layer: 2/2"), "{full}");
    assert!(full.contains("accuracy:"), "{full}");

    let trace_only = stdout_of(&icx(&[
        "infer", "--config", &config, &ckpt_flag, &task0, "--trace-only",
    ]));
    let short = trace_values(&loose);
    let reference = trace_values(&trace_only);
    assert_eq!(reference.len(), 2);
    assert_eq!(short, reference[..short.len()], "early trace must be a prefix");

    let manifest = out.join("manifest.csv");
    std::fs::write(
        &manifest,
        "name,path,label_column\nalpha,data/task_0.csv,label\nbeta,data/task_1.csv,\n",
    )
    .unwrap();
    let sweep_out = out.join("sweep");
    let sweep_text = stdout_of(&icx(&[
        "sweep",
        "--config",
        &config,
        "--seed",
        "3",
        "--out",
        &sweep_out.display().to_string(),
        &ckpt_flag,
        &manifest.display().to_string(),
    ]));
    assert!(sweep_text.contains("aggregate over 2 datasets"), "{sweep_text}");
    assert!(sweep_out.join("report.txt").is_file());
    assert!(sweep_out.join("run.config").is_file());
    for name in ["alpha", "beta"] {
        let csv_path = sweep_out.join(format!("{name}.sweep.csv"));
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let rows = parse_sweep_csv(name, &text).unwrap();
        assert_eq!(rows.len(), 6, "default grid in {csv_path:?}");
        assert_eq!(rows[0].tau, 0.0);
        for pair in rows.windows(2) {
            assert!(pair[0].tau < pair[1].tau);
            assert!(
                pair[1].mean_exit_layer <= pair[0].mean_exit_layer + 1e-12,
                "exit layer should not rise with tau in {csv_path:?}"
            );
        }
    }
}

#[test]
fn sweep_isolates_failing_datasets_and_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = dir.path().join("run");
    let out_flag = out.display().to_string();
    stdout_of(&icx(&["train", "--config", &config, "--seed", "1", "--out", &out_flag]));
    stdout_of(&icx(&[
        "prior-sample", "--config", &config, "--seed", "2", "--count", "1", "--out", &out_flag,
    ]));

    let manifest = out.join("manifest.csv");
    std::fs::write(
        &manifest,
        "name,path,label_column\ngood,task_0.csv,label\nghost,missing.csv,label\n",
    )
    .unwrap();
    let sweep_out = out.join("sweep");
    let output = icx(&[
        "sweep",
        "--config",
        &config,
        "--out",
        &sweep_out.display().to_string(),
        &out.join("model.ckpt").display().to_string(),
        &manifest.display().to_string(),
    ]);
    assert_eq!(output.status.code(), Some(5), "{output:?}");
    assert!(sweep_out.join("good.sweep.csv").is_file());
    assert!(!sweep_out.join("ghost.sweep.csv").exists());
    let report = std::fs::read_to_string(sweep_out.join("report.txt")).unwrap();
    assert!(report.contains("failed datasets"), "{report}");
    assert!(report.contains("ghost"), "{report}");
}

#[test]
fn error_paths_use_the_documented_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad_config = dir.path().join("bad.config");
    std::fs::write(&bad_config, "model.dmodel = 4\n").unwrap();
    let output = icx(&[
        "prior-sample",
        "--config",
        &bad_config.display().to_string(),
        "--out",
        &dir.path().join("x").display().to_string(),
    ]);
    assert_eq!(output.status.code(), Some(2), "{output:?}");

    let config = write_tiny_config(dir.path());
    let out = dir.path().join("run");
    stdout_of(&icx(&[
        "train", "--config", &config, "--seed", "1", "--out", &out.display().to_string(),
    ]));
    let output = icx(&[
        "infer",
        "--config",
        &config,
        &out.join("model.ckpt").display().to_string(),
        &dir.path().join("nope.csv").display().to_string(),
    ]);
    assert_eq!(output.status.code(), Some(3), "{output:?}");
}
