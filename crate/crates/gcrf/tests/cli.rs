//! End-to-end drives of the command-line interface: generate a
//! dataset, fit models, score them, and run a small sweep twice to
//! check the determinism contract from outside the library.

use std::fs;
use std::path::PathBuf;

use gcrf::cli::cli_main;

fn run(args: &[&str]) -> i32 {
    cli_main(args.iter().copied())
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

const GENERATOR_JSON: &str = r#"{
    "n_nodes": 20, "n_steps": 3, "purchase_dims": 2,
    "demographic_dims": 2, "latent_dims": 2, "noise_std": 0.3,
    "edge_knn": 4, "signal_split": 0.5, "seed": 9
}"#;

#[test]
fn generate_fit_predict_happy_path() {
    let dir = fresh_dir("gcrf_cli_happy");
    let gen_cfg = dir.join("g.json");
    fs::write(&gen_cfg, GENERATOR_JSON).unwrap();
    let data = dir.join("data");
    let code = run(&[
        "gcrf",
        "generate",
        "--config",
        gen_cfg.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    for name in ["dataset.csv", "train.csv", "truth.json"] {
        assert!(data.join(name).exists(), "{name} missing after generate");
    }

    let fit_out = dir.join("dfl");
    let code = run(&[
        "gcrf",
        "fit",
        "--model",
        "dfl",
        "--data",
        data.join("train.csv").to_str().unwrap(),
        "--hidden",
        "4",
        "--max-iters",
        "10",
        "--pretrain-epochs",
        "80",
        "--out",
        fit_out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let model_file = fit_out.join("model.json");
    assert!(model_file.exists(), "fit must leave a model file behind");

    let pred_out = dir.join("pred");
    let code = run(&[
        "gcrf",
        "predict",
        "--model-file",
        model_file.to_str().unwrap(),
        "--data",
        data.join("dataset.csv").to_str().unwrap(),
        "--out",
        pred_out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let text = fs::read_to_string(pred_out.join("predictions.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "node_id,time,prediction");
    assert_eq!(lines.len(), 1 + 20 * 3, "one row per node per snapshot");
    for line in &lines[1..] {
        let value: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(value.is_finite(), "non-finite prediction in {line}");
    }
}

#[test]
fn two_step_generation_skips_the_training_prefix() {
    let dir = fresh_dir("gcrf_cli_two_step");
    let gen_cfg = dir.join("g.json");
    fs::write(
        &gen_cfg,
        r#"{
            "n_nodes": 16, "n_steps": 2, "purchase_dims": 2,
            "demographic_dims": 2, "latent_dims": 2, "noise_std": 0.3,
            "edge_knn": 4, "signal_split": 0.5, "seed": 3
        }"#,
    )
    .unwrap();
    let data = dir.join("data");
    assert_eq!(
        run(&[
            "gcrf",
            "generate",
            "--config",
            gen_cfg.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
        ]),
        0
    );
    assert!(data.join("dataset.csv").exists());
    assert!(data.join("truth.json").exists());
    // A one-snapshot prefix would not load back, so none is written.
    assert!(!data.join("train.csv").exists());

    // The minimal dataset still fits directly (one train step, and the
    // fitted model scores whatever it is pointed at).
    let fit_out = dir.join("lr0");
    assert_eq!(
        run(&[
            "gcrf",
            "fit",
            "--model",
            "lr0",
            "--data",
            data.join("dataset.csv").to_str().unwrap(),
            "--ridge",
            "0.001",
            "--out",
            fit_out.to_str().unwrap(),
        ]),
        0
    );
    assert!(fit_out.join("model.json").exists());
}

#[test]
fn sweep_reruns_are_byte_identical_and_report_reemits() {
    let dir = fresh_dir("gcrf_cli_sweep");
    let sweep_cfg = dir.join("s.json");
    fs::write(
        &sweep_cfg,
        r#"{
            "dataset": {"generate": {
                "n_nodes": 24, "n_steps": 3, "purchase_dims": 2,
                "demographic_dims": 2, "latent_dims": 2, "noise_std": 0.3,
                "edge_knn": 4, "signal_split": 0.5, "seed": 7
            }},
            "models": [{"model": "baseline", "kind": "LR0"}],
            "mechanisms": ["at_random"],
            "fractions": [0.0, 0.4],
            "seeds": [0, 1],
            "split_step": 2
        }"#,
    )
    .unwrap();

    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let code = run(&[
            "gcrf",
            "sweep",
            "--config",
            sweep_cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "all cells of this sweep fit cleanly");
    }
    // Wall-clock timings land in timings.csv, which is exempt from the
    // determinism contract; everything else must match byte for byte.
    for name in ["report.csv", "curve_at_random_LR0.csv", "summary.txt"] {
        let a = fs::read(out_a.join(name)).unwrap();
        let b = fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
    }

    let re_out = dir.join("re");
    let code = run(&[
        "gcrf",
        "report",
        "--report",
        out_a.join("report.csv").to_str().unwrap(),
        "--out",
        re_out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    for name in ["report.csv", "curve_at_random_LR0.csv", "summary.txt"] {
        let a = fs::read(out_a.join(name)).unwrap();
        let b = fs::read(re_out.join(name)).unwrap();
        assert_eq!(a, b, "{name} not reconstructed from the report CSV");
    }
}

#[test]
fn seed_flag_changes_the_generated_sample() {
    let dir = fresh_dir("gcrf_cli_seed");
    let gen_cfg = dir.join("g.json");
    fs::write(&gen_cfg, GENERATOR_JSON).unwrap();
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    let out_c = dir.join("c");
    for (out, seed) in [(&out_a, "9"), (&out_b, "10"), (&out_c, "9")] {
        let code = run(&[
            "gcrf",
            "generate",
            "--config",
            gen_cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
    }
    let a = fs::read(out_a.join("dataset.csv")).unwrap();
    let b = fs::read(out_b.join("dataset.csv")).unwrap();
    let c = fs::read(out_c.join("dataset.csv")).unwrap();
    assert_ne!(a, b, "different seeds must change the sample");
    assert_eq!(a, c, "equal seeds must reproduce the sample");
}
