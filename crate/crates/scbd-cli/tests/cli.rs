//! End-to-end tests of the `scbd` binary: exit codes, artifact layout,
//! config precedence, and byte-level reproducibility.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn scbd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scbd"))
        .args(args)
        .current_dir(dir)
        .env_remove("SCBD_OUT")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = scbd(dir, args);
    assert!(
        out.status.success(),
        "`scbd {}` failed:\n{}{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("not killed by a signal")
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    std::fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("missing artifact {rel}: {e}"))
}

fn text(dir: &Path, rel: &str) -> String {
    String::from_utf8(read(dir, rel)).expect("artifact is UTF-8")
}

/// Small but non-degenerate colored-digit corpus: 100 per environment keeps
/// one validation example per class after the 10% holdout.
fn gen_digits(dir: &Path) {
    ok(
        dir,
        &["gen-data", "cmnist", "--out", "data", "--n-per-env", "100", "--n-test", "40", "--seed", "7"],
    );
}

const TRAIN_DATA: &str = "data/train-e0.scbd,data/train-e1.scbd";

#[test]
fn help_exits_zero_everywhere() {
    let tmp = TempDir::new().unwrap();
    for args in [
        vec!["--help"],
        vec!["gen-data", "--help"],
        vec!["gen-data", "cmnist", "--help"],
        vec!["gen-data", "ops-sim", "--help"],
        vec!["train", "--help"],
        vec!["sweep-alpha", "--help"],
        vec!["erm-scan", "--help"],
        vec!["eval-batchcorr", "--help"],
        vec!["swap", "--help"],
    ] {
        let out = scbd(tmp.path(), &args);
        assert_eq!(code(&out), 0, "help for {args:?}");
        assert!(!out.stdout.is_empty(), "help for {args:?} prints usage");
    }
}

#[test]
fn gen_cmnist_writes_four_splits_and_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    gen_digits(tmp.path());
    for name in ["train-e0.scbd", "train-e1.scbd", "val.scbd", "test.scbd", "meta.kv", "manifest.txt"] {
        assert!(tmp.path().join("data").join(name).is_file(), "{name} exists");
    }
    let manifest = text(tmp.path(), "data/manifest.txt");
    assert!(manifest.contains("command = gen-data cmnist"));
    assert!(manifest.contains("gen.n_per_env = 100"));
    assert!(manifest.contains("seed = 7"));
    assert!(manifest.contains("artifact.test.scbd = "));

    ok(
        tmp.path(),
        &["gen-data", "cmnist", "--out", "data2", "--n-per-env", "100", "--n-test", "40", "--seed", "7"],
    );
    assert_eq!(read(tmp.path(), "data/train-e0.scbd"), read(tmp.path(), "data2/train-e0.scbd"));
    assert_eq!(read(tmp.path(), "data/manifest.txt"), read(tmp.path(), "data2/manifest.txt"));

    // A different seed must actually change the data.
    ok(
        tmp.path(),
        &["gen-data", "cmnist", "--out", "data3", "--n-per-env", "100", "--n-test", "40", "--seed", "8"],
    );
    assert_ne!(read(tmp.path(), "data/train-e0.scbd"), read(tmp.path(), "data3/train-e0.scbd"));
}

#[test]
fn gen_ops_sim_writes_screen_and_complex_assignment() {
    let tmp = TempDir::new().unwrap();
    let stdout = ok(
        tmp.path(),
        &[
            "gen-data", "ops-sim", "--out", "ops", "--genes", "12", "--complex-size", "3",
            "--wells", "3", "--guides-per-gene", "2", "--control-guides", "4",
            "--cells-per-guide", "6", "--features", "12", "--seed", "5",
        ],
    );
    assert!(stdout.contains("12 genes"));
    let graph = text(tmp.path(), "ops/complexes.kv");
    assert!(graph.contains("genes = 12"));
    assert!(graph.contains("assignment = "));
    let manifest = text(tmp.path(), "ops/manifest.txt");
    assert!(manifest.contains("gen.batch_strength = 1"));
    assert!(manifest.contains("artifact.screen.scbd = "));
}

#[test]
fn train_writes_checkpoints_and_reruns_bit_identically() {
    let tmp = TempDir::new().unwrap();
    gen_digits(tmp.path());
    let args = [
        "train", "--train", TRAIN_DATA, "--val", "data/val.scbd", "--alpha", "2",
        "--batch", "balanced:10x2", "--steps", "6", "--eval-every", "3", "--seed", "3",
    ];
    let mut run1 = args.to_vec();
    run1.extend(["--out", "run1"]);
    let stdout = ok(tmp.path(), &run1);
    assert!(stdout.contains("trained 6 steps"));

    let manifest = text(tmp.path(), "run1/manifest.txt");
    for needle in [
        "command = train",
        "objective.alpha = 2",
        "train.batch = balanced:10x2",
        "arch.input = image:3x32x32",
        "result.best_step = ",
        "artifact.latest.scbk = ",
        "artifact.best.scbk = ",
        "artifact.metrics.csv = ",
    ] {
        assert!(manifest.contains(needle), "manifest lacks {needle:?}:\n{manifest}");
    }
    let metrics = text(tmp.path(), "run1/metrics.csv");
    assert!(metrics.starts_with("step,"));

    let mut run2 = args.to_vec();
    run2.extend(["--out", "run2"]);
    ok(tmp.path(), &run2);
    assert_eq!(read(tmp.path(), "run1/metrics.csv"), read(tmp.path(), "run2/metrics.csv"));
    assert_eq!(read(tmp.path(), "run1/latest.scbk"), read(tmp.path(), "run2/latest.scbk"));
    assert_eq!(read(tmp.path(), "run1/manifest.txt"), read(tmp.path(), "run2/manifest.txt"));
}

#[test]
fn missing_inputs_and_bad_values_exit_two_with_a_hint() {
    let tmp = TempDir::new().unwrap();
    let out = scbd(
        tmp.path(),
        &["train", "--train", "nope.scbd", "--val", "nope.scbd", "--out", "x"],
    );
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope.scbd"), "names the missing file: {err}");
    assert!(err.contains("scbd train --help"), "points at help: {err}");

    // Unknown flags are also usage errors.
    let out = scbd(tmp.path(), &["train", "--no-such-flag"]);
    assert_eq!(code(&out), 2);

    // As are unparsable config-file values.
    std::fs::write(tmp.path().join("bad.ini"), "gen.n_per_env = lots\n").unwrap();
    let out = scbd(tmp.path(), &["gen-data", "cmnist", "--config", "bad.ini", "--out", "x"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen.n_per_env"));
}

#[test]
fn divergence_exits_three_after_saving_state() {
    let tmp = TempDir::new().unwrap();
    gen_digits(tmp.path());
    let out = scbd(
        tmp.path(),
        &[
            "train", "--train", "data/train-e0.scbd", "--val", "data/val.scbd", "--out", "dv",
            "--lr", "1e12", "--batch", "shuffle:16", "--steps", "30", "--eval-every", "10",
        ],
    );
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
    assert!(tmp.path().join("dv/latest.scbk").is_file());
    assert!(text(tmp.path(), "dv/manifest.txt").contains("result.diverged_at = "));
}

#[test]
fn config_file_supplies_defaults_and_flags_override_it() {
    let tmp = TempDir::new().unwrap();
    gen_digits(tmp.path());
    std::fs::write(
        tmp.path().join("cfg.ini"),
        "seed = 9\n\
         [data]\n\
         train = data/train-e0.scbd,data/train-e1.scbd\n\
         val = data/val.scbd\n\
         [objective]\n\
         alpha = 1.5\n\
         [train]\n\
         max_steps = 4\n\
         eval_every = 2\n\
         batch = shuffle:24\n",
    )
    .unwrap();
    ok(tmp.path(), &["train", "--config", "cfg.ini", "--out", "run", "--alpha", "3"]);
    let manifest = text(tmp.path(), "run/manifest.txt");
    assert!(manifest.contains("objective.alpha = 3"), "flag beats file:\n{manifest}");
    assert!(manifest.contains("train.max_steps = 4"), "file beats default:\n{manifest}");
    assert!(manifest.contains("train.batch = shuffle:24"));
    assert!(manifest.contains("seed = 9"));
    assert!(manifest.contains("data.train = data/train-e0.scbd,data/train-e1.scbd"));
}

#[test]
fn sweep_alpha_tabulates_every_cell() {
    let tmp = TempDir::new().unwrap();
    gen_digits(tmp.path());
    let stdout = ok(
        tmp.path(),
        &[
            "sweep-alpha", "--train", TRAIN_DATA, "--val", "data/val.scbd", "--test",
            "data/test.scbd", "--out", "sw", "--alphas", "0,4", "--seeds", "1", "--batch",
            "balanced:10x2", "--steps", "4", "--eval-every", "2", "--d-zc", "8", "--d-zs", "8",
        ],
    );
    assert!(stdout.contains("2 runs"));
    let csv = text(tmp.path(), "sw/sweep.csv");
    assert_eq!(csv.lines().count(), 3, "header plus one row per (α, seed):\n{csv}");
    assert!(csv.starts_with("alpha,seed,val_accuracy,test_accuracy"));
    assert!(text(tmp.path(), "sw/tradeoff.svg").contains("</svg>"));
    let manifest = text(tmp.path(), "sw/manifest.txt");
    assert!(manifest.contains("sweep.alphas = 0,4"));
    assert!(manifest.contains("result.rows = 2"));
}

#[test]
fn erm_scan_records_the_selection_correlation() {
    let tmp = TempDir::new().unwrap();
    gen_digits(tmp.path());
    let stdout = ok(
        tmp.path(),
        &[
            "erm-scan", "--train", TRAIN_DATA, "--val", "data/val.scbd", "--test",
            "data/test.scbd", "--out", "sc", "--lrs", "1e-3,1e-2", "--wds", "0", "--epochs", "1",
            "--batch-size", "64", "--seed", "0",
        ],
    );
    assert!(stdout.contains("2 grid cells"));
    let csv = text(tmp.path(), "sc/scan.csv");
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("lr,weight_decay,epochs,seed,val_accuracy,test_accuracy"));
    assert!(text(tmp.path(), "sc/scatter.svg").contains("</svg>"));
    assert!(text(tmp.path(), "sc/manifest.txt").contains("result.pearson = "));
}

#[test]
fn swap_decodes_pairs_from_a_decoder_checkpoint() {
    let tmp = TempDir::new().unwrap();
    gen_digits(tmp.path());
    ok(
        tmp.path(),
        &[
            "train", "--train", TRAIN_DATA, "--val", "data/val.scbd", "--out", "run",
            "--alpha", "1", "--recon", "true", "--batch", "balanced:10x2", "--steps", "4",
            "--eval-every", "2", "--seed", "3",
        ],
    );
    let stdout = ok(
        tmp.path(),
        &[
            "swap", "--ckpt", "run/best.scbk", "--data", TRAIN_DATA, "--pairs", "4",
            "--seed", "11", "--out", "sw",
        ],
    );
    assert!(stdout.contains("4 pairs"));
    let ppm = read(tmp.path(), "sw/grid.ppm");
    assert!(ppm.starts_with(b"P6\n96 128\n255\n"), "3 tiles of 32x32 per pair");
    let csv = text(tmp.path(), "sw/swap.csv");
    assert_eq!(csv.lines().count(), 5, "header plus one row per pair");
    let manifest = text(tmp.path(), "sw/manifest.txt");
    assert!(manifest.contains("result.digit_kept = "));
    assert!(manifest.contains("result.hue_crossed_rate = "));

    // A checkpoint without a decoder is a usage error, not a crash.
    ok(
        tmp.path(),
        &[
            "train", "--train", TRAIN_DATA, "--val", "data/val.scbd", "--out", "plain",
            "--batch", "balanced:10x2", "--steps", "2", "--eval-every", "1",
        ],
    );
    let out = scbd(
        tmp.path(),
        &["swap", "--ckpt", "plain/best.scbk", "--data", TRAIN_DATA, "--pairs", "2", "--out", "sw2"],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_batchcorr_scores_embeddings_against_raw_features() {
    let tmp = TempDir::new().unwrap();
    ok(
        tmp.path(),
        &[
            "gen-data", "ops-sim", "--out", "ops", "--genes", "12", "--complex-size", "3",
            "--wells", "3", "--guides-per-gene", "2", "--control-guides", "4",
            "--cells-per-guide", "6", "--features", "12", "--batch-strength", "2.0", "--seed", "5",
        ],
    );
    let stdout = ok(
        tmp.path(),
        &[
            "eval-batchcorr", "--data", "ops/screen.scbd", "--graph", "ops/complexes.kv",
            "--out", "bc", "--steps", "8", "--eval-every", "4", "--batch", "shuffle:32",
            "--d-zc", "8", "--d-zs", "4", "--seed", "2",
        ],
    );
    assert!(stdout.contains("well F1"));
    let metrics = text(tmp.path(), "bc/metrics.csv");
    for needle in ["well_f1_zc,", "well_f1_raw,", "auprc_zc,", "auprc_raw,", "auprc_base_rate,"] {
        assert!(metrics.contains(needle), "metrics lack {needle:?}:\n{metrics}");
    }
    assert!(text(tmp.path(), "bc/pr_zc.csv").starts_with("percentile,precision,recall"));
    let manifest = text(tmp.path(), "bc/manifest.txt");
    assert!(manifest.contains("objective.alpha = 1"), "α defaults on here:\n{manifest}");
    assert!(manifest.contains("result.auprc_zc = "));
}

#[test]
fn scbd_out_supplies_the_default_output_root() {
    let tmp = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_scbd"))
        .args(["gen-data", "ops-sim", "--genes", "6", "--complex-size", "3", "--wells", "2",
               "--guides-per-gene", "2", "--control-guides", "2", "--cells-per-guide", "4",
               "--features", "8"])
        .current_dir(tmp.path())
        .env("SCBD_OUT", tmp.path().join("root"))
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("root/gen-data-ops-sim/screen.scbd").is_file());

    // Without --out, a file `out`, or SCBD_OUT there is nowhere to write.
    let out = scbd(tmp.path(), &["gen-data", "ops-sim", "--genes", "6"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("SCBD_OUT"));
}
