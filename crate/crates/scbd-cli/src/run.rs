//! Subcommand bodies: resolve the configuration, call the library, write
//! artifacts and the manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use scbd::contrastive::{DiagMode, ObjectiveConfig, ZsKey};
use scbd::datagen::{self, cmnist, container, opssim, ComplexGraph, DataError, Dataset};
use scbd::datagen::cmnist::{CmnistConfig, GlyphSource};
use scbd::datagen::idx::DigitBitmaps;
use scbd::datagen::opssim::OpsSimConfig;
use scbd::engine::{self, BatchSpec, EngineError, TrainConfig, TrainOutcome};
use scbd::evalsuite::{
    aggregate_gene_embeddings, batch_f1, corum_style_auprc, counterfactual_swap, embed_dataset,
    erm_scan, svg_line_plot, svg_scatter, sweep_alpha, write_ppm, ErmGrid, EvalError, LogReg,
    PlotSeries, ProbeConfig, Tail,
};
use scbd::nets::{ArchConfig, ErmArchConfig, InputKind, ModelArch};
use scbd::util::{fsio, kv, rng::substream};

use crate::config::{parse_list, FileConfig};
use crate::manifest::Manifest;
use crate::{
    BatchcorrArgs, CliError, CmnistArgs, Command, CommonArgs, ErmScanArgs, Generator, OpsSimArgs,
    SwapArgs, SweepAlphaArgs, TrainArgs, TrainOpts,
};

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData(Generator::Cmnist(args)) => gen_cmnist(args),
        Command::GenData(Generator::OpsSim(args)) => gen_ops_sim(args),
        Command::Train(args) => train(args),
        Command::SweepAlpha(args) => sweep(args),
        Command::ErmScan(args) => scan(args),
        Command::EvalBatchcorr(args) => batchcorr(args),
        Command::Swap(args) => swap(args),
    }
}

// ---------------------------------------------------------------- plumbing

fn usage(cmd: &'static str, message: impl Into<String>) -> CliError {
    CliError::Usage { cmd, message: message.into() }
}

/// Problems with user-supplied data files or generator settings.
fn data_err(cmd: &'static str, e: DataError) -> CliError {
    usage(cmd, e.to_string())
}

/// Engine failures: a rejected configuration is the user's to fix,
/// anything else is unexpected.
fn engine_err(cmd: &'static str, e: EngineError) -> CliError {
    match e {
        EngineError::BadConfig(message) => usage(cmd, message),
        other => CliError::Runtime(other.to_string()),
    }
}

fn eval_err(cmd: &'static str, e: EvalError) -> CliError {
    match e {
        EvalError::Engine(inner) => engine_err(cmd, inner),
        EvalError::Data(inner) => data_err(cmd, inner),
        EvalError::BadInput(_)
        | EvalError::SingleClass(_)
        | EvalError::MissingWell { .. }
        | EvalError::MissingControl(_) => usage(cmd, e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// `--out`, then the config file's `out`, then `$SCBD_OUT/<command>`.
/// The directory is created if needed.
fn resolve_out(cmd: &'static str, common: &CommonArgs, file: &FileConfig) -> Result<PathBuf, CliError> {
    let out = match &common.out {
        Some(p) => p.clone(),
        None => match file.get::<PathBuf>("out")? {
            Some(p) => p,
            None => match std::env::var_os("SCBD_OUT") {
                Some(root) => {
                    // "gen-data cmnist" → ".../gen-data-cmnist"
                    Path::new(&root).join(cmd.replace(' ', "-"))
                }
                None => {
                    return Err(usage(
                        cmd,
                        "no output directory: pass --out, set `out` in the config file, \
                         or export SCBD_OUT",
                    ))
                }
            },
        },
    };
    std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    Ok(out)
}

fn require_file(cmd: &'static str, what: &str, path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(cmd, format!("{what} file {} does not exist", path.display())))
    }
}

fn load_dataset(cmd: &'static str, what: &str, path: &Path) -> Result<Dataset, CliError> {
    require_file(cmd, what, path)?;
    container::load(path).map_err(|e| usage(cmd, format!("{}: {e}", path.display())))
}

fn load_concat(cmd: &'static str, what: &str, paths: &[PathBuf]) -> Result<Dataset, CliError> {
    if paths.is_empty() {
        return Err(usage(cmd, format!("no {what} container given")));
    }
    let parts: Vec<Dataset> = paths
        .iter()
        .map(|p| load_dataset(cmd, what, p))
        .collect::<Result<_, _>>()?;
    datagen::concat(&parts).map_err(|e| data_err(cmd, e))
}

/// Resolves a list-of-paths option: the flag wins, else a comma-separated
/// file value.
fn pick_paths(
    cmd: &'static str,
    file: &FileConfig,
    flag: &[PathBuf],
    key: &str,
) -> Result<Vec<PathBuf>, CliError> {
    if !flag.is_empty() {
        return Ok(flag.to_vec());
    }
    match file.raw(key) {
        Some(text) => parse_list(cmd, key, text),
        None => Ok(Vec::new()),
    }
}

fn required_path(
    cmd: &'static str,
    file: &FileConfig,
    flag: &Option<PathBuf>,
    flag_name: &str,
    key: &str,
) -> Result<PathBuf, CliError> {
    file.pick_opt(flag.clone(), key)?
        .ok_or_else(|| usage(cmd, format!("missing {flag_name} (file key: {key})")))
}

fn input_kind(cmd: &'static str, shape: &[usize]) -> Result<InputKind, CliError> {
    match *shape {
        [c, h, w] => Ok(InputKind::Image { c, h, w }),
        [dim] => Ok(InputKind::Vector { dim }),
        ref other => Err(usage(cmd, format!("unsupported feature shape {other:?}"))),
    }
}

/// Everything `train_scbd` needs, resolved from flags, file, and defaults.
struct TrainSetup {
    cfg: TrainConfig,
    d_zc: usize,
    d_zs: usize,
    single_block: bool,
    with_decoder: bool,
}

impl TrainSetup {
    fn arch(&self, cmd: &'static str, shape: &[usize]) -> Result<ArchConfig, CliError> {
        Ok(ArchConfig {
            input: input_kind(cmd, shape)?,
            d_zc: self.d_zc,
            d_zs: self.d_zs,
            single_block: self.single_block,
            with_decoder: self.with_decoder,
        })
    }
}

fn resolve_train(
    cmd: &'static str,
    opts: &TrainOpts,
    common: &CommonArgs,
    file: &FileConfig,
    default_alpha: f32,
) -> Result<TrainSetup, CliError> {
    let d_obj = ObjectiveConfig::default();
    let mut objective = ObjectiveConfig {
        tau: file.pick(opts.tau, "objective.tau", d_obj.tau)?,
        alpha: file.pick(opts.alpha, "objective.alpha", default_alpha)?,
        recon: file.pick(opts.recon, "objective.recon", d_obj.recon)?,
        ..d_obj
    };
    if let Some(text) = file.pick_opt(opts.zs_key.clone(), "objective.zs_key")? {
        objective.zs_key = ZsKey::from_str(&text)
            .ok_or_else(|| usage(cmd, format!("bad zs_key {text:?}: expected `e` or `(y,e)`")))?;
    }
    if let Some(text) = file.pick_opt(opts.diag_mode.clone(), "objective.diag_mode")? {
        objective.diag_mode = DiagMode::from_str(&text).ok_or_else(|| {
            usage(
                cmd,
                format!("bad diag_mode {text:?}: expected `mask_diagonal` or `appendix_verbatim`"),
            )
        })?;
    }

    let d = TrainConfig::default();
    let batch = match file.pick_opt(opts.batch.clone(), "train.batch")? {
        Some(text) => text.parse::<BatchSpec>().map_err(|e| usage(cmd, e))?,
        None => d.batch,
    };
    let cfg = TrainConfig {
        objective,
        batch,
        max_steps: file.pick(opts.steps, "train.max_steps", d.max_steps)?,
        eval_every: file.pick(opts.eval_every, "train.eval_every", d.eval_every)?,
        lr: file.pick(opts.lr, "train.lr", d.lr)?,
        weight_decay: file.pick(opts.wd, "train.weight_decay", d.weight_decay)?,
        seed: file.pick(common.seed, "seed", d.seed)?,
        val_excludes_invariance: file.pick(
            opts.val_excludes_invariance,
            "train.val_excludes_invariance",
            d.val_excludes_invariance,
        )?,
        paranoid_checks: file.pick(opts.paranoid, "train.paranoid_checks", d.paranoid_checks)?,
        checkpoint_dir: None,
    };
    let recon = cfg.objective.recon;
    Ok(TrainSetup {
        cfg,
        d_zc: file.pick(opts.d_zc, "arch.d_zc", 32)?,
        d_zs: file.pick(opts.d_zs, "arch.d_zs", 32)?,
        single_block: file.pick(opts.single_block, "arch.single_block", false)?,
        // A reconstruction term implies a decoder.
        with_decoder: file.pick(opts.with_decoder, "arch.with_decoder", recon)?,
    })
}

/// Echoes the resolved model and optimizer configuration into the manifest,
/// reusing the exact key set the checkpoint format stores.
fn echo_train(m: &mut Manifest, cfg: &TrainConfig, arch: &ArchConfig) {
    let mut map = BTreeMap::new();
    engine::objective_to_kv(&cfg.objective, &mut map);
    engine::arch_to_kv(&ModelArch::Scbd(arch.clone()), &mut map);
    for (k, v) in map {
        m.set(&k, v);
    }
    m.set("train.batch", cfg.batch);
    m.set("train.max_steps", cfg.max_steps);
    m.set("train.eval_every", cfg.eval_every);
    m.set("train.lr", cfg.lr);
    m.set("train.weight_decay", cfg.weight_decay);
    m.set("train.val_excludes_invariance", cfg.val_excludes_invariance);
    m.set("train.paranoid_checks", cfg.paranoid_checks);
    m.set("seed", cfg.seed);
}

fn join_paths(paths: &[PathBuf]) -> String {
    let shown: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
    shown.join(",")
}

fn write_artifact(path: &Path, text: &str) -> Result<(), CliError> {
    fsio::atomic_write(path, text.as_bytes()).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------- gen-data

fn gen_cmnist(args: CmnistArgs) -> Result<(), CliError> {
    const CMD: &str = "gen-data cmnist";
    let file = FileConfig::load(CMD, args.common.config.as_deref())?;
    let out = resolve_out(CMD, &args.common, &file)?;

    let defaults = CmnistConfig::default();
    let cfg = CmnistConfig {
        n_per_env: file.pick(args.n_per_env, "gen.n_per_env", defaults.n_per_env)?,
        n_test: file.pick(args.n_test, "gen.n_test", defaults.n_test)?,
        seed: file.pick(args.common.seed, "seed", defaults.seed)?,
    };
    let images = file.pick_opt(args.mnist_images, "gen.mnist_images")?;
    let labels = file.pick_opt(args.mnist_labels, "gen.mnist_labels")?;
    let glyphs = match (&images, &labels) {
        (None, None) => GlyphSource::Builtin,
        (Some(i), Some(l)) => {
            require_file(CMD, "IDX image", i)?;
            require_file(CMD, "IDX label", l)?;
            GlyphSource::External(DigitBitmaps::from_idx(i, l).map_err(|e| data_err(CMD, e))?)
        }
        _ => {
            return Err(usage(
                CMD,
                "--mnist-images and --mnist-labels must be given together",
            ))
        }
    };

    let splits = cmnist::generate(&cfg, &glyphs).map_err(|e| data_err(CMD, e))?;
    let by_env = |env: i32| -> Vec<usize> {
        (0..splits.train.len()).filter(|&i| splits.train.e[i] == env).collect()
    };
    let named = [
        ("train-e0.scbd", splits.train.subset(&by_env(0))),
        ("train-e1.scbd", splits.train.subset(&by_env(1))),
        ("val.scbd", splits.val.clone()),
        ("test.scbd", splits.test.clone()),
    ];
    for (name, ds) in &named {
        container::save(ds, &out.join(name)).map_err(|e| data_err(CMD, e))?;
    }

    let mut meta = BTreeMap::new();
    meta.insert("generator".to_string(), "cmnist".to_string());
    meta.insert("gen.n_per_env".to_string(), cfg.n_per_env.to_string());
    meta.insert("gen.n_test".to_string(), cfg.n_test.to_string());
    meta.insert("seed".to_string(), cfg.seed.to_string());
    let glyph_note = match &images {
        Some(p) => format!("idx:{}", p.display()),
        None => "builtin".to_string(),
    };
    meta.insert("gen.glyphs".to_string(), glyph_note);
    write_artifact(&out.join("meta.kv"), &kv::render(&meta))?;

    let mut m = Manifest::new(CMD);
    for (k, v) in &meta {
        if k != "generator" {
            m.set(k, v);
        }
    }
    for name in ["train-e0.scbd", "train-e1.scbd", "val.scbd", "test.scbd", "meta.kv"] {
        m.artifact(&out, name)?;
    }
    m.write(&out)?;
    println!(
        "wrote train-e0/train-e1/val/test containers ({} + {} examples) to {}",
        2 * cfg.n_per_env,
        2 * cfg.n_test,
        out.display()
    );
    Ok(())
}

fn gen_ops_sim(args: OpsSimArgs) -> Result<(), CliError> {
    const CMD: &str = "gen-data ops-sim";
    let file = FileConfig::load(CMD, args.common.config.as_deref())?;
    let out = resolve_out(CMD, &args.common, &file)?;

    let d = OpsSimConfig::default();
    let cfg = OpsSimConfig {
        genes: file.pick(args.genes, "gen.genes", d.genes)?,
        complex_size: file.pick(args.complex_size, "gen.complex_size", d.complex_size)?,
        wells: file.pick(args.wells, "gen.wells", d.wells)?,
        guides_per_gene: file.pick(args.guides_per_gene, "gen.guides_per_gene", d.guides_per_gene)?,
        control_guides: file.pick(args.control_guides, "gen.control_guides", d.control_guides)?,
        cells_per_guide: file.pick(args.cells_per_guide, "gen.cells_per_guide", d.cells_per_guide)?,
        features: file.pick(args.features, "gen.features", d.features)?,
        pseudo_image: file.pick(args.pseudo_image, "gen.pseudo_image", d.pseudo_image)?,
        batch_strength: file.pick(args.batch_strength, "gen.batch_strength", d.batch_strength)?,
        seed: file.pick(args.common.seed, "seed", d.seed)?,
    };

    let sim = opssim::generate(&cfg).map_err(|e| data_err(CMD, e))?;
    container::save(&sim.dataset, &out.join("screen.scbd")).map_err(|e| data_err(CMD, e))?;
    write_artifact(&out.join("complexes.kv"), &sim.graph.render())?;

    let mut meta = BTreeMap::new();
    meta.insert("generator".to_string(), "ops-sim".to_string());
    meta.insert("gen.genes".to_string(), cfg.genes.to_string());
    meta.insert("gen.complex_size".to_string(), cfg.complex_size.to_string());
    meta.insert("gen.wells".to_string(), cfg.wells.to_string());
    meta.insert("gen.guides_per_gene".to_string(), cfg.guides_per_gene.to_string());
    meta.insert("gen.control_guides".to_string(), cfg.control_guides.to_string());
    meta.insert("gen.cells_per_guide".to_string(), cfg.cells_per_guide.to_string());
    meta.insert("gen.features".to_string(), cfg.features.to_string());
    meta.insert("gen.pseudo_image".to_string(), cfg.pseudo_image.to_string());
    meta.insert("gen.batch_strength".to_string(), cfg.batch_strength.to_string());
    meta.insert("seed".to_string(), cfg.seed.to_string());
    write_artifact(&out.join("meta.kv"), &kv::render(&meta))?;

    let mut m = Manifest::new(CMD);
    for (k, v) in &meta {
        if k != "generator" {
            m.set(k, v);
        }
    }
    for name in ["screen.scbd", "complexes.kv", "meta.kv"] {
        m.artifact(&out, name)?;
    }
    m.write(&out)?;
    println!(
        "wrote screen container ({} cells, {} genes, {} wells) to {}",
        sim.dataset.len(),
        sim.graph.n_genes(),
        cfg.wells,
        out.display()
    );
    Ok(())
}

// ------------------------------------------------------------------- train

fn train(args: TrainArgs) -> Result<(), CliError> {
    const CMD: &str = "train";
    let file = FileConfig::load(CMD, args.common.config.as_deref())?;
    let out = resolve_out(CMD, &args.common, &file)?;

    let train_paths = pick_paths(CMD, &file, &args.train, "data.train")?;
    let train_ds = load_concat(CMD, "training", &train_paths)?;
    let val_path = required_path(CMD, &file, &args.val, "--val", "data.val")?;
    let val_ds = load_dataset(CMD, "validation", &val_path)?;

    let mut setup = resolve_train(CMD, &args.opts, &args.common, &file, 0.0)?;
    setup.cfg.checkpoint_dir = Some(out.clone());
    let arch = setup.arch(CMD, &train_ds.feature_shape)?;

    let resume = match file.pick_opt(args.resume, "train.resume")? {
        Some(p) => {
            require_file(CMD, "checkpoint", &p)?;
            Some(engine::load_checkpoint(&p).map_err(|e| usage(CMD, format!("{}: {e}", p.display())))?)
        }
        None => None,
    };

    let outcome = engine::train_scbd(&arch, &train_ds, &val_ds, &setup.cfg, resume.as_ref())
        .map_err(|e| engine_err(CMD, e))?;
    write_artifact(&out.join("metrics.csv"), &outcome.metrics.to_csv())?;

    let mut m = Manifest::new(CMD);
    echo_train(&mut m, &setup.cfg, &arch);
    m.set("data.train", join_paths(&train_paths));
    m.set("data.val", val_path.display());
    m.set("result.best_step", outcome.best.best_step);
    if let Some(v) = outcome.best.best_val {
        m.set("result.best_val", v);
    }
    m.set("result.steps", outcome.last.step);
    m.set("result.skipped_steps", outcome.skipped_steps);
    if let Some(step) = outcome.diverged_at {
        m.set("result.diverged_at", step);
    }
    m.artifact(&out, "metrics.csv")?;
    m.artifact(&out, "latest.scbk")?;
    if out.join("best.scbk").is_file() {
        m.artifact(&out, "best.scbk")?;
    }
    m.write(&out)?;

    report_outcome(&outcome, &out)
}

/// Prints the one-line summary and converts a divergence into exit code 3.
fn report_outcome(outcome: &TrainOutcome, out: &Path) -> Result<(), CliError> {
    match outcome.best.best_val {
        Some(v) => println!(
            "trained {} steps in {:.1}s; best val objective {v:.6} at step {}; artifacts in {}",
            outcome.last.step,
            outcome.seconds,
            outcome.best.best_step,
            out.display()
        ),
        None => println!(
            "trained {} steps in {:.1}s; artifacts in {}",
            outcome.last.step,
            outcome.seconds,
            out.display()
        ),
    }
    match outcome.diverged_at {
        Some(step) => Err(CliError::Diverged { step }),
        None => Ok(()),
    }
}

// ------------------------------------------------------------- sweep-alpha

fn sweep(args: SweepAlphaArgs) -> Result<(), CliError> {
    const CMD: &str = "sweep-alpha";
    let file = FileConfig::load(CMD, args.common.config.as_deref())?;
    let out = resolve_out(CMD, &args.common, &file)?;

    let train_paths = pick_paths(CMD, &file, &args.train, "data.train")?;
    let train_ds = load_concat(CMD, "training", &train_paths)?;
    let val_path = required_path(CMD, &file, &args.val, "--val", "data.val")?;
    let val_ds = load_dataset(CMD, "validation", &val_path)?;
    let test_path = required_path(CMD, &file, &args.test, "--test", "data.test")?;
    let test_ds = load_dataset(CMD, "test", &test_path)?;

    let setup = resolve_train(CMD, &args.opts, &args.common, &file, 0.0)?;
    let arch = setup.arch(CMD, &train_ds.feature_shape)?;

    let alphas: Vec<f32> = match file.pick_opt(args.alphas, "sweep.alphas")? {
        Some(text) => parse_list(CMD, "alphas", &text)?,
        None => vec![0.0, 8.0, 64.0, 192.0],
    };
    let n_seeds = file.pick(args.seeds, "sweep.seeds", 3)?;
    if n_seeds == 0 {
        return Err(usage(CMD, "--seeds must be at least 1"));
    }
    let seeds: Vec<u64> = (0..n_seeds).map(|k| setup.cfg.seed + k).collect();

    let table = sweep_alpha(
        &alphas,
        &seeds,
        &arch,
        &train_ds,
        &val_ds,
        &test_ds,
        &setup.cfg,
        &ProbeConfig::default(),
    )
    .map_err(|e| eval_err(CMD, e))?;
    write_artifact(&out.join("sweep.csv"), &table.to_csv())?;

    let summary = table.summary();
    let series = vec![
        PlotSeries {
            label: "val (in-distribution)".to_string(),
            points: summary.iter().map(|s| (f64::from(s.0), s.1, s.2)).collect(),
        },
        PlotSeries {
            label: "test (out-of-distribution)".to_string(),
            points: summary.iter().map(|s| (f64::from(s.0), s.3, s.4)).collect(),
        },
    ];
    let svg = svg_line_plot("probe accuracy vs α", "α", "accuracy", &series);
    write_artifact(&out.join("tradeoff.svg"), &svg)?;

    let mut m = Manifest::new(CMD);
    echo_train(&mut m, &setup.cfg, &arch);
    m.set("data.train", join_paths(&train_paths));
    m.set("data.val", val_path.display());
    m.set("data.test", test_path.display());
    let alpha_text: Vec<String> = alphas.iter().map(|a| a.to_string()).collect();
    m.set("sweep.alphas", alpha_text.join(","));
    m.set("sweep.seeds", n_seeds);
    m.set("result.rows", table.rows.len());
    m.artifact(&out, "sweep.csv")?;
    m.artifact(&out, "tradeoff.svg")?;
    m.write(&out)?;

    for s in &summary {
        println!(
            "alpha {:>8}: val {:.4} ± {:.4}   test {:.4} ± {:.4}",
            s.0, s.1, s.2, s.3, s.4
        );
    }
    println!("{} runs; artifacts in {}", table.rows.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------- erm-scan

fn scan(args: ErmScanArgs) -> Result<(), CliError> {
    const CMD: &str = "erm-scan";
    let file = FileConfig::load(CMD, args.common.config.as_deref())?;
    let out = resolve_out(CMD, &args.common, &file)?;

    let train_paths = pick_paths(CMD, &file, &args.train, "data.train")?;
    let train_ds = load_concat(CMD, "training", &train_paths)?;
    let val_path = required_path(CMD, &file, &args.val, "--val", "data.val")?;
    let val_ds = load_dataset(CMD, "validation", &val_path)?;
    let test_path = required_path(CMD, &file, &args.test, "--test", "data.test")?;
    let test_ds = load_dataset(CMD, "test", &test_path)?;

    let d = ErmGrid::default();
    let grid = ErmGrid {
        lrs: match file.pick_opt(args.lrs, "scan.lrs")? {
            Some(text) => parse_list(CMD, "lrs", &text)?,
            None => d.lrs,
        },
        weight_decays: match file.pick_opt(args.wds, "scan.weight_decays")? {
            Some(text) => parse_list(CMD, "weight_decays", &text)?,
            None => d.weight_decays,
        },
        epochs: match file.pick_opt(args.epochs, "scan.epochs")? {
            Some(text) => parse_list(CMD, "epochs", &text)?,
            None => d.epochs,
        },
        batch_size: file.pick(args.batch_size, "scan.batch_size", d.batch_size)?,
    };
    let base_seed = file.pick(args.common.seed, "seed", 0)?;
    let n_seeds = file.pick(args.seeds, "scan.seeds", 1)?;
    if n_seeds == 0 {
        return Err(usage(CMD, "--seeds must be at least 1"));
    }
    let seeds: Vec<u64> = (0..n_seeds).map(|k| base_seed + k).collect();

    let classes = train_ds
        .y
        .iter()
        .chain(&val_ds.y)
        .chain(&test_ds.y)
        .max()
        .copied()
        .ok_or_else(|| usage(CMD, "the training container is empty"))?;
    if classes < 1 {
        return Err(usage(CMD, "classification needs at least two label values"));
    }
    let arch = ErmArchConfig {
        input: input_kind(CMD, &train_ds.feature_shape)?,
        classes: classes as usize + 1,
    };

    let table = erm_scan(&grid, &seeds, &arch, &train_ds, &val_ds, &test_ds)
        .map_err(|e| eval_err(CMD, e))?;
    write_artifact(&out.join("scan.csv"), &table.to_csv())?;

    let points: Vec<(f64, f64)> = table
        .rows
        .iter()
        .map(|r| (r.val_accuracy, r.test_accuracy))
        .collect();
    let svg = svg_scatter(
        "ERM model selection",
        "val accuracy (in-distribution)",
        "test accuracy (out-of-distribution)",
        &points,
    );
    write_artifact(&out.join("scatter.svg"), &svg)?;

    let corr = table.correlation();
    let mut m = Manifest::new(CMD);
    m.set("data.train", join_paths(&train_paths));
    m.set("data.val", val_path.display());
    m.set("data.test", test_path.display());
    let join = |v: &[String]| v.join(",");
    m.set("scan.lrs", join(&grid.lrs.iter().map(f64::to_string).collect::<Vec<_>>()));
    m.set(
        "scan.weight_decays",
        join(&grid.weight_decays.iter().map(f64::to_string).collect::<Vec<_>>()),
    );
    m.set("scan.epochs", join(&grid.epochs.iter().map(u64::to_string).collect::<Vec<_>>()));
    m.set("scan.batch_size", grid.batch_size);
    m.set("scan.seeds", n_seeds);
    m.set("seed", base_seed);
    m.set("result.rows", table.rows.len());
    match corr {
        Some(r) => m.set("result.pearson", r),
        None => m.set("result.pearson", "undefined"),
    }
    m.artifact(&out, "scan.csv")?;
    m.artifact(&out, "scatter.svg")?;
    m.write(&out)?;

    match corr {
        Some(r) => println!(
            "{} grid cells; Pearson(val, test) = {r:.4}; artifacts in {}",
            table.rows.len(),
            out.display()
        ),
        None => println!(
            "{} grid cells; Pearson(val, test) undefined; artifacts in {}",
            table.rows.len(),
            out.display()
        ),
    }
    Ok(())
}

// ---------------------------------------------------------- eval-batchcorr

fn batchcorr(args: BatchcorrArgs) -> Result<(), CliError> {
    const CMD: &str = "eval-batchcorr";
    let file = FileConfig::load(CMD, args.common.config.as_deref())?;
    let out = resolve_out(CMD, &args.common, &file)?;

    let data_path = required_path(CMD, &file, &args.data, "--data", "data.screen")?;
    let ds = load_dataset(CMD, "screen", &data_path)?;
    let labels = ds
        .screen
        .clone()
        .ok_or_else(|| usage(CMD, "the container has no gene/guide/well columns"))?;
    let graph_path = required_path(CMD, &file, &args.graph, "--graph", "data.graph")?;
    require_file(CMD, "complex assignment", &graph_path)?;
    let graph_text =
        std::fs::read_to_string(&graph_path).map_err(|e| io_err(&graph_path, e))?;
    let graph = ComplexGraph::parse(&graph_text)
        .map_err(|e| usage(CMD, format!("{}: {e}", graph_path.display())))?;

    // The invariance penalty is the point of this protocol, so it defaults on.
    let mut setup = resolve_train(CMD, &args.opts, &args.common, &file, 1.0)?;
    setup.cfg.checkpoint_dir = Some(out.clone());
    let arch = setup.arch(CMD, &ds.feature_shape)?;

    let (train_ds, val_ds) = datagen::stratified_split(&ds, 0.1, setup.cfg.seed);
    let outcome = engine::train_scbd(&arch, &train_ds, &val_ds, &setup.cfg, None)
        .map_err(|e| engine_err(CMD, e))?;
    write_artifact(&out.join("train_metrics.csv"), &outcome.metrics.to_csv())?;

    let probe = ProbeConfig::default();
    let emb = embed_dataset(&outcome.best.params, &ds).map_err(|e| eval_err(CMD, e))?;
    let f1_zc = batch_f1(&emb.z_c, emb.d_zc, &labels.well, setup.cfg.seed, &probe)
        .map_err(|e| eval_err(CMD, e))?;
    let f1_raw = batch_f1(&ds.features, ds.feature_len(), &labels.well, setup.cfg.seed, &probe)
        .map_err(|e| eval_err(CMD, e))?;
    let mut wells = labels.well.clone();
    wells.sort_unstable();
    wells.dedup();
    let chance = 1.0 / wells.len() as f64;

    let genes_zc = aggregate_gene_embeddings(&emb.z_c, emb.d_zc, &labels.gene, &labels.guide, 0)
        .map_err(|e| eval_err(CMD, e))?;
    let genes_raw =
        aggregate_gene_embeddings(&ds.features, ds.feature_len(), &labels.gene, &labels.guide, 0)
            .map_err(|e| eval_err(CMD, e))?;
    let pr_zc = corum_style_auprc(&genes_zc, &graph, Tail::TwoTailed).map_err(|e| eval_err(CMD, e))?;
    let pr_raw =
        corum_style_auprc(&genes_raw, &graph, Tail::TwoTailed).map_err(|e| eval_err(CMD, e))?;
    let n = genes_zc.genes.len();
    let base_rate = graph.positive_pairs().len() as f64 / (n * (n - 1) / 2) as f64;

    let mut csv = String::from("metric,value\n");
    for (name, value) in [
        ("well_f1_zc", f1_zc),
        ("well_f1_raw", f1_raw),
        ("well_f1_chance", chance),
        ("auprc_zc", pr_zc.area),
        ("auprc_raw", pr_raw.area),
        ("auprc_base_rate", base_rate),
    ] {
        csv.push_str(&format!("{name},{value}\n"));
    }
    write_artifact(&out.join("metrics.csv"), &csv)?;
    write_artifact(&out.join("pr_zc.csv"), &pr_zc.to_csv())?;
    write_artifact(&out.join("pr_raw.csv"), &pr_raw.to_csv())?;
    write_artifact(&out.join("genes_zc.csv"), &genes_zc.to_csv())?;

    let mut m = Manifest::new(CMD);
    echo_train(&mut m, &setup.cfg, &arch);
    m.set("data.screen", data_path.display());
    m.set("data.graph", graph_path.display());
    m.set("result.well_f1_zc", f1_zc);
    m.set("result.well_f1_raw", f1_raw);
    m.set("result.well_f1_chance", chance);
    m.set("result.auprc_zc", pr_zc.area);
    m.set("result.auprc_raw", pr_raw.area);
    m.set("result.auprc_base_rate", base_rate);
    if let Some(step) = outcome.diverged_at {
        m.set("result.diverged_at", step);
    }
    for name in ["train_metrics.csv", "metrics.csv", "pr_zc.csv", "pr_raw.csv", "genes_zc.csv"] {
        m.artifact(&out, name)?;
    }
    m.artifact(&out, "latest.scbk")?;
    if out.join("best.scbk").is_file() {
        m.artifact(&out, "best.scbk")?;
    }
    m.write(&out)?;

    println!(
        "well F1: z_c {f1_zc:.4} vs raw {f1_raw:.4} (chance {chance:.4}); \
         complex AUPRC: z_c {:.4} vs raw {:.4} (base rate {base_rate:.4})",
        pr_zc.area, pr_raw.area
    );
    report_outcome(&outcome, &out)
}

// -------------------------------------------------------------------- swap

fn swap(args: SwapArgs) -> Result<(), CliError> {
    const CMD: &str = "swap";
    let file = FileConfig::load(CMD, args.common.config.as_deref())?;
    let out = resolve_out(CMD, &args.common, &file)?;

    let ckpt_path = required_path(CMD, &file, &args.ckpt, "--ckpt", "swap.ckpt")?;
    require_file(CMD, "checkpoint", &ckpt_path)?;
    let ckpt = engine::load_checkpoint(&ckpt_path)
        .map_err(|e| usage(CMD, format!("{}: {e}", ckpt_path.display())))?;

    let data_paths = pick_paths(CMD, &file, &args.data, "data.train")?;
    let ds = load_concat(CMD, "image", &data_paths)?;
    let pairs = file.pick(args.pairs, "swap.pairs", 50)?;
    if pairs == 0 {
        return Err(usage(CMD, "--pairs must be at least 1"));
    }
    let seed = file.pick(args.common.seed, "seed", ckpt.seed)?;

    let emb = embed_dataset(&ckpt.params, &ds).map_err(|e| eval_err(CMD, e))?;
    let probe = LogReg::fit(&emb.z_c, emb.d_zc, &ds.y, &ProbeConfig::default())
        .map_err(|e| eval_err(CMD, e))?;

    let mut pool_a: Vec<usize> = (0..ds.len()).filter(|&i| ds.e[i] == 0).collect();
    let mut pool_b: Vec<usize> = (0..ds.len()).filter(|&i| ds.e[i] == 1).collect();
    if pool_a.len() < pairs || pool_b.len() < pairs {
        return Err(usage(
            CMD,
            format!(
                "need {pairs} examples per environment, found {} with e=0 and {} with e=1",
                pool_a.len(),
                pool_b.len()
            ),
        ));
    }
    pool_a.shuffle(&mut substream(seed, "swap-pairs", 0));
    pool_b.shuffle(&mut substream(seed, "swap-pairs", 1));
    let batch_a = ds.batch(&pool_a[..pairs]).map_err(|e| data_err(CMD, e))?;
    let batch_b = ds.batch(&pool_b[..pairs]).map_err(|e| data_err(CMD, e))?;

    let report = counterfactual_swap(&ckpt.params, &batch_a, &batch_b, &probe)
        .map_err(|e| eval_err(CMD, e))?;

    write_ppm(&out.join("grid.ppm"), report.grid_width, report.grid_height, &report.grid)
        .map_err(|e| eval_err(CMD, e))?;
    let mut csv = String::from("pair,hue_a,hue_b,hue_swap\n");
    for (k, (ha, hb, hs)) in report.hues.iter().enumerate() {
        csv.push_str(&format!("{k},{ha},{hb},{hs}\n"));
    }
    write_artifact(&out.join("swap.csv"), &csv)?;

    let mut m = Manifest::new(CMD);
    m.set("swap.ckpt", ckpt_path.display());
    m.set("data.train", join_paths(&data_paths));
    m.set("swap.pairs", pairs);
    m.set("seed", seed);
    m.set("result.hue_crossed", report.hue_crossed);
    m.set("result.hue_closer", report.hue_closer);
    m.set("result.digit_kept", report.digit_kept);
    m.set("result.hue_crossed_rate", report.hue_crossed_rate());
    m.set("result.digit_kept_rate", report.digit_kept_rate());
    m.artifact(&out, "grid.ppm")?;
    m.artifact(&out, "swap.csv")?;
    m.write(&out)?;

    println!(
        "{} pairs: hue crossed {}/{}, hue closer {}/{}, digit kept {}/{}; artifacts in {}",
        report.pairs,
        report.hue_crossed,
        report.pairs,
        report.hue_closer,
        report.pairs,
        report.digit_kept,
        report.pairs,
        out.display()
    );
    Ok(())
}
