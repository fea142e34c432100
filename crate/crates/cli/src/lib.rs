//! Command-line pipelines: synthetic data, preprocessing, training,
//! evaluation, bound verification, and hyperparameter sweeps.

pub mod error;
pub mod manifest;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dpgen::distortion::{
    build_report, estimate_distortion_constant, masked_distortion_loss, DistortionReport,
};
use dpgen::io::{
    self, load_checkpoint, load_coords, load_expression, load_features, load_pipeline, output_path,
    save_checkpoint, save_features, save_pipeline, write_atomic, Checkpoint, Features,
};
use dpgen::preprocess::{FeaturePipeline, DEFAULT_SCALE};
use dpgen::spatial::{knn_mask, pairwise_distances, SpatialCoords};
use dpgen::synth::{generate, train_test_split_sections, Axis, SynthConfig};
use dpgen::trainer::{evaluate, train, EvalMetrics, TrainConfig, TrainHistory};
use dpgen::vae::{encode, ModelParams};
use dpgen::Tensor;

pub use error::{CliError, CliResult};
use manifest::{to_json_bytes, ManifestBuilder};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "DPGEN_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "dpgen",
    version,
    about = "Distance-preserving VAEs for spatial expression data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic grid dataset.
    Synth(SynthArgs),
    /// Normalise, select variable genes, and project onto principal components.
    Preprocess(PreprocessArgs),
    /// Train a model on preprocessed features.
    Train(TrainArgs),
    /// Reconstruction error and latent spatial autocorrelation.
    Evaluate(EvaluateArgs),
    /// Estimate the distortion constant and compare it with its bound.
    VerifyBound(VerifyArgs),
    /// Train and evaluate over a grid of alphas and seeds.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct SynthArgs {
    /// JSON file with synthetic-data settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub grid_side: Option<usize>,
    #[arg(long)]
    pub genes: Option<usize>,
    #[arg(long)]
    pub patterns: Option<usize>,
    #[arg(long)]
    pub smoothness: Option<f64>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long)]
    pub count_scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write interleaved train/ and test/ sections with this training fraction.
    #[arg(long)]
    pub split: Option<f64>,
    #[arg(long, default_value = "y")]
    pub axis: Axis,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct PreprocessArgs {
    /// Expression CSV, or a `.mtx` file with genes.txt and spots.txt beside it.
    #[arg(long)]
    pub expr: PathBuf,
    #[arg(long)]
    pub coords: PathBuf,
    #[arg(long, default_value_t = 3000)]
    pub hvg: usize,
    #[arg(long, default_value_t = 256)]
    pub pca: usize,
    #[arg(long, default_value_t = DEFAULT_SCALE)]
    pub scale: f64,
    /// Apply a previously fitted pca_model.bin instead of fitting.
    #[arg(long)]
    pub pipeline: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training flags; each overrides the config file when given.
#[derive(Debug, Args, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub latent: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub min_improvement: Option<f64>,
    #[arg(long)]
    pub mask_k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct TrainArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub coords: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub coords: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct VerifyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub coords: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    #[arg(long, default_value_t = 8)]
    pub draws: usize,
    /// Spots beyond this count are subsampled (all pairs of the subsample are used).
    #[arg(long, default_value_t = 1000)]
    pub max_spots: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct SweepArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub coords: PathBuf,
    /// Held-out features; defaults to the training features.
    #[arg(long, requires = "test_coords")]
    pub test_features: Option<PathBuf>,
    #[arg(long, requires = "test_features")]
    pub test_coords: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,10,25,50,100,200")]
    pub alphas: Vec<f64>,
    /// Number of seeds, counted up from the base seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` and runs the chosen command.
pub fn run<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = std::io::stdout().write_all(e.render().to_string().as_bytes());
                return Ok(());
            }
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return Err(CliError::usage(first.trim_start_matches("error: ")));
        }
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Preprocess(a) => cmd_preprocess(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::VerifyBound(a) => cmd_verify(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| {
            CliError::usage(format!("{SEED_ENV} must be an unsigned integer, got {s:?}"))
        }),
        Err(_) => Ok(None),
    }
}

/// Seed precedence: flag, then environment, then config.
pub fn resolve_seed(flag: Option<u64>, config: u64) -> CliResult<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(config),
    })
}

impl TrainFlags {
    /// Builds the effective training configuration.
    pub fn resolve(&self) -> CliResult<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => read_json::<TrainConfig>(p)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { c.$field = v; })*
            };
        }
        set!(alpha => alpha, beta => beta, latent => latent_dim, hidden => hidden_dim, lr => lr,
             batch_size => batch_size, max_epochs => max_epochs, patience => patience,
             min_improvement => min_improvement, mask_k => mask_k);
        c.seed = resolve_seed(self.seed, c.seed)?;
        c.validate()?;
        Ok(c)
    }
}

fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let mut m = ManifestBuilder::new("synth");
    let mut cfg = match &a.config {
        Some(p) => {
            m.input(p)?;
            read_json::<SynthConfig>(p)?
        }
        None => SynthConfig::default(),
    };
    if let Some(v) = a.grid_side {
        cfg.grid_side = v;
    }
    if let Some(v) = a.genes {
        cfg.n_genes = v;
    }
    if let Some(v) = a.patterns {
        cfg.n_patterns = v;
    }
    if let Some(v) = a.smoothness {
        cfg.smoothness = v;
    }
    if let Some(v) = a.noise_sd {
        cfg.noise_sd = v;
    }
    if let Some(v) = a.count_scale {
        cfg.count_scale = v;
    }
    cfg.seed = resolve_seed(a.seed, cfg.seed)?;
    cfg.validate()?;
    let (x, coords) = generate(&cfg)?;
    m.stage("generate");

    let expr_path = output_path(&a.out, "expression.csv")?;
    let coords_path = a.out.join("coords.csv");
    io::write_expression_csv(&expr_path, &x)?;
    io::write_coords_csv(&coords_path, &coords)?;
    m.output(expr_path);
    m.output(coords_path);
    if let Some(f) = a.split {
        let s = train_test_split_sections(&x, &coords, a.axis, f)?;
        for (name, (sx, sc)) in [("train", &s.train), ("test", &s.test)] {
            let dir = a.out.join(name);
            let e = output_path(&dir, "expression.csv")?;
            let c = dir.join("coords.csv");
            io::write_expression_csv(&e, sx)?;
            io::write_coords_csv(&c, sc)?;
            m.output(e);
            m.output(c);
        }
    }
    m.stage("write");
    m.config(
        serde_json::json!({ "synth": cfg, "split": a.split, "axis": a.axis }),
        Some(cfg.seed),
    );
    m.finish(&a.out)?;
    Ok(())
}

fn cmd_preprocess(a: &PreprocessArgs) -> CliResult<()> {
    let mut m = ManifestBuilder::new("preprocess");
    m.input(&a.expr)?;
    m.input(&a.coords)?;
    let x = load_expression(&a.expr)?;
    load_coords(&a.coords, &x.spot_ids)?;
    m.stage("load");

    let features_path = output_path(&a.out, "features.bin")?;
    let (values, config) = match &a.pipeline {
        Some(p) => {
            m.input(p)?;
            let pipe = load_pipeline(p)?;
            let values = pipe.transform(&x)?;
            let cfg = serde_json::json!({
                "pipeline": p.display().to_string(),
                "hvg": pipe.hvg.len(),
                "pca": pipe.pca.n_components(),
                "scale": pipe.scale,
            });
            (values, cfg)
        }
        None => {
            let hvg = a.hvg.min(x.n_genes());
            let pca = a.pca.min(hvg).min(x.n_spots());
            let (pipe, values) = FeaturePipeline::fit(&x, hvg, pca, a.scale)?;
            let model_path = a.out.join("pca_model.bin");
            save_pipeline(&model_path, &pipe)?;
            m.output(model_path);
            let cfg = serde_json::json!({
                "hvg_requested": a.hvg,
                "pca_requested": a.pca,
                "hvg": hvg,
                "pca": pca,
                "scale": a.scale,
                "rank_deficient": pipe.pca.rank_deficient,
            });
            (values, cfg)
        }
    };
    m.stage("transform");
    save_features(
        &features_path,
        &Features {
            spot_ids: x.spot_ids.clone(),
            values,
        },
    )?;
    m.output(features_path);
    m.config(config, None);
    m.stage("write");
    m.finish(&a.out)?;
    Ok(())
}

fn load_inputs(
    m: &mut ManifestBuilder,
    features: &Path,
    coords: &Path,
) -> CliResult<(Features, SpatialCoords)> {
    m.input(features)?;
    m.input(coords)?;
    let f = load_features(features)?;
    let c = load_coords(coords, &f.spot_ids)?;
    Ok((f, c))
}

/// Trains and writes `checkpoint.bin` and `history.csv` into `out`.
fn train_into(
    config: &TrainConfig,
    f: &Features,
    c: &SpatialCoords,
    out: &Path,
) -> CliResult<(Checkpoint, TrainHistory, Vec<PathBuf>)> {
    let (params, history) = train(config, &f.values, c)?;
    let ck = Checkpoint {
        config: config.clone(),
        params,
    };
    let ck_path = output_path(out, "checkpoint.bin")?;
    save_checkpoint(&ck_path, &ck)?;
    let hist_path = out.join("history.csv");
    write_atomic(&hist_path, history.to_csv().as_bytes())?;
    Ok((ck, history, vec![ck_path, hist_path]))
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let mut m = ManifestBuilder::new("train");
    let config = a.flags.resolve()?;
    if let Some(p) = &a.flags.config {
        m.input(p)?;
    }
    let (f, c) = load_inputs(&mut m, &a.features, &a.coords)?;
    m.stage("load");
    let (_, history, outputs) = train_into(&config, &f, &c, &a.out)?;
    m.stage("train");
    for p in outputs {
        m.output(p);
    }
    m.config(
        serde_json::json!({
            "train": config,
            "epochs": history.len(),
            "best_epoch": history.best_epoch,
            "stopped_early": history.stopped_early,
        }),
        Some(config.seed),
    );
    m.finish(&a.out)?;
    Ok(())
}

fn check_width(params: &ModelParams, f: &Features, path: &Path) -> CliResult<()> {
    if f.values.cols() != params.dims.in_dim {
        return Err(CliError::io(format!(
            "{}: features have {} columns but the checkpoint expects {}",
            path.display(),
            f.values.cols(),
            params.dims.in_dim
        )));
    }
    Ok(())
}

fn latent_csv(params: &ModelParams, f: &Features) -> CliResult<String> {
    let (mu, _) = encode(params, &f.values)?;
    let mut s = String::from("spot_id");
    for d in 0..mu.cols() {
        s.push_str(&format!(",mu_{d}"));
    }
    s.push('\n');
    for (i, id) in f.spot_ids.iter().enumerate() {
        s.push_str(id);
        for v in mu.row(i) {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    Ok(s)
}

/// Evaluates and writes `metrics.json` and `latent.csv` into `out`.
fn evaluate_into(
    params: &ModelParams,
    f: &Features,
    c: &SpatialCoords,
    k: usize,
    out: &Path,
) -> CliResult<(EvalMetrics, Vec<PathBuf>)> {
    let metrics = evaluate(params, &f.values, c, k)?;
    let metrics_path = output_path(out, "metrics.json")?;
    write_atomic(&metrics_path, &to_json_bytes(&metrics)?)?;
    let latent_path = out.join("latent.csv");
    write_atomic(&latent_path, latent_csv(params, f)?.as_bytes())?;
    Ok((metrics, vec![metrics_path, latent_path]))
}

fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let mut m = ManifestBuilder::new("evaluate");
    m.input(&a.checkpoint)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let (f, c) = load_inputs(&mut m, &a.features, &a.coords)?;
    check_width(&ck.params, &f, &a.features)?;
    m.stage("load");
    let (_, outputs) = evaluate_into(&ck.params, &f, &c, a.k, &a.out)?;
    m.stage("evaluate");
    for p in outputs {
        m.output(p);
    }
    m.config(serde_json::json!({ "k": a.k }), None);
    m.finish(&a.out)?;
    Ok(())
}

/// Runs the distortion-constant estimate for a checkpoint.
pub fn verify_bound(
    ck: &Checkpoint,
    f: &Features,
    c: &SpatialCoords,
    epsilon: f64,
    delta: f64,
    draws: usize,
    max_spots: usize,
    seed: u64,
) -> CliResult<DistortionReport> {
    if max_spots < 2 {
        return Err(CliError::usage("--max-spots must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = f.values.rows();
    let (y, coords) = if n > max_spots {
        let mut idx = sample(&mut rng, n, max_spots).into_vec();
        idx.sort_unstable();
        (f.values.select_rows(&idx), c.subset(&idx))
    } else {
        (f.values.clone(), c.clone())
    };
    let ds = pairwise_distances(&coords);
    let lambda = ck.params.lambda();
    let params = &ck.params;
    let est = estimate_distortion_constant(
        |y: &Tensor| encode(params, y),
        &y,
        &ds,
        lambda,
        epsilon,
        draws,
        &mut rng,
    )?;
    let (mu, _) = encode(params, &y)?;
    let mask_k = ck.config.mask_k.min(coords.len() - 1);
    let l_emp = masked_distortion_loss(&mu, &ds, &knn_mask(&coords, mask_k)?, lambda)?;
    Ok(build_report(
        &est, l_emp, lambda, &ds, epsilon, delta, draws,
    )?)
}

fn cmd_verify(a: &VerifyArgs) -> CliResult<()> {
    let mut m = ManifestBuilder::new("verify-bound");
    m.input(&a.checkpoint)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let (f, c) = load_inputs(&mut m, &a.features, &a.coords)?;
    check_width(&ck.params, &f, &a.features)?;
    let seed = resolve_seed(a.seed, ck.config.seed)?;
    m.stage("load");
    let report = verify_bound(&ck, &f, &c, a.epsilon, a.delta, a.draws, a.max_spots, seed)?;
    m.stage("estimate");
    let bytes = to_json_bytes(&report)?;
    let path = output_path(&a.out, "bound_report.json")?;
    write_atomic(&path, &bytes)?;
    let _ = std::io::stdout().write_all(&bytes);
    m.output(path);
    m.config(
        serde_json::json!({
            "epsilon": a.epsilon,
            "delta": a.delta,
            "draws": a.draws,
            "max_spots": a.max_spots,
        }),
        Some(seed),
    );
    m.finish(&a.out)?;
    Ok(())
}

/// One row of `sweep.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub lambda: f64,
    pub mse: f64,
    pub morans_i: f64,
    pub gearys_c: f64,
}

pub fn run_dir_name(alpha: f64, seed: u64) -> String {
    format!("alpha_{alpha}_seed_{seed}")
}

fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    if a.alphas.is_empty() || a.seeds == 0 {
        return Err(CliError::usage(
            "sweep needs at least one alpha and one seed",
        ));
    }
    let mut m = ManifestBuilder::new("sweep");
    let base = a.flags.resolve()?;
    let (f, c) = load_inputs(&mut m, &a.features, &a.coords)?;
    let test = match (&a.test_features, &a.test_coords) {
        (Some(tf), Some(tc)) => Some(load_inputs(&mut m, tf, tc)?),
        _ => None,
    };
    let (ef, ec) = test.as_ref().map(|(f, c)| (f, c)).unwrap_or((&f, &c));
    if ef.values.cols() != f.values.cols() {
        return Err(CliError::io(
            "test features and training features differ in width",
        ));
    }
    m.stage("load");

    let runs: Vec<(f64, u64)> = a
        .alphas
        .iter()
        .flat_map(|&al| (0..a.seeds).map(move |s| (al, base.seed + s)))
        .collect();
    let jobs = a
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::usage(e.to_string()))?;
    let results: Vec<CliResult<(SweepRow, Vec<PathBuf>)>> = pool.install(|| {
        runs.par_iter()
            .map(|&(alpha, seed)| {
                let cfg = TrainConfig {
                    alpha,
                    seed,
                    ..base.clone()
                };
                cfg.validate()?;
                let dir = a.out.join(run_dir_name(alpha, seed));
                let (ck, history, mut outputs) = train_into(&cfg, &f, &c, &dir)?;
                let (metrics, more) = evaluate_into(&ck.params, ef, ec, a.k, &dir)?;
                outputs.extend(more);
                Ok((
                    SweepRow {
                        alpha,
                        seed,
                        epochs: history.len(),
                        best_epoch: history.best_epoch,
                        lambda: ck.params.lambda(),
                        mse: metrics.mse,
                        morans_i: metrics.morans_i_mean,
                        gearys_c: metrics.gearys_c_mean,
                    },
                    outputs,
                ))
            })
            .collect()
    });
    m.stage("runs");
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        let (row, outputs) = r?;
        for p in outputs {
            m.output(p);
        }
        rows.push(row);
    }
    let sweep_path = output_path(&a.out, "sweep.csv")?;
    write_atomic(&sweep_path, sweep_csv(&rows).as_bytes())?;
    let summary_path = a.out.join("summary.csv");
    write_atomic(&summary_path, summary_csv(&a.alphas, &rows).as_bytes())?;
    m.output(sweep_path);
    m.output(summary_path);
    m.config(
        serde_json::json!({
            "train": base,
            "alphas": a.alphas,
            "seeds": a.seeds,
            "jobs": jobs,
            "k": a.k,
            "held_out": test.is_some(),
        }),
        Some(base.seed),
    );
    m.finish(&a.out)?;
    Ok(())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("alpha,seed,epochs,best_epoch,lambda,mse,morans_i,gearys_c\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.alpha, r.seed, r.epochs, r.best_epoch, r.lambda, r.mse, r.morans_i, r.gearys_c
        ));
    }
    s
}

/// Per-alpha means, in the order the alphas were given.
pub fn summary_csv(alphas: &[f64], rows: &[SweepRow]) -> String {
    let mut s = String::from("alpha,runs,mse,morans_i,gearys_c\n");
    for &al in alphas {
        let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.alpha == al).collect();
        let n = sel.len() as f64;
        let mean = |f: fn(&SweepRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
        s.push_str(&format!(
            "{al},{},{},{},{}\n",
            sel.len(),
            mean(|r| r.mse),
            mean(|r| r.morans_i),
            mean(|r| r.gearys_c)
        ));
    }
    s
}
