//! Command-line driver. Subcommands cover the whole workflow: dataset
//! generation, prior and full training, per-scene test-time adaptation,
//! the benchmark matrix, and heatmap export. Every artifact lands under
//! one run directory and is recorded in `manifest.json` by content hash,
//! so reruns with the same configuration are checkable byte for byte.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numeric failure. Failures print exactly one line to stderr, shaped
//! `error[<class>]: <message>`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use afford_core::aap::{AapModel, FeatureCache, LATENT_DIM};
use afford_core::aip::AipModel;
use afford_core::cloud::render;
use afford_core::config::Config;
use afford_core::error::{Error, Result};
use afford_core::eval::{
    eval_scenes, method_uses_budget, reports_table, reports_to_csv, run_method,
    train_one_shot_branch, train_similarity, EvalContext, EvalReport,
};
use afford_core::export::{write_heatmap_csv, write_heatmap_pgm};
use afford_core::manifest::RunManifest;
use afford_core::nn::{checkpoint, Tensor};
use afford_core::pipeline::{
    adapt, collect_random_episodes, iterative_train, load_dataset, save_dataset,
};
use afford_core::prior::{train_prior, PriorModel, PriorTrainConfig};
use afford_core::sim::{sample_scene, Category};
use afford_core::derive_seed;

const PRIOR_CMD_SALT: u64 = 0x9d10_64ac;
const ADAPT_CMD_SALT: u64 = 0xada9_41f0;
const SIM_DATA_SALT: u64 = 0x51ba_7a5e;
const SIM_INIT_SALT: u64 = 0x51b0_0d21;
const BRANCH_INIT_SALT: u64 = 0xb4ac_8890;

#[derive(Parser)]
#[command(
    name = "afford",
    version,
    about = "Affordance prediction over articulated scenes: data, training, adaptation, evaluation"
)]
struct Cli {
    /// TOML config file; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Dotted-path override, e.g. `--set train.rounds=2`. Repeatable;
    /// applied after the file and `AFFORD_*` environment overrides.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the random-interaction dataset.
    GenData(GenDataArgs),
    /// Train only the static prior on an existing dataset.
    TrainPrior(TrainPriorArgs),
    /// Run the full training schedule and save checkpoints.
    Train,
    /// Adapt to one scene; write prior/posterior heatmaps and the log.
    Adapt(AdaptArgs),
    /// Run benchmark methods over paired scenes; write a report CSV.
    Eval(EvalArgs),
    /// Score one scene with a trained model; export CSV and image maps.
    ExportHeatmap(ExportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset seed; defaults to `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory; defaults to `<run.out_dir>/dataset`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainPriorArgs {
    /// Dataset directory; defaults to `<run.out_dir>/dataset`.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct AdaptArgs {
    /// Checkpoint directory; defaults to `<run.out_dir>/ckpt`.
    #[arg(long, value_name = "DIR")]
    ckpt: Option<PathBuf>,
    /// Scene category; defaults to the first of `data.categories`.
    #[arg(long)]
    category: Option<String>,
    /// Scene seed; defaults to `run.seed`.
    #[arg(long)]
    scene_seed: Option<u64>,
    /// Interaction budget; defaults to `adapt.budget`.
    #[arg(long)]
    budget: Option<usize>,
    /// Output directory; defaults to `<run.out_dir>/adapt`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory; defaults to `<run.out_dir>/ckpt`.
    #[arg(long, value_name = "DIR")]
    ckpt: Option<PathBuf>,
    /// Comma-separated method names; defaults to `eval.methods`.
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated interaction budgets; defaults to `eval.budgets`.
    #[arg(long)]
    budgets: Option<String>,
    /// Report CSV path; defaults to `<run.out_dir>/eval_report.csv`.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Checkpoint directory; defaults to `<run.out_dir>/ckpt`.
    #[arg(long, value_name = "DIR")]
    ckpt: Option<PathBuf>,
    /// Which model scores the cloud: the static prior, or the adaptive
    /// model conditioned on the zero latent code.
    #[arg(long, default_value = "prior", value_parser = ["prior", "aap"])]
    model: String,
    /// Scene category; defaults to the first of `data.categories`.
    #[arg(long)]
    category: Option<String>,
    /// Scene seed; defaults to `run.seed`.
    #[arg(long)]
    scene_seed: Option<u64>,
    /// CSV output path; defaults to `<run.out_dir>/heatmap.csv`.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Optional PGM image output path.
    #[arg(long, value_name = "PATH")]
    image: Option<PathBuf>,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 128)]
    side: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let line = e.to_string();
            eprintln!("error[config]: {}", line.lines().next().unwrap_or("bad arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, class) = exit_class(&e);
            eprintln!("error[{class}]: {}", e.to_string().replace('\n', " "));
            ExitCode::from(code)
        }
    }
}

/// Maps error variants onto the documented exit-code classes.
fn exit_class(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Config(_) | Error::UnknownMethod(_) => (2, "config"),
        Error::Data(_)
        | Error::EmptyDataset(_)
        | Error::Io(_)
        | Error::EmptyView
        | Error::InsufficientPoints { .. } => (3, "data"),
        Error::Numeric(_) | Error::ShapeMismatch { .. } => (4, "numeric"),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    cfg.apply_env()?;
    for pair in &cli.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        cfg.apply_set(key, value)?;
    }
    cfg.validate()?;

    // Worker pool for scene-parallel stages; 0 keeps all logical cores.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.run.workers).build_global();

    let root = PathBuf::from(&cfg.run.out_dir);
    std::fs::create_dir_all(&root)?;
    match cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(&cfg, &root, args),
        Cmd::TrainPrior(args) => cmd_train_prior(&cfg, &root, args),
        Cmd::Train => cmd_train(&cfg, &root),
        Cmd::Adapt(args) => cmd_adapt(&cfg, &root, args),
        Cmd::Eval(args) => cmd_eval(&cfg, &root, args),
        Cmd::ExportHeatmap(args) => cmd_export(&cfg, &root, args),
    }
}

/// Loads the run's manifest if present, else starts one; the config
/// snapshot always reflects the current effective configuration.
fn open_manifest(root: &Path, cfg: &Config) -> RunManifest {
    let mut m = RunManifest::load(&root.join("manifest.json"))
        .unwrap_or_else(|_| RunManifest::new(cfg.to_toml()));
    m.config_toml = cfg.to_toml();
    m
}

fn save_manifest(root: &Path, mut m: RunManifest) -> Result<()> {
    m.relativize(root);
    m.save(&root.join("manifest.json"))
}

fn parse_category(name: &str) -> Result<Category> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| Error::Config(format!("unknown category `{name}`")))
}

fn scene_choice(cfg: &Config, category: &Option<String>, scene_seed: Option<u64>) -> Result<(Category, u64)> {
    let category = match category {
        Some(name) => parse_category(name)?,
        None => cfg.data.categories[0],
    };
    Ok((category, scene_seed.unwrap_or(cfg.run.seed)))
}

fn load_model<M>(
    ckpt: &Path,
    name: &str,
    build: impl FnOnce(afford_core::nn::ParamStore) -> Result<M>,
) -> Result<M> {
    let base = ckpt.join(name);
    if !base.with_extension("json").exists() {
        return Err(Error::Data(format!(
            "no `{name}` checkpoint under {}: run train first",
            ckpt.display()
        )));
    }
    let (_step, params) = checkpoint::load(&base)?;
    build(params)
}

fn cmd_gen_data(cfg: &Config, root: &Path, args: GenDataArgs) -> Result<()> {
    let seed = args.seed.unwrap_or(cfg.run.seed);
    let out = args.out.unwrap_or_else(|| root.join("dataset"));
    let d = &cfg.data;
    let ds = collect_random_episodes(
        &d.categories,
        d.n_scenes,
        d.k_interactions,
        d.eval_records,
        d.task,
        d.n_points,
        seed,
    )?;
    save_dataset(&ds, &out)?;

    let mut m = open_manifest(root, cfg);
    m.record_seed("gen-data", seed);
    m.record_dataset("dataset", &out)?;
    save_manifest(root, m)?;
    println!(
        "dataset: {} scenes, {} records -> {}",
        ds.scenes.len(),
        ds.record_count(),
        out.display()
    );
    Ok(())
}

fn cmd_train_prior(cfg: &Config, root: &Path, args: TrainPriorArgs) -> Result<()> {
    let data_dir = args.data.unwrap_or_else(|| root.join("dataset"));
    if !data_dir.join("records.jsonl").exists() {
        return Err(Error::Data(format!(
            "no dataset at {}: run gen-data first",
            data_dir.display()
        )));
    }
    let ds = load_dataset(&data_dir)?;
    let records: Vec<_> = ds.all_records().into_iter().cloned().collect();
    let pcfg = PriorTrainConfig {
        feat_dim: cfg.model.feat_dim,
        epochs: cfg.train.prior_epochs,
        batch: cfg.train.batch,
        lr: cfg.train.lr,
        aff_points: cfg.train.aff_points,
        seed: derive_seed(cfg.run.seed, PRIOR_CMD_SALT),
    };
    let (model, stats) = train_prior(&records, &pcfg)?;
    let base = root.join("ckpt").join("prior");
    checkpoint::save(&base, stats.epoch_critic_loss.len() as u64, &model.params)?;

    let mut m = open_manifest(root, cfg);
    m.record_seed("train-prior", pcfg.seed);
    m.record_checkpoint("prior", &base)?;
    save_manifest(root, m)?;
    println!(
        "prior: {} records, final critic loss {:.4} -> {}",
        records.len(),
        stats.epoch_critic_loss.last().copied().unwrap_or(f64::NAN),
        base.display()
    );
    Ok(())
}

fn cmd_train(cfg: &Config, root: &Path) -> Result<()> {
    let ckpt = root.join("ckpt");
    let models = iterative_train(&cfg.train_config(), Some(&ckpt))?;
    let step = models.rounds_run as u64;
    checkpoint::save(&ckpt.join("prior"), step, &models.prior.params)?;
    checkpoint::save(&ckpt.join("aap"), step, &models.aap.params)?;
    checkpoint::save(&ckpt.join("aip"), step, &models.aip.params)?;

    let stats_path = root.join("train_stats.json");
    let stats = serde_json::json!({
        "rounds_run": models.rounds_run,
        "val_losses": models.val_losses,
    });
    std::fs::write(&stats_path, serde_json::to_vec_pretty(&stats)?)?;

    let mut m = open_manifest(root, cfg);
    m.record_seed("train", cfg.run.seed);
    for name in ["prior", "aap", "aip"] {
        m.record_checkpoint(name, &ckpt.join(name))?;
    }
    m.record_file("train_stats", &stats_path)?;
    save_manifest(root, m)?;
    println!(
        "train: {} round(s), validation loss {:?} -> {}",
        models.rounds_run,
        models.val_losses,
        ckpt.display()
    );
    Ok(())
}

fn cmd_adapt(cfg: &Config, root: &Path, args: AdaptArgs) -> Result<()> {
    let ckpt = args.ckpt.unwrap_or_else(|| root.join("ckpt"));
    let aap = load_model(&ckpt, "aap", AapModel::from_params)?;
    let aip = load_model(&ckpt, "aip", AipModel::from_params)?;
    let (category, scene_seed) = scene_choice(cfg, &args.category, args.scene_seed)?;
    let budget = args.budget.unwrap_or(cfg.adapt.budget);
    let out = args.out.unwrap_or_else(|| root.join("adapt"));
    std::fs::create_dir_all(&out)?;

    let mut scene = sample_scene(category, scene_seed);
    let obs0 = Arc::new(render(&scene, cfg.data.n_points, 0)?);
    let mut cache = FeatureCache::new();
    let prior_map = aap.affordance_map(aap.features(&mut cache, &obs0), &Tensor::zeros(1, LATENT_DIM));

    let outcome = adapt(
        &aap,
        &aip,
        &mut scene,
        cfg.data.task,
        budget,
        cfg.adapt.stop_threshold,
        cfg.data.n_points,
        derive_seed(cfg.run.seed, ADAPT_CMD_SALT),
    )?;

    let prior_csv = out.join("prior.csv");
    let posterior_csv = out.join("posterior.csv");
    let log_path = out.join("interactions.json");
    write_heatmap_csv(&prior_csv, &obs0.points_world, &prior_map)?;
    write_heatmap_csv(&posterior_csv, &outcome.final_obs.points_world, &outcome.posterior)?;
    let log: Vec<serde_json::Value> = outcome
        .log
        .iter()
        .enumerate()
        .map(|(step, r)| {
            serde_json::json!({
                "step": step,
                "point": r.obs.points_world[r.point],
                "orientation": r.orientation,
                "motion": r.motion,
            })
        })
        .collect();
    std::fs::write(&log_path, serde_json::to_vec_pretty(&log)?)?;

    let mut m = open_manifest(root, cfg);
    m.record_seed("adapt", derive_seed(cfg.run.seed, ADAPT_CMD_SALT));
    m.record_file("adapt_prior", &prior_csv)?;
    m.record_file("adapt_posterior", &posterior_csv)?;
    m.record_file("adapt_log", &log_path)?;
    save_manifest(root, m)?;
    println!(
        "adapt: {:?} scene {scene_seed}, {} of {budget} interaction(s) used -> {}",
        category,
        outcome.log.len(),
        out.display()
    );
    Ok(())
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| Error::Config(format!("bad {what} `{s}`"))))
        .collect()
}

fn cmd_eval(cfg: &Config, root: &Path, args: EvalArgs) -> Result<()> {
    let ckpt = args.ckpt.unwrap_or_else(|| root.join("ckpt"));
    let methods: Vec<String> = match &args.methods {
        Some(raw) => parse_list(raw, "method name")?,
        None => cfg.eval.methods.clone(),
    };
    let budgets: Vec<usize> = match &args.budgets {
        Some(raw) => parse_list(raw, "budget")?,
        None => cfg.eval.budgets.clone(),
    };
    if methods.is_empty() || budgets.is_empty() {
        return Err(Error::Config("eval needs at least one method and one budget".into()));
    }
    // Reject unknown names before any heavy setup.
    for name in &methods {
        method_uses_budget(name)?;
    }

    let prior = load_model(&ckpt, "prior", PriorModel::from_params)?;
    let aap = load_model(&ckpt, "aap", AapModel::from_params)?;
    let aip = load_model(&ckpt, "aip", AipModel::from_params)?;

    // Comparison-only models are trained on demand, deterministically.
    let similarity = if methods.iter().any(|m| m == "where2act-adaptation") {
        let d = &cfg.data;
        let ds = collect_random_episodes(
            &d.categories,
            d.n_scenes,
            d.k_interactions,
            d.eval_records,
            d.task,
            d.n_points,
            derive_seed(cfg.run.seed, SIM_DATA_SALT),
        )?;
        Some(train_similarity(
            &prior,
            &ds,
            cfg.train.aap_epochs,
            cfg.train.batch,
            cfg.train.lr,
            derive_seed(cfg.run.seed, SIM_INIT_SALT),
        )?)
    } else {
        None
    };
    let one_shot = if methods.iter().any(|m| m == "where2act-interaction") {
        Some(train_one_shot_branch(
            &prior,
            &cfg.train_config(),
            derive_seed(cfg.run.seed, BRANCH_INIT_SALT),
        )?)
    } else {
        None
    };

    let ctx = EvalContext {
        prior,
        aap,
        aip,
        similarity,
        one_shot,
        task: cfg.data.task,
        n_points: cfg.data.n_points,
        tau: cfg.adapt.tau,
        stop_threshold: cfg.adapt.stop_threshold,
        trials: cfg.eval.trials,
        f_records: cfg.eval.f_records,
    };
    let scenes = eval_scenes(&cfg.data.categories, cfg.eval.n_scenes, cfg.run.seed);

    let mut reports: Vec<EvalReport> = Vec::new();
    for name in &methods {
        if method_uses_budget(name)? {
            for &budget in &budgets {
                reports.push(run_method(&ctx, name, &scenes, budget, cfg.run.seed)?);
            }
        } else {
            // Budget-independent: one row, recorded at budget zero.
            reports.push(run_method(&ctx, name, &scenes, 0, cfg.run.seed)?);
        }
    }

    let out = args.out.unwrap_or_else(|| root.join("eval_report.csv"));
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(&out, reports_to_csv(&reports))?;

    let mut m = open_manifest(root, cfg);
    m.record_seed("eval", cfg.run.seed);
    m.record_file("eval_report", &out)?;
    save_manifest(root, m)?;
    print!("{}", reports_table(&reports));
    println!("report -> {}", out.display());
    Ok(())
}

fn cmd_export(cfg: &Config, root: &Path, args: ExportArgs) -> Result<()> {
    let ckpt = args.ckpt.unwrap_or_else(|| root.join("ckpt"));
    let (category, scene_seed) = scene_choice(cfg, &args.category, args.scene_seed)?;
    let scene = sample_scene(category, scene_seed);
    let obs = Arc::new(render(&scene, cfg.data.n_points, 0)?);

    let mut cache = FeatureCache::new();
    let scores = match args.model.as_str() {
        "prior" => {
            let model = load_model(&ckpt, "prior", PriorModel::from_params)?;
            model.affordance_map(model.features(&mut cache, &obs))
        }
        _ => {
            let model = load_model(&ckpt, "aap", AapModel::from_params)?;
            model.affordance_map(model.features(&mut cache, &obs), &Tensor::zeros(1, LATENT_DIM))
        }
    };

    let out = args.out.unwrap_or_else(|| root.join("heatmap.csv"));
    write_heatmap_csv(&out, &obs.points_world, &scores)?;
    let mut m = open_manifest(root, cfg);
    m.record_file("heatmap_csv", &out)?;
    if let Some(image) = &args.image {
        write_heatmap_pgm(image, &obs.points_cam, &scores, args.side)?;
        m.record_file("heatmap_image", image)?;
    }
    save_manifest(root, m)?;
    println!("heatmap: {:?} scene {scene_seed}, {} points -> {}", category, obs.len(), out.display());
    Ok(())
}
