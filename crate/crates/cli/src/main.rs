use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ddkit::ca2d::{self, Ca2dConfig, PatchScorer};
use ddkit::dcs::{self, DcsRecordSet, ErrorTable};
use ddkit::io::{long_format_report, round_sig9, write_atomic};
use ddkit::objectives::{self, LayerStats, NormKind};
use ddkit::scaling::{self, MetricKind, TrainingCurve};
use ddkit::scores::{self, CadBase, EpochRange, ScoreMethod, ScoreParams, ScoreTable};
use ddkit::select::{self, SortOrder, SubsetSpec};
use ddkit::trajstore::{self, Scenario, SyntheticSpec};
use ddkit::{ErrorClass, Result as CoreResult};

#[derive(Parser)]
#[command(
    name = "ddkit",
    version,
    about = "Dataset-distillation toolkit: scores, coresets, objectives, scaling fits"
)]
struct Cli {
    /// Default seed for every seeded step.
    #[arg(long, global = true, env = "DDKIT_SEED", default_value_t = 0)]
    seed: u64,

    /// Worker threads for per-sample and per-class loops.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a seeded synthetic trajectory store.
    SynthTraj(SynthArgs),
    /// Check a trajectory store and print its summary.
    Validate { store: PathBuf },
    /// Per-sample importance scores.
    Score(ScoreArgs),
    /// Class-balanced subset selection.
    Select(SelectArgs),
    /// Enumerate every difficulty window of size ipc.
    SlidingWindow(SlidingArgs),
    /// Mark the per-ipc best configurations.
    Pareto {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a distillation objective on exported artifacts.
    #[command(subcommand)]
    Objective(ObjectiveCmd),
    /// Rank correlation between losses and generalization errors.
    Dcs {
        #[arg(long)]
        errors: PathBuf,
        #[arg(long)]
        losses: PathBuf,
        #[arg(long)]
        adjust_size: bool,
        #[arg(long, default_value = "objective")]
        objective: String,
    },
    /// Maintain the generalization-error lookup table.
    #[command(subcommand)]
    ErrorTable(ErrorTableCmd),
    /// Fit the data-aware scaling law to a training curve.
    FitScaling {
        #[arg(long)]
        curve: PathBuf,
        #[arg(long, default_value = "error")]
        metric: MetricKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a patch-stitched distilled image set.
    Distill(DistillArgs),
    /// Melt CSV outputs into one long-format CSV.
    Report {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value = "late-learner")]
    scenario: Scenario,
    /// Also render one toy PNG per sample into this directory.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    image_size: u32,
}

#[derive(Args, Clone, Copy)]
struct WindowArgs {
    /// Uncertainty window length.
    #[arg(long = "J", default_value_t = 6)]
    j: usize,
    /// Number of trailing windows averaged.
    #[arg(long = "W", default_value_t = 2)]
    w: usize,
    /// Epoch budget; defaults to every stored epoch.
    #[arg(long = "K")]
    k: Option<usize>,
    /// Softmax temperature.
    #[arg(long = "T", default_value_t = 1.0)]
    t: f64,
}

impl WindowArgs {
    /// Checks that do not need the store, run before any loading.
    fn precheck(&self) -> CoreResult<()> {
        let probe = ScoreParams {
            temperature: self.t,
            window: self.j,
            width: self.w,
            budget: usize::MAX,
        };
        probe.validate(usize::MAX).map(|_| ())
    }

    fn params(&self, epochs: usize) -> ScoreParams {
        ScoreParams {
            temperature: self.t,
            window: self.j,
            width: self.w,
            budget: self.k.unwrap_or(epochs),
        }
    }
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    method: ScoreMethod,
    #[command(flatten)]
    window: WindowArgs,
    #[arg(long, default_value = "el2n")]
    base: CadBase,
    /// First epoch (inclusive) for EL2N-style averages.
    #[arg(long)]
    start: Option<usize>,
    /// Last epoch (inclusive) for EL2N-style averages.
    #[arg(long)]
    end: Option<usize>,
    /// Score CSV path; a JSON sidecar is written next to it. Prints to stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value = "window")]
    method: String,
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    ipc: usize,
    #[arg(long, default_value_t = 0.0)]
    quantile: f64,
    #[arg(long, default_value = "ascending")]
    order: SortOrder,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SlidingArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    ipc: usize,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum ObjectiveCmd {
    /// Normalized trajectory-matching loss, averaged over pairs.
    Tm {
        /// JSON index of `theta_<tag>.bin` files.
        #[arg(long)]
        index: PathBuf,
        /// `start,target,student` tags; repeat for several pairs.
        #[arg(long = "pair", required = true)]
        pairs: Vec<String>,
    },
    /// BatchNorm statistic matching.
    Bn {
        #[arg(long)]
        stats: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        lambda_var: f64,
        /// Use squared L2 distances.
        #[arg(long)]
        squared: bool,
    },
    /// Mean-embedding matching.
    Dm {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synthetic: PathBuf,
    },
    /// Layerwise cosine gradient matching.
    Dc {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synthetic: PathBuf,
    },
}

#[derive(Subcommand)]
enum ErrorTableCmd {
    Upsert {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        subset_id: String,
        #[arg(long)]
        gen_error: f64,
        #[arg(long)]
        subset_size: u64,
    },
    Show {
        #[arg(long)]
        table: PathBuf,
    },
}

#[derive(Args)]
struct DistillArgs {
    /// Trajectory store used for CAD selection (not needed with --subset).
    #[arg(long, required_unless_present = "subset")]
    store: Option<PathBuf>,
    /// Distill an existing subset instead of selecting one.
    #[arg(long)]
    subset: Option<PathBuf>,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ipc: usize,
    #[arg(long)]
    factor: u32,
    #[arg(long)]
    resolution: u32,
    /// `sharpness`, `file:<csv>` or `cmd:<shell command>`.
    #[arg(long, default_value = "sharpness")]
    scorer: String,
    #[arg(long, default_value_t = 16)]
    candidates: usize,
    #[command(flatten)]
    window: WindowArgs,
    #[arg(long, default_value = "el2n")]
    base: CadBase,
    #[arg(long, default_value_t = 0.0)]
    quantile: f64,
    #[arg(long, default_value = "descending")]
    order: SortOrder,
}

fn parse_scorer(spec: &str) -> Result<PatchScorer> {
    if spec == "sharpness" {
        Ok(PatchScorer::Sharpness)
    } else if let Some(path) = spec.strip_prefix("file:") {
        Ok(PatchScorer::FileScores(PathBuf::from(path)))
    } else if let Some(cmd) = spec.strip_prefix("cmd:") {
        Ok(PatchScorer::ExternalCommand(cmd.to_string()))
    } else {
        Err(ddkit::Error::InvalidParameter(format!("unknown scorer `{spec}`")).into())
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn json_line(value: serde_json::Value) {
    println!("{value}");
}

fn run_score(args: &ScoreArgs) -> Result<()> {
    args.window.precheck()?;
    let traj = trajstore::load_trajectory(&args.store)?;
    let range = EpochRange::new(args.start.unwrap_or(0), args.end.unwrap_or(traj.epochs() - 1));
    let table = match args.method {
        ScoreMethod::El2n => scores::el2n(&traj, range)?,
        ScoreMethod::El2nSl => scores::el2n_sl(&traj, args.window.t, range)?,
        ScoreMethod::Forgetting => scores::forgetting(&traj)?,
        ScoreMethod::DynUnc => scores::dyn_unc(&traj, args.window.j)?,
        ScoreMethod::Cad => scores::cad_prune(&traj, &args.window.params(traj.epochs()), args.base)?,
        ScoreMethod::Imported => bail!(ddkit::Error::InvalidParameter(
            "`imported` is not a computable method".into()
        )),
    };
    match &args.out {
        Some(path) => table.write(path)?,
        None => print!("{}", table.to_csv()),
    }
    Ok(())
}

fn run_select(args: &SelectArgs, seed: u64) -> Result<()> {
    let traj = trajstore::load_trajectory(&args.store)?;
    let subset = match args.method.as_str() {
        "random" => select::select_random(&traj, args.ipc, seed)?,
        "window" => {
            let path = args
                .scores
                .as_ref()
                .ok_or_else(|| ddkit::Error::InvalidParameter("window selection needs --scores".into()))?;
            let table = ScoreTable::read(path)?;
            select::select_window(&table, &traj, args.ipc, args.quantile, args.order)?
        }
        other => bail!(ddkit::Error::InvalidParameter(format!(
            "unknown selection method `{other}`"
        ))),
    };
    match &args.out {
        Some(path) => subset.write(path)?,
        None => print!("{}", subset.to_csv()),
    }
    Ok(())
}

fn run_sliding(args: &SlidingArgs) -> Result<()> {
    let traj = trajstore::load_trajectory(&args.store)?;
    let table = ScoreTable::read(&args.scores)?;
    let stride = args.stride.unwrap_or_else(|| select::default_stride(&traj));
    let windows = select::sliding_window_enumerate(&table, &traj, args.ipc, stride)?;
    let mut index = String::from("window,offset,file\n");
    for (i, subset) in windows.iter().enumerate() {
        let offset = subset.provenance.window_offset.unwrap_or(i * stride);
        let file = format!("window_{offset:06}.csv");
        subset.write(&args.out_dir.join(&file))?;
        index.push_str(&format!("{i},{offset},{file}\n"));
    }
    write_atomic(&args.out_dir.join("windows.csv"), index.as_bytes())?;
    print!("{index}");
    Ok(())
}

fn parse_pair(s: &str) -> Result<(i64, i64, i64)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || ddkit::Error::InvalidParameter(format!("--pair expects `start,target,student` tags, got `{s}`"));
    if parts.len() != 3 {
        return Err(bad().into());
    }
    let tag = |p: &str| p.parse::<i64>().map_err(|_| bad());
    Ok((tag(parts[0])?, tag(parts[1])?, tag(parts[2])?))
}

fn run_objective(cmd: &ObjectiveCmd) -> Result<()> {
    let (name, loss, extra) = match cmd {
        ObjectiveCmd::Tm { index, pairs } => {
            let triples = pairs.iter().map(|p| parse_pair(p)).collect::<Result<Vec<_>>>()?;
            let loss = objectives::tm_from_index(index, &triples)?;
            ("tm", loss, json!({ "pairs": triples.len() }))
        }
        ObjectiveCmd::Bn {
            stats,
            lambda_var,
            squared,
        } => {
            let stats = LayerStats::read_json(stats)?;
            let norm = if *squared { NormKind::SquaredL2 } else { NormKind::L2 };
            let loss = objectives::bn_matching_loss_with(&stats, *lambda_var, norm)?;
            (
                "bn",
                loss,
                json!({ "lambda_var": lambda_var, "squared": squared, "layers": stats.layers.len() }),
            )
        }
        ObjectiveCmd::Dm { real, synthetic } => {
            let loss = objectives::dm_loss(
                &objectives::read_feature_batches(real)?,
                &objectives::read_feature_batches(synthetic)?,
            )?;
            ("dm", loss, json!({}))
        }
        ObjectiveCmd::Dc { real, synthetic } => {
            let loss = objectives::dc_loss(
                &objectives::read_grad_vectors(real)?,
                &objectives::read_grad_vectors(synthetic)?,
            )?;
            ("dc", loss, json!({ "distance": "layerwise_cosine" }))
        }
    };
    let mut report = json!({ "objective": name, "loss": round_sig9(loss) });
    if let (Some(obj), Some(more)) = (report.as_object_mut(), extra.as_object()) {
        obj.extend(more.clone());
    }
    json_line(report);
    Ok(())
}

fn run_dcs(errors: &Path, losses: &Path, adjust: bool, objective: &str) -> Result<()> {
    if !errors.exists() {
        bail!(ddkit::Error::MissingFile(errors.to_path_buf()));
    }
    let table = ErrorTable::load(errors)?;
    let losses = dcs::read_losses(losses)?;
    let set = DcsRecordSet::join(objective, &table, &losses)?;
    let report = dcs::dcs(&set, adjust)?;
    json_line(json!({
        "objective": report.objective,
        "n": report.n,
        "rho_raw": round_sig9(report.rho_raw),
        "rho_adjusted": report.rho_adjusted.map(round_sig9),
        "notes": report.notes,
    }));
    Ok(())
}

fn run_fit(curve: &Path, metric: MetricKind, out: Option<&Path>) -> Result<()> {
    let curve = TrainingCurve::read_csv(curve, metric)?;
    let fit = scaling::fit_scaling(&curve, &scaling::default_init_grid())?;
    let value = json!({
        "a": round_sig9(fit.a),
        "b": round_sig9(fit.b),
        "delta": round_sig9(fit.delta),
        "d": round_sig9(fit.d),
        "tau": fit.tau.map(round_sig9),
        "sse": round_sig9(fit.sse),
        "converged": fit.converged,
        "n_observations": fit.n_observations,
        "start_index": fit.start_index,
        "metric": metric.to_string(),
        "notes": fit.notes,
    });
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    emit(out, &text)
}

fn run_distill(args: &DistillArgs, seed: u64) -> Result<()> {
    args.window.precheck()?;
    let scorer = parse_scorer(&args.scorer)?;
    let build_cfg = |epochs: usize| {
        let mut cfg = Ca2dConfig::new(args.window.params(epochs), args.ipc, args.factor, args.resolution, seed);
        cfg.cad_base = args.base;
        cfg.num_candidates = args.candidates;
        cfg.start_quantile = args.quantile;
        cfg.order = args.order;
        cfg
    };
    let set = if let Some(subset_path) = &args.subset {
        let subset = SubsetSpec::read(subset_path)?;
        let cfg = build_cfg(args.window.k.unwrap_or(0));
        cfg.validate()?;
        ca2d::distill_subset(&subset, &args.images, &cfg, &scorer, &args.out)?
    } else {
        let store = args.store.as_ref().expect("clap enforces --store without --subset");
        let traj = trajstore::load_trajectory(store)?;
        let cfg = build_cfg(traj.epochs());
        cfg.validate()?;
        ca2d::ca2d_pipeline(&traj, &args.images, &cfg, &scorer, &args.out)?.1
    };
    json_line(json!({
        "images": set.images.len(),
        "factor": set.factor,
        "resolution": set.resolution,
        "ipc": set.ipc,
        "manifest": args.out.join(ca2d::MANIFEST_FILE).display().to_string(),
    }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!(ddkit::Error::InvalidParameter("--jobs must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("cannot configure the worker pool")?;
    }
    match cli.command {
        Cmd::SynthTraj(a) => {
            let spec = SyntheticSpec {
                epochs: a.epochs,
                samples: a.samples,
                classes: a.classes,
                seed: cli.seed,
                scenario: a.scenario,
            };
            let traj = trajstore::generate_synthetic(&spec)?;
            trajstore::write_trajectory(&traj, &a.out)?;
            if let Some(dir) = &a.images {
                ca2d::write_toy_images(&traj, dir, a.image_size, cli.seed)?;
            }
            json_line(json!({
                "store": a.out.display().to_string(),
                "E": spec.epochs, "N": spec.samples, "C": spec.classes,
                "scenario": spec.scenario.to_string(),
                "manifest_checksum": traj.manifest_checksum(),
            }));
        }
        Cmd::Validate { store } => {
            let traj = trajstore::load_trajectory(&store)?;
            json_line(json!({
                "valid": true,
                "E": traj.epochs(), "N": traj.samples(), "C": traj.classes(),
                "has_teacher": traj.teacher().is_some(),
                "manifest_checksum": traj.manifest_checksum(),
            }));
        }
        Cmd::Score(a) => run_score(&a)?,
        Cmd::Select(a) => run_select(&a, cli.seed)?,
        Cmd::SlidingWindow(a) => run_sliding(&a)?,
        Cmd::Pareto { points, out } => {
            let frontier = select::pareto_frontier(&select::read_pareto_points(&points)?)?;
            emit(out.as_deref(), &select::pareto_csv(&frontier))?;
        }
        Cmd::Objective(cmd) => run_objective(&cmd)?,
        Cmd::Dcs {
            errors,
            losses,
            adjust_size,
            objective,
        } => run_dcs(&errors, &losses, adjust_size, &objective)?,
        Cmd::ErrorTable(ErrorTableCmd::Upsert {
            table,
            subset_id,
            gen_error,
            subset_size,
        }) => {
            let t = dcs::error_table_upsert(&table, &subset_id, gen_error, subset_size)?;
            json_line(json!({ "table": table.display().to_string(), "records": t.entries.len() }));
        }
        Cmd::ErrorTable(ErrorTableCmd::Show { table }) => {
            if !table.exists() {
                bail!(ddkit::Error::MissingFile(table));
            }
            print!("{}", ErrorTable::load(&table)?.to_csv());
        }
        Cmd::FitScaling { curve, metric, out } => run_fit(&curve, metric, out.as_deref())?,
        Cmd::Distill(a) => run_distill(&a, cli.seed)?,
        Cmd::Report { out, inputs } => emit(out.as_deref(), &long_format_report(&inputs)?)?,
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ddkit::Error>() {
            return match e.class() {
                ErrorClass::Validation => 1,
                ErrorClass::Io => 2,
                ErrorClass::Numerical => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
