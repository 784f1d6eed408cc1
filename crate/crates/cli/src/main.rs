use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gsnet::data::{read_json, synthesize_poses, write_json_atomic, zero_center_root, DatasetFile};
use gsnet::filter::{solve, FilterConfig, SolveMethod, SolveReport};
use gsnet::graph::{
    human36m_topology, laplacian, normalize_adjacency, triangular_split, H36mVariant, SkeletonGraph,
};
use gsnet::linalg::{from_rows, spectral_radius_triangular, symmetric_eigenvalues, to_rows};
use gsnet::metrics::{evaluate, format_action_table};
use gsnet::net::gradcheck::{fixture, fixture_with, DEFAULT_STEP, DEFAULT_TOLERANCE};
use gsnet::net::model::{BlockStyle, ModelConfig};
use gsnet::net::train::{predict_mm, Checkpoint, TrainConfig, Trainer};
use gsnet::Mat;

#[derive(Parser)]
#[command(name = "gsnet", version, about = "Gauss-Seidel graph filtering and GS-Net pose lifting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve (I + βL)H = X for a feature matrix on a skeleton graph.
    Filter(FilterArgs),
    /// Train a GS-Net lifting model, or resume from a checkpoint.
    Train(TrainArgs),
    /// Score 3D predictions against a dataset.
    Eval(EvalArgs),
    /// Compare backpropagated gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Eigenvalue ranges of L and I + βL for a topology.
    Spectrum(SpectrumArgs),
    /// Generate a deterministic synthetic pose dataset.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Exact,
    Approx,
    Direct,
}

impl From<Method> for SolveMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Exact => SolveMethod::Exact,
            Method::Approx => SolveMethod::Approx,
            Method::Direct => SolveMethod::Direct,
        }
    }
}

/// Topology source shared by several subcommands.
#[derive(Args)]
struct TopologyArgs {
    /// Topology JSON file. Defaults to the Human3.6M skeleton.
    #[arg(long)]
    topology: Option<PathBuf>,
    /// Human3.6M joint count when no topology file is given (16 or 17).
    #[arg(long, default_value_t = 17)]
    joints: usize,
}

impl TopologyArgs {
    fn graph(&self) -> Result<SkeletonGraph> {
        match &self.topology {
            Some(p) => Ok(SkeletonGraph::load(p)?),
            None => Ok(human36m_topology(H36mVariant::from_joint_count(self.joints)?)),
        }
    }
}

#[derive(Args)]
struct FilterArgs {
    /// Feature matrix as a JSON array of rows, one row per joint.
    #[arg(long)]
    features: PathBuf,
    #[command(flatten)]
    topology: TopologyArgs,
    #[arg(long, default_value_t = 0.2)]
    beta: f64,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    #[arg(long, value_enum, default_value_t = Method::Exact)]
    method: Method,
    /// Output JSON; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written after every epoch.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint. Model flags are then ignored.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 384)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long, default_value_t = 0.2)]
    beta: f64,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long, default_value_t = 0.005)]
    lr: f64,
    #[arg(long, default_value_t = 0.65)]
    lr_decay: f64,
    /// Epochs between learning-rate decays.
    #[arg(long, default_value_t = 4)]
    decay_every: usize,
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
    /// Total epochs (including those already in a resumed checkpoint).
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = BlockStyle::LayernormGelu)]
    block_style: BlockStyle,
    #[arg(long, default_value_t = 1024)]
    refine_hidden: usize,
    #[arg(long)]
    no_nonlocal: bool,
    #[arg(long)]
    no_refine: bool,
    #[arg(long)]
    no_skip: bool,
    #[arg(long)]
    no_adj_modulation: bool,
    #[arg(long)]
    no_weight_modulation: bool,
    /// Use Q as learned instead of (Q + Qᵀ)/2.
    #[arg(long)]
    no_symmetrize: bool,
    /// One Q per layer instead of one shared Q.
    #[arg(long)]
    per_layer_q: bool,
}

impl TrainArgs {
    fn model_config(&self, num_joints: usize) -> ModelConfig {
        ModelConfig {
            num_joints,
            channels: self.channels,
            num_blocks: self.blocks,
            dropout_rate: self.dropout,
            alpha: self.alpha,
            beta: self.beta,
            use_nonlocal: !self.no_nonlocal,
            use_refinement: !self.no_refine,
            block_style: self.block_style,
            skip_connection: !self.no_skip,
            weight_modulation: !self.no_weight_modulation,
            adj_modulation: !self.no_adj_modulation,
            symmetrize: !self.no_symmetrize,
            per_layer_q: self.per_layer_q,
            refine_hidden: self.refine_hidden,
            ..ModelConfig::default()
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs.unwrap_or(TrainConfig::default().epochs),
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay: self.lr_decay,
            decay_every: self.decay_every,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["pred", "checkpoint"]))]
struct EvalArgs {
    /// Dataset holding the ground-truth 3D poses.
    #[arg(long)]
    data: PathBuf,
    /// Predictions: a JSON array of N×3 poses in millimetres, in record order.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Predict with this trained model instead.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Report JSON; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also print the per-action table.
    #[arg(long)]
    table: bool,
    /// Write the model's predictions here (with --checkpoint).
    #[arg(long, requires = "checkpoint")]
    write_pred: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Fixture seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tol: f64,
    #[arg(long, default_value_t = BlockStyle::LayernormGelu)]
    block_style: BlockStyle,
}

#[derive(Args)]
struct SpectrumArgs {
    #[command(flatten)]
    topology: TopologyArgs,
    #[arg(long, default_value_t = 0.2)]
    beta: f64,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of poses.
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    topology: TopologyArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct FilterOutput<'a> {
    solution: Vec<Vec<f64>>,
    report: &'a SolveReport,
}

fn write_or_print<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(p) => write_json_atomic(p, value)?,
        None => println!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}

fn run_filter(args: &FilterArgs) -> Result<()> {
    let graph = args.topology.graph()?;
    let rows: Vec<Vec<f64>> = read_json(&args.features)?;
    let x = from_rows(&rows)?;
    let cfg = FilterConfig::new(args.beta, args.tol, args.max_iters)?;
    let split = triangular_split(&normalize_adjacency(&graph.adjacency()), cfg.beta)?;
    let report = solve(&x, &split, &cfg, args.method.into())?;
    if !report.converged {
        log::warn!(
            "not converged after {} iterations (residual {:.3e})",
            report.iterations,
            report.final_residual
        );
    }
    let out = FilterOutput {
        solution: to_rows(&report.solution),
        report: &report,
    };
    write_or_print(args.out.as_deref(), &out)
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let dataset = DatasetFile::load(&args.data)?;
    let mut trainer = match &args.checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let mut t = Trainer::from_checkpoint(ckpt).with_context(|| format!("resuming from {}", p.display()))?;
            if let Some(e) = args.epochs {
                t.set_epochs(e);
            }
            t
        }
        None => {
            let n = dataset.graph()?.num_joints();
            Trainer::new(&dataset, args.model_config(n), args.train_config())?
        }
    };
    let data = trainer.data(&dataset)?;
    while !trainer.done() {
        trainer.run_epoch(&data)?;
        trainer.checkpoint().save(&args.out)?;
    }
    match trainer.history().last() {
        Some(r) => println!(
            "epoch {} loss {:.6} train MPJPE {:.2} mm",
            r.epoch, r.train_loss, r.mpjpe_mm
        ),
        None => println!("nothing to do: {} epochs already done", trainer.epochs_done()),
    }
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let dataset = DatasetFile::load(&args.data)?;
    let graph = dataset.graph()?;
    let records = zero_center_root(&dataset.records, graph.root_index());
    let targets: Vec<Mat> = records.iter().map(|r| r.pose3d_mat()).collect();

    let pred = if let Some(p) = &args.pred {
        let poses: Vec<Vec<Vec<f64>>> = read_json(p)?;
        poses.iter().map(|rows| from_rows(rows)).collect::<gsnet::Result<Vec<_>>>()?
    } else {
        let path = args.checkpoint.as_ref().expect("clap requires --pred or --checkpoint");
        let trainer = Trainer::from_checkpoint(Checkpoint::load(path)?)?;
        let data = trainer.data(&dataset)?;
        let pred = predict_mm(trainer.model(), &data.inputs, trainer.norm(), data.root_index)?;
        if let Some(out) = &args.write_pred {
            let rows: Vec<Vec<Vec<f64>>> = pred.iter().map(to_rows).collect();
            write_json_atomic(out, &rows)?;
        }
        pred
    };
    if pred.len() != targets.len() {
        bail!("{} predictions for {} records", pred.len(), targets.len());
    }

    let actions: Vec<Option<String>> = records.iter().map(|r| r.action.clone()).collect();
    let has_actions = actions.iter().any(Option::is_some);
    let report = evaluate(&pred, &targets, has_actions.then_some(&actions[..]))?;
    write_or_print(args.out.as_deref(), &report)?;
    if args.table {
        print!("{}", format_action_table(&report));
    }
    Ok(())
}

/// Returns whether every group passed.
fn run_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let mut problem = match args.block_style {
        BlockStyle::LayernormGelu => fixture(args.seed)?,
        BlockStyle::BatchnormRelu => {
            let base = fixture(args.seed)?;
            let config = ModelConfig {
                block_style: BlockStyle::BatchnormRelu,
                ..base.model.config().clone()
            };
            let topology = SkeletonGraph::new_tree(5, &[(0, 1), (1, 2), (0, 3), (3, 4)], 0)?;
            fixture_with(config, &topology, args.seed)?
        }
    };
    let report = problem.run(args.step, args.tol)?;
    println!("{:<10} {:>8} {:>14}  worst", "group", "entries", "max rel err");
    for g in &report.groups {
        let flag = if g.max_rel_error > report.tolerance { "  FAIL" } else { "" };
        println!("{:<10} {:>8} {:>14.3e}  {}{flag}", g.group, g.entries, g.max_rel_error, g.worst);
    }
    println!("max {:.3e} (tolerance {:.0e})", report.max_rel_error(), report.tolerance);
    Ok(report.passed())
}

fn run_spectrum(args: &SpectrumArgs) -> Result<()> {
    let graph = args.topology.graph()?;
    let na = normalize_adjacency(&graph.adjacency());
    let l = laplacian(&na);
    let split = triangular_split(&na, args.beta)?;
    let n = graph.num_joints();
    let ev_l = symmetric_eigenvalues(&l);
    let ev_sys = symmetric_eigenvalues(&split.system_matrix());
    let radius = spectral_radius_triangular(&(split.lower() - Mat::identity(n, n) * args.beta))?;
    let range = |v: &[f64]| (v[0], v[v.len() - 1]);
    let (lo, hi) = range(&ev_l);
    println!("joints       {n}");
    println!("L            [{lo:.12}, {hi:.12}]");
    let (lo, hi) = range(&ev_sys);
    println!("I+{}L       [{lo:.12}, {hi:.12}]  bound [1, {}]", args.beta, 1.0 + 2.0 * args.beta);
    println!("rho(Uᵀ-βI)   {radius:.12}");
    Ok(())
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let graph = args.topology.graph()?;
    let ds = synthesize_poses(&graph, args.n, args.seed)?;
    ds.save(&args.out)?;
    println!("wrote {} poses ({} joints) to {}", args.n, graph.num_joints(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Filter(a) => run_filter(a).map(|_| true),
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Eval(a) => run_eval(a).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Spectrum(a) => run_spectrum(a).map(|_| true),
        Command::Synth(a) => run_synth(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
