use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deepexe::asm::{corpus_tokens, listing_graphs, parse_listing, train_vocab, Vocab, DEFAULT_V_MAX};
use deepexe::executor::run_executor;
use deepexe::graph::{read_graph_file, write_graph_file, CfgGraph};
use deepexe::harness::{generate_dataset, split, Gcn, GcnConfig, SyntheticSpec};
use deepexe::nn::{finite_diff_check, Precision, Tensor};
use deepexe::solver::{anderson, SolverConfig};
use deepexe::training::{
    bce_grad, bce_loss, evaluate, load_checkpoint, read_manifest, save_checkpoint, AdamConfig, Classifier, Mode, Model,
    ModelConfig, PreparedGraph, TrainConfig, Trainer,
};

/// Exit-code classes besides success and usage errors.
enum Failure {
    Data(String),
    Numeric(String),
}

impl From<deepexe::Error> for Failure {
    fn from(e: deepexe::Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

/// Prefixes the file name to errors from reading or writing `path`.
fn at(path: &Path) -> impl FnOnce(deepexe::Error) -> Failure + '_ {
    move |e| match Failure::from(e) {
        Failure::Data(m) => Failure::Data(format!("{}: {m}", path.display())),
        numeric => numeric,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "deepexe", version, about = "Agent-guided equilibrium GNN over binary control flow graphs")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Subword vocabulary tools.
    #[command(subcommand)]
    Vocab(VocabCommand),
    /// Parse an assembly listing into graph JSON.
    Parse {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Join all functions of the listing into one graph through direct calls.
        #[arg(long)]
        merge: bool,
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=1))]
        label: Option<u8>,
        #[arg(long, default_value_t = DEFAULT_V_MAX)]
        v_max: usize,
    },
    /// Generate a synthetic dataset from a spec file.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier and write per-epoch metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labelled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Use the final parameters instead of the best-AUC snapshot.
        #[arg(long)]
        last: bool,
    },
    /// Compare analytic and finite-difference gradients on a small random model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare Anderson and plain iteration on a random well-posed model.
    Solvercheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum VocabCommand {
    /// Train a vocabulary on every listing in a directory.
    Train {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Deepexe,
    Gcn,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args)]
struct TrainArgs {
    /// Labelled graph file.
    #[arg(long)]
    data: PathBuf,
    /// Separate eval set; without it `--data` is split.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long, default_value_t = 0.75)]
    split: f64,
    #[arg(long, value_enum, default_value_t = Kind::Deepexe)]
    model: Kind,
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 192)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    precision: PrecisionArg,
    /// Defaults to one past the largest token id in the data.
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long)]
    dropout: Option<f64>,
    /// Write executor traces of the eval graphs as JSON.
    #[arg(long)]
    dump_traces: Option<PathBuf>,
    /// Write forward-solver residual histories of the eval graphs as CSV.
    #[arg(long)]
    dump_solver: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Vocab(VocabCommand::Train { input, size, out }) => vocab_train(&input, size, &out),
        Command::Parse { input, vocab, out, merge, label, v_max } => parse(&input, &vocab, &out, merge, label, v_max),
        Command::Generate { spec, out } => generate(&spec, &out),
        Command::Train(args) => train(&args),
        Command::Eval { checkpoint, data, last } => eval(&checkpoint, &data, last),
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::Solvercheck { seed } => solvercheck(seed),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("numeric failure: {m}");
            ExitCode::from(3)
        }
    }
}

fn vocab_train(input: &Path, size: usize, out: &Path) -> Outcome {
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(io_err(input))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut corpus = Vec::new();
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(io_err(f))?;
        let parsed = parse_listing(&text).map_err(at(f))?;
        corpus.extend(corpus_tokens(&parsed));
    }
    let vocab = train_vocab(&corpus, size)?;
    vocab.save(out).map_err(at(out))?;
    println!("{} pieces from {} files", vocab.pieces().len(), files.len());
    Ok(())
}

fn parse(input: &Path, vocab: &Path, out: &Path, merge: bool, label: Option<u8>, v_max: usize) -> Outcome {
    let vocab = Vocab::load(vocab).map_err(at(vocab))?;
    let text = std::fs::read_to_string(input).map_err(io_err(input))?;
    let graphs = listing_graphs(&text, &vocab, v_max, merge, label).map_err(at(input))?;
    write_graph_file(&graphs, out).map_err(at(out))?;
    println!("{} graphs", graphs.len());
    Ok(())
}

fn generate(spec: &Path, out: &Path) -> Outcome {
    let text = std::fs::read_to_string(spec).map_err(io_err(spec))?;
    let spec: SyntheticSpec = serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", spec.display())))?;
    let graphs = generate_dataset(&spec)?;
    write_graph_file(&graphs, out).map_err(at(out))?;
    let positives = graphs.iter().filter(|g| g.label == Some(1)).count();
    println!("{} graphs, {positives} positive", graphs.len());
    Ok(())
}

fn prepare(graphs: &[CfgGraph]) -> Vec<PreparedGraph> {
    graphs.iter().map(PreparedGraph::new).collect()
}

fn train(args: &TrainArgs) -> Outcome {
    let data = read_graph_file(&args.data).map_err(at(&args.data))?;
    let (train_set, eval_set) = match &args.eval {
        Some(p) => (data, read_graph_file(p).map_err(at(p))?),
        None => split(&data, args.split, args.seed)?,
    };
    let vocab_size = args.vocab_size.unwrap_or_else(|| {
        train_set.iter().chain(&eval_set).flat_map(|g| g.nodes.iter().flatten()).map(|&t| t as usize + 1).max().unwrap_or(1)
    });
    let train_set = prepare(&train_set);
    let eval_set = prepare(&eval_set);
    let config = TrainConfig {
        adam: AdamConfig { lr: args.lr, ..AdamConfig::default() },
        batch_size: args.batch_size,
        epochs: args.epochs,
        seed: args.seed,
        precision: match args.precision {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        },
        patience: args.patience,
    };
    match args.model {
        Kind::Deepexe => {
            let mut trainer = match &args.resume {
                Some(p) => load_checkpoint::<Model>(p).map_err(at(p))?,
                None => {
                    let mut mc = ModelConfig::new(vocab_size);
                    mc.hidden = args.hidden;
                    mc.embed_dim = args.embed_dim;
                    mc.dropout = args.dropout.unwrap_or(mc.dropout);
                    Trainer::new(config, Model::new(mc, args.seed), &train_set)?
                }
            };
            run_training(&mut trainer, &train_set, &eval_set, args)?;
            let model = trainer.best_model();
            if let Some(p) = &args.dump_traces {
                dump_traces(&model, &eval_set, config.precision, p)?;
            }
            if let Some(p) = &args.dump_solver {
                dump_solver(&model, &eval_set, p)?;
            }
        }
        Kind::Gcn => {
            if args.dump_traces.is_some() || args.dump_solver.is_some() {
                return Err(Failure::Data("--dump-traces and --dump-solver need the deepexe model".into()));
            }
            let mut trainer = match &args.resume {
                Some(p) => load_checkpoint::<Gcn>(p).map_err(at(p))?,
                None => {
                    let mut gc = GcnConfig::new(vocab_size);
                    gc.hidden = args.hidden;
                    gc.embed_dim = args.embed_dim;
                    gc.dropout = args.dropout.unwrap_or(gc.dropout);
                    Trainer::new(config, Gcn::new(gc, args.seed), &train_set)?
                }
            };
            run_training(&mut trainer, &train_set, &eval_set, args)?;
        }
    }
    Ok(())
}

fn run_training<M: Classifier>(
    trainer: &mut Trainer<M>,
    train_set: &[PreparedGraph],
    eval_set: &[PreparedGraph],
    args: &TrainArgs,
) -> Outcome {
    // Write whatever finished before a failure.
    let result = trainer.fit(train_set, eval_set);
    std::fs::write(&args.metrics, trainer.metrics_csv()).map_err(io_err(&args.metrics))?;
    if let Some(p) = &args.checkpoint {
        save_checkpoint(trainer, p).map_err(at(p))?;
    }
    result?;
    if let Some(last) = trainer.history.last() {
        let r = &last.report;
        println!("epoch {} {:?}: loss {:.4} acc {:.4} auc {:.4}", last.epoch, last.split, last.loss, r.accuracy, r.auc);
    }
    if let Some(b) = &trainer.best {
        println!("best eval auc {:.4} at epoch {}", b.auc, b.epoch);
    }
    Ok(())
}

fn dump_traces(model: &Model, graphs: &[PreparedGraph], precision: Precision, out: &Path) -> Outcome {
    let tol = match precision {
        Precision::F32 => 1e-5,
        Precision::F64 => 1e-8,
    };
    let mut traces = Vec::with_capacity(graphs.len());
    for g in graphs {
        let (u, _) = model.encode(g)?;
        let (_, noise) = model.draw_randomness(g.len(), Mode::Eval, 0);
        let mask = model.initial_mask(g, &u, &noise);
        let step = model.joint_step(g, &u, &noise, mask.as_deref());
        traces.push(run_executor(&step, &g.id, &g.exits, tol)?.1);
    }
    let text = serde_json::to_string_pretty(&traces).map_err(deepexe::Error::from)?;
    std::fs::write(out, text).map_err(io_err(out))
}

fn dump_solver(model: &Model, graphs: &[PreparedGraph], out: &Path) -> Outcome {
    let mut csv = String::from("graph_id,iter,residual\n");
    for g in graphs {
        let (_, cache) = model.forward(g, Mode::Eval, 0)?;
        for (i, r) in cache.solver.residuals.iter().enumerate() {
            let _ = writeln!(csv, "{},{},{r:e}", g.id, i + 1);
        }
    }
    std::fs::write(out, csv).map_err(io_err(out))
}

fn eval(checkpoint: &Path, data: &Path, last: bool) -> Outcome {
    let graphs = prepare(&read_graph_file(data).map_err(at(data))?);
    let kind = read_manifest(checkpoint).map_err(at(checkpoint))?.kind;
    let report = match kind.as_str() {
        "deepexe" => eval_with(&load_checkpoint::<Model>(checkpoint).map_err(at(checkpoint))?, &graphs, last)?,
        "gcn" => eval_with(&load_checkpoint::<Gcn>(checkpoint).map_err(at(checkpoint))?, &graphs, last)?,
        other => return Err(Failure::Data(format!("unknown model kind `{other}`"))),
    };
    println!("{report}");
    Ok(())
}

fn eval_with<M: Classifier>(trainer: &Trainer<M>, graphs: &[PreparedGraph], last: bool) -> Result<String, Failure> {
    let model = if last { trainer.model.clone() } else { trainer.best_model() };
    let (loss, report) = evaluate(&model, graphs)?;
    let mut value = serde_json::to_value(report).map_err(deepexe::Error::from)?;
    value["loss"] = loss.into();
    Ok(serde_json::to_string_pretty(&value).map_err(deepexe::Error::from)?)
}

/// A tiny graph (3 or 4 nodes, 1–2 tokens per block) and a model with
/// `h ≤ 8`, projected onto the well-posed set.
fn tiny_problem(seed: u64, hidden: usize) -> Result<(Model, PreparedGraph), Failure> {
    let mut spec = SyntheticSpec::new(1, 0, false, seed);
    spec.node_count_range = [3, 4];
    spec.vocab_size = 12;
    spec.tokens_per_block = [1, 2];
    let g = PreparedGraph::new(&generate_dataset(&spec)?[0]);
    let mut mc = ModelConfig::new(spec.vocab_size);
    mc.hidden = hidden;
    mc.embed_dim = 4;
    mc.dropout = 0.0;
    let mut model = Model::new(mc, seed);
    model.project(g.pf_eigenvalue());
    Ok((model, g))
}

fn gradcheck(seed: u64) -> Outcome {
    let (mut model, g) = tiny_problem(seed, 4 + (seed % 5) as usize)?;
    // plain iterations with no early exit keep the loss smooth in θ
    model.config.solver = SolverConfig { naive: true, tol: 0.0, max_iter: 300, ..SolverConfig::default() };
    let y = f64::from(g.label.unwrap_or(0));
    let (logit, cache) = model.forward(&g, Mode::Train, seed)?;
    let (grads, _) = model.backward(&g, &cache, bce_grad(logit, y))?;
    let (config, ids) = (model.config, model.ids);
    let report = finite_diff_check(&mut model.store, &grads, 1e-5, |store| {
        let m = Model { config, store: store.clone(), ids };
        Ok(bce_loss(m.forward(&g, Mode::Train, seed)?.0, y))
    })?;
    let err = report.max_rel_error();
    let worst = report.worst().map(|w| w.name.clone()).unwrap_or_default();
    println!("max relative error {err:.3e} ({worst})");
    if err < 1e-4 {
        Ok(())
    } else {
        Err(Failure::Numeric(format!("gradient check failed: {err:.3e} ≥ 1e-4")))
    }
}

fn solvercheck(seed: u64) -> Outcome {
    let (model, g) = tiny_problem(seed, 8)?;
    let tight = SolverConfig { tol: 1e-10, max_iter: 2000, ..SolverConfig::default() };
    let (_, fast) = model.forward_with(&g, Mode::Eval, 0, None, &tight)?;
    let (_, slow) = model.forward_with(&g, Mode::Eval, 0, None, &SolverConfig { naive: true, ..tight })?;
    let gap = fast.x_star().data().iter().zip(slow.x_star().data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!(
        "model: anderson {} iterations, naive {} iterations, max |Δx*| {gap:.2e}",
        fast.solver.iterations, slow.solver.iterations
    );

    let x0 = Tensor::from_vec(&[1], vec![0.0])?;
    let cos = anderson(|x| Ok(x.map(f64::cos)), &x0, &SolverConfig { tol: 1e-10, ..SolverConfig::default() })?;
    println!("cos: x* = {:.9} in {} iterations", cos.x_star.data()[0], cos.iterations);

    let ok = fast.solver.converged && slow.solver.converged && gap < 1e-5 && cos.converged;
    if ok {
        Ok(())
    } else {
        Err(Failure::Numeric("solvers disagree or did not converge".into()))
    }
}
