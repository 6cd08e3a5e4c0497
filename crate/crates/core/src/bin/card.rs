use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use card_core::analysis::{adapt_checkpoint, CorrelationReport};
use card_core::generator::{generate, GeneratorParams};
use card_core::graph::{parse_matrix, to_grid, to_machine, AnchorKind, AnchorTopology, LabeledMatrix, DEFAULT_TAU};
use card_core::manifest::Manifest;
use card_core::runtime::{run_rounds, Aggregation};
use card_core::sim::{make_config_set, scenario_conditions, sim_utility, task_bank, Scenario, SimEnvironment};
use card_core::training::{evaluate, train_with, CostModel, Estimator, TrainConfig, METRICS_HEADER};
use card_core::{CardError, ConditionSet, Query, Result, Roster};

#[derive(Parser)]
#[command(name = "card", version, about = "Condition-aware communication graphs for agent teams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode the edge-probability matrix and topology for one query.
    Generate(GenerateArgs),
    /// Train the generator against the simulated environment.
    Train(TrainArgs),
    /// Re-decode a topology under changed conditions without retraining.
    Adapt(AdaptArgs),
    /// Execute a generated topology with simulated agents.
    Simulate(SimulateArgs),
    /// Pairwise correlation report over matrix files.
    Report(ReportArgs),
}

#[derive(Args)]
struct GraphOpts {
    /// Execution threshold.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Anchor topology: chain, star or fully-connected.
    #[arg(long, default_value = "chain")]
    anchor: AnchorKind,
    /// Seed used when no checkpoint is given.
    #[arg(long, env = "CARD_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    query: String,
    /// Trained parameters; freshly initialized from --seed when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Print full-precision rows instead of the table layout.
    #[arg(long)]
    machine: bool,
    #[arg(long, env = "CARD_OUT_DIR")]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    graph: GraphOpts,
}

#[derive(Args)]
struct TrainArgs {
    /// weak-model, strong-model, weak-tool, strong-tool or mixed.
    #[arg(long, default_value = "mixed", conflicts_with = "manifest")]
    scenario: Scenario,
    /// Train on the task bank under one manifest's conditions instead.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 0.2)]
    beta: f64,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    /// Sampled graphs per pair and step.
    #[arg(long, default_value_t = 4)]
    samples: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0.9)]
    baseline_decay: f64,
    #[arg(long, default_value_t = 1)]
    k_rounds: usize,
    /// Average over every edge subset instead of sampling.
    #[arg(long)]
    exhaustive: bool,
    /// Start from these parameters instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Also write checkpoint-step-N.txt every N steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Episodes per pair for the before/after summary.
    #[arg(long, default_value_t = 20)]
    eval_episodes: usize,
    #[arg(long, env = "CARD_OUT_DIR", default_value = "card-out")]
    out_dir: PathBuf,
    #[command(flatten)]
    graph: GraphOpts,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    old: PathBuf,
    #[arg(long)]
    new: PathBuf,
    #[arg(long)]
    query: String,
    #[command(flatten)]
    graph: GraphOpts,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value = "mixed", conflicts_with = "manifest")]
    scenario: Scenario,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Task id from the bank, e.g. task-03.
    #[arg(long, default_value = "task-00")]
    task: String,
    #[arg(long, default_value_t = 1)]
    episodes: usize,
    #[arg(long, default_value_t = 1)]
    k_rounds: usize,
    /// vote, select-last or concat-summary.
    #[arg(long, default_value = "vote")]
    aggregation: Aggregation,
    #[arg(long, env = "CARD_OUT_DIR")]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    graph: GraphOpts,
}

#[derive(Args)]
struct ReportArgs {
    /// Two or more matrix files of equal size.
    files: Vec<PathBuf>,
    /// Threshold for the density column.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long)]
    json: bool,
}

fn load_params(checkpoint: Option<&Path>, seed: u64) -> Result<GeneratorParams> {
    match checkpoint {
        Some(p) => GeneratorParams::load(p),
        None => Ok(GeneratorParams::with_default_dims(seed)),
    }
}

fn roles(roster: &Roster) -> Vec<String> {
    roster.iter().map(|a| a.role.clone()).collect()
}

fn io_error(path: &Path) -> impl Fn(std::io::Error) -> CardError + '_ {
    move |source| CardError::Io { path: path.display().to_string(), source }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_error(dir))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_error(path))
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let params = load_params(a.checkpoint.as_deref(), a.graph.seed)?;
    let query = Query::new("query", a.query)?;
    let anchor = AnchorTopology::new(a.graph.anchor, manifest.roster.len())?;
    let (s, topo) = generate(&manifest.roster, &manifest.conditions, &query, &anchor, &params, a.graph.tau)?;
    let labels = roles(&manifest.roster);
    let matrix = LabeledMatrix { labels: labels.clone(), matrix: s.clone() };
    if a.machine {
        print!("{}", to_machine(&s));
    } else {
        print!("{}", to_grid(&matrix));
    }
    println!();
    print!("{}", topo.render(Some(&labels)));
    if let Some(dir) = a.out_dir {
        ensure_dir(&dir)?;
        write_file(&dir.join("matrix.txt"), &to_machine(&s))?;
        write_file(&dir.join("topology.txt"), &topo.render(Some(&labels)))?;
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (roster, pairs, env) = match &a.manifest {
        Some(path) => {
            let m = Manifest::load(path)?;
            let tasks = task_bank();
            let pairs: Vec<(Query, ConditionSet)> =
                tasks.iter().map(|t| (t.to_query(), m.conditions.clone())).collect();
            let env = SimEnvironment::new(m.roster.clone(), &tasks, a.k_rounds, Aggregation::Vote);
            (m.roster, pairs, env)
        }
        None => {
            let set = make_config_set(a.scenario);
            let env = SimEnvironment::from_config_set(&set, a.k_rounds);
            (set.roster, set.pairs, env)
        }
    };
    let cfg = TrainConfig {
        beta: a.beta,
        lr: a.lr,
        samples_per_step: a.samples,
        baseline_decay: a.baseline_decay,
        steps: a.steps,
        batch_size: a.batch,
        tau: a.graph.tau,
        k_rounds: a.k_rounds,
        anchor: a.graph.anchor,
        estimator: if a.exhaustive { Estimator::Exhaustive } else { Estimator::Sampled },
        seed: a.graph.seed,
    };
    cfg.validate()?;
    if a.checkpoint_every == Some(0) {
        return Err(CardError::Invalid("--checkpoint-every must be at least 1".into()));
    }
    let cm = CostModel::default();
    let init = load_params(a.init.as_deref(), a.graph.seed)?;
    let before = evaluate(&init, &roster, &pairs, &env, cfg.anchor, cfg.tau, &cm, a.eval_episodes)?;

    ensure_dir(&a.out_dir)?;
    let metrics_path = a.out_dir.join("metrics.tsv");
    let io_err = io_error(&metrics_path);
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(&io_err)?);
    writeln!(metrics, "{METRICS_HEADER}").map_err(&io_err)?;
    let out_dir = a.out_dir.clone();
    let (trained, _) = train_with(init, &roster, &pairs, &env, &cfg, &cm, |m, params| {
        writeln!(metrics, "{}", m.tsv_row()).map_err(&io_err)?;
        if let Some(every) = a.checkpoint_every {
            if (m.step + 1) % every == 0 {
                params.save(out_dir.join(format!("checkpoint-step-{}.txt", m.step + 1)))?;
            }
        }
        Ok(())
    })?;
    metrics.flush().map_err(&io_err)?;
    let ckpt = a.out_dir.join("checkpoint.txt");
    trained.save(&ckpt)?;
    let after = evaluate(&trained, &roster, &pairs, &env, cfg.anchor, cfg.tau, &cm, a.eval_episodes)?;
    for (name, e) in [("untrained", before), ("trained", after)] {
        println!(
            "{name:9} mean_utility {:.4} soft_cost {:.6} mean_offdiag {:.4} edges {:.2}",
            e.mean_utility, e.mean_soft_cost, e.mean_offdiag, e.mean_edges
        );
    }
    println!("checkpoint {} sha256 {}", ckpt.display(), trained.digest());
    println!("metrics {}", metrics_path.display());
    Ok(())
}

fn cmd_adapt(a: AdaptArgs) -> Result<()> {
    let old = Manifest::load(&a.old)?;
    let new = Manifest::load(&a.new)?;
    let query = Query::new("query", a.query)?;
    let out = adapt_checkpoint(&a.checkpoint, &old, &new, &query, a.graph.anchor, a.graph.tau)?;
    let labels = roles(&old.roster);
    for (name, (s, t)) in [("before", &out.before), ("after", &out.after)] {
        println!("== {name}");
        print!("{}", to_grid(&LabeledMatrix { labels: labels.clone(), matrix: s.clone() }));
        print!("{}", t.render(Some(&labels)));
    }
    println!("== deltas");
    for (i, j, d) in &out.deltas {
        println!("{} -> {} {:+.6}", labels[*i], labels[*j], d);
    }
    println!("changed {} of {}", out.changed(), out.deltas.len());
    println!("checkpoint sha256 before {} after {} unchanged", out.digest_before, out.digest_after);
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let tasks = task_bank();
    let (roster, conditions) = match &a.manifest {
        Some(path) => {
            let m = Manifest::load(path)?;
            (m.roster, m.conditions)
        }
        None => {
            let set = make_config_set(a.scenario);
            let cs = scenario_conditions(&set.roster, a.scenario);
            (set.roster, cs)
        }
    };
    if a.episodes == 0 || a.k_rounds == 0 {
        return Err(CardError::Invalid("--episodes and --k-rounds must be at least 1".into()));
    }
    let env = SimEnvironment::new(roster.clone(), &tasks, a.k_rounds, a.aggregation);
    let task = tasks
        .iter()
        .find(|t| t.id == a.task)
        .ok_or_else(|| CardError::Invalid(format!("no task `{}` in the bank", a.task)))?;
    let query = task.to_query();
    let params = load_params(a.checkpoint.as_deref(), a.graph.seed)?;
    let anchor = AnchorTopology::new(a.graph.anchor, roster.len())?;
    let (_, topo) = generate(&roster, &conditions, &query, &anchor, &params, a.graph.tau)?;
    let labels = roles(&roster);
    print!("{}", topo.render(Some(&labels)));
    let mut total = 0.0;
    for ep in 0..a.episodes {
        let seed = a.graph.seed.wrapping_add(ep as u64);
        let exec = env.executor(&query, &conditions, seed)?;
        let transcript = run_rounds(&topo, &query, &exec, a.k_rounds, a.aggregation)?;
        let u = sim_utility(&transcript.final_answer, task);
        total += u;
        if ep == 0 {
            print!("{}", transcript.export());
            if let Some(dir) = &a.out_dir {
                ensure_dir(dir)?;
                write_file(&dir.join("transcript.tsv"), &transcript.export())?;
            }
        }
    }
    println!("utility {:.4} over {} episodes (answer {})", total / a.episodes as f64, a.episodes, task.answer);
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    if a.files.len() < 2 {
        return Err(CardError::Io {
            path: a.files.first().map_or_else(|| "<none>".into(), |p| p.display().to_string()),
            source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "report needs at least two matrix files"),
        });
    }
    let mut named = Vec::with_capacity(a.files.len());
    for path in &a.files {
        let text = fs::read_to_string(path).map_err(io_error(path))?;
        let m = parse_matrix(&text, &path.display().to_string())?;
        let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        named.push((name, m.matrix));
    }
    let report = CorrelationReport::build(&named, a.tau)?;
    if a.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
