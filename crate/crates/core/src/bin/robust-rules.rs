use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use robust_rules::boost::{train, RegularizerKind, TrainConfig};
use robust_rules::causal::CausalGraph;
use robust_rules::data::Dataset;
use robust_rules::datagen::{attach_group_ids, gen_example1, gen_small_invariant_margin, Example1Config, Grouping, SimConfig};
use robust_rules::eval::{accuracy_curves, robustness, rule_report, split_report, write_curves_csv, write_rules_csv, Loss};
use robust_rules::repro::{run_recipe, Recipe};
use robust_rules::{Error, Result, RuleEnsemble};

const THREADS_VAR: &str = "ROBUST_RULES_THREADS";

#[derive(Parser)]
#[command(name = "robust-rules", version, about = "Boosted local decision rules that stay accurate under distribution shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic suite: one CSV per environment plus suite.json.
    GenData(GenDataArgs),
    /// Train an ensemble from CSV data.
    Train(TrainArgs),
    /// Evaluate a trained model on every CSV in a directory.
    Eval(EvalArgs),
    /// Print the invariant/variant split of a causal graph.
    Decompose(DecomposeArgs),
    /// Run a named reproduction recipe end to end.
    Repro(ReproArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DataRecipe {
    Example1,
    Sim,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    recipe: DataRecipe,
    /// Generator config JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Points per environment for the example1 recipe.
    #[arg(long, default_value_t = 2000)]
    n_per_env: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Beam overrides shared by `train` and the run config.
#[derive(Args, Default)]
struct BeamFlags {
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    result_size: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupFlag {
    Env,
    LabelEnv,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config JSON (data paths, graph path and every training option).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training CSV; repeatable, files are concatenated.
    #[arg(long)]
    data: Vec<PathBuf>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, value_parser = parse_regularizer)]
    regularizer: Option<RegularizerKind>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Derive group ids for the variance regularizer.
    #[arg(long, value_enum)]
    group_by: Option<GroupFlag>,
    #[command(flatten)]
    beam: BeamFlags,
    /// Directory receiving model.json and train_log.csv.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of aggregated rules in rules.csv.
    #[arg(long, default_value_t = 5)]
    top: usize,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Also print the c-components and the all-variant flag.
    #[arg(long)]
    full: bool,
}

#[derive(Args)]
struct ReproArgs {
    recipe: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "repro-out")]
    out_dir: PathBuf,
}

fn parse_regularizer(s: &str) -> std::result::Result<RegularizerKind, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown regularizer `{s}` (none, graph, variance)"))
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    data: Vec<PathBuf>,
    graph: Option<PathBuf>,
    group_by: Option<Grouping>,
    out_dir: Option<PathBuf>,
    #[serde(flatten)]
    train: TrainConfig,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    fs::create_dir_all(&args.out_dir)?;
    let manifest = match args.recipe {
        DataRecipe::Example1 => {
            let mut cfg: Example1Config = args.config.as_deref().map(read_json).transpose()?.unwrap_or_default();
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            let data = gen_example1(&cfg, args.n_per_env)?;
            let mut files = Vec::new();
            for (env, d) in data.split_by_env()? {
                let name = format!("{env}.csv");
                d.write_csv_path(args.out_dir.join(&name))?;
                files.push(name);
            }
            json!({ "recipe": "example1", "seed": cfg.seed, "n_per_env": args.n_per_env, "config": cfg, "files": files })
        }
        DataRecipe::Sim => {
            let mut cfg: SimConfig = args.config.as_deref().map(read_json).transpose()?.unwrap_or_default();
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            let suite = gen_small_invariant_margin(&cfg)?;
            let mut files = Vec::new();
            for (env, d) in suite.envs.iter().chain(&suite.ood_envs) {
                let name = format!("{env}.csv");
                d.write_csv_path(args.out_dir.join(&name))?;
                files.push(name);
            }
            json!({
                "recipe": "sim",
                "seed": cfg.seed,
                "config": cfg,
                "scramble_hash": suite.scramble_hash(),
                "spurious_means": suite.means,
                "files": files,
            })
        }
    };
    write_pretty(&args.out_dir.join("suite.json"), &manifest)
}

fn load_training_data(paths: &[PathBuf]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::Config("no training data given (use --data or the config's `data`)".into()));
    }
    let parts = paths.iter().map(Dataset::read_csv_path).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Dataset> = parts.iter().collect();
    Dataset::concat(&refs)
}

#[derive(Serialize)]
struct LogRow<'a> {
    round: usize,
    alpha: f64,
    rule: &'a str,
    quality: f64,
    train_accuracy: f64,
    exp_loss: f64,
}

fn write_train_log(model: &RuleEnsemble, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (i, term) in model.terms.iter().enumerate() {
        let rule = term.rule.to_infix(&model.feature_names);
        w.serialize(LogRow {
            round: i + 1,
            alpha: term.alpha,
            rule: &rule,
            quality: model.metrics.quality[i],
            train_accuracy: model.metrics.train_accuracy[i],
            exp_loss: model.metrics.exp_loss[i],
        })?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut rc: RunConfig = args.config.as_deref().map(read_json).transpose()?.unwrap_or_default();
    if !args.data.is_empty() {
        rc.data = args.data;
    }
    rc.graph = args.graph.or(rc.graph);
    rc.out_dir = args.out_dir.or(rc.out_dir);
    if let Some(g) = args.group_by {
        rc.group_by = Some(match g {
            GroupFlag::Env => Grouping::ByEnv,
            GroupFlag::LabelEnv => Grouping::ByLabelEnv,
        });
    }
    let t = &mut rc.train;
    if let Some(r) = args.regularizer {
        t.regularizer = r;
    }
    t.lambda = args.lambda.unwrap_or(t.lambda);
    t.rounds = args.rounds.unwrap_or(t.rounds);
    let b = &args.beam;
    t.beam.width = b.width.unwrap_or(t.beam.width);
    t.beam.depth = b.depth.unwrap_or(t.beam.depth);
    t.beam.result_size = b.result_size.unwrap_or(t.beam.result_size);
    t.beam.bins = b.bins.unwrap_or(t.beam.bins);
    t.beam.seed = b.seed.unwrap_or(t.beam.seed);
    rc.train.validate()?;
    if rc.train.regularizer == RegularizerKind::Graph && rc.graph.is_none() {
        return Err(Error::Config("graph regularization needs --graph".into()));
    }

    let mut data = load_training_data(&rc.data)?;
    if let Some(g) = &rc.group_by {
        data = attach_group_ids(data, g)?;
    }
    let decomposition = match &rc.graph {
        Some(p) => Some(CausalGraph::from_path(p)?.decompose_invariant()?),
        None => None,
    };
    let model = train(&data, &rc.train, decomposition.as_ref())?;
    let out = rc.out_dir.unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out)?;
    fs::write(out.join("model.json"), model.to_json())?;
    write_train_log(&model, &out.join("train_log.csv"))?;
    log::info!("trained {} rounds, final train accuracy {:.4}", model.len(), model.metrics.train_accuracy.last().copied().unwrap_or(0.0));
    Ok(())
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no CSV files in {}", dir.display())));
    }
    Ok(files)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = RuleEnsemble::from_json(&fs::read_to_string(&args.model)?)?;
    let mut splits = Vec::new();
    for path in csv_files(&args.data_dir)? {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut d = Dataset::read_csv_path(&path)?;
        if d.env().is_none() {
            let n = d.n_samples();
            d = d.with_env(vec![stem.clone(); n])?;
        }
        splits.push((stem, d));
    }
    let refs: Vec<(&str, &Dataset)> = splits.iter().map(|(n, d)| (n.as_str(), d)).collect();
    fs::create_dir_all(&args.out)?;
    write_curves_csv(&accuracy_curves(&model, &refs)?, fs::File::create(args.out.join("curves.csv"))?)?;
    write_rules_csv(&rule_report(&model, &refs, args.top)?, fs::File::create(args.out.join("rules.csv"))?)?;

    let pooled = Dataset::concat(&splits.iter().map(|(_, d)| d).collect::<Vec<_>>())?;
    let envs = pooled.split_by_env()?;
    let mut rob = serde_json::Map::new();
    for (name, loss) in [("zero_one", Loss::ZeroOne), ("exponential", Loss::Exponential), ("logistic", Loss::Logistic)] {
        rob.insert(name.into(), json!(robustness(&model, &envs, loss)?));
    }
    let per_split: serde_json::Map<String, serde_json::Value> = splits
        .iter()
        .map(|(n, d)| Ok((n.clone(), json!(split_report(&model, d)?))))
        .collect::<Result<_>>()?;
    let summary = json!({
        "robustness": rob,
        "pooled": split_report(&model, &pooled)?,
        "splits": per_split,
    });
    write_pretty(&args.out.join("summary.json"), &summary)
}

fn cmd_decompose(args: DecomposeArgs) -> Result<()> {
    let d = CausalGraph::from_path(&args.graph)?.decompose_invariant()?;
    let v = if args.full { json!(d) } else { json!({ "invariant": d.invariant, "variant": d.variant }) };
    println!("{}", serde_json::to_string(&v)?);
    Ok(())
}

fn cmd_repro(args: ReproArgs) -> Result<()> {
    let recipe: Recipe = args.recipe.parse()?;
    let summary = run_recipe(recipe, args.seed, &args.out_dir)?;
    println!("{}", serde_json::to_string_pretty(&summary["results"])?);
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_VAR} must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Decompose(a) => cmd_decompose(a),
        Command::Repro(a) => cmd_repro(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
