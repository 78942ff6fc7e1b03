use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rge::eval::{build_eval_set, run_alpha_sweep, run_leakage_diagnostic, Embedder, Experiment};
use rge::model::{checkpoint_dtype, save_checkpoint, Model, TokenId};
use rge::objectives::AlphaRatio;
use rge::pipeline::{
    diagnostic_train_config, env_overrides, gen_data, load_split, parse_assignment, read_json,
    require_checkpoint, run_all, with_threads, write_json, write_report, ColdStartSummary,
    Manifest, NamedEval, RunConfig, RunResults, LOG_ENV,
};
use rge::task::{parse_families, Split, Vocab};
use rge::tensor::{DType, Scalar};
use rge::train::{
    cold_start, resume_training, run_training, write_file, CheckpointPolicy, SupervisionMode,
    TrainConfig, TrainOutcome,
};
use rge::{Error, Result};

/// Reasoning-before-embedding lab: train small decoders that write a
/// rationale before emitting an embedding, and evaluate them on synthetic
/// composed retrieval.
#[derive(Parser, Debug)]
#[command(name = "rge", version)]
struct Cli {
    /// TOML run configuration; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Config override `key=value` (dotted keys, repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Run directory; defaults to `<out_dir>/<fingerprint>`.
    #[arg(long, global = true)]
    dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train and eval splits.
    GenData(GenDataArgs),
    /// LM-only warm-up that teaches the rationale format.
    ColdStart,
    /// Joint LM + contrastive training in one supervision mode.
    Train(TrainArgs),
    /// Retrieval metrics of a checkpoint on the eval split.
    Eval(EvalArgs),
    /// Leakage diagnostic on perturbed triplets.
    Diagnose(InitArgs),
    /// Loss-balance sweep.
    Sweep(SweepArgs),
    /// Embed token sequences, one per input line.
    Embed(EmbedArgs),
    /// Render tables from result files.
    Report(ReportArgs),
    /// The whole experiment suite in one go.
    RunAll,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory (default `<dir>/data`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_eval: Option<usize>,
    /// Comma-separated rule families.
    #[arg(long)]
    families: Option<String>,
}

#[derive(Args, Debug)]
struct InitArgs {
    /// Starting checkpoint (default `<dir>/models/cold.ckpt`).
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    mode: Option<String>,
    #[command(flatten)]
    init: InitArgs,
    /// Output checkpoint (default `<dir>/models/<mode>-seed<seed>.ckpt`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a resumable checkpoint every N steps (default `train.checkpoint_every`).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from a step checkpoint instead of `--init`.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Reasoning {
    Off,
    On,
    Both,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = Reasoning::Both)]
    reasoning: Reasoning,
    /// Label in the result file (default: checkpoint file stem).
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    init: InitArgs,
    /// Comma-separated ratios such as `10:1,1:1,0`.
    #[arg(long)]
    ratios: Option<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum EmbedMode {
    Direct,
    Reasoning,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = EmbedMode::Direct)]
    mode: EmbedMode,
    /// Token sequences (names or ids), one per line; `-` or absent reads stdin.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Also print the generated rationale after a tab.
    #[arg(long)]
    show_rationale: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Result files (default: every JSON in `<dir>/results`).
    results: Vec<PathBuf>,
    /// Output directory (default `<dir>/report`).
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Ctx {
    cfg: RunConfig,
    dir: PathBuf,
}

impl Ctx {
    fn data_dir(&self) -> PathBuf {
        self.dir.join("data")
    }

    fn models(&self) -> PathBuf {
        self.dir.join("models")
    }

    fn results(&self) -> PathBuf {
        self.dir.join("results")
    }

    fn fingerprint(&self) -> String {
        self.cfg.fingerprint()
    }

    fn cold_path(&self, init: &InitArgs) -> PathBuf {
        init.init
            .clone()
            .unwrap_or_else(|| self.models().join("cold.ckpt"))
    }

    fn stamp(&self) -> Result<()> {
        write_json(&self.dir.join("manifest.json"), &Manifest::new(&self.cfg))
    }

    fn new_results(&self) -> RunResults {
        RunResults::new(&self.fingerprint(), self.cfg.seed)
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = env_overrides(std::env::vars());
    for s in &cli.set {
        overrides.push(parse_assignment(s)?);
    }
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(t) = cli.threads {
        overrides.push(("threads".into(), t.to_string()));
    }
    if let Command::GenData(g) = &cli.command {
        if let Some(n) = g.n_train {
            overrides.push(("data.n_train".into(), n.to_string()));
        }
        if let Some(n) = g.n_eval {
            overrides.push(("data.n_eval".into(), n.to_string()));
        }
        if let Some(f) = &g.families {
            let names: Vec<String> = parse_families(f)?
                .iter()
                .map(|f| format!("{:?}", f.as_str()))
                .collect();
            overrides.push(("data.families".into(), format!("[{}]", names.join(", "))));
        }
    }
    Ok(RunConfig::load(cli.config.as_deref(), &overrides)?.resolved())
}

fn dispatch<R>(dtype: DType, f32_case: impl FnOnce() -> R, f64_case: impl FnOnce() -> R) -> R {
    match dtype {
        DType::F32 => f32_case(),
        DType::F64 => f64_case(),
    }
}

fn cmd_gen_data(ctx: &Ctx, args: &GenDataArgs) -> Result<()> {
    let data = &ctx.cfg.data;
    if data.n_train == 0 {
        log::warn!("n_train is 0: the train split is empty");
    }
    let out = args.out.clone().unwrap_or_else(|| ctx.data_dir());
    let (train, eval) = gen_data(data, &out)?;
    println!(
        "wrote {} train and {} eval examples to {}",
        train.len(),
        eval.len(),
        out.display()
    );
    Ok(())
}

fn cold_start_typed<T: Scalar>(ctx: &Ctx) -> Result<()> {
    let train = load_split(&ctx.data_dir(), Split::Train)?;
    let eval = load_split(&ctx.data_dir(), Split::Eval)?;
    let out = cold_start(Model::<T>::init(ctx.cfg.model)?, &train, &ctx.cfg.train)?;
    let path = ctx.models().join("cold.ckpt");
    save_checkpoint(&out.model, &path)?;
    out.trace
        .write_csv(&ctx.dir.join("traces").join("cold_start.csv"))?;
    let summary =
        ColdStartSummary::new(&out.model, &out.trace, &eval, ctx.cfg.train.max_new_tokens)?;
    let mut results = ctx.new_results();
    results.cold_start = Some(summary);
    write_json(&ctx.results().join("cold_start.json"), &results)?;
    println!(
        "cold start: {} steps, lm {:.4} -> {:.4}, termination {:.4}; wrote {}",
        summary.steps,
        summary.lm_first,
        summary.lm_last,
        summary.termination_rate,
        path.display()
    );
    Ok(())
}

fn train_typed<T: Scalar>(
    ctx: &Ctx,
    args: &TrainArgs,
    cfg: &TrainConfig,
    init: &Path,
) -> Result<()> {
    let mut train = load_split(&ctx.data_dir(), Split::Train)?;
    let probe = train.attach_probe();
    let out_path = args.out.clone().unwrap_or_else(|| {
        ctx.models()
            .join(format!("{}-seed{}.ckpt", cfg.mode, cfg.seed))
    });
    let every = args.checkpoint_every.unwrap_or(cfg.checkpoint_every);
    let policy = CheckpointPolicy {
        dir: (every > 0).then(|| ctx.dir.join("steps").join(cfg.mode.as_str())),
        every,
    };
    let out: TrainOutcome<T> = match &args.resume {
        Some(p) => resume_training(p, &train, cfg, &policy)?,
        None => {
            let cold = if init.exists() || cfg.mode == SupervisionMode::SelfGenerated {
                require_checkpoint::<T>(init, "run `rge cold-start` first or pass --init")?
            } else {
                log::warn!(
                    "{} not found; training from a fresh initialization",
                    init.display()
                );
                Model::<T>::init(ctx.cfg.model)?
            };
            run_training(cold, &train, cfg, &policy)?
        }
    };
    save_checkpoint(&out.model, &out_path)?;
    let trace_path = ctx
        .dir
        .join("traces")
        .join(format!("{}-seed{}.csv", cfg.mode, cfg.seed));
    out.trace.write_csv(&trace_path)?;
    let last = out.trace.records.last();
    println!(
        "{}: {} steps, lm {:.4}, con {:.4}, oracle reads {}; wrote {}",
        cfg.mode,
        out.trace.len(),
        last.map_or(f64::NAN, |r| r.lm_loss),
        last.map_or(f64::NAN, |r| r.con_loss),
        probe.load(std::sync::atomic::Ordering::Relaxed),
        out_path.display()
    );
    Ok(())
}

fn cmd_train(ctx: &Ctx, args: &TrainArgs) -> Result<()> {
    let mut cfg = ctx.cfg.train.clone();
    if let Some(m) = &args.mode {
        cfg.mode = m.parse()?;
    }
    let init = ctx.cold_path(&args.init);
    let source = args.resume.as_deref().unwrap_or(&init);
    let dtype = if source.exists() {
        checkpoint_dtype(source)?
    } else {
        ctx.cfg.precision
    };
    dispatch(
        dtype,
        || train_typed::<f32>(ctx, args, &cfg, &init),
        || train_typed::<f64>(ctx, args, &cfg, &init),
    )
}

fn eval_typed<T: Scalar>(ctx: &Ctx, args: &EvalArgs) -> Result<()> {
    let model = require_checkpoint::<T>(&args.model, "train a model first")?;
    let eval = load_split(&ctx.data_dir(), Split::Eval)?;
    let items = build_eval_set(&eval, ctx.cfg.eval.pool_size, ctx.cfg.seed)?;
    let name = args.name.clone().unwrap_or_else(|| {
        args.model
            .file_stem()
            .map_or("model".into(), |s| s.to_string_lossy().into_owned())
    });
    let flags: &[bool] = match args.reasoning {
        Reasoning::Off => &[false],
        Reasoning::On => &[true],
        Reasoning::Both => &[false, true],
    };
    let exp = Experiment {
        cold: &model,
        train: &Default::default(),
        eval: &items,
        train_cfg: &ctx.cfg.train,
        target_reasoning: ctx.cfg.eval.target_reasoning,
        fingerprint: &ctx.fingerprint(),
    };
    let mut results = ctx.new_results();
    for &reasoning in flags {
        let report = exp.evaluate(&model, reasoning)?;
        println!(
            "{name} reasoning {}: P@1 {:.4} R@5 {:.4} holdout P@1 {:.4} ({} queries)",
            if reasoning { "on" } else { "off" },
            report.overall.p_at_1,
            report.overall.r_at_5,
            report.holdout.p_at_1,
            report.n_queries
        );
        results.evals.push(NamedEval {
            name: name.clone(),
            report,
        });
    }
    write_json(&ctx.results().join(format!("eval-{name}.json")), &results)
}

fn experiment_typed<T: Scalar>(ctx: &Ctx, init: &Path, sweep: Option<&[AlphaRatio]>) -> Result<()> {
    let cold = require_checkpoint::<T>(init, "run `rge cold-start` first or pass --init")?;
    let train = load_split(&ctx.data_dir(), Split::Train)?;
    let fp = ctx.fingerprint();
    let mut results = ctx.new_results();
    match sweep {
        None => {
            let cfg = diagnostic_train_config(&ctx.cfg);
            let exp = Experiment {
                cold: &cold,
                train: &train,
                eval: &[],
                train_cfg: &cfg,
                target_reasoning: false,
                fingerprint: &fp,
            };
            let d = run_leakage_diagnostic(&exp, ctx.cfg.diagnostic.n_examples)?;
            for t in [&d.wrong_query, &d.wrong_target] {
                let s = t.summary();
                println!(
                    "{}: lm {:.4} -> {:.4}, con {:.4} -> {:.4}",
                    t.perturbation, s.lm_initial, s.lm_final, s.con_initial, s.con_final
                );
            }
            println!(
                "wrong-query shortcut: {}; wrong-target at chance: {}",
                d.wrong_query_shortcut(),
                d.wrong_target_at_chance()
            );
            results.diagnostic = Some(d);
            write_json(&ctx.results().join("diagnostic.json"), &results)
        }
        Some(ratios) => {
            let eval = load_split(&ctx.data_dir(), Split::Eval)?;
            let items = build_eval_set(&eval, ctx.cfg.eval.pool_size, ctx.cfg.seed)?;
            let exp = Experiment {
                cold: &cold,
                train: &train,
                eval: &items,
                train_cfg: &ctx.cfg.train,
                target_reasoning: ctx.cfg.eval.target_reasoning,
                fingerprint: &fp,
            };
            let s = run_alpha_sweep(&exp, ratios)?;
            for row in &s.rows {
                match &row.result {
                    Ok(r) => println!("{}: P@1 {:.4}", row.ratio, r.overall.p_at_1),
                    Err(e) => println!("{}: aborted ({e})", row.ratio),
                }
            }
            results.sweep = Some(s);
            write_json(&ctx.results().join("sweep.json"), &results)
        }
    }
}

fn cmd_experiment(ctx: &Ctx, init: &InitArgs, sweep: Option<&[AlphaRatio]>) -> Result<()> {
    let path = ctx.cold_path(init);
    require_exists(&path, "run `rge cold-start` first or pass --init")?;
    dispatch(
        checkpoint_dtype(&path)?,
        || experiment_typed::<f32>(ctx, &path, sweep),
        || experiment_typed::<f64>(ctx, &path, sweep),
    )
}

fn require_exists(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Missing(format!(
            "{} not found; {hint}",
            path.display()
        )))
    }
}

fn embed_typed<T: Scalar>(args: &EmbedArgs, max_new: usize) -> Result<()> {
    let model = require_checkpoint::<T>(&args.model, "train a model first")?;
    let vocab = Vocab::new();
    let reader: Box<dyn BufRead> = match &args.input {
        Some(p) if p.as_os_str() != "-" => Box::new(std::io::BufReader::new(
            std::fs::File::open(p).map_err(|e| Error::io(p, e))?,
        )),
        _ => Box::new(std::io::stdin().lock()),
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<input>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<TokenId> = vocab.encode(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let reasoning = args.mode == EmbedMode::Reasoning;
        let (v, _) = model.embed_query(&tokens, reasoning, max_new)?;
        let text: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
        let mut row = text.join(" ");
        if args.show_rationale && reasoning {
            let r = model.greedy_generate(&tokens, rge::task::EMB, max_new)?;
            row.push('\t');
            row.push_str(&vocab.decode(&r));
        }
        writeln!(out, "{row}").map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

fn cmd_report(ctx: &Ctx, args: &ReportArgs) -> Result<()> {
    let files = if args.results.is_empty() {
        let dir = ctx.results();
        let mut files: Vec<PathBuf> = match std::fs::read_dir(&dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect(),
            Err(_) => Vec::new(),
        };
        files.sort();
        let all = ctx.dir.join("results.json");
        if all.exists() {
            files.insert(0, all);
        }
        if files.is_empty() {
            return Err(Error::Missing(format!(
                "no result files in {}; run an experiment first",
                dir.display()
            )));
        }
        files
    } else {
        args.results.clone()
    };
    let mut merged: Option<RunResults> = None;
    for f in &files {
        require_exists(f, "run an experiment first")?;
        let r: RunResults = read_json(f)?;
        match &mut merged {
            Some(m) => m.merge(r),
            None => merged = Some(r),
        }
    }
    let merged = merged.expect("at least one file");
    let out = args.out.clone().unwrap_or_else(|| ctx.dir.join("report"));
    let written = write_report(&merged, &out)?;
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let dir = cli.dir.clone().unwrap_or_else(|| cfg.run_dir());
    let mut cfg = cfg;
    if let Some(d) = &cli.dir {
        if matches!(cli.command, Command::RunAll) {
            cfg.out_dir = d.clone();
        }
    }
    let threads = cfg.threads;
    let ctx = Ctx { cfg, dir };
    with_threads(threads, || -> Result<()> {
        match &cli.command {
            Command::RunAll => {
                let s = run_all(&ctx.cfg)?;
                println!("run directory {}", s.dir.display());
                for p in &s.report_files {
                    println!("{}", p.display());
                }
                return Ok(());
            }
            Command::Embed(args) => {
                let max_new = ctx.cfg.train.max_new_tokens;
                require_exists(&args.model, "train a model first")?;
                return dispatch(
                    checkpoint_dtype(&args.model)?,
                    || embed_typed::<f32>(args, max_new),
                    || embed_typed::<f64>(args, max_new),
                );
            }
            Command::Report(args) => return cmd_report(&ctx, args),
            _ => {}
        }
        ctx.stamp()?;
        write_file(&ctx.dir.join("config.toml"), ctx.cfg.to_toml().as_bytes())?;
        match &cli.command {
            Command::GenData(args) => cmd_gen_data(&ctx, args),
            Command::ColdStart => dispatch(
                ctx.cfg.precision,
                || cold_start_typed::<f32>(&ctx),
                || cold_start_typed::<f64>(&ctx),
            ),
            Command::Train(args) => cmd_train(&ctx, args),
            Command::Eval(args) => {
                require_exists(&args.model, "train a model first")?;
                dispatch(
                    checkpoint_dtype(&args.model)?,
                    || eval_typed::<f32>(&ctx, args),
                    || eval_typed::<f64>(&ctx, args),
                )
            }
            Command::Diagnose(init) => cmd_experiment(&ctx, init, None),
            Command::Sweep(args) => {
                let ratios = match &args.ratios {
                    Some(s) => s
                        .split(',')
                        .map(|r| r.trim().parse())
                        .collect::<Result<Vec<AlphaRatio>>>()?,
                    None => ctx.cfg.sweep.ratios.clone(),
                };
                cmd_experiment(&ctx, &args.init, Some(&ratios))
            }
            Command::RunAll | Command::Embed(_) | Command::Report(_) => unreachable!(),
        }
    })?
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or(LOG_ENV, "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
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
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
