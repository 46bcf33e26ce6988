use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use satdiff::dataset::{generate_3sat, generate_clique, write_dataset, Dataset, FamilyParams};
use satdiff::diffusion::NoiseSchedule;
use satdiff::eval::{
    chain_rng, eval_accuracy, eval_agreement, eval_timing, eval_uniqueness, timing_csv, write_csv, DiffusionSampler,
    EvalOptions, RandomAssignmentSampler, SampleOutput, Sampler, TimingCase, UniformOracleSampler,
};
use satdiff::formula::{parse_dimacs, write_solution_line, write_solutions, CnfFormula};
use satdiff::generate::ThreeSatMode;
use satdiff::gnn::{Checkpoint, DenoiserModel, ModelConfig};
use satdiff::oracle::{enumerate_solutions, ExactDenoiser, DEFAULT_CAP};
use satdiff::train::{AdaBeliefConfig, SolutionMode, TrainConfig, Trainer};

#[derive(Parser, Debug)]
#[command(name = "satdiff", version, about = "Sample diverse SAT solutions with a diffusion model")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset directory.
    #[command(subcommand)]
    Gen(GenCommand),
    /// Enumerate all solutions of a formula.
    Enumerate {
        #[arg(long)]
        cnf: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CAP)]
        cap: usize,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a denoiser.
    Train(TrainArgs),
    /// Draw assignments for one formula.
    Sample {
        #[arg(long, required_unless_present = "oracle")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        cnf: PathBuf,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long, default_value_t = 32)]
        t_steps: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Use the exact enumeration-based denoiser instead of a model.
        #[arg(long)]
        oracle: bool,
        #[arg(long, value_enum, default_value_t = OutputArg::Final)]
        output: OutputArg,
    },
    /// Evaluate a sampler on a dataset.
    Eval {
        #[arg(value_enum)]
        metric: Metric,
        #[command(flatten)]
        args: EvalArgs,
    },
}

#[derive(Subcommand, Debug)]
enum GenCommand {
    /// Random 3-SAT.
    #[command(name = "3sat")]
    ThreeSat {
        /// Variable-count range `A..B` (inclusive).
        #[arg(long, value_parser = parse_range)]
        vars: RangeInclusive<usize>,
        /// `threshold` or `ratio:R`.
        #[arg(long, default_value = "threshold")]
        mode: ThreeSatMode,
        #[command(flatten)]
        common: GenArgs,
    },
    /// Triangle finding on random graphs.
    Clique {
        /// Vertex-count range `A..B` (inclusive).
        #[arg(long, value_parser = parse_range)]
        vertices: RangeInclusive<usize>,
        #[command(flatten)]
        common: GenArgs,
    },
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write `.solutions` files, enumerating up to this many solutions.
    #[arg(long)]
    solutions: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    steps: u64,
    #[arg(long, default_value_t = 128)]
    t_steps: usize,
    #[arg(long, default_value_t = satdiff::gnn::DEFAULT_HIDDEN_DIM)]
    dim: usize,
    #[arg(long, default_value_t = satdiff::gnn::DEFAULT_ITERATIONS)]
    iters: usize,
    #[arg(long, default_value = "first")]
    solution_mode: SolutionMode,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ckpt: PathBuf,
    /// JSON-lines metrics log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Variables per batch.
    #[arg(long, default_value_t = 2000)]
    batch_vars: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    log_every: u64,
    #[arg(long, default_value_t = 1000)]
    checkpoint_every: u64,
    /// Continue from the optimizer state stored in `--ckpt`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SamplerArg::Model)]
    sampler: SamplerArg,
    #[arg(long, value_enum, default_value_t = OutputArg::Final)]
    output: OutputArg,
    #[arg(long, default_value_t = 32)]
    t_steps: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Accuracy: independent runs.
    #[arg(long, default_value_t = 5)]
    runs: usize,
    /// Diversity: samples per instance.
    #[arg(long, default_value_t = 100)]
    samples: usize,
    /// Diversity: keep only instances with at least this many solutions.
    #[arg(long, default_value_t = 0)]
    min_solutions: usize,
    /// Agreement: pairs per instance.
    #[arg(long, default_value_t = satdiff::eval::DEFAULT_AGREEMENT_REPS)]
    reps: usize,
    /// Agreement: extra draws allowed per pair.
    #[arg(long, default_value_t = satdiff::eval::DEFAULT_RETRY_BUDGET)]
    retry: usize,
    /// Timing: chains per sampler call.
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Timing: repeats per size (fastest kept).
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Metric {
    Accuracy,
    Diversity,
    Agreement,
    Timing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SamplerArg {
    /// Reverse diffusion with the trained model.
    Model,
    /// Deterministic argmax-at-every-step chain with the trained model.
    Greedy,
    /// Reverse diffusion with the exact denoiser.
    Exact,
    /// Uniform draws from the enumerated solution set.
    Oracle,
    /// Uniformly random assignments.
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OutputArg {
    Final,
    FirstValid,
}

impl From<OutputArg> for SampleOutput {
    fn from(o: OutputArg) -> Self {
        match o {
            OutputArg::Final => SampleOutput::Final,
            OutputArg::FirstValid => SampleOutput::FirstValid,
        }
    }
}

fn parse_range(s: &str) -> Result<RangeInclusive<usize>, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected A..B, got `{s}`"))?;
    let a: usize = a.trim().parse().map_err(|e| format!("bad range start `{a}`: {e}"))?;
    let b: usize = b.trim().trim_start_matches('=').parse().map_err(|e| format!("bad range end `{b}`: {e}"))?;
    if a > b {
        return Err(format!("empty range {a}..{b}"));
    }
    Ok(a..=b)
}

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

fn seed_or_default(seed: Option<u64>) -> u64 {
    let seed = seed.unwrap_or(0);
    eprintln!("seed: {seed}");
    seed
}

fn read_formula(path: &Path) -> CliResult<CnfFormula> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(parse_dimacs(&text).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn load_model(ckpt: Option<&Path>) -> CliResult<DenoiserModel> {
    let path = ckpt.ok_or("--ckpt is required for this sampler")?;
    Ok(DenoiserModel::load(path).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen(GenCommand::ThreeSat { vars, mode, common }) => {
            let seed = seed_or_default(common.seed);
            let params = FamilyParams::ThreeSat {
                min_vars: *vars.start(),
                max_vars: *vars.end(),
                mode: mode.to_string(),
            };
            let instances = generate_3sat(vars, mode, common.count, seed)?;
            write_dataset(&common.out, params, seed, &instances, common.solutions)?;
            eprintln!("wrote {} instances to {}", instances.len(), common.out.display());
        }
        Command::Gen(GenCommand::Clique { vertices, common }) => {
            let seed = seed_or_default(common.seed);
            let params = FamilyParams::Clique {
                min_vertices: *vertices.start(),
                max_vertices: *vertices.end(),
            };
            let instances = generate_clique(vertices, common.count, seed)?;
            write_dataset(&common.out, params, seed, &instances, common.solutions)?;
            eprintln!("wrote {} instances to {}", instances.len(), common.out.display());
        }
        Command::Enumerate { cnf, cap, out } => {
            let f = read_formula(&cnf)?;
            let e = enumerate_solutions(&f, cap);
            if e.truncated {
                eprintln!("stopped at cap {cap}");
            }
            let text = write_solutions(&e.solutions);
            match out {
                Some(path) => fs::write(&path, text).map_err(|err| format!("{}: {err}", path.display()))?,
                None => print!("{text}"),
            }
        }
        Command::Train(a) => train(a)?,
        Command::Sample {
            ckpt,
            cnf,
            samples,
            t_steps,
            seed,
            oracle,
            output,
        } => {
            let seed = seed_or_default(seed);
            let f = read_formula(&cnf)?;
            let schedule = NoiseSchedule::new(t_steps)?;
            let mut rngs: Vec<_> = (0..samples).map(|d| chain_rng(seed, 0, d)).collect();
            let formulas = vec![&f; samples];
            let draws = if oracle {
                DiffusionSampler::new(ExactDenoiser::new(), schedule)
                    .with_output(output.into())
                    .sample(&formulas, &mut rngs)?
            } else {
                let model = load_model(ckpt.as_deref())?;
                DiffusionSampler::new(model, schedule)
                    .with_output(output.into())
                    .sample(&formulas, &mut rngs)?
            };
            for d in draws {
                println!("{}", write_solution_line(&d.assignment));
            }
        }
        Command::Eval { metric, args } => eval(metric, args)?,
    }
    Ok(())
}

fn train(a: TrainArgs) -> CliResult<()> {
    let seed = seed_or_default(a.seed);
    let data = Dataset::load(&a.data)?;
    let examples = data.examples(a.solution_mode, seed, DEFAULT_CAP)?;
    eprintln!("{} training examples", examples.len());
    let config = TrainConfig {
        steps: a.steps,
        max_vars: a.batch_vars,
        schedule_steps: a.t_steps,
        seed,
        model: ModelConfig {
            hidden_dim: a.dim,
            iterations: a.iters,
            seed,
        },
        optimizer: AdaBeliefConfig {
            lr: a.lr,
            ..Default::default()
        },
        clip_norm: None,
        log_every: a.log_every,
        checkpoint_every: a.checkpoint_every,
        checkpoint_path: Some(a.ckpt.clone()),
        log_path: a.log,
    };
    let mut trainer = if a.resume {
        let ckpt = Checkpoint::load(&a.ckpt).map_err(|e| format!("{}: {e}", a.ckpt.display()))?;
        Trainer::resume(config, examples, ckpt)?
    } else {
        Trainer::new(config, examples)?
    };
    for r in trainer.run()? {
        eprintln!("step {} loss {:.6} ({:.1}s)", r.step, r.loss, r.seconds);
    }
    Ok(())
}

fn eval(metric: Metric, a: EvalArgs) -> CliResult<()> {
    let seed = seed_or_default(a.seed);
    let data = Dataset::load(&a.data)?;
    let schedule = NoiseSchedule::new(a.t_steps)?;
    let sampler: Box<dyn Sampler> = match a.sampler {
        SamplerArg::Model => Box::new(DiffusionSampler::new(load_model(a.ckpt.as_deref())?, schedule).with_output(a.output.into())),
        SamplerArg::Greedy => {
            Box::new(DiffusionSampler::greedy(load_model(a.ckpt.as_deref())?, schedule).with_output(a.output.into()))
        }
        SamplerArg::Exact => Box::new(DiffusionSampler::new(ExactDenoiser::new(), schedule).with_output(a.output.into())),
        SamplerArg::Oracle => Box::new(UniformOracleSampler::new()),
        SamplerArg::Random => Box::new(RandomAssignmentSampler),
    };
    let opts = EvalOptions {
        seed,
        ..Default::default()
    };
    let mut formulas = data.formulas();
    let (summary, csv) = match metric {
        Metric::Accuracy => {
            let r = eval_accuracy(sampler.as_ref(), &formulas, a.runs, opts)?;
            (r.summary(), r.to_csv())
        }
        Metric::Diversity => {
            if a.min_solutions > 0 {
                formulas.retain(|f| enumerate_solutions(f, a.min_solutions).solutions.len() >= a.min_solutions);
                eprintln!("{} instances with at least {} solutions", formulas.len(), a.min_solutions);
            }
            let r = eval_uniqueness(sampler.as_ref(), &formulas, a.samples, opts)?;
            (r.summary(), r.to_csv())
        }
        Metric::Agreement => {
            let r = eval_agreement(sampler.as_ref(), &formulas, a.reps, a.retry, opts)?;
            (r.summary(), r.to_csv())
        }
        Metric::Timing => {
            let family = data.manifest.as_ref().map_or("cnf", |m| m.params.family());
            let cases: Vec<TimingCase> = formulas
                .into_iter()
                .map(|formula| TimingCase {
                    family: family.to_string(),
                    formula,
                })
                .collect();
            let rows = eval_timing(sampler.as_ref(), &cases, a.batch, a.repeats, seed)?;
            let csv = timing_csv(&rows);
            (format!("timed {} instances", rows.len()), csv)
        }
    };
    println!("{summary}");
    if let Some(path) = a.csv {
        write_csv(&path, &csv)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
