use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use patan::data::{self, GeneratorSpec};
use patan::eval::{self, DataSource, ExperimentConfig, RunResult, Variant};
use patan::gradcheck;
use patan::model::{ModelSnapshot, PatanModel};
use patan::train::{self, Ablation, Method};
use patan::{Error, Result};

/// Partial video domain adaptation on synthetic frame features.
#[derive(Debug, Parser)]
#[command(name = "patan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset from a generator spec and write the feature CSV.
    GenData {
        /// Generator spec JSON file.
        #[arg(long)]
        spec: PathBuf,
        /// Replaces the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write metrics, class weights and the model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        ablation: Option<Ablation>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train several methods on identical data and seeds.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Methods (source_only, dann, pada, patan) or PATAN ablations
        /// (no_attentive, no_local_weights, no_classifier, no_adversarial).
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// PATAN and DANN accuracy as the number of target classes varies.
    SweepTargets {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        counts: Vec<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op and every adversarial loss.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Class-weight histogram CSV of a `train` output directory.
    ExportGamma {
        /// Directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overall temporal features of every source and target video, computed
    /// by the model of a `train` output directory.
    ExportFeatures {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn read_input(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::from_json(&read_input(path)?)?;
    if let Some(s) = seed {
        c.train.seed = s;
    }
    Ok(c)
}

fn parse_variant(token: &str) -> Result<Variant> {
    let t = token.trim();
    if let Ok(m) = t.parse::<Method>() {
        return Ok(Variant::plain(m));
    }
    let bare = t.strip_prefix("patan_").unwrap_or(t);
    match bare.parse::<Ablation>() {
        Ok(Ablation::None) | Err(_) => Err(Error::Usage(format!(
            "unknown method `{t}` (expected source_only, dann, pada, patan or a PATAN ablation)"
        ))),
        Ok(a) => Ok(Variant::ablated(a)),
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { spec, seed, out } => {
            let mut s: GeneratorSpec = serde_json::from_str(&read_input(&spec)?)
                .map_err(|e| Error::Config(format!("generator spec: {e}")))?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let d = data::generate(&s)?;
            data::write_features(&d, &out)?;
            println!(
                "{} source and {} target videos -> {}",
                d.source.len(),
                d.target.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            method,
            ablation,
            seed,
            out,
        } => {
            let mut c = load_config(&config, seed)?;
            if let Some(m) = method {
                c.train.method = m;
            }
            if let Some(a) = ablation {
                c.train.ablation = a;
            }
            c.runs = 1;
            c.validate()?;
            let d = c.dataset(0)?;
            let (model, result) = eval::run_single(&c.train, &c.model, &d, c.run_seed(0))?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            eval::write_json(&c, &out.join("config.json"))?;
            eval::write_json(&result, &out.join("result.json"))?;
            eval::write_json(&model.snapshot(), &out.join("model.json"))?;
            train::write_metrics_jsonl(&result.metrics, &out.join("metrics.jsonl"))?;
            eval::export_gamma_histogram(&result.gamma, &d.class_names, d.num_target_classes, &out.join("gamma.csv"))?;
            println!(
                "{}: target top-1 {:.4}, outlier/shared weight ratio {}",
                c.train.name(),
                result.final_target_accuracy,
                result.gamma_ratio.map_or("n/a".to_string(), |r| format!("{r:.4}"))
            );
        }
        Command::Compare {
            config,
            methods,
            seed,
            out,
        } => {
            let c = load_config(&config, seed)?;
            let variants = methods.iter().map(|m| parse_variant(m)).collect::<Result<Vec<_>>>()?;
            let table = eval::run_comparison(&c, &variants, Some(&out))?;
            for r in &table.rows {
                println!(
                    "{:<26} median top-1 {:.4}  median ratio {}",
                    r.name,
                    r.median_accuracy,
                    r.median_gamma_ratio.map_or("n/a".to_string(), |x| format!("{x:.4}"))
                );
            }
        }
        Command::SweepTargets {
            config,
            counts,
            seed,
            out,
        } => {
            let c = load_config(&config, seed)?;
            let base = match &c.data {
                DataSource::Benchmark(name) => data::default_benchmark(name)?,
                DataSource::Spec(s) => s.clone(),
                DataSource::Features(_) => {
                    return Err(Error::Config(
                        "sweep-targets regenerates data and needs a benchmark or spec source".into(),
                    ))
                }
            };
            for row in eval::run_target_count_sweep(&c, &base, &counts, Some(&out))? {
                println!(
                    "|C_T| = {:>2}: PATAN {:.4}  DANN {:.4}",
                    row.num_target_classes, row.patan_median_accuracy, row.dann_median_accuracy
                );
            }
        }
        Command::GradCheck { trials, seed } => {
            if trials == 0 {
                return Err(Error::Usage("--trials must be >= 1".into()));
            }
            let results = gradcheck::run_all(trials, seed)?;
            let mut failed = 0;
            for r in &results {
                let ok = r.max_rel_error < 1e-4;
                failed += usize::from(!ok);
                println!(
                    "{:<20} trials {:>3}  max rel error {:.3e}  (|n| >= 1e-6: {:.3e}, max abs {:.3e})  {}",
                    r.name,
                    r.trials,
                    r.max_rel_error,
                    r.max_rel_error_resolvable,
                    r.max_abs_error,
                    if ok { "ok" } else { "FAIL" }
                );
            }
            if failed > 0 {
                return Err(Error::Runtime(format!("{failed} gradient checks above 1e-4")));
            }
        }
        Command::ExportGamma { run, out } => {
            let c = ExperimentConfig::from_json(&read_input(&run.join("config.json"))?)?;
            let result: RunResult = serde_json::from_str(&read_input(&run.join("result.json"))?)
                .map_err(|e| Error::Input(format!("result.json: {e}")))?;
            let d = c.dataset(0)?;
            eval::export_gamma_histogram(&result.gamma, &d.class_names, d.num_target_classes, &out)?;
        }
        Command::ExportFeatures { run, out } => {
            let c = ExperimentConfig::from_json(&read_input(&run.join("config.json"))?)?;
            let snap: ModelSnapshot = serde_json::from_str(&read_input(&run.join("model.json"))?)
                .map_err(|e| Error::Input(format!("model.json: {e}")))?;
            let model = PatanModel::from_snapshot(&snap)?;
            let d = c.dataset(0)?;
            let all: Vec<_> = d.source.iter().chain(&d.target).cloned().collect();
            eval::export_features(&model, &all, c.train.pooling(), &out)?;
        }
    }
    Ok(())
}
