// SPDX-License-Identifier: MIT OR Apache-2.0

//! `saemnesia` command line front-end.
//!
//! Exit status: 0 on success, 2 on invalid input or files, 3 when training
//! diverges. Usage errors print the usage text and exit 2.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use saemnesia::concepts::{assign, centralization_report, compute_stats, Aggregation, ConceptAssignment, ScoreTable, DEFAULT_DELTA};
use saemnesia::config::RunConfig;
use saemnesia::eval::{score_profile_csv, Evaluator, UnlearnReport};
use saemnesia::sae::SaeParams;
use saemnesia::steering::{build_plan, uniform_multipliers, SteeringPlan};
use saemnesia::store::{self, CheckpointMeta, CHECKPOINT_MAGIC, DATASET_MAGIC};
use saemnesia::synth::generate_split;
use saemnesia::trainer::{assign_concepts, run_pipeline, train_phase};
use saemnesia::{Concept, Dataset, Domain, Error, Result};

const OUT_DIR_ENV: &str = "SAEMNESIA_OUT_DIR";

#[derive(Parser)]
#[command(name = "saemnesia", version, about = "Concept-aligned sparse autoencoders and single-latent unlearning")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for the generator and both training phases.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration; omitted keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Primary output file. Defaults to a fixed name in $SAEMNESIA_OUT_DIR.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Unsup,
    Sup,
    Pipeline,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggArg {
    Mean,
    Max,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled activation dataset.
    GenData {
        /// Generator split; 0 is the training split.
        #[arg(long, default_value_t = 0)]
        split: u32,
    },
    /// Train a sparse autoencoder.
    Train {
        #[arg(long, value_enum)]
        phase: PhaseArg,
        #[arg(long)]
        data: PathBuf,
        /// Starting checkpoint (required for the supervised phase).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Assignment for the supervised phase; computed from --init if absent.
        #[arg(long)]
        assignment: Option<PathBuf>,
    },
    /// Compute the per-latent concept score table.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also print the score profile of this concept as CSV.
        #[arg(long)]
        profile: Option<String>,
    },
    /// Assign each concept its highest-scoring latent.
    Assign {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, value_enum, default_value = "mean")]
        aggregation: AggArg,
    },
    /// Build a steering plan with one multiplier for every listed concept.
    Steer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        assignment: PathBuf,
        /// Concepts to include (names or `object:<id>`); all objects by default.
        #[arg(long = "concept")]
        concepts: Vec<String>,
        /// Multiplier; the configured default if absent.
        #[arg(long, allow_hyphen_values = true)]
        multiplier: Option<f64>,
    },
    /// Tune per-concept multipliers over the configured candidates.
    Sweep {
        #[command(flatten)]
        eval: EvalArgs,
        /// Also write the uniform-multiplier curve as CSV.
        #[arg(long)]
        uniform_csv: Option<PathBuf>,
    },
    /// Report unlearning and retention for each concept of a plan.
    Eval {
        #[command(flatten)]
        eval: EvalArgs,
        /// Evaluate only this concept.
        #[arg(long)]
        concept: Option<String>,
    },
    /// Erase concepts one after another and report each step.
    SeqEval {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Print a summary of any artifact.
    Inspect { file: PathBuf },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    /// Evaluation dataset.
    #[arg(long)]
    data: PathBuf,
    /// Dataset the probes are fit on; --data if absent.
    #[arg(long)]
    probe_data: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::from_toml(&text)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(common: &Common, default_name: &str) -> Result<PathBuf> {
    let path = match &common.out {
        Some(p) => p.clone(),
        None => PathBuf::from(std::env::var_os(OUT_DIR_ENV).unwrap_or_else(|| ".".into())).join(default_name),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(store::StoreError::from)?;
    }
    Ok(path)
}

/// `m.saem` + `assignment.json` -> `m.assignment.json`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn load_model(path: &Path) -> Result<(SaeParams, CheckpointMeta)> {
    Ok(store::load_checkpoint(path)?)
}

fn load_data(path: &Path) -> Result<Dataset> {
    Ok(store::load_dataset(path)?)
}

fn concepts_by_name(data: &Dataset, names: &[String]) -> Result<Vec<Concept>> {
    names.iter().map(|n| data.find_concept(n)).collect()
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value serializes"));
}

fn report_json(data: &Dataset, r: &UnlearnReport) -> serde_json::Value {
    json!({
        "concept": data.concept_name(r.target),
        "ua": r.ua,
        "ira": r.ira,
        "cra": r.cra,
        "average": r.average,
    })
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let cfg = resolve_config(common)?;
    eprintln!("# resolved config\n{}", cfg.to_toml());
    match cli.command {
        Command::GenData { split } => {
            let data = generate_split(&cfg.synth, split)?;
            let out = out_path(common, "data.saea")?;
            store::save_dataset(&out, &data)?;
            eprintln!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Train { phase, data, init, assignment } => train(common, &cfg, phase, &data, init, assignment)?,
        Command::Score { model, data, profile } => {
            let (model, _) = load_model(&model)?;
            let data = load_data(&data)?;
            let table = ScoreTable::from_model(&model, &data, DEFAULT_DELTA)?;
            let out = out_path(common, "scores.json")?;
            store::save_json(&out, "scores", &table)?;
            if let Some(name) = profile {
                print!("{}", score_profile_csv(&table, data.find_concept(&name)?)?);
            }
            eprintln!("wrote score table to {}", out.display());
        }
        Command::Assign { scores, aggregation } => {
            let table: ScoreTable = store::load_json(&scores, "scores")?;
            let present: Vec<Concept> = table
                .concepts
                .iter()
                .copied()
                .filter(|&c| (0..table.timesteps).any(|t| table.is_present(c, t)))
                .collect();
            let agg = match aggregation {
                AggArg::Mean => Aggregation::Mean,
                AggArg::Max => Aggregation::Max,
            };
            let assignment = assign(&table, &present, agg)?;
            let report = centralization_report(&table, &assignment, cfg.steering.margin)?;
            let dominant = report.iter().filter(|r| r.dominant).count();
            println!("{dominant}/{} concepts dominated by their latent", report.len());
            let out = out_path(common, "assignment.json")?;
            store::save_json(&out, "assignment", &assignment)?;
            store::save_json(&sibling(&out, "centralization.json"), "centralization", &report)?;
        }
        Command::Steer { model, data, assignment, concepts, multiplier } => {
            let (model, _) = load_model(&model)?;
            let data = load_data(&data)?;
            let assignment: ConceptAssignment = store::load_json(&assignment, "assignment")?;
            let concepts = if concepts.is_empty() {
                assignment.concepts().filter(|c| c.domain == Domain::Object).collect()
            } else {
                concepts_by_name(&data, &concepts)?
            };
            let g = multiplier.unwrap_or(cfg.steering.default_multiplier);
            let stats = compute_stats(&model, &data)?;
            let plan = build_plan(&stats, &assignment, &concepts, &uniform_multipliers(&concepts, g))?;
            let out = out_path(common, "plan.json")?;
            store::save_json(&out, "plan", &plan)?;
            eprintln!("plan for {} concepts written to {}", plan.entries.len(), out.display());
        }
        Command::Sweep { eval, uniform_csv } => {
            let (ev, plan) = evaluator(&eval)?;
            let sweep = ev.tune_multipliers(&plan, &cfg.steering.candidates)?;
            let mut tuned = plan.clone();
            for (c, g) in sweep.best_multipliers() {
                tuned = tuned.with_multiplier(c, g)?;
            }
            let out = out_path(common, "plan.tuned.json")?;
            store::save_json(&out, "plan", &tuned)?;
            store::save_json(&sibling(&out, "sweep.json"), "sweep", &sweep)?;
            if let Some(path) = uniform_csv {
                let curve = ev.uniform_sweep(&plan, &cfg.steering.candidates)?;
                store::write_atomic(&path, curve.to_csv()?.as_bytes())?;
            }
            println!(
                "{} evaluations ({} per concept)",
                sweep.evaluations,
                sweep.evaluations_per_concept()
            );
        }
        Command::Eval { eval, concept } => {
            let (ev, plan) = evaluator(&eval)?;
            let targets = match concept {
                Some(name) => vec![ev.data().find_concept(&name)?],
                None => plan.concepts(),
            };
            let reports = targets
                .iter()
                .map(|&c| ev.evaluate_unlearning(&plan, c))
                .collect::<Result<Vec<_>>>()?;
            let out = out_path(common, "eval.json")?;
            store::save_json(&out, "unlearn-reports", &reports)?;
            print_json(&json!(reports.iter().map(|r| report_json(ev.data(), r)).collect::<Vec<_>>()));
        }
        Command::SeqEval { eval } => {
            let (ev, plan) = evaluator(&eval)?;
            let order = concepts_by_name(ev.data(), &cfg.eval.sequential_order)?;
            let report = ev.sequential_unlearning(&plan, &order)?;
            let out = out_path(common, "sequential.json")?;
            store::save_json(&out, "sequential", &report)?;
            print!("{}", report.to_csv()?);
        }
        Command::Inspect { file } => inspect(&file)?,
    }
    Ok(())
}

fn evaluator(a: &EvalArgs) -> Result<(Evaluator, SteeringPlan)> {
    let (model, _) = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    let probe = match &a.probe_data {
        Some(p) => load_data(p)?,
        None => data.clone(),
    };
    let plan: SteeringPlan = store::load_json(&a.plan, "plan")?;
    Ok((Evaluator::new(&model, &probe, &data)?, plan))
}

fn train(
    common: &Common,
    cfg: &RunConfig,
    phase: PhaseArg,
    data: &Path,
    init: Option<PathBuf>,
    assignment: Option<PathBuf>,
) -> Result<()> {
    let data = load_data(data)?;
    let out = out_path(common, "model.saem")?;
    let mut unsup = cfg.unsupervised.clone();
    let mut sup = cfg.supervised.clone();
    unsup.log_path = Some(sibling(&out, "unsup.jsonl"));
    sup.log_path = Some(sibling(&out, "sup.jsonl"));
    let meta_for = |p: &SaeParams, tc: &saemnesia::TrainConfig| {
        CheckpointMeta::for_params(p, tc.phase.name(), tc.seed, Some(tc.weights), tc.epochs)
    };
    match phase {
        PhaseArg::Pipeline => {
            let result = run_pipeline(&data, cfg.model, &unsup, &sup)?;
            store::save_checkpoint(&sibling(&out, "pretrained.saem"), &result.pretrained, &meta_for(&result.pretrained, &unsup))?;
            store::save_checkpoint(&out, &result.model, &meta_for(&result.model, &sup))?;
            store::save_json(&sibling(&out, "assignment.json"), "assignment", &result.assignment)?;
        }
        PhaseArg::Unsup | PhaseArg::Sup => {
            let start = match &init {
                Some(p) => load_model(p)?.0,
                None if matches!(phase, PhaseArg::Sup) => {
                    return Err(Error::InvalidArgument("--phase sup needs --init".into()));
                }
                None => saemnesia::trainer::init_model(cfg.model, &data, unsup.seed)?,
            };
            if matches!(phase, PhaseArg::Unsup) {
                let (model, _) = train_phase(&start, &data, &unsup, None)?;
                store::save_checkpoint(&out, &model, &meta_for(&model, &unsup))?;
            } else {
                let assignment = match assignment {
                    Some(p) => store::load_json(&p, "assignment")?,
                    None => assign_concepts(&start, &data)?,
                };
                let (model, _) = train_phase(&start, &data, &sup, Some(&assignment))?;
                store::save_checkpoint(&out, &model, &meta_for(&model, &sup))?;
                store::save_json(&sibling(&out, "assignment.json"), "assignment", &assignment)?;
            }
        }
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(store::StoreError::from)?;
    if bytes.starts_with(&CHECKPOINT_MAGIC) {
        let (_, meta) = store::decode_checkpoint(&bytes)?;
        print_json(&json!({ "kind": "checkpoint", "header": meta }));
    } else if bytes.starts_with(&DATASET_MAGIC) {
        let data = store::decode_dataset(&bytes)?;
        print_json(&json!({
            "kind": "dataset",
            "d": data.d,
            "timesteps": data.timesteps,
            "samples": data.len(),
            "objects": data.objects,
            "styles": data.styles,
        }));
    } else {
        let value: serde_json::Value = serde_json::from_slice(&bytes)
            .map_err(|_| Error::InvalidArgument(format!("{}: not a known artifact", path.display())))?;
        print_json(&json!({ "kind": "json", "format": value["format"], "version": value["version"] }));
    }
    Ok(())
}
