//! `layercake` — layer-importance analysis, block surgery and frozen
//! continual pretraining on desk-scale decoder-only transformers.
//!
//! Exit codes: 0 success, 2 user/config error, 3 numerical failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use layercake_core::checkpoint::{Checkpoint, FreezeMask};
use layercake_core::corpus::{gen_domain_mcq, gen_general_mcq, mix_corpora, Corpus, McqTask, Split};
use layercake_core::eval::{eval_suite, forgetting_csv, forgetting_report};
use layercake_core::model::init_model;
use layercake_core::probe::importance_report;
use layercake_core::surgery::{apply_plan_with, parse_plan, summarize_plan, ReinitAveraging};
use layercake_core::train::cpt_train;
use layercake_core::Error as CoreError;

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "layercake",
    about = "Layer-importance probes, block surgery and frozen continual pretraining",
    after_help = PLAN_GRAMMAR_HELP,
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Path to the run config JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's run seed (data shuffling, metadata).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for parallel evaluation (results are identical
    /// for any value).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Allow overwriting files that already exist in the run directory.
    #[arg(long, global = true)]
    overwrite: bool,
}

const PLAN_GRAMMAR_HELP: &str = "\
Plan notation (applies to the post-deletion block stack, counts must sum to L - D):
  (a+1)xk   k segments of a untouched blocks, one trainable block inserted atop each
  N         a run of N untouched blocks
  |1        (trailing) the final block is trainable, reinitialized from deleted blocks
  ~         inserted blocks average their two neighboring blocks
  =         inserted blocks copy the source block with zeroed output projections
            (exactly output-preserving)
  !D        delete the D deepest blocks first
Examples: \"(4+1)x8\" even expansion, \"(2+1)x8|16\" shallow-only,
\"(2+1)x8|13|1~!2\" shallow expansion + delete 2 + reinit final.";

#[derive(Subcommand)]
enum Command {
    /// Parse a plan and print its block/parameter accounting.
    Plan(PlanArgs),
    /// Run the angular-distance, removal and insertion probes.
    Analyze(AnalyzeArgs),
    /// Apply an expansion plan to a checkpoint.
    Surgery(SurgeryArgs),
    /// Pretrain or continually pretrain under a freeze mask.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the general and domain suites.
    Eval(EvalArgs),
    /// Paired base-vs-tuned injection/forgetting report.
    Report(ReportArgs),
}

#[derive(Args)]
struct PlanArgs {
    /// Plan notation, e.g. "(2+1)x8|13|1~!2".
    notation: String,
    /// Layer count of the model the plan applies to (defaults to the
    /// config's model).
    #[arg(long)]
    layers: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Checkpoint to probe (defaults to the config's inputs.checkpoint).
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Args)]
struct SurgeryArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Plan notation (defaults to the config's plan).
    #[arg(long)]
    plan: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Starting checkpoint; a fresh model is initialized from the
    /// config when absent.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Freeze mask JSON; everything is trainable when absent.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Training corpus; `mix` interleaves domain and general at the
    /// config's token ratio (default 5:2).
    #[arg(long, value_parser = ["general", "domain", "mix"], default_value = "general")]
    corpus: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Base checkpoint (defaults to inputs.base_checkpoint).
    #[arg(long)]
    base: Option<PathBuf>,
    /// Tuned checkpoint (defaults to inputs.tuned_checkpoint).
    #[arg(long)]
    tuned: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Error plumbing: user/config errors exit 2, numerical failures exit 3.
// ---------------------------------------------------------------------------

enum CliError {
    User(String),
    Numeric(String),
}

impl CliError {
    fn user(msg: impl Into<String>) -> Self {
        CliError::User(msg.into())
    }

    fn report(&self) -> ExitCode {
        match self {
            CliError::User(msg) => {
                eprintln!("error: config: {msg}");
                ExitCode::from(2)
            }
            CliError::Numeric(msg) => {
                eprintln!("error: numeric: {msg}");
                ExitCode::from(3)
            }
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match &e {
            CoreError::Diverged { .. } | CoreError::NonFiniteGradient { .. } => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::User(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::User(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        layercake_core::configure_threads(n);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(CliError::user)?,
        None => RunConfig::example(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.hyper.shuffle_seed = config.seed;
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    let ctx = Ctx {
        config,
        overwrite: cli.overwrite,
        config_was_given: cli.config.is_some(),
    };
    match cli.command {
        Command::Plan(args) => cmd_plan(&ctx, args),
        Command::Analyze(args) => cmd_analyze(&ctx, args),
        Command::Surgery(args) => cmd_surgery(&ctx, args),
        Command::Train(args) => cmd_train(&ctx, args),
        Command::Eval(args) => cmd_eval(&ctx, args),
        Command::Report(args) => cmd_report(&ctx, args),
    }
}

struct Ctx {
    config: RunConfig,
    overwrite: bool,
    config_was_given: bool,
}

impl Ctx {
    fn out_dir(&self) -> &Path {
        &self.config.out_dir
    }

    /// Path for an output file; refuses to clobber without --overwrite.
    fn out_file(&self, name: &str) -> CliResult<PathBuf> {
        let dir = self.out_dir();
        std::fs::create_dir_all(dir)?;
        let path = dir.join(name);
        if path.exists() && !self.overwrite {
            return Err(CliError::user(format!(
                "{} already exists (pass --overwrite to replace it)",
                path.display()
            )));
        }
        Ok(path)
    }

    fn write_out(&self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.out_file(name)?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }

    /// Persist the exact config this command ran with.
    fn persist_config(&self, command: &str) -> CliResult<()> {
        let json = serde_json::to_vec_pretty(&self.config)?;
        self.write_out(&format!("resolved_config.{command}.json"), &json)?;
        Ok(())
    }

    fn load_ckpt(&self, flag: &Option<PathBuf>, which: &str) -> CliResult<Checkpoint> {
        let path = flag
            .clone()
            .or_else(|| match which {
                "base" => self.config.inputs.base_checkpoint.clone(),
                "tuned" => self.config.inputs.tuned_checkpoint.clone(),
                _ => self.config.inputs.checkpoint.clone(),
            })
            .ok_or_else(|| {
                CliError::user(format!(
                    "no {which} checkpoint given (--ckpt/--base/--tuned or config inputs)"
                ))
            })?;
        if !path.exists() {
            return Err(CliError::user(format!(
                "checkpoint not found: {}",
                path.display()
            )));
        }
        Ok(Checkpoint::load(&path)?)
    }

    fn heldout(&self, suite: &str) -> CliResult<Corpus> {
        let (spec, id) = match suite {
            "general" => (&self.config.data.general_heldout, "general-heldout"),
            _ => (&self.config.data.domain_heldout, "domain-heldout"),
        };
        Ok(spec.materialize(id, Split::Heldout)?)
    }

    fn train_corpus(&self, suite: &str) -> CliResult<Corpus> {
        if suite == "mix" {
            let domain = self
                .config
                .data
                .domain_train
                .materialize("domain-train", Split::Train)?;
            let general = self
                .config
                .data
                .general_train
                .materialize("general-train", Split::Train)?;
            return Ok(mix_corpora(&domain, &general, self.config.data.mix_ratio)?);
        }
        let (spec, id) = match suite {
            "general" => (&self.config.data.general_train, "general-train"),
            _ => (&self.config.data.domain_train, "domain-train"),
        };
        Ok(spec.materialize(id, Split::Train)?)
    }

    fn tasks(&self, suite: &str) -> CliResult<Vec<McqTask>> {
        let spec = match suite {
            "general" => &self.config.data.general_tasks,
            _ => &self.config.data.domain_tasks,
        };
        let tasks = match suite {
            "general" => gen_general_mcq(spec.seed, spec.n_tasks)?,
            _ => gen_domain_mcq(spec.seed, spec.n_tasks)?,
        };
        Ok(tasks)
    }
}

fn cmd_plan(ctx: &Ctx, args: PlanArgs) -> CliResult<()> {
    let layers = args.layers.unwrap_or(ctx.config.model.n_layers);
    let plan = parse_plan(&args.notation, layers)?;
    let mut model = ctx.config.model.clone();
    model.n_layers = layers;
    let summary = summarize_plan(&plan, &model)?;
    println!(
        "{} on {} blocks: {} blocks, {} trainable",
        summary.notation, summary.blocks_before, summary.blocks_after, summary.trainable_blocks
    );
    println!(
        "  insertions: {} ({})   deleted layers: {:?}   final reinit: {}",
        summary.n_insertions, summary.init_mode, summary.deleted_layers, summary.final_reinit
    );
    println!(
        "  params: {} total ({} before), {} trainable",
        summary.params_after, summary.params_before, summary.trainable_params
    );
    let json = serde_json::to_string_pretty(&summary)?;
    println!("{json}");
    if ctx.config_was_given {
        ctx.write_out("plan_summary.json", json.as_bytes())?;
    }
    Ok(())
}

fn cmd_analyze(ctx: &Ctx, args: AnalyzeArgs) -> CliResult<()> {
    let ckpt = ctx.load_ckpt(&args.ckpt, "input")?;
    let mut corpus = ctx.heldout("general")?;
    let mut tasks = ctx.tasks("general")?;
    if let Some(max) = ctx.config.probe.max_examples {
        corpus.sequences.truncate(max);
        tasks.truncate(max);
    }
    let report = importance_report(&ckpt, &corpus, &tasks, ctx.config.probe.capture_position)?;
    ctx.persist_config("analyze")?;
    let csv_path = ctx.write_out("importance.csv", report.to_csv().as_bytes())?;
    let meta = report.metadata_json(ctx.config.seed)?;
    ctx.write_out("importance.json", meta.as_bytes())?;
    println!(
        "analyzed {} layers over {} sequences / {} tasks -> {}",
        report.angular.len(),
        report.n_examples,
        tasks.len(),
        csv_path.display()
    );
    for (i, a) in report.angular.iter().enumerate() {
        println!(
            "  layer {i:>2}: AD {a:.4}  removal d_nats {:+.4}  insert(avg) d_nats {:+.4}",
            report.removal[i].d_nats, report.insert_avg[i].d_nats
        );
    }
    Ok(())
}

fn cmd_surgery(ctx: &Ctx, args: SurgeryArgs) -> CliResult<()> {
    let ckpt = ctx.load_ckpt(&args.ckpt, "input")?;
    let notation = args
        .plan
        .clone()
        .or_else(|| ctx.config.plan.clone())
        .ok_or_else(|| CliError::user("no plan given (--plan or config.plan)"))?;
    let mut plan = parse_plan(&notation, ckpt.n_layers())?;
    plan.source_policy = ctx.config.surgery.source_policy;
    let reinit = if ctx.config.surgery.reinit_include_survivor {
        ReinitAveraging::IncludeSurvivor
    } else {
        ReinitAveraging::DiscardedOnly
    };
    let (out, mask) = apply_plan_with(&ckpt, &plan, reinit)?;
    let summary = summarize_plan(&plan, ckpt.config())?;

    ctx.persist_config("surgery")?;
    let ckpt_path = ctx.out_file("surgered.ckpt")?;
    out.save(&ckpt_path)?;
    let mask_path = ctx.out_file("freeze_mask.json")?;
    mask.save(&mask_path)?;
    ctx.write_out(
        "plan_summary.json",
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    println!(
        "applied {}: {} -> {} blocks, {} trainable -> {}",
        summary.notation,
        summary.blocks_before,
        summary.blocks_after,
        summary.trainable_blocks,
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_train(ctx: &Ctx, args: TrainArgs) -> CliResult<()> {
    let ckpt = if args.ckpt.is_some() || ctx.config.inputs.checkpoint.is_some() {
        ctx.load_ckpt(&args.ckpt, "input")?
    } else {
        eprintln!("note: no input checkpoint, initializing a fresh model from the config");
        init_model(&ctx.config.model)?
    };
    let mask = match args.mask.as_ref().or(ctx.config.inputs.freeze_mask.as_ref()) {
        Some(path) => {
            let m = FreezeMask::load(path)?;
            m.validate_against(&ckpt)?;
            m
        }
        None => {
            eprintln!("note: no freeze mask, training all parameters");
            FreezeMask::all_trainable(&ckpt)
        }
    };
    let corpus = ctx.train_corpus(&args.corpus)?;
    ctx.persist_config("train")?;
    // Reserve the output names before the long run so clobber errors
    // surface immediately.
    let ckpt_path = ctx.out_file("checkpoint.ckpt")?;
    let curves_path = ctx.out_file("curves.csv")?;
    let record_path = ctx.out_file("record.json")?;

    match cpt_train(&ckpt, &mask, &corpus, &ctx.config.hyper) {
        Ok((tuned, record)) => {
            if record.all_frozen {
                eprintln!("warning: every tensor is frozen; checkpoint is unchanged");
            }
            tuned.save(&ckpt_path)?;
            std::fs::write(&curves_path, record.curves_csv())?;
            std::fs::write(&record_path, serde_json::to_vec_pretty(&record)?)?;
            println!(
                "trained {} steps on {} ({} tokens): loss {:.4} -> {:.4}, frozen digests {}",
                record.steps,
                corpus.id,
                corpus.n_tokens(),
                record.initial_loss().unwrap_or(f64::NAN),
                record.final_loss().unwrap_or(f64::NAN),
                if record.frozen_digests_match() {
                    "held"
                } else {
                    "CHANGED"
                }
            );
            println!("wrote {}", ckpt_path.display());
            Ok(())
        }
        Err(CoreError::Diverged { step, last_good }) => {
            last_good.save(&ckpt_path)?;
            Err(CliError::Numeric(format!(
                "training diverged at step {step}; last good checkpoint saved to {}",
                ckpt_path.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_eval(ctx: &Ctx, args: EvalArgs) -> CliResult<()> {
    let ckpt = ctx.load_ckpt(&args.ckpt, "input")?;
    ctx.persist_config("eval")?;
    let mut csv = String::from("suite,metric,value\n");
    for suite in ["general", "domain"] {
        let corpus = ctx.heldout(suite)?;
        let tasks = ctx.tasks(suite)?;
        let m = eval_suite(&ckpt, &corpus, &tasks)?;
        println!(
            "{suite:>8}: nats {:.4}  ppl {:.2}  mcq accuracy {:.3}",
            m.nats, m.ppl, m.accuracy
        );
        csv.push_str(&format!("{suite},nats,{}\n", m.nats));
        csv.push_str(&format!("{suite},ppl,{}\n", m.ppl));
        csv.push_str(&format!("{suite},accuracy,{}\n", m.accuracy));
    }
    let path = ctx.write_out("eval.csv", csv.as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_report(ctx: &Ctx, args: ReportArgs) -> CliResult<()> {
    let base = ctx.load_ckpt(&args.base, "base")?;
    let tuned = ctx.load_ckpt(&args.tuned, "tuned")?;
    let gen_h = ctx.heldout("general")?;
    let dom_h = ctx.heldout("domain")?;
    let gen_t = ctx.tasks("general")?;
    let dom_t = ctx.tasks("domain")?;
    let rows = forgetting_report(&base, &tuned, &gen_h, &dom_h, &gen_t, &dom_t)?;
    ctx.persist_config("report")?;
    let path = ctx.write_out("forgetting.csv", forgetting_csv(&rows).as_bytes())?;
    println!("suite    metric     base       tuned      delta (improvement-positive)");
    for r in &rows {
        println!(
            "{:<8} {:<9} {:>10.4} {:>10.4} {:>+10.4}",
            r.suite, r.metric, r.base, r.tuned, r.delta
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}
