use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use s2ut_core::error::Error;
use s2ut_core::experiment::formats::{read_jsonl, write_atomic, write_jsonl};
use s2ut_core::experiment::report::correlation_heatmap;
use s2ut_core::experiment::{
    analyze_correlation, report_tables, ArtifactStore, CellSpec, EvalReport, ExperimentConfig, Pipeline, STORE_ENV,
};
use s2ut_core::synthworld::Split;

const REPORTS_KIND: &str = "eval-report";

#[derive(Parser)]
#[command(name = "s2ut", version, about = "Speech-to-unit translation experiments on a synthetic world")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML); defaults are used when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Artifact store root.
    #[arg(long, global = true, env = STORE_ENV, default_value = "s2ut-store")]
    store: PathBuf,
    /// Only run these cells (e.g. `single-G`); all cells when omitted.
    #[arg(long = "cell", global = true)]
    cells: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the parallel corpus and source renderings.
    GenData,
    /// Render target speech for every configured system.
    Synth,
    /// Fit the unit codebook and encode every system's renderings.
    Unitize,
    /// Build the toy ASR, the CER table and quality tokens.
    PrepTargets {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every seed of the selected cells.
    Train,
    /// Decode the test split with the trained models.
    Translate,
    /// Score decodes and write `reports.jsonl`.
    Evaluate {
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Pearson correlation of dev-split unit distributions.
    AnalyzeCorrelation {
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Run every stage and write reports and tables.
    RunExperiment {
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Render tables and plots from a reports file.
    Report {
        #[arg(long, default_value = "results/reports.jsonl")]
        reports: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>().map(Error::root) {
        Some(Error::Training(_)) => 3,
        Some(Error::Config(_)) | None => 1,
        Some(_) => 2,
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

fn selected_cells(cfg: &ExperimentConfig, wanted: &[String]) -> Result<Vec<CellSpec>> {
    for w in wanted {
        if !cfg.cells.iter().any(|c| &c.id() == w) {
            let known: Vec<String> = cfg.cells.iter().map(CellSpec::id).collect();
            return Err(Error::Config(format!("unknown cell `{w}`; known cells: {}", known.join(", "))).into());
        }
    }
    Ok(cfg
        .cells
        .iter()
        .filter(|c| wanted.is_empty() || wanted.contains(&c.id()))
        .cloned()
        .collect())
}

fn write_reports(out: &Path, reports: &[EvalReport], cfg: &ExperimentConfig) -> Result<()> {
    write_jsonl(&out.join("reports.jsonl"), REPORTS_KIND, reports)?;
    let files = report_tables(reports, &cfg.systems);
    files.write_to(out)?;
    println!("wrote {} report files to {}", files.files.len() + 1, out.display());
    Ok(())
}

fn evaluate(p: &Pipeline<'_>, cells: &[CellSpec]) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::with_capacity(cells.len());
    for c in cells {
        let r = p.run_cell(c)?;
        println!("{}: BLEU {:.2} ± {:.2}, CER {:.2}%", r.cell_id, r.bleu_mean, r.bleu_std, 100.0 * r.cer_mean);
        reports.push(r);
    }
    Ok(reports)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.common.config.as_deref())?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    if let Command::Report { reports, out } = &cli.command {
        let loaded: Vec<EvalReport> =
            read_jsonl(reports, REPORTS_KIND).with_context(|| format!("reading {}", reports.display()))?;
        let files = report_tables(&loaded, &cfg.systems);
        files.write_to(out)?;
        println!("wrote {} report files to {}", files.files.len(), out.display());
        return Ok(());
    }
    let store = ArtifactStore::open(&cli.common.store)?;
    let p = Pipeline::new(&cfg, &store)?;
    let cells = selected_cells(&cfg, &cli.common.cells)?;
    match cli.command {
        Command::GenData => {
            let n = p.corpus()?.len();
            p.sources()?;
            println!("{n} utterances");
        }
        Command::Synth => {
            for s in &cfg.systems {
                let r = p.synth(&s.system_id)?;
                println!("{}: {} renderings", s.system_id, r.features.len());
            }
        }
        Command::Unitize => {
            let cb = p.codebook()?;
            println!("codebook: k={} inertia={:.4}", cb.k(), cb.inertia);
            for s in &cfg.systems {
                p.units(&s.system_id)?;
            }
        }
        Command::PrepTargets { out } => {
            p.asr()?;
            let table = p.cer_table()?;
            let train = p.utt_ids(Split::Train)?;
            for s in &cfg.systems {
                let ids: std::collections::BTreeSet<String> = train.iter().cloned().collect();
                let m = table.restrict(&ids, std::slice::from_ref(&s.system_id)).mean_for(&s.system_id);
                println!("{}: train CER {:.2}%", s.system_id, 100.0 * m.unwrap_or(f64::NAN));
            }
            if let Some(out) = out {
                write_atomic(&out.join("cer.csv"), table.to_csv().as_bytes())?;
            }
        }
        Command::Train => {
            for cell in &cells {
                for &seed in &cell.seeds {
                    let t = p.train_cell(&cell.mode, seed)?;
                    let best = t.log.iter().filter_map(|r| r.dev_loss).fold(f64::INFINITY, f64::min);
                    println!("{} seed {seed}: step {} dev loss {best:.4}", cell.id(), t.checkpoint.step);
                }
            }
        }
        Command::Translate => {
            for cell in &cells {
                for &seed in &cell.seeds {
                    let d = p.decode(&p.train_cell(&cell.mode, seed)?)?;
                    println!("{} seed {seed}: {} utterances decoded", cell.id(), d.records.len());
                }
            }
        }
        Command::Evaluate { out } => {
            let reports = evaluate(&p, &cells)?;
            write_jsonl(&out.join("reports.jsonl"), REPORTS_KIND, &reports)?;
        }
        Command::RunExperiment { out } => {
            let reports = evaluate(&p, &cells)?;
            write_reports(&out, &reports, &cfg)?;
        }
        Command::AnalyzeCorrelation { out } => {
            let m = analyze_correlation(&cfg, &store, Some(&out))?;
            write_atomic(&out.join("correlation.svg"), correlation_heatmap(&m).as_bytes())?;
            print!("{}", m.to_csv());
        }
        Command::Report { .. } | Command::ShowConfig => bail!("handled above"),
    }
    Ok(())
}
