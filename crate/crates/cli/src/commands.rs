use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use glyco::cohort::{group_by_current, inclusion_filter, Cohort};
use glyco::evaluate::{evaluate_pipelines, train_gtms, GtmSet};
use glyco::experiment::{run_experiment, ExperimentConfig};
use glyco::pipeline::{reference_pipelines, PipelineSet};
use glyco::regimen::Group;
use glyco::synthgen::{generate, GroundTruth};

use crate::config::Overrides;
use crate::error::CliError;
use crate::manifest::{sidecar, Manifest};
use crate::service::{self, Snapshot};

#[derive(Debug, Parser)]
#[command(
    name = "glyco",
    version,
    about = "Learn and serve diabetes treatment-progression pipelines"
)]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Where to write the run manifest (default: next to the main output)
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with ground truth
    Synth {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-visit true rewards
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Keep only visits meeting the inclusion criteria
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Debias, train policy trees and compose pipelines for every group
    Train {
        #[arg(long)]
        cohort: PathBuf,
        /// Ground truth from `synth --truth`, for regret
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write the four reference pipelines
    Reference {
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare pipelines with the recorded prescriptions using GTMs
    Evaluate {
        #[arg(long)]
        pipelines: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// GTMs written by `train`
        #[arg(long, conflicts_with = "train")]
        gtms: Option<PathBuf>,
        /// Fit GTMs on this cohort instead of loading them
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Validate a pipeline document and write it in canonical form
    Export {
        #[arg(long)]
        pipelines: PathBuf,
        /// Keep only these groups
        #[arg(long = "group", value_delimiter = ',')]
        groups: Vec<Group>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve pipelines over HTTP
    Serve {
        /// Pipeline document; the reference pipelines when omitted
        #[arg(long)]
        pipelines: Option<PathBuf>,
        #[arg(long)]
        gtms: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn load_cohort(path: &Path) -> Result<Cohort, CliError> {
    glyco::cohort::load_cohort(path).map_err(|source| CliError::CohortFile {
        path: path.to_path_buf(),
        source,
    })
}

fn read_truth(path: &Path) -> Result<GroundTruth, CliError> {
    let text = read(path)?;
    GroundTruth::read_csv(text.as_bytes())
        .map_err(|e| CliError::Argument(format!("{}: {e}", path.display())))
}

pub fn load_pipelines(path: &Path) -> Result<PipelineSet, CliError> {
    Ok(PipelineSet::import_json(&read(path)?)?)
}

pub fn load_gtms(path: &Path) -> Result<GtmSet, CliError> {
    Ok(GtmSet::from_json(&read(path)?)?)
}

/// Drops visits whose current regimen has no pipeline group.
fn supported(cohort: &Cohort) -> Cohort {
    let grouped = group_by_current(cohort);
    if grouped.unsupported_count() > 0 {
        log::warn!(
            "skipping {} visits outside the four groups",
            grouped.unsupported_count()
        );
    }
    cohort.filtered(|v| v.group().is_some())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = cli.overrides.resolve()?;
    let mut m = Manifest::new(command_name(&cli.command), &cfg);
    if let Some(path) = &cli.overrides.config {
        m.input(path)?;
    }
    let default_manifest = match cli.command {
        Command::Synth { n, out, truth } => synth(&cfg, n, &out, truth.as_deref(), &mut m)?,
        Command::Filter { input, out } => filter(&input, &out, &mut m)?,
        Command::Train {
            cohort,
            truth,
            out_dir,
        } => train(&cfg, &cohort, truth.as_deref(), &out_dir, &mut m)?,
        Command::Reference { out } => {
            write(&out, reference_pipelines().export_json())?;
            m.output(&out)?;
            Some(sidecar(&out))
        }
        Command::Evaluate {
            pipelines,
            test,
            gtms,
            train,
            out_dir,
        } => evaluate(
            &cfg,
            &pipelines,
            &test,
            gtms.as_deref(),
            train.as_deref(),
            &out_dir,
            &mut m,
        )?,
        Command::Export {
            pipelines,
            groups,
            out,
        } => export(&pipelines, &groups, &out, &mut m)?,
        Command::Serve {
            pipelines,
            gtms,
            bind,
        } => {
            return serve(
                pipelines.as_deref(),
                gtms.as_deref(),
                bind,
                cli.manifest.as_deref(),
                &mut m,
            );
        }
    };
    if let Some(path) = cli.manifest.or(default_manifest) {
        m.write(&path)?;
    }
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth { .. } => "synth",
        Command::Filter { .. } => "filter",
        Command::Train { .. } => "train",
        Command::Reference { .. } => "reference",
        Command::Evaluate { .. } => "evaluate",
        Command::Export { .. } => "export",
        Command::Serve { .. } => "serve",
    }
}

fn synth(
    cfg: &ExperimentConfig,
    n: Option<usize>,
    out: &Path,
    truth_out: Option<&Path>,
    m: &mut Manifest,
) -> Result<Option<PathBuf>, CliError> {
    let mut gen = cfg.generator.clone();
    if let Some(n) = n {
        gen.n_visits = n;
    }
    m.config.generator = gen.clone();
    let (cohort, truth) = generate(&gen)?;
    let mut buf = Vec::new();
    cohort.write_csv(&mut buf)?;
    write(out, buf)?;
    m.output(out)?;
    if let Some(path) = truth_out {
        let mut buf = Vec::new();
        truth
            .write_csv(&mut buf)
            .map_err(|e| CliError::Argument(format!("writing truth: {e}")))?;
        write(path, buf)?;
        m.output(path)?;
    }
    log::info!("wrote {} visits to {}", cohort.len(), out.display());
    Ok(Some(sidecar(out)))
}

fn filter(input: &Path, out: &Path, m: &mut Manifest) -> Result<Option<PathBuf>, CliError> {
    let cohort = load_cohort(input)?;
    m.input(input)?;
    let kept = inclusion_filter(&cohort);
    let mut buf = Vec::new();
    kept.write_csv(&mut buf)?;
    write(out, buf)?;
    m.output(out)?;
    log::info!("kept {} of {} visits", kept.len(), cohort.len());
    Ok(Some(sidecar(out)))
}

fn train(
    cfg: &ExperimentConfig,
    cohort_path: &Path,
    truth_path: Option<&Path>,
    out_dir: &Path,
    m: &mut Manifest,
) -> Result<Option<PathBuf>, CliError> {
    let cohort = load_cohort(cohort_path)?;
    m.input(cohort_path)?;
    let truth = match truth_path {
        Some(p) => {
            m.input(p)?;
            Some(read_truth(p)?)
        }
        None => None,
    };
    let out = run_experiment(&cohort, cfg, truth.as_ref())?;
    create_dir(out_dir)?;

    let mut files: Vec<(PathBuf, Vec<u8>)> = vec![
        (
            out_dir.join("pipelines.json"),
            out.pipelines.export_json().into_bytes(),
        ),
        (
            out_dir.join("trees.json"),
            out.tree_reports_json().into_bytes(),
        ),
        (out_dir.join("gtms.json"), out.gtms.to_json().into_bytes()),
        (
            out_dir.join("report.json"),
            out.report.to_json().into_bytes(),
        ),
        (
            out_dir.join("report.txt"),
            out.report.to_table().into_bytes(),
        ),
    ];
    for (name, cohort) in [
        ("train.csv", out.train_cohort()),
        ("test.csv", out.test_cohort()),
    ] {
        let mut buf = Vec::new();
        cohort.write_csv(&mut buf)?;
        files.push((out_dir.join(name), buf));
    }
    for (name, matched) in &out.matched {
        let mut buf = Vec::new();
        matched
            .write_csv(&mut buf)
            .map_err(|e| CliError::Argument(format!("matched {name}: {e}")))?;
        files.push((out_dir.join(format!("matched_{name}.csv")), buf));
    }
    if let Some(regret) = &out.regret {
        let text = serde_json::to_string_pretty(regret).expect("regret serializes");
        files.push((out_dir.join("regret.json"), text.into_bytes()));
    }
    for (path, bytes) in &files {
        write(path, bytes)?;
        m.output(path)?;
    }
    print!("{}", out.report.to_table());
    Ok(Some(out_dir.join("manifest.json")))
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    cfg: &ExperimentConfig,
    pipelines_path: &Path,
    test_path: &Path,
    gtms_path: Option<&Path>,
    train_path: Option<&Path>,
    out_dir: &Path,
    m: &mut Manifest,
) -> Result<Option<PathBuf>, CliError> {
    let pipelines = load_pipelines(pipelines_path)?;
    m.input(pipelines_path)?;
    let test = supported(&inclusion_filter(&load_cohort(test_path)?));
    m.input(test_path)?;
    let gtms = match (gtms_path, train_path) {
        (Some(p), _) if p.exists() => {
            m.input(p)?;
            load_gtms(p)?
        }
        (Some(p), _) => {
            return Err(CliError::MissingGtm(format!(
                "{} does not exist",
                p.display()
            )))
        }
        (None, Some(p)) => {
            m.input(p)?;
            let train = supported(&inclusion_filter(&load_cohort(p)?));
            let mut gtm_cfg = cfg.gtm.clone();
            gtm_cfg.forest.seed = cfg.seed;
            train_gtms(&train, &gtm_cfg)?
        }
        (None, None) => {
            return Err(CliError::MissingGtm(
                "pass --gtms with the gtms.json written by `train`, or --train to fit them".into(),
            ))
        }
    };
    let report = evaluate_pipelines(&pipelines, &gtms, &test, &cfg.evaluation)?;
    for miss in &report.missing_gtm {
        log::warn!(
            "no GTM for {} / {}: {} visits excluded",
            miss.group,
            miss.option,
            miss.visits
        );
    }
    create_dir(out_dir)?;
    let mut disagreements = Vec::new();
    report.write_disagreements_csv(&mut disagreements)?;
    let mut files = vec![
        (out_dir.join("report.json"), report.to_json().into_bytes()),
        (out_dir.join("report.txt"), report.to_table().into_bytes()),
        (out_dir.join("disagreements.csv"), disagreements),
    ];
    if train_path.is_some() {
        files.push((out_dir.join("gtms.json"), gtms.to_json().into_bytes()));
    }
    for (path, bytes) in &files {
        write(path, bytes)?;
        m.output(path)?;
    }
    print!("{}", report.to_table());
    Ok(Some(out_dir.join("manifest.json")))
}

fn export(
    pipelines_path: &Path,
    groups: &[Group],
    out: &Path,
    m: &mut Manifest,
) -> Result<Option<PathBuf>, CliError> {
    let set = load_pipelines(pipelines_path)?;
    m.input(pipelines_path)?;
    let set = if groups.is_empty() {
        set
    } else {
        let mut keep = Vec::new();
        for g in groups {
            let p = set
                .get(*g)
                .ok_or_else(|| CliError::Argument(format!("no pipeline for group {g}")))?;
            keep.push(p.clone());
        }
        PipelineSet::new(keep)
    };
    write(out, set.export_json())?;
    m.output(out)?;
    Ok(Some(sidecar(out)))
}

fn serve(
    pipelines_path: Option<&Path>,
    gtms_path: Option<&Path>,
    bind: SocketAddr,
    manifest: Option<&Path>,
    m: &mut Manifest,
) -> Result<(), CliError> {
    let pipelines = match pipelines_path {
        Some(p) => {
            m.input(p)?;
            load_pipelines(p)?
        }
        None => reference_pipelines(),
    };
    let gtms = match gtms_path {
        Some(p) => {
            m.input(p)?;
            Some(load_gtms(p)?)
        }
        None => None,
    };
    if let Some(path) = manifest {
        m.write(path)?;
    }
    let snapshot = Arc::new(Snapshot::new(pipelines, gtms));
    log::info!("pipeline digest {}", snapshot.digest);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Serve(e.into()))?;
    rt.block_on(service::serve(snapshot, bind))?;
    Ok(())
}
