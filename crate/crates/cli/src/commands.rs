use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use braincl::metrics::MetricsSummary;
use braincl::synthdata::{self, SyntheticDataset};
use braincl::trainer::{self, MatrixFile, RunOutcome};

use crate::experiment::{Experiment, RunOverrides};
use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthSummary {
    pub generated: Vec<String>,
    pub skipped: Vec<String>,
}

fn manifest_matches(exp: &Experiment, spec: &synthdata::DatasetSpec) -> bool {
    let Ok(m) = synthdata::read_manifest(&exp.data_root, &spec.id) else {
        return false;
    };
    if &m.spec != spec || m.universe != exp.file.universe {
        return false;
    }
    let dir = synthdata::dataset_dir(&exp.data_root, &spec.id);
    m.train
        .iter()
        .chain(&m.test)
        .all(|e| dir.join(&e.file).is_file() && dir.join(&e.mask_file).is_file())
}

/// Writes every dataset of the experiment under its data root, leaving
/// datasets whose manifest already matches untouched.
pub fn cmd_synth(exp: &Experiment) -> Result<SynthSummary, CliError> {
    let mut summary = SynthSummary::default();
    for spec in &exp.file.datasets {
        if manifest_matches(exp, spec) {
            log::info!("dataset {} is up to date; skipped", spec.id);
            summary.skipped.push(spec.id.clone());
            continue;
        }
        let ds = synthdata::generate_dataset(spec, &exp.file.universe)?;
        let manifest = synthdata::save_dataset(&ds, &exp.file.universe, &exp.data_root)?;
        log::info!("dataset {} written to {}", spec.id, manifest.display());
        summary.generated.push(spec.id.clone());
    }
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub outcome: RunOutcome,
    pub metrics: Option<MetricsSummary>,
}

impl RunSummary {
    pub fn failed(&self) -> bool {
        self.outcome.matrix.failure.is_some()
    }
}

fn clear_previous_run(dir: &Path) -> Result<(), CliError> {
    // only directories this tool produced are cleared
    if dir.join("config.json").is_file() {
        fs::remove_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot clear {}: {e}", dir.display())))?;
    }
    Ok(())
}

/// Trains one sequence and writes its run directory.
pub fn cmd_run(exp: &Experiment, ov: &RunOverrides) -> Result<RunSummary, CliError> {
    let cfg = exp.file.sequence_config(ov)?;
    cmd_synth(exp)?;
    let datasets = cfg
        .datasets
        .iter()
        .map(|spec| {
            let (ds, universe) = synthdata::load_dataset(&exp.data_root, &spec.id)?;
            if universe != cfg.universe {
                return Err(CliError::Runtime(format!(
                    "dataset {} on disk was generated for a different universe",
                    spec.id
                )));
            }
            Ok(ds)
        })
        .collect::<Result<Vec<SyntheticDataset>, CliError>>()?;

    let run_dir = exp.output_root.join(&cfg.name);
    clear_previous_run(&run_dir)?;
    log::info!("run {} -> {}", cfg.name, run_dir.display());
    let outcome = trainer::run_sequence(&cfg, &datasets, Some(&run_dir))?;
    let metrics = if outcome.is_complete() && cfg.datasets.len() >= 2 {
        Some(outcome.train_test_matrix()?.summary()?)
    } else {
        None
    };
    Ok(RunSummary {
        run_dir,
        outcome,
        metrics,
    })
}

/// Console rendering of a run: the matrix followed by the metric row.
pub fn format_run(matrix: &MatrixFile, metrics: Option<&MetricsSummary>) -> String {
    let mut s = String::new();
    let w = matrix.datasets.iter().map(|d| d.len()).max().unwrap_or(0).max(6);
    let _ = write!(s, "{:>w$}", "after");
    for id in &matrix.datasets {
        let _ = write!(s, "  {id:>w$}");
    }
    s.push('\n');
    for (i, row) in matrix.dsc.iter().enumerate() {
        let _ = write!(s, "{:>w$}", matrix.datasets[i]);
        for v in row {
            let _ = write!(s, "  {v:>w$.4}");
        }
        s.push('\n');
    }
    if let Some(m) = metrics {
        let _ = writeln!(s, "\n{:>8} {:>8} {:>8} {:>8}", "AVG", "ILM", "BWT", "FWT");
        let _ = writeln!(s, "{:>8.4} {:>8.4} {:>8.4} {:>8.4}", m.avg, m.ilm, m.bwt, m.fwt);
    }
    if let Some(f) = &matrix.failure {
        let _ = writeln!(s, "\nrun failed: {f}");
    }
    s
}
