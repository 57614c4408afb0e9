//! Cross-run comparison tables and forgetting-curve plots, built only from
//! the files already present in run directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use braincl::metrics::{MetricsSummary, TrainTestMatrix};
use braincl::trainer::{MatrixFile, SequenceConfig};

use crate::CliError;

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub name: String,
    /// Preset name when the strategy matches one, otherwise its label.
    pub strategy: String,
    pub seed: Option<u64>,
    pub matrix: TrainTestMatrix,
    pub summary: MetricsSummary,
    /// Population std of the first dataset's DSC over all sessions.
    pub first_dataset_std: f64,
}

/// Mean and std over the runs of one strategy.
#[derive(Debug, Clone)]
pub struct GroupRow {
    pub strategy: String,
    pub runs: usize,
    pub avg: (f64, f64),
    pub ilm: (f64, f64),
    pub bwt: (f64, f64),
    pub fwt: (f64, f64),
    pub first_dataset_std: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct Report {
    pub runs: Vec<RunRecord>,
    pub groups: Vec<GroupRow>,
    pub skipped: Vec<PathBuf>,
    pub files: Vec<PathBuf>,
}

pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    (values.iter().sum::<f64>() / values.len() as f64, population_std(values))
}

fn load_run(dir: &Path) -> Result<RunRecord, String> {
    let text = fs::read_to_string(dir.join("matrix.json")).map_err(|e| format!("no matrix.json ({e})"))?;
    let mf: MatrixFile = serde_json::from_str(&text).map_err(|e| format!("unreadable matrix.json ({e})"))?;
    if let Some(f) = &mf.failure {
        return Err(format!("run failed: {f}"));
    }
    let matrix = TrainTestMatrix::new(mf.datasets.clone(), mf.dsc.clone()).map_err(|e| e.to_string())?;
    let summary = matrix.summary().map_err(|e| e.to_string())?;
    let cfg: Option<SequenceConfig> = fs::read_to_string(dir.join("config.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let name = cfg
        .as_ref()
        .map(|c| c.name.clone())
        .or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_default();
    let strategy = mf
        .strategy
        .preset_name()
        .map(str::to_string)
        .unwrap_or_else(|| mf.strategy.label());
    Ok(RunRecord {
        dir: dir.to_path_buf(),
        name,
        strategy,
        seed: cfg.map(|c| c.seed),
        first_dataset_std: population_std(&matrix.forgetting_curve(0)),
        matrix,
        summary,
    })
}

/// Expands each path to itself if it holds `matrix.json`, otherwise to its
/// immediate subdirectories (sorted).
fn expand(paths: &[PathBuf]) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for p in paths {
        if p.join("matrix.json").is_file() || !p.is_dir() {
            out.push(p.clone());
            continue;
        }
        let mut subs: Vec<PathBuf> = fs::read_dir(p)
            .map(|rd| rd.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect())
            .unwrap_or_default();
        subs.sort();
        if subs.is_empty() {
            out.push(p.clone());
        }
        out.extend(subs);
    }
    out
}

fn group(runs: &[RunRecord]) -> Vec<GroupRow> {
    let mut names: Vec<&str> = Vec::new();
    for r in runs {
        if !names.contains(&r.strategy.as_str()) {
            names.push(&r.strategy);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let rs: Vec<&RunRecord> = runs.iter().filter(|r| r.strategy == name).collect();
            let col = |f: &dyn Fn(&RunRecord) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            GroupRow {
                strategy: name.to_string(),
                runs: rs.len(),
                avg: col(&|r| r.summary.avg),
                ilm: col(&|r| r.summary.ilm),
                bwt: col(&|r| r.summary.bwt),
                fwt: col(&|r| r.summary.fwt),
                first_dataset_std: col(&|r| r.first_dataset_std),
            }
        })
        .collect()
}

pub fn markdown(report: &Report) -> String {
    let mut s = String::from("| run | strategy | seed | AVG | ILM | BWT | FWT | DS1 std |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in &report.runs {
        let seed = r.seed.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
        let m = &r.summary;
        let _ = writeln!(
            s,
            "| {} | {} | {seed} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
            r.name, r.strategy, m.avg, m.ilm, m.bwt, m.fwt, r.first_dataset_std
        );
    }
    if report.groups.iter().any(|g| g.runs > 1) {
        s.push_str("\n| strategy | runs | AVG | ILM | BWT | FWT | DS1 std |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        for g in &report.groups {
            let f = |(m, sd): (f64, f64)| format!("{m:.4} ± {sd:.4}");
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} |",
                g.strategy,
                g.runs,
                f(g.avg),
                f(g.ilm),
                f(g.bwt),
                f(g.fwt),
                f(g.first_dataset_std)
            );
        }
    }
    s
}

pub fn csv(report: &Report) -> String {
    let mut s = String::from("run,strategy,seed,avg,ilm,bwt,fwt,ds1_std\n");
    for r in &report.runs {
        let seed = r.seed.map(|v| v.to_string()).unwrap_or_default();
        let m = &r.summary;
        let _ = writeln!(
            s,
            "{},{},{seed},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.name, r.strategy, m.avg, m.ilm, m.bwt, m.fwt, r.first_dataset_std
        );
    }
    s
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line plot of DSC against session. Each series is `(label, first session, values)`.
pub fn line_plot_svg(title: &str, sessions: usize, series: &[(String, usize, Vec<f64>)]) -> String {
    let (w, h) = (560.0, 360.0);
    let (left, right, top, bottom) = (60.0, 170.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x = |session: usize| {
        if sessions <= 1 {
            left + pw / 2.0
        } else {
            left + pw * (session - 1) as f64 / (sessions - 1) as f64
        }
    };
    let y = |v: f64| top + ph * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{0:.1}" x2="{1}" y2="{0:.1}" stroke="#ddd"/><text x="{2}" y="{3:.1}" text-anchor="end">{v:.2}</text>"##,
            y(v),
            left + pw,
            left - 6.0,
            y(v) + 4.0
        );
    }
    for t in 1..=sessions {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{t}</text>"#,
            x(t),
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">session</text><text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">DSC</text>"#,
        left + pw / 2.0,
        h - 8.0,
        top + ph / 2.0,
        top + ph / 2.0
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for (k, (label, start, values)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.1},{:.1}", x(start + i), y(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (px, py) = p.split_once(',').expect("point");
            let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 14.0 + 18.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{2}" y="{3}">{4}</text>"#,
            left + pw + 12.0,
            left + pw + 32.0,
            left + pw + 38.0,
            ly + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One series per dataset `j`: its DSC after sessions `j..P` (1-based start `j+1`).
pub fn forgetting_series(m: &TrainTestMatrix) -> Vec<(String, usize, Vec<f64>)> {
    (0..m.size())
        .map(|j| (m.dataset_ids[j].clone(), j + 1, m.forgetting_curve(j)))
        .collect()
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn write(path: &Path, text: &str, files: &mut Vec<PathBuf>) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    files.push(path.to_path_buf());
    Ok(())
}

/// Collects runs, writes `report.md`, `report.csv`, one forgetting-curve SVG
/// per run and a first-dataset comparison SVG into `out_dir`.
pub fn cmd_report(paths: &[PathBuf], out_dir: &Path) -> Result<Report, CliError> {
    let mut runs = Vec::new();
    let mut skipped = Vec::new();
    for dir in expand(paths) {
        match load_run(&dir) {
            Ok(r) => runs.push(r),
            Err(why) => {
                log::warn!("skipping {}: {why}", dir.display());
                skipped.push(dir);
            }
        }
    }
    if runs.is_empty() {
        return Err(CliError::Runtime("no completed runs with a matrix.json were found".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut report = Report {
        groups: group(&runs),
        runs,
        skipped,
        files: Vec::new(),
    };
    let mut files = Vec::new();
    write(&out_dir.join("report.md"), &markdown(&report), &mut files)?;
    write(&out_dir.join("report.csv"), &csv(&report), &mut files)?;
    for r in &report.runs {
        let svg = line_plot_svg(&format!("{}: DSC per dataset", r.name), r.matrix.size(), &forgetting_series(&r.matrix));
        write(&out_dir.join(format!("curves_{}.svg", sanitize(&r.name))), &svg, &mut files)?;
    }
    let sessions = report.runs.iter().map(|r| r.matrix.size()).max().unwrap_or(1);
    let first: Vec<_> = report
        .runs
        .iter()
        .map(|r| (r.name.clone(), 1, r.matrix.forgetting_curve(0)))
        .collect();
    write(&out_dir.join("first_dataset.svg"), &line_plot_svg("First dataset DSC across sessions", sessions, &first), &mut files)?;
    report.files = files;
    Ok(report)
}
