//! Rendering of evaluation reports as Markdown/CSV tables and SVG plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::metrics::CorrelationMatrix;
use crate::synthworld::{DurationMode, TtsSystemSpec};
use crate::targetprep::DatasetMode;

use super::formats::write_atomic;
use super::pipeline::{mean, EvalReport};

/// Rendered report files by name, plus warnings raised while rendering.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportFiles {
    pub files: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

impl ReportFiles {
    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.get(name).map(String::as_str)
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, text) in &self.files {
            write_atomic(&dir.join(name), text.as_bytes())?;
        }
        Ok(())
    }
}

/// One row of the branch ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchRow {
    pub cell_id: String,
    /// System of the branch, or `/` for selection across branches.
    pub branch: String,
    pub bleu: f64,
    /// Branch BLEU minus the single-system BLEU; `None` without a baseline.
    pub diff: Option<f64>,
}

struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: Vec<&'static str>) -> Self {
        Self { header, rows: Vec::new() }
    }

    fn markdown(&self, title: &str) -> String {
        let mut out = format!("# {title}\n\n| {} |\n|", self.header.join(" | "));
        for _ in &self.header {
            out.push_str("---|");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "| {} |", r.join(" | "));
        }
        out
    }

    fn csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

fn pm(m: f64, s: f64) -> String {
    format!("{m:.2} ± {s:.2}")
}

/// Signed BLEU difference of `bleu` against the single-system cell of `system`.
pub fn bleu_diff(reports: &[EvalReport], system: &str, bleu: f64) -> Option<f64> {
    reports
        .iter()
        .find(|r| r.mode == DatasetMode::Single(system.to_string()))
        .map(|r| bleu - r.bleu_mean)
}

/// Rows of the branch ablation: every branch of every multitask cell, then
/// the selection output.
pub fn branch_rows(reports: &[EvalReport], warnings: &mut Vec<String>) -> Vec<BranchRow> {
    let mut rows = Vec::new();
    for r in reports {
        let DatasetMode::Multitask(systems) = &r.mode else { continue };
        for s in systems {
            let bleu = mean(&r.branch_bleu(s));
            let diff = bleu_diff(reports, s, bleu);
            if diff.is_none() {
                warnings.push(format!("{}: no single-{s} cell, BLEU Diff left blank", r.cell_id));
            }
            rows.push(BranchRow {
                cell_id: r.cell_id.clone(),
                branch: s.clone(),
                bleu,
                diff,
            });
        }
        rows.push(BranchRow {
            cell_id: r.cell_id.clone(),
            branch: "/".into(),
            bleu: r.bleu_mean,
            diff: None,
        });
    }
    rows
}

fn cell_row(r: &EvalReport, lead: Vec<String>) -> Vec<String> {
    let mut row = lead;
    row.push(r.seeds.len().to_string());
    row.push(pm(100.0 * r.cer_mean, 100.0 * r.cer_std));
    row.push(pm(r.bleu_mean, r.bleu_std));
    row
}

/// Renders the table analogs:
///
/// - `table1`: single-system cells at the default speed,
/// - `table2`: single-system cells of families with speed variants,
/// - `table3`: combined and multitask cells,
/// - `table4`: branch ablation with BLEU Diff,
/// - `seeds`: one row per (cell, seed),
///
/// each as `.md` and `.csv`, plus `bleu.svg`. `systems` supplies vocoder
/// and speed metadata; unknown systems render with blanks.
pub fn report_tables(reports: &[EvalReport], systems: &[TtsSystemSpec]) -> ReportFiles {
    let mut out = ReportFiles::default();
    if reports.is_empty() {
        out.warnings.push("no reports to render".into());
    }
    let spec = |id: &str| systems.iter().find(|s| s.system_id == id);

    let mut t1 = Table::new(vec!["ID", "Durations", "Vocoder", "Seeds", "CER (%)", "BLEU"]);
    let mut families: BTreeMap<(u64, String), Vec<(f64, &EvalReport)>> = BTreeMap::new();
    for r in reports {
        let DatasetMode::Single(id) = &r.mode else { continue };
        match spec(id) {
            Some(s) => {
                families
                    .entry((s.lexicon_seed, s.vocoder_id.clone()))
                    .or_default()
                    .push((s.speed_factor, r));
                if s.speed_factor == 1.0 {
                    let lead = vec![id.clone(), match s.duration_mode {
                        DurationMode::Stochastic => "stochastic".into(),
                        DurationMode::Deterministic => "deterministic".into(),
                    }, s.vocoder_id.clone()];
                    t1.rows.push(cell_row(r, lead));
                }
            }
            None => t1.rows.push(cell_row(r, vec![id.clone(), String::new(), String::new()])),
        }
    }

    let mut t2 = Table::new(vec!["ID", "Vocoder", "Speed", "Seeds", "CER (%)", "BLEU"]);
    for ((_, vocoder), mut members) in families {
        if members.iter().all(|(speed, _)| *speed == 1.0) {
            continue;
        }
        members.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (speed, r) in members {
            let lead = vec![r.mode.systems()[0].clone(), vocoder.clone(), format!("{speed}")];
            t2.rows.push(cell_row(r, lead));
        }
    }

    let mut t3 = Table::new(vec!["Data", "Multi-target", "Seeds", "CER (%)", "BLEU"]);
    for r in reports {
        let multi = match r.mode {
            DatasetMode::Single(_) => continue,
            DatasetMode::Combined(_) => "no",
            DatasetMode::Multitask(_) => "yes",
        };
        t3.rows.push(cell_row(r, vec![r.mode.systems().join(" + "), multi.into()]));
    }

    let mut t4 = Table::new(vec!["Cell", "Branch", "BLEU", "BLEU Diff"]);
    for row in branch_rows(reports, &mut out.warnings) {
        t4.rows.push(vec![
            row.cell_id,
            row.branch,
            format!("{:.2}", row.bleu),
            row.diff.map(|d| format!("{d:+.2}")).unwrap_or_default(),
        ]);
    }

    let mut seeds = Table::new(vec!["Cell", "Seed", "CER (%)", "BLEU", "Best dev loss", "Step"]);
    for r in reports {
        for s in &r.seeds {
            seeds.rows.push(vec![
                r.cell_id.clone(),
                s.seed.to_string(),
                format!("{:.2}", 100.0 * s.cer),
                format!("{:.2}", s.bleu),
                s.best_dev_loss.map(|d| format!("{d:.4}")).unwrap_or_default(),
                s.checkpoint_step.to_string(),
            ]);
        }
    }

    for (name, title, table) in [
        ("table1", "Single-system training", t1),
        ("table2", "Speed factors", t2),
        ("table3", "Combined and multi-target training", t3),
        ("table4", "Multi-target branches", t4),
        ("seeds", "Per-seed results", seeds),
    ] {
        out.files.insert(format!("{name}.md"), table.markdown(title));
        out.files.insert(format!("{name}.csv"), table.csv());
    }
    out.files.insert("bleu.svg".into(), bleu_plot(reports));
    for w in &out.warnings {
        log::warn!("{w}");
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bar plot of mean BLEU per cell with one-standard-deviation error bars.
pub fn bleu_plot(reports: &[EvalReport]) -> String {
    let (bar, gap, top, height, left) = (36.0, 14.0, 20.0, 220.0, 50.0);
    let width = left + reports.len() as f64 * (bar + gap) + gap;
    let ymax = reports
        .iter()
        .map(|r| r.bleu_mean + r.bleu_std)
        .fold(10.0f64, f64::max)
        .min(100.0)
        .ceil();
    let y = |v: f64| top + height * (1.0 - v / ymax);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{:.0}\" font-family=\"sans-serif\" font-size=\"10\">\n",
        top + height + 110.0
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{:.1}\" stroke=\"black\"/>",
        top + height
    );
    for i in 0..=4 {
        let v = ymax * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>",
            left - 4.0,
            y(v) + 3.0
        );
    }
    for (i, r) in reports.iter().enumerate() {
        let x = left + gap + i as f64 * (bar + gap);
        let color = match r.mode {
            DatasetMode::Single(_) => "#8da0cb",
            DatasetMode::Combined(_) => "#fc8d62",
            DatasetMode::Multitask(_) => "#66c2a5",
        };
        let _ = writeln!(
            svg,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{bar}\" height=\"{:.1}\" fill=\"{color}\"/>",
            y(r.bleu_mean),
            top + height - y(r.bleu_mean)
        );
        let cx = x + bar / 2.0;
        let (lo, hi) = (y((r.bleu_mean - r.bleu_std).max(0.0)), y((r.bleu_mean + r.bleu_std).min(ymax)));
        let _ = writeln!(
            svg,
            "<line x1=\"{cx:.1}\" y1=\"{lo:.1}\" x2=\"{cx:.1}\" y2=\"{hi:.1}\" stroke=\"black\"/>"
        );
        let _ = writeln!(
            svg,
            "<text transform=\"translate({cx:.1},{:.1}) rotate(60)\">{}</text>",
            top + height + 8.0,
            escape(&r.cell_id)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Heatmap of a correlation matrix, white at 0 or below and dark blue at 1.
pub fn correlation_heatmap(m: &CorrelationMatrix) -> String {
    let (cell, left, top) = (28.0, 30.0, 30.0);
    let n = m.labels.len() as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" font-family=\"sans-serif\" font-size=\"9\">\n",
        left + n * cell + 10.0,
        top + n * cell + 10.0
    );
    for (i, label) in m.labels.iter().enumerate() {
        let c = i as f64 * cell + cell / 2.0;
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            left + c,
            top - 6.0,
            escape(label)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            left - 4.0,
            top + c + 3.0,
            escape(label)
        );
    }
    for (i, row) in m.values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let t = v.clamp(0.0, 1.0);
            let (r, g, b) = (
                (255.0 * (1.0 - t) + 8.0 * t) as u8,
                (255.0 * (1.0 - t) + 48.0 * t) as u8,
                (255.0 * (1.0 - t) + 107.0 * t) as u8,
            );
            let _ = writeln!(
                svg,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{cell}\" height=\"{cell}\" fill=\"#{r:02x}{g:02x}{b:02x}\"><title>{:.4}</title></rect>",
                left + j as f64 * cell,
                top + i as f64 * cell,
                v
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}
