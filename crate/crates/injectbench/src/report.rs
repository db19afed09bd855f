//! Report rendering: human-readable tables derived from a run's
//! `metrics.json`.
//!
//! Reports are pure functions of the metrics file — regenerating them never
//! touches trial data or metrics. Markdown tables print at display precision
//! (two decimals for rankings, three for the score matrix); CSV files carry
//! full-precision values for plotting.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::attack::{rank_attacks, AttackScores};
use crate::metrics::{DefenseMetrics, MetricsReport};
use crate::run::RunPaths;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no metrics at {path}; complete an evaluation run first")]
    MissingMetrics { path: String },
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("metrics file {path} is malformed: {message}")]
    Malformed { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

/// Reads `metrics.json` from a run directory.
pub fn load_metrics(run_dir: &Path) -> Result<MetricsReport, ReportError> {
    let path = RunPaths::new(run_dir).metrics();
    let bytes = std::fs::read(&path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            ReportError::MissingMetrics {
                path: path.display().to_string(),
            }
        } else {
            ReportError::Io {
                path: path.display().to_string(),
                source,
            }
        }
    })?;
    serde_json::from_slice(&bytes).map_err(|err| ReportError::Malformed {
        path: path.display().to_string(),
        message: err.to_string(),
    })
}

/// Renders the report files for a completed run into the run directory and
/// returns their paths.
///
/// Markdown mode writes `report.md`; CSV mode writes `defense_ranking.csv`,
/// `attack_ranking.csv` and `matrix.csv`. Both modes write
/// `temperature_sweep.csv`.
pub fn emit_report(run_dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>, ReportError> {
    let report = load_metrics(run_dir)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, text: String| -> Result<(), ReportError> {
        let path = run_dir.join(name);
        std::fs::write(&path, text).map_err(|source| ReportError::Io {
            path: path.display().to_string(),
            source,
        })?;
        written.push(path);
        Ok(())
    };
    match format {
        ReportFormat::Markdown => emit("report.md", render_markdown(&report))?,
        ReportFormat::Csv => {
            emit("defense_ranking.csv", render_defense_csv(&report))?;
            emit("attack_ranking.csv", render_attack_csv(&report))?;
            emit("matrix.csv", render_matrix_csv(&report))?;
        }
    }
    emit(
        "temperature_sweep.csv",
        render_temperature_sweep_csv(&report),
    )?;
    Ok(written)
}

fn fmt2(value: Option<f64>) -> String {
    value.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

fn fmt3(value: Option<f64>) -> String {
    value.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

/// Full-precision CSV field; absent metrics become empty fields.
fn raw(value: Option<f64>) -> String {
    value.map_or_else(String::new, |v| format!("{v}"))
}

/// Defenses ordered for ranking: scored ones by score ascending (lower is
/// better), then unscored ones (prevention defenses have no detection rates)
/// in id order.
fn ranked_defenses(report: &MetricsReport) -> Vec<(&String, &DefenseMetrics)> {
    let (mut scored, unscored): (Vec<_>, Vec<_>) = report
        .per_defense
        .iter()
        .partition(|(_, m)| m.score.is_some());
    scored.sort_by(|(id_a, a), (id_b, b)| {
        a.score
            .unwrap_or(f64::INFINITY)
            .total_cmp(&b.score.unwrap_or(f64::INFINITY))
            .then_with(|| id_a.cmp(id_b))
    });
    scored.into_iter().chain(unscored).collect()
}

/// Markdown defense ranking with columns Defense, Score, ASV, FNR, FPR at
/// two decimals. Missing values render as `-`.
pub fn render_ranking_table(report: &MetricsReport) -> String {
    let mut out =
        String::from("| Defense | Score | ASV | FNR | FPR |\n| --- | --- | --- | --- | --- |\n");
    for (id, m) in ranked_defenses(report) {
        writeln!(
            out,
            "| {id} | {} | {} | {} | {} |",
            fmt2(m.score),
            fmt2(m.asv),
            fmt2(m.fnr),
            fmt2(m.fpr)
        )
        .expect("writing to String cannot fail");
    }
    out
}

/// Markdown attack ranking ordered by overall effectiveness, descending.
/// Attacks missing a composite (no prevention or no detection trials) are
/// listed unranked at the bottom.
pub fn render_attack_table(report: &MetricsReport) -> String {
    let mut out =
        String::from("| Rank | Attack | APS | ADS | Overall |\n| --- | --- | --- | --- | --- |\n");
    let scores = report
        .per_attack
        .iter()
        .filter_map(|(id, m)| match (m.aps, m.ads) {
            (Some(aps), Some(ads)) => Some((id.clone(), AttackScores { aps, ads })),
            _ => None,
        })
        .collect();
    if let Ok(ranked) = rank_attacks(&scores) {
        for row in ranked {
            writeln!(
                out,
                "| {} | {} | {:.2} | {:.2} | {:.2} |",
                row.rank, row.attack_id, row.aps, row.ads, row.overall
            )
            .expect("writing to String cannot fail");
        }
    }
    for (id, m) in &report.per_attack {
        if m.aps.is_none() || m.ads.is_none() {
            writeln!(out, "| - | {id} | {} | {} | - |", fmt2(m.aps), fmt2(m.ads))
                .expect("writing to String cannot fail");
        }
    }
    out
}

/// Markdown target×injected score matrix for one defense, three decimals per
/// cell. Returns `None` for defenses without attacked trials.
pub fn render_matrix_table(report: &MetricsReport, defense: &str) -> Option<String> {
    let grid = report.matrix.get(defense)?;
    let columns: BTreeSet<&str> = grid
        .values()
        .flat_map(|row| row.keys().map(String::as_str))
        .collect();
    let mut out = String::from("| Target \\ Injected |");
    for column in &columns {
        write!(out, " {column} |").expect("writing to String cannot fail");
    }
    out.push_str("\n| --- |");
    for _ in &columns {
        out.push_str(" --- |");
    }
    out.push('\n');
    for (target, row) in grid {
        write!(out, "| {target} |").expect("writing to String cannot fail");
        for column in &columns {
            let score = row.get(*column).and_then(|cell| cell.score);
            write!(out, " {} |", fmt3(score)).expect("writing to String cannot fail");
        }
        out.push('\n');
    }
    Some(out)
}

/// Per-temperature defense metrics for sweep plotting. Rows are sorted by
/// numeric temperature then defense id; absent metrics are empty fields.
pub fn render_temperature_sweep_csv(report: &MetricsReport) -> String {
    let mut out = String::from("temperature,defense,score,asv,mr,pna,fpr,fnr\n");
    let mut temps: Vec<&String> = report.per_temperature.keys().collect();
    temps.sort_by(|a, b| {
        let fa = a.parse::<f64>().unwrap_or(f64::INFINITY);
        let fb = b.parse::<f64>().unwrap_or(f64::INFINITY);
        fa.total_cmp(&fb).then_with(|| a.cmp(b))
    });
    for key in temps {
        for (defense, m) in &report.per_temperature[key] {
            writeln!(
                out,
                "{key},{defense},{},{},{},{},{},{}",
                raw(m.score),
                raw(m.asv),
                raw(m.mr),
                raw(m.pna),
                raw(m.fpr),
                raw(m.fnr)
            )
            .expect("writing to String cannot fail");
        }
    }
    out
}

/// The complete Markdown report: header, defense ranking, attack ranking and
/// one score matrix per defense.
pub fn render_markdown(report: &MetricsReport) -> String {
    let mut out = String::from("# Injection benchmark report\n\n");
    writeln!(
        out,
        "{} trials ({} reference) · score weights: asv={}, fnr={}, fpr={}\n",
        report.trials,
        report.reference_trials,
        report.weights.asv,
        report.weights.fnr,
        report.weights.fpr
    )
    .expect("writing to String cannot fail");
    out.push_str("## Defense ranking\n\n");
    out.push_str(&render_ranking_table(report));
    if !report.per_attack.is_empty() {
        out.push_str("\n## Attack ranking\n\n");
        out.push_str(&render_attack_table(report));
    }
    for defense in report.matrix.keys() {
        if let Some(table) = render_matrix_table(report, defense) {
            writeln!(out, "\n## Score matrix: {defense}\n").expect("writing to String cannot fail");
            out.push_str(&table);
        }
    }
    out
}

/// Defense ranking as CSV, same ordering as the Markdown table but at full
/// precision.
pub fn render_defense_csv(report: &MetricsReport) -> String {
    let mut out = String::from("defense,score,asv,mr,pna,fpr,fnr\n");
    for (id, m) in ranked_defenses(report) {
        writeln!(
            out,
            "{id},{},{},{},{},{},{}",
            raw(m.score),
            raw(m.asv),
            raw(m.mr),
            raw(m.pna),
            raw(m.fpr),
            raw(m.fnr)
        )
        .expect("writing to String cannot fail");
    }
    out
}

/// Attack ranking as CSV; unrankable attacks are omitted.
pub fn render_attack_csv(report: &MetricsReport) -> String {
    let mut out = String::from("rank,attack,aps,ads,overall\n");
    let scores = report
        .per_attack
        .iter()
        .filter_map(|(id, m)| match (m.aps, m.ads) {
            (Some(aps), Some(ads)) => Some((id.clone(), AttackScores { aps, ads })),
            _ => None,
        })
        .collect();
    if let Ok(ranked) = rank_attacks(&scores) {
        for row in ranked {
            writeln!(
                out,
                "{},{},{},{},{}",
                row.rank, row.attack_id, row.aps, row.ads, row.overall
            )
            .expect("writing to String cannot fail");
        }
    }
    out
}

/// The full defense×target×injected matrix flattened to CSV.
pub fn render_matrix_csv(report: &MetricsReport) -> String {
    let mut out = String::from("defense,target_task,injected_task,attacked,asv,mr,fnr,score\n");
    for (defense, grid) in &report.matrix {
        for (target, row) in grid {
            for (injected, cell) in row {
                writeln!(
                    out,
                    "{defense},{target},{injected},{},{},{},{},{}",
                    cell.attacked,
                    raw(cell.asv),
                    raw(cell.mr),
                    raw(cell.fnr),
                    raw(cell.score)
                )
                .expect("writing to String cannot fail");
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::CellMetrics;
    use std::collections::BTreeMap;

    fn detection(score: f64, asv: f64, fnr: f64, fpr: f64) -> DefenseMetrics {
        DefenseMetrics {
            score: Some(score),
            asv: Some(asv),
            fnr: Some(fnr),
            fpr: Some(fpr),
            ..DefenseMetrics::default()
        }
    }

    /// Published detection-defense numbers for one of the evaluated models;
    /// the stored scores must render untouched.
    fn ranking_fixture() -> MetricsReport {
        let mut report = MetricsReport::default();
        report.per_defense.insert(
            "cot-detailed-detection".into(),
            detection(0.05, 0.02, 0.04, 0.12),
        );
        report.per_defense.insert(
            "cot-base-detection".into(),
            detection(0.09, 0.04, 0.09, 0.14),
        );
        report.per_defense.insert(
            "cot-concise-detection".into(),
            detection(0.10, 0.05, 0.11, 0.15),
        );
        report
    }

    #[test]
    fn ranking_rows_render_stored_values_at_two_decimals() {
        let table = render_ranking_table(&ranking_fixture());
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "| Defense | Score | ASV | FNR | FPR |");
        assert_eq!(
            lines[2],
            "| cot-detailed-detection | 0.05 | 0.02 | 0.04 | 0.12 |"
        );
        assert_eq!(
            lines[3],
            "| cot-base-detection | 0.09 | 0.04 | 0.09 | 0.14 |"
        );
        assert_eq!(
            lines[4],
            "| cot-concise-detection | 0.10 | 0.05 | 0.11 | 0.15 |"
        );
    }

    #[test]
    fn unscored_defenses_rank_last_with_dashes() {
        let mut report = ranking_fixture();
        report.per_defense.insert(
            "delimiting".into(),
            DefenseMetrics {
                asv: Some(0.42),
                mr: Some(0.4),
                pna: Some(0.9),
                ..DefenseMetrics::default()
            },
        );
        let table = render_ranking_table(&report);
        let last = table.lines().last().unwrap();
        assert_eq!(last, "| delimiting | - | 0.42 | - | - |");
    }

    #[test]
    fn matrix_cells_render_three_decimals() {
        let mut report = MetricsReport::default();
        for (defense, score) in [
            ("cot-detailed-detection", 0.030),
            ("cot-concise-detection", 0.015),
            ("cot-base-detection", 0.023),
        ] {
            report.matrix.entry(defense.into()).or_default().insert(
                "spam-detection".into(),
                BTreeMap::from([(
                    "spam-detection".into(),
                    CellMetrics {
                        attacked: 110,
                        score: Some(score),
                        ..CellMetrics::default()
                    },
                )]),
            );
        }
        let detailed = render_matrix_table(&report, "cot-detailed-detection").unwrap();
        assert!(
            detailed.contains("| spam-detection | 0.030 |"),
            "{detailed}"
        );
        let concise = render_matrix_table(&report, "cot-concise-detection").unwrap();
        assert!(concise.contains("| spam-detection | 0.015 |"), "{concise}");
        let base = render_matrix_table(&report, "cot-base-detection").unwrap();
        assert!(base.contains("| spam-detection | 0.023 |"), "{base}");
    }

    #[test]
    fn empty_sweep_is_header_only() {
        let report = MetricsReport::default();
        assert_eq!(
            render_temperature_sweep_csv(&report),
            "temperature,defense,score,asv,mr,pna,fpr,fnr\n"
        );
    }

    #[test]
    fn sweep_rows_sort_numerically_not_lexically() {
        let mut report = MetricsReport::default();
        for key in ["0", "0.5", "1", "10", "2"] {
            report
                .per_temperature
                .entry(key.into())
                .or_default()
                .insert("d".into(), DefenseMetrics::default());
        }
        let csv = render_temperature_sweep_csv(&report);
        let order: Vec<&str> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap())
            .collect();
        assert_eq!(order, ["0", "0.5", "1", "2", "10"]);
    }

    #[test]
    fn attack_table_orders_by_overall_descending() {
        let mut report = MetricsReport::default();
        for (id, aps, ads) in [("weak", 0.1, 0.1), ("strong", 0.9, 0.8), ("mid", 0.5, 0.3)] {
            report.per_attack.insert(
                id.into(),
                crate::metrics::AttackMetrics {
                    aps: Some(aps),
                    ads: Some(ads),
                    ..crate::metrics::AttackMetrics::default()
                },
            );
        }
        let table = render_attack_table(&report);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[2], "| 1 | strong | 0.90 | 0.80 | 1.70 |");
        assert_eq!(lines[3], "| 2 | mid | 0.50 | 0.30 | 0.80 |");
        assert_eq!(lines[4], "| 3 | weak | 0.10 | 0.10 | 0.20 |");
    }

    #[test]
    fn emit_writes_files_and_missing_metrics_errors() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_report(dir.path(), ReportFormat::Markdown).unwrap_err();
        assert!(matches!(err, ReportError::MissingMetrics { .. }));

        let report = ranking_fixture();
        std::fs::write(
            dir.path().join("metrics.json"),
            serde_json::to_vec_pretty(&report).unwrap(),
        )
        .unwrap();
        let files = emit_report(dir.path(), ReportFormat::Markdown).unwrap();
        assert_eq!(files.len(), 2);
        let text = std::fs::read_to_string(&files[0]).unwrap();
        assert!(text.contains("## Defense ranking"));
        assert!(text.contains("| cot-detailed-detection | 0.05 | 0.02 | 0.04 | 0.12 |"));

        let csv_files = emit_report(dir.path(), ReportFormat::Csv).unwrap();
        assert_eq!(csv_files.len(), 4);
        let ranking = std::fs::read_to_string(&csv_files[0]).unwrap();
        assert!(ranking.starts_with("defense,score,"));
        assert!(ranking.contains("cot-detailed-detection,0.05,"));
    }
}
