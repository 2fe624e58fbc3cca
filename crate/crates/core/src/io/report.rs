//! Aggregation of run outputs into mean ± std tables and SVG line charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::metrics::{read_metrics, MetricsRow, METRICS_HEADER};
use crate::orchestrator::{views, TargetEval};

pub const EVAL_HEADER: [&str; 9] = [
    "run_id",
    "seed",
    "strategy",
    "snapshot",
    "adapted_target",
    "target_id",
    "episode_reward",
    "episode_cost",
    "total",
];

/// Evaluation of one policy snapshot on one target.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub run_id: String,
    pub seed: u64,
    pub strategy: String,
    /// Position of the snapshot in the adaptation sequence.
    pub snapshot: usize,
    /// Target the snapshot was adapted to; `0` for a pretrained policy.
    pub adapted_target: usize,
    pub target_id: usize,
    pub episode_reward: f64,
    pub episode_cost: f64,
    pub total: f64,
}

pub fn write_eval(rows: &[EvalRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(EVAL_HEADER)?;
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.seed.to_string(),
            r.strategy.clone(),
            r.snapshot.to_string(),
            r.adapted_target.to_string(),
            r.target_id.to_string(),
            format!("{:.6}", r.episode_reward),
            format!("{:.6}", r.episode_cost),
            format!("{:.6}", r.total),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_eval(path: &Path) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(EVAL_HEADER.iter().copied()) {
        return Err(Error::InvalidArgument(format!(
            "{}: unexpected eval header",
            path.display()
        )));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec?;
            let bad = |c: usize| {
                Error::InvalidArgument(format!(
                    "{} line {}: cannot parse {}",
                    path.display(),
                    i + 2,
                    EVAL_HEADER[c]
                ))
            };
            let int = |c: usize| {
                rec.get(c)
                    .and_then(|s| s.parse::<u64>().ok())
                    .ok_or_else(|| bad(c))
            };
            let real = |c: usize| {
                rec.get(c)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| bad(c))
            };
            Ok(EvalRow {
                run_id: rec.get(0).unwrap_or_default().to_string(),
                seed: int(1)?,
                strategy: rec.get(2).unwrap_or_default().to_string(),
                snapshot: int(3)? as usize,
                adapted_target: int(4)? as usize,
                target_id: int(5)? as usize,
                episode_reward: real(6)?,
                episode_cost: real(7)?,
                total: real(8)?,
            })
        })
        .collect()
}

/// Mean and sample standard deviation; std is `0` for a single value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn csv_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            csv_files(&path, out)?;
        } else if path.extension().is_some_and(|x| x == "csv") {
            out.push(path);
        }
    }
    Ok(())
}

fn header_of(path: &Path) -> Result<Vec<String>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.headers()?.iter().map(str::to_string).collect())
}

/// Every metrics and evaluation file below `dir`.
pub fn collect_outputs(dir: &Path) -> Result<(Vec<MetricsRow>, Vec<EvalRow>)> {
    let mut files = Vec::new();
    csv_files(dir, &mut files)?;
    let mut metrics = Vec::new();
    let mut evals = Vec::new();
    for f in files {
        let header = header_of(&f)?;
        if header.iter().map(String::as_str).eq(METRICS_HEADER) {
            metrics.extend(read_metrics(&f)?);
        } else if header.iter().map(String::as_str).eq(EVAL_HEADER) {
            evals.extend(read_eval(&f)?);
        }
    }
    Ok((metrics, evals))
}

/// Per-run Current/Others/Combined from evaluation rows, keyed by
/// `(strategy, seed)`.
pub fn eval_views(rows: &[EvalRow]) -> Result<BTreeMap<(String, u64), crate::orchestrator::Views>> {
    // (strategy, seed, run) -> snapshot -> (adapted target, evaluations)
    type Snapshots = BTreeMap<usize, (usize, Vec<TargetEval>)>;
    let mut runs: BTreeMap<(String, u64, String), Snapshots> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.adapted_target > 0) {
        runs.entry((r.strategy.clone(), r.seed, r.run_id.clone()))
            .or_default()
            .entry(r.snapshot)
            .or_insert_with(|| (r.adapted_target, Vec::new()))
            .1
            .push(TargetEval {
                target_id: r.target_id,
                episode_reward: r.episode_reward,
                episode_cost: r.episode_cost,
                total: r.total,
            });
    }
    let mut out = BTreeMap::new();
    for ((strategy, seed, _), snaps) in runs {
        let sequence: Vec<usize> = snaps.values().map(|(t, _)| *t).collect();
        let evals: Vec<Vec<TargetEval>> = snaps.into_values().map(|(_, e)| e).collect();
        out.insert((strategy, seed), views(&evals, &sequence)?);
    }
    Ok(out)
}

fn fmt_ms(xs: &[f64]) -> String {
    let (m, s) = mean_std(xs);
    format!("{m:.4} ± {s:.4}")
}

/// Writes a markdown report to `out` and one SVG chart per phase and
/// quantity beside it. Returns the chart paths.
pub fn write_report(dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let (metrics, evals) = collect_outputs(dir)?;
    if metrics.is_empty() && evals.is_empty() {
        return Err(Error::Empty("metrics or evaluation files"));
    }
    let mut md = String::new();
    let _ = writeln!(md, "# Run report\n\nSource: `{}`\n", dir.display());

    // (phase, strategy) -> seed -> rows
    let mut groups: BTreeMap<(String, String), BTreeMap<u64, Vec<&MetricsRow>>> = BTreeMap::new();
    for r in &metrics {
        groups
            .entry((r.phase.clone(), r.strategy.clone()))
            .or_default()
            .entry(r.seed)
            .or_default()
            .push(r);
    }
    if !groups.is_empty() {
        let _ = writeln!(
            md,
            "## Training metrics (mean ± std over seeds of per-run averages)\n"
        );
        let _ = writeln!(
            md,
            "| phase | strategy | seeds | avg timestep reward | avg timestep cost | total | violation rate |"
        );
        let _ = writeln!(md, "|---|---|---|---|---|---|---|");
        for ((phase, strategy), seeds) in &groups {
            let per_run = |f: fn(&MetricsRow) -> f64| -> Vec<f64> {
                seeds
                    .values()
                    .map(|rows| rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64)
                    .collect()
            };
            let _ = writeln!(
                md,
                "| {phase} | {strategy} | {} | {} | {} | {} | {} |",
                seeds.len(),
                fmt_ms(&per_run(|r| r.avg_timestep_reward)),
                fmt_ms(&per_run(|r| r.avg_timestep_cost)),
                fmt_ms(&per_run(|r| r.total)),
                fmt_ms(&per_run(|r| r.violation_rate)),
            );
        }
        md.push('\n');
    }

    let views = eval_views(&evals)?;
    if !views.is_empty() {
        let mut by_strategy: BTreeMap<&str, Vec<crate::orchestrator::Views>> = BTreeMap::new();
        for ((strategy, _), v) in &views {
            by_strategy.entry(strategy).or_default().push(*v);
        }
        let _ = writeln!(
            md,
            "## Evaluation views (episode totals, mean ± std over seeds)\n"
        );
        let _ = writeln!(
            md,
            "| strategy | seeds | current | others | combined | current − others |"
        );
        let _ = writeln!(md, "|---|---|---|---|---|---|");
        for (strategy, vs) in by_strategy {
            let col = |f: fn(&crate::orchestrator::Views) -> f64| {
                fmt_ms(&vs.iter().map(f).collect::<Vec<_>>())
            };
            let _ = writeln!(
                md,
                "| {strategy} | {} | {} | {} | {} | {} |",
                vs.len(),
                col(|v| v.current),
                col(|v| v.others),
                col(|v| v.combined),
                col(|v| v.current - v.others),
            );
        }
        md.push('\n');
    }

    let stem = out
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("report")
        .to_string();
    let chart_dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut charts = Vec::new();
    let phases: Vec<String> = {
        let mut p: Vec<String> = groups.keys().map(|(p, _)| p.clone()).collect();
        p.dedup();
        p
    };
    for phase in &phases {
        for (quantity, f) in [
            (
                "total",
                (|r: &MetricsRow| r.total) as fn(&MetricsRow) -> f64,
            ),
            ("cost", |r: &MetricsRow| r.avg_timestep_cost),
        ] {
            let mut series = Vec::new();
            for ((p, strategy), seeds) in &groups {
                if p != phase {
                    continue;
                }
                let mut by_it: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                for rows in seeds.values() {
                    for r in rows {
                        by_it.entry(r.iteration).or_default().push(f(r));
                    }
                }
                let points = by_it
                    .into_iter()
                    .map(|(it, v)| (it as f64, mean_std(&v).0))
                    .collect();
                series.push((strategy.clone(), points));
            }
            let path = chart_dir.join(format!("{stem}_{phase}_{quantity}.svg"));
            let title = format!("{phase}: average timestep {quantity} (mean over seeds)");
            fs::write(&path, line_chart_svg(&title, "iteration", &series))?;
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default();
            let _ = writeln!(md, "![{title}]({name})\n");
            charts.push(path);
        }
    }
    fs::write(out, md)?;
    Ok(charts)
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// A minimal SVG line chart with one polyline per series.
pub fn line_chart_svg(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 130.0, 40.0, 50.0);
    let pts = series
        .iter()
        .flat_map(|(_, p)| p.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let sy = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{yb}" x2="{xr}" y2="{yb}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{yb}" stroke="black"/>"#,
        yb = h - bottom,
        xr = w - right
    );
    for i in 0..=4 {
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{fy:.3}</text><text x="{}" y="{}" text-anchor="middle">{fx:.0}</text>"#,
            left - 6.0,
            sy(fy) + 4.0,
            sx(fx),
            h - bottom + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (left + w - right) / 2.0,
        h - 12.0,
        escape(x_label)
    );
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = top + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            w - right + 10.0,
            w - right + 30.0,
            w - right + 35.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::metrics::write_metrics;

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let svg = line_chart_svg(
            "t <x>",
            "iteration",
            &[
                ("a".into(), vec![(0.0, 1.0), (1.0, 2.0)]),
                ("b".into(), vec![(0.0, 0.5), (1.0, 0.5)]),
            ],
        );
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("t &lt;x&gt;"));
    }

    #[test]
    fn report_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("s0");
        fs::create_dir(&run).unwrap();
        let rows: Vec<MetricsRow> = (0..3)
            .map(|i| MetricsRow {
                run_id: "s0-da".into(),
                seed: 0,
                strategy: "da".into(),
                phase: "adapt".into(),
                iteration: i,
                target_id: 1,
                avg_timestep_reward: -0.2,
                avg_timestep_cost: 0.1,
                total: -0.3,
                j_c: 0.1,
                stage: "none".into(),
                violation_rate: 0.5,
            })
            .collect();
        write_metrics(&rows, &run.join("metrics.csv")).unwrap();
        let evals: Vec<EvalRow> = (1..=2)
            .flat_map(|snap| {
                (1..=2).map(move |t| EvalRow {
                    run_id: "s0-da".into(),
                    seed: 0,
                    strategy: "da".into(),
                    snapshot: snap - 1,
                    adapted_target: snap,
                    target_id: t,
                    episode_reward: -(t as f64),
                    episode_cost: 0.0,
                    total: -(t as f64),
                })
            })
            .collect();
        write_eval(&evals, &run.join("eval.csv")).unwrap();
        assert_eq!(read_eval(&run.join("eval.csv")).unwrap(), evals);

        let v = eval_views(&evals).unwrap();
        let da = v[&("da".to_string(), 0)];
        assert!((da.current - (-1.0 - 2.0) / 2.0).abs() < 1e-12);
        assert!((da.others - (-2.0 - 1.0) / 2.0).abs() < 1e-12);

        let out = dir.path().join("report.md");
        let charts = write_report(dir.path(), &out).unwrap();
        let md = fs::read_to_string(&out).unwrap();
        assert!(md.contains("| adapt | da | 1 | -0.2000 ± 0.0000"));
        assert!(md.contains("| da | 1 |"));
        assert_eq!(charts.len(), 2);
        assert!(charts.iter().all(|c| c.exists()));
    }
}
