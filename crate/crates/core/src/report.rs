//! Tables and figures from a results directory.
//!
//! Everything here is a pure function of `results.csv`: the same input
//! produces byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::acquisition::Strategy;
use crate::engine::RoundRecord;
use crate::error::{Error, Result};
use crate::grid::{read_results, RESULTS_FILE};
use crate::metrics::{aggregate_grid, delta_vs_random, Grid, GroupBy, Key};

/// Subdirectory of the results directory that receives the report.
pub const REPORT_DIR: &str = "report";

#[derive(Clone, Debug, PartialEq)]
pub struct ReportSummary {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub models: Vec<String>,
    pub noise_rates: Vec<f64>,
    pub strategies: Vec<Strategy>,
    /// Labeled fraction the delta tables and noise charts are taken at.
    pub final_fraction: f64,
}

/// Reads `<dir>/results.csv` and writes the report into `<dir>/report/`.
pub fn emit_report(results_dir: impl AsRef<Path>) -> Result<ReportSummary> {
    let dir = results_dir.as_ref();
    let rows = read_results(&dir.join(RESULTS_FILE))?;
    let records = rows.iter().map(|r| r.to_record()).collect::<Result<Vec<_>>>()?;
    let out = dir.join(REPORT_DIR);
    fs::create_dir_all(&out).map_err(|e| Error::path(&out, e))?;
    let report = build_report(&records)?;
    let mut files = Vec::new();
    for (name, body) in &report.files {
        let path = out.join(name);
        fs::write(&path, body).map_err(|e| Error::path(&path, e))?;
        files.push(path);
    }
    Ok(ReportSummary {
        dir: out,
        files,
        models: report.models,
        noise_rates: report.noise_rates,
        strategies: report.strategies,
        final_fraction: report.final_fraction,
    })
}

/// In-memory report: file names with their contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub files: Vec<(String, String)>,
    pub models: Vec<String>,
    pub noise_rates: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub final_fraction: f64,
}

pub fn build_report(records: &[RoundRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::Format("results contain no rows".into()));
    }
    let mut models: Vec<String> = Vec::new();
    for r in records {
        if !models.contains(&r.model) {
            models.push(r.model.clone());
        }
    }
    let mut noise_rates: Vec<f64> = records.iter().map(|r| r.noise_rate).collect();
    noise_rates.sort_by(f64::total_cmp);
    noise_rates.dedup();
    let mut strategies: Vec<Strategy> = records.iter().map(|r| r.strategy).collect();
    strategies.sort();
    strategies.dedup();
    let final_fraction = records.iter().map(|r| r.labeled_fraction).fold(f64::NEG_INFINITY, f64::max);
    let at_final: Vec<RoundRecord> = records.iter().filter(|r| r.labeled_fraction == final_fraction).cloned().collect();

    let mut files = Vec::new();
    let overall = aggregate_grid(records, GroupBy::MODEL_NOISE)?;
    files.push((
        "accuracy_by_model_noise.csv".to_string(),
        model_noise_matrix(&overall, &models, &noise_rates, |c| percent(c.top1))?,
    ));
    files.push((
        "brier_by_model_noise.csv".to_string(),
        model_noise_matrix(&overall, &models, &noise_rates, |c| format!("{:.4}", c.brier))?,
    ));

    let by_strategy = aggregate_grid(&at_final, GroupBy::STRATEGY_NOISE)?;
    if strategies.contains(&Strategy::Random) {
        let deltas = delta_vs_random(&by_strategy)?;
        let lookup = |s: Strategy, n: f64| {
            deltas
                .iter()
                .find(|d| d.key.strategy == Some(s) && d.key.noise_rate == Some(Key(n)))
                .ok_or_else(|| Error::Coverage(format!("no {s} cell at noise {n}")))
        };
        for (name, pick) in [
            ("accuracy_delta.csv", (|d: &crate::metrics::Delta| d.accuracy) as fn(&_) -> f64),
            ("brier_delta.csv", |d| d.brier),
        ] {
            let mut s = header("strategy", &noise_rates);
            for &st in &delta_order(&strategies) {
                s.push_str(st.as_str());
                for &n in &noise_rates {
                    let _ = write!(s, ",{}", percent(pick(lookup(st, n)?)));
                }
                s.push('\n');
            }
            files.push((name.to_string(), s));
        }
    }

    let per_model = aggregate_grid(&at_final, GroupBy::MODEL_STRATEGY_NOISE)?;
    for &st in &strategies {
        for (metric, label, pick, range) in [
            ("accuracy", "Top-1 accuracy", (|c: &crate::metrics::GridCell| c.top1) as fn(&_) -> f64, (0.0, 1.0)),
            ("brier", "Brier score", |c| c.brier, (0.0, 2.0)),
        ] {
            let mut series = Vec::new();
            for m in &models {
                let pts = noise_rates
                    .iter()
                    .filter_map(|&n| per_model.cell(Some(m), Some(n), Some(st), None).ok().map(|c| (n, pick(c))))
                    .collect::<Vec<_>>();
                if !pts.is_empty() {
                    series.push((m.clone(), pts));
                }
            }
            let title = format!("{label} vs label noise rate, {st}, {:.0}% labeled", final_fraction * 100.0);
            let y_range = if metric == "brier" { fit_range(&series, range) } else { range };
            files.push((format!("{metric}_{st}.svg"), line_chart(&title, "label noise rate", label, &series, y_range)));
        }
    }

    let timing = aggregate_grid(records, GroupBy { model: true, noise: false, strategy: false, proportion: true })?;
    let mut series = Vec::new();
    for m in &models {
        let pts: Vec<(f64, f64)> = timing
            .cells()
            .filter(|c| c.key.model.as_deref() == Some(m))
            .filter_map(|c| c.key.labeled_fraction.map(|f| (f.0, c.seconds)))
            .collect();
        series.push((m.clone(), pts));
    }
    let max_t = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)).fold(0.0, f64::max);
    files.push((
        "training_time.svg".to_string(),
        line_chart(
            "Training time per round vs labeled proportion",
            "labeled proportion",
            "fit seconds",
            &series,
            (0.0, if max_t > 0.0 { max_t * 1.1 } else { 1.0 }),
        ),
    ));

    Ok(Report { files, models, noise_rates, strategies, final_fraction })
}

fn delta_order(strategies: &[Strategy]) -> Vec<Strategy> {
    [Strategy::Random, Strategy::GciVital, Strategy::Entropy].into_iter().filter(|s| strategies.contains(s)).collect()
}

fn header(first: &str, noise_rates: &[f64]) -> String {
    let mut s = first.to_string();
    for n in noise_rates {
        let _ = write!(s, ",{n}");
    }
    s.push('\n');
    s
}

fn model_noise_matrix(
    grid: &Grid,
    models: &[String],
    noise_rates: &[f64],
    value: impl Fn(&crate::metrics::GridCell) -> String,
) -> Result<String> {
    let mut s = header("model", noise_rates);
    for m in models {
        s.push_str(m);
        for &n in noise_rates {
            let cell = grid.cell(Some(m), Some(n), None, None)?;
            let _ = write!(s, ",{}", value(cell));
        }
        s.push('\n');
    }
    Ok(s)
}

/// Fraction as a percentage with two decimals; negative zero prints as zero.
pub fn percent(v: f64) -> String {
    let s = format!("{:.2}", v * 100.0);
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn fit_range(series: &[(String, Vec<(f64, f64)>)], bounds: (f64, f64)) -> (f64, f64) {
    let hi = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)).fold(0.0, f64::max);
    (bounds.0, (hi * 1.1).clamp(0.1, bounds.1))
}

const PALETTE: [&str; 8] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// A line chart with one `<polyline>` per series.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
    y_range: (f64, f64),
) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const L: f64 = 70.0;
    const R: f64 = 160.0;
    const T: f64 = 40.0;
    const B: f64 = 60.0;
    let xs = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0));
    let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 - x0 <= 0.0 {
        (x0, x1) = (x0 - 0.5, x1 + 0.5);
    }
    let (y0, y1) = if y_range.1 > y_range.0 { y_range } else { (y_range.0, y_range.0 + 1.0) };
    let px = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let py = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<g stroke="black" fill="none"><line x1="{L}" y1="{0}" x2="{1}" y2="{0}"/><line x1="{L}" y1="{T}" x2="{L}" y2="{0}"/></g>"#,
        H - B,
        W - R
    );
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ =
            writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, px(xv), H - B + 18.0, tick(xv));
        let _ = writeln!(
            s,
            r##"<line x1="{L}" y1="{0:.2}" x2="{1}" y2="{0:.2}" stroke="#dddddd"/><text x="{2}" y="{3:.2}" text-anchor="end">{4}</text>"##,
            py(yv),
            W - R,
            L - 6.0,
            py(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
        (L + W - R) / 2.0,
        H - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{0:.2}" text-anchor="middle" transform="rotate(-90 18 {0:.2})">{1}</text>"#,
        (T + H - B) / 2.0,
        escape(y_label)
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline data-series="{}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            escape(name),
            coords.join(" ")
        );
        for &(x, y) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = T + 10.0 + 20.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{:.2}" width="14" height="4" fill="{color}"/><text x="{}" y="{:.2}">{}</text>"#,
            W - R + 14.0,
            ly - 4.0,
            W - R + 34.0,
            ly + 2.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(model: &str, strategy: Strategy, noise: f64, round: usize, top1: f64, brier: f64) -> RoundRecord {
        RoundRecord {
            round,
            labeled: 0,
            labeled_fraction: 0.1 * (round + 1) as f64,
            top1,
            brier,
            seconds: 1.0 + round as f64,
            epochs: 3,
            strategy,
            noise_rate: noise,
            model: model.into(),
            seed: 0,
        }
    }

    fn records() -> Vec<RoundRecord> {
        let mut v = Vec::new();
        for m in ["small", "large"] {
            for s in [Strategy::Random, Strategy::Entropy] {
                for n in [0.0, 0.5, 0.9] {
                    for r in 0..2 {
                        let acc = 0.9 - n * 0.5 + if s == Strategy::Entropy { 0.01 } else { 0.0 };
                        v.push(rec(m, s, n, r, acc, 0.2 + n * 0.1));
                    }
                }
            }
        }
        v
    }

    #[test]
    fn matrices_are_models_by_noise() {
        let r = build_report(&records()).unwrap();
        let acc = &r.files.iter().find(|f| f.0 == "accuracy_by_model_noise.csv").unwrap().1;
        let lines: Vec<&str> = acc.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "model,0,0.5,0.9");
        assert!(lines[1].starts_with("small,90.50,"));
        assert!(lines.iter().all(|l| l.split(',').count() == 4));
    }

    #[test]
    fn delta_tables_follow_sign_conventions() {
        let r = build_report(&records()).unwrap();
        let acc = &r.files.iter().find(|f| f.0 == "accuracy_delta.csv").unwrap().1;
        assert_eq!(acc.lines().nth(1).unwrap(), "random,0.00,0.00,0.00");
        assert_eq!(acc.lines().nth(2).unwrap(), "entropy,1.00,1.00,1.00");
    }

    #[test]
    fn one_polyline_per_model_per_strategy_chart() {
        let r = build_report(&records()).unwrap();
        for s in ["random", "entropy"] {
            let svg = &r.files.iter().find(|f| f.0 == format!("accuracy_{s}.svg")).unwrap().1;
            assert_eq!(svg.matches("<polyline").count(), 2);
            assert!(svg.contains(r#"data-series="small""#) && svg.contains(r#"data-series="large""#));
        }
        let t = &r.files.iter().find(|f| f.0 == "training_time.svg").unwrap().1;
        assert_eq!(t.matches("<polyline").count(), 2);
    }

    #[test]
    fn percent_has_no_negative_zero() {
        assert_eq!(percent(-1e-9), "0.00");
        assert_eq!(percent(0.0067), "0.67");
    }
}
