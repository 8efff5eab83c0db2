//! Result files: `results.csv`, a per-figure summary table and optional SVG plots.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use reps_core::metrics::MetricReport;
use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::error::{HarnessError, Result};
use crate::run::RunRecord;

pub const RESULTS_FILE: &str = "results.csv";

/// Column layout of `results.csv`. Missing values are empty cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Row {
    method: Method,
    task: String,
    nfe: u64,
    seed: u64,
    psnr: Option<f64>,
    ssim: Option<f64>,
    mse: Option<f64>,
    post_mean_err: Option<f64>,
    tv: Option<f64>,
    wall_s: Option<f64>,
    error: Option<String>,
    config_hash: String,
    ode_steps: Option<usize>,
}

/// NaN is never written; it becomes an empty cell.
fn not_nan(v: Option<f64>) -> Option<f64> {
    v.filter(|x| !x.is_nan())
}

impl From<&RunRecord> for Row {
    fn from(r: &RunRecord) -> Self {
        let m = &r.metrics;
        Row {
            method: r.method,
            task: r.task.clone(),
            nfe: r.nfe,
            seed: r.seed,
            psnr: not_nan(m.psnr),
            ssim: not_nan(m.ssim),
            mse: not_nan(m.mse),
            post_mean_err: not_nan(m.posterior_mean_err),
            tv: not_nan(m.tv_distance),
            wall_s: not_nan(r.wall_s),
            error: r.error.clone(),
            config_hash: r.config_hash.clone(),
            ode_steps: r.ode_steps,
        }
    }
}

impl From<Row> for RunRecord {
    fn from(r: Row) -> Self {
        RunRecord {
            method: r.method,
            task: r.task,
            nfe: r.nfe,
            seed: r.seed,
            ode_steps: r.ode_steps,
            metrics: MetricReport {
                psnr: r.psnr,
                ssim: r.ssim,
                mse: r.mse,
                posterior_mean_err: r.post_mean_err,
                tv_distance: r.tv,
            },
            wall_s: r.wall_s,
            error: r.error,
            config_hash: r.config_hash,
        }
    }
}

pub fn write_records<W: std::io::Write>(records: &[RunRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(Row::from(r))?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_records<R: std::io::Read>(input: R) -> Result<Vec<RunRecord>> {
    csv::Reader::from_reader(input)
        .deserialize::<Row>()
        .map(|r| Ok(RunRecord::from(r?)))
        .collect()
}

type MetricFn = fn(&MetricReport) -> Option<f64>;

/// Metric columns that can be summarized and plotted.
const METRICS: [(&str, MetricFn); 5] = [
    ("psnr", |m| m.psnr),
    ("ssim", |m| m.ssim),
    ("mse", |m| m.mse),
    ("post_mean_err", |m| m.posterior_mean_err),
    ("tv", |m| m.tv_distance),
];

/// Seed-averaged metrics for one (method, nfe, ode_steps) series point.
#[derive(Debug, Clone, PartialEq, Serialize)]
struct SummaryRow {
    method: Method,
    nfe: u64,
    ode_steps: Option<usize>,
    runs: usize,
    failed: usize,
    psnr: Option<f64>,
    ssim: Option<f64>,
    mse: Option<f64>,
    post_mean_err: Option<f64>,
    tv: Option<f64>,
}

type SeriesKey = (Method, u64, Option<usize>);

fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<SeriesKey, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.method, r.nfe, r.ode_steps)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, nfe, ode_steps), rs)| {
            let ok: Vec<_> = rs.iter().filter(|r| r.error.is_none()).collect();
            let mean = |f: MetricFn| {
                let vals: Vec<f64> = ok.iter().filter_map(|r| f(&r.metrics)).filter(|v| !v.is_nan()).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            };
            let [psnr, ssim, mse, post_mean_err, tv] = METRICS.map(|(_, f)| mean(f));
            SummaryRow {
                method,
                nfe,
                ode_steps,
                runs: rs.len(),
                failed: rs.len() - ok.len(),
                psnr,
                ssim,
                mse,
                post_mean_err,
                tv,
            }
        })
        .collect()
}

fn create(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|source| HarnessError::Write { path: path.into(), source })
}

/// Which axis the per-figure outputs use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    /// Metric against NFE, one series per method.
    Nfe,
    /// Metric against ODE steps per restart at a fixed budget.
    OdeSteps,
}

impl Figure {
    fn stem(self) -> &'static str {
        match self {
            Figure::Nfe => "summary_by_nfe",
            Figure::OdeSteps => "ablation_ode_steps",
        }
    }
}

/// Writes `results.csv`, the summary table for `figure` and, when `plots` is
/// set, one SVG per metric that has data. Returns every written path once.
pub fn emit_outputs(records: &[RunRecord], out_dir: &Path, figure: Figure, plots: bool) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(HarnessError::NoRecords);
    }
    std::fs::create_dir_all(out_dir).map_err(|source| HarnessError::Write { path: out_dir.into(), source })?;
    let mut manifest = Vec::new();

    let results = out_dir.join(RESULTS_FILE);
    write_records(records, create(&results)?)?;
    manifest.push(results);

    let summary = summarize(records);
    let table = out_dir.join(format!("{}.csv", figure.stem()));
    let mut w = csv::Writer::from_writer(create(&table)?);
    for row in &summary {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    manifest.push(table);

    if plots {
        for (name, f) in METRICS {
            let path = out_dir.join(format!("{}_{name}.svg", figure.stem()));
            if plot_metric(&summary, figure, name, f, &path)? {
                manifest.push(path);
            }
        }
    }
    Ok(manifest)
}

fn summary_value(row: &SummaryRow, metric: MetricFn) -> Option<f64> {
    metric(&MetricReport {
        psnr: row.psnr,
        ssim: row.ssim,
        mse: row.mse,
        posterior_mean_err: row.post_mean_err,
        tv_distance: row.tv,
    })
    .filter(|v| v.is_finite())
}

/// Draws one metric. Returns `false` (and writes nothing) when no point has a value.
fn plot_metric(
    summary: &[SummaryRow],
    figure: Figure,
    name: &str,
    metric: MetricFn,
    path: &Path,
) -> Result<bool> {
    let mut series: BTreeMap<Method, Vec<(f64, f64)>> = BTreeMap::new();
    for row in summary {
        let x = match figure {
            Figure::Nfe => row.nfe as f64,
            Figure::OdeSteps => match row.ode_steps {
                Some(s) => s as f64,
                None => continue,
            },
        };
        if let Some(y) = summary_value(row, metric) {
            series.entry(row.method).or_default().push((x, y));
        }
    }
    let points: Vec<(f64, f64)> = series.values().flatten().copied().collect();
    if points.is_empty() {
        return Ok(false);
    }
    let (x_lo, x_hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let (y_lo, y_hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let pad = ((y_hi - y_lo) * 0.05).max(1e-9);
    let x_label = match figure {
        Figure::Nfe => "NFE",
        Figure::OdeSteps => "ODE steps per restart",
    };

    let plot_err = |e: &dyn std::fmt::Display| HarnessError::Plot(format!("{}: {e}", path.display()));
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{name} vs {x_label}"), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d((x_lo * 0.8..x_hi * 1.25).log_scale(), y_lo - pad..y_hi + pad)
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(name)
        .draw()
        .map_err(|e| plot_err(&e))?;
    for (i, (method, mut pts)) in series.into_iter().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(method.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(|e| plot_err(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(method: Method, nfe: u64, seed: u64) -> RunRecord {
        RunRecord {
            method,
            task: "inpaint_random".into(),
            nfe,
            seed,
            ode_steps: (method == Method::Reps).then_some(10),
            metrics: MetricReport {
                psnr: Some(20.0 + seed as f64 + 1.0 / 3.0),
                ssim: None,
                mse: Some(0.01 * (seed + 1) as f64),
                posterior_mean_err: Some(0.1),
                tv_distance: None,
            },
            wall_s: Some(0.125),
            error: None,
            config_hash: "ab".repeat(32),
        }
    }

    #[test]
    fn csv_round_trips() {
        let mut recs = vec![record(Method::Ode, 100, 0), record(Method::Reps, 110, 1)];
        recs[1].metrics.psnr = Some(f64::INFINITY);
        recs.push(RunRecord {
            metrics: MetricReport::default(),
            wall_s: None,
            error: Some("singular system: \"quoted\", with comma".into()),
            ..record(Method::Sde, 100, 2)
        });
        let mut buf = Vec::new();
        write_records(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "method,task,nfe,seed,psnr,ssim,mse,post_mean_err,tv,wall_s,error,config_hash,ode_steps\n"
        ));
        assert!(text.contains("inf"));
        assert_eq!(read_records(buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn nan_becomes_an_empty_cell() {
        let mut r = record(Method::Ode, 100, 0);
        r.metrics.ssim = Some(f64::NAN);
        let mut buf = Vec::new();
        write_records(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(!text.to_lowercase().contains("nan"), "{text}");
        let back = read_records(text.as_bytes()).unwrap();
        assert_eq!(back[0].metrics.ssim, None);
    }

    #[test]
    fn summary_averages_successful_runs() {
        let mut recs = vec![record(Method::Ode, 100, 0), record(Method::Ode, 100, 1), record(Method::Ode, 100, 2)];
        recs[2].error = Some("boom".into());
        recs[2].metrics = MetricReport::default();
        let s = summarize(&recs);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].runs, s[0].failed), (3, 1));
        assert!((s[0].mse.unwrap() - 0.015).abs() < 1e-15);
        assert_eq!(s[0].ssim, None);
    }

    #[test]
    fn manifest_lists_each_file_once() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![record(Method::Ode, 100, 0), record(Method::Reps, 110, 0), record(Method::Ode, 1000, 0)];
        let manifest = emit_outputs(&recs, dir.path(), Figure::Nfe, true).unwrap();
        let mut unique = manifest.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), manifest.len());
        for p in &manifest {
            assert!(p.is_file(), "{}", p.display());
        }
        // psnr, mse and post_mean_err have data; ssim and tv do not.
        assert_eq!(manifest.len(), 2 + 3);
        let on_disk = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(on_disk, manifest.len());
        assert!(matches!(emit_outputs(&[], dir.path(), Figure::Nfe, false), Err(HarnessError::NoRecords)));
    }

    #[test]
    fn unwritable_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("not-a-dir");
        std::fs::write(&file, "x").unwrap();
        let err = emit_outputs(&[record(Method::Ode, 100, 0)], &file, Figure::Nfe, false).unwrap_err();
        assert!(matches!(err, HarnessError::Write { .. }), "{err}");
    }
}
