//! Report files: run JSON, paper-style accuracy tables, SVG curves and
//! attention dumps.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::Array4;
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::ablation::{AblationSummary, Sweep};
use super::config::TrainConfig;
use super::metrics::{EpochRecord, MetricsReport};
use super::train::{normalize, TrainOutcome};
use crate::attention::AttentionDump;
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::Mode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    #[serde(rename = "final")]
    pub last: EpochRecord,
    pub best: EpochRecord,
}

impl RunReport {
    pub fn new(config: &TrainConfig, outcome: &TrainOutcome) -> Self {
        Self {
            config: config.clone(),
            seed: config.seed,
            epochs: outcome.reports.iter().map(MetricsReport::to_record).collect(),
            last: outcome.final_report().to_record(),
            best: outcome.best_report().to_record(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }

    /// Every epoch as a report, with derived values recomputed.
    pub fn reports(&self) -> Result<Vec<MetricsReport>> {
        self.epochs.iter().map(MetricsReport::from_record).collect()
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    std::io::Write::flush(&mut out).map_err(|e| Error::io(path, e))
}

/// One row per labelled report: per-class accuracy then Overall and Mean,
/// all in percent. Classes without samples are left blank.
pub fn write_table_csv(rows: &[(String, MetricsReport)], path: &Path) -> Result<()> {
    let (_, first) = rows.first().ok_or_else(|| Error::data("no reports to tabulate"))?;
    if rows.iter().any(|(_, r)| r.class_names != first.class_names) {
        return Err(Error::data("reports disagree on class names"));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["run".to_string()];
    header.extend(first.class_names.iter().cloned());
    header.extend(["Overall".to_string(), "Mean".to_string()]);
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    for (label, r) in rows {
        let mut row = vec![label.clone()];
        row.extend(r.per_class_accuracy.iter().map(|a| a.map(pct).unwrap_or_default()));
        row.push(pct(r.overall_accuracy));
        row.push(pct(r.mean_accuracy));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The ablation table: one row per arm with seed-averaged accuracies.
pub fn write_ablation_csv(summary: &AblationSummary, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["run".to_string()];
    header.extend(summary.class_names.iter().cloned());
    header.extend(["Overall".to_string(), "Mean".to_string()]);
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    for arm in &summary.arms {
        let mut row = vec![arm.arm.label().to_string()];
        row.extend(arm.per_class.iter().map(|a| a.map(pct).unwrap_or_default()));
        row.push(pct(arm.overall_accuracy));
        row.push(pct(arm.mean_accuracy));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::data(format!("{}: {other:?}", path.display())),
    }
}

type Series = (String, Vec<(f64, f64)>);

fn line_chart(path: &Path, title: &str, x_label: &str, series: &[Series]) -> Result<()> {
    let points = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, _) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    if !x0.is_finite() {
        return Err(Error::data("nothing to plot"));
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    // Create the file up front so an unwritable path surfaces as an I/O error.
    File::create(path).map_err(|e| Error::io(path, e))?;
    let plot_err = |e: String| Error::data(format!("{}: {e}", path.display()));
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1, 0.0..1.0)
        .map_err(|e| plot_err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc("accuracy")
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(e.to_string()))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| plot_err(e.to_string()))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    root.present().map_err(|e| plot_err(e.to_string()))
}

pub fn plot_accuracy_vs_epoch(reports: &[MetricsReport], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::data("no reports to plot"));
    }
    let series = vec![
        (
            "overall".to_string(),
            reports.iter().map(|r| (r.epoch as f64, r.overall_accuracy)).collect(),
        ),
        (
            "mean".to_string(),
            reports.iter().map(|r| (r.epoch as f64, r.mean_accuracy)).collect(),
        ),
    ];
    line_chart(path, "accuracy per epoch", "epoch", &series)
}

pub fn plot_sweep(sweep: &Sweep, path: &Path) -> Result<()> {
    let name = sweep.param.name();
    let series = vec![
        (
            "overall".to_string(),
            sweep.points.iter().map(|p| (p.value, p.overall_accuracy)).collect(),
        ),
        (
            "mean".to_string(),
            sweep.points.iter().map(|p| (p.value, p.mean_accuracy)).collect(),
        ),
    ];
    line_chart(path, &format!("accuracy vs {name}"), name, &series)
}

/// Class activation maps of `images` (raw intensities in `[0, 1]`) under the
/// checkpoint's running statistics.
pub fn attention_maps(checkpoint: &Checkpoint, images: &Array4<f64>) -> Result<AttentionDump> {
    let mut x = images.to_owned();
    normalize(&mut x, &checkpoint.norm);
    let view = checkpoint.model.forward_view(&x, Mode::Eval)?;
    Ok(AttentionDump::from_maps(&view.maps))
}

pub fn dump_attention(checkpoint: &Checkpoint, images: &Array4<f64>, path: &Path) -> Result<AttentionDump> {
    let dump = attention_maps(checkpoint, images)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    dump.write_to(BufWriter::new(file)).map_err(|e| Error::io(path, e))?;
    Ok(dump)
}

pub fn load_attention(path: &Path) -> Result<AttentionDump> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    AttentionDump::read_from(std::io::BufReader::new(file))
}
