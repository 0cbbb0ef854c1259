//! Report emission: JSON and CSV tables plus SVG plots of trade-off curves,
//! conditional breakdowns, top-k accuracy and loss evolution.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{ConditionalBreakdown, TradeoffReport};
use crate::training::TrainLog;

/// A conditional breakdown tagged with the sweep cell it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBreakdown {
    pub architecture: String,
    pub mode: String,
    pub breakdown: ConditionalBreakdown,
}

/// A training log tagged with its sweep cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledLog {
    pub architecture: String,
    pub mode: String,
    pub alpha: f64,
    pub log: TrainLog,
}

impl LabeledLog {
    pub fn stem(&self) -> String {
        format!("{}_{}_alpha{}", self.architecture, self.mode, self.alpha)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    /// Units of every KL value in the document.
    pub units: String,
    pub tradeoffs: Vec<TradeoffReport>,
    pub breakdowns: Vec<LabeledBreakdown>,
}

#[derive(Debug, Serialize)]
struct TradeoffCsvRow<'a> {
    architecture: &'a str,
    mode: &'a str,
    alpha: String,
    utility_kl: f64,
    privacy_kl: f64,
    top1: Option<f64>,
    top3: Option<f64>,
    privacy_accuracy: f64,
    samples: usize,
}

#[derive(Debug, Serialize)]
struct BreakdownCsvRow<'a> {
    architecture: &'a str,
    mode: &'a str,
    alpha: String,
    true_attribute: u8,
    count: usize,
    median: f64,
    q1: f64,
    q3: f64,
    whisker_low: f64,
    whisker_high: f64,
    outliers: usize,
    prior_class1: f64,
}

fn alpha_label(alpha: Option<f64>) -> String {
    alpha.map_or_else(|| "raw".into(), |a| a.to_string())
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(format!("plotting failed: {e}")))
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// Write `report.json`, CSV tables, loss logs and SVG plots under `out_dir`.
/// Returns every file written.
pub fn emit_report(doc: &ReportDocument, logs: &[LabeledLog], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let json = out_dir.join("report.json");
    fs::write(&json, serde_json::to_vec_pretty(doc)?)?;
    written.push(json);

    let csv_path = out_dir.join("tradeoff.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    for t in &doc.tradeoffs {
        for row in std::iter::once(&t.raw).chain(&t.rows) {
            w.serialize(TradeoffCsvRow {
                architecture: &t.architecture,
                mode: &t.mode,
                alpha: alpha_label(row.alpha),
                utility_kl: row.utility_kl,
                privacy_kl: row.privacy_kl,
                top1: row.topk_accuracy(1),
                top3: row.topk_accuracy(3),
                privacy_accuracy: row.privacy_accuracy,
                samples: row.samples,
            })
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    written.push(csv_path);

    let csv_path = out_dir.join("breakdowns.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    for b in &doc.breakdowns {
        for g in &b.breakdown.groups {
            let s = &g.summary;
            w.serialize(BreakdownCsvRow {
                architecture: &b.architecture,
                mode: &b.mode,
                alpha: alpha_label(b.breakdown.alpha),
                true_attribute: g.true_attribute,
                count: s.count,
                median: s.median,
                q1: s.q1,
                q3: s.q3,
                whisker_low: s.whisker_low,
                whisker_high: s.whisker_high,
                outliers: s.outliers.len(),
                prior_class1: b.breakdown.prior_class1,
            })
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    written.push(csv_path);

    if !doc.tradeoffs.is_empty() {
        let p = out_dir.join("tradeoff.svg");
        plot_tradeoff(&doc.tradeoffs, &p)?;
        written.push(p);
        let p = out_dir.join("topk.svg");
        plot_topk(&doc.tradeoffs, &p)?;
        written.push(p);
    }

    let mut cells: Vec<(&str, &str)> = doc
        .breakdowns
        .iter()
        .map(|b| (b.architecture.as_str(), b.mode.as_str()))
        .collect();
    cells.dedup();
    for (arch, mode) in cells {
        let panel: Vec<&ConditionalBreakdown> = doc
            .breakdowns
            .iter()
            .filter(|b| b.architecture == arch && b.mode == mode)
            .map(|b| &b.breakdown)
            .collect();
        let p = out_dir.join(format!("whiskers_{arch}_{mode}.svg"));
        plot_whiskers(&format!("{arch} / {mode}"), &panel, &p)?;
        written.push(p);
    }

    for l in logs {
        let p = out_dir.join(format!("loss_{}.csv", l.stem()));
        let mut f = std::io::BufWriter::new(fs::File::create(&p)?);
        l.log.write_csv(&mut f)?;
        written.push(p);
        if !l.log.is_empty() {
            let p = out_dir.join(format!("loss_{}.svg", l.stem()));
            plot_loss(l, &p)?;
            written.push(p);
        }
    }
    Ok(written)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

fn plot_tradeoff(reports: &[TradeoffReport], path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (720, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let max_u = reports
        .iter()
        .flat_map(|r| r.rows.iter().map(|x| x.utility_kl))
        .fold(1e-3, f64::max);
    let max_p = reports
        .iter()
        .flat_map(|r| r.rows.iter().chain([&r.raw]).map(|x| x.privacy_kl))
        .fold(1e-3, f64::max);
    let mut chart = ChartBuilder::on(&root)
        .caption("utility / privacy trade-off (nats)", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..max_u * 1.1, 0.0..max_p * 1.1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("utility KL  D(P(u|x) || P(u|S(x)))")
        .y_desc("privacy KL  D(P(p) || P(p|S(x)))")
        .draw()
        .map_err(plot_err)?;
    for (i, r) in reports.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = r.rows.iter().map(|x| (x.utility_kl, x.privacy_kl)).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(format!("{} / {}", r.architecture, r.mode))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart
            .draw_series(PointSeries::of_element(pts, 4, color.filled(), &|c, s, st| {
                Circle::new(c, s, st)
            }))
            .map_err(plot_err)?;
        for row in &r.rows {
            let label = format!("α={}", alpha_label(row.alpha));
            chart
                .draw_series(std::iter::once(Text::new(
                    label,
                    (row.utility_kl, row.privacy_kl),
                    ("sans-serif", 11).into_font().color(&color),
                )))
                .map_err(plot_err)?;
        }
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn plot_topk(reports: &[TradeoffReport], path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (760, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let alphas: Vec<Option<f64>> = std::iter::once(None)
        .chain(reports.first().into_iter().flat_map(|r| r.rows.iter().map(|x| x.alpha)))
        .collect();
    let groups = alphas.len() as f64;
    let series = reports.len().max(1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption("top-3 utility accuracy on S(x)", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..groups, 0.0..1.05)
        .map_err(plot_err)?;
    let labels = alphas.clone();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(alphas.len() * 2)
        .x_label_formatter(&move |x| {
            let i = x.floor() as usize;
            if (x - x.floor() - 0.5).abs() < 0.26 {
                labels.get(i).map_or(String::new(), |a| alpha_label(*a))
            } else {
                String::new()
            }
        })
        .x_desc("α")
        .y_desc("accuracy")
        .draw()
        .map_err(plot_err)?;
    for (si, r) in reports.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let width = 0.8 / series;
        let bars = std::iter::once(&r.raw)
            .chain(&r.rows)
            .enumerate()
            .filter_map(|(gi, row)| row.topk_accuracy(3).or(row.topk_accuracy(1)).map(|a| (gi, a)))
            .map(|(gi, acc)| {
                let x0 = gi as f64 + 0.1 + si as f64 * width;
                Rectangle::new([(x0, 0.0), (x0 + width, acc)], color.filled())
            });
        chart
            .draw_series(bars)
            .map_err(plot_err)?
            .label(format!("{} / {}", r.architecture, r.mode))
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 14, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerLeft)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn plot_whiskers(title: &str, panel: &[&ConditionalBreakdown], path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (760, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let n = panel.len().max(1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("P(attribute = 1 | S(x)) by true attribute: {title}"), ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..n, 0.0..1.0)
        .map_err(plot_err)?;
    let labels: Vec<String> = panel.iter().map(|b| alpha_label(b.alpha)).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(panel.len() * 2)
        .x_label_formatter(&move |x| {
            let i = x.floor() as usize;
            if (x - x.floor() - 0.5).abs() < 0.26 {
                labels.get(i).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .x_desc("α  (left box: attribute 0, right box: attribute 1)")
        .y_desc("posterior of class 1")
        .draw()
        .map_err(plot_err)?;
    for (i, b) in panel.iter().enumerate() {
        let prior = b.prior_class1;
        chart
            .draw_series(std::iter::once(PathElement::new(
                vec![(i as f64 + 0.05, prior), (i as f64 + 0.95, prior)],
                BLUE.stroke_width(1),
            )))
            .map_err(plot_err)?;
        for g in &b.groups {
            let color = PALETTE[g.true_attribute as usize % PALETTE.len()];
            let s = &g.summary;
            let x0 = i as f64 + 0.15 + 0.4 * g.true_attribute as f64;
            let (x1, xm) = (x0 + 0.3, x0 + 0.15);
            let mut shapes: Vec<DynElement<SVGBackend, (f64, f64)>> = vec![
                Rectangle::new([(x0, s.q1), (x1, s.q3)], color.mix(0.35).filled()).into_dyn(),
                Rectangle::new([(x0, s.q1), (x1, s.q3)], color.stroke_width(1)).into_dyn(),
                PathElement::new(vec![(x0, s.median), (x1, s.median)], BLACK.stroke_width(2)).into_dyn(),
                PathElement::new(vec![(xm, s.q3), (xm, s.whisker_high)], color.stroke_width(1)).into_dyn(),
                PathElement::new(vec![(xm, s.q1), (xm, s.whisker_low)], color.stroke_width(1)).into_dyn(),
                PathElement::new(vec![(x0 + 0.07, s.whisker_high), (x1 - 0.07, s.whisker_high)], color.stroke_width(1))
                    .into_dyn(),
                PathElement::new(vec![(x0 + 0.07, s.whisker_low), (x1 - 0.07, s.whisker_low)], color.stroke_width(1))
                    .into_dyn(),
            ];
            shapes.extend(
                s.outliers
                    .iter()
                    .take(200)
                    .map(|&o| Circle::new((xm, o), 2, color.stroke_width(1)).into_dyn()),
            );
            chart.draw_series(shapes).map_err(plot_err)?;
        }
    }
    root.present().map_err(plot_err)
}

fn plot_loss(l: &LabeledLog, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (760, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let ls: Vec<(f64, f64)> = l.log.records.iter().map(|r| (r.iteration as f64, r.loss_s)).collect();
    let lp: Vec<(f64, f64)> = l
        .log
        .records
        .iter()
        .filter_map(|r| r.loss_p.map(|p| (r.iteration as f64, p)))
        .collect();
    let x_max = ls.last().map_or(1.0, |p| p.0.max(1.0));
    let y_max = ls
        .iter()
        .chain(&lp)
        .map(|p| p.1)
        .filter(|v| v.is_finite())
        .fold(1e-3, f64::max);
    let mut chart = ChartBuilder::on(&root)
        .caption(
            format!("losses: {} / {} / α={}", l.architecture, l.mode, l.alpha),
            ("sans-serif", 18),
        )
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..x_max, 0.0..y_max * 1.05)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .y_desc("loss (nats)")
        .draw()
        .map_err(plot_err)?;
    let (cs, cp) = (PALETTE[0], PALETTE[3]);
    chart
        .draw_series(LineSeries::new(ls, cs.stroke_width(1)))
        .map_err(plot_err)?
        .label("sanitization loss")
        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], cs.stroke_width(2)));
    if !lp.is_empty() {
        chart
            .draw_series(LineSeries::new(lp, cp.stroke_width(1)))
            .map_err(plot_err)?
            .label("privacy loss")
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], cp.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}
