use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Once;

use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};
use serde::Serialize;

use super::eval::EvalReport;
use crate::error::{Error, Result};

static FONT: Once = Once::new();

fn ensure_font() {
    FONT.call_once(|| {
        // registration only fails on unparsable bytes, which the bundled font is not
        let _ = register_font("sans-serif", FontStyle::Normal, dejavu::sans::regular());
    });
}

#[derive(Serialize)]
struct Row<'a> {
    series: &'a str,
    step: u64,
    mode: &'a str,
    content_accuracy: f64,
    error_rate: f64,
}

/// Path of the CSV written next to `image`.
pub fn csv_path(image: &Path) -> PathBuf {
    image.with_extension("csv")
}

/// Plots content error rate (1 - accuracy) against training step, one
/// curve per report label, and writes the points to a CSV beside the image.
pub fn plot_convergence(reports: &[EvalReport], out: impl AsRef<Path>) -> Result<PathBuf> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("convergence reports"));
    }
    let out = out.as_ref();
    let mut series: BTreeMap<&str, Vec<(u64, f64)>> = BTreeMap::new();
    for r in reports {
        series.entry(r.label.as_str()).or_default().push((r.step, 1.0 - r.content_accuracy));
    }
    for points in series.values_mut() {
        points.sort_by_key(|p| p.0);
    }

    let csv = csv_path(out);
    let mut w = csv::Writer::from_path(&csv).map_err(|e| Error::Plot(e.to_string()))?;
    for r in reports {
        w.serialize(Row {
            series: &r.label,
            step: r.step,
            mode: match r.mode {
                super::eval::EvalMode::Offline => "offline",
                super::eval::EvalMode::Streaming => "streaming",
            },
            content_accuracy: r.content_accuracy,
            error_rate: 1.0 - r.content_accuracy,
        })
        .map_err(|e| Error::Plot(e.to_string()))?;
    }
    w.flush()?;

    ensure_font();
    let max_step = reports.iter().map(|r| r.step).max().unwrap_or(0).max(1);
    let plot = |path: &Path| -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = BitMapBackend::new(path, (800, 500)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("Content error rate over training", ("sans-serif", 22))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(0u64..max_step, 0f64..1f64)?;
        chart
            .configure_mesh()
            .x_desc("training step")
            .y_desc("1 - content accuracy")
            .draw()?;
        for (i, (label, points)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))?
                .label(*label)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
            chart.draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
        root.present()?;
        Ok(())
    };
    plot(out).map_err(|e| Error::Plot(e.to_string()))?;
    Ok(csv)
}
