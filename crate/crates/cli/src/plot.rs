use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;

/// One curve point: budget, mean, standard deviation (all IoU in percent).
pub type CurvePoint = (usize, f64, f64);

/// Line plot of mIoU against the annotation budget, with ±std whiskers.
pub fn budget_curve(path: &Path, title: &str, points: &[CurvePoint]) -> Result<()> {
    let err = |e: DrawingAreaErrorKind<std::io::Error>| anyhow!("plotting {}: {e}", path.display());
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let x_max = points.iter().map(|p| p.0).max().unwrap_or(1) as f64 * 1.05;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..x_max, 0f64..100f64)
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_desc("annotations per category")
        .y_desc("mIoU (%)")
        .draw()
        .map_err(err)?;
    let xy: Vec<(f64, f64)> = points.iter().map(|&(b, m, _)| (b as f64, m)).collect();
    chart
        .draw_series(LineSeries::new(xy.clone(), &BLUE))
        .map_err(err)?;
    chart
        .draw_series(xy.iter().map(|&p| Circle::new(p, 4, BLUE.filled())))
        .map_err(err)?;
    chart
        .draw_series(points.iter().map(|&(b, m, s)| {
            PathElement::new(
                vec![(b as f64, (m - s).max(0.0)), (b as f64, (m + s).min(100.0))],
                BLUE,
            )
        }))
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}
