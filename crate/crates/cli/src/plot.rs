//! SVG plot of mean LCS ratio versus target difficulty, one line per
//! (method, budget) with vertical standard-error bars.

use plotters::prelude::*;
use softlm_core::metrics::AggregateRow;

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

pub fn lcs_vs_difficulty(path: &std::path::Path, rows: &[AggregateRow]) -> anyhow::Result<()> {
    anyhow::ensure!(!rows.is_empty(), "no aggregate rows to plot");
    let mut series: Vec<(String, Vec<&AggregateRow>)> = Vec::new();
    for row in rows {
        let label = format!("{} @{}", row.method, row.budget);
        match series.iter_mut().find(|(l, _)| *l == label) {
            Some((_, v)) => v.push(row),
            None => series.push((label, vec![row])),
        }
    }
    let k_max = rows.iter().map(|r| r.k).max().unwrap_or(1) as f64;

    let root = SVGBackend::new(path, (900, 600)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(18)
        .x_label_area_size(46)
        .y_label_area_size(56)
        .caption("Inversion accuracy vs target difficulty", ("sans-serif", 22))
        .build_cartesian_2d(0.0..(k_max + 1.0), 0.0..1.05f64)?;
    chart
        .configure_mesh()
        .x_desc("target difficulty k")
        .y_desc("mean LCS ratio")
        .label_style(("sans-serif", 15))
        .draw()?;

    for (si, (label, points)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut pts: Vec<(f64, f64, f64)> =
            points.iter().map(|r| (r.k as f64, r.mean_lcs, r.stderr_lcs)).collect();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        chart
            .draw_series(LineSeries::new(pts.iter().map(|&(k, m, _)| (k, m)), color.stroke_width(2)))?
            .label(label.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
            });
        chart.draw_series(pts.iter().map(|&(k, m, _)| Circle::new((k, m), 3, color.filled())))?;
        // standard-error bars
        chart.draw_series(pts.iter().map(|&(k, m, se)| {
            PathElement::new(
                vec![(k, (m - se).max(0.0)), (k, (m + se).min(1.05))],
                color.stroke_width(1),
            )
        }))?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.85))
        .label_font(("sans-serif", 14))
        .position(SeriesLabelPosition::LowerLeft)
        .draw()?;
    root.present()?;
    Ok(())
}
