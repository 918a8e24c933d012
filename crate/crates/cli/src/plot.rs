//! Learning curves: median over seeds with a min–max band.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use morel_core::baselines::{median, read_summary, SummaryRow, Variant};
use morel_core::{Error, Result};
use plotters::prelude::*;

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub x: u64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub variant: String,
    pub points: Vec<CurvePoint>,
}

/// Groups rows by variant. A point is kept only where every seed of that
/// variant logged a return; pretrained variants are shifted right by
/// `pretrain_frames`.
pub fn aggregate(rows: &[SummaryRow], pretrain_frames: u64) -> Result<Vec<Curve>> {
    let mut by_variant: BTreeMap<&str, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    let mut seeds: BTreeMap<&str, std::collections::BTreeSet<u64>> = BTreeMap::new();
    for r in rows {
        seeds.entry(&r.variant).or_default().insert(r.seed);
        if let Some(m) = r.mean_return {
            by_variant.entry(&r.variant).or_default().entry(r.env_steps).or_default().push(m);
        }
    }
    let mut curves = Vec::new();
    for (name, steps) in by_variant {
        let offset = name.parse::<Variant>()?.curve_offset(pretrain_frames);
        let n_seeds = seeds[name].len();
        let points = steps
            .into_iter()
            .filter(|(_, v)| v.len() == n_seeds)
            .map(|(x, v)| CurvePoint {
                x: x + offset,
                median: median(&v),
                min: v.iter().copied().fold(f64::INFINITY, f64::min),
                max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
            .collect();
        curves.push(Curve {
            variant: name.to_string(),
            points,
        });
    }
    Ok(curves)
}

fn draw_err<E: std::fmt::Debug>(e: E) -> Error {
    Error::io("drawing plot", std::io::Error::other(format!("{e:?}")))
}

/// Reads the summaries, draws one SVG and returns the number of curves.
pub fn plot_summaries(summaries: &[PathBuf], out: &Path, pretrain_frames: u64, title: &str) -> Result<usize> {
    let mut rows = Vec::new();
    for p in summaries {
        rows.extend(read_summary(p)?);
    }
    let curves = aggregate(&rows, pretrain_frames)?;
    let pts = curves.iter().flat_map(|c| &c.points);
    let x_max = pts.clone().map(|p| p.x).max().unwrap_or(1).max(1);
    let y_min = pts.clone().map(|p| p.min).fold(0.0, f64::min);
    let y_max = pts.map(|p| p.max).fold(1.0, f64::max);

    let root = SVGBackend::new(out, (960, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(0u64..x_max, y_min..y_max * 1.05)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("environment steps")
        .y_desc("mean episode return")
        .draw()
        .map_err(draw_err)?;
    for (i, c) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let mut band: Vec<(u64, f64)> = c.points.iter().map(|p| (p.x, p.max)).collect();
        band.extend(c.points.iter().rev().map(|p| (p.x, p.min)));
        if !band.is_empty() {
            chart
                .draw_series(std::iter::once(Polygon::new(band, color.mix(0.2).filled())))
                .map_err(draw_err)?;
        }
        chart
            .draw_series(LineSeries::new(c.points.iter().map(|p| (p.x, p.median)), color.stroke_width(2)))
            .map_err(draw_err)?
            .label(c.variant.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(curves.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: &str, seed: u64, env_steps: u64, m: Option<f64>) -> SummaryRow {
        SummaryRow {
            variant: variant.into(),
            seed,
            env_steps,
            mean_return: m,
        }
    }

    #[test]
    fn offset_only_for_pretrained() {
        let rows = [row("morel_joint", 1, 80, Some(1.0)), row("baseline_standard", 1, 80, Some(2.0))];
        let c = aggregate(&rows, 10_000).unwrap();
        let x = |name: &str| c.iter().find(|c| c.variant == name).unwrap().points[0].x;
        assert_eq!(x("morel_joint"), 10_080);
        assert_eq!(x("baseline_standard"), 80);
    }

    #[test]
    fn median_and_band_over_three_seeds() {
        let rows = [
            row("baseline_double", 1, 80, Some(1.0)),
            row("baseline_double", 2, 80, Some(5.0)),
            row("baseline_double", 3, 80, Some(2.0)),
            row("baseline_double", 1, 160, Some(1.0)),
            row("baseline_double", 2, 160, None),
            row("baseline_double", 3, 160, Some(2.0)),
        ];
        let c = aggregate(&rows, 0).unwrap();
        assert_eq!(
            c[0].points,
            [CurvePoint {
                x: 80,
                median: 2.0,
                min: 1.0,
                max: 5.0
            }]
        );
    }
}
