//! Figures and exported artifacts: 2D neighbor-embedding projections with
//! per-patient trajectories, ROC/PR overlays, and encoder feature-map grids.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use ndarray::{Array2, Array3};
use plotters::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PatientSeries;
use crate::error::{Error, Result};
use crate::evaluation::embed_cohort;
use crate::model::TrajectoryNet;

/// Projections of fewer points than this are refused.
pub const MIN_PROJECTION_POINTS: usize = 10;

/// One exported embedding: a patient at a time point.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub patient_id: String,
    pub label: u8,
    pub time_index: usize,
    pub values: Vec<f32>,
}

pub fn embedding_rows(model: &TrajectoryNet, cohort: &[PatientSeries]) -> Result<Vec<EmbeddingRow>> {
    let per_patient = embed_cohort(model, cohort)?;
    let mut rows = Vec::new();
    for (p, emb) in cohort.iter().zip(per_patient) {
        for (t, row) in emb.rows().into_iter().enumerate() {
            rows.push(EmbeddingRow {
                patient_id: p.patient_id.clone(),
                label: p.label.label(),
                time_index: t,
                values: row.to_vec(),
            });
        }
    }
    Ok(rows)
}

pub fn write_embeddings_csv(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::from(e).at(path))?;
    let dim = rows.first().map_or(0, |r| r.values.len());
    let mut header = vec!["patient_id".to_string(), "label".into(), "time_index".into()];
    header.extend((0..dim).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.patient_id.clone(), r.label.to_string(), r.time_index.to_string()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings_csv(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::from(e).at(path))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::from(e).at(path))?;
        let bad = |what: &str| Error::DataQuality(format!("bad {what} in embeddings file")).at(path);
        let label = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("label"))?;
        let time_index = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| bad("time index"))?;
        let values = rec
            .iter()
            .skip(3)
            .map(|s| s.parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("value"))?;
        rows.push(EmbeddingRow {
            patient_id: rec.get(0).unwrap_or_default().to_string(),
            label,
            time_index,
            values,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub patient_id: String,
    pub label: u8,
    pub time_index: usize,
    pub x: f64,
    pub y: f64,
}

fn euclidean(a: &Vec<f32>, b: &Vec<f32>) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

/// Exact t-SNE to two dimensions from a seeded initial layout.
pub fn project_embeddings(rows: &[EmbeddingRow], seed: u64) -> Result<Vec<ProjectedPoint>> {
    let n = rows.len();
    if n < MIN_PROJECTION_POINTS {
        return Err(Error::Domain(format!(
            "projection needs at least {MIN_PROJECTION_POINTS} embeddings, got {n}"
        )));
    }
    let data: Vec<Vec<f32>> = rows.iter().map(|r| r.values.clone()).collect();
    if data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Domain("embeddings must be finite".into()));
    }
    // bhtsne requires n - 1 >= 3 * perplexity
    let perplexity = ((n - 1) as f32 / 3.0).min(30.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init: Vec<f32> = (0..2 * n).map(|_| (rng.random::<f32>() - 0.5) * 1e-2).collect();
    let mut tsne = bhtsne::tSNE::new(&data);
    tsne.embedding_dim(2)
        .perplexity(perplexity)
        .epochs(1000)
        .initial_embedding(init)
        .exact(euclidean);
    let flat = tsne.embedding();
    Ok(rows
        .iter()
        .enumerate()
        .map(|(i, r)| ProjectedPoint {
            patient_id: r.patient_id.clone(),
            label: r.label,
            time_index: r.time_index,
            x: flat[2 * i] as f64,
            y: flat[2 * i + 1] as f64,
        })
        .collect())
}

/// Per-patient polylines through the projected points in time order.
pub fn trajectories(points: &[ProjectedPoint]) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut by_patient: BTreeMap<String, Vec<(usize, f64, f64)>> = BTreeMap::new();
    for p in points {
        by_patient.entry(p.patient_id.clone()).or_default().push((p.time_index, p.x, p.y));
    }
    by_patient
        .into_iter()
        .map(|(id, mut v)| {
            v.sort_by_key(|e| e.0);
            (id, v.into_iter().map(|(_, x, y)| (x, y)).collect())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorBy {
    Time,
    Outcome,
}

const TIME_COLORS: [RGBColor; 4] = [
    RGBColor(68, 1, 84),
    RGBColor(49, 104, 142),
    RGBColor(53, 183, 121),
    RGBColor(253, 231, 37),
];
const OUTCOME_COLORS: [RGBColor; 2] = [RGBColor(70, 110, 200), RGBColor(215, 60, 50)];

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn bounds(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = xs.clone().fold(f64::INFINITY, f64::min);
    let hi = xs.fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

/// Scatter of projected points, optionally with trajectory polylines.
pub fn plot_projection(path: &Path, points: &[ProjectedPoint], color_by: ColorBy, with_trajectories: bool) -> Result<()> {
    let root = SVGBackend::new(path, (800, 800)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let xr = bounds(points.iter().map(|p| p.x));
    let yr = bounds(points.iter().map(|p| p.y));
    let title = match color_by {
        ColorBy::Time => "embeddings by time point",
        ColorBy::Outcome => "embeddings by outcome",
    };
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .build_cartesian_2d(xr.0..xr.1, yr.0..yr.1)
        .map_err(plot_err)?;
    if with_trajectories {
        let labels: BTreeMap<&str, u8> = points.iter().map(|p| (p.patient_id.as_str(), p.label)).collect();
        for (id, line) in trajectories(points) {
            let color = OUTCOME_COLORS[labels[id.as_str()] as usize % 2].mix(0.35);
            chart.draw_series(LineSeries::new(line, color.stroke_width(1))).map_err(plot_err)?;
        }
    }
    chart
        .draw_series(points.iter().map(|p| {
            let color = match color_by {
                ColorBy::Time => TIME_COLORS[p.time_index % 4],
                ColorBy::Outcome => OUTCOME_COLORS[p.label as usize % 2],
            };
            Circle::new((p.x, p.y), 4, color.filled())
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Overlays labelled curves (ROC or PR) in the unit square.
pub fn plot_curves(path: &Path, title: &str, curves: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let root = SVGBackend::new(path, (700, 700)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(30)
        .build_cartesian_2d(0.0..1.0, 0.0..1.0)
        .map_err(plot_err)?;
    chart.configure_mesh().draw().map_err(plot_err)?;
    let palette = [RED, BLUE, GREEN, MAGENTA, CYAN, BLACK];
    for (k, (name, pts)) in curves.iter().enumerate() {
        let color = palette[k % palette.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

pub fn write_curve_csv(path: &Path, header: [&str; 2], pts: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::from(e).at(path))?;
    w.write_record(header)?;
    for (a, b) in pts {
        w.write_record([a.to_string(), b.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Tiles the first `max_channels` maps of encoder scale `scale` for one image
/// into a grid, each map min-max scaled to `[0, 1]`. With `gated`, the maps are
/// multiplied by the representation-task attention masks first.
pub fn feature_map_grid(
    model: &TrajectoryNet,
    image: &Array3<f32>,
    scale: usize,
    gated: bool,
    max_channels: usize,
) -> Result<Array2<f32>> {
    if scale >= model.config().num_scales() {
        return Err(Error::Config(format!("scale {scale} out of range")));
    }
    let (c, h, w) = image.dim();
    let x = Tensor::from_vec(image.iter().copied().collect::<Vec<_>>(), (1, c, h, w), model.device())?;
    let shared = model.shared_features(&x)?;
    let maps = if gated { model.gate(&shared)? } else { shared };
    let fm = maps[scale].squeeze(0)?;
    let (ch, fh, fw) = fm.dims3()?;
    let n = ch.min(max_channels.max(1));
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let data = fm.to_vec3::<f32>()?;
    let mut grid = Array2::<f32>::zeros((rows * (fh + 1), cols * (fw + 1)));
    for k in 0..n {
        let m = &data[k];
        let lo = m.iter().flatten().copied().fold(f32::INFINITY, f32::min);
        let hi = m.iter().flatten().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (r0, c0) = ((k / cols) * (fh + 1), (k % cols) * (fw + 1));
        for y in 0..fh {
            for xx in 0..fw {
                grid[[r0 + y, c0 + xx]] = (m[y][xx] - lo) / span;
            }
        }
    }
    Ok(grid)
}

/// Raw (unscaled) maps of one scale, for comparing gated and ungated output.
pub fn feature_maps(model: &TrajectoryNet, image: &Array3<f32>, scale: usize, gated: bool) -> Result<Vec<f32>> {
    let (c, h, w) = image.dim();
    let x = Tensor::from_vec(image.iter().copied().collect::<Vec<_>>(), (1, c, h, w), model.device())?;
    let shared = model.shared_features(&x)?;
    let maps = if gated { model.gate(&shared)? } else { shared };
    Ok(maps[scale].flatten_all()?.to_vec1::<f32>()?)
}

pub fn save_grid_png(path: &Path, grid: &Array2<f32>) -> Result<()> {
    let (h, w) = grid.dim();
    let pixels: Vec<u8> = grid.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| Error::Shape("grid buffer size mismatch".into()))?;
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e.to_string())).at(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneConfig;
    use candle_core::Device;

    fn rows(n_patients: usize) -> Vec<EmbeddingRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..n_patients)
            .flat_map(|p| (0..4).map(move |t| (p, t)))
            .map(|(p, t)| EmbeddingRow {
                patient_id: format!("p{p}"),
                label: (p % 2) as u8,
                time_index: t,
                values: (0..6).map(|_| rng.random::<f32>()).collect(),
            })
            .collect()
    }

    #[test]
    fn projection_is_seeded_and_has_four_vertex_trajectories() {
        let r = rows(4);
        let a = project_embeddings(&r, 1).unwrap();
        let b = project_embeddings(&r, 1).unwrap();
        assert_eq!(a, b);
        let traj = trajectories(&a);
        assert_eq!(traj.len(), 4);
        assert!(traj.values().all(|l| l.len() == 4));
    }

    #[test]
    fn small_projection_is_refused() {
        assert!(matches!(project_embeddings(&rows(2), 0), Err(Error::Domain(_))));
    }

    #[test]
    fn plots_and_csv_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let r = rows(3);
        let p = project_embeddings(&r, 0).unwrap();
        plot_projection(&dir.path().join("t.svg"), &p, ColorBy::Time, true).unwrap();
        plot_curves(&dir.path().join("roc.svg"), "ROC", &[("a".into(), vec![(0.0, 0.0), (1.0, 1.0)])]).unwrap();
        let svg = std::fs::read_to_string(dir.path().join("t.svg")).unwrap();
        assert!(svg.contains("<svg"));
        let csv_path = dir.path().join("e.csv");
        write_embeddings_csv(&csv_path, &r).unwrap();
        assert_eq!(read_embeddings_csv(&csv_path).unwrap(), r);
    }

    #[test]
    fn gating_changes_feature_maps() {
        let cfg = BackboneConfig {
            stage_widths: vec![2, 2, 4, 4, 4, 2],
            image_size: (16, 16),
            scale_projection: 4,
            projector_hidden: 8,
            embed_dim: 6,
            ..BackboneConfig::reference()
        };
        let model = TrajectoryNet::new(cfg, 0, &Device::Cpu).unwrap();
        model.set_gate_bias(0.0).unwrap();
        let img = Array3::from_shape_fn((3, 16, 16), |(c, y, x)| ((c + y + 2 * x) % 7) as f32 / 7.0);
        assert_ne!(feature_maps(&model, &img, 0, true).unwrap(), feature_maps(&model, &img, 0, false).unwrap());
        let grid = feature_map_grid(&model, &img, 1, true, 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_grid_png(&dir.path().join("g.png"), &grid).unwrap();
    }
}
