//! Heatmap, node and word-importance renderings for one sample.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::Serialize;
use sog_core::head::{decode_boxes, select_prediction, BBox};
use sog_core::sog::SogDiagnostics;
use sog_core::training::{eval_forward, Sample};
use sog_core::Grounder;

use crate::error::CliError;

const PANEL_HEIGHT: u32 = 60;
const BAR_WIDTH: u32 = 24;

#[derive(Debug, Serialize)]
struct Diagnostics {
    index: usize,
    expression: String,
    gt: BBox,
    pred: BBox,
    confidence: f64,
    activation_grid: (usize, usize),
    /// Mean activation map on the middle pyramid level, row-major.
    activation: Vec<f64>,
    graph: Option<SogDiagnostics>,
}

/// Black to red to yellow.
fn heat(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (v * 2.0).min(1.0);
    let g = (v * 2.0 - 1.0).max(0.0);
    [(r * 255.0) as u8, (g * 255.0) as u8, 0]
}

fn outline(img: &mut RgbImage, b: &BBox, color: [u8; 3], thickness: i64) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x0, y0) = (b.x_min.round() as i64, b.y_min.round() as i64);
    let (x1, y1) = (b.x_max.round() as i64 - 1, b.y_max.round() as i64 - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let edge = x - x0 < thickness || x1 - x < thickness || y - y0 < thickness || y1 - y < thickness;
            if edge && (0..w).contains(&x) && (0..h).contains(&y) {
                img.put_pixel(x as u32, y as u32, Rgb(color));
            }
        }
    }
}

/// Writes `heatmap.png`, `overlay.png`, `words.png` and `diagnostics.json`.
pub fn render_all(model: &Grounder<f32>, sample: &Sample, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    let (g, fwd) = eval_forward(model, &sample.tensor(), &sample.tokens)?;
    let preds = fwd.preds.map(|p| g.value(p).clone());
    let det = select_prediction(&decode_boxes(&preds, &model.anchors)?)?;

    let act = g.value(fwd.state.mean_activation);
    let (gh, gw) = (act.shape()[1], act.shape()[2]);
    let values: Vec<f64> = act.data().iter().map(|&v| v as f64).collect();
    let max = values.iter().cloned().fold(0.0, f64::max);
    let (iw, ih) = (sample.image.width(), sample.image.height());
    let cell = |x: u32, y: u32| {
        let i = (y as usize * gh / ih as usize).min(gh - 1);
        let j = (x as usize * gw / iw as usize).min(gw - 1);
        if max > 0.0 {
            values[i * gw + j] / max
        } else {
            0.0
        }
    };
    let heatmap = RgbImage::from_fn(iw, ih, |x, y| Rgb(heat(cell(x, y))));
    heatmap.save(out.join("heatmap.png"))?;

    let mut overlay = RgbImage::from_fn(iw, ih, |x, y| {
        let a = sample.image.get_pixel(x, y).0;
        let b = heatmap.get_pixel(x, y).0;
        Rgb([0, 1, 2].map(|c| ((a[c] as u16 + b[c] as u16) / 2) as u8))
    });
    let diag = model.diagnostics(&g, &fwd);
    if let Some(d) = &diag {
        let (sy, sx) = (ih as f64 / d.grid.0 as f64, iw as f64 / d.grid.1 as f64);
        for &(i, j) in &d.cells {
            let b = BBox { x_min: j as f64 * sx, y_min: i as f64 * sy, x_max: (j + 1) as f64 * sx, y_max: (i + 1) as f64 * sy };
            outline(&mut overlay, &b, [255, 255, 255], 1);
        }
    }
    outline(&mut overlay, &sample.gt, [40, 80, 255], 2);
    outline(&mut overlay, &det.bbox, [0, 230, 0], 1);
    overlay.save(out.join("overlay.png"))?;

    if let Some(d) = &diag {
        let n = d.delta.first().map_or(1, Vec::len) as u32;
        let panels = d.delta.len().max(1) as u32;
        let mut words = RgbImage::from_pixel(n * BAR_WIDTH, panels * PANEL_HEIGHT, Rgb([255, 255, 255]));
        for (p, row) in d.delta.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                let hgt = (v.clamp(0.0, 1.0) * (PANEL_HEIGHT - 4) as f64).round() as u32;
                let base = (p as u32 + 1) * PANEL_HEIGHT - 1;
                for y in (base - hgt)..base {
                    for x in (k as u32 * BAR_WIDTH + 2)..((k as u32 + 1) * BAR_WIDTH - 2) {
                        words.put_pixel(x, y, Rgb([60, 90, 200]));
                    }
                }
            }
            for x in 0..words.width() {
                words.put_pixel(x, (p as u32 + 1) * PANEL_HEIGHT - 1, Rgb([0, 0, 0]));
            }
        }
        words.save(out.join("words.png"))?;
    }

    let record = Diagnostics {
        index: sample.index,
        expression: sample.expression.clone(),
        gt: sample.gt,
        pred: det.bbox,
        confidence: det.confidence,
        activation_grid: (gh, gw),
        activation: values,
        graph: diag,
    };
    fs::write(out.join("diagnostics.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}
