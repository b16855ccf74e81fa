//! Box-plot data and overlay panels.

use std::path::Path;

use image::{GrayImage, Luma};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::DiceScores;
use crate::model::{ClassPalette, LabelMap, Tissue};

/// Quantile with linear interpolation between order statistics
/// (`h = (n - 1) p`). `sorted` must be ascending and non-empty.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl FiveNumber {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("no values to summarize".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: vec![i] });
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Ok(FiveNumber {
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSeries {
    pub class: String,
    pub summary: FiveNumber,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPlotData {
    pub series: Vec<BoxSeries>,
}

/// One box per evaluated tissue over the given runs.
pub fn boxplot_data(scores: &[DiceScores]) -> Result<BoxPlotData> {
    let series = Tissue::EVALUATED
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let values: Vec<f64> = scores.iter().map(|s| s.values()[k]).collect();
            Ok(BoxSeries {
                class: t.name().to_string(),
                summary: FiveNumber::of(&values)?,
                values,
            })
        })
        .collect::<Result<_>>()?;
    Ok(BoxPlotData { series })
}

/// Writes box-plot data as JSON.
pub fn emit_boxplot(scores: &[DiceScores], path: &Path) -> Result<BoxPlotData> {
    let data = boxplot_data(scores)?;
    let text = serde_json::to_string_pretty(&data).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(data)
}

const GLYPH_W: u32 = 5;
const GLYPH_H: u32 = 7;
const CAPTION_H: u32 = GLYPH_H + 4;
const GAP: u32 = 4;
const SEPARATOR: u8 = 64;
const INK: u8 = 255;

fn glyph(ch: char) -> [u8; 7] {
    match ch.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        _ => [0; 7],
    }
}

/// Draws `text` left-aligned at `(x, y)`, clipped to `max_width`.
fn draw_text(img: &mut GrayImage, x: u32, y: u32, max_width: u32, text: &str) {
    for (i, ch) in text.chars().enumerate() {
        let x0 = x + i as u32 * (GLYPH_W + 1);
        if x0 + GLYPH_W > x + max_width {
            break;
        }
        for (row, bits) in glyph(ch).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                    img.put_pixel(x0 + col, y + row as u32, Luma([INK]));
                }
            }
        }
    }
}

pub const DEFAULT_CAPTIONS: [&str; 4] = ["(a) Input", "(b) Ground truth", "(c) Three channels", "(d) Retrieved prior"];

/// Pixel rectangle `(x, y, width, height)` of each image panel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OverlayLayout {
    pub panels: [(u32, u32, u32, u32); 4],
    pub width: u32,
    pub height: u32,
}

fn layout(rows: usize, cols: usize) -> OverlayLayout {
    let (w, h) = (cols as u32, rows as u32);
    let panels = [0, 1, 2, 3].map(|i| (i * (w + GAP), CAPTION_H, w, h));
    OverlayLayout {
        panels,
        width: 4 * w + 3 * GAP,
        height: CAPTION_H + h,
    }
}

/// Input slice, truth and two predictions side by side, captioned, with
/// labels drawn in `palette` grays.
pub fn render_overlay(
    input: ArrayView2<'_, f64>,
    truth: &LabelMap,
    pred_three: &LabelMap,
    pred_four: &LabelMap,
    captions: &[&str; 4],
    palette: &ClassPalette,
) -> Result<(GrayImage, OverlayLayout)> {
    let (rows, cols) = input.dim();
    for (what, m) in [("truth", truth), ("three-channel prediction", pred_three), ("four-channel prediction", pred_four)] {
        if m.dim() != (rows, cols) {
            return Err(Error::shape(format!("overlay input vs {what}"), input.shape(), m.classes().shape()));
        }
    }
    let lay = layout(rows, cols);
    let mut img = GrayImage::new(lay.width, lay.height);
    for i in 0..3 {
        let x0 = lay.panels[i].0 + lay.panels[i].2;
        for x in x0..x0 + GAP {
            for y in 0..lay.height {
                img.put_pixel(x, y, Luma([SEPARATOR]));
            }
        }
    }
    let (lo, hi) = input.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    for (k, &(x0, y0, _, _)) in lay.panels.iter().enumerate() {
        for r in 0..rows {
            for c in 0..cols {
                let g = match k {
                    0 => (((input[[r, c]] - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8,
                    1 => palette.gray(truth.get(r, c)),
                    2 => palette.gray(pred_three.get(r, c)),
                    _ => palette.gray(pred_four.get(r, c)),
                };
                img.put_pixel(x0 + c as u32, y0 + r as u32, Luma([g]));
            }
        }
        draw_text(&mut img, x0 + 1, 2, cols as u32 - 1, captions[k]);
    }
    Ok((img, lay))
}

/// Renders the overlay panel and saves it as PNG.
pub fn emit_overlay(
    input: ArrayView2<'_, f64>,
    truth: &LabelMap,
    pred_three: &LabelMap,
    pred_four: &LabelMap,
    path: &Path,
) -> Result<OverlayLayout> {
    let (img, lay) = render_overlay(input, truth, pred_three, pred_four, &DEFAULT_CAPTIONS, &ClassPalette::default())?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(lay)
}
