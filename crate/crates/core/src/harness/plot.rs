//! PNG figures: metric bar charts and segmentation overlays.

use std::path::Path;

use image::{Rgb, RgbImage};

use super::summary::{MeanStd, Summary};
use crate::domain::{ClassId, CtSlice, LabelMap};
use crate::error::{Error, Result};
use crate::net::normalize_hu;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([20, 20, 20]);
const GRID: Rgb<u8> = Rgb([215, 215, 215]);
const MODE_COLORS: [Rgb<u8>; 5] = [
    Rgb([110, 110, 110]),
    Rgb([70, 130, 180]),
    Rgb([214, 96, 77]),
    Rgb([120, 170, 80]),
    Rgb([150, 100, 170]),
];

fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
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
        'A' => [0x0E, 0x11, 0x11, 0x11, 0x1F, 0x11, 0x11],
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
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        ',' => [0, 0, 0, 0, 0x0C, 0x04, 0x08],
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        '_' => [0, 0, 0, 0, 0, 0, 0x1F],
        ':' => [0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0],
        '=' => [0, 0, 0x1F, 0, 0x1F, 0, 0],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '/' => [0, 0x01, 0x02, 0x04, 0x08, 0x10, 0],
        '%' => [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03],
        '±' => [0x04, 0x04, 0x1F, 0x04, 0x04, 0, 0x1F],
        _ => [0; 7],
    }
}

pub fn text_width(text: &str, scale: u32) -> u32 {
    text.chars().count() as u32 * 6 * scale
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

pub fn fill_rect(img: &mut RgbImage, x: i64, y: i64, w: i64, h: i64, c: Rgb<u8>) {
    for yy in y..y + h {
        for xx in x..x + w {
            put(img, xx, yy, c);
        }
    }
}

/// Draws `text` with its top-left corner at (x, y).
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, c: Rgb<u8>, scale: u32) {
    let s = scale as i64;
    for (i, ch) in text.chars().enumerate() {
        let ox = x + i as i64 * 6 * s;
        for (row, bits) in glyph(ch).iter().enumerate() {
            for col in 0..5 {
                if bits & (0x10 >> col) != 0 {
                    fill_rect(img, ox + col * s, y + row as i64 * s, s, s, c);
                }
            }
        }
    }
}

fn draw_text_centered(img: &mut RgbImage, cx: i64, y: i64, text: &str, c: Rgb<u8>, scale: u32) {
    draw_text(img, cx - text_width(text, scale) as i64 / 2, y, text, c, scale);
}

/// Four panels (Dice1, Dice2, Success, ACC), one bar per mode with a
/// one-standard-deviation whisker.
pub fn bar_chart(summary: &Summary) -> RgbImage {
    let n = summary.modes.len().max(1) as i64;
    let bar_w = 26;
    let gap = 10;
    let plot_h = 200;
    let left = 34;
    let panel_w = left + n * (bar_w + gap) + gap;
    let top = 34;
    let legend_h = 18 * n + 10;
    let width = (4 * panel_w + 20) as u32;
    let height = (top + plot_h + 30 + legend_h) as u32;
    let mut img = RgbImage::from_pixel(width, height, WHITE);

    let metrics: [(&str, Box<dyn Fn(usize) -> Option<MeanStd>>); 4] = [
        ("DICE1", Box::new(|i| summary.modes[i].dice1)),
        ("DICE2", Box::new(|i| Some(summary.modes[i].dice2))),
        ("SUCCESS", Box::new(|i| Some(summary.modes[i].success))),
        ("ACC", Box::new(|i| Some(summary.modes[i].acc))),
    ];
    for (p, (title, get)) in metrics.iter().enumerate() {
        let x0 = 10 + p as i64 * panel_w;
        let base = top + plot_h;
        draw_text_centered(&mut img, x0 + panel_w / 2, 8, title, BLACK, 2);
        for tick in 0..=4 {
            let y = base - tick * plot_h / 4;
            fill_rect(&mut img, x0 + left - 3, y, panel_w - left, 1, GRID);
            draw_text(&mut img, x0, y - 3, &format!("{}", tick * 25), BLACK, 1);
        }
        fill_rect(&mut img, x0 + left - 3, top, 1, plot_h + 1, BLACK);
        for i in 0..summary.modes.len() {
            let bx = x0 + left + gap + i as i64 * (bar_w + gap);
            let color = MODE_COLORS[i % MODE_COLORS.len()];
            let Some(m) = get(i) else {
                draw_text_centered(&mut img, bx + bar_w / 2, base - 10, "NA", BLACK, 1);
                continue;
            };
            let to_y = |v: f64| base - (v.clamp(0.0, 1.0) * plot_h as f64).round() as i64;
            let y = to_y(m.mean);
            fill_rect(&mut img, bx, y, bar_w, base - y, color);
            let (lo, hi) = (to_y(m.mean - m.std), to_y(m.mean + m.std));
            fill_rect(&mut img, bx + bar_w / 2, hi, 1, lo - hi + 1, BLACK);
            fill_rect(&mut img, bx + bar_w / 2 - 4, hi, 9, 1, BLACK);
            fill_rect(&mut img, bx + bar_w / 2 - 4, lo, 9, 1, BLACK);
            let label = format!("{:.0}", m.mean * 100.0);
            draw_text_centered(&mut img, bx + bar_w / 2, hi - 10, &label, BLACK, 1);
        }
    }
    let ly = top + plot_h + 24;
    for (i, m) in summary.modes.iter().enumerate() {
        let y = ly + i as i64 * 18;
        fill_rect(&mut img, 20, y, 12, 12, MODE_COLORS[i % MODE_COLORS.len()]);
        let text = format!("{} (N={})", m.mode, m.seeds.len());
        draw_text(&mut img, 40, y + 2, &text, BLACK, 1);
    }
    img
}

pub fn class_color(class: ClassId) -> Option<Rgb<u8>> {
    match class {
        ClassId::Metastasis => Some(Rgb([230, 30, 30])),
        ClassId::Cyst => Some(Rgb([40, 200, 60])),
        ClassId::Hemangioma => Some(Rgb([240, 220, 30])),
        ClassId::Liver | ClassId::LiverBoundary => Some(Rgb([90, 140, 230])),
        ClassId::Background => None,
    }
}

fn gray(hu: f32) -> u8 {
    (normalize_hu::<f32>(hu) * 255.0).round() as u8
}

/// CT slice in grayscale, magnified `zoom` times, with `labels` blended on
/// top. Lesions are opaque-ish, liver a faint tint.
pub fn overlay(slice: &CtSlice, labels: Option<&LabelMap>, zoom: u32) -> Result<RgbImage> {
    let (h, w) = slice.dim();
    if let Some(l) = labels {
        if l.dim() != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                actual: vec![l.dim().0, l.dim().1],
            });
        }
    }
    let zoom = zoom.max(1);
    let mut img = RgbImage::new(w as u32 * zoom, h as u32 * zoom);
    for ((r, c), &hu) in slice.pixels().indexed_iter() {
        let g = gray(hu) as f32;
        let mut px = [g; 3];
        if let Some(l) = labels {
            let class = l.get(r, c);
            if let Some(Rgb(col)) = class_color(class) {
                let alpha = if class.is_lesion() { 0.6 } else { 0.18 };
                for k in 0..3 {
                    px[k] = (1.0 - alpha) * px[k] + alpha * col[k] as f32;
                }
            }
        }
        let px = Rgb(px.map(|v| v.round().clamp(0.0, 255.0) as u8));
        for dy in 0..zoom {
            for dx in 0..zoom {
                img.put_pixel(c as u32 * zoom + dx, r as u32 * zoom + dy, px);
            }
        }
    }
    Ok(img)
}

/// One row of an overlay panel.
#[derive(Debug, Clone)]
pub struct PanelRow<'a> {
    pub slice: &'a CtSlice,
    pub ground_truth: &'a LabelMap,
    pub prediction: &'a LabelMap,
    pub caption: String,
}

/// Grid with columns CT, ground truth and prediction.
pub fn overlay_panel(rows: &[PanelRow<'_>], zoom: u32) -> Result<RgbImage> {
    let first = rows
        .first()
        .ok_or_else(|| Error::InvalidValue("overlay panel needs at least one row".into()))?;
    let (h, w) = first.slice.dim();
    let (tw, th) = (w as i64 * zoom as i64, h as i64 * zoom as i64);
    let pad = 6;
    let header = 16;
    let caption = 12;
    let row_h = caption + th + pad;
    let width = 3 * (tw + pad) + pad;
    let height = header + rows.len() as i64 * row_h + pad;
    let mut img = RgbImage::from_pixel(width as u32, height as u32, WHITE);
    for (i, title) in ["CT", "GROUND TRUTH", "PREDICTION"].iter().enumerate() {
        draw_text_centered(&mut img, pad + i as i64 * (tw + pad) + tw / 2, 5, title, BLACK, 1);
    }
    for (r, row) in rows.iter().enumerate() {
        if row.slice.dim() != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                actual: vec![row.slice.dim().0, row.slice.dim().1],
            });
        }
        let y = header + r as i64 * row_h;
        draw_text(&mut img, pad, y + 2, &row.caption, BLACK, 1);
        let tiles = [
            overlay(row.slice, None, zoom)?,
            overlay(row.slice, Some(row.ground_truth), zoom)?,
            overlay(row.slice, Some(row.prediction), zoom)?,
        ];
        for (i, tile) in tiles.iter().enumerate() {
            image::imageops::replace(&mut img, tile, pad + i as i64 * (tw + pad), y + caption);
        }
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(Error::from)
}
