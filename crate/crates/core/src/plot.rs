//! Minimal raster charts: line plots of loss series, matrix heatmaps and bar
//! charts. No text rendering; axes and gridlines only.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const BLUE: [u8; 3] = [31, 119, 180];
pub const ORANGE: [u8; 3] = [255, 127, 14];
pub const GREEN: [u8; 3] = [44, 160, 44];

const MARGIN: u32 = 24;
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

fn frame(width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let (left, right, top, bottom) = (MARGIN as f64, (width - MARGIN) as f64, MARGIN as f64, (height - MARGIN) as f64);
    for g in 1..5 {
        let y = top + (bottom - top) * g as f64 / 5.0;
        line(&mut img, (left, y), (right, y), GRID);
    }
    line(&mut img, (left, bottom), (right, bottom), AXIS);
    line(&mut img, (left, top), (left, bottom), AXIS);
    img
}

/// Overlays each series on a shared y range; x spans the longest series.
pub fn line_plot(series: &[(&[f64], [u8; 3])], path: &Path, width: u32, height: u32) -> Result<()> {
    let mut img = frame(width, height);
    let finite = series.iter().flat_map(|(s, _)| s.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let longest = series.iter().map(|(s, _)| s.len()).max().unwrap_or(0);
    if longest > 0 && lo.is_finite() {
        let span = if hi > lo { hi - lo } else { 1.0 };
        let plot_w = (width - 2 * MARGIN) as f64;
        let plot_h = (height - 2 * MARGIN) as f64;
        let px = |i: usize| MARGIN as f64 + plot_w * i as f64 / (longest.max(2) - 1) as f64;
        let py = |v: f64| MARGIN as f64 + plot_h * (1.0 - (v - lo) / span);
        for (s, color) in series {
            let color = Rgb(*color);
            for i in 1..s.len() {
                if s[i - 1].is_finite() && s[i].is_finite() {
                    line(&mut img, (px(i - 1), py(s[i - 1])), (px(i), py(s[i])), color);
                }
            }
        }
    }
    save(&img, path)
}

/// Row-normalised heatmap (white = 0, dark blue = whole row) of a count matrix.
pub fn heatmap(counts: &[Vec<u64>], path: &Path, cell: u32) -> Result<()> {
    let rows = counts.len() as u32;
    let cols = counts.iter().map(|r| r.len()).max().unwrap_or(0) as u32;
    let mut img = RgbImage::from_pixel(cols.max(1) * cell + 1, rows.max(1) * cell + 1, Rgb([200, 200, 200]));
    for (r, row) in counts.iter().enumerate() {
        let total: u64 = row.iter().sum();
        for (c, &v) in row.iter().enumerate() {
            let t = if total == 0 { 0.0 } else { v as f64 / total as f64 };
            let shade = |full: u8| (255.0 - t * (255.0 - full as f64)).round() as u8;
            let color = Rgb([shade(8), shade(48), shade(107)]);
            for y in 1..cell {
                for x in 1..cell {
                    img.put_pixel(c as u32 * cell + x, r as u32 * cell + y, color);
                }
            }
        }
    }
    save(&img, path)
}

/// Vertical bars of values in `[0, max]`, grouped in clusters of `group` bars.
pub fn bar_chart(values: &[f64], group: usize, max: f64, path: &Path, height: u32) -> Result<()> {
    let colors = [BLUE, ORANGE, GREEN];
    let group = group.max(1);
    let bar = 12u32;
    let clusters = values.len().div_ceil(group) as u32;
    let width = 2 * MARGIN + clusters * (group as u32 * bar + bar);
    let mut img = frame(width.max(2 * MARGIN + 1), height);
    let plot_h = (height - 2 * MARGIN) as f64;
    for (i, &v) in values.iter().enumerate() {
        let cluster = (i / group) as u32;
        let x0 = MARGIN + bar / 2 + cluster * (group as u32 * bar + bar) + (i % group) as u32 * bar;
        let h = (plot_h * (v / max).clamp(0.0, 1.0)).round() as u32;
        let color = Rgb(colors[i % group % colors.len()]);
        for x in x0..x0 + bar - 2 {
            for y in (height - MARGIN - h)..(height - MARGIN) {
                img.put_pixel(x, y, color);
            }
        }
    }
    save(&img, path)
}
