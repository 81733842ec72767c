//! Static line charts of sweep results (mean R@1 against token length).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{ClipsError, Result};
use crate::eval::SweepRow;

pub const WIDTH: u32 = 480;
pub const HEIGHT: u32 = 320;
const MARGIN: i64 = 32;

/// `(length, mean over successful seeds)` per strategy, lengths ascending.
pub fn series(rows: &[SweepRow]) -> BTreeMap<String, Vec<(usize, f64)>> {
    let mut acc: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| !r.failed()) {
        let e = acc.entry(r.strategy.clone()).or_default().entry(r.length).or_insert((0.0, 0));
        e.0 += r.mean_r1;
        e.1 += 1;
    }
    acc.into_iter().map(|(s, m)| (s, m.into_iter().map(|(l, (sum, n))| (l, sum / n as f64)).collect())).collect()
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, c);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Renders one series. The y axis spans 0 to the next multiple of 10 above the maximum,
/// with a light grid line every 10 points.
pub fn render_chart(points: &[(usize, f64)]) -> Result<RgbImage> {
    if points.is_empty() {
        return Err(ClipsError::invalid("nothing to plot"));
    }
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (w, h) = (WIDTH as i64, HEIGHT as i64);
    let (left, right, top, bottom) = (MARGIN, w - MARGIN / 2, MARGIN / 2, h - MARGIN);
    let ymax = ((points.iter().map(|p| p.1).fold(0.0, f64::max) / 10.0).floor() + 1.0) * 10.0;
    let (xmin, xmax) = (points[0].0 as f64, points[points.len() - 1].0 as f64);
    let px = |l: usize| -> i64 {
        if xmax > xmin {
            left + ((l as f64 - xmin) / (xmax - xmin) * (right - left) as f64).round() as i64
        } else {
            (left + right) / 2
        }
    };
    let py = |v: f64| -> i64 { bottom - (v / ymax * (bottom - top) as f64).round() as i64 };
    let mut g = 0.0;
    while g <= ymax {
        line(&mut img, (left, py(g)), (right, py(g)), Rgb([225, 225, 225]));
        g += 10.0;
    }
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (left, top), (left, bottom), axis);
    line(&mut img, (left, bottom), (right, bottom), axis);
    for &(l, _) in points {
        line(&mut img, (px(l), bottom), (px(l), bottom + 4), axis);
    }
    let ink = Rgb([31, 90, 180]);
    for pair in points.windows(2) {
        line(&mut img, (px(pair[0].0), py(pair[0].1)), (px(pair[1].0), py(pair[1].1)), ink);
    }
    for &(l, v) in points {
        let (cx, cy) = (px(l), py(v));
        for dy in -2..=2 {
            for dx in -2..=2 {
                put(&mut img, cx + dx, cy + dy, ink);
            }
        }
    }
    Ok(img)
}

/// Writes `<strategy>.png` into `dir` for each strategy with at least one successful cell.
pub fn plot_sweep(rows: &[SweepRow], dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(ClipsError::invalid("sweep table has no rows"));
    }
    let all = series(rows);
    if all.is_empty() {
        return Err(ClipsError::invalid("every sweep cell failed; nothing to plot"));
    }
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for (strategy, pts) in all {
        let path = dir.join(format!("{strategy}.png"));
        render_chart(&pts)?.save(&path)?;
        out.push(path);
    }
    Ok(out)
}
