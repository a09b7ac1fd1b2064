//! Static PNG renders: bird's-eye views of points with ground-truth and
//! detected boxes, and precision-recall curves.

use std::path::Path;

use image::{Rgb, RgbImage};
use imageproc::drawing::draw_line_segment_mut;

use crate::config::PointRange;
use crate::error::{Error, Result};
use crate::eval::PrCurve;
use crate::model::{box_corners_bev, Box3D, Point};

const BACKGROUND: Rgb<u8> = Rgb([16, 16, 16]);
const POINT: Rgb<u8> = Rgb([150, 150, 150]);
const GT: Rgb<u8> = Rgb([60, 220, 60]);
const DET: Rgb<u8> = Rgb([230, 60, 60]);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevView {
    pub range: PointRange,
    /// Meters per pixel.
    pub resolution: f64,
}

impl Default for BevView {
    fn default() -> Self {
        Self {
            range: PointRange::default(),
            resolution: 0.1,
        }
    }
}

impl BevView {
    pub fn size(&self) -> (u32, u32) {
        let e = self.range.extent();
        (
            (e[0] / self.resolution).round().max(1.0) as u32,
            (e[1] / self.resolution).round().max(1.0) as u32,
        )
    }

    /// Pixel of a BEV position; +x points right and +y points up.
    pub fn to_pixel(&self, x: f64, y: f64) -> (f32, f32) {
        let (_, h) = self.size();
        let px = (x - self.range.min[0]) / self.resolution;
        let py = h as f64 - (y - self.range.min[1]) / self.resolution;
        (px as f32, py as f32)
    }
}

fn draw_box(img: &mut RgbImage, view: &BevView, b: &Box3D, color: Rgb<u8>) {
    let c = box_corners_bev(b).map(|[x, y]| view.to_pixel(x, y));
    for i in 0..4 {
        draw_line_segment_mut(img, c[i], c[(i + 1) % 4], color);
    }
    // heading tick from the center to the front edge
    let front = ((c[0].0 + c[3].0) / 2.0, (c[0].1 + c[3].1) / 2.0);
    draw_line_segment_mut(img, view.to_pixel(b.cx, b.cy), front, color);
}

/// Points in gray, ground truth in green, detections in red.
pub fn render_bev(points: &[Point], gts: &[Box3D], dets: &[Box3D], view: &BevView) -> RgbImage {
    let (w, h) = view.size();
    let mut img = RgbImage::from_pixel(w, h, BACKGROUND);
    for p in points {
        let (x, y) = view.to_pixel(p.x, p.y);
        if x >= 0.0 && y >= 0.0 && (x as u32) < w && (y as u32) < h {
            img.put_pixel(x as u32, y as u32, POINT);
        }
    }
    for b in gts {
        draw_box(&mut img, view, b, GT);
    }
    for b in dets {
        draw_box(&mut img, view, b, DET);
    }
    img
}

const CURVE_COLORS: [Rgb<u8>; 4] = [
    Rgb([230, 60, 60]),
    Rgb([240, 170, 40]),
    Rgb([60, 160, 230]),
    Rgb([60, 200, 90]),
];

/// Precision (vertical) against recall (horizontal), one polyline per curve.
pub fn render_pr_curves(curves: &[PrCurve], size: u32) -> RgbImage {
    let size = size.max(32);
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let margin = size as f32 * 0.08;
    let span = size as f32 - 2.0 * margin;
    let at = |r: f64, p: f64| (margin + r as f32 * span, size as f32 - margin - p as f32 * span);
    let axis = Rgb([0, 0, 0]);
    draw_line_segment_mut(&mut img, at(0.0, 0.0), at(1.0, 0.0), axis);
    draw_line_segment_mut(&mut img, at(0.0, 0.0), at(0.0, 1.0), axis);
    for (k, c) in curves.iter().enumerate() {
        let color = CURVE_COLORS[k % CURVE_COLORS.len()];
        for i in 1..c.recall.len() {
            draw_line_segment_mut(
                &mut img,
                at(c.recall[i - 1], c.precision[i - 1]),
                at(c.recall[i], c.precision[i]),
                color,
            );
        }
    }
    img
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other)),
    })
}
