//! Deterministic rasterisation of spline strokes onto the 28x28 canvas.
//!
//! Strokes are evaluated densely and each polyline segment is drawn as an
//! anti-aliased line one canvas pixel wide. Pixel coverage is approximated
//! from the distance between the pixel centre and the segment, and strokes
//! are composited by per-pixel maximum.

use serde::{Deserialize, Serialize};

use crate::splines::{eval_spline, Point, SplineStroke};

pub const CANVAS_SIZE: usize = 28;
/// Side length of the source coordinate frame strokes are recorded in.
pub const SOURCE_FRAME: f64 = 105.0;
pub const SAMPLES_PER_SEGMENT: usize = 20;
/// Source coordinates are clipped to the frame plus a 25% margin.
pub const CLIP_MIN: f64 = -0.25 * SOURCE_FRAME;
pub const CLIP_MAX: f64 = 1.25 * SOURCE_FRAME;

const LINE_HALF_WIDTH: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    pixels: Vec<f64>,
}

impl Default for Canvas {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderStats {
    /// Trajectory points that fell outside the clip box.
    pub clipped_points: usize,
}

impl Canvas {
    pub fn new() -> Self {
        Canvas {
            pixels: vec![0.0; CANVAS_SIZE * CANVAS_SIZE],
        }
    }

    pub fn from_pixels(pixels: Vec<f64>) -> Option<Self> {
        (pixels.len() == CANVAS_SIZE * CANVAS_SIZE).then_some(Canvas { pixels })
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * CANVAS_SIZE + col]
    }

    pub fn ink(&self) -> f64 {
        self.pixels.iter().sum()
    }

    /// Draws one spline stroke in place.
    pub fn draw_stroke(&mut self, stroke: &SplineStroke) -> RenderStats {
        let scale = CANVAS_SIZE as f64 / SOURCE_FRAME;
        let mut stats = RenderStats::default();
        let traj: Vec<Point> = eval_spline(stroke, SAMPLES_PER_SEGMENT)
            .into_iter()
            .map(|p| {
                let clipped = [p[0].clamp(CLIP_MIN, CLIP_MAX), p[1].clamp(CLIP_MIN, CLIP_MAX)];
                if clipped != p {
                    stats.clipped_points += 1;
                }
                [clipped[0] * scale, clipped[1] * scale]
            })
            .collect();
        if traj.len() == 1 {
            self.draw_segment(traj[0], traj[0]);
        }
        for w in traj.windows(2) {
            self.draw_segment(w[0], w[1]);
        }
        stats
    }

    /// Anti-aliased segment in canvas pixel coordinates (x = column, y = row).
    fn draw_segment(&mut self, a: Point, b: Point) {
        let reach = LINE_HALF_WIDTH + 0.5;
        let x0 = (a[0].min(b[0]) - reach).floor().max(0.0) as usize;
        let y0 = (a[1].min(b[1]) - reach).floor().max(0.0) as usize;
        let x1 = ((a[0].max(b[0]) + reach).ceil().max(0.0) as usize).min(CANVAS_SIZE);
        let y1 = ((a[1].max(b[1]) + reach).ceil().max(0.0) as usize).min(CANVAS_SIZE);
        for row in y0..y1 {
            for col in x0..x1 {
                let c = [col as f64 + 0.5, row as f64 + 0.5];
                let d = point_segment_distance(c, a, b);
                let coverage = (LINE_HALF_WIDTH + 0.5 - d).clamp(0.0, 1.0);
                let px = &mut self.pixels[row * CANVAS_SIZE + col];
                if coverage > *px {
                    *px = coverage;
                }
            }
        }
    }

    /// Binary PGM (P5, maxval 255) with each pixel mapped to `round(p * 255)`.
    pub fn to_pgm(&self) -> Vec<u8> {
        tile_pgm(std::slice::from_ref(self), 1, 0)
    }
}

pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt()
}

/// Returns a new canvas with `stroke` drawn on top of `canvas`.
pub fn render_stroke(canvas: &Canvas, stroke: &SplineStroke) -> Canvas {
    let mut out = canvas.clone();
    out.draw_stroke(stroke);
    out
}

/// Renders a whole drawing onto a fresh canvas.
pub fn render_drawing(strokes: &[SplineStroke]) -> Canvas {
    let mut c = Canvas::new();
    for s in strokes {
        c.draw_stroke(s);
    }
    c
}

/// Canvases after each prefix of the drawing: `[I_0, I_1, ..., I_n]` where
/// `I_0` is blank and `I_t` holds the first `t` strokes.
pub fn render_prefixes(strokes: &[SplineStroke]) -> Vec<Canvas> {
    let mut out = Vec::with_capacity(strokes.len() + 1);
    let mut c = Canvas::new();
    out.push(c.clone());
    for s in strokes {
        c.draw_stroke(s);
        out.push(c.clone());
    }
    out
}

fn to_byte(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tiles canvases row-major into one PGM image with `gap` blank pixels
/// between tiles.
pub fn tile_pgm(canvases: &[Canvas], cols: usize, gap: usize) -> Vec<u8> {
    let cols = cols.max(1);
    let rows = canvases.len().div_ceil(cols).max(1);
    let width = cols * CANVAS_SIZE + (cols - 1) * gap;
    let height = rows * CANVAS_SIZE + (rows - 1) * gap;
    let mut img = vec![0u8; width * height];
    for (idx, c) in canvases.iter().enumerate() {
        let (tr, tc) = (idx / cols, idx % cols);
        let (oy, ox) = (tr * (CANVAS_SIZE + gap), tc * (CANVAS_SIZE + gap));
        for r in 0..CANVAS_SIZE {
            for col in 0..CANVAS_SIZE {
                img[(oy + r) * width + ox + col] = to_byte(c.get(r, col));
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(img);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at_canvas(x: f64, y: f64) -> Point {
        let s = SOURCE_FRAME / CANVAS_SIZE as f64;
        [x * s, y * s]
    }

    #[test]
    fn blank_stroke_list_gives_zero_canvas() {
        assert_eq!(render_drawing(&[]), Canvas::new());
    }

    #[test]
    fn zero_length_stroke_inks_one_pixel() {
        let s = SplineStroke {
            start: at_canvas(14.5, 14.5),
            offsets: vec![[0.0, 0.0]; 3],
        };
        let c = render_stroke(&Canvas::new(), &s);
        assert!((c.get(14, 14) - 1.0).abs() < 1e-12);
        let others: f64 = c.ink() - c.get(14, 14);
        assert!(others.abs() < 1e-12);
    }

    #[test]
    fn rendering_is_idempotent() {
        let s = SplineStroke::from_control_points(&[[10.0, 20.0], [40.0, 80.0], [70.0, 30.0], [95.0, 90.0]]);
        let once = render_stroke(&Canvas::new(), &s);
        let twice = render_stroke(&once, &s);
        assert_eq!(once, twice);
    }

    #[test]
    fn clipping_is_counted() {
        let s = SplineStroke::from_control_points(&[[-100.0, 50.0], [0.0, 50.0], [50.0, 50.0], [200.0, 50.0]]);
        let mut c = Canvas::new();
        let stats = c.draw_stroke(&s);
        assert!(stats.clipped_points > 0);
        assert!(c.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn pgm_header_and_mapping() {
        let mut px = vec![0.0; CANVAS_SIZE * CANVAS_SIZE];
        px[0] = 1.0;
        px[1] = 0.5;
        let bytes = Canvas::from_pixels(px).unwrap().to_pgm();
        let header = b"P5\n28 28\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes[header.len()], 255);
        assert_eq!(bytes[header.len() + 1], 128);
        assert_eq!(bytes.len(), header.len() + 784);
    }
}
