//! Minimal rasterizer: filled disks, capsules and rectangles written into an
//! RGB image plus parallel class and owner maps. Pixel centers sit at
//! `(x + 0.5, y + 0.5)`.

use image::{GrayImage, Luma, Rgb, RgbImage};

pub struct Canvas {
    pub rgb: RgbImage,
    pub class: GrayImage,
    /// 0 for background, `figure index + 1` otherwise.
    pub owner: GrayImage,
}

impl Canvas {
    pub fn new(width: u32, height: u32, background: [u8; 3]) -> Self {
        Canvas {
            rgb: RgbImage::from_pixel(width, height, Rgb(background)),
            class: GrayImage::new(width, height),
            owner: GrayImage::new(width, height),
        }
    }

    fn fill<F: Fn(f64, f64) -> bool>(
        &mut self,
        bounds: [f64; 4],
        inside: F,
        color: [u8; 3],
        class: u8,
        owner: u8,
    ) {
        let (w, h) = self.rgb.dimensions();
        let x0 = bounds[0].floor().max(0.0) as u32;
        let y0 = bounds[1].floor().max(0.0) as u32;
        let x1 = (bounds[2].ceil().max(0.0) as u32).min(w);
        let y1 = (bounds[3].ceil().max(0.0) as u32).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    self.rgb.put_pixel(x, y, Rgb(color));
                    self.class.put_pixel(x, y, Luma([class]));
                    self.owner.put_pixel(x, y, Luma([owner]));
                }
            }
        }
    }

    pub fn disk(&mut self, c: [f64; 2], r: f64, color: [u8; 3], class: u8, owner: u8) {
        let b = [c[0] - r, c[1] - r, c[0] + r, c[1] + r];
        self.fill(
            b,
            |x, y| (x - c[0]).powi(2) + (y - c[1]).powi(2) <= r * r,
            color,
            class,
            owner,
        );
    }

    /// Points within `r` of the segment `a`–`b`.
    pub fn capsule(&mut self, a: [f64; 2], b: [f64; 2], r: f64, color: [u8; 3], class: u8, owner: u8) {
        let bounds = [
            a[0].min(b[0]) - r,
            a[1].min(b[1]) - r,
            a[0].max(b[0]) + r,
            a[1].max(b[1]) + r,
        ];
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len2 = dx * dx + dy * dy;
        self.fill(
            bounds,
            |x, y| {
                let t = if len2 > 0.0 {
                    (((x - a[0]) * dx + (y - a[1]) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (px, py) = (a[0] + t * dx, a[1] + t * dy);
                (x - px).powi(2) + (y - py).powi(2) <= r * r
            },
            color,
            class,
            owner,
        );
    }

    pub fn rect(&mut self, b: [f64; 4], color: [u8; 3], class: u8, owner: u8) {
        self.fill(
            b,
            |x, y| x >= b[0] && x <= b[2] && y >= b[1] && y <= b[3],
            color,
            class,
            owner,
        );
    }
}
