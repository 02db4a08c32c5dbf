//! Optional random similarity transform (shift, scale, rotation) applied
//! jointly to an image and its landmarks.

use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    /// Radians, counter-clockwise in image coordinates.
    pub angle: f64,
    /// Pixels `(dx, dy)`.
    pub shift: [f64; 2],
}

impl Similarity {
    pub const IDENTITY: Self = Self {
        scale: 1.0,
        angle: 0.0,
        shift: [0.0, 0.0],
    };

    /// Shift up to ±5 % of the size, scale ±5 %, rotation ±5°.
    pub fn random(rng: &mut impl Rng, size: [usize; 2]) -> Self {
        let max_angle = 5f64.to_radians();
        Self {
            scale: rng.gen_range(0.95..=1.05),
            angle: rng.gen_range(-max_angle..=max_angle),
            shift: [
                rng.gen_range(-0.05..=0.05) * size[1] as f64,
                rng.gen_range(-0.05..=0.05) * size[0] as f64,
            ],
        }
    }

    fn center(size: [usize; 2]) -> [f64; 2] {
        [(size[1] as f64 - 1.0) / 2.0, (size[0] as f64 - 1.0) / 2.0]
    }

    /// Forward map of a point.
    pub fn apply(&self, p: [f64; 2], size: [usize; 2]) -> [f64; 2] {
        let c = Self::center(size);
        let (s, co, si) = (self.scale, self.angle.cos(), self.angle.sin());
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        [
            s * (co * dx - si * dy) + c[0] + self.shift[0],
            s * (si * dx + co * dy) + c[1] + self.shift[1],
        ]
    }

    fn invert(&self, q: [f64; 2], size: [usize; 2]) -> [f64; 2] {
        let c = Self::center(size);
        let (dx, dy) = (q[0] - c[0] - self.shift[0], q[1] - c[1] - self.shift[1]);
        let (co, si) = (self.angle.cos(), self.angle.sin());
        [
            (co * dx + si * dy) / self.scale + c[0],
            (-si * dx + co * dy) / self.scale + c[1],
        ]
    }

    /// Resample a row-major `h × w` plane; outside samples read as zero.
    pub fn warp(&self, plane: &[f32], size: [usize; 2]) -> Vec<f32> {
        let [h, w] = size;
        let at = |x: isize, y: isize| -> f64 {
            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                0.0
            } else {
                plane[y as usize * w + x as usize] as f64
            }
        };
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let [sx, sy] = self.invert([x as f64, y as f64], size);
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let v = (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x0 + 1, y0))
                    + fy * ((1.0 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1));
                out.push(v as f32);
            }
        }
        out
    }
}
