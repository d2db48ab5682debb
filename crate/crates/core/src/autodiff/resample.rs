use super::Tensor;
use crate::error::{shape_err, Result};

/// Pixel-space affine map `(x, y) -> (a·x + b·y + c, d·x + e·y + f)` from an
/// output pixel to a source location.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine(pub [f64; 6]);

impl Affine {
    pub const IDENTITY: Affine = Affine([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
    }
}

/// A fixed bilinear sampling pattern from an `[n, c, h, w]` batch to a new
/// batch. Every output image reads from one source image; the same taps are
/// used for every channel. Out-of-range coordinates clamp to the border.
#[derive(Clone, Debug)]
pub struct ResamplePlan {
    in_shape: [usize; 4],
    out_hw: (usize, usize),
    src: Vec<usize>,
    taps: Vec<[(u32, f32); 4]>,
}

impl ResamplePlan {
    pub fn new(in_shape: [usize; 4], out_hw: (usize, usize), maps: &[(usize, Affine)]) -> Result<Self> {
        let [n, _, h, w] = in_shape;
        let (ho, wo) = out_hw;
        let mut src = Vec::with_capacity(maps.len());
        let mut taps = Vec::with_capacity(maps.len() * ho * wo);
        for &(s, aff) in maps {
            if s >= n {
                return Err(shape_err("ResamplePlan", format!("source image {s} >= batch {n}")));
            }
            src.push(s);
            for y in 0..ho {
                for x in 0..wo {
                    let (sx, sy) = aff.apply(x as f64, y as f64);
                    let sx = sx.clamp(0.0, (w - 1) as f64);
                    let sy = sy.clamp(0.0, (h - 1) as f64);
                    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                    let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
                    taps.push([
                        ((y0 * w + x0) as u32, (1.0 - fx) * (1.0 - fy)),
                        ((y0 * w + x1) as u32, fx * (1.0 - fy)),
                        ((y1 * w + x0) as u32, (1.0 - fx) * fy),
                        ((y1 * w + x1) as u32, fx * fy),
                    ]);
                }
            }
        }
        Ok(Self {
            in_shape,
            out_hw,
            src,
            taps,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.src.len(), self.in_shape[1], self.out_hw.0, self.out_hw.1]
    }

    pub fn sources(&self) -> &[usize] {
        &self.src
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.in_shape {
            return Err(shape_err(
                "resample",
                format!("plan built for {:?}, got {:?}", self.in_shape, x.shape()),
            ));
        }
        let [_, c, h, w] = self.in_shape;
        let (hw_in, hw_out) = (h * w, self.out_hw.0 * self.out_hw.1);
        let xd = x.data();
        let mut out = vec![0.0f32; self.src.len() * c * hw_out];
        for (m, &s) in self.src.iter().enumerate() {
            let taps = &self.taps[m * hw_out..(m + 1) * hw_out];
            for ch in 0..c {
                let plane = &xd[(s * c + ch) * hw_in..(s * c + ch + 1) * hw_in];
                let dst = &mut out[(m * c + ch) * hw_out..(m * c + ch + 1) * hw_out];
                for (o, t) in dst.iter_mut().zip(taps) {
                    *o = t.iter().map(|&(i, wt)| if wt == 0.0 { 0.0 } else { wt * plane[i as usize] }).sum();
                }
            }
        }
        Tensor::new(self.out_shape().to_vec(), out)
    }

    pub(crate) fn adjoint(&self, g: &[f32], in_len: usize) -> Vec<f32> {
        let [_, c, h, w] = self.in_shape;
        let (hw_in, hw_out) = (h * w, self.out_hw.0 * self.out_hw.1);
        let mut dx = vec![0.0f32; in_len];
        for (m, &s) in self.src.iter().enumerate() {
            let taps = &self.taps[m * hw_out..(m + 1) * hw_out];
            for ch in 0..c {
                let plane = &mut dx[(s * c + ch) * hw_in..(s * c + ch + 1) * hw_in];
                let gm = &g[(m * c + ch) * hw_out..(m * c + ch + 1) * hw_out];
                for (&gv, t) in gm.iter().zip(taps) {
                    for &(i, wt) in t {
                        plane[i as usize] += wt * gv;
                    }
                }
            }
        }
        dx
    }
}
