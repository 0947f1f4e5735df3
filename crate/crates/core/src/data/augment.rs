//! Training-time image augmentation: horizontal flip, small rotation,
//! translation, scaling and contrast jitter. Labels and shape never change.

use rand::Rng;

use super::Sample;

/// One concrete set of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    /// Degrees, counter-clockwise.
    pub rotate_deg: f32,
    /// Fraction of width/height; positive moves content right/down.
    pub translate: (f32, f32),
    pub scale: f32,
    pub contrast: f32,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        flip: false,
        rotate_deg: 0.0,
        translate: (0.0, 0.0),
        scale: 1.0,
        contrast: 1.0,
    };

    /// Draw parameters in a fixed order so a given rng state always yields
    /// the same transform.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentDraw {
            flip: rng.random_bool(0.5),
            rotate_deg: rng.random_range(-15.0f32..=15.0),
            translate: (
                rng.random_range(-0.1f32..=0.1),
                rng.random_range(-0.1f32..=0.1),
            ),
            scale: rng.random_range(0.9f32..=1.1),
            contrast: rng.random_range(0.7f32..=1.3),
        }
    }

    fn needs_resample(&self) -> bool {
        self.rotate_deg != 0.0 || self.translate != (0.0, 0.0) || self.scale != 1.0
    }
}

/// Apply a random augmentation drawn from `rng`.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Sample {
    apply(sample, &AugmentDraw::sample(rng))
}

/// Apply a specific transform. The identity draw returns the pixels
/// bit-exactly; the flip is an exact column mirror (its own inverse); the
/// affine part uses bilinear interpolation with zero padding outside.
pub fn apply(sample: &Sample, draw: &AugmentDraw) -> Sample {
    let (h, w) = (sample.height, sample.width);
    let mut out = sample.clone();

    if draw.flip {
        for y in 0..h {
            for x in 0..w / 2 {
                let a = (y * w + x) * 3;
                let b = (y * w + (w - 1 - x)) * 3;
                for c in 0..3 {
                    out.image.swap(a + c, b + c);
                }
            }
        }
    }

    if draw.needs_resample() {
        let theta = draw.rotate_deg.to_radians();
        let (sin, cos) = (theta.sin(), theta.cos());
        let (cx, cy) = ((w as f32 - 1.0) * 0.5, (h as f32 - 1.0) * 0.5);
        let (tx, ty) = (draw.translate.0 * w as f32, draw.translate.1 * h as f32);
        let inv_s = 1.0 / draw.scale;
        let src = out.image.clone();
        for y in 0..h {
            for x in 0..w {
                // Invert translate → rotate/scale about the center.
                let dx = x as f32 - cx - tx;
                let dy = y as f32 - cy - ty;
                let sx = (cos * dx + sin * dy) * inv_s + cx;
                let sy = (-sin * dx + cos * dy) * inv_s + cy;
                let px = bilinear(&src, h, w, sy, sx);
                let o = (y * w + x) * 3;
                out.image[o..o + 3].copy_from_slice(&px);
            }
        }
    }

    if draw.contrast != 1.0 {
        let mean = out.image.iter().sum::<f32>() / out.image.len() as f32;
        for v in out.image.iter_mut() {
            *v = mean + draw.contrast * (*v - mean);
        }
    }

    if draw.needs_resample() || draw.contrast != 1.0 {
        for v in out.image.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Bilinear sample of an H×W×3 buffer at fractional (y, x); zero outside.
fn bilinear(img: &[f32], h: usize, w: usize, y: f32, x: f32) -> [f32; 3] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let mut out = [0.0f32; 3];
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let yy = y0 + dy;
            let xx = x0 + dx;
            let weight = wy * wx;
            if weight == 0.0 || yy < 0.0 || xx < 0.0 || yy >= h as f32 || xx >= w as f32 {
                continue;
            }
            let base = (yy as usize * w + xx as usize) * 3;
            for c in 0..3 {
                out[c] += weight * img[base + c];
            }
        }
    }
    out
}
