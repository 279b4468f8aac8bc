//! Seeded synthetic defect images: value-noise textured background, genuine
//! defects (irregular blobs, curved scratches) that land in the mask, and
//! low-contrast pseudo-defect smudges that deliberately do not. All drawing
//! happens in f64 and is cast at the end, so both precisions see the same
//! scene for a given seed, and each sample depends only on (seed, index).

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefectKinds {
    #[serde(default = "yes")]
    pub blob: bool,
    #[serde(default = "yes")]
    pub scratch: bool,
}

fn yes() -> bool {
    true
}

impl Default for DefectKinds {
    fn default() -> Self {
        DefectKinds { blob: true, scratch: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub count: usize,
    pub image_size: usize,
    /// Inclusive range of genuine defects per image.
    pub defect_count_range: (usize, usize),
    pub defect_kinds: DefectKinds,
    /// Expected pseudo-defect smudges per image; the actual count is drawn
    /// uniformly from 0..=round(2·density).
    pub pseudo_defect_density: f64,
    /// Std-dev of per-pixel Gaussian noise, in [0,1] intensity units.
    pub noise_sigma: f64,
    /// Cell size in pixels of the coarsest background-noise octave.
    pub texture_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            count: 16,
            image_size: 256,
            defect_count_range: (1, 3),
            defect_kinds: DefectKinds::default(),
            pseudo_defect_density: 1.5,
            noise_sigma: 0.02,
            texture_scale: 48.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::usage("image_size must be positive"));
        }
        if self.defect_count_range.0 > self.defect_count_range.1 {
            return Err(Error::usage(format!(
                "defect_count_range {:?} is inverted",
                self.defect_count_range
            )));
        }
        if self.defect_count_range.1 > 0
            && !self.defect_kinds.blob
            && !self.defect_kinds.scratch
        {
            return Err(Error::usage(
                "defects requested but every defect kind is disabled",
            ));
        }
        if self.pseudo_defect_density < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::usage("densities and sigmas must be non-negative"));
        }
        if self.texture_scale < 2.0 {
            return Err(Error::usage("texture_scale must be at least 2"));
        }
        Ok(())
    }
}

pub fn synth_generate<T: Element>(spec: &SynthSpec) -> Result<Vec<Sample<T>>> {
    spec.validate()?;
    (0..spec.count).map(|i| one_sample(spec, i)).collect()
}

fn one_sample<T: Element>(spec: &SynthSpec, index: usize) -> Result<Sample<T>> {
    let s = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );

    // Textured background in a mid-gray band, identical across channels.
    let mut gray = vec![0.0f64; s * s];
    let mut amp = 1.0;
    let mut cell = spec.texture_scale;
    let mut total_amp = 0.0;
    for _ in 0..4 {
        add_value_noise(&mut rng, &mut gray, s, cell.max(2.0), amp);
        total_amp += amp;
        amp *= 0.5;
        cell *= 0.5;
    }
    for v in gray.iter_mut() {
        *v = 0.3 + 0.4 * (*v / total_amp);
    }

    let mut mask = vec![false; s * s];
    let n_defects = rng.random_range(spec.defect_count_range.0..=spec.defect_count_range.1);
    for _ in 0..n_defects {
        let use_blob = match (spec.defect_kinds.blob, spec.defect_kinds.scratch) {
            (true, true) => rng.random_bool(0.5),
            (true, false) => true,
            (false, true) => false,
            (false, false) => unreachable!("validate rejects this"),
        };
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let delta = sign * rng.random_range(0.25..0.45);
        if use_blob {
            draw_blob(&mut rng, &mut gray, &mut mask, s, delta);
        } else {
            draw_scratch(&mut rng, &mut gray, &mut mask, s, delta);
        }
    }

    // Pseudo-defects: soft low-contrast smudges, image only.
    let max_pseudo = (2.0 * spec.pseudo_defect_density).round() as usize;
    let n_pseudo = if max_pseudo == 0 { 0 } else { rng.random_range(0..=max_pseudo) };
    for _ in 0..n_pseudo {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let delta = sign * rng.random_range(0.03..0.09);
        draw_smudge(&mut rng, &mut gray, s, delta);
    }

    let mut image = vec![0.0f64; 3 * s * s];
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::usage(format!("bad noise_sigma: {e}")))?;
        for c in 0..3 {
            for (o, &g) in image[c * s * s..][..s * s].iter_mut().zip(&gray) {
                *o = (g + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    } else {
        for c in 0..3 {
            for (o, &g) in image[c * s * s..][..s * s].iter_mut().zip(&gray) {
                *o = g.clamp(0.0, 1.0);
            }
        }
    }

    let image: Vec<T> = image.into_iter().map(T::from_f64).collect();
    let mask: Vec<T> = mask
        .into_iter()
        .map(|m| if m { T::one() } else { T::zero() })
        .collect();
    Ok(Sample {
        image: Tensor::new(&[3, s, s], image)?,
        mask: Tensor::new(&[1, s, s], mask)?,
        id: format!("synth_{index:04}"),
    })
}

/// One octave of lattice value noise, bilinearly interpolated, added with
/// weight `amp`. Lattice values are drawn row-major so the draw count is a
/// pure function of (size, cell).
fn add_value_noise<R: Rng>(rng: &mut R, out: &mut [f64], s: usize, cell: f64, amp: f64) {
    let g = (s as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..g * g).map(|_| rng.random::<f64>()).collect();
    for y in 0..s {
        let fy = y as f64 / cell;
        let y0 = fy.floor() as usize;
        let ty = fy - y0 as f64;
        for x in 0..s {
            let fx = x as f64 / cell;
            let x0 = fx.floor() as usize;
            let tx = fx - x0 as f64;
            let a = lattice[y0 * g + x0];
            let b = lattice[y0 * g + x0 + 1];
            let c = lattice[(y0 + 1) * g + x0];
            let d = lattice[(y0 + 1) * g + x0 + 1];
            let top = a + (b - a) * tx;
            let bot = c + (d - c) * tx;
            out[y * s + x] += amp * (top + (bot - top) * ty);
        }
    }
}

/// Irregular blob: base radius modulated by two angular harmonics. Centers
/// stay at least 15% from the border and the modulated radius tops out at
/// 0.14·s, so genuine blobs are never clipped.
fn draw_blob<R: Rng>(rng: &mut R, gray: &mut [f64], mask: &mut [bool], s: usize, delta: f64) {
    let sf = s as f64;
    let cx = rng.random_range(0.15..0.85) * sf;
    let cy = rng.random_range(0.15..0.85) * sf;
    let r0 = rng.random_range(sf / 24.0..sf / 10.0);
    let a1 = rng.random_range(0.0..0.25);
    let k1 = rng.random_range(2..=5) as f64;
    let p1 = rng.random_range(0.0..TAU);
    let a2 = rng.random_range(0.0..0.15);
    let k2 = rng.random_range(5..=9) as f64;
    let p2 = rng.random_range(0.0..TAU);
    let rmax = r0 * (1.0 + a1 + a2);
    let y_lo = ((cy - rmax).floor().max(0.0)) as usize;
    let y_hi = ((cy + rmax).ceil() as usize).min(s - 1);
    let x_lo = ((cx - rmax).floor().max(0.0)) as usize;
    let x_hi = ((cx + rmax).ceil() as usize).min(s - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let dist = (dx * dx + dy * dy).sqrt();
            let theta = dy.atan2(dx);
            let r = r0 * (1.0 + a1 * (k1 * theta + p1).sin() + a2 * (k2 * theta + p2).sin());
            if dist <= r {
                gray[y * s + x] = (gray[y * s + x] + delta).clamp(0.0, 1.0);
                mask[y * s + x] = true;
            }
        }
    }
}

/// Curved scratch: a quadratic Bezier stroked with small disks.
fn draw_scratch<R: Rng>(rng: &mut R, gray: &mut [f64], mask: &mut [bool], s: usize, delta: f64) {
    let sf = s as f64;
    let x0 = rng.random_range(0.1..0.9) * sf;
    let y0 = rng.random_range(0.1..0.9) * sf;
    let angle = rng.random_range(0.0..TAU);
    let len = rng.random_range(0.3..0.7) * sf;
    let bend = rng.random_range(-0.2..0.2) * len;
    let thick: f64 = rng.random_range(1.0..2.5);
    let (dx, dy) = (angle.cos(), angle.sin());
    let (x1, y1) = (x0 + len * dx, y0 + len * dy);
    let (cx, cy) = ((x0 + x1) / 2.0 - bend * dy, (y0 + y1) / 2.0 + bend * dx);
    let steps = (2.0 * len).ceil() as usize;
    let mut stamped = vec![false; s * s];
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let u = 1.0 - t;
        let px = u * u * x0 + 2.0 * u * t * cx + t * t * x1;
        let py = u * u * y0 + 2.0 * u * t * cy + t * t * y1;
        let r = thick.ceil() as isize;
        for oy in -r..=r {
            for ox in -r..=r {
                let gx = px as isize + ox;
                let gy = py as isize + oy;
                if gx < 0 || gy < 0 || gx >= s as isize || gy >= s as isize {
                    continue;
                }
                let ddx = gx as f64 + 0.5 - px;
                let ddy = gy as f64 + 0.5 - py;
                if ddx * ddx + ddy * ddy <= thick * thick {
                    stamped[gy as usize * s + gx as usize] = true;
                }
            }
        }
    }
    for (i, &hit) in stamped.iter().enumerate() {
        if hit {
            gray[i] = (gray[i] + delta).clamp(0.0, 1.0);
            mask[i] = true;
        }
    }
}

/// Low-contrast radial smudge; never touches the mask.
fn draw_smudge<R: Rng>(rng: &mut R, gray: &mut [f64], s: usize, delta: f64) {
    let sf = s as f64;
    let cx = rng.random_range(0.1..0.9) * sf;
    let cy = rng.random_range(0.1..0.9) * sf;
    let r = rng.random_range(sf / 16.0..sf / 6.0);
    let y_lo = ((cy - r).floor().max(0.0)) as usize;
    let y_hi = ((cy + r).ceil() as usize).min(s - 1);
    let x_lo = ((cx - r).floor().max(0.0)) as usize;
    let x_hi = ((cx + r).ceil() as usize).min(s - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let q = (dx * dx + dy * dy) / (r * r);
            if q < 1.0 {
                let fall = 1.0 - q;
                gray[y * s + x] = (gray[y * s + x] + delta * fall).clamp(0.0, 1.0);
            }
        }
    }
}
