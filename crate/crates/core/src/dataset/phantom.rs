//! Synthetic apical-four-chamber-like phantoms.
//!
//! Each sample holds a tilted elliptical LV cavity, a myocardial ring built as
//! the disk dilation of the cavity minus the cavity, and an elliptical atrium
//! below the ventricle. Intensities are per-structure base levels under a
//! smooth illumination ramp, multiplicative speckle and a 3×3 Gaussian blur,
//! quantized to 8 bits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{pgm, LabeledSample};
use crate::error::{Error, Result};
use crate::mask::{ClassMask, BACKGROUND, LA, LV, LVM};
use crate::morphology::{dilate, StructuringElement};
use crate::rng;
use crate::tensor::Tensor;

pub const MAX_ATTEMPTS: usize = 100;
pub const MIN_STRUCTURE_PIXELS: usize = 16;
const MARGIN: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub speckle_sigma: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            count: 200,
            height: 64,
            width: 64,
            seed: 0,
            speckle_sigma: 0.15,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center_y: f64,
    pub center_x: f64,
    /// Semi-axis along the (tilted) vertical direction.
    pub semi_long: f64,
    pub semi_short: f64,
    pub rotation: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.center_y, x - self.center_x);
        let (s, c) = self.rotation.sin_cos();
        let u = dy * c + dx * s;
        let v = -dy * s + dx * c;
        (u / self.semi_long).powi(2) + (v / self.semi_short).powi(2) <= 1.0
    }

    fn extent(&self) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        let ey = ((self.semi_long * c).powi(2) + (self.semi_short * s).powi(2)).sqrt();
        let ex = ((self.semi_long * s).powi(2) + (self.semi_short * c).powi(2)).sqrt();
        (ey, ex)
    }

    fn raster(&self, height: usize, width: usize) -> Vec<bool> {
        let mut out = vec![false; height * width];
        for y in 0..height {
            for x in 0..width {
                out[y * width + x] = self.contains(y as f64, x as f64);
            }
        }
        out
    }
}

/// Randomized shape and appearance parameters of one phantom.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomGeometry {
    pub lv: Ellipse,
    pub ring_thickness: usize,
    pub la: Ellipse,
    pub illumination_angle: f64,
    pub illumination_strength: f64,
}

fn draw_geometry(rng: &mut ChaCha8Rng, height: usize, width: usize) -> PhantomGeometry {
    let (h, w) = (height as f64, width as f64);
    let rotation = rng.random_range(-0.35..0.35);
    let lv = Ellipse {
        center_y: rng.random_range(0.28..0.38) * h,
        center_x: rng.random_range(0.42..0.58) * w,
        semi_long: rng.random_range(0.15..0.21) * h,
        semi_short: rng.random_range(0.08..0.12) * w,
        rotation,
    };
    let ring_thickness = rng.random_range(2..=4usize);
    let la_long = rng.random_range(0.08..0.11) * h;
    let gap = rng.random_range(1.0..3.0);
    let reach = lv.semi_long + ring_thickness as f64 + gap + la_long;
    let (s, c) = rotation.sin_cos();
    let la = Ellipse {
        center_y: lv.center_y + reach * c,
        center_x: lv.center_x - reach * s,
        semi_long: la_long,
        semi_short: rng.random_range(0.09..0.13) * w,
        rotation: rotation + rng.random_range(-0.15..0.15),
    };
    PhantomGeometry {
        lv,
        ring_thickness,
        la,
        illumination_angle: rng.random_range(0.0..std::f64::consts::TAU),
        illumination_strength: rng.random_range(0.1..0.3),
    }
}

fn fits(g: &PhantomGeometry, height: usize, width: usize) -> bool {
    let (h, w) = (height as f64, width as f64);
    let t = g.ring_thickness as f64;
    let (ly, lx) = g.lv.extent();
    let (ay, ax) = g.la.extent();
    let inside = |cy: f64, cx: f64, ey: f64, ex: f64| {
        cy - ey >= MARGIN && cx - ex >= MARGIN && cy + ey <= h - 1.0 - MARGIN && cx + ex <= w - 1.0 - MARGIN
    };
    inside(g.lv.center_y, g.lv.center_x, ly + t, lx + t) && inside(g.la.center_y, g.la.center_x, ay, ax)
}

/// Rasterizes the three structures. The ring is exactly the dilation of the
/// cavity minus the cavity; the atrium only claims background pixels.
pub fn rasterize(g: &PhantomGeometry, height: usize, width: usize) -> Result<ClassMask> {
    let lv = g.lv.raster(height, width);
    let se = StructuringElement::disk(g.ring_thickness)?;
    let grown = dilate(&lv, height, width, &se);
    let la = g.la.raster(height, width);
    let mut mask = ClassMask::new(height, width);
    for (i, px) in mask.data_mut().iter_mut().enumerate() {
        *px = if lv[i] {
            LV
        } else if grown[i] {
            LVM
        } else if la[i] {
            LA
        } else {
            BACKGROUND
        };
    }
    Ok(mask)
}

/// Geometry and clean mask of sample `index`, retrying until the anatomy fits.
pub fn phantom_geometry(params: &PhantomParams, index: usize) -> Result<(PhantomGeometry, ClassMask)> {
    let mut rng = rng::stream(params.seed, rng::PHANTOM, index as u64);
    for _ in 0..MAX_ATTEMPTS {
        let g = draw_geometry(&mut rng, params.height, params.width);
        if !fits(&g, params.height, params.width) {
            continue;
        }
        let mask = rasterize(&g, params.height, params.width)?;
        if [LV, LVM, LA].iter().all(|&c| mask.count(c) >= MIN_STRUCTURE_PIXELS) {
            return Ok((g, mask));
        }
    }
    Err(Error::Data(format!(
        "phantom {index} did not fit a {}x{} canvas after {MAX_ATTEMPTS} attempts",
        params.height, params.width
    )))
}

fn render(
    g: &PhantomGeometry,
    mask: &ClassMask,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let (h, w) = mask.dims();
    let base = |c: u8| match c {
        LV => 0.08,
        LVM => 0.70,
        LA => 0.12,
        _ => 0.32,
    };
    let (s, c) = g.illumination_angle.sin_cos();
    let half = h.max(w) as f64 / 2.0;
    let mut raw = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let ramp = ((y as f64 - h as f64 / 2.0) * c + (x as f64 - w as f64 / 2.0) * s) / half;
            let gain = 1.0 + g.illumination_strength * ramp;
            let n: f64 = StandardNormal.sample(rng);
            raw[y * w + x] = base(mask.get(y, x)) * gain * (1.0 + sigma * n);
        }
    }
    // separable [1 2 1] / 4 blur with replicated borders
    let blur = |src: &[f64], vertical: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let at = |d: isize| {
                    if vertical {
                        let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                        src[yy * w + x]
                    } else {
                        let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                        src[y * w + xx]
                    }
                };
                out[y * w + x] = 0.25 * at(-1) + 0.5 * at(0) + 0.25 * at(1);
            }
        }
        out
    };
    let blurred = blur(&blur(&raw, false), true);
    blurred
        .into_iter()
        .map(|v| pgm::dequantize(pgm::quantize(v.clamp(0.0, 1.0) as f32)))
        .collect()
}

/// Deterministic phantom dataset; sample `i` depends only on `(seed, i, size)`.
pub fn generate_phantom(params: &PhantomParams) -> Result<Vec<LabeledSample>> {
    let pow2 = |v: usize| v >= 32 && v.is_power_of_two();
    if !pow2(params.height) || !pow2(params.width) {
        return Err(Error::Config(format!(
            "phantom size {}x{} must be powers of two >= 32",
            params.height, params.width
        )));
    }
    if params.speckle_sigma < 0.0 || !params.speckle_sigma.is_finite() {
        return Err(Error::Config("speckle sigma must be finite and >= 0".into()));
    }
    (0..params.count)
        .map(|i| {
            let (g, mask) = phantom_geometry(params, i)?;
            let mut rng = rng::stream(params.seed, rng::PHANTOM, (1u64 << 32) + i as u64);
            let pixels = render(&g, &mask, params.speckle_sigma, &mut rng);
            let image = Tensor::from_vec(&[1, params.height, params.width], pixels)?;
            LabeledSample::new(format!("phantom_{i:04}"), image, mask)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(count: usize) -> PhantomParams {
        PhantomParams {
            count,
            ..PhantomParams::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_phantom(&small(6)).unwrap();
        let b = generate_phantom(&small(6)).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&PhantomParams { seed: 1, ..small(6) }).unwrap();
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn every_structure_is_present() {
        for s in generate_phantom(&small(40)).unwrap() {
            for c in [LV, LVM, LA] {
                assert!(s.mask.count(c) >= MIN_STRUCTURE_PIXELS, "{} class {c}", s.id);
            }
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn ring_is_dilation_minus_cavity() {
        let params = small(25);
        for i in 0..params.count {
            let (g, mask) = phantom_geometry(&params, i).unwrap();
            let (h, w) = mask.dims();
            let lv = mask.indicator(LV);
            let se = StructuringElement::disk(g.ring_thickness).unwrap();
            let grown = dilate(&lv, h, w, &se);
            let ring: Vec<bool> = grown.iter().zip(&lv).map(|(&g, &l)| g && !l).collect();
            assert_eq!(mask.indicator(LVM), ring, "sample {i}");
        }
    }

    #[test]
    fn bad_sizes_are_rejected() {
        let p = PhantomParams {
            height: 48,
            ..small(1)
        };
        assert!(matches!(generate_phantom(&p), Err(Error::Config(_))));
        let p = PhantomParams {
            height: 16,
            width: 16,
            ..small(1)
        };
        assert!(generate_phantom(&p).is_err());
    }

    #[test]
    fn larger_canvases_work() {
        let p = PhantomParams {
            height: 128,
            width: 128,
            ..small(2)
        };
        let s = generate_phantom(&p).unwrap();
        assert_eq!(s[0].dims(), (128, 128));
        let p = PhantomParams {
            height: 32,
            width: 32,
            ..small(4)
        };
        assert_eq!(generate_phantom(&p).unwrap().len(), 4);
    }
}
