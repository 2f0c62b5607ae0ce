//! Procedural fine-grained dataset. Each genus fixes a background, a body
//! silhouette and the location of a part patch; species of one genus differ
//! only by the glyph drawn inside that patch. Samples add pose, hue and
//! pixel-noise jitter.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::hxt::{self, Dtype};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub genera: usize,
    pub species_per_genus: usize,
    pub samples_per_species: usize,
    pub image_size: usize,
    /// Side of the square part patch, in pixels.
    pub part_size: usize,
    /// Maximum absolute rotation, degrees.
    pub max_rotation: f64,
    /// Maximum absolute shift along each axis, pixels.
    pub max_translation: f64,
    /// Maximum absolute hue rotation, degrees.
    pub max_hue: f64,
    pub noise_std: f64,
    pub val_genera: usize,
    pub novel_genera: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            genera: 20,
            species_per_genus: 4,
            samples_per_species: 40,
            image_size: 84,
            part_size: 16,
            max_rotation: 15.0,
            max_translation: 12.0,
            max_hue: 12.0,
            noise_std: 0.03,
            val_genera: 4,
            novel_genera: 4,
            seed: 0,
        }
    }
}

const GLYPHS: usize = 7;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.species_per_genus < 2 || self.species_per_genus > GLYPHS {
            return bad(&format!("species_per_genus must be in 2..={GLYPHS}"));
        }
        if self.samples_per_species == 0 || self.image_size < 8 {
            return bad("need at least one sample and 8-pixel images");
        }
        if self.part_size < 4 || 2 * self.part_size > self.image_size {
            return bad("part_size must be at least 4 and at most half the image");
        }
        if self.val_genera == 0 || self.novel_genera == 0 || self.val_genera + self.novel_genera >= self.genera {
            return bad("every split needs at least one genus");
        }
        Ok(())
    }

    /// Split-assigned genus ids: `(base, val, novel)`.
    pub fn genus_split(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut ids: Vec<usize> = (0..self.genera).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.seed, 0x5EED, 0, 0)));
        let novel = ids[..self.novel_genera].to_vec();
        let val = ids[self.novel_genera..self.novel_genera + self.val_genera].to_vec();
        let mut base = ids[self.novel_genera + self.val_genera..].to_vec();
        base.sort_unstable();
        (base, val, novel)
    }

    pub fn class_name(genus: usize, species: usize) -> String {
        format!("g{genus:02}s{species}")
    }
}

fn mix(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.rotate_left(21) ^ c.rotate_left(42);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

type Rgb = [f64; 3];

fn random_color(rng: &mut impl Rng) -> Rgb {
    [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
}

/// Per-genus layout in object coordinates (pixel units, origin at the
/// image center).
#[derive(Clone, Debug)]
pub struct GenusStyle {
    background: Rgb,
    stripe_color: Rgb,
    stripe_period: f64,
    body: Rgb,
    radii: (f64, f64),
    fin: (f64, f64, f64),
    fin_color: Rgb,
    /// Top-left corner of the part patch.
    part_origin: (f64, f64),
    glyph_order: [usize; GLYPHS],
}

impl GenusStyle {
    pub fn new(spec: &SyntheticSpec, genus: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 0x6E05, genus as u64, 0));
        let s = spec.image_size as f64;
        let p = spec.part_size as f64;
        let rx = rng.random_range(0.26..0.38) * s;
        let ry = rng.random_range(0.2..0.32) * s;
        // Keep the patch inside the body so it stays on the silhouette.
        let px = rng.random_range(-0.3..0.3) * (rx - p / 2.0).max(0.0) - p / 2.0;
        let py = rng.random_range(-0.3..0.3) * (ry - p / 2.0).max(0.0) - p / 2.0;
        let angle = rng.random_range(0.0..2.0 * PI);
        let mut glyph_order = [0, 1, 2, 3, 4, 5, 6];
        glyph_order.shuffle(&mut rng);
        Self {
            background: random_color(&mut rng),
            stripe_color: random_color(&mut rng),
            stripe_period: rng.random_range(0.12..0.3) * s,
            body: random_color(&mut rng),
            radii: (rx, ry),
            fin: (angle.cos() * rx, angle.sin() * ry, rng.random_range(0.1..0.18) * s),
            fin_color: random_color(&mut rng),
            part_origin: (px, py),
            glyph_order,
        }
    }

    fn in_part(&self, spec: &SyntheticSpec, x: f64, y: f64) -> Option<(f64, f64)> {
        let p = spec.part_size as f64;
        let (u, v) = ((x - self.part_origin.0) / p, (y - self.part_origin.1) / p);
        ((0.0..1.0).contains(&u) && (0.0..1.0).contains(&v)).then_some((u, v))
    }

    fn shade(&self, x: f64, y: f64) -> Rgb {
        let (rx, ry) = self.radii;
        if (x / rx).powi(2) + (y / ry).powi(2) <= 1.0 {
            return self.body;
        }
        let (fx, fy, fr) = self.fin;
        if (x - fx).powi(2) + (y - fy).powi(2) <= fr * fr {
            return self.fin_color;
        }
        if ((x + y) / self.stripe_period).rem_euclid(2.0) < 1.0 {
            self.background
        } else {
            self.stripe_color
        }
    }
}

/// Glyph appearance of one species, drawn in patch coordinates `[0,1)²`.
#[derive(Clone, Debug)]
struct Glyph {
    kind: usize,
    ink: Rgb,
    backdrop: Rgb,
}

impl Glyph {
    fn new(spec: &SyntheticSpec, style: &GenusStyle, genus: usize, species: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 0x611F, genus as u64, species as u64));
        Self {
            kind: style.glyph_order[species],
            ink: random_color(&mut rng),
            backdrop: style.body.map(|c| 1.0 - c),
        }
    }

    fn shade(&self, u: f64, v: f64) -> Rgb {
        let (cu, cv) = (u - 0.5, v - 0.5);
        let r = (cu * cu + cv * cv).sqrt();
        let on = match self.kind {
            0 => (v * 3.0).fract() < 0.5,
            1 => (u * 3.0).fract() < 0.5,
            2 => ((u * 2.0).floor() as i64 + (v * 2.0).floor() as i64) % 2 == 0,
            3 => r < 0.3,
            4 => ((u + v) * 2.0).fract() < 0.5,
            5 => (0.22..0.42).contains(&r),
            _ => cu.abs() < 0.15 || cv.abs() < 0.15,
        };
        if on {
            self.ink
        } else {
            self.backdrop
        }
    }
}

/// One explicit jitter draw. Two samples rendered with the same draw differ
/// only where their species differ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub rotation: f64,
    pub shift: (f64, f64),
    pub hue: f64,
    pub noise_seed: u64,
}

impl Jitter {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            shift: (0.0, 0.0),
            hue: 0.0,
            noise_seed: 0,
        }
    }

    pub fn draw(spec: &SyntheticSpec, rng: &mut impl Rng) -> Self {
        let sym = |rng: &mut dyn rand::RngCore, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        Self {
            rotation: sym(rng, spec.max_rotation).to_radians(),
            shift: (sym(rng, spec.max_translation), sym(rng, spec.max_translation)),
            hue: sym(rng, spec.max_hue).to_radians(),
            noise_seed: rng.random(),
        }
    }

    /// Maps the center of pixel `(x, y)` into object coordinates.
    fn to_object(&self, spec: &SyntheticSpec, x: usize, y: usize) -> (f64, f64) {
        let c = spec.image_size as f64 / 2.0;
        let dx = x as f64 + 0.5 - c - self.shift.0;
        let dy = y as f64 + 0.5 - c - self.shift.1;
        let (s, co) = self.rotation.sin_cos();
        (co * dx + s * dy, -s * dx + co * dy)
    }
}

/// Luminance-preserving hue rotation.
fn hue_rotate(rgb: Rgb, angle: f64) -> Rgb {
    let (s, c) = angle.sin_cos();
    let m = [
        [0.213 + 0.787 * c - 0.213 * s, 0.715 - 0.715 * c - 0.715 * s, 0.072 - 0.072 * c + 0.928 * s],
        [0.213 - 0.213 * c + 0.143 * s, 0.715 + 0.285 * c + 0.140 * s, 0.072 - 0.072 * c - 0.283 * s],
        [0.213 - 0.213 * c - 0.787 * s, 0.715 - 0.715 * c + 0.715 * s, 0.072 + 0.928 * c + 0.072 * s],
    ];
    m.map(|row| row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2])
}

/// Pixels whose object-space position falls inside the genus part patch.
pub fn part_mask(spec: &SyntheticSpec, genus: usize, jitter: &Jitter) -> Vec<bool> {
    let style = GenusStyle::new(spec, genus);
    let s = spec.image_size;
    (0..s * s)
        .map(|i| {
            let (x, y) = jitter.to_object(spec, i % s, i / s);
            style.in_part(spec, x, y).is_some()
        })
        .collect()
}

/// Renders one `[3,S,S]` image in `[0,1]`.
pub fn render(spec: &SyntheticSpec, genus: usize, species: usize, jitter: &Jitter) -> Tensor {
    let style = GenusStyle::new(spec, genus);
    let glyph = Glyph::new(spec, &style, genus, species);
    let s = spec.image_size;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(jitter.noise_seed);
    let normal = Normal::new(0.0, spec.noise_std.max(0.0)).unwrap();
    let mut data = vec![0.0; 3 * s * s];
    for i in 0..s * s {
        let (x, y) = jitter.to_object(spec, i % s, i / s);
        let base = match style.in_part(spec, x, y) {
            Some((u, v)) => glyph.shade(u, v),
            None => style.shade(x, y),
        };
        let rgb = hue_rotate(base, jitter.hue);
        for c in 0..3 {
            let n = if spec.noise_std > 0.0 { normal.sample(&mut noise_rng) } else { 0.0 };
            data[c * s * s + i] = (rgb[c] + n).clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[3, s, s], data).unwrap()
}

/// Deterministic jitter draws for one class.
pub fn class_jitters(spec: &SyntheticSpec, genus: usize, species: usize) -> Vec<Jitter> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 0x717E, genus as u64, species as u64));
    (0..spec.samples_per_species).map(|_| Jitter::draw(spec, &mut rng)).collect()
}

/// Writes `root/{base,val,novel}/<class>/<nnn>.hxt` as 32-bit raw tensors.
pub fn generate_synthetic(spec: &SyntheticSpec, root: impl AsRef<Path>) -> Result<()> {
    spec.validate()?;
    let root = root.as_ref();
    let (base, val, novel) = spec.genus_split();
    let mut jobs = Vec::new();
    for (split, genera) in [("base", &base), ("val", &val), ("novel", &novel)] {
        for &g in genera {
            for sp in 0..spec.species_per_genus {
                jobs.push((split, g, sp));
            }
        }
    }
    jobs.par_iter().try_for_each(|&(split, g, sp)| -> Result<()> {
        let dir = root.join(split).join(SyntheticSpec::class_name(g, sp));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, j) in class_jitters(spec, g, sp).iter().enumerate() {
            let img = render(spec, g, sp, j);
            hxt::write_raw_tensor_as(dir.join(format!("{i:03}.hxt")), &img, Dtype::F32)?;
        }
        Ok(())
    })
}
