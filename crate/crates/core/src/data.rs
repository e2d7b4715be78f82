//! Synthetic multi-subdomain scenes.
//!
//! Content is shared: one of three 4x4 shapes stamped into cells of a square
//! grid. Style is per subdomain: additive noise whose spectrum is confined to a
//! radial band `[lo, hi)` with uniform amplitude and random phase, scaled to a
//! fixed standard deviation. The target band is disjoint from every source band.

use rand::Rng;

use crate::config::{AugmentCfg, DataCfg};
use crate::error::{invalid, Result};
use crate::rng::{stream, Stream};
use crate::spectral::{radial_field, Fft2d, ImagePlane, RadialField};

pub const CELL: usize = 4;
pub const N_CLASSES: usize = 3;
/// Background label of a grid cell.
pub const BACKGROUND: i32 = -1;

pub const SHAPES: [[[u8; CELL]; CELL]; N_CLASSES] = [
    [[0, 0, 0, 0], [0, 1, 1, 0], [0, 1, 1, 0], [0, 0, 0, 0]],
    [[0, 0, 0, 0], [1, 1, 1, 1], [1, 1, 1, 1], [0, 0, 0, 0]],
    [[0, 1, 1, 0], [0, 1, 1, 0], [0, 1, 1, 0], [0, 1, 1, 0]],
];

/// Style noise amplitude relative to `style_strength`.
const STYLE_SCALE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subdomain {
    Source(usize),
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: ImagePlane<f64>,
    /// Row-major grid of class ids, [`BACKGROUND`] for empty cells.
    pub labels: Vec<i32>,
    pub grid: usize,
    pub subdomain: Subdomain,
}

impl SyntheticScene {
    /// Occupied cells as `(row, col, class)`.
    pub fn boxes(&self) -> Vec<(usize, usize, usize)> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l >= 0)
            .map(|(i, &l)| (i / self.grid, i % self.grid, l as usize))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub source: Vec<SyntheticScene>,
    pub target_unlabeled: Vec<SyntheticScene>,
    pub target_eval: Vec<SyntheticScene>,
}

/// Generates per subdomain in order: all sources, then unlabeled target, then
/// held-out target, from the data stream of `seed`.
pub fn generate_dataset(cfg: &DataCfg, seed: u64) -> Result<Dataset> {
    if cfg.source_bands.len() < 2 {
        return Err(invalid(format!(
            "need at least 2 source subdomains, got {}",
            cfg.source_bands.len()
        )));
    }
    let size = CELL * cfg.grid;
    let plan = Fft2d::new(size, size)?;
    let radial = radial_field(size, size)?;
    let mut rng = stream(seed, Stream::Data);
    let mut source = Vec::with_capacity(cfg.n_per_subdomain * cfg.source_bands.len());
    for (k, band) in cfg.source_bands.iter().enumerate() {
        for _ in 0..cfg.n_per_subdomain {
            source.push(scene(&mut rng, cfg, &plan, &radial, *band, Subdomain::Source(k)));
        }
    }
    let mut target = |n: usize| -> Vec<SyntheticScene> {
        (0..n)
            .map(|_| scene(&mut rng, cfg, &plan, &radial, cfg.target_band, Subdomain::Target))
            .collect()
    };
    let target_unlabeled = target(cfg.n_target_unlabeled);
    let target_eval = target(cfg.n_target_eval);
    Ok(Dataset {
        source,
        target_unlabeled,
        target_eval,
    })
}

fn scene<R: Rng>(
    rng: &mut R,
    cfg: &DataCfg,
    plan: &Fft2d<f64>,
    radial: &RadialField<f64>,
    band: [f64; 2],
    subdomain: Subdomain,
) -> SyntheticScene {
    let (g, size) = (cfg.grid, CELL * cfg.grid);
    let mut labels = vec![BACKGROUND; g * g];
    let mut data = vec![0.0; size * size];
    for r in 0..g {
        for c in 0..g {
            if rng.gen::<f64>() < cfg.occupancy {
                let k = rng.gen_range(0..N_CLASSES);
                labels[r * g + c] = k as i32;
                stamp(&mut data, size, r, c, &SHAPES[k]);
            }
        }
    }
    let noise = band_noise(rng, plan, radial, band);
    let s = cfg.style_strength * STYLE_SCALE;
    data.iter_mut().zip(&noise).for_each(|(x, n)| *x += s * n);
    SyntheticScene {
        image: ImagePlane::new(size, size, data).expect("finite scene"),
        labels,
        grid: g,
        subdomain,
    }
}

fn stamp(data: &mut [f64], size: usize, r: usize, c: usize, shape: &[[u8; CELL]; CELL]) {
    for (dy, row) in shape.iter().enumerate() {
        for (dx, &v) in row.iter().enumerate() {
            data[(r * CELL + dy) * size + c * CELL + dx] = v as f64;
        }
    }
}

/// Indicator of bins with `lo <= D < hi`.
pub fn band_mask(radial: &RadialField<f64>, band: [f64; 2]) -> Vec<f64> {
    radial
        .values()
        .iter()
        .map(|&d| if d >= band[0] && d < band[1] { 1.0 } else { 0.0 })
        .collect()
}

/// Real part of a random-phase, flat-amplitude spectrum inside `band`,
/// normalized to unit standard deviation.
pub fn band_noise<R: Rng>(rng: &mut R, plan: &Fft2d<f64>, radial: &RadialField<f64>, band: [f64; 2]) -> Vec<f64> {
    let amp = band_mask(radial, band);
    let phase: Vec<f64> = (0..amp.len())
        .map(|_| rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI))
        .collect();
    let (mut x, _) = plan.synthesize(&amp, &phase);
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    x.iter_mut().for_each(|v| *v /= std + 1e-12);
    x
}

/// Circular shift by whole cells plus gain and offset jitter.
pub fn weak_augment<R: Rng>(rng: &mut R, img: &ImagePlane<f64>, cfg: &AugmentCfg) -> ImagePlane<f64> {
    let (h, w) = (img.height(), img.width());
    // Whole-cell steps keep objects on the label grid.
    let s = cfg.max_shift as i64;
    let cell = CELL as i64;
    let (dy, dx) = if s > 0 {
        (cell * rng.gen_range(-s..=s), cell * rng.gen_range(-s..=s))
    } else {
        (0, 0)
    };
    let (gain, offset) = if cfg.brightness > 0.0 {
        (
            1.0 + rng.gen_range(-cfg.brightness..cfg.brightness),
            rng.gen_range(-cfg.brightness..cfg.brightness),
        )
    } else {
        (1.0, 0.0)
    };
    ImagePlane::from_fn(h, w, |r, c| {
        let sr = (r as i64 - dy).rem_euclid(h as i64) as usize;
        let sc = (c as i64 - dx).rem_euclid(w as i64) as usize;
        gain * img.get(sr, sc) + offset
    })
}

/// Extra noise in a random radial band of width 0.05, then an optional
/// zeroed square. Applied on top of a weak view.
pub fn strong_augment<R: Rng>(
    rng: &mut R,
    weak: &ImagePlane<f64>,
    cfg: &AugmentCfg,
    plan: &Fft2d<f64>,
    radial: &RadialField<f64>,
) -> ImagePlane<f64> {
    let (h, w) = (weak.height(), weak.width());
    let mut data = weak.data().to_vec();
    if cfg.band_noise > 0.0 {
        let lo = rng.gen_range(0.02..0.45);
        let noise = band_noise(rng, plan, radial, [lo, lo + 0.05]);
        data.iter_mut().zip(&noise).for_each(|(x, n)| *x += cfg.band_noise * n);
    }
    if cfg.cutout > 0 && cfg.cutout < h.min(w) {
        let (r0, c0) = (rng.gen_range(0..=h - cfg.cutout), rng.gen_range(0..=w - cfg.cutout));
        for r in r0..r0 + cfg.cutout {
            data[r * w + c0..r * w + c0 + cfg.cutout].fill(0.0);
        }
    }
    ImagePlane::new(h, w, data).expect("finite augmentation")
}
