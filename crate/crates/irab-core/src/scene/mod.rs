//! Synthetic crowd scenes and their ground-truth density maps.
//!
//! A scene is a grayscale image with dot annotations, one dot per object.
//! The ground truth for density regression is rendered at label resolution
//! (image resolution over the model's downsample factor) by placing a
//! truncated, renormalized Gaussian per dot, so the density map sums to the
//! object count exactly.
//!
//! Generation is pure given a seed: dot positions come from a mixture of
//! isotropic Gaussian clusters, the image is a textured background plus a
//! bright blob per dot plus noise, clipped to [0, 1].

mod io;

pub use io::{read_dataset, read_dataset_roles, write_dataset, FileAudit, RoleSet};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range for the number of dots.
    pub count_min: usize,
    pub count_max: usize,
    /// Inclusive range for the number of Gaussian clusters.
    pub clusters_min: usize,
    pub clusters_max: usize,
    /// Standard deviation of the bright blob rendered per dot, in pixels.
    pub blob_radius: f64,
    /// Amplitude of the additive pixel noise.
    pub noise_level: f64,
    /// Grid spacing of the low-frequency background texture, in pixels.
    pub texture_scale: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 32,
            width: 32,
            count_min: 4,
            count_max: 28,
            clusters_min: 1,
            clusters_max: 3,
            blob_radius: 1.4,
            noise_level: 0.04,
            texture_scale: 9.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(CoreError::invalid("scene extents must be positive".to_string()));
        }
        if self.count_min > self.count_max {
            return Err(CoreError::invalid(format!(
                "empty count range [{}, {}]",
                self.count_min, self.count_max
            )));
        }
        if self.clusters_min > self.clusters_max || self.clusters_min == 0 {
            return Err(CoreError::invalid(format!(
                "bad cluster count range [{}, {}]",
                self.clusters_min, self.clusters_max
            )));
        }
        if self.blob_radius <= 0.0 || self.noise_level < 0.0 || self.texture_scale <= 0.0 {
            return Err(CoreError::invalid(
                "blob radius / noise level / texture scale out of range".to_string(),
            ));
        }
        Ok(())
    }
}

/// A grayscale image with dot annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in [0, 1].
    pub image: Vec<f64>,
    /// (row, col) coordinates, inside image bounds.
    pub dots: Vec<(f64, f64)>,
    /// Seed the scene was generated from (kept for sidecar provenance; 0
    /// for derived scenes such as crops).
    pub gen_seed: u64,
}

impl Scene {
    pub fn count(&self) -> usize {
        self.dots.len()
    }
}

/// Ground-truth density at label resolution; sums to the dot count.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DensityMap {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Labeled/unlabeled/test partition of a scene pool.
///
/// Unlabeled scenes keep their dots in memory and on disk so pseudo-label
/// quality can be measured, but training code must never read them as
/// supervision.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub labeled: Vec<Scene>,
    pub unlabeled: Vec<Scene>,
    pub test: Vec<Scene>,
}

/// Smooth value-noise texture: random values on a coarse grid, bilinearly
/// interpolated.
fn background_texture(rng: &mut ChaCha8Rng, h: usize, w: usize, scale: f64) -> Vec<f64> {
    let gh = (h as f64 / scale).ceil() as usize + 2;
    let gw = (w as f64 / scale).ceil() as usize + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let gy = r as f64 / scale;
            let gx = c as f64 / scale;
            let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
            let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
            let at = |y: usize, x: usize| grid[y.min(gh - 1) * gw + x.min(gw - 1)];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out[r * w + c] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

// Background/blob contrast constants. Blob peaks vary per dot and blob
// radius / texture scale vary per scene, so neither intensity statistics
// nor a single template give the count away.
const BACKGROUND_AMPLITUDE: f64 = 0.45;
const BLOB_PEAK_MIN: f64 = 0.40;
const BLOB_PEAK_MAX: f64 = 0.95;
const RADIUS_JITTER: (f64, f64) = (0.75, 1.3);
const TEXTURE_JITTER: (f64, f64) = (0.6, 1.5);
// Background clutter: dim wide bumps that are not annotated objects. They
// share the objects' low-frequency appearance, so separating them needs
// learned shape features rather than an intensity threshold.
const DISTRACTORS_MAX: usize = 9;
const DISTRACTOR_RADIUS_FACTOR: (f64, f64) = (1.8, 3.0);
const DISTRACTOR_PEAK: (f64, f64) = (0.15, 0.45);

/// Generate one scene, deterministically per seed.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);

    let count = rng.random_range(spec.count_min..=spec.count_max);
    let n_clusters = rng.random_range(spec.clusters_min..=spec.clusters_max);
    let blob_radius = spec.blob_radius * rng.random_range(RADIUS_JITTER.0..RADIUS_JITTER.1);
    let texture_scale = spec.texture_scale * rng.random_range(TEXTURE_JITTER.0..TEXTURE_JITTER.1);
    let margin = (h.min(w) as f64 * 0.1).max(1.0);
    let centers: Vec<(f64, f64)> = (0..n_clusters)
        .map(|_| {
            (
                rng.random_range(margin..h as f64 - margin),
                rng.random_range(margin..w as f64 - margin),
            )
        })
        .collect();
    let spreads: Vec<f64> = (0..n_clusters)
        .map(|_| rng.random_range(h.min(w) as f64 * 0.08..h.min(w) as f64 * 0.3))
        .collect();

    let mut dots = Vec::with_capacity(count);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for _ in 0..count {
        let k = rng.random_range(0..n_clusters);
        let mut r = centers[k].0 + normal.sample(&mut rng) * spreads[k];
        let mut c = centers[k].1 + normal.sample(&mut rng) * spreads[k];
        // truncate to bounds: resample a few times, then clamp
        for _ in 0..8 {
            if r >= 0.0 && r < h as f64 && c >= 0.0 && c < w as f64 {
                break;
            }
            r = centers[k].0 + normal.sample(&mut rng) * spreads[k];
            c = centers[k].1 + normal.sample(&mut rng) * spreads[k];
        }
        r = r.clamp(0.0, h as f64 - 1e-6);
        c = c.clamp(0.0, w as f64 - 1e-6);
        dots.push((r, c));
    }

    let mut image = background_texture(&mut rng, h, w, texture_scale);
    for v in image.iter_mut() {
        *v *= BACKGROUND_AMPLITUDE;
    }

    let window = (3.0 * blob_radius).ceil() as i64;
    for &(dr, dc) in &dots {
        let peak = rng.random_range(BLOB_PEAK_MIN..BLOB_PEAK_MAX);
        let (ir, ic) = (dr.round() as i64, dc.round() as i64);
        for r in (ir - window).max(0)..=(ir + window).min(h as i64 - 1) {
            for c in (ic - window).max(0)..=(ic + window).min(w as i64 - 1) {
                let dy = r as f64 - dr;
                let dx = c as f64 - dc;
                let g = (-(dy * dy + dx * dx) / (2.0 * blob_radius * blob_radius)).exp();
                image[r as usize * w + c as usize] += peak * g;
            }
        }
    }

    let n_distractors = rng.random_range(0..=DISTRACTORS_MAX);
    for _ in 0..n_distractors {
        let dr = rng.random_range(0.0..h as f64);
        let dc = rng.random_range(0.0..w as f64);
        let radius = blob_radius
            * rng.random_range(DISTRACTOR_RADIUS_FACTOR.0..DISTRACTOR_RADIUS_FACTOR.1);
        let peak = rng.random_range(DISTRACTOR_PEAK.0..DISTRACTOR_PEAK.1);
        let win = (3.0 * radius).ceil() as i64;
        let (ir, ic) = (dr.round() as i64, dc.round() as i64);
        for r in (ir - win).max(0)..=(ir + win).min(h as i64 - 1) {
            for c in (ic - win).max(0)..=(ic + win).min(w as i64 - 1) {
                let dy = r as f64 - dr;
                let dx = c as f64 - dc;
                let g = (-(dy * dy + dx * dx) / (2.0 * radius * radius)).exp();
                image[r as usize * w + c as usize] += peak * g;
            }
        }
    }

    if spec.noise_level > 0.0 {
        for v in image.iter_mut() {
            *v += rng.random_range(-spec.noise_level..spec.noise_level);
        }
    }
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    Ok(Scene {
        height: h,
        width: w,
        image,
        dots,
        gen_seed: seed,
    })
}

/// Render the ground-truth density map at label resolution.
///
/// Each dot contributes a 2-D Gaussian of standard deviation `sigma`
/// (label-resolution pixels), truncated to a (6*sigma+1)^2 window clipped
/// at the borders and renormalized to sum exactly 1, so the map total
/// equals the dot count.
pub fn render_density(scene: &Scene, sigma: f64, factor: usize) -> Result<DensityMap> {
    if sigma <= 0.0 {
        return Err(CoreError::invalid(format!("sigma must be positive, got {}", sigma)));
    }
    if factor == 0 || scene.height % factor != 0 || scene.width % factor != 0 {
        return Err(CoreError::invalid(format!(
            "scene extents {}x{} not divisible by factor {}",
            scene.height, scene.width, factor
        )));
    }
    let (lh, lw) = (scene.height / factor, scene.width / factor);
    let mut values = vec![0.0; lh * lw];
    let radius = (3.0 * sigma).ceil() as i64;
    for &(dr, dc) in &scene.dots {
        let cr = dr / factor as f64;
        let cc = dc / factor as f64;
        let (ir, ic) = (cr.round() as i64, cc.round() as i64);
        let r0 = (ir - radius).max(0);
        let r1 = (ir + radius).min(lh as i64 - 1);
        let c0 = (ic - radius).max(0);
        let c1 = (ic + radius).min(lw as i64 - 1);
        let mut window = Vec::with_capacity(((r1 - r0 + 1) * (c1 - c0 + 1)) as usize);
        let mut mass = 0.0;
        for r in r0..=r1 {
            for c in c0..=c1 {
                let dy = r as f64 - cr;
                let dx = c as f64 - cc;
                let g = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                window.push((r, c, g));
                mass += g;
            }
        }
        debug_assert!(mass > 0.0, "dot window empty");
        for (r, c, g) in window {
            values[r as usize * lw + c as usize] += g / mass;
        }
    }
    Ok(DensityMap {
        height: lh,
        width: lw,
        values,
    })
}

/// Seeded shuffle-then-partition of a scene pool.
pub fn split_dataset(
    scenes: Vec<Scene>,
    n_labeled: usize,
    n_unlabeled: usize,
    n_test: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    let need = n_labeled + n_unlabeled + n_test;
    if need > scenes.len() {
        return Err(CoreError::invalid(format!(
            "split needs {} scenes, pool has {}",
            need,
            scenes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut rng);

    let mut pool: Vec<Option<Scene>> = scenes.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<Scene> {
        idx.iter().map(|&i| pool[i].take().expect("index used twice")).collect()
    };
    let labeled = take(&order[..n_labeled]);
    let unlabeled = take(&order[n_labeled..n_labeled + n_unlabeled]);
    let test = take(&order[n_labeled + n_unlabeled..need]);
    Ok(DatasetSplit {
        labeled,
        unlabeled,
        test,
    })
}

/// An axis-aligned crop within a scene, in original image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl CropRect {
    pub fn contains(&self, other: &CropRect) -> bool {
        other.row >= self.row
            && other.col >= self.col
            && other.row + other.height <= self.row + self.height
            && other.col + other.width <= self.col + self.width
    }
}

/// Nested crops, largest to smallest, all sharing a seeded anchor point.
///
/// Each level's sides shrink by `ratio` and are rounded down to a multiple
/// of `factor`; every crop is geometrically contained in the previous one,
/// so true dot counts are nonincreasing outer to inner.
pub fn crop_pyramid(
    scene: &Scene,
    levels: usize,
    ratio: f64,
    factor: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(CropRect, Scene)>> {
    if levels < 2 {
        return Err(CoreError::invalid("crop pyramid needs at least 2 levels".to_string()));
    }
    if !(0.0..1.0).contains(&ratio) || ratio <= 0.0 {
        return Err(CoreError::invalid(format!(
            "crop ratio must lie in (0, 1), got {}",
            ratio
        )));
    }
    if factor == 0 || scene.height % factor != 0 || scene.width % factor != 0 {
        return Err(CoreError::invalid(
            "scene extents must be divisible by the downsample factor".to_string(),
        ));
    }
    let floor_to = |v: f64| -> usize { ((v / factor as f64).floor() as usize) * factor };

    let anchor_r = rng.random_range(0.25..0.75) * scene.height as f64;
    let anchor_c = rng.random_range(0.25..0.75) * scene.width as f64;

    let mut rects = vec![CropRect {
        row: 0,
        col: 0,
        height: scene.height,
        width: scene.width,
    }];
    let (mut ch, mut cw) = (scene.height as f64, scene.width as f64);
    for _ in 1..levels {
        ch *= ratio;
        cw *= ratio;
        let h = floor_to(ch).max(factor);
        let w = floor_to(cw).max(factor);
        if h < 8 || w < 8 {
            return Err(CoreError::invalid(format!(
                "crop pyramid degenerates to {}x{} (needs >= 8x8)",
                h, w
            )));
        }
        let outer = *rects.last().expect("at least one rect");
        let clamp_into = |anchor: f64, extent: usize, lo: usize, hi: usize| -> usize {
            let want = anchor - extent as f64 / 2.0;
            let lo = lo as f64;
            let hi = (hi - extent) as f64;
            want.clamp(lo, hi).round() as usize
        };
        let row = clamp_into(anchor_r, h, outer.row, outer.row + outer.height);
        let col = clamp_into(anchor_c, w, outer.col, outer.col + outer.width);
        rects.push(CropRect {
            row,
            col,
            height: h,
            width: w,
        });
    }

    Ok(rects
        .into_iter()
        .map(|rect| {
            let mut image = Vec::with_capacity(rect.height * rect.width);
            for r in rect.row..rect.row + rect.height {
                image.extend_from_slice(&scene.image[r * scene.width + rect.col..][..rect.width]);
            }
            let dots = scene
                .dots
                .iter()
                .filter(|(dr, dc)| {
                    *dr >= rect.row as f64
                        && *dr < (rect.row + rect.height) as f64
                        && *dc >= rect.col as f64
                        && *dc < (rect.col + rect.width) as f64
                })
                .map(|(dr, dc)| (dr - rect.row as f64, dc - rect.col as f64))
                .collect();
            (
                rect,
                Scene {
                    height: rect.height,
                    width: rect.width,
                    image,
                    dots,
                    gen_seed: 0,
                },
            )
        })
        .collect())
}

/// Brightness shift + contrast scale + pixel noise, clipped to [0, 1].
/// Geometry is untouched so density targets stay aligned; strength 0 is
/// the identity.
pub fn photometric_augment(scene: &Scene, seed: u64, strength: f64) -> Result<Scene> {
    if strength < 0.0 {
        return Err(CoreError::invalid(format!(
            "augment strength must be nonnegative, got {}",
            strength
        )));
    }
    if strength == 0.0 {
        return Ok(scene.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let brightness = rng.random_range(-0.15..0.15) * strength;
    let contrast = 1.0 + rng.random_range(-0.25..0.25) * strength;
    let noise = 0.03 * strength;
    let image = scene
        .image
        .iter()
        .map(|v| {
            let x = contrast * (v - 0.5) + 0.5 + brightness + rng.random_range(-noise..noise);
            x.clamp(0.0, 1.0)
        })
        .collect();
    Ok(Scene {
        height: scene.height,
        width: scene.width,
        image,
        dots: scene.dots.clone(),
        gen_seed: scene.gen_seed,
    })
}

#[cfg(test)]
mod tests;
