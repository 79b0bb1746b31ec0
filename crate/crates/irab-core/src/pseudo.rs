//! Pseudo-label generation for the surrogate tasks.
//!
//! Predictors are ordered by ascending threshold, so a correct labeling is
//! monotone per pixel: positives form a prefix of the predictor index and
//! negatives a suffix. The inter-relationship-aware rule only emits a
//! positive at predictor k when every lower predictor is also confidently
//! positive, and a negative only when every higher predictor is confidently
//! negative; pixels whose predictions conflict (confidently below a low
//! threshold yet above a high one) produce no label at all. The naive rule
//! drops the cross-predictor conditions and is kept as the ablation.
//!
//! A simulated-predictor harness measures both rules against known truth
//! without any learned model in the loop.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scene::DensityMap;
use crate::surrogate::{derive_mask_set, quantize_msst, MaskSet, QuantizedMap, ThresholdLadder};

/// Foreground confidence fields P(M_k = 1), one per predictor, ordered by
/// ascending threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbFieldSet {
    pub height: usize,
    pub width: usize,
    pub fields: Vec<Vec<f64>>,
}

impl ProbFieldSet {
    pub fn new(height: usize, width: usize, fields: Vec<Vec<f64>>) -> Result<Self> {
        if fields.is_empty() {
            return Err(CoreError::invalid("need at least one probability field".to_string()));
        }
        for (k, f) in fields.iter().enumerate() {
            if f.len() != height * width {
                return Err(CoreError::invalid(format!(
                    "field {} has {} values for a {}x{} grid",
                    k,
                    f.len(),
                    height,
                    width
                )));
            }
            if f.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(CoreError::invalid(format!(
                    "field {} carries values outside [0, 1]",
                    k
                )));
            }
        }
        Ok(ProbFieldSet {
            height,
            width,
            fields,
        })
    }

    pub fn num_predictors(&self) -> usize {
        self.fields.len()
    }
}

/// Sparse per-predictor pseudo-label sets S_k = {(i, j, s)}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelSet {
    pub sets: Vec<Vec<(usize, usize, u8)>>,
}

impl PseudoLabelSet {
    pub fn total_labels(&self) -> usize {
        self.sets.iter().map(|s| s.len()).sum()
    }

    /// Labels in `self` that are absent from `other`, counted per predictor.
    pub fn difference_count(&self, other: &PseudoLabelSet) -> usize {
        self.sets
            .iter()
            .zip(&other.sets)
            .map(|(a, b)| {
                let set: std::collections::HashSet<_> = b.iter().collect();
                a.iter().filter(|e| !set.contains(e)).count()
            })
            .sum()
    }
}

fn check_tp(t_p: f64) -> Result<()> {
    if !(t_p > 0.5 && t_p < 1.0) {
        return Err(CoreError::invalid(format!(
            "confidence threshold must lie in (0.5, 1); got {} (the staircase and \
             no-conflict guarantees fail at or below 0.5)",
            t_p
        )));
    }
    Ok(())
}

/// Inter-relationship-aware pseudo-label generation.
///
/// At pixel (i,j): `(i,j,1)` joins S_k iff `P_k > t_p` and `P_g > t_p` for
/// every g < k; `(i,j,0)` joins S_k iff `1 - P_k > t_p` and `1 - P_h > t_p`
/// for every h > k. All comparisons strict; nothing else is emitted.
pub fn generate_pseudo_labels(probs: &ProbFieldSet, t_p: f64) -> Result<PseudoLabelSet> {
    check_tp(t_p)?;
    let c = probs.num_predictors();
    let hw = probs.height * probs.width;

    // per pixel: positives occupy predictor indices < prefix_len,
    // negatives occupy indices >= neg_start
    let mut prefix_len = vec![0usize; hw];
    for pix in 0..hw {
        let mut k = 0;
        while k < c && probs.fields[k][pix] > t_p {
            k += 1;
        }
        prefix_len[pix] = k;
    }
    let mut neg_start = vec![c; hw];
    for pix in 0..hw {
        let mut k = c;
        while k > 0 && 1.0 - probs.fields[k - 1][pix] > t_p {
            k -= 1;
        }
        neg_start[pix] = k;
    }

    let w = probs.width;
    let mut sets = vec![Vec::new(); c];
    for (k, set) in sets.iter_mut().enumerate() {
        for pix in 0..hw {
            if k < prefix_len[pix] {
                set.push((pix / w, pix % w, 1u8));
            }
            if k >= neg_start[pix] {
                set.push((pix / w, pix % w, 0u8));
            }
        }
    }
    Ok(PseudoLabelSet { sets })
}

/// Standard confidence-threshold self-training: a label is emitted at
/// predictor k whenever that predictor alone is confident, with no
/// cross-predictor conditions (the "without inter-relationship" ablation).
pub fn naive_pseudo_labels(probs: &ProbFieldSet, t_p: f64) -> Result<PseudoLabelSet> {
    check_tp(t_p)?;
    let w = probs.width;
    let sets = probs
        .fields
        .iter()
        .map(|field| {
            let mut set = Vec::new();
            for (pix, &p) in field.iter().enumerate() {
                if p > t_p {
                    set.push((pix / w, pix % w, 1u8));
                } else if 1.0 - p > t_p {
                    set.push((pix / w, pix % w, 0u8));
                }
            }
            set
        })
        .collect();
    Ok(PseudoLabelSet { sets })
}

/// Noise applied to simulated predictor outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// Gaussian perturbation of the logit.
    LogitGaussian,
    /// Replace p by 1-p with probability `magnitude`.
    Flip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub magnitude: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if self.magnitude < 0.0 {
            return Err(CoreError::invalid(format!(
                "noise magnitude must be nonnegative, got {}",
                self.magnitude
            )));
        }
        if self.kind == NoiseKind::Flip && self.magnitude > 1.0 {
            return Err(CoreError::invalid(
                "flip probability cannot exceed 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Confidence the simulator assigns to a correct prediction; fields are
/// squashed into [1 - SIM_CONFIDENCE, SIM_CONFIDENCE].
const SIM_CONFIDENCE: f64 = 0.98;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Simulated predictor outputs for a known density map: the clean field is
/// `SIM_CONFIDENCE` on true foreground and `1 - SIM_CONFIDENCE` on
/// background, then noise is applied per [`NoiseModel`]. Magnitude 0
/// reproduces the clean field exactly.
pub fn simulate_prob_fields(
    density: &DensityMap,
    ladder: &ThresholdLadder,
    noise: &NoiseModel,
) -> Result<ProbFieldSet> {
    noise.validate()?;
    let truth = derive_mask_set(density, ladder)?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let fields = truth
        .masks
        .iter()
        .map(|mask| {
            mask.iter()
                .map(|&m| {
                    let clean = if m == 1 { SIM_CONFIDENCE } else { 1.0 - SIM_CONFIDENCE };
                    if noise.magnitude == 0.0 {
                        return clean;
                    }
                    match noise.kind {
                        NoiseKind::LogitGaussian => {
                            sigmoid(logit(clean) + normal.sample(&mut rng) * noise.magnitude)
                        }
                        NoiseKind::Flip => {
                            if rng.random_range(0.0..1.0) < noise.magnitude {
                                1.0 - clean
                            } else {
                                clean
                            }
                        }
                    }
                })
                .collect()
        })
        .collect();
    ProbFieldSet::new(density.height, density.width, fields)
}

/// Precision/coverage of a pseudo-label set against true masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LabelQuality {
    /// Fraction of emitted labels that match the truth (1.0 when empty).
    pub precision: f64,
    /// Emitted labels over the c*H*W emission opportunities.
    pub coverage: f64,
    pub emitted: usize,
    pub correct: usize,
}

pub fn pseudo_label_quality(labels: &PseudoLabelSet, truth: &MaskSet) -> Result<LabelQuality> {
    if labels.sets.len() != truth.masks.len() {
        return Err(CoreError::invalid(format!(
            "label set has {} predictors, truth has {}",
            labels.sets.len(),
            truth.masks.len()
        )));
    }
    let (h, w) = (truth.height, truth.width);
    let mut emitted = 0usize;
    let mut correct = 0usize;
    for (set, mask) in labels.sets.iter().zip(&truth.masks) {
        for &(i, j, s) in set {
            if i >= h || j >= w {
                return Err(CoreError::invalid(format!(
                    "label at ({}, {}) outside {}x{} field",
                    i, j, h, w
                )));
            }
            emitted += 1;
            if mask[i * w + j] == s {
                correct += 1;
            }
        }
    }
    let denom = truth.masks.len() * h * w;
    Ok(LabelQuality {
        precision: if emitted == 0 {
            1.0
        } else {
            correct as f64 / emitted as f64
        },
        coverage: emitted as f64 / denom as f64,
        emitted,
        correct,
    })
}

// ---- multi-class (MSST) counterpart -----------------------------------------

/// Per-class posterior planes for a single multi-class predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbField {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Class-major planes: `probs[class * H * W + pixel]`.
    pub probs: Vec<f64>,
}

/// Standard multi-class self-training labels: argmax class where the max
/// posterior strictly exceeds `t_p`.
pub fn msst_pseudo_labels(field: &ClassProbField, t_p: f64) -> Result<Vec<(usize, usize, u8)>> {
    check_tp(t_p)?;
    let hw = field.height * field.width;
    let mut out = Vec::new();
    for pix in 0..hw {
        let mut best = 0usize;
        let mut best_p = f64::NEG_INFINITY;
        for cls in 0..field.num_classes {
            let p = field.probs[cls * hw + pix];
            if p > best_p {
                best_p = p;
                best = cls;
            }
        }
        if best_p > t_p {
            out.push((pix / field.width, pix % field.width, best as u8));
        }
    }
    Ok(out)
}

/// Simulated multi-class predictor: the true class gets the confident
/// logit, all others the complementary one, softmax-normalized, with
/// per-class logit noise.
pub fn simulate_class_field(
    truth: &QuantizedMap,
    noise: &NoiseModel,
) -> Result<ClassProbField> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed ^ 0x4d53_5354); // distinct stream
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let hw = truth.height * truth.width;
    let c = truth.num_classes;
    let hi = logit(SIM_CONFIDENCE);
    let mut probs = vec![0.0; c * hw];
    for pix in 0..hw {
        let mut logits: Vec<f64> = (0..c)
            .map(|cls| if cls as u8 == truth.classes[pix] { hi } else { -hi })
            .collect();
        if noise.magnitude > 0.0 {
            match noise.kind {
                NoiseKind::LogitGaussian => {
                    for l in logits.iter_mut() {
                        *l += normal.sample(&mut rng) * noise.magnitude;
                    }
                }
                NoiseKind::Flip => {
                    if rng.random_range(0.0..1.0) < noise.magnitude {
                        let wrong = rng.random_range(0..c);
                        logits.fill(-hi);
                        logits[wrong] = hi;
                    }
                }
            }
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for cls in 0..c {
            probs[cls * hw + pix] = (logits[cls] - m).exp() / z;
        }
    }
    Ok(ClassProbField {
        height: truth.height,
        width: truth.width,
        num_classes: c,
        probs,
    })
}

pub fn msst_label_quality(
    labels: &[(usize, usize, u8)],
    truth: &QuantizedMap,
) -> Result<LabelQuality> {
    let (h, w) = (truth.height, truth.width);
    let mut correct = 0usize;
    for &(i, j, cls) in labels {
        if i >= h || j >= w {
            return Err(CoreError::invalid(format!(
                "label at ({}, {}) outside {}x{} field",
                i, j, h, w
            )));
        }
        if truth.classes[i * w + j] == cls {
            correct += 1;
        }
    }
    Ok(LabelQuality {
        precision: if labels.is_empty() {
            1.0
        } else {
            correct as f64 / labels.len() as f64
        },
        coverage: labels.len() as f64 / (h * w) as f64,
        emitted: labels.len(),
        correct,
    })
}

// ---- monte-carlo comparison harness ------------------------------------------

/// One simulator measurement row (CSV-friendly).
#[derive(Debug, Clone, Serialize)]
pub struct SimRow {
    pub seed: u64,
    pub noise_kind: NoiseKind,
    pub noise_magnitude: f64,
    pub t_p: f64,
    pub method: &'static str,
    pub precision: f64,
    pub coverage: f64,
    /// Labels emitted by the inter-relationship rule but not the naive
    /// rule; the subset theorem says this is always zero.
    pub subset_violations: Option<usize>,
}

/// Compare the label-generation rules on simulated predictors across
/// seeds. Each seed gets a fresh random scene, its true masks, noisy
/// predictor fields, and one row per method.
pub fn run_simulation(
    kind: NoiseKind,
    magnitude: f64,
    t_p: f64,
    seeds: u64,
) -> Result<Vec<SimRow>> {
    use crate::scene::{generate_scene, render_density, SceneSpec};

    let spec = SceneSpec {
        height: 32,
        width: 32,
        count_min: 6,
        count_max: 24,
        ..SceneSpec::default()
    };
    let ratios = [0.0, 0.5, 0.7];
    let mut rows = Vec::with_capacity(seeds as usize * 3);
    for seed in 0..seeds {
        let scene = generate_scene(0x51u64.wrapping_mul(seed + 1), &spec)?;
        let density = render_density(&scene, 1.5, 4)?;
        let ladder = crate::surrogate::derive_thresholds(std::slice::from_ref(&density), &ratios)?;
        let truth = derive_mask_set(&density, &ladder)?;
        let quantized = quantize_msst(&density, &ladder)?;
        let noise = NoiseModel {
            kind,
            magnitude,
            seed,
        };

        let fields = simulate_prob_fields(&density, &ladder, &noise)?;
        let irast = generate_pseudo_labels(&fields, t_p)?;
        let naive = naive_pseudo_labels(&fields, t_p)?;
        let q_irast = pseudo_label_quality(&irast, &truth)?;
        let q_naive = pseudo_label_quality(&naive, &truth)?;

        let class_field = simulate_class_field(&quantized, &noise)?;
        let msst = msst_pseudo_labels(&class_field, t_p)?;
        let q_msst = msst_label_quality(&msst, &quantized)?;

        rows.push(SimRow {
            seed,
            noise_kind: kind,
            noise_magnitude: magnitude,
            t_p,
            method: "irast",
            precision: q_irast.precision,
            coverage: q_irast.coverage,
            subset_violations: Some(irast.difference_count(&naive)),
        });
        rows.push(SimRow {
            seed,
            noise_kind: kind,
            noise_magnitude: magnitude,
            t_p,
            method: "naive",
            precision: q_naive.precision,
            coverage: q_naive.coverage,
            subset_violations: None,
        });
        rows.push(SimRow {
            seed,
            noise_kind: kind,
            noise_magnitude: magnitude,
            t_p,
            method: "msst",
            precision: q_msst.precision,
            coverage: q_msst.coverage,
            subset_violations: None,
        });
    }
    Ok(rows)
}
