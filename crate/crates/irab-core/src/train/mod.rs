//! Training loops for the method zoo, evaluation, run persistence, and
//! ablation drivers.
//!
//! Every method follows the same skeleton: per step, draw one labeled and
//! (for semi-supervised methods) one unlabeled image with replacement —
//! batch size 1 with labeled oversampling — assemble the method's loss on
//! a fresh tape, backprop, and take one Adam step. The learning rate
//! halves every `lr_halve_epochs`. Validation runs periodically on a slice
//! carved from the labeled split, and the best-validation parameters are
//! what a run returns.

mod ablate;
mod config;
mod report;

pub use ablate::{run_ablation, AblationGrid, AblationRow, TASK_RATIO_SEQUENCE};
pub use config::{
    DatasetSpec, ExperimentConfig, Method, TrainConfig, EXPERIMENT_SCHEMA_VERSION,
};
pub use report::{collect_report, median, method_medians, render_table, report_csv, ReportRow};

use std::path::Path;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::loss::{
    ict_loss, labeled_loss, mse_loss, mt_loss, rank_loss, seg_ce_loss, uda_loss, unlabeled_loss,
    MixupCoeff, SegTarget,
};
use crate::nn::{
    adam_step, build_model, save_checkpoint, ModelBundle, OptimizerState,
};
use crate::pseudo::{
    generate_pseudo_labels, msst_pseudo_labels, naive_pseudo_labels, pseudo_label_quality,
    ClassProbField, ProbFieldSet, PseudoLabelSet,
};
use crate::scene::{
    crop_pyramid, photometric_augment, read_dataset_roles, render_density, DensityMap, FileAudit,
    RoleSet, Scene,
};
use crate::surrogate::{derive_mask_set, derive_thresholds, quantize_msst, MaskSet, QuantizedMap,
    ThresholdLadder};
use crate::tensor::{Tape, Tensor};

/// Mutable run bookkeeping: schedule position and the rng streams.
pub struct RunState {
    pub epoch: usize,
    pub global_step: u64,
    pub lr: f64,
    pub best_val_mae: f64,
    pub rng_data: ChaCha8Rng,
    pub rng_aug: ChaCha8Rng,
    pub rng_mixup: ChaCha8Rng,
}

impl RunState {
    fn new(cfg: &TrainConfig) -> Self {
        RunState {
            epoch: 0,
            global_step: 0,
            lr: cfg.lr,
            best_val_mae: f64::INFINITY,
            rng_data: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x00da7a)),
            rng_aug: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x00a061)),
            rng_mixup: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x001c70)),
        }
    }
}

/// lr(epoch) = lr0 * 2^(-floor(epoch / period)), exactly.
pub fn lr_at_epoch(lr0: f64, period: usize, epoch: usize) -> f64 {
    lr0 * 2f64.powi(-((epoch / period) as i32))
}

/// Draw one labeled index and, when the unlabeled pool is nonempty, one
/// unlabeled index, both uniform with replacement.
pub fn schedule_step(
    rng: &mut ChaCha8Rng,
    n_labeled: usize,
    n_unlabeled: usize,
) -> Result<(usize, Option<usize>)> {
    if n_labeled == 0 {
        return Err(CoreError::invalid("labeled pool is empty".to_string()));
    }
    let li = rng.random_range(0..n_labeled);
    let ui = if n_unlabeled > 0 {
        Some(rng.random_range(0..n_unlabeled))
    } else {
        None
    };
    Ok((li, ui))
}

/// One line of `metrics.jsonl`. Deterministic per (config, seed) by
/// construction; wall time lives in the run summary instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub val_mae: f64,
    pub val_mse: f64,
    #[serde(default)]
    pub pseudo_precision: Option<f64>,
    #[serde(default)]
    pub pseudo_coverage: Option<f64>,
}

/// Count-level evaluation result.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub mae: f64,
    pub mse: f64,
    /// (predicted count, true count) per image.
    pub counts: Vec<(f64, usize)>,
}

pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub opt: OptimizerState,
    pub history: Vec<EvalRecord>,
    pub best_val_mae: f64,
}

fn image_tensor(scene: &Scene) -> Result<Tensor> {
    Tensor::from_vec(scene.image.clone(), &[1, 1, scene.height, scene.width])
}

fn density_tensor(d: &DensityMap) -> Result<Tensor> {
    Tensor::from_vec(d.values.clone(), &[1, 1, d.height, d.width])
}

/// MAE and root-mean-square count error from (predicted, true) pairs.
pub fn count_metrics(counts: &[(f64, usize)]) -> (f64, f64) {
    assert!(!counts.is_empty(), "count_metrics on empty slice");
    let n = counts.len() as f64;
    let abs_sum: f64 = counts.iter().map(|(p, t)| (p - *t as f64).abs()).sum();
    let sq_sum: f64 = counts.iter().map(|(p, t)| (p - *t as f64).powi(2)).sum();
    (abs_sum / n, (sq_sum / n).sqrt())
}

/// Predicted count and its error statistics over scenes with known dots.
pub fn evaluate(bundle: &ModelBundle, scenes: &[Scene]) -> Result<EvalResult> {
    if scenes.is_empty() {
        return Err(CoreError::invalid("cannot evaluate on an empty scene list".to_string()));
    }
    let mut counts = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let tape = Tape::new();
        let density = bundle.forward_density(&tape, &image_tensor(scene)?)?;
        let predicted: f64 = density.values().iter().sum();
        counts.push((predicted, scene.count()));
    }
    let (mae, mse) = count_metrics(&counts);
    Ok(EvalResult { mae, mse, counts })
}

/// Per-predictor probability tensors reduced to foreground planes.
fn fg_fields(probs: &[Tensor]) -> Result<ProbFieldSet> {
    let (_, c, h, w) = probs[0].dims4()?;
    debug_assert_eq!(c, 2);
    let fields = probs
        .iter()
        .map(|p| {
            let v = p.values();
            v[h * w..2 * h * w].to_vec()
        })
        .collect();
    ProbFieldSet::new(h, w, fields)
}

fn class_field(probs: &Tensor) -> Result<ClassProbField> {
    let (_, c, h, w) = probs.dims4()?;
    Ok(ClassProbField {
        height: h,
        width: w,
        num_classes: c,
        probs: probs.to_vec(),
    })
}

/// Precomputed per-scene supervision for the labeled split.
struct LabeledItem {
    scene: Scene,
    density: DensityMap,
    masks: Option<MaskSet>,
    quantized: Option<QuantizedMap>,
}

struct TrainContext {
    cfg: TrainConfig,
    bundle: ModelBundle,
    labeled: Vec<LabeledItem>,
    unlabeled: Vec<Scene>,
    val: Vec<Scene>,
    ladder: Option<ThresholdLadder>,
}

fn prepare(cfg: &TrainConfig, labeled: &[Scene], unlabeled: &[Scene]) -> Result<TrainContext> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(CoreError::data("dataset has no labeled scenes".to_string()));
    }
    if cfg.method.uses_unlabeled() && unlabeled.is_empty() {
        return Err(CoreError::data(format!(
            "method {} needs unlabeled scenes",
            cfg.method
        )));
    }

    let mut pool: Vec<Scene> = labeled.to_vec();
    if let Some(limit) = cfg.max_labeled {
        if limit == 0 {
            return Err(CoreError::invalid("max_labeled must be >= 1".to_string()));
        }
        pool.truncate(limit);
    }

    // carve validation from the labeled pool, deterministically per seed
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut rng_split = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x0059171));
    order.shuffle(&mut rng_split);
    let n_val = ((pool.len() as f64 * cfg.val_fraction).round() as usize).min(pool.len() - 1);
    let val_idx: std::collections::HashSet<usize> = order[..n_val].iter().copied().collect();
    let mut train_scenes = Vec::with_capacity(pool.len() - n_val);
    let mut val = Vec::with_capacity(n_val);
    for (i, scene) in pool.into_iter().enumerate() {
        if val_idx.contains(&i) {
            val.push(scene);
        } else {
            train_scenes.push(scene);
        }
    }
    if val.is_empty() {
        // fall back to validating on the training images themselves
        val = train_scenes.clone();
    }

    let factor = cfg.model.downsample_factor;
    let densities: Vec<DensityMap> = train_scenes
        .iter()
        .map(|s| render_density(s, cfg.sigma, factor))
        .collect::<Result<Vec<_>>>()?;

    let (n_heads, classes) = cfg.method.seg_head_plan(cfg.ratios.len());
    let ladder = if n_heads > 0 {
        Some(derive_thresholds(&densities, &cfg.ratios)?)
    } else {
        None
    };

    let labeled_items = train_scenes
        .into_iter()
        .zip(densities)
        .map(|(scene, density)| {
            let masks = match (&ladder, cfg.method) {
                (Some(l), Method::Irast | Method::IrastOnLabel | Method::IrastWoIr) => {
                    Some(derive_mask_set(&density, l)?)
                }
                _ => None,
            };
            let quantized = match (&ladder, cfg.method) {
                (Some(l), Method::Msst) => Some(quantize_msst(&density, l)?),
                _ => None,
            };
            Ok(LabeledItem {
                scene,
                density,
                masks,
                quantized,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let model_cfg = cfg.model.with_seg_heads(n_heads, classes);
    let mut bundle = build_model(&model_cfg, cfg.seed)?;
    if cfg.method.needs_teacher() {
        bundle.init_teacher()?;
    }

    Ok(TrainContext {
        cfg: cfg.clone(),
        bundle,
        labeled: labeled_items,
        unlabeled: unlabeled.to_vec(),
        val,
        ladder,
    })
}

/// Labeled-image part of the step loss.
fn labeled_step_loss(ctx: &TrainContext, tape: &Tape, item: &LabeledItem) -> Result<Tensor> {
    let image = image_tensor(&item.scene)?;
    let target = density_tensor(&item.density)?;
    match ctx.cfg.method {
        Method::Irast | Method::IrastOnLabel | Method::IrastWoIr => {
            let (pred, probs) = ctx.bundle.forward_all(tape, &image)?;
            let masks = item.masks.as_ref().expect("masks precomputed");
            labeled_loss(tape, &pred, &target, &probs, masks, &ctx.cfg.weights)
        }
        Method::Msst => {
            let (pred, probs) = ctx.bundle.forward_all(tape, &image)?;
            let quantized = item.quantized.as_ref().expect("quantization precomputed");
            let mse = mse_loss(tape, &pred, &target)?;
            let ce = seg_ce_loss(tape, &probs[0], SegTarget::Dense(&quantized.classes))?;
            let weighted = tape.scale(&ce, ctx.cfg.weights.lambda1)?;
            tape.add(&mse, &weighted)
        }
        _ => {
            let pred = ctx.bundle.forward_density(tape, &image)?;
            mse_loss(tape, &pred, &target)
        }
    }
}

/// Unlabeled-image part of the step loss (zero scalar for methods that
/// ignore the unlabeled pool). Returns the loss plus, for the self-training
/// methods, the pseudo-label set emitted this step.
fn unlabeled_step_loss(
    ctx: &TrainContext,
    tape: &Tape,
    scene_idx: Option<usize>,
    rng_aug: &mut ChaCha8Rng,
    rng_mixup: &mut ChaCha8Rng,
) -> Result<(Tensor, Option<PseudoLabelSet>)> {
    let Some(idx) = scene_idx else {
        return Ok((Tensor::scalar(0.0), None));
    };
    let scene = &ctx.unlabeled[idx];
    let cfg = &ctx.cfg;
    match cfg.method {
        Method::Irast | Method::IrastWoIr => {
            let image = image_tensor(scene)?;
            let probs = ctx.bundle.forward_seg_all(tape, &image)?;
            let fields = fg_fields(&probs)?;
            let labels = if cfg.method == Method::Irast {
                generate_pseudo_labels(&fields, cfg.t_p)?
            } else {
                naive_pseudo_labels(&fields, cfg.t_p)?
            };
            let loss = unlabeled_loss(tape, &probs, &labels, &cfg.weights)?;
            Ok((loss, Some(labels)))
        }
        Method::Msst => {
            let image = image_tensor(scene)?;
            let probs = ctx.bundle.forward_seg_all(tape, &image)?;
            let entries = msst_pseudo_labels(&class_field(&probs[0])?, cfg.t_p)?;
            if entries.is_empty() {
                return Ok((Tensor::scalar(0.0), None));
            }
            let ce = seg_ce_loss(tape, &probs[0], SegTarget::Sparse(&entries))?;
            let loss = tape.scale(&ce, cfg.weights.lambda2)?;
            Ok((loss, None))
        }
        Method::L2r => {
            let pyramid = crop_pyramid(
                scene,
                cfg.crop_levels,
                cfg.crop_ratio,
                cfg.model.downsample_factor,
                rng_aug,
            )?;
            // rank_loss wants smallest crop first
            let counts = pyramid
                .iter()
                .rev()
                .map(|(_, crop)| {
                    let pred = ctx.bundle.forward_density(tape, &image_tensor(crop)?)?;
                    tape.sum(&pred)
                })
                .collect::<Result<Vec<_>>>()?;
            let loss = rank_loss(tape, &counts)?;
            Ok((tape.scale(&loss, cfg.consistency_weight)?, None))
        }
        Method::Uda => {
            let aug = photometric_augment(scene, rng_aug.random(), cfg.augment_strength)?;
            // target branch off the gradient tape
            let target_tape = Tape::new();
            let clean_pred = ctx
                .bundle
                .forward_density(&target_tape, &image_tensor(scene)?)?;
            let aug_pred = ctx.bundle.forward_density(tape, &image_tensor(&aug)?)?;
            let loss = uda_loss(tape, &aug_pred, &clean_pred)?;
            Ok((tape.scale(&loss, cfg.consistency_weight)?, None))
        }
        Method::Mt => {
            let aug = photometric_augment(scene, rng_aug.random(), cfg.augment_strength)?;
            let teacher_pred = ctx.bundle.teacher_forward_density(&image_tensor(&aug)?)?;
            let student_pred = ctx.bundle.forward_density(tape, &image_tensor(scene)?)?;
            let loss = mt_loss(tape, &student_pred, &teacher_pred)?;
            Ok((tape.scale(&loss, cfg.consistency_weight)?, None))
        }
        Method::Ict => {
            let aug = photometric_augment(scene, rng_aug.random(), cfg.augment_strength)?;
            let lambda = MixupCoeff::sample(rng_mixup);
            let l = lambda.value();
            let mixed_values: Vec<f64> = aug
                .image
                .iter()
                .zip(&scene.image)
                .map(|(a, c)| l * a + (1.0 - l) * c)
                .collect();
            let mixed = Tensor::from_vec(mixed_values, &[1, 1, scene.height, scene.width])?;

            let target_tape = Tape::new();
            let clean_pred = ctx
                .bundle
                .forward_density(&target_tape, &image_tensor(scene)?)?;
            let aug_pred = ctx.bundle.forward_density(&target_tape, &image_tensor(&aug)?)?;
            let mixed_pred = ctx.bundle.forward_density(tape, &mixed)?;
            let loss = ict_loss(tape, &mixed_pred, &aug_pred, &clean_pred, lambda)?;
            Ok((tape.scale(&loss, cfg.consistency_weight)?, None))
        }
        Method::LabelOnly | Method::IrastOnLabel => Ok((Tensor::scalar(0.0), None)),
    }
}

/// Pseudo-label quality against the held-back truth of a fixed unlabeled
/// subset; measurement only, never supervision.
fn pseudo_quality_probe(ctx: &TrainContext) -> Result<Option<(f64, f64)>> {
    if !matches!(ctx.cfg.method, Method::Irast | Method::IrastWoIr) || ctx.unlabeled.is_empty() {
        return Ok(None);
    }
    let ladder = ctx.ladder.as_ref().expect("self-training has a ladder");
    let probe = ctx.unlabeled.len().min(4);
    let mut emitted = 0usize;
    let mut correct = 0usize;
    let mut opportunities = 0usize;
    for scene in &ctx.unlabeled[..probe] {
        let tape = Tape::new();
        let probs = ctx.bundle.forward_seg_all(&tape, &image_tensor(scene)?)?;
        let fields = fg_fields(&probs)?;
        let labels = if ctx.cfg.method == Method::Irast {
            generate_pseudo_labels(&fields, ctx.cfg.t_p)?
        } else {
            naive_pseudo_labels(&fields, ctx.cfg.t_p)?
        };
        let truth_density = render_density(scene, ctx.cfg.sigma, ctx.cfg.model.downsample_factor)?;
        let truth = derive_mask_set(&truth_density, ladder)?;
        let q = pseudo_label_quality(&labels, &truth)?;
        emitted += q.emitted;
        correct += q.correct;
        opportunities += truth.masks.len() * truth.height * truth.width;
    }
    let precision = if emitted == 0 {
        1.0
    } else {
        correct as f64 / emitted as f64
    };
    Ok(Some((precision, emitted as f64 / opportunities as f64)))
}

/// Train on in-memory scene pools.
pub fn train_with_data(
    cfg: &TrainConfig,
    labeled: &[Scene],
    unlabeled: &[Scene],
) -> Result<TrainOutcome> {
    let mut ctx = prepare(cfg, labeled, unlabeled)?;
    let params = ctx.bundle.parameters();
    let mut opt = OptimizerState::new(&params, cfg.lr);
    let mut state = RunState::new(cfg);
    let mut history = Vec::new();
    let mut best_snapshot: Option<Vec<Vec<f64>>> = None;

    let n_unlabeled = if cfg.method.uses_unlabeled() {
        ctx.unlabeled.len()
    } else {
        0
    };

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        state.lr = lr_at_epoch(cfg.lr, cfg.lr_halve_epochs, epoch);
        opt.set_lr(state.lr);

        for _ in 0..cfg.steps_per_epoch {
            let (li, ui) = schedule_step(&mut state.rng_data, ctx.labeled.len(), n_unlabeled)?;
            let tape = Tape::new();
            let item = &ctx.labeled[li];
            let l_labeled = labeled_step_loss(&ctx, &tape, item)?;
            let (l_unlabeled, _) =
                unlabeled_step_loss(&ctx, &tape, ui, &mut state.rng_aug, &mut state.rng_mixup)?;
            let total = tape.add(&l_labeled, &l_unlabeled)?;
            let value = total.item();
            if !value.is_finite() {
                return Err(CoreError::numeric(format!(
                    "loss became {} at epoch {} step {} (method {})",
                    value, epoch, state.global_step, cfg.method
                )));
            }
            tape.backward(&total)?;
            adam_step(&mut opt, &params)?;
            if cfg.method.needs_teacher() {
                ctx.bundle.ema_teacher_update(cfg.ema_alpha)?;
            }
            state.global_step += 1;
        }

        let is_eval_epoch = (epoch + 1) % cfg.eval_epochs == 0 || epoch + 1 == cfg.epochs;
        if is_eval_epoch {
            if matches!(cfg.method, Method::Irast | Method::IrastWoIr) {
                spot_check_invariants(&ctx)?;
            }
            let val = evaluate(&ctx.bundle, &ctx.val)?;
            let quality = pseudo_quality_probe(&ctx)?;
            history.push(EvalRecord {
                step: state.global_step,
                epoch,
                lr: state.lr,
                val_mae: val.mae,
                val_mse: val.mse,
                pseudo_precision: quality.map(|q| q.0),
                pseudo_coverage: quality.map(|q| q.1),
            });
            if val.mae < state.best_val_mae {
                state.best_val_mae = val.mae;
                best_snapshot = Some(ctx.bundle.snapshot());
            }
        }
    }

    if let Some(snapshot) = &best_snapshot {
        ctx.bundle.restore(snapshot)?;
    }
    Ok(TrainOutcome {
        bundle: ctx.bundle,
        opt,
        history,
        best_val_mae: state.best_val_mae,
    })
}

/// Structural invariants of the emitted pseudo-labels, re-checked on live
/// model outputs at eval time.
fn spot_check_invariants(ctx: &TrainContext) -> Result<()> {
    let Some(scene) = ctx.unlabeled.first() else {
        return Ok(());
    };
    let tape = Tape::new();
    let probs = ctx.bundle.forward_seg_all(&tape, &image_tensor(scene)?)?;
    let fields = fg_fields(&probs)?;
    let irast = generate_pseudo_labels(&fields, ctx.cfg.t_p)?;
    let naive = naive_pseudo_labels(&fields, ctx.cfg.t_p)?;
    if irast.difference_count(&naive) != 0 {
        return Err(CoreError::numeric(
            "invariant violation: self-training labels not a subset of naive labels".to_string(),
        ));
    }
    // staircase: positives form a prefix, negatives a suffix
    let (h, w) = (fields.height, fields.width);
    let c = fields.fields.len();
    let mut pos = vec![vec![false; c]; h * w];
    let mut neg = vec![vec![false; c]; h * w];
    for (k, set) in irast.sets.iter().enumerate() {
        for &(i, j, s) in set {
            if s == 1 {
                pos[i * w + j][k] = true;
            } else {
                neg[i * w + j][k] = true;
            }
        }
    }
    for pix in 0..h * w {
        for k in 1..c {
            if (pos[pix][k] && !pos[pix][k - 1]) || (neg[pix][k - 1] && !neg[pix][k]) {
                return Err(CoreError::numeric(
                    "invariant violation: pseudo-label staircase broken".to_string(),
                ));
            }
        }
    }
    Ok(())
}

/// Train from a dataset directory, loading only the roles the method is
/// allowed to read.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let roles = RoleSet {
        labeled: true,
        unlabeled: cfg.method.uses_unlabeled(),
        test: false,
    };
    let (split, _) = read_dataset_roles(&cfg.dataset_dir, roles)?;
    train_with_data(cfg, &split.labeled, &split.unlabeled)
}

/// One line of `summary.jsonl`: the run's identity and final metrics.
/// Wall time lives here, not in the metrics history, so metrics files are
/// byte-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub best_val_mae: f64,
    pub test_mae: f64,
    pub test_mse: f64,
    pub wall_time_s: f64,
    #[serde(default)]
    pub pseudo_precision: Option<f64>,
    #[serde(default)]
    pub pseudo_coverage: Option<f64>,
}

/// Run layout inside a run directory.
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.jsonl";
pub const CHECKPOINT_FILE: &str = "best.ckpt";

/// Execute a full run: train, evaluate on the test split, and persist
/// `config.json`, `metrics.jsonl`, `best.ckpt`, and `summary.jsonl` under
/// `run_dir`. Returns the summary and the dataset file audit.
pub fn run_training(cfg: &TrainConfig, run_dir: &Path) -> Result<(RunSummary, FileAudit)> {
    cfg.validate()?;
    let start = Instant::now();
    let roles = RoleSet {
        labeled: true,
        unlabeled: cfg.method.uses_unlabeled(),
        test: true,
    };
    let (split, audit) = read_dataset_roles(&cfg.dataset_dir, roles)?;
    let outcome = train_with_data(cfg, &split.labeled, &split.unlabeled)?;
    let test = evaluate(&outcome.bundle, &split.test)?;

    std::fs::create_dir_all(run_dir)?;
    std::fs::write(
        run_dir.join(CONFIG_FILE),
        serde_json::to_vec_pretty(cfg)?,
    )?;
    let mut metrics = String::new();
    for record in &outcome.history {
        metrics.push_str(&serde_json::to_string(record)?);
        metrics.push('\n');
    }
    std::fs::write(run_dir.join(METRICS_FILE), metrics)?;
    save_checkpoint(&outcome.bundle, &outcome.opt, &run_dir.join(CHECKPOINT_FILE))?;

    let last = outcome.history.last();
    let summary = RunSummary {
        method: cfg.method,
        seed: cfg.seed,
        n_labeled: split.labeled.len(),
        n_unlabeled: split.unlabeled.len(),
        n_test: split.test.len(),
        best_val_mae: outcome.best_val_mae,
        test_mae: test.mae,
        test_mse: test.mse,
        wall_time_s: start.elapsed().as_secs_f64(),
        pseudo_precision: last.and_then(|r| r.pseudo_precision),
        pseudo_coverage: last.and_then(|r| r.pseudo_coverage),
    };
    let mut line = serde_json::to_string(&summary)?;
    line.push('\n');
    std::fs::write(run_dir.join(SUMMARY_FILE), line)?;
    Ok((summary, audit))
}

#[cfg(test)]
mod tests;
