//! Fine-tuning loop: alternating discriminator/generator updates under the
//! combined objective, starting from a pretrained source model, with periodic
//! FID evaluation and best-checkpoint selection. Also hosts the plain GAN
//! pretraining loop that produces source checkpoints.

use crate::autodiff as ad;
use crate::autodiff::{backward, Var};
use crate::error::{Error, Result};
use crate::eval::{fid, FeatureExtractor};
use crate::loss::{
    collect_param_grads, combine_d, combine_g, image_loss, r1_penalty, sketch_loss,
    weight_reg_var, LossReport, LossWeights, LAZY_R1_INTERVAL,
};
use crate::model::{
    trainable_mask, Checkpoint, DiscArch, Discriminator, GeneratorParams, TrainVariant,
};
use crate::nn::{Adam, ParamStore};
use crate::sketch::{draw_offsets, shift_per_sample, AugmentPolicy, SketchSet, SketchTranslator};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::str::FromStr;

/// How the sketch discriminator is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DYInit {
    /// Copied from the source model's discriminator (channel-adapted).
    Pretrained,
    /// Fresh random weights.
    Scratch,
}

impl FromStr for DYInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(DYInit::Pretrained),
            "scratch" => Ok(DYInit::Scratch),
            other => Err(Error::Config(format!(
                "unknown d_y_init `{other}` (expected pretrained|scratch)"
            ))),
        }
    }
}

impl std::fmt::Display for DYInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DYInit::Pretrained => "pretrained",
            DYInit::Scratch => "scratch",
        })
    }
}

/// Full fine-tuning configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: TrainVariant,
    pub weights: LossWeights,
    pub aug: AugmentPolicy,
    pub batch_size: usize,
    pub max_iters: u64,
    pub eval_every: u64,
    pub seed: u64,
    pub d_y_init: DYInit,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lazy_r1: bool,
    /// Rotate the image-space batch (reals and fakes alike) by a random
    /// multiple of 45 degrees before the image discriminator sees it. Only
    /// meaningful for 2-channel point tasks whose data distribution has that
    /// symmetry: the image critic then preserves realism (radius) without
    /// pinning angular proportions, which the sketch loss owns.
    pub image_rotation_aug: bool,
    /// Samples generated per FID evaluation.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: TrainVariant::FullMapping,
            weights: LossWeights::default(),
            aug: AugmentPolicy::disabled(),
            batch_size: 4,
            max_iters: 5_000,
            eval_every: 250,
            seed: 0,
            d_y_init: DYInit::Pretrained,
            // Published defaults of the source model family's optimizer.
            lr: 0.002,
            beta1: 0.0,
            beta2: 0.99,
            lazy_r1: true,
            image_rotation_aug: false,
            eval_samples: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_every == 0 || self.max_iters < self.eval_every {
            return Err(Error::Config(format!(
                "need max_iters ({}) >= eval_every ({}) >= 1",
                self.max_iters, self.eval_every
            )));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        if self.eval_samples < 2 {
            return Err(Error::Config("eval_samples must be at least 2".into()));
        }
        Ok(())
    }
}

/// Batch-size rule: fewer than four exemplars drop to single-sample batches;
/// otherwise the batch never exceeds the sketch count.
pub fn effective_batch(configured: usize, sketch_count: usize) -> usize {
    if sketch_count < 4 {
        1
    } else {
        configured.min(sketch_count).max(1)
    }
}

/// Everything the loop consumes besides the model.
pub struct TrainData {
    pub sketches: SketchSet,
    /// Original-domain training images, required when lambda_image > 0.
    pub images: Option<ArrayD<f64>>,
    /// Reference set for FID-based checkpoint selection.
    pub eval_ref: ArrayD<f64>,
    pub fx: FeatureExtractor,
}

/// Mutable state of one fine-tuning run.
pub struct TrainState {
    pub gen: GeneratorParams,
    /// Frozen pretrained values, the anchor of the weight regularizer.
    pub pretrained: ParamStore,
    pub d_x: Option<Discriminator>,
    pub d_y: Discriminator,
    pub mask: HashSet<String>,
    pub translator: SketchTranslator,
    pub translator_digest: String,
    pub iteration: u64,
    pub best: Option<(f64, u64)>,
    opt_g: Adam,
    opt_dx: Adam,
    opt_dy: Adam,
    rng: ChaCha8Rng,
}

/// Build the starting state from a source checkpoint.
pub fn init_from_pretrained(
    ckpt: &Checkpoint,
    cfg: &TrainConfig,
    translator: SketchTranslator,
) -> Result<TrainState> {
    cfg.validate()?;
    let gen = ckpt.generator.clone();
    let sketch_shape = translator.sketch_shape(gen.arch.output_shape);

    let d_x = ckpt.d_x.clone();
    if cfg.weights.lambda_image > 0.0 && d_x.is_none() {
        return Err(Error::Config(
            "lambda_image > 0 requires a source discriminator in the checkpoint".into(),
        ));
    }
    let d_y = match cfg.d_y_init {
        DYInit::Pretrained => match &d_x {
            Some(d) => d.with_input_channels(sketch_shape[0]),
            None => {
                return Err(Error::Config(
                    "d_y_init=pretrained requires a source discriminator; use d_y_init=scratch"
                        .into(),
                ))
            }
        },
        DYInit::Scratch => {
            let hidden = d_x.as_ref().map(|d| d.arch.hidden).unwrap_or(64);
            Discriminator::init(
                DiscArch {
                    input_shape: sketch_shape,
                    hidden,
                },
                cfg.seed.wrapping_add(0x5c7a7c4),
            )
        }
    };

    let mask = trainable_mask(&gen, cfg.variant);
    let translator_digest = translator.digest();
    Ok(TrainState {
        pretrained: gen.store.clone(),
        gen,
        d_x,
        d_y,
        mask,
        translator,
        translator_digest,
        iteration: 0,
        best: None,
        opt_g: Adam::new(cfg.lr, cfg.beta1, cfg.beta2),
        opt_dx: Adam::new(cfg.lr, cfg.beta1, cfg.beta2),
        opt_dy: Adam::new(cfg.lr, cfg.beta1, cfg.beta2),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    })
}

fn draw_z(rng: &mut ChaCha8Rng, n: usize, d_z: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d_z), |_| StandardNormal.sample(rng))
}

/// One of the eight symmetry angles of the toy ring.
fn rotation_angle(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(0..8) as f64 * std::f64::consts::FRAC_PI_4
}

/// Rotate a batch of 2-channel points [n, 2, 1, 1] by `theta`.
fn rotate_points_var(x: &Var, theta: f64) -> Var {
    assert_eq!(x.shape()[1], 2, "rotation augmentation expects 2-channel points");
    let n = x.shape()[0];
    let (c, s) = (theta.cos(), theta.sin());
    let rt = ndarray::arr2(&[[c, s], [-s, c]]).into_dyn();
    let flat = ad::reshape(x, &[n, 2]);
    ad::reshape(&ad::matmul(&flat, &Var::constant(rt)), x.shape())
}

/// Image-space adversarial pair, with optional shared-angle rotation applied
/// to both the real batch and the fake path. Returns the real batch as the
/// discriminator saw it, for the R1 penalty.
fn image_pair(
    gen_vars: &crate::nn::ParamVars,
    arch: &crate::model::ModelArch,
    d_x: &Discriminator,
    dx_vars: &crate::nn::ParamVars,
    z: &Var,
    x_real: &ArrayD<f64>,
    theta: Option<f64>,
) -> Result<(crate::loss::AdvPair, ArrayD<f64>)> {
    match theta {
        None => {
            let pair = image_loss(gen_vars, arch, d_x, dx_vars, z, &Var::constant(x_real.clone()))?;
            Ok((pair, x_real.clone()))
        }
        Some(t) => {
            let real_rot = rotate_points_var(&Var::constant(x_real.clone()), t)
                .value()
                .clone();
            let fake = rotate_points_var(&crate::model::generate_var(gen_vars, arch, z), t);
            let real_logits = d_x.forward_var(dx_vars, &Var::constant(real_rot.clone()));
            let fake_logits = d_x.forward_var(dx_vars, &fake);
            let (d_loss, g_loss) = crate::loss::softplus_gan_losses(&real_logits, &fake_logits)?;
            Ok((crate::loss::AdvPair { d_loss, g_loss }, real_rot))
        }
    }
}

fn batch_rows(pool: &ArrayD<f64>, idx: &[usize]) -> ArrayD<f64> {
    let mut shape = pool.shape().to_vec();
    shape[0] = idx.len();
    let mut out = ArrayD::zeros(IxDyn(&shape));
    for (row, &i) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), row)
            .assign(&pool.index_axis(Axis(0), i));
    }
    out
}

/// One alternating minimax step: discriminator ascent, then masked generator
/// descent. Returns the per-term telemetry.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &TrainData,
) -> Result<LossReport> {
    let b = effective_batch(cfg.batch_size, data.sketches.len());
    let d_z = state.gen.arch.d_z;
    let use_image = cfg.weights.lambda_image > 0.0;
    if use_image && data.images.is_none() {
        return Err(Error::Config(
            "lambda_image > 0 requires original-domain training images; \
             set lambda_image=0 to rely on weight regularization instead"
                .into(),
        ));
    }

    let side = {
        let s = state.translator.sketch_shape(state.gen.arch.output_shape);
        s[1].max(s[2])
    };
    let sketch_idx: Vec<usize> = (0..b)
        .map(|_| state.rng.gen_range(0..data.sketches.len()))
        .collect();
    let y_plain = data.sketches.batch(&sketch_idx);
    let real_offsets = draw_offsets(&cfg.aug, side, b, &mut state.rng);
    let fake_offsets_d = draw_offsets(&cfg.aug, side, b, &mut state.rng);
    let fake_offsets_g = draw_offsets(&cfg.aug, side, b, &mut state.rng);
    let y_real = shift_per_sample(&Var::constant(y_plain), &real_offsets)
        .value()
        .clone();

    let x_real = if use_image {
        let pool = data.images.as_ref().unwrap();
        let idx: Vec<usize> = (0..b)
            .map(|_| state.rng.gen_range(0..pool.shape()[0]))
            .collect();
        Some(batch_rows(pool, &idx))
    } else {
        None
    };

    let z_d = draw_z(&mut state.rng, b, d_z);
    let z_g = draw_z(&mut state.rng, b, d_z);

    let mut report = LossReport::default();

    // --- Discriminator ascent -------------------------------------------
    {
        let gen_vars = state.gen.store.bind(None);
        let dy_names: HashSet<String> = state.d_y.store.names().map(str::to_string).collect();
        let dy_vars = state.d_y.store.bind(Some(&dy_names));
        let sk = sketch_loss(
            &gen_vars,
            &state.gen.arch,
            &state.translator,
            &state.d_y,
            &dy_vars,
            &Var::constant(z_d.clone().into_dyn()),
            &Var::constant(y_real.clone()),
            cfg.aug.enabled.then_some(fake_offsets_d.as_slice()),
        )?;
        report.sketch_d = sk.d_loss.item();

        let theta_d = (use_image && cfg.image_rotation_aug).then(|| rotation_angle(&mut state.rng));
        let mut dx_bound = None;
        let mut x_real_seen = None;
        let img_pair = if use_image {
            let d_x = state.d_x.as_ref().unwrap();
            let dx_names: HashSet<String> = d_x.store.names().map(str::to_string).collect();
            let dx_vars = d_x.store.bind(Some(&dx_names));
            let (pair, seen) = image_pair(
                &gen_vars,
                &state.gen.arch,
                d_x,
                &dx_vars,
                &Var::constant(z_d.into_dyn()),
                x_real.as_ref().unwrap(),
                theta_d,
            )?;
            report.image_d = pair.d_loss.item();
            dx_bound = Some(dx_vars);
            x_real_seen = Some(seen);
            Some(pair)
        } else {
            None
        };

        let mut d_total = combine_d(
            &sk.d_loss,
            img_pair.as_ref().map(|p| &p.d_loss),
            &cfg.weights,
        );

        let r1_due = !cfg.lazy_r1 || state.iteration % LAZY_R1_INTERVAL == 0;
        let gamma_x = cfg.weights.r1_gamma;
        if r1_due {
            let scale = if cfg.lazy_r1 {
                LAZY_R1_INTERVAL as f64
            } else {
                1.0
            };
            if cfg.weights.r1_gamma > 0.0 {
                let r1y = ad::scale(
                    &r1_penalty(&state.d_y, &dy_vars, &y_real, cfg.weights.r1_gamma)?,
                    scale,
                );
                report.r1_y = r1y.item();
                d_total = ad::add(&d_total, &r1y);
            }
            if let (Some(dx_vars), Some(x)) = (&dx_bound, &x_real_seen) {
                if gamma_x > 0.0 {
                    let r1x = ad::scale(
                        &r1_penalty(state.d_x.as_ref().unwrap(), dx_vars, x, gamma_x)?,
                        scale,
                    );
                    report.r1_x = r1x.item();
                    d_total = ad::add(&d_total, &r1x);
                }
            }
        }

        check_finite(&report, state.iteration)?;
        let grads = backward(&d_total);
        let dy_grads = collect_param_grads(&grads, &dy_vars);
        state.opt_dy.step(&mut state.d_y.store, &dy_grads)?;
        if let Some(dx_vars) = &dx_bound {
            let dx_grads = collect_param_grads(&grads, dx_vars);
            state
                .opt_dx
                .step(&mut state.d_x.as_mut().unwrap().store, &dx_grads)?;
        }
    }

    // --- Generator descent (masked) -------------------------------------
    {
        let gen_vars = state.gen.store.bind(Some(&state.mask));
        let dy_vars = state.d_y.store.bind(None);
        let sk = sketch_loss(
            &gen_vars,
            &state.gen.arch,
            &state.translator,
            &state.d_y,
            &dy_vars,
            &Var::constant(z_g.clone().into_dyn()),
            &Var::constant(y_real),
            cfg.aug.enabled.then_some(fake_offsets_g.as_slice()),
        )?;
        report.sketch_g = sk.g_loss.item();

        let theta_g = (use_image && cfg.image_rotation_aug).then(|| rotation_angle(&mut state.rng));
        let img_g = if use_image {
            let d_x = state.d_x.as_ref().unwrap();
            let dx_vars = d_x.store.bind(None);
            let (pair, _) = image_pair(
                &gen_vars,
                &state.gen.arch,
                d_x,
                &dx_vars,
                &Var::constant(z_g.into_dyn()),
                x_real.as_ref().unwrap(),
                theta_g,
            )?;
            report.image_g = pair.g_loss.item();
            Some(pair.g_loss)
        } else {
            None
        };

        let wr = if cfg.weights.lambda_weight > 0.0 {
            let v = weight_reg_var(&gen_vars, &state.pretrained, &state.mask)?;
            report.weight_reg = v.item();
            Some(v)
        } else {
            None
        };

        check_finite(&report, state.iteration)?;
        let g_total = combine_g(&sk.g_loss, img_g.as_ref(), wr.as_ref(), &cfg.weights);
        let grads = collect_param_grads(&backward(&g_total), &gen_vars);
        state.opt_g.step(&mut state.gen.store, &grads)?;
    }

    state.iteration += 1;
    Ok(report)
}

/// Abort with the first non-finite objective term, if any.
fn check_finite(report: &LossReport, iteration: u64) -> Result<()> {
    if let Some(term) = report.non_finite_term() {
        let value = match term {
            "sketch_g" => report.sketch_g,
            "sketch_d" => report.sketch_d,
            "image_g" => report.image_g,
            "image_d" => report.image_d,
            "weight_reg" => report.weight_reg,
            "r1_x" => report.r1_x,
            _ => report.r1_y,
        };
        return Err(Error::NonFinite {
            term: term.to_string(),
            iteration,
            value,
        });
    }
    Ok(())
}

/// FID of `n` fresh generator samples against a reference set.
pub fn fid_of_generator(
    gen: &GeneratorParams,
    n: usize,
    seed: u64,
    eval_ref: &ArrayD<f64>,
    fx: &FeatureExtractor,
) -> Result<f64> {
    let z = crate::model::sample_latent(n, seed, gen.arch.d_z)?;
    let samples = crate::model::generate(gen, &z.values);
    fid(&samples, eval_ref, fx)
}

/// One recorded evaluation point.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iteration: u64,
    pub fid: f64,
}

/// Result of a full run.
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub best_fid: f64,
    pub best_iteration: u64,
    pub last: Checkpoint,
    pub series: Vec<EvalPoint>,
    pub reports: Vec<LossReport>,
}

fn snapshot(state: &TrainState) -> Checkpoint {
    let mut ckpt = Checkpoint::new(state.gen.clone());
    ckpt.iteration = state.iteration;
    ckpt.d_x = state.d_x.clone();
    ckpt.d_y = Some(state.d_y.clone());
    ckpt
}

/// Run the full loop with periodic FID evaluation, retaining the best
/// checkpoint. `on_report` observes every step's telemetry (for logging).
pub fn train_with_observer(
    ckpt: &Checkpoint,
    cfg: &TrainConfig,
    translator: SketchTranslator,
    data: &TrainData,
    mut on_report: impl FnMut(u64, &LossReport),
    mut on_eval: impl FnMut(&EvalPoint),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.eval_ref.shape()[0] < 2 {
        return Err(Error::Input(
            "evaluation reference set is missing or too small".into(),
        ));
    }
    if data.sketches.is_empty() {
        return Err(Error::Input("no exemplar sketches".into()));
    }
    let mut state = init_from_pretrained(ckpt, cfg, translator)?;
    let synthesis_digest_before = state.gen.synthesis_digest();
    let translator_digest_before = state.translator_digest.clone();

    let mut series = Vec::new();
    let mut reports = Vec::with_capacity(cfg.max_iters as usize);
    let mut best: Option<(f64, u64, Checkpoint)> = None;

    let evaluate = |state: &TrainState,
                        series: &mut Vec<EvalPoint>,
                        best: &mut Option<(f64, u64, Checkpoint)>,
                        on_eval: &mut dyn FnMut(&EvalPoint)|
     -> Result<()> {
        let f = fid_of_generator(
            &state.gen,
            cfg.eval_samples,
            cfg.seed ^ 0x9e3779b9,
            &data.eval_ref,
            &data.fx,
        )?;
        let point = EvalPoint {
            iteration: state.iteration,
            fid: f,
        };
        on_eval(&point);
        series.push(point);
        if best.as_ref().map_or(true, |(bf, _, _)| f < *bf) {
            *best = Some((f, state.iteration, snapshot(state)));
        }
        Ok(())
    };

    evaluate(&state, &mut series, &mut best, &mut on_eval)?;
    while state.iteration < cfg.max_iters {
        let report = train_step(&mut state, cfg, data)?;
        on_report(state.iteration, &report);
        reports.push(report);
        if state.iteration % cfg.eval_every == 0 || state.iteration == cfg.max_iters {
            evaluate(&state, &mut series, &mut best, &mut on_eval)?;
        }
    }

    // Frozen-parameter invariants hold for the entire run.
    debug_assert_eq!(state.gen.synthesis_digest(), synthesis_digest_before);
    if state.gen.synthesis_digest() != synthesis_digest_before
        || state.translator.digest() != translator_digest_before
    {
        return Err(Error::Numerical(
            "frozen parameters drifted during training".into(),
        ));
    }

    let (best_fid, best_iteration, best_ckpt) = best.unwrap();
    let mut state_best = best_ckpt;
    // Cache the mean latent on the retained checkpoints.
    let _ = state_best.w_avg_or_estimate(crate::model::W_AVG_SAMPLES, crate::model::W_AVG_SEED);
    let mut last = snapshot(&state);
    let _ = last.w_avg_or_estimate(crate::model::W_AVG_SAMPLES, crate::model::W_AVG_SEED);
    Ok(TrainOutcome {
        best: state_best,
        best_fid,
        best_iteration,
        last,
        series,
        reports,
    })
}

/// [`train_with_observer`] without logging hooks.
pub fn train(
    ckpt: &Checkpoint,
    cfg: &TrainConfig,
    translator: SketchTranslator,
    data: &TrainData,
) -> Result<TrainOutcome> {
    train_with_observer(ckpt, cfg, translator, data, |_, _| {}, |_| {})
}

// ---------------------------------------------------------------------------
// Source-model pretraining
// ---------------------------------------------------------------------------

/// Configuration of the plain GAN pretraining loop.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub iters: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub r1_gamma: f64,
    pub seed: u64,
    pub d_hidden: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            iters: 3_000,
            batch_size: 64,
            lr: 0.002,
            beta1: 0.0,
            beta2: 0.99,
            r1_gamma: 10.0,
            seed: 0,
            d_hidden: 64,
        }
    }
}

/// Train a source model from scratch (all parameters) against a sample pool,
/// returning its checkpoint (generator + discriminator).
pub fn pretrain(
    arch: crate::model::ModelArch,
    real_pool: &ArrayD<f64>,
    cfg: &PretrainConfig,
) -> Result<Checkpoint> {
    if real_pool.shape()[0] < cfg.batch_size {
        return Err(Error::Input(format!(
            "pretraining pool of {} smaller than batch size {}",
            real_pool.shape()[0],
            cfg.batch_size
        )));
    }
    let mut gen = GeneratorParams::init(arch.clone(), cfg.seed)?;
    let mut d = Discriminator::init(
        DiscArch {
            input_shape: arch.output_shape,
            hidden: cfg.d_hidden,
        },
        cfg.seed.wrapping_add(1),
    );
    let gen_names: HashSet<String> = gen.store.names().map(str::to_string).collect();
    let d_names: HashSet<String> = d.store.names().map(str::to_string).collect();
    let mut opt_g = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut opt_d = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let n_pool = real_pool.shape()[0];

    for it in 0..cfg.iters {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..n_pool))
            .collect();
        let x_real = batch_rows(real_pool, &idx);
        let z_d = draw_z(&mut rng, cfg.batch_size, arch.d_z);
        let z_g = draw_z(&mut rng, cfg.batch_size, arch.d_z);

        // Discriminator step.
        {
            let gen_vars = gen.store.bind(None);
            let d_vars = d.store.bind(Some(&d_names));
            let pair = image_loss(
                &gen_vars,
                &arch,
                &d,
                &d_vars,
                &Var::constant(z_d.into_dyn()),
                &Var::constant(x_real.clone()),
            )?;
            let mut d_total = pair.d_loss;
            if it % LAZY_R1_INTERVAL == 0 && cfg.r1_gamma > 0.0 {
                let r1 = ad::scale(
                    &r1_penalty(&d, &d_vars, &x_real, cfg.r1_gamma)?,
                    LAZY_R1_INTERVAL as f64,
                );
                d_total = ad::add(&d_total, &r1);
            }
            if !d_total.item().is_finite() {
                return Err(Error::NonFinite {
                    term: "pretrain_d".into(),
                    iteration: it,
                    value: d_total.item(),
                });
            }
            let grads = collect_param_grads(&backward(&d_total), &d_vars);
            opt_d.step(&mut d.store, &grads)?;
        }
        // Generator step (all parameters).
        {
            let gen_vars = gen.store.bind(Some(&gen_names));
            let d_vars = d.store.bind(None);
            let pair = image_loss(
                &gen_vars,
                &arch,
                &d,
                &d_vars,
                &Var::constant(z_g.into_dyn()),
                &Var::constant(x_real),
            )?;
            if !pair.g_loss.item().is_finite() {
                return Err(Error::NonFinite {
                    term: "pretrain_g".into(),
                    iteration: it,
                    value: pair.g_loss.item(),
                });
            }
            let grads = collect_param_grads(&backward(&pair.g_loss), &gen_vars);
            opt_g.step(&mut gen.store, &grads)?;
        }
    }

    let mut ckpt = Checkpoint::new(gen);
    ckpt.iteration = cfg.iters;
    ckpt.d_x = Some(d);
    let _ = ckpt.w_avg_or_estimate(crate::model::W_AVG_SAMPLES, crate::model::W_AVG_SEED);
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{points_to_samples, sample_ring, toy_sketch_set};
    use crate::model::toy_arch;

    fn toy_ckpt(seed: u64) -> Checkpoint {
        let gen = GeneratorParams::init(toy_arch(), seed).unwrap();
        let mut ckpt = Checkpoint::new(gen);
        ckpt.d_x = Some(Discriminator::init(
            DiscArch {
                input_shape: [2, 1, 1],
                hidden: 16,
            },
            seed.wrapping_add(1),
        ));
        ckpt
    }

    fn toy_data() -> TrainData {
        let sketches = toy_sketch_set(4, 3).unwrap();
        let images = points_to_samples(&sample_ring(256, 5, &(0..8).collect::<Vec<_>>()).unwrap());
        let eval_ref =
            points_to_samples(&sample_ring(128, 6, &crate::data::TOY_TARGET_MODES).unwrap());
        TrainData {
            sketches,
            images: Some(images),
            eval_ref,
            fx: FeatureExtractor::Identity,
        }
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            max_iters: 20,
            eval_every: 10,
            eval_samples: 64,
            ..Default::default()
        }
    }

    #[test]
    fn batch_size_rule() {
        assert_eq!(effective_batch(4, 1), 1);
        assert_eq!(effective_batch(4, 3), 1);
        assert_eq!(effective_batch(4, 4), 4);
        assert_eq!(effective_batch(4, 30), 4);
        assert_eq!(effective_batch(10, 6), 6);
    }

    #[test]
    fn pretrained_init_copies_discriminator() {
        let ckpt = toy_ckpt(1);
        let cfg = quick_cfg();
        let state =
            init_from_pretrained(&ckpt, &cfg, SketchTranslator::PointSquash).unwrap();
        assert_eq!(
            state.d_y.store.digest(),
            ckpt.d_x.as_ref().unwrap().store.digest()
        );
        assert_eq!(state.iteration, 0);
        assert!(state.best.is_none());

        let scratch_cfg = TrainConfig {
            d_y_init: DYInit::Scratch,
            ..quick_cfg()
        };
        let state2 =
            init_from_pretrained(&ckpt, &scratch_cfg, SketchTranslator::PointSquash).unwrap();
        assert_ne!(
            state2.d_y.store.digest(),
            ckpt.d_x.as_ref().unwrap().store.digest()
        );
    }

    #[test]
    fn missing_source_discriminator_is_a_config_error() {
        let mut ckpt = toy_ckpt(1);
        ckpt.d_x = None;
        let cfg = quick_cfg(); // lambda_image = 0.7 by default
        assert!(matches!(
            init_from_pretrained(&ckpt, &cfg, SketchTranslator::PointSquash),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn full_mapping_step_leaves_synthesis_untouched() {
        let ckpt = toy_ckpt(2);
        let cfg = quick_cfg();
        let data = toy_data();
        let mut state =
            init_from_pretrained(&ckpt, &cfg, SketchTranslator::PointSquash).unwrap();
        let synth_before = state.gen.synthesis_digest();
        let map_before = state
            .gen
            .store
            .digest_subset(&state.gen.mapping_names());
        for _ in 0..3 {
            train_step(&mut state, &cfg, &data).unwrap();
        }
        assert_eq!(state.gen.synthesis_digest(), synth_before);
        assert_ne!(
            state.gen.store.digest_subset(&state.gen.mapping_names()),
            map_before
        );
        assert_eq!(state.iteration, 3);
    }

    #[test]
    fn w_shift_variant_only_moves_the_shift() {
        let ckpt = toy_ckpt(7);
        let cfg = TrainConfig {
            variant: TrainVariant::WShift,
            ..quick_cfg()
        };
        let data = toy_data();
        let mut state =
            init_from_pretrained(&ckpt, &cfg, SketchTranslator::PointSquash).unwrap();
        let before: Vec<(String, String)> = state
            .gen
            .store
            .names()
            .filter(|n| *n != "mapping.w_shift")
            .map(|n| {
                let mut sub = HashSet::new();
                sub.insert(n.to_string());
                (n.to_string(), state.gen.store.digest_subset(&sub))
            })
            .collect();
        train_step(&mut state, &cfg, &data).unwrap();
        for (name, digest) in before {
            let mut sub = HashSet::new();
            sub.insert(name.clone());
            assert_eq!(
                state.gen.store.digest_subset(&sub),
                digest,
                "{name} moved under w-shift"
            );
        }
        let shift = state.gen.store.get("mapping.w_shift").unwrap();
        assert!(shift.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn sketch_only_training_leaves_d_x_untouched() {
        let ckpt = toy_ckpt(3);
        let cfg = TrainConfig {
            weights: LossWeights {
                lambda_image: 0.0,
                lambda_weight: 0.0,
                r1_gamma: 10.0,
            },
            ..quick_cfg()
        };
        let data = toy_data();
        let mut state =
            init_from_pretrained(&ckpt, &cfg, SketchTranslator::PointSquash).unwrap();
        let dx_before = state.d_x.as_ref().unwrap().store.digest();
        for _ in 0..2 {
            train_step(&mut state, &cfg, &data).unwrap();
        }
        assert_eq!(state.d_x.as_ref().unwrap().store.digest(), dx_before);
    }

    #[test]
    fn same_seed_same_config_is_bitwise_deterministic() {
        let ckpt = toy_ckpt(4);
        let cfg = quick_cfg();
        let data = toy_data();
        let run = || {
            let mut state =
                init_from_pretrained(&ckpt, &cfg, SketchTranslator::PointSquash).unwrap();
            for _ in 0..20 {
                train_step(&mut state, &cfg, &data).unwrap();
            }
            (
                state.gen.store.digest(),
                state.d_y.store.digest(),
                state.d_x.unwrap().store.digest(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_parameters_abort_with_the_offending_term() {
        let mut ckpt = toy_ckpt(5);
        let mut w = ckpt.generator.store.get("mapping.fc0.w").unwrap();
        w[[0, 0]] = f64::NAN;
        ckpt.generator.store.set("mapping.fc0.w", &w);
        let cfg = quick_cfg();
        let data = toy_data();
        let mut state =
            init_from_pretrained(&ckpt, &cfg, SketchTranslator::PointSquash).unwrap();
        match train_step(&mut state, &cfg, &data) {
            Err(Error::NonFinite { term, .. }) => {
                assert!(!term.is_empty());
            }
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn best_checkpoint_is_the_series_minimum() {
        let ckpt = toy_ckpt(6);
        let cfg = TrainConfig {
            max_iters: 40,
            eval_every: 20,
            eval_samples: 64,
            ..Default::default()
        };
        let data = toy_data();
        let out = train(&ckpt, &cfg, SketchTranslator::PointSquash, &data).unwrap();
        let min = out
            .series
            .iter()
            .map(|p| p.fid)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_fid, min);
        assert!(out
            .series
            .iter()
            .any(|p| p.iteration == out.best_iteration));
        assert_eq!(out.last.iteration, 40);
        assert_eq!(out.reports.len(), 40);
    }

    #[test]
    fn train_rejects_missing_inputs_before_looping() {
        let ckpt = toy_ckpt(8);
        let cfg = quick_cfg();
        let mut data = toy_data();
        data.eval_ref = ArrayD::zeros(IxDyn(&[1, 2, 1, 1]));
        assert!(train(&ckpt, &cfg, SketchTranslator::PointSquash, &data).is_err());

        let mut data = toy_data();
        data.sketches = SketchSet { samples: vec![] };
        assert!(train(&ckpt, &cfg, SketchTranslator::PointSquash, &data).is_err());

        let mut data = toy_data();
        data.images = None;
        assert!(matches!(
            train(&ckpt, &cfg, SketchTranslator::PointSquash, &data),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pretraining_is_deterministic_and_produces_a_complete_checkpoint() {
        let pool = points_to_samples(&sample_ring(256, 1, &(0..8).collect::<Vec<_>>()).unwrap());
        let cfg = PretrainConfig {
            iters: 10,
            batch_size: 16,
            ..Default::default()
        };
        let a = pretrain(toy_arch(), &pool, &cfg).unwrap();
        let b = pretrain(toy_arch(), &pool, &cfg).unwrap();
        assert_eq!(a.generator.store.digest(), b.generator.store.digest());
        assert!(a.d_x.is_some());
        assert!(a.w_avg.is_some());
        assert_eq!(a.iteration, 10);
    }
}
