//! Training objectives: the cross-domain adversarial loss on sketches, the
//! image-space adversarial regularizer, L1 weight regularization, the R1
//! gradient penalty, and their weighted combination.
//!
//! All losses are built on the tape, so one backward pass yields gradients
//! for whichever parameters the caller bound as trainable.

use crate::autodiff as ad;
use crate::autodiff::{backward, Gradients, Var};
use crate::error::{Error, Result};
use crate::model::{generate_var, Discriminator, ModelArch};
use crate::nn::{ParamStore, ParamVars};
use crate::sketch::{shift_per_sample, SketchTranslator};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// Relative weights of the objective terms.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_image: f64,
    pub lambda_weight: f64,
    pub r1_gamma: f64,
}

/// Documented search space for the image-term weight.
pub const LAMBDA_IMAGE_CHOICES: [f64; 4] = [0.3, 0.5, 0.7, 1.0];
/// Documented search space for the weight-regularization term.
pub const LAMBDA_WEIGHT_CHOICES: [f64; 6] = [0.1, 1.0, 10.0, 50.0, 100.0, 1000.0];

/// When R1 is applied lazily, it runs every this many discriminator steps,
/// scaled up to keep the same expected strength.
pub const LAZY_R1_INTERVAL: u64 = 16;

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_image: 0.7,
            lambda_weight: 0.0,
            r1_gamma: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss.lambda_image", self.lambda_image),
            ("loss.lambda_weight", self.lambda_weight),
            ("loss.r1_gamma", self.r1_gamma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-step telemetry: the value of every loss term.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub sketch_g: f64,
    pub sketch_d: f64,
    pub image_g: f64,
    pub image_d: f64,
    pub weight_reg: f64,
    pub r1_x: f64,
    pub r1_y: f64,
}

impl LossReport {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        let terms = [
            ("sketch_g", self.sketch_g),
            ("sketch_d", self.sketch_d),
            ("image_g", self.image_g),
            ("image_d", self.image_d),
            ("weight_reg", self.weight_reg),
            ("r1_x", self.r1_x),
            ("r1_y", self.r1_y),
        ];
        terms.iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

/// Non-saturating adversarial losses in softplus form.
///
/// `d_loss = mean softplus(-real) + mean softplus(fake)`,
/// `g_loss = mean softplus(-fake)`.
pub fn softplus_gan_losses(real_logits: &Var, fake_logits: &Var) -> Result<(Var, Var)> {
    if real_logits.value().is_empty() || fake_logits.value().is_empty() {
        return Err(Error::Input("empty logit batch".into()));
    }
    let d_loss = ad::add(
        &ad::mean(&ad::softplus(&ad::neg(real_logits))),
        &ad::mean(&ad::softplus(fake_logits)),
    );
    let g_loss = ad::mean(&ad::softplus(&ad::neg(fake_logits)));
    Ok((d_loss, g_loss))
}

/// A discriminator/generator loss pair sharing one forward graph.
pub struct AdvPair {
    pub d_loss: Var,
    pub g_loss: Var,
}

/// Cross-domain adversarial loss: D_Y compares real sketches against
/// translated generator output F(G(z)). `fake_offsets`, when present, applies
/// the translation augmentation to the fake sketches inside the graph (the
/// caller augments the real batch symmetrically).
pub fn sketch_loss(
    gen_vars: &ParamVars,
    arch: &ModelArch,
    translator: &SketchTranslator,
    d_y: &Discriminator,
    d_y_vars: &ParamVars,
    z: &Var,
    y_real: &Var,
    fake_offsets: Option<&[(i64, i64)]>,
) -> Result<AdvPair> {
    let image = generate_var(gen_vars, arch, z);
    let mut fake = translator.translate_var(&image);
    if let Some(offsets) = fake_offsets {
        fake = shift_per_sample(&fake, offsets);
    }
    let real_logits = d_y.forward_var(d_y_vars, y_real);
    let fake_logits = d_y.forward_var(d_y_vars, &fake);
    let (d_loss, g_loss) = softplus_gan_losses(&real_logits, &fake_logits)?;
    Ok(AdvPair { d_loss, g_loss })
}

/// Image-space adversarial regularizer: D_X compares original-domain training
/// images against raw generator output. Same functional, no translator.
pub fn image_loss(
    gen_vars: &ParamVars,
    arch: &ModelArch,
    d_x: &Discriminator,
    d_x_vars: &ParamVars,
    z: &Var,
    x_real: &Var,
) -> Result<AdvPair> {
    let fake = generate_var(gen_vars, arch, z);
    let real_logits = d_x.forward_var(d_x_vars, x_real);
    let fake_logits = d_x.forward_var(d_x_vars, &fake);
    let (d_loss, g_loss) = softplus_gan_losses(&real_logits, &fake_logits)?;
    Ok(AdvPair { d_loss, g_loss })
}

/// Eager L1 distance between two parameter stores with identical layouts.
pub fn weight_reg(theta_prime: &ParamStore, theta: &ParamStore) -> Result<f64> {
    let a_names: Vec<&str> = theta_prime.names().collect();
    let b_names: Vec<&str> = theta.names().collect();
    if a_names.len() != b_names.len()
        || a_names.iter().any(|n| !theta.contains(n))
    {
        return Err(Error::Input(
            "weight regularization requires identical parameter name sets".into(),
        ));
    }
    let mut total = 0.0;
    for name in a_names {
        let a = theta_prime.get(name).unwrap();
        let b = theta.get(name).unwrap();
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "parameter {name} changed shape: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        total += (&a - &b).mapv(f64::abs).sum();
    }
    Ok(total)
}

/// Tape version of the L1 penalty over the `names` subset, anchored at the
/// frozen `reference` values.
pub fn weight_reg_var(
    bound: &ParamVars,
    reference: &ParamStore,
    names: &HashSet<String>,
) -> Result<Var> {
    let mut ordered: Vec<&String> = names.iter().collect();
    ordered.sort();
    let mut total = Var::scalar(0.0);
    for name in ordered {
        let anchor = reference.get(name).ok_or_else(|| {
            Error::Input(format!("no reference value for parameter {name}"))
        })?;
        let current = bound.get(name);
        if anchor.shape() != current.shape() {
            return Err(Error::Shape(format!(
                "parameter {name} changed shape: {:?} vs {:?}",
                current.shape(),
                anchor.shape()
            )));
        }
        let diff = ad::sub(current, &Var::constant(anchor));
        total = ad::add(&total, &ad::sum(&ad::abs(&diff)));
    }
    Ok(total)
}

/// R1 gradient penalty for an arbitrary differentiable critic:
/// (γ/2) · mean over the batch of ‖∇_x critic(x)‖².
pub fn r1_penalty_with<F>(critic: F, real: &ArrayD<f64>, gamma: f64) -> Result<Var>
where
    F: Fn(&Var) -> Var,
{
    if gamma < 0.0 {
        return Err(Error::Config(format!(
            "loss.r1_gamma must be non-negative, got {gamma}"
        )));
    }
    if gamma == 0.0 {
        return Ok(Var::scalar(0.0));
    }
    let n = real.shape()[0] as f64;
    let x = Var::leaf(real.clone());
    let out = ad::sum(&critic(&x));
    let grads = backward(&out);
    match grads.wrt(&x) {
        Some(g) => Ok(ad::scale(&ad::sum(&ad::sqr(g)), gamma / (2.0 * n))),
        None => Ok(Var::scalar(0.0)),
    }
}

/// R1 penalty of a discriminator at a real batch. The returned value stays
/// connected to the bound discriminator parameters, so differentiating it
/// again yields their penalty gradients.
pub fn r1_penalty(
    d: &Discriminator,
    d_vars: &ParamVars,
    real: &ArrayD<f64>,
    gamma: f64,
) -> Result<Var> {
    r1_penalty_with(|x| d.forward_var(d_vars, x), real, gamma)
}

/// Weighted totals over a populated report; disabled terms contribute zero.
pub fn full_objective(report: &LossReport, weights: &LossWeights) -> (f64, f64) {
    let g_total = report.sketch_g
        + weights.lambda_image * report.image_g
        + weights.lambda_weight * report.weight_reg;
    let d_total =
        report.sketch_d + weights.lambda_image * report.image_d + report.r1_x + report.r1_y;
    (g_total, d_total)
}

/// Tape combination of the generator terms.
pub fn combine_g(
    sketch_g: &Var,
    image_g: Option<&Var>,
    weight_reg: Option<&Var>,
    weights: &LossWeights,
) -> Var {
    let mut total = sketch_g.clone();
    if let Some(ig) = image_g {
        total = ad::add(&total, &ad::scale(ig, weights.lambda_image));
    }
    if let Some(wr) = weight_reg {
        total = ad::add(&total, &ad::scale(wr, weights.lambda_weight));
    }
    total
}

/// Tape combination of the discriminator terms. R1 terms carry their γ and
/// lazy scaling already.
pub fn combine_d(sketch_d: &Var, image_d: Option<&Var>, weights: &LossWeights) -> Var {
    match image_d {
        Some(id) => ad::add(sketch_d, &ad::scale(id, weights.lambda_image)),
        None => sketch_d.clone(),
    }
}

/// Collect gradient arrays for every bound parameter the backward pass
/// reached. Constants are absent by construction.
pub fn collect_param_grads(
    grads: &Gradients,
    vars: &ParamVars,
) -> IndexMap<String, ArrayD<f64>> {
    let mut out = IndexMap::new();
    for (name, var) in vars.iter() {
        if let Some(g) = grads.wrt(var) {
            out.insert(name.to_string(), g.value().clone());
        }
    }
    out
}

/// Zero gradient array for shape bookkeeping in tests.
pub fn zeros_like(a: &ArrayD<f64>) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(a.shape()))
}
