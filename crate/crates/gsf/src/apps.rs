//! Downstream uses of a customized generator: latent interpolation,
//! direction discovery and editing, image projection, and side-by-side
//! transfer between the source model and its customized variant.
//!
//! Everything here exploits the same structural fact: customization only
//! retrains the mapping network, so the two models share a synthesis path and
//! one W-space. Directions found on the source model apply verbatim to the
//! customized one, and a z projected under either model can be fed to both.

use indexmap::IndexMap;
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayD, Axis};

use crate::autodiff as ad;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::eval::{slerp, FeatureExtractor};
use crate::model::{
    estimate_w_mean, generate_var, map_latent, sample_latent, synthesize, truncate_batch,
    GeneratorParams, W_AVG_SAMPLES, W_AVG_SEED,
};
use crate::nn::{Adam, ParamStore};

/// Default w-sample count for direction discovery.
pub const DISCOVERY_SAMPLES: usize = 10_000;
/// Projection defaults: restarts and gradient steps per restart.
pub const PROJECT_RESTARTS: usize = 3;
pub const PROJECT_ITERS: u64 = 500;
const PROJECT_LR: f64 = 0.05;

// ---------------------------------------------------------------------------
// Interpolation
// ---------------------------------------------------------------------------

/// Images along the spherical path from z1 to z2: `steps` evenly spaced
/// points, truncated at `psi` around the model's estimated W mean.
pub fn interpolate(
    g: &GeneratorParams,
    z1: &Array1<f64>,
    z2: &Array1<f64>,
    steps: usize,
    psi: f64,
) -> Result<ArrayD<f64>> {
    if steps < 2 {
        return Err(Error::Config(format!(
            "interpolation needs at least 2 steps, got {steps}"
        )));
    }
    if z1.len() != g.arch.d_z || z2.len() != g.arch.d_z {
        return Err(Error::Config("endpoint dimension does not match d_z".into()));
    }
    let mut z = Array2::zeros((steps, g.arch.d_z));
    for i in 0..steps {
        let t = i as f64 / (steps - 1) as f64;
        z.row_mut(i).assign(&slerp(z1, z2, t));
    }
    let w = map_latent(g, &z);
    let w_avg = estimate_w_mean(g, W_AVG_SAMPLES, W_AVG_SEED)?;
    Ok(synthesize(g, &truncate_batch(&w, &w_avg, psi)))
}

/// Mean pixel L2 distance between consecutive frames of a sequence,
/// the raw-pixel smoothness statistic reported alongside PPL.
pub fn mean_step_delta(frames: &ArrayD<f64>) -> f64 {
    let n = frames.shape()[0];
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 1..n {
        let a = frames.index_axis(Axis(0), i);
        let b = frames.index_axis(Axis(0), i - 1);
        total += (&a.to_owned() - &b.to_owned())
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
    }
    total / (n - 1) as f64
}

// ---------------------------------------------------------------------------
// Direction discovery and editing
// ---------------------------------------------------------------------------

/// A unit direction in W space, ordered by explained variance.
#[derive(Clone, Debug)]
pub struct LatentDirection {
    pub vector: Array1<f64>,
    /// Principal-component index, 0 = largest variance.
    pub rank: usize,
    pub eigenvalue: f64,
}

/// Principal directions of a w sample matrix, descending eigenvalue, each
/// unit-norm with its first nonzero coordinate positive.
pub fn principal_directions(w: &Array2<f64>, k: usize) -> Result<Vec<LatentDirection>> {
    let (n, d) = (w.nrows(), w.ncols());
    if k == 0 || k > d {
        return Err(Error::Config(format!(
            "need 1 <= k <= d_w ({d}), got {k}"
        )));
    }
    if n < 2 {
        return Err(Error::Input("direction discovery needs >= 2 samples".into()));
    }
    let mean = w.mean_axis(Axis(0)).unwrap();
    let centered = w - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let eig = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]).symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut out = Vec::with_capacity(k);
    for (rank, &idx) in order.iter().take(k).enumerate() {
        let mut v = Array1::from_iter((0..d).map(|row| eig.eigenvectors[(row, idx)]));
        let norm = v.dot(&v).sqrt();
        v /= norm;
        // Deterministic sign: first coordinate of meaningful magnitude wins.
        if let Some(&lead) = v.iter().find(|x| x.abs() > 1e-12) {
            if lead < 0.0 {
                v.mapv_inplace(|x| -x);
            }
        }
        out.push(LatentDirection {
            vector: v,
            rank,
            eigenvalue: eig.eigenvalues[idx],
        });
    }
    Ok(out)
}

/// GANSpace-style discovery: PCA over `n` mapped w samples.
pub fn discover_directions(
    g: &GeneratorParams,
    n: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<LatentDirection>> {
    if n < k {
        return Err(Error::Config(format!("need n ({n}) >= k ({k})")));
    }
    let z = sample_latent(n, seed, g.arch.d_z)?;
    principal_directions(&map_latent(g, &z.values), k)
}

/// w + magnitude · direction.
pub fn apply_edit(
    w: &Array1<f64>,
    direction: &LatentDirection,
    magnitude: f64,
) -> Result<Array1<f64>> {
    if w.len() != direction.vector.len() {
        return Err(Error::Config(format!(
            "edit dimension {} does not match w dimension {}",
            direction.vector.len(),
            w.len()
        )));
    }
    Ok(w + &(&direction.vector * magnitude))
}

// ---------------------------------------------------------------------------
// Projection
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Projection {
    pub z: Array1<f64>,
    /// G(z*), shape [C, H, W].
    pub reconstruction: ArrayD<f64>,
    pub loss: f64,
}

fn projection_loss(
    g: &GeneratorParams,
    fx: &FeatureExtractor,
    target: &ArrayD<f64>,
    target_feat: &Array2<f64>,
    z: &Var,
) -> (Var, Var) {
    let vars = g.store.bind(None);
    let x = generate_var(&vars, &g.arch, z);
    let pixel = ad::mean(&ad::sqr(&ad::sub(
        &x,
        &Var::constant(target.clone().insert_axis(Axis(0))),
    )));
    let feat = ad::mean(&ad::sqr(&ad::sub(
        &fx.extract_var(&x),
        &Var::constant(target_feat.clone().into_dyn()),
    )));
    (ad::add(&pixel, &feat), x)
}

/// Recover a latent whose synthesis matches `target`: gradient descent on z
/// under pixel + feature reconstruction loss, best of `restarts` independent
/// starts kept. Zero iterations degenerate to the best initial sample.
pub fn project_image(
    g: &GeneratorParams,
    fx: &FeatureExtractor,
    target: &ArrayD<f64>,
    restarts: usize,
    iters: u64,
    seed: u64,
) -> Result<Projection> {
    if target.shape() != g.arch.output_shape {
        return Err(Error::Config(format!(
            "target shape {:?} does not match generator output {:?}",
            target.shape(),
            g.arch.output_shape
        )));
    }
    if restarts == 0 {
        return Err(Error::Config("projection needs at least one restart".into()));
    }
    let target_feat = fx.extract(&target.clone().insert_axis(Axis(0)));

    let mut best: Option<Projection> = None;
    for r in 0..restarts {
        let z0 = sample_latent(1, seed.wrapping_add(r as u64), g.arch.d_z)?;
        let mut store = ParamStore::new();
        store.insert("z", z0.values.into_dyn());
        let mut opt = Adam::new(PROJECT_LR, 0.9, 0.999);
        for i in 0..iters {
            // Rebuild the tape each step with the current z as a leaf.
            let z_var = Var::leaf(store.get("z").unwrap());
            let (loss, _) = projection_loss(g, fx, target, &target_feat, &z_var);
            if !loss.item().is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite projection loss at restart {r}, step {i}"
                )));
            }
            let grads = ad::backward(&loss);
            let mut named = IndexMap::new();
            named.insert("z".to_string(), grads.wrt_or_zeros(&z_var));
            opt.step(&mut store, &named)?;
        }
        let z_var = Var::leaf(store.get("z").unwrap());
        let (loss_var, x_var) = projection_loss(g, fx, target, &target_feat, &z_var);
        let loss = loss_var.item();
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite projection loss at restart {r} (final)"
            )));
        }
        if best.as_ref().map_or(true, |b| loss < b.loss) {
            let z = store
                .get("z")
                .unwrap()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .row(0)
                .to_owned();
            best = Some(Projection {
                z,
                reconstruction: x_var.value().index_axis(Axis(0), 0).to_owned(),
                loss,
            });
        }
    }
    Ok(best.expect("restarts >= 1"))
}

// ---------------------------------------------------------------------------
// Cross-model transfer
// ---------------------------------------------------------------------------

/// Feed one z to the source model and its customized variant, returning the
/// pair (original(z), customized(z)) for side-by-side display.
pub fn cross_model_transfer(
    z: &Array1<f64>,
    original: &GeneratorParams,
    customized: &GeneratorParams,
) -> Result<(ArrayD<f64>, ArrayD<f64>)> {
    if original.arch.d_z != customized.arch.d_z
        || original.arch.output_shape != customized.arch.output_shape
        || original.arch.synthesis != customized.arch.synthesis
    {
        return Err(Error::Config(
            "transfer requires matching latent dimension and synthesis architecture".into(),
        ));
    }
    if z.len() != original.arch.d_z {
        return Err(Error::Config("z dimension does not match d_z".into()));
    }
    let zb = z.clone().insert_axis(Axis(0)).to_owned();
    let a = crate::model::generate(original, &zb);
    let b = crate::model::generate(customized, &zb);
    Ok((
        a.index_axis(Axis(0), 0).to_owned(),
        b.index_axis(Axis(0), 0).to_owned(),
    ))
}
