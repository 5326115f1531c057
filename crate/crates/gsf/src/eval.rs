//! Quantitative evaluation: Fréchet feature distance (FID), perceptual path
//! length (PPL), improved precision/recall, exact Euclidean distance
//! transforms, symmetric chamfer distance, and evaluation-set curation by
//! chamfer retrieval.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::{generate, GeneratorParams};
use crate::nn::{he_normal, zeros, ParamStore, ParamVars};
use crate::sketch::{SketchSet, SketchTranslator};
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Ridge added to covariances estimated from too-few samples.
pub const COV_RIDGE: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

/// A small classifier whose penultimate activations serve as the feature
/// embedding behind FID/PPL at desk scale.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureNet {
    pub store: ParamStore,
    pub input_len: usize,
    pub dim: usize,
    pub classes: usize,
}

impl FeatureNet {
    pub fn init(input_len: usize, dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.insert("fx.fc0.w", he_normal(&mut rng, &[input_len, dim], input_len));
        store.insert("fx.fc0.b", zeros(&[dim]));
        store.insert("fx.head.w", he_normal(&mut rng, &[dim, classes], dim));
        store.insert("fx.head.b", zeros(&[classes]));
        FeatureNet {
            store,
            input_len,
            dim,
            classes,
        }
    }

    /// Tape forward to the class logits, for training.
    pub fn logits_var(&self, vars: &ParamVars, x: &Var) -> Var {
        use crate::autodiff as ad;
        let n = x.shape()[0];
        let flat = ad::reshape(x, &[n, self.input_len]);
        let h = ad::leaky_relu(
            &ad::add_bias(&ad::matmul(&flat, vars.get("fx.fc0.w")), vars.get("fx.fc0.b")),
            0.2,
        );
        ad::add_bias(&ad::matmul(&h, vars.get("fx.head.w")), vars.get("fx.head.b"))
    }

    /// Tape forward to the penultimate activations: [n, dim].
    pub fn features_var(&self, x: &Var) -> Var {
        use crate::autodiff as ad;
        let n = x.shape()[0];
        let vars = self.store.bind(None);
        let flat = ad::reshape(x, &[n, self.input_len]);
        ad::leaky_relu(
            &ad::add_bias(&ad::matmul(&flat, vars.get("fx.fc0.w")), vars.get("fx.fc0.b")),
            0.2,
        )
    }

    /// Penultimate activations: [n, dim].
    pub fn features(&self, x: &ArrayD<f64>) -> Array2<f64> {
        let n = x.shape()[0];
        let flat = flatten_samples(x);
        let w: Array2<f64> = self
            .store
            .get("fx.fc0.w")
            .unwrap()
            .into_dimensionality()
            .unwrap();
        let b: Array1<f64> = self
            .store
            .get("fx.fc0.b")
            .unwrap()
            .into_dimensionality()
            .unwrap();
        let mut h: Array2<f64> = flat.dot(&w) + &b;
        h.mapv_inplace(|v| if v >= 0.0 { v } else { 0.2 * v });
        debug_assert_eq!(h.nrows(), n);
        h
    }
}

/// Deterministic feature embedding, fixed across one comparison.
#[derive(Clone, Debug)]
pub enum FeatureExtractor {
    /// Raw flattened pixels; exact oracles build on this.
    Identity,
    /// Projection onto the leading principal components of a reference set.
    PixelPca { mean: Array1<f64>, basis: Array2<f64> },
    /// Penultimate layer of a pretrained classifier.
    Classifier(FeatureNet),
}

impl FeatureExtractor {
    pub fn kind_name(&self) -> &'static str {
        match self {
            FeatureExtractor::Identity => "identity",
            FeatureExtractor::PixelPca { .. } => "pixel-pca",
            FeatureExtractor::Classifier(_) => "pretrained-classifier",
        }
    }

    pub fn dimension(&self, sample_len: usize) -> usize {
        match self {
            FeatureExtractor::Identity => sample_len,
            FeatureExtractor::PixelPca { basis, .. } => basis.ncols(),
            FeatureExtractor::Classifier(net) => net.dim,
        }
    }

    /// Tape forward: sample batch [n, ...] to features [n, d], so losses can
    /// differentiate through the embedding (the embedding itself stays frozen).
    pub fn extract_var(&self, samples: &Var) -> Var {
        use crate::autodiff as ad;
        let n = samples.shape()[0];
        let len: usize = samples.shape()[1..].iter().product();
        match self {
            FeatureExtractor::Identity => ad::reshape(samples, &[n, len]),
            FeatureExtractor::PixelPca { mean, basis } => {
                let flat = ad::reshape(samples, &[n, len]);
                let centered = ad::sub(
                    &flat,
                    &ad::broadcast_rows(&Var::constant(mean.clone().into_dyn()), n),
                );
                ad::matmul(&centered, &Var::constant(basis.clone().into_dyn()))
            }
            FeatureExtractor::Classifier(net) => net.features_var(samples),
        }
    }

    /// Map a sample batch [n, ...] to features [n, d].
    pub fn extract(&self, samples: &ArrayD<f64>) -> Array2<f64> {
        match self {
            FeatureExtractor::Identity => flatten_samples(samples),
            FeatureExtractor::PixelPca { mean, basis } => {
                let flat = flatten_samples(samples);
                (&flat - &mean.view().insert_axis(Axis(0))).dot(basis)
            }
            FeatureExtractor::Classifier(net) => net.features(samples),
        }
    }
}

/// Fit a pixel-PCA extractor with `dim` components on a reference set.
pub fn fit_pixel_pca(reference: &ArrayD<f64>, dim: usize) -> Result<FeatureExtractor> {
    let flat = flatten_samples(reference);
    let (n, p) = (flat.nrows(), flat.ncols());
    if n < 2 {
        return Err(Error::Input("PCA needs at least two samples".into()));
    }
    let dim = dim.min(p);
    let mean = flat.mean_axis(Axis(0)).unwrap();
    let centered = &flat - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let m = DMatrix::from_fn(p, p, |i, j| cov[[i, j]]);
    let eig = m.symmetric_eigen();
    // Order eigenpairs by descending eigenvalue.
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = Array2::zeros((p, dim));
    for (col, &idx) in order.iter().take(dim).enumerate() {
        for row in 0..p {
            basis[[row, col]] = eig.eigenvectors[(row, idx)];
        }
    }
    Ok(FeatureExtractor::PixelPca { mean, basis })
}

fn flatten_samples(x: &ArrayD<f64>) -> Array2<f64> {
    let n = x.shape()[0];
    let len: usize = x.shape()[1..].iter().product();
    x.to_shape((n, len)).unwrap().to_owned()
}

// ---------------------------------------------------------------------------
// Fréchet distance / FID
// ---------------------------------------------------------------------------

/// Empirical Gaussian moments of a feature set.
#[derive(Clone, Debug)]
pub struct GaussianMoments {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

/// Moments with unbiased covariance; `ridge` is added to the diagonal.
pub fn moments(features: &Array2<f64>, ridge: f64) -> Result<GaussianMoments> {
    let (n, d) = (features.nrows(), features.ncols());
    if n < 2 {
        return Err(Error::Input("moments need at least two samples".into()));
    }
    let mean = features.mean_axis(Axis(0)).unwrap();
    let centered = features - &mean.view().insert_axis(Axis(0));
    let mut cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    for i in 0..d {
        cov[[i, i]] += ridge;
    }
    Ok(GaussianMoments { mean, cov })
}

/// Principal square root of a symmetric PSD matrix; small negative
/// eigenvalues are clamped to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(0.0f64, |a, b| a.max(b.abs()));
    if min_eig < -1e-6 * scale.max(1.0) {
        return Err(Error::Numerical(format!(
            "matrix square root of an indefinite matrix: min eigenvalue {min_eig}, max magnitude {scale}"
        )));
    }
    let sqrt_vals: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()).collect();
    let v = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(sqrt_vals));
    Ok(v * d * v.transpose())
}

/// Fréchet distance between two Gaussians:
/// |μa−μb|² + Tr(Σa + Σb − 2·(Σa Σb)^{1/2}), with the square root taken of
/// the symmetrized product √Σa · Σb · √Σa.
pub fn frechet_distance(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d || a.cov.nrows() != d || b.cov.nrows() != d {
        return Err(Error::Shape(format!(
            "moment dimension mismatch: {} vs {}",
            d,
            b.mean.len()
        )));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(b.mean.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let sa = DMatrix::from_fn(d, d, |i, j| a.cov[[i, j]]);
    let sb = DMatrix::from_fn(d, d, |i, j| b.cov[[i, j]]);
    let sqrt_a = sqrt_psd(&sa)?;
    let inner = &sqrt_a * &sb * &sqrt_a;
    let cross = sqrt_psd(&inner)?;
    let trace_term = sa.trace() + sb.trace() - 2.0 * cross.trace();
    Ok((mean_term + trace_term).max(0.0))
}

/// FID between two sample sets under one extractor.
pub fn fid(gen: &ArrayD<f64>, reference: &ArrayD<f64>, fx: &FeatureExtractor) -> Result<f64> {
    let gf = fx.extract(gen);
    let rf = fx.extract(reference);
    let d = gf.ncols();
    for n in [gf.nrows(), rf.nrows()] {
        if n <= d + 1 {
            eprintln!(
                "warning: {n} samples for {d}-dimensional moments; covariance is ridge-regularized"
            );
        }
    }
    let ma = moments(&gf, COV_RIDGE)?;
    let mb = moments(&rf, COV_RIDGE)?;
    frechet_distance(&ma, &mb)
}

// ---------------------------------------------------------------------------
// Perceptual path length
// ---------------------------------------------------------------------------

/// Spherical interpolation between two latent vectors.
pub fn slerp(z1: &Array1<f64>, z2: &Array1<f64>, t: f64) -> Array1<f64> {
    let n1 = z1.dot(z1).sqrt();
    let n2 = z2.dot(z2).sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return z1 * (1.0 - t) + &(z2 * t);
    }
    let cos = (z1.dot(z2) / (n1 * n2)).clamp(-1.0, 1.0);
    let theta = cos.acos();
    if theta < 1e-8 {
        return z1 * (1.0 - t) + &(z2 * t);
    }
    let s = theta.sin();
    z1 * (((1.0 - t) * theta).sin() / s) + &(z2 * ((t * theta).sin() / s))
}

/// PPL over explicit latent pairs and interpolation positions, generic over
/// the generator forward.
pub fn ppl_with_pairs<G>(
    forward: G,
    pairs: &[(Array1<f64>, Array1<f64>)],
    ts: &[f64],
    eps: f64,
    fx: &FeatureExtractor,
) -> Result<f64>
where
    G: Fn(&Array2<f64>) -> ArrayD<f64>,
{
    if pairs.is_empty() || pairs.len() != ts.len() {
        return Err(Error::Input("PPL needs one t per latent pair".into()));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("ppl eps must be positive, got {eps}")));
    }
    let d_z = pairs[0].0.len();
    let n = pairs.len();
    let mut z_lo = Array2::zeros((n, d_z));
    let mut z_hi = Array2::zeros((n, d_z));
    for (i, ((z1, z2), &t)) in pairs.iter().zip(ts).enumerate() {
        z_lo.row_mut(i).assign(&slerp(z1, z2, t));
        z_hi.row_mut(i).assign(&slerp(z1, z2, t + eps));
    }
    let f_lo = fx.extract(&forward(&z_lo));
    let f_hi = fx.extract(&forward(&z_hi));
    let mut total = 0.0;
    for i in 0..n {
        let diff = &f_hi.row(i) - &f_lo.row(i);
        total += diff.dot(&diff) / (eps * eps);
    }
    Ok(total / n as f64)
}

/// Perceptual path length of a generator: mean squared feature-space speed
/// along spherical latent interpolations. `endpoints_only` samples t from
/// {0, 1} instead of U(0, 1).
pub fn ppl(
    g: &GeneratorParams,
    n: usize,
    eps: f64,
    seed: u64,
    fx: &FeatureExtractor,
    endpoints_only: bool,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Input("PPL needs at least one pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_z = g.arch.d_z;
    let mut pairs = Vec::with_capacity(n);
    let mut ts = Vec::with_capacity(n);
    for _ in 0..n {
        let z1 = Array1::from_shape_fn(d_z, |_| StandardNormal.sample(&mut rng));
        let z2 = Array1::from_shape_fn(d_z, |_| StandardNormal.sample(&mut rng));
        pairs.push((z1, z2));
        let t: f64 = if endpoints_only {
            if rng.gen::<bool>() {
                1.0 - eps
            } else {
                0.0
            }
        } else {
            rng.gen::<f64>() * (1.0 - eps)
        };
        ts.push(t);
    }
    ppl_with_pairs(|z| generate(g, z), &pairs, &ts, eps, fx)
}

// ---------------------------------------------------------------------------
// Improved precision / recall
// ---------------------------------------------------------------------------

fn pairwise_dist(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, m) = (a.nrows(), b.nrows());
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let diff = &a.row(i) - &b.row(j);
            out[[i, j]] = diff.dot(&diff).sqrt();
        }
    }
    out
}

/// Distance to the k-th nearest neighbor within one set (self excluded).
fn knn_radii(feats: &Array2<f64>, k: usize) -> Vec<f64> {
    let d = pairwise_dist(feats, feats);
    let n = feats.nrows();
    (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d[[i, j]]).collect();
            row.sort_by(f64::total_cmp);
            row[k - 1]
        })
        .collect()
}

/// Improved precision/recall: a point lies on a manifold if it falls inside
/// any reference point's k-NN ball.
pub fn precision_recall(
    gen_feats: &Array2<f64>,
    real_feats: &Array2<f64>,
    k: usize,
) -> Result<(f64, f64)> {
    let (ng, nr) = (gen_feats.nrows(), real_feats.nrows());
    if k == 0 || k >= ng || k >= nr {
        return Err(Error::Input(format!(
            "k must satisfy 0 < k < set size; got k={k}, sizes ({ng}, {nr})"
        )));
    }
    let real_radii = knn_radii(real_feats, k);
    let gen_radii = knn_radii(gen_feats, k);
    let cross = pairwise_dist(gen_feats, real_feats);
    let precision = (0..ng)
        .filter(|&i| (0..nr).any(|j| cross[[i, j]] <= real_radii[j]))
        .count() as f64
        / ng as f64;
    let recall = (0..nr)
        .filter(|&j| (0..ng).any(|i| cross[[i, j]] <= gen_radii[i]))
        .count() as f64
        / nr as f64;
    Ok((precision, recall))
}

// ---------------------------------------------------------------------------
// Distance transform / chamfer
// ---------------------------------------------------------------------------

/// Exact Euclidean distance transform: per-pixel distance to the nearest
/// foreground (> 0.5) pixel, via the two-pass lower-envelope algorithm on
/// squared distances.
pub fn distance_transform(mask: &Array2<f64>) -> Result<Array2<f64>> {
    let (h, w) = mask.dim();
    if !mask.iter().any(|&v| v > 0.5) {
        return Err(Error::Input("distance transform of an empty mask".into()));
    }
    const INF: f64 = 1e18;
    let mut sq = Array2::from_elem((h, w), INF);
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] > 0.5 {
                sq[[y, x]] = 0.0;
            }
        }
    }
    // Columns, then rows.
    for x in 0..w {
        let col: Vec<f64> = (0..h).map(|y| sq[[y, x]]).collect();
        let out = dt_1d(&col);
        for y in 0..h {
            sq[[y, x]] = out[y];
        }
    }
    for y in 0..h {
        let row: Vec<f64> = (0..w).map(|x| sq[[y, x]]).collect();
        let out = dt_1d(&row);
        for x in 0..w {
            sq[[y, x]] = out[x];
        }
    }
    Ok(sq.mapv(f64::sqrt))
}

/// 1-D squared-distance transform of sampled function f (lower envelope of
/// parabolas).
fn dt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n]; // parabola apexes
    let mut z = vec![0.0f64; n + 1]; // boundaries
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut out = vec![0.0f64; n];
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        out[q] = d * d + f[p];
    }
    out
}

fn as_grid(sketch: &ArrayD<f64>) -> Array2<f64> {
    let shape = sketch.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    Array2::from_shape_fn((h, w), |(y, x)| {
        // Collapse any leading channel axis by max.
        let mut m = f64::NEG_INFINITY;
        let lead: usize = shape[..shape.len() - 2].iter().product::<usize>().max(1);
        let flat = sketch.as_slice().unwrap();
        for c in 0..lead {
            m = m.max(flat[(c * h + y) * w + x]);
        }
        m
    })
}

/// Symmetric chamfer distance d(a,b) + d(b,a), where d(p,q) is the mean over
/// foreground pixels of p of the distance to q's nearest foreground pixel.
pub fn chamfer_sketch_distance(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64> {
    let ga = as_grid(a);
    let gb = as_grid(b);
    let directed = |p: &Array2<f64>, q: &Array2<f64>| -> Result<f64> {
        let dt = distance_transform(q)?;
        let mut total = 0.0;
        let mut count = 0usize;
        for ((y, x), &v) in p.indexed_iter() {
            if v > 0.5 {
                total += dt[[y, x]];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Input("chamfer distance of an empty sketch".into()));
        }
        Ok(total / count as f64)
    };
    Ok(directed(&ga, &gb)? + directed(&gb, &ga)?)
}

// ---------------------------------------------------------------------------
// Evaluation-set curation
// ---------------------------------------------------------------------------

/// A curated evaluation set with provenance metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSet {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    /// How the final `keep` subset was chosen from the `pool`.
    pub curation: String,
}

/// Score candidates by min-over-sketches chamfer distance of their translated
/// sketch, keep the best `pool`, then the best `keep` of those (a
/// deterministic stand-in for hand-selection). Ties break by candidate index.
/// Candidates whose translation is empty score +inf and are never selected.
pub fn curate_eval_set(
    candidates: &ArrayD<f64>,
    sketches: &SketchSet,
    pool: usize,
    keep: usize,
    translator: &SketchTranslator,
) -> Result<EvalSet> {
    let n = candidates.shape()[0];
    if keep > pool {
        return Err(Error::Config(format!(
            "keep ({keep}) must not exceed pool ({pool})"
        )));
    }
    if n < keep {
        return Err(Error::Input(format!(
            "only {n} candidates for keep={keep}"
        )));
    }
    if sketches.is_empty() {
        return Err(Error::Input("no sketches to score against".into()));
    }
    let translated = translator.translate(candidates);
    let mut scored: Vec<(usize, f64)> = (0..n)
        .map(|i| {
            let s = translated
                .index_axis(Axis(0), i)
                .to_owned()
                .into_dyn()
                .mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
            let mut best = f64::INFINITY;
            for sk in &sketches.samples {
                match chamfer_sketch_distance(&s, sk) {
                    Ok(d) => best = best.min(d),
                    Err(_) => {} // empty translation: leave at +inf
                }
            }
            (i, best)
        })
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let pooled: Vec<(usize, f64)> = scored.into_iter().take(pool.min(n)).collect();
    let kept: Vec<(usize, f64)> = pooled.into_iter().take(keep).collect();
    Ok(EvalSet {
        indices: kept.iter().map(|&(i, _)| i).collect(),
        scores: kept.iter().map(|&(_, s)| s).collect(),
        curation: "deterministic-top-k".to_string(),
    })
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// One full evaluation snapshot.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: f64,
    pub ppl: f64,
    pub precision: f64,
    pub recall: f64,
    pub chamfer_mean: f64,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let bounded = (0.0..=1.0).contains(&self.precision)
            && (0.0..=1.0).contains(&self.recall);
        let non_neg = self.fid >= 0.0 && self.ppl >= 0.0 && self.chamfer_mean >= 0.0;
        if !bounded || !non_neg {
            return Err(Error::Numerical(format!("invalid evaluation report: {self:?}")));
        }
        Ok(())
    }
}

/// Mean over samples of the min-over-sketches chamfer distance of their
/// translated, binarized sketches. Empty translations count as the image
/// diagonal (a bounded worst case).
pub fn mean_min_chamfer(
    samples: &ArrayD<f64>,
    sketches: &SketchSet,
    translator: &SketchTranslator,
) -> Result<f64> {
    let n = samples.shape()[0];
    if n == 0 || sketches.is_empty() {
        return Err(Error::Input("empty sample or sketch set".into()));
    }
    let translated = translator.translate(samples);
    let shape = translated.shape().to_vec();
    let diag = (((shape[shape.len() - 2] * shape[shape.len() - 2]
        + shape[shape.len() - 1] * shape[shape.len() - 1]) as f64)
        .sqrt())
        * 2.0;
    let mut total = 0.0;
    for i in 0..n {
        let s = translated
            .index_axis(Axis(0), i)
            .to_owned()
            .into_dyn()
            .mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let mut best = f64::INFINITY;
        for sk in &sketches.samples {
            if let Ok(d) = chamfer_sketch_distance(&s, sk) {
                best = best.min(d);
            }
        }
        total += if best.is_finite() { best } else { diag };
    }
    Ok(total / n as f64)
}
