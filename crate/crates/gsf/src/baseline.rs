//! Latent-shift customization baselines and the ablation grid.
//!
//! The baselines customize without touching any weight: sample the source
//! model, keep the samples that best match the exemplar sketches under a
//! retrieval criterion, and shift every future w by the difference between the
//! matched mean and the overall mean. The synthesis path stays byte-identical,
//! so the result is exactly a constant W-space offset.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD, Axis};

use crate::error::{Error, Result};
use crate::eval::{chamfer_sketch_distance, FeatureExtractor};
use crate::model::{map_latent, sample_latent, synthesize, GeneratorParams, TrainVariant};
use crate::sketch::{SketchSet, SketchTranslator};
use crate::train::TrainConfig;

/// How a generated image is scored against the exemplar set (lower = better).
#[derive(Clone)]
pub enum MatchCriterion {
    /// Symmetric chamfer distance between the translated output and each
    /// sketch; outputs whose translation has no strokes score +inf.
    Chamfer { translator: SketchTranslator },
    /// Cosine distance in a frozen feature space between the translated
    /// output and each sketch. Stand-in for a trained sketch-retrieval
    /// model; the scorer interface is the point, not the backbone.
    FeatureCosine {
        translator: SketchTranslator,
        fx: FeatureExtractor,
    },
    /// Arbitrary deterministic scorer over the raw generator output.
    Custom(Arc<dyn Fn(&ArrayD<f64>) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for MatchCriterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MatchCriterion::Chamfer { .. } => "MatchCriterion::Chamfer",
            MatchCriterion::FeatureCosine { .. } => "MatchCriterion::FeatureCosine",
            MatchCriterion::Custom(_) => "MatchCriterion::Custom",
        })
    }
}

fn cosine_distance(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return f64::INFINITY;
    }
    1.0 - a.dot(b) / (na * nb)
}

impl MatchCriterion {
    /// Score one generated sample: minimum distance over all exemplars.
    pub fn score(&self, image: &ArrayD<f64>, sketches: &SketchSet) -> f64 {
        match self {
            MatchCriterion::Chamfer { translator } => {
                let y = translator.translate(&image.clone().insert_axis(Axis(0)));
                let y = y.index_axis(Axis(0), 0).to_owned();
                sketches
                    .samples
                    .iter()
                    .map(|s| chamfer_sketch_distance(&y, s).unwrap_or(f64::INFINITY))
                    .fold(f64::INFINITY, f64::min)
            }
            MatchCriterion::FeatureCosine { translator, fx } => {
                let y = translator.translate(&image.clone().insert_axis(Axis(0)));
                let fy = fx.extract(&y).row(0).to_owned();
                sketches
                    .samples
                    .iter()
                    .map(|s| {
                        let fs = fx
                            .extract(&s.clone().insert_axis(Axis(0)))
                            .row(0)
                            .to_owned();
                        cosine_distance(&fy, &fs)
                    })
                    .fold(f64::INFINITY, f64::min)
            }
            MatchCriterion::Custom(scorer) => scorer(image),
        }
    }
}

/// Per-coordinate standard deviation of the sampled w population, exposed so
/// callers can turn Δw into a z-score.
#[derive(Clone, Debug)]
pub struct LatentShift {
    pub dw: Array1<f64>,
    pub w_sigma: Array1<f64>,
    /// Indices of the retained top-k samples, ascending score.
    pub matched: Vec<usize>,
}

/// Δw = E_match[w] − E_orig[w]: mean w of the `top_k` best-scoring samples
/// minus the mean over all `n_samples`. Ties break by sample index.
pub fn latent_shift_baseline(
    g: &GeneratorParams,
    criterion: &MatchCriterion,
    sketches: &SketchSet,
    n_samples: usize,
    top_k: usize,
    seed: u64,
) -> Result<LatentShift> {
    if top_k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    if top_k > n_samples {
        return Err(Error::Config(format!(
            "top_k ({top_k}) exceeds n_samples ({n_samples})"
        )));
    }
    if sketches.is_empty() && !matches!(criterion, MatchCriterion::Custom(_)) {
        return Err(Error::Input("empty sketch set".into()));
    }

    // Chunked scoring keeps the synthesized batch small; the w matrix itself
    // is tiny and kept whole for the moment computation.
    let d_w = g.arch.d_w;
    let mut w_all = Array2::zeros((n_samples, d_w));
    let mut scores = Vec::with_capacity(n_samples);
    let chunk = 512.min(n_samples.max(1));
    let z = sample_latent(n_samples, seed, g.arch.d_z)?;
    let mut start = 0;
    while start < n_samples {
        let end = (start + chunk).min(n_samples);
        let zc = z.values.slice(ndarray::s![start..end, ..]).to_owned();
        let wc = map_latent(g, &zc);
        let xc = synthesize(g, &wc);
        for i in 0..end - start {
            let img = xc.index_axis(Axis(0), i).to_owned();
            scores.push(criterion.score(&img, sketches));
        }
        w_all.slice_mut(ndarray::s![start..end, ..]).assign(&wc);
        start = end;
    }

    let mut order: Vec<usize> = (0..n_samples).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let matched: Vec<usize> = order[..top_k].to_vec();

    let e_orig = w_all.mean_axis(Axis(0)).expect("n_samples >= 1");
    let mut e_match = Array1::zeros(d_w);
    for &i in &matched {
        e_match += &w_all.row(i);
    }
    e_match /= top_k as f64;

    let mut var = Array1::zeros(d_w);
    for row in w_all.rows() {
        let d = &row.to_owned() - &e_orig;
        var += &(&d * &d);
    }
    var /= n_samples as f64;

    Ok(LatentShift {
        dw: &e_match - &e_orig,
        w_sigma: var.mapv(f64::sqrt),
        matched,
    })
}

/// Bake a constant W-space offset into a copy of the generator. The mapping
/// network always ends in an additive `mapping.w_shift` bias, so adding to it
/// realizes w + Δw with synthesis untouched.
pub fn apply_latent_shift(g: &GeneratorParams, dw: &Array1<f64>) -> Result<GeneratorParams> {
    if dw.len() != g.arch.d_w {
        return Err(Error::Config(format!(
            "shift length {} does not match d_w {}",
            dw.len(),
            g.arch.d_w
        )));
    }
    let mut out = g.clone();
    let shift = out
        .store
        .get("mapping.w_shift")
        .expect("generator always has mapping.w_shift");
    let new = &shift + &dw.view().into_dyn();
    out.store.set("mapping.w_shift", &new);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

/// Default λ_weight for the weight-regularized ablation rows.
pub const ABLATION_LAMBDA_WEIGHT: f64 = 100.0;
/// Translation-augmentation shift fraction for the aug-enabled rows.
pub const ABLATION_AUG_SHIFT: f64 = 0.125;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    /// One of the six loss/augmentation rows.
    Loss,
    /// Discriminator-init, trainable-set, or exemplar-count variants.
    Structural,
}

#[derive(Clone, Debug)]
pub struct AblationVariant {
    pub label: String,
    pub kind: AblationKind,
    pub config: TrainConfig,
    /// Cap on the exemplar count; None = the full sketch set.
    pub sample_limit: Option<usize>,
}

/// The standard comparison grid: six loss rows (sketch alone, +weight,
/// +image, each with and without translation augmentation) plus the
/// structural variants (scratch sketch discriminator, W-shift-only tuning,
/// reduced 1- and 5-exemplar regimes).
///
/// `lambda_weight` overrides the weight-row penalty; tasks that need a softer
/// anchor pass Some(50.0), per the published per-task override.
pub fn ablation_matrix(base: &TrainConfig, lambda_weight: Option<f64>) -> Vec<AblationVariant> {
    let lw = lambda_weight.unwrap_or(ABLATION_LAMBDA_WEIGHT);
    let aug_on = crate::sketch::AugmentPolicy::new(ABLATION_AUG_SHIFT)
        .expect("constant shift fraction is valid");

    let with = |label: &str,
                    kind: AblationKind,
                    li: f64,
                    lwt: f64,
                    aug: bool,
                    f: &dyn Fn(&mut TrainConfig)| {
        let mut cfg = base.clone();
        cfg.weights.lambda_image = li;
        cfg.weights.lambda_weight = lwt;
        cfg.aug = if aug {
            aug_on.clone()
        } else {
            crate::sketch::AugmentPolicy::disabled()
        };
        f(&mut cfg);
        AblationVariant {
            label: label.to_string(),
            kind,
            config: cfg,
            sample_limit: None,
        }
    };
    let nop = |_: &mut TrainConfig| {};

    let li = base.weights.lambda_image;
    let mut rows = vec![
        with("sketch", AblationKind::Loss, 0.0, 0.0, false, &nop),
        with("sketch+aug", AblationKind::Loss, 0.0, 0.0, true, &nop),
        with("sketch+weight", AblationKind::Loss, 0.0, lw, false, &nop),
        with("sketch+weight+aug", AblationKind::Loss, 0.0, lw, true, &nop),
        with("sketch+image", AblationKind::Loss, li, 0.0, false, &nop),
        with("sketch+image+aug", AblationKind::Loss, li, 0.0, true, &nop),
        with(
            "d-scratch",
            AblationKind::Structural,
            li,
            0.0,
            false,
            &|cfg| cfg.d_y_init = crate::train::DYInit::Scratch,
        ),
        with(
            "w-shift",
            AblationKind::Structural,
            li,
            0.0,
            false,
            &|cfg| cfg.variant = TrainVariant::WShift,
        ),
        with("1-sample", AblationKind::Structural, li, 0.0, false, &nop),
        with("5-sample", AblationKind::Structural, li, 0.0, false, &nop),
    ];
    rows[8].sample_limit = Some(1);
    rows[9].sample_limit = Some(5);
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate, ModelArch, SynthesisArch};

    fn tiny_generator(seed: u64) -> GeneratorParams {
        GeneratorParams::init(
            ModelArch {
                d_z: 4,
                d_w: 4,
                output_shape: [2, 1, 1],
                mapping_layers: 2,
                synthesis: SynthesisArch::Mlp { hidden: 8 },
            },
            seed,
        )
        .unwrap()
    }

    fn constant_criterion() -> MatchCriterion {
        MatchCriterion::Custom(Arc::new(|_| 0.0))
    }

    fn empty_sketches() -> SketchSet {
        SketchSet { samples: vec![] }
    }

    #[test]
    fn top_k_equal_to_n_gives_exactly_zero_shift() {
        let g = tiny_generator(3);
        let out =
            latent_shift_baseline(&g, &constant_criterion(), &empty_sketches(), 200, 200, 7)
                .unwrap();
        for &v in out.dw.iter() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn constant_scorer_shift_shrinks_with_sample_count() {
        // With no preference the matched mean is a plain subsample mean:
        // each coordinate stays within 5 sigma / sqrt(top_k).
        let g = tiny_generator(3);
        let out =
            latent_shift_baseline(&g, &constant_criterion(), &empty_sketches(), 20_000, 200, 7)
                .unwrap();
        for (d, s) in out.dw.iter().zip(out.w_sigma.iter()) {
            assert!(d.abs() < 5.0 * s / (200f64).sqrt(), "|{d}| vs sigma {s}");
        }
    }

    #[test]
    fn zero_or_oversized_top_k_is_rejected() {
        let g = tiny_generator(3);
        assert!(
            latent_shift_baseline(&g, &constant_criterion(), &empty_sketches(), 100, 0, 7)
                .is_err()
        );
        assert!(
            latent_shift_baseline(&g, &constant_criterion(), &empty_sketches(), 100, 101, 7)
                .is_err()
        );
    }

    #[test]
    fn shift_is_deterministic_in_its_inputs() {
        let g = tiny_generator(3);
        let run = || {
            latent_shift_baseline(&g, &constant_criterion(), &empty_sketches(), 500, 50, 7)
                .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.dw, b.dw);
        assert_eq!(a.matched, b.matched);
        let c = latent_shift_baseline(&g, &constant_criterion(), &empty_sketches(), 500, 50, 8)
            .unwrap();
        assert_ne!(a.dw, c.dw);
    }

    #[test]
    fn ties_break_by_sample_index() {
        let g = tiny_generator(3);
        let out =
            latent_shift_baseline(&g, &constant_criterion(), &empty_sketches(), 100, 10, 7)
                .unwrap();
        // All scores equal, so the retained set is the first ten indices.
        assert_eq!(out.matched, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn applied_shift_is_a_constant_w_offset_with_synthesis_untouched() {
        let g = tiny_generator(3);
        let dw = Array1::from_vec(vec![0.3, -0.1, 0.0, 0.7]);
        let shifted = apply_latent_shift(&g, &dw).unwrap();
        assert_eq!(
            g.store.digest_subset(&g.synthesis_names()),
            shifted.store.digest_subset(&shifted.synthesis_names())
        );
        let z = sample_latent(100, 5, g.arch.d_z).unwrap();
        let w0 = map_latent(&g, &z.values);
        let w1 = map_latent(&shifted, &z.values);
        let delta = &w1 - &w0;
        for row in delta.rows() {
            for (a, b) in row.iter().zip(dw.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shift_length_must_match_d_w() {
        let g = tiny_generator(3);
        assert!(apply_latent_shift(&g, &Array1::zeros(3)).is_err());
    }

    #[test]
    fn scorer_prefers_the_planted_direction() {
        // Score = distance to a fixed anchor in output space; the matched
        // mean must synthesize closer to the anchor than the overall mean.
        let g = tiny_generator(3);
        let anchor = [0.4, -0.2];
        let crit = MatchCriterion::Custom(Arc::new(move |img: &ArrayD<f64>| {
            let f = img.as_slice().unwrap();
            (f[0] - anchor[0]).powi(2) + (f[1] - anchor[1]).powi(2)
        }));
        let out =
            latent_shift_baseline(&g, &crit, &empty_sketches(), 5_000, 100, 7).unwrap();
        let shifted = apply_latent_shift(&g, &out.dw).unwrap();
        let z = sample_latent(2_000, 9, g.arch.d_z).unwrap();
        let dist = |gen: &GeneratorParams| {
            let x = generate(gen, &z.values);
            let flat = x.to_shape((2_000, 2)).unwrap().to_owned();
            let mut d = 0.0;
            for row in flat.rows() {
                d += (row[0] - anchor[0]).powi(2) + (row[1] - anchor[1]).powi(2);
            }
            d / 2_000.0
        };
        assert!(dist(&shifted) < dist(&g));
    }

    #[test]
    fn chamfer_criterion_takes_the_minimum_over_sketches() {
        // The exemplar set holds the exact edge map of one image plus a
        // mismatched one; the matching image must score zero.
        let (imgs, _) = crate::data::shapes_dataset(2, 9, crate::data::ShapeClass::Mixed);
        let tr = SketchTranslator::EdgeOperator;
        let own = |i: usize| {
            tr.translate(&imgs.index_axis(Axis(0), i).to_owned().insert_axis(Axis(0)))
                .index_axis(Axis(0), 0)
                .to_owned()
        };
        let crit = MatchCriterion::Chamfer { translator: tr.clone() };
        let img0 = imgs.index_axis(Axis(0), 0).to_owned();
        let both = SketchSet { samples: vec![own(1), own(0)] };
        assert_eq!(crit.score(&img0, &both), 0.0);
        let other_only = SketchSet { samples: vec![own(1)] };
        assert!(crit.score(&img0, &other_only) > 0.0);
    }

    #[test]
    fn feature_cosine_is_zero_for_an_exact_match() {
        let (imgs, _) = crate::data::shapes_dataset(1, 9, crate::data::ShapeClass::Circle);
        let tr = SketchTranslator::EdgeOperator;
        let img0 = imgs.index_axis(Axis(0), 0).to_owned();
        let sketch = tr
            .translate(&img0.clone().insert_axis(Axis(0)))
            .index_axis(Axis(0), 0)
            .to_owned();
        let crit = MatchCriterion::FeatureCosine {
            translator: tr,
            fx: FeatureExtractor::Identity,
        };
        let set = SketchSet { samples: vec![sketch] };
        assert!(crit.score(&img0, &set) < 1e-12);
    }

    #[test]
    fn ablation_grid_has_six_loss_rows_with_the_published_settings() {
        let base = TrainConfig::default();
        let rows = ablation_matrix(&base, None);
        let loss: Vec<_> = rows
            .iter()
            .filter(|r| r.kind == AblationKind::Loss)
            .collect();
        assert_eq!(loss.len(), 6);

        let by_label = |l: &str| rows.iter().find(|r| r.label == l).unwrap();
        let full_aug = by_label("sketch+image+aug");
        assert!(full_aug.config.aug.enabled);
        assert_eq!(full_aug.config.weights.lambda_image, 0.7);
        assert_eq!(full_aug.config.weights.lambda_weight, 0.0);

        let w = by_label("sketch+weight");
        assert_eq!(w.config.weights.lambda_weight, 100.0);
        let soft = ablation_matrix(&base, Some(50.0));
        assert_eq!(
            soft.iter()
                .find(|r| r.label == "sketch+weight+aug")
                .unwrap()
                .config
                .weights
                .lambda_weight,
            50.0
        );

        assert_eq!(by_label("w-shift").config.variant, TrainVariant::WShift);
        assert!(matches!(
            by_label("d-scratch").config.d_y_init,
            crate::train::DYInit::Scratch
        ));
        assert_eq!(by_label("1-sample").sample_limit, Some(1));
        assert_eq!(by_label("5-sample").sample_limit, Some(5));
        for r in &rows {
            r.config.validate().unwrap();
        }
    }
}
