//! Sketch domain: the frozen image-to-sketch translator F, sketch dataset
//! ingestion, and the differentiable translation augmentation.
//!
//! Sketch convention: strokes are 1, background is 0. Loaders invert the
//! usual dark-on-white raster convention.

use crate::autodiff as ad;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{he_normal, ParamStore};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Soft edge threshold location and slope for the default edge operator.
const EDGE_THRESHOLD: f64 = 0.3;
const EDGE_SLOPE: f64 = 10.0;

/// Norm floor of the direction-only toy translator.
const DIRECTION_EPS: f64 = 1e-3;

/// Frozen, differentiable image -> sketch map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum SketchTranslator {
    /// Smoothed gradient-magnitude edge operator: channel mean, 3x3 blur,
    /// central-difference gradients, normalized soft threshold. Parameter-free
    /// apart from its fixed kernels.
    EdgeOperator,
    /// A small frozen conv net loaded from a checkpoint.
    Learned { store: ParamStore, in_channels: usize },
    /// Toy-scale translator for 2D point tasks: squashes a point in [-1,1]^2
    /// into the unit square, playing the role of the cross-domain map.
    PointSquash,
    /// Toy-scale many-to-one translator: normalizes a 2D point to unit length
    /// before squashing, so the sketch captures only direction. Radius — the
    /// toy analog of image quality — is invisible to the sketch domain and
    /// must be preserved by regularization, mirroring how a real sketch pins
    /// pose but not texture.
    PointDirection,
}

impl SketchTranslator {
    /// Output shape for a given generator output shape.
    pub fn sketch_shape(&self, image_shape: [usize; 3]) -> [usize; 3] {
        match self {
            SketchTranslator::PointSquash | SketchTranslator::PointDirection => image_shape,
            _ => [1, image_shape[1], image_shape[2]],
        }
    }

    /// Tape forward: x [n, C, H, W] in [-1, 1] -> sketch in [0, 1].
    pub fn translate_var(&self, x: &Var) -> Var {
        assert_eq!(x.shape().len(), 4, "translator expects [n, c, h, w]");
        match self {
            SketchTranslator::EdgeOperator => edge_operator(x),
            SketchTranslator::Learned { store, in_channels } => {
                assert_eq!(
                    x.shape()[1],
                    *in_channels,
                    "learned translator channel mismatch"
                );
                let vars = store.bind(None);
                let h = ad::add_channel_bias(
                    &conv_same(x, vars.get("f.conv0.w")),
                    vars.get("f.conv0.b"),
                );
                let h = ad::leaky_relu(&h, 0.2);
                let h = ad::add_channel_bias(
                    &conv_same(&h, vars.get("f.conv1.w")),
                    vars.get("f.conv1.b"),
                );
                ad::sigmoid(&h)
            }
            SketchTranslator::PointSquash => {
                ad::scale(&ad::add_scalar(&ad::tanh(&ad::scale(x, 1.5)), 1.0), 0.5)
            }
            SketchTranslator::PointDirection => {
                let n = x.shape()[0];
                let c = x.shape()[1];
                let flat = ad::reshape(x, &[n, c]);
                // Per-sample norm with a floor so the origin stays smooth.
                let s = ad::matmul(&ad::sqr(&flat), &Var::constant(ndarray::Array2::ones((c, 1)).into_dyn()));
                let inv = ad::powf(&ad::add_scalar(&s, DIRECTION_EPS * DIRECTION_EPS), -0.5);
                let invb = ad::matmul(&inv, &Var::constant(ndarray::Array2::ones((1, c)).into_dyn()));
                let unit = ad::mul(&flat, &invb);
                let squashed =
                    ad::scale(&ad::add_scalar(&ad::tanh(&ad::scale(&unit, 1.5)), 1.0), 0.5);
                ad::reshape(&squashed, x.shape())
            }
        }
    }

    /// Eager forward.
    pub fn translate(&self, x: &ArrayD<f64>) -> ArrayD<f64> {
        self.translate_var(&Var::constant(x.clone())).value().clone()
    }

    /// Digest over every fixed quantity of the translator; constant across a
    /// training run by construction, checked by the trainer.
    pub fn digest(&self) -> String {
        match self {
            SketchTranslator::EdgeOperator => {
                let mut h = Sha256::new();
                h.update(b"edge-operator");
                h.update(EDGE_THRESHOLD.to_le_bytes());
                h.update(EDGE_SLOPE.to_le_bytes());
                h.finalize().iter().map(|b| format!("{b:02x}")).collect()
            }
            SketchTranslator::Learned { store, .. } => store.digest(),
            SketchTranslator::PointSquash => {
                let mut h = Sha256::new();
                h.update(b"point-squash-1.5");
                h.finalize().iter().map(|b| format!("{b:02x}")).collect()
            }
            SketchTranslator::PointDirection => {
                let mut h = Sha256::new();
                h.update(b"point-direction-1.5");
                h.update(DIRECTION_EPS.to_le_bytes());
                h.finalize().iter().map(|b| format!("{b:02x}")).collect()
            }
        }
    }

    /// A freshly initialized learned translator, for tests and for producing
    /// translator checkpoints in-repo.
    pub fn init_learned(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.insert(
            "f.conv0.w",
            he_normal(&mut rng, &[8, in_channels, 3, 3], in_channels * 9),
        );
        store.insert("f.conv0.b", crate::nn::zeros(&[8]));
        store.insert("f.conv1.w", he_normal(&mut rng, &[1, 8, 3, 3], 72));
        store.insert("f.conv1.b", crate::nn::zeros(&[1]));
        SketchTranslator::Learned { store, in_channels }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// 3x3 "same" convolution with replicate padding.
fn conv_same(x: &Var, w: &Var) -> Var {
    ad::conv2d(&replicate_pad1(x), w, 1, 0)
}

/// Replicate-pad by one pixel on each side. The adjoint folds border
/// gradients back onto the edge pixels; it is not differentiated further.
fn replicate_pad1(x: &Var) -> Var {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let xv = x.value();
    let mut out = ArrayD::zeros(IxDyn(&[n, c, h + 2, w + 2]));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h + 2 {
                for xx in 0..w + 2 {
                    let sy = (y as i64 - 1).clamp(0, h as i64 - 1) as usize;
                    let sx = (xx as i64 - 1).clamp(0, w as i64 - 1) as usize;
                    out[[ni, ci, y, xx]] = xv[[ni, ci, sy, sx]];
                }
            }
        }
    }
    Var::new_custom(
        out,
        vec![x.clone()],
        Some(Box::new(move |_, g| vec![fold_pad1(g)])),
    )
}

/// Adjoint of [`replicate_pad1`]: crop and accumulate borders.
fn fold_pad1(g: &Var) -> Var {
    let (n, c, hp, wp) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let (h, w) = (hp - 2, wp - 2);
    let gv = g.value();
    let mut out = ArrayD::zeros(IxDyn(&[n, c, h, w]));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..hp {
                for xx in 0..wp {
                    let sy = (y as i64 - 1).clamp(0, h as i64 - 1) as usize;
                    let sx = (xx as i64 - 1).clamp(0, w as i64 - 1) as usize;
                    out[[ni, ci, sy, sx]] += gv[[ni, ci, y, xx]];
                }
            }
        }
    }
    Var::new_custom(out, vec![g.clone()], None)
}

fn kernel_var(vals: &[[f64; 3]; 3], in_channels: usize, scale_per_channel: f64) -> Var {
    let mut k = ArrayD::zeros(IxDyn(&[1, in_channels, 3, 3]));
    for ci in 0..in_channels {
        for y in 0..3 {
            for x in 0..3 {
                k[[0, ci, y, x]] = vals[y][x] * scale_per_channel;
            }
        }
    }
    Var::constant(k)
}

/// The default, dependency-free edge operator.
fn edge_operator(x: &Var) -> Var {
    let c = x.shape()[1];
    let inv_c = 1.0 / c as f64;
    // Channel mean + blur fused into one 3x3 kernel pass.
    let blur = [
        [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0],
        [2.0 / 16.0, 4.0 / 16.0, 2.0 / 16.0],
        [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0],
    ];
    let smoothed = conv_same(x, &kernel_var(&blur, c, inv_c));
    let kx = [
        [0.0, 0.0, 0.0],
        [-0.5, 0.0, 0.5],
        [0.0, 0.0, 0.0],
    ];
    let ky = [
        [0.0, -0.5, 0.0],
        [0.0, 0.0, 0.0],
        [0.0, 0.5, 0.0],
    ];
    let gx = conv_same(&smoothed, &kernel_var(&kx, 1, 1.0));
    let gy = conv_same(&smoothed, &kernel_var(&ky, 1, 1.0));
    let mag = ad::powf(
        &ad::add_scalar(&ad::add(&ad::sqr(&gx), &ad::sqr(&gy)), 1e-12),
        0.5,
    );
    // Soft threshold, renormalized so that zero gradient (magnitude equal to
    // the sqrt-epsilon floor) maps to exactly 0.
    let s0 = 1.0 / (1.0 + (-EDGE_SLOPE * (1e-6 - EDGE_THRESHOLD)).exp());
    let s = ad::sigmoid(&ad::scale(&ad::add_scalar(&mag, -EDGE_THRESHOLD), EDGE_SLOPE));
    ad::scale(&ad::add_scalar(&s, -s0), 1.0 / (1.0 - s0))
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Translation augmentation policy.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub enabled: bool,
    /// Maximum shift as a fraction of the image side, in [0, 0.5).
    pub max_shift: f64,
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy {
            enabled: false,
            max_shift: 0.0,
        }
    }

    pub fn new(max_shift: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&max_shift) {
            return Err(Error::Config(format!(
                "aug.max_shift must lie in [0, 0.5), got {max_shift}"
            )));
        }
        Ok(AugmentPolicy {
            enabled: true,
            max_shift,
        })
    }
}

/// Draw one integer offset pair per batch sample.
pub fn draw_offsets<R: Rng>(
    policy: &AugmentPolicy,
    side: usize,
    n: usize,
    rng: &mut R,
) -> Vec<(i64, i64)> {
    if !policy.enabled {
        return vec![(0, 0); n];
    }
    let max = (policy.max_shift * side as f64).floor() as i64;
    (0..n)
        .map(|_| (rng.gen_range(-max..=max), rng.gen_range(-max..=max)))
        .collect()
}

/// Shift each batch member by its own offset, zero padding; gradients pass
/// through unchanged for surviving pixels.
pub fn shift_per_sample(y: &Var, offsets: &[(i64, i64)]) -> Var {
    assert_eq!(y.shape()[0], offsets.len(), "one offset per sample");
    let offs = offsets.to_vec();
    let out = shift_per_sample_raw(y.value(), &offs);
    Var::new_custom(
        out,
        vec![y.clone()],
        Some(Box::new(move |_, g| {
            let inv: Vec<(i64, i64)> = offs.iter().map(|&(dy, dx)| (-dy, -dx)).collect();
            vec![shift_per_sample(g, &inv)]
        })),
    )
}

fn shift_per_sample_raw(a: &ArrayD<f64>, offsets: &[(i64, i64)]) -> ArrayD<f64> {
    let (n, c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    let mut out = ArrayD::zeros(IxDyn(&[n, c, h, w]));
    for (ni, &(dy, dx)) in offsets.iter().enumerate() {
        for ci in 0..c {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let (sy, sx) = (y - dy, x - dx);
                    if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                        out[[ni, ci, y as usize, x as usize]] =
                            a[[ni, ci, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    out
}

/// Augment a batch of sketches, drawing a fresh offset per sample.
pub fn augment_translate<R: Rng>(y: &Var, policy: &AugmentPolicy, rng: &mut R) -> Var {
    if !policy.enabled {
        return y.clone();
    }
    let side = y.shape()[2].max(y.shape()[3]);
    let offsets = draw_offsets(policy, side, y.shape()[0], rng);
    shift_per_sample(y, &offsets)
}

// ---------------------------------------------------------------------------
// Sketch sets
// ---------------------------------------------------------------------------

/// A loaded set of exemplar sketches, each [1, H, W] (or the toy shape).
#[derive(Clone, Debug)]
pub struct SketchSet {
    pub samples: Vec<ArrayD<f64>>,
}

impl SketchSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Assemble a batch [k, c, h, w] by index, with replacement.
    pub fn batch(&self, indices: &[usize]) -> ArrayD<f64> {
        let shape = self.samples[0].shape();
        let mut out = ArrayD::zeros(IxDyn(&[
            indices.len(),
            shape[0],
            shape[1],
            shape[2],
        ]));
        for (row, &i) in indices.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.samples[i]);
        }
        out
    }
}

/// Load every raster file from a directory as a binarized sketch.
///
/// Files are read in sorted name order, converted to grayscale, normalized to
/// [0, 1] with strokes = 1 (inverting the white background convention),
/// resized with nearest neighbor to `h x w`, and thresholded at 0.5.
pub fn load_sketch_set(dir: &Path, h: usize, w: usize) -> Result<SketchSet> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Input(format!(
            "no sketch files found in {}",
            dir.display()
        )));
    }
    let mut samples = Vec::with_capacity(files.len());
    for file in &files {
        let img = image::open(file).map_err(|e| {
            Error::Input(format!("unreadable sketch file {}: {e}", file.display()))
        })?;
        let gray = img.to_luma8();
        let (iw, ih) = gray.dimensions();
        let mut out = ArrayD::zeros(IxDyn(&[1, h, w]));
        for y in 0..h {
            for x in 0..w {
                // Nearest-neighbor lookup into the source raster.
                let sy = ((y as f64 + 0.5) * ih as f64 / h as f64) as u32;
                let sx = ((x as f64 + 0.5) * iw as f64 / w as f64) as u32;
                let v = gray.get_pixel(sx.min(iw - 1), sy.min(ih - 1)).0[0] as f64 / 255.0;
                let stroke = 1.0 - v;
                out[[0, y, x]] = if stroke > 0.5 { 1.0 } else { 0.0 };
            }
        }
        samples.push(out);
    }
    Ok(SketchSet { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, central_difference, max_rel_err, sum};

    fn image(vals: impl Fn(usize, usize) -> f64, h: usize, w: usize) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[1, 1, h, w]), |ix| vals(ix[2], ix[3]))
    }

    #[test]
    fn flat_image_yields_zero_sketch() {
        let f = SketchTranslator::EdgeOperator;
        for level in [-1.0, 0.0, 0.7] {
            let x = image(|_, _| level, 8, 8);
            let s = f.translate(&x);
            for &v in s.iter() {
                assert!(v.abs() < 1e-12, "flat image produced edge response {v}");
            }
        }
    }

    #[test]
    fn vertical_step_responds_only_near_the_step() {
        let f = SketchTranslator::EdgeOperator;
        let step_col = 4;
        let x = image(|_, c| if c < step_col { -1.0 } else { 1.0 }, 8, 8);
        let s = f.translate(&x);

        // Independent oracle: direct convolution with the same kernels.
        let expected = edge_oracle(&x);
        for (a, b) in s.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        // Nonzero only in the columns whose horizontal neighborhood crosses
        // the step (blur spreads it one column, the gradient one more).
        for y in 0..8 {
            for c in 0..8usize {
                let v = s[[0, 0, y, c]];
                if (c as i64 - step_col as i64).abs() > 2 {
                    assert!(v.abs() < 1e-12, "response {v} at column {c}");
                }
            }
        }
        assert!(s[[0, 0, 4, 4]] > 0.1, "no response on the step column");
    }

    /// Plain-loop reimplementation of the edge operator for the oracle.
    fn edge_oracle(x: &ArrayD<f64>) -> ArrayD<f64> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let at = |arr: &ArrayD<f64>, y: i64, xx: i64| -> f64 {
            let y = y.clamp(0, h as i64 - 1) as usize;
            let xx = xx.clamp(0, w as i64 - 1) as usize;
            arr[[0, 0, y, xx]]
        };
        let blur_k = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];
        let mut blurred = x.clone();
        for y in 0..h as i64 {
            for xx in 0..w as i64 {
                let mut acc = 0.0;
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        acc += blur_k[(dy + 1) as usize][(dx + 1) as usize] / 16.0
                            * at(x, y + dy, xx + dx);
                    }
                }
                blurred[[0, 0, y as usize, xx as usize]] = acc;
            }
        }
        let mut out = x.clone();
        let s0 = 1.0 / (1.0 + (-EDGE_SLOPE * (1e-6 - EDGE_THRESHOLD)).exp());
        for y in 0..h as i64 {
            for xx in 0..w as i64 {
                let gx = 0.5 * (at(&blurred, y, xx + 1) - at(&blurred, y, xx - 1));
                let gy = 0.5 * (at(&blurred, y + 1, xx) - at(&blurred, y - 1, xx));
                let mag = (gx * gx + gy * gy + 1e-12).sqrt();
                let s = 1.0 / (1.0 + (-EDGE_SLOPE * (mag - EDGE_THRESHOLD)).exp());
                out[[0, 0, y as usize, xx as usize]] = (s - s0) / (1.0 - s0);
            }
        }
        out
    }

    #[test]
    fn edge_operator_gradient_matches_finite_differences() {
        let f = SketchTranslator::EdgeOperator;
        let x0 = image(|y, x| ((y * 3 + x) as f64 * 0.37).sin(), 6, 6);
        let leaf = Var::leaf(x0.clone());
        let out = sum(&f.translate_var(&leaf));
        let analytic = backward(&out).wrt_or_zeros(&leaf);
        let numeric = central_difference(|v| f.translate(v).sum(), &x0, 1e-6);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn direction_translator_ignores_radius() {
        let f = SketchTranslator::PointDirection;
        let mut x = ArrayD::zeros(IxDyn(&[2, 2, 1, 1]));
        // Same direction at radii 1.0 and 3.0.
        x[[0, 0, 0, 0]] = 0.6;
        x[[0, 1, 0, 0]] = 0.8;
        x[[1, 0, 0, 0]] = 1.8;
        x[[1, 1, 0, 0]] = 2.4;
        let y = f.translate(&x);
        for c in 0..2 {
            let diff = (y[[0, c, 0, 0]] - y[[1, c, 0, 0]]).abs();
            assert!(diff < 1e-6, "radius leaked into sketch: {diff}");
        }
        // A rotated point maps elsewhere.
        let mut x2 = ArrayD::zeros(IxDyn(&[1, 2, 1, 1]));
        x2[[0, 0, 0, 0]] = -0.8;
        x2[[0, 1, 0, 0]] = 0.6;
        let y2 = f.translate(&x2);
        assert!((y2[[0, 0, 0, 0]] - y[[0, 0, 0, 0]]).abs() > 0.1);
    }

    #[test]
    fn direction_translator_gradient_matches_finite_differences() {
        let f = SketchTranslator::PointDirection;
        let x0 = ArrayD::from_shape_fn(IxDyn(&[3, 2, 1, 1]), |ix| {
            ((ix[0] * 2 + ix[1]) as f64 * 0.83).sin() + 0.3
        });
        let leaf = Var::leaf(x0.clone());
        let out = sum(&f.translate_var(&leaf));
        let analytic = backward(&out).wrt_or_zeros(&leaf);
        let numeric = central_difference(|v| f.translate(v).sum(), &x0, 1e-6);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn learned_translator_is_differentiable_and_bounded() {
        let f = SketchTranslator::init_learned(1, 3);
        let x0 = image(|y, x| ((y + x) as f64 * 0.21).cos(), 6, 6);
        let s = f.translate(&x0);
        for &v in s.iter() {
            assert!((0.0..=1.0).contains(&v));
        }
        let leaf = Var::leaf(x0.clone());
        let out = sum(&f.translate_var(&leaf));
        let analytic = backward(&out).wrt_or_zeros(&leaf);
        let numeric = central_difference(|v| f.translate(v).sum(), &x0, 1e-6);
        assert!(max_rel_err(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let y = Var::constant(image(|a, b| (a * b) as f64, 5, 5));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment_translate(&y, &AugmentPolicy::disabled(), &mut rng);
        assert_eq!(out.value(), y.value());
    }

    #[test]
    fn zero_shift_is_identity_and_mass_never_grows() {
        let y = image(|a, b| ((a + b) % 2) as f64, 6, 6);
        let yv = Var::constant(y.clone());
        let out = shift_per_sample(&yv, &[(0, 0)]);
        assert_eq!(out.value(), &y);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let policy = AugmentPolicy::new(0.3).unwrap();
        for _ in 0..20 {
            let aug = augment_translate(&yv, &policy, &mut rng);
            assert!(aug.value().sum() <= y.sum() + 1e-12);
        }
    }

    #[test]
    fn interior_content_survives_augmentation_exactly() {
        // Strokes at least max_shift*side away from every border keep their
        // pixel multiset.
        let mut y = ArrayD::zeros(IxDyn(&[1, 1, 10, 10]));
        y[[0, 0, 4, 4]] = 1.0;
        y[[0, 0, 5, 5]] = 1.0;
        y[[0, 0, 4, 6]] = 1.0;
        let policy = AugmentPolicy::new(0.2).unwrap(); // max offset 2
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let aug = augment_translate(&Var::constant(y.clone()), &policy, &mut rng);
            assert!((aug.value().sum() - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn augmentation_passes_gradients_for_surviving_pixels() {
        let y0 = image(|a, b| (a as f64 - b as f64) * 0.1, 6, 6);
        let leaf = Var::leaf(y0.clone());
        let out = sum(&ad::sqr(&shift_per_sample(&leaf, &[(2, -1)])));
        let analytic = backward(&out).wrt_or_zeros(&leaf);
        let numeric = central_difference(
            |v| {
                shift_per_sample_raw(v, &[(2, -1)]).mapv(|t| t * t).sum()
            },
            &y0,
            1e-6,
        );
        assert!(max_rel_err(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn invalid_max_shift_rejected() {
        assert!(AugmentPolicy::new(0.5).is_err());
        assert!(AugmentPolicy::new(-0.1).is_err());
        assert!(AugmentPolicy::new(0.49).is_ok());
    }

    #[test]
    fn load_sketch_set_binarizes_and_inverts() {
        let dir = tempfile::tempdir().unwrap();
        // One all-white file (background only) and one with a black square.
        let white = image::GrayImage::from_pixel(16, 16, image::Luma([255u8]));
        white.save(dir.path().join("a_white.png")).unwrap();
        let mut marked = image::GrayImage::from_pixel(16, 16, image::Luma([255u8]));
        for y in 4..8 {
            for x in 4..8 {
                marked.put_pixel(x, y, image::Luma([0u8]));
            }
        }
        marked.save(dir.path().join("b_marked.png")).unwrap();

        let set = load_sketch_set(dir.path(), 16, 16).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.samples[0].sum(), 0.0); // white = background
        assert_eq!(set.samples[1].sum(), 16.0); // 4x4 strokes
        for &v in set.samples[1].iter() {
            assert!(v == 0.0 || v == 1.0);
        }
    }

    #[test]
    fn empty_sketch_dir_is_an_input_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_sketch_set(dir.path(), 8, 8),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn translator_digest_is_stable() {
        let f = SketchTranslator::EdgeOperator;
        assert_eq!(f.digest(), SketchTranslator::EdgeOperator.digest());
        let l = SketchTranslator::init_learned(1, 7);
        assert_eq!(l.digest(), l.clone().digest());
        assert_ne!(l.digest(), f.digest());
    }

    #[test]
    fn translator_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let f = SketchTranslator::init_learned(3, 11);
        let path = dir.path().join("translator.json");
        f.save(&path).unwrap();
        let g = SketchTranslator::load(&path).unwrap();
        assert_eq!(f.digest(), g.digest());
    }
}
