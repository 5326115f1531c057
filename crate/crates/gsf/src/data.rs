//! Desk-scale datasets and task fixtures: the 8-mode 2D ring task, the
//! 32×32 two-class shapes task, and file-based dataset ingestion (CSV point
//! sets, raster image directories).

use crate::error::{Error, Result};
use crate::eval::FeatureNet;
use crate::sketch::{SketchSet, SketchTranslator};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

// ---------------------------------------------------------------------------
// Ring task
// ---------------------------------------------------------------------------

/// Number of modes in the ring mixture.
pub const RING_MODES: usize = 8;
/// Ring radius.
pub const RING_RADIUS: f64 = 1.0;
/// Per-mode isotropic noise standard deviation.
pub const RING_NOISE: f64 = 0.05;
/// The designated target modes for customization experiments.
pub const TOY_TARGET_MODES: [usize; 3] = [0, 1, 2];

/// Mode centers, evenly spaced on the circle: [8, 2].
pub fn ring_mode_centers() -> Array2<f64> {
    Array2::from_shape_fn((RING_MODES, 2), |(k, j)| {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / RING_MODES as f64;
        if j == 0 {
            RING_RADIUS * angle.cos()
        } else {
            RING_RADIUS * angle.sin()
        }
    })
}

/// Sample n points from the mixture restricted to `modes` (uniform over
/// modes, Gaussian around each center).
pub fn sample_ring(n: usize, seed: u64, modes: &[usize]) -> Result<Array2<f64>> {
    if modes.is_empty() || modes.iter().any(|&m| m >= RING_MODES) {
        return Err(Error::Input(format!("invalid mode list {modes:?}")));
    }
    let centers = ring_mode_centers();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array2::zeros((n, 2));
    for i in 0..n {
        let m = modes[rng.gen_range(0..modes.len())];
        for j in 0..2 {
            let noise: f64 = StandardNormal.sample(&mut rng);
            out[[i, j]] = centers[[m, j]] + RING_NOISE * noise;
        }
    }
    Ok(out)
}

/// Nearest-mode assignment for each point.
pub fn assign_modes(points: &Array2<f64>) -> Vec<usize> {
    let centers = ring_mode_centers();
    points
        .outer_iter()
        .map(|p| {
            (0..RING_MODES)
                .min_by(|&a, &b| {
                    let da = (p[0] - centers[[a, 0]]).powi(2) + (p[1] - centers[[a, 1]]).powi(2);
                    let db = (p[0] - centers[[b, 0]]).powi(2) + (p[1] - centers[[b, 1]]).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap()
        })
        .collect()
}

/// Fraction of points assigned to each mode.
pub fn mode_mass(points: &Array2<f64>) -> [f64; RING_MODES] {
    let mut mass = [0.0; RING_MODES];
    let n = points.nrows();
    for m in assign_modes(points) {
        mass[m] += 1.0 / n as f64;
    }
    mass
}

/// Number of modes holding at least `min_mass` of the samples.
pub fn covered_modes(mass: &[f64; RING_MODES], min_mass: f64) -> usize {
    mass.iter().filter(|&&m| m >= min_mass).count()
}

/// View 2D points as generator-shaped tensors [n, 2, 1, 1].
pub fn points_to_samples(points: &Array2<f64>) -> ArrayD<f64> {
    let n = points.nrows();
    points
        .clone()
        .into_shape_with_order(IxDyn(&[n, 2, 1, 1]))
        .unwrap()
}

/// Inverse of [`points_to_samples`].
pub fn samples_to_points(samples: &ArrayD<f64>) -> Array2<f64> {
    let n = samples.shape()[0];
    samples
        .to_shape((n, 2))
        .unwrap()
        .to_owned()
}

/// The frozen translator of the toy task: sketches capture only direction.
pub fn toy_translator() -> SketchTranslator {
    SketchTranslator::PointDirection
}

/// Systematic angular offset (radians) applied to every exemplar sketch.
/// Stands in for a sketcher's consistent stylistic distortion: the exemplars
/// point slightly away from the true mode centers, so a generator that
/// matches them exactly drifts off the data distribution. Small enough that
/// every exemplar stays inside its mode's nearest-mode basin.
pub const TOY_SKETCH_TILT: f64 = 0.15;

/// Exemplar "sketches" for the toy task: target-mode points, tilted by the
/// stylistic offset, pushed through the frozen toy translator.
pub fn toy_sketch_set(per_mode: usize, seed: u64) -> Result<SketchSet> {
    let translator = toy_translator();
    let (sin, cos) = TOY_SKETCH_TILT.sin_cos();
    let mut samples = Vec::new();
    for (i, &mode) in TOY_TARGET_MODES.iter().enumerate() {
        let mut pts = sample_ring(per_mode, seed.wrapping_add(i as u64), &[mode])?;
        for mut row in pts.rows_mut() {
            let (x, y) = (row[0], row[1]);
            row[0] = cos * x - sin * y;
            row[1] = sin * x + cos * y;
        }
        let imgs = points_to_samples(&pts);
        let translated = translator.translate(&imgs);
        for row in 0..per_mode {
            samples.push(translated.index_axis(Axis(0), row).to_owned());
        }
    }
    Ok(SketchSet { samples })
}

// ---------------------------------------------------------------------------
// Shapes task (32x32, two classes)
// ---------------------------------------------------------------------------

/// Image side of the shapes task.
pub const SHAPE_SIDE: usize = 32;

/// Which shape class to draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeClass {
    Circle,
    Square,
    Mixed,
}

impl ShapeClass {
    fn pick(self, rng: &mut ChaCha8Rng) -> ShapeClass {
        match self {
            ShapeClass::Mixed => {
                if rng.gen::<bool>() {
                    ShapeClass::Circle
                } else {
                    ShapeClass::Square
                }
            }
            c => c,
        }
    }
}

/// Synthetic shape images in [-1, 1]: background -1, filled shape +1.
/// Random center and size per sample. Returns ([n, 1, 32, 32], labels) with
/// label 0 = circle, 1 = square.
pub fn shapes_dataset(n: usize, seed: u64, class: ShapeClass) -> (ArrayD<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ArrayD::from_elem(IxDyn(&[n, 1, SHAPE_SIDE, SHAPE_SIDE]), -1.0);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let kind = class.pick(&mut rng);
        let cx = rng.gen_range(11.0..21.0);
        let cy = rng.gen_range(11.0..21.0);
        let r = rng.gen_range(5.0..9.0);
        for y in 0..SHAPE_SIDE {
            for x in 0..SHAPE_SIDE {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = match kind {
                    ShapeClass::Circle => dx * dx + dy * dy <= r * r,
                    ShapeClass::Square => dx.abs() <= r && dy.abs() <= r,
                    ShapeClass::Mixed => unreachable!(),
                };
                if inside {
                    out[[i, 0, y, x]] = 1.0;
                }
            }
        }
        labels.push(if kind == ShapeClass::Square { 1 } else { 0 });
    }
    (out, labels)
}

/// Edge-map sketches of a batch of images, binarized at 0.5.
pub fn edge_sketches(images: &ArrayD<f64>) -> SketchSet {
    let translator = SketchTranslator::EdgeOperator;
    let translated = translator.translate(images);
    let samples = (0..images.shape()[0])
        .map(|i| {
            translated
                .index_axis(Axis(0), i)
                .to_owned()
                .mapv(|v| if v > 0.5 { 1.0 } else { 0.0 })
        })
        .collect();
    SketchSet { samples }
}

// ---------------------------------------------------------------------------
// Classifier feature extractor training
// ---------------------------------------------------------------------------

/// Train the small feature classifier with a logistic loss on binary labels
/// (single output logit). Returns the trained net.
pub fn train_feature_net(
    images: &ArrayD<f64>,
    labels: &[u8],
    dim: usize,
    iters: usize,
    seed: u64,
) -> Result<FeatureNet> {
    use crate::autodiff as ad;
    use crate::autodiff::{backward, Var};
    use crate::loss::collect_param_grads;
    use crate::nn::Adam;

    let n = images.shape()[0];
    if n != labels.len() || n == 0 {
        return Err(Error::Input("images/labels mismatch".into()));
    }
    let input_len: usize = images.shape()[1..].iter().product();
    let mut net = FeatureNet::init(input_len, dim, 1, seed);
    let mut opt = Adam::new(0.01, 0.9, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let batch = 32.min(n);
    let all: std::collections::HashSet<String> =
        net.store.names().map(str::to_string).collect();
    for _ in 0..iters {
        let idx: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..n)).collect();
        let mut xb = ArrayD::zeros(IxDyn(&[batch, input_len]));
        let mut sign = ArrayD::zeros(IxDyn(&[batch, 1]));
        for (row, &i) in idx.iter().enumerate() {
            let flat = images
                .index_axis(Axis(0), i)
                .to_owned()
                .into_shape_with_order(IxDyn(&[input_len]))
                .unwrap();
            xb.index_axis_mut(Axis(0), row).assign(&flat);
            sign[[row, 0]] = if labels[i] == 1 { 1.0 } else { -1.0 };
        }
        let vars = net.store.bind(Some(&all));
        let logits = net.logits_var(&vars, &Var::constant(xb));
        // mean softplus(-y * logit): logistic loss with labels in {-1, +1}.
        let loss = ad::mean(&ad::softplus(&ad::neg(&ad::mul(
            &logits,
            &Var::constant(sign),
        ))));
        let grads = collect_param_grads(&backward(&loss), &vars);
        opt.step(&mut net.store, &grads)?;
    }
    Ok(net)
}

// ---------------------------------------------------------------------------
// File-based datasets
// ---------------------------------------------------------------------------

/// Write a 2D point set as CSV (x,y per line).
pub fn save_points_csv(path: &Path, points: &Array2<f64>) -> Result<()> {
    let mut text = String::new();
    for row in points.outer_iter() {
        text.push_str(&format!("{},{}\n", row[0], row[1]));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a 2D point set from CSV.
pub fn load_points_csv(path: &Path) -> Result<Array2<f64>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rows: Vec<[f64; 2]> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 2 {
            return Err(Error::Input(format!(
                "{}:{}: expected two comma-separated values",
                path.display(),
                lineno + 1
            )));
        }
        let x = parts[0].trim().parse::<f64>();
        let y = parts[1].trim().parse::<f64>();
        match (x, y) {
            (Ok(x), Ok(y)) => rows.push([x, y]),
            _ => {
                return Err(Error::Input(format!(
                    "{}:{}: unparsable number",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Input(format!("no points in {}", path.display())));
    }
    let mut out = Array2::zeros((rows.len(), 2));
    for (i, r) in rows.iter().enumerate() {
        out[[i, 0]] = r[0];
        out[[i, 1]] = r[1];
    }
    Ok(out)
}

/// Write a batch of single-channel images in [-1, 1] as 8-bit grayscale PNGs
/// named `%05d.png`.
pub fn save_image_dir(dir: &Path, images: &ArrayD<f64>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let (n, h, w) = (images.shape()[0], images.shape()[2], images.shape()[3]);
    for i in 0..n {
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let v = ((images[[i, 0, y, x]] + 1.0) * 0.5).clamp(0.0, 1.0);
                img.put_pixel(x as u32, y as u32, image::Luma([(v * 255.0).round() as u8]));
            }
        }
        let path = dir.join(format!("{i:05}.png"));
        img.save(&path)
            .map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

/// Read every raster file in a directory as a single-channel image batch in
/// [-1, 1], nearest-resized to h×w. Files load in sorted name order.
pub fn load_image_dir(dir: &Path, h: usize, w: usize) -> Result<ArrayD<f64>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Input(format!("no images found in {}", dir.display())));
    }
    let mut out = ArrayD::zeros(IxDyn(&[files.len(), 1, h, w]));
    for (i, file) in files.iter().enumerate() {
        let img = image::open(file)
            .map_err(|e| Error::Input(format!("unreadable image {}: {e}", file.display())))?
            .to_luma8();
        let (iw, ih) = img.dimensions();
        for y in 0..h {
            for x in 0..w {
                let sy = (((y as f64 + 0.5) * ih as f64 / h as f64) as u32).min(ih - 1);
                let sx = (((x as f64 + 0.5) * iw as f64 / w as f64) as u32).min(iw - 1);
                let v = img.get_pixel(sx, sy).0[0] as f64 / 255.0;
                out[[i, 0, y, x]] = v * 2.0 - 1.0;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_centers_lie_on_the_ring() {
        let c = ring_mode_centers();
        for row in c.outer_iter() {
            let r = (row[0] * row[0] + row[1] * row[1]).sqrt();
            assert!((r - RING_RADIUS).abs() < 1e-12);
        }
    }

    #[test]
    fn ring_sampling_is_deterministic_and_respects_modes() {
        let a = sample_ring(100, 5, &[0, 3]).unwrap();
        let b = sample_ring(100, 5, &[0, 3]).unwrap();
        assert_eq!(a, b);
        for &m in &assign_modes(&a) {
            assert!(m == 0 || m == 3);
        }
        assert!(sample_ring(10, 0, &[]).is_err());
        assert!(sample_ring(10, 0, &[8]).is_err());
    }

    #[test]
    fn noiseless_centers_assign_to_themselves() {
        let centers = ring_mode_centers();
        let assigned = assign_modes(&centers);
        assert_eq!(assigned, (0..RING_MODES).collect::<Vec<_>>());
    }

    #[test]
    fn mode_mass_sums_to_one_and_covers_all_modes() {
        let pts = sample_ring(4000, 9, &(0..8).collect::<Vec<_>>()).unwrap();
        let mass = mode_mass(&pts);
        assert!((mass.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(covered_modes(&mass, 0.02), 8);
    }

    #[test]
    fn point_tensor_roundtrip() {
        let pts = sample_ring(7, 2, &[1]).unwrap();
        let t = points_to_samples(&pts);
        assert_eq!(t.shape(), &[7, 2, 1, 1]);
        assert_eq!(samples_to_points(&t), pts);
    }

    #[test]
    fn toy_sketches_live_in_the_unit_square() {
        let set = toy_sketch_set(5, 3).unwrap();
        assert_eq!(set.len(), 15);
        for s in &set.samples {
            assert_eq!(s.shape(), &[2, 1, 1]);
            for &v in s.iter() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn shapes_are_binary_valued_and_labeled() {
        let (imgs, labels) = shapes_dataset(20, 7, ShapeClass::Mixed);
        assert_eq!(imgs.shape(), &[20, 1, 32, 32]);
        assert_eq!(labels.len(), 20);
        for &v in imgs.iter() {
            assert!(v == 1.0 || v == -1.0);
        }
        assert!(labels.iter().any(|&l| l == 0) && labels.iter().any(|&l| l == 1));

        let (_, sq_labels) = shapes_dataset(10, 8, ShapeClass::Square);
        assert!(sq_labels.iter().all(|&l| l == 1));
    }

    #[test]
    fn edge_sketches_outline_the_shapes() {
        let (imgs, _) = shapes_dataset(4, 11, ShapeClass::Square);
        let set = edge_sketches(&imgs);
        assert_eq!(set.len(), 4);
        for (i, s) in set.samples.iter().enumerate() {
            let strokes = s.sum();
            assert!(strokes > 0.0, "sketch {i} empty");
            // An outline is sparser than the filled shape.
            let filled = imgs
                .index_axis(Axis(0), i)
                .iter()
                .filter(|&&v| v > 0.0)
                .count() as f64;
            assert!(strokes < filled, "sketch {i} not an outline");
        }
    }

    #[test]
    fn feature_net_learns_to_separate_classes() {
        let (imgs, labels) = shapes_dataset(200, 13, ShapeClass::Mixed);
        let net = train_feature_net(&imgs, &labels, 8, 300, 1).unwrap();
        // Check training accuracy via the head.
        use crate::autodiff::Var;
        let vars = net.store.bind(None);
        let n = imgs.shape()[0];
        let flat = imgs.to_shape((n, 1024)).unwrap().to_owned().into_dyn();
        let logits = net.logits_var(&vars, &Var::constant(flat));
        let correct = (0..n)
            .filter(|&i| (logits.value()[[i, 0]] > 0.0) == (labels[i] == 1))
            .count();
        assert!(
            correct as f64 / n as f64 > 0.9,
            "classifier accuracy {}/{n}",
            correct
        );
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("points.csv");
        let pts = sample_ring(12, 4, &[2, 5]).unwrap();
        save_points_csv(&path, &pts).unwrap();
        let loaded = load_points_csv(&path).unwrap();
        assert_eq!(loaded.dim(), (12, 2));
        for (a, b) in pts.iter().zip(loaded.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        std::fs::write(&path, "1.0,2.0\nnot,numbers\n").unwrap();
        assert!(load_points_csv(&path).is_err());
        std::fs::write(&path, "").unwrap();
        assert!(load_points_csv(&path).is_err());
    }

    #[test]
    fn image_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, _) = shapes_dataset(3, 17, ShapeClass::Circle);
        save_image_dir(dir.path(), &imgs).unwrap();
        let loaded = load_image_dir(dir.path(), 32, 32).unwrap();
        assert_eq!(loaded.shape(), imgs.shape());
        // Binary images survive the 8-bit roundtrip exactly.
        for (a, b) in imgs.iter().zip(loaded.iter()) {
            assert!((a - b).abs() < 1e-2);
        }
        let empty = tempfile::tempdir().unwrap();
        assert!(load_image_dir(empty.path(), 32, 32).is_err());
    }
}
