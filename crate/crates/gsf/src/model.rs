//! Generator abstraction `G(z) = synthesize(map(z))`, the trainable/frozen
//! parameter partition, latent utilities, discriminators, and checkpoints.
//!
//! Mapping parameters live under the `mapping.` name prefix and synthesis
//! parameters under `synthesis.`, so the partition is total and disjoint by
//! construction.

use crate::autodiff as ad;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{he_normal, zeros, ParamStore, ParamVars};
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Synthesis-half architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SynthesisArch {
    /// Fully-connected stack ending in tanh; for low-dimensional outputs.
    Mlp { hidden: usize },
    /// 4x4 seed plus transposed-convolution upsampling to H x W.
    Conv { base_ch: usize },
}

/// Generator shape description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub d_z: usize,
    pub d_w: usize,
    /// Output shape [C, H, W]; vector-valued tasks use H = W = 1.
    pub output_shape: [usize; 3],
    /// Fully-connected mapping depth; 0 means identity mapping (d_z == d_w).
    pub mapping_layers: usize,
    pub synthesis: SynthesisArch,
}

impl ModelArch {
    pub fn out_len(&self) -> usize {
        self.output_shape.iter().product()
    }

    fn validate(&self) -> Result<()> {
        if self.mapping_layers == 0 && self.d_z != self.d_w {
            return Err(Error::Config(
                "identity mapping requires d_z == d_w".into(),
            ));
        }
        if let SynthesisArch::Conv { .. } = self.synthesis {
            let [_, h, w] = self.output_shape;
            if h != w || h < 8 || (h % 4 != 0) || !(h / 4).is_power_of_two() {
                return Err(Error::Config(format!(
                    "conv synthesis needs square output 4*2^k, got {h}x{w}"
                )));
            }
        }
        Ok(())
    }
}

/// Which generator parameters a training run may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainVariant {
    /// The whole mapping network (default).
    FullMapping,
    /// A single bias in W space.
    WShift,
    /// Everything, including synthesis; exists for ablation only.
    AllParams,
}

impl std::str::FromStr for TrainVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-mapping" => Ok(TrainVariant::FullMapping),
            "w-shift" => Ok(TrainVariant::WShift),
            "all-params" => Ok(TrainVariant::AllParams),
            other => Err(Error::Config(format!("unknown train variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for TrainVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TrainVariant::FullMapping => "full-mapping",
            TrainVariant::WShift => "w-shift",
            TrainVariant::AllParams => "all-params",
        };
        write!(f, "{s}")
    }
}

/// A batch of latent codes z ~ N(0, I), with seed provenance.
#[derive(Clone, Debug)]
pub struct LatentBatch {
    /// [n, d_z]
    pub values: Array2<f64>,
    pub seed: Option<u64>,
}

impl LatentBatch {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_rows(values: Array2<f64>) -> Self {
        LatentBatch { values, seed: None }
    }
}

/// Generator parameters: trainable mapping half plus frozen synthesis half.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub arch: ModelArch,
    pub store: ParamStore,
}

pub const MAPPING_PREFIX: &str = "mapping.";
pub const SYNTHESIS_PREFIX: &str = "synthesis.";

impl GeneratorParams {
    pub fn init(arch: ModelArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        // Mapping: fc layers plus an always-present W-space shift bias.
        let mut din = arch.d_z;
        for i in 0..arch.mapping_layers {
            let dout = if i + 1 == arch.mapping_layers {
                arch.d_w
            } else {
                arch.d_w.max(arch.d_z)
            };
            store.insert(format!("mapping.fc{i}.w"), he_normal(&mut rng, &[din, dout], din));
            store.insert(format!("mapping.fc{i}.b"), zeros(&[dout]));
            din = dout;
        }
        store.insert("mapping.w_shift", zeros(&[arch.d_w]));

        match arch.synthesis {
            SynthesisArch::Mlp { hidden } => {
                store.insert(
                    "synthesis.fc0.w",
                    he_normal(&mut rng, &[arch.d_w, hidden], arch.d_w),
                );
                store.insert("synthesis.fc0.b", zeros(&[hidden]));
                store.insert(
                    "synthesis.fc1.w",
                    he_normal(&mut rng, &[hidden, arch.out_len()], hidden),
                );
                store.insert("synthesis.fc1.b", zeros(&[arch.out_len()]));
            }
            SynthesisArch::Conv { base_ch } => {
                let [c, h, _] = arch.output_shape;
                let ups = (h / 4).trailing_zeros() as usize;
                store.insert(
                    "synthesis.seed.w",
                    he_normal(&mut rng, &[arch.d_w, base_ch * 16], arch.d_w),
                );
                store.insert("synthesis.seed.b", zeros(&[base_ch * 16]));
                let mut ch = base_ch;
                for i in 0..ups {
                    let out_ch = if i + 1 == ups { c } else { (ch / 2).max(4) };
                    store.insert(
                        format!("synthesis.up{i}.w"),
                        he_normal(&mut rng, &[ch, out_ch, 4, 4], ch * 16),
                    );
                    store.insert(format!("synthesis.up{i}.b"), zeros(&[out_ch]));
                    ch = out_ch;
                }
            }
        }
        Ok(GeneratorParams { arch, store })
    }

    pub fn mapping_names(&self) -> HashSet<String> {
        self.store
            .names()
            .filter(|n| n.starts_with(MAPPING_PREFIX))
            .map(String::from)
            .collect()
    }

    pub fn synthesis_names(&self) -> HashSet<String> {
        self.store
            .names()
            .filter(|n| n.starts_with(SYNTHESIS_PREFIX))
            .map(String::from)
            .collect()
    }

    pub fn synthesis_digest(&self) -> String {
        self.store.digest_subset(&self.synthesis_names())
    }
}

/// Draw n i.i.d. standard-normal latent codes, reproducible from the seed.
pub fn sample_latent(n: usize, seed: u64, d_z: usize) -> Result<LatentBatch> {
    if n == 0 {
        return Err(Error::Input("empty latent batch requested".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Array2::from_shape_fn((n, d_z), |_| StandardNormal.sample(&mut rng));
    Ok(LatentBatch {
        values,
        seed: Some(seed),
    })
}

/// Tape forward of the mapping network: z [n, d_z] -> w [n, d_w].
pub fn map_latent_var(params: &ParamVars, arch: &ModelArch, z: &Var) -> Var {
    assert_eq!(
        z.shape()[1],
        arch.d_z,
        "latent dimension mismatch: got {}, model expects {}",
        z.shape()[1],
        arch.d_z
    );
    let mut h = z.clone();
    for i in 0..arch.mapping_layers {
        let w = params.get(&format!("mapping.fc{i}.w"));
        let b = params.get(&format!("mapping.fc{i}.b"));
        h = ad::add_bias(&ad::matmul(&h, w), b);
        if i + 1 < arch.mapping_layers {
            h = ad::leaky_relu(&h, 0.2);
        }
    }
    ad::add_bias(&h, params.get("mapping.w_shift"))
}

/// Tape forward of the frozen synthesis network: w [n, d_w] -> [n, C, H, W].
pub fn synthesize_var(params: &ParamVars, arch: &ModelArch, w: &Var) -> Var {
    assert_eq!(
        w.shape()[1],
        arch.d_w,
        "intermediate latent dimension mismatch: got {}, model expects {}",
        w.shape()[1],
        arch.d_w
    );
    let n = w.shape()[0];
    let [c, hh, ww] = arch.output_shape;
    match arch.synthesis {
        SynthesisArch::Mlp { .. } => {
            let h = ad::add_bias(
                &ad::matmul(w, params.get("synthesis.fc0.w")),
                params.get("synthesis.fc0.b"),
            );
            let h = ad::leaky_relu(&h, 0.2);
            let h = ad::add_bias(
                &ad::matmul(&h, params.get("synthesis.fc1.w")),
                params.get("synthesis.fc1.b"),
            );
            ad::reshape(&ad::tanh(&h), &[n, c, hh, ww])
        }
        SynthesisArch::Conv { base_ch } => {
            let ups = (hh / 4).trailing_zeros() as usize;
            let h = ad::add_bias(
                &ad::matmul(w, params.get("synthesis.seed.w")),
                params.get("synthesis.seed.b"),
            );
            let h = ad::leaky_relu(&h, 0.2);
            let mut x = ad::reshape(&h, &[n, base_ch, 4, 4]);
            for i in 0..ups {
                let wk = params.get(&format!("synthesis.up{i}.w"));
                let bk = params.get(&format!("synthesis.up{i}.b"));
                x = ad::add_channel_bias(&ad::conv_transpose2d(&x, wk, 2, 1), bk);
                if i + 1 < ups {
                    x = ad::leaky_relu(&x, 0.2);
                }
            }
            ad::tanh(&x)
        }
    }
}

/// Full generator forward on the tape.
pub fn generate_var(params: &ParamVars, arch: &ModelArch, z: &Var) -> Var {
    let w = map_latent_var(params, arch, z);
    synthesize_var(params, arch, &w)
}

/// Eager mapping forward (no gradients retained).
pub fn map_latent(g: &GeneratorParams, z: &Array2<f64>) -> Array2<f64> {
    let vars = g.store.bind(None);
    let zv = Var::constant(z.clone().into_dyn());
    let w = map_latent_var(&vars, &g.arch, &zv);
    w.value()
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
}

/// Eager synthesis forward.
pub fn synthesize(g: &GeneratorParams, w: &Array2<f64>) -> ArrayD<f64> {
    let vars = g.store.bind(None);
    let wv = Var::constant(w.clone().into_dyn());
    synthesize_var(&vars, &g.arch, &wv).value().clone()
}

/// Eager full generator forward.
pub fn generate(g: &GeneratorParams, z: &Array2<f64>) -> ArrayD<f64> {
    let w = map_latent(g, z);
    synthesize(g, &w)
}

/// Affine contraction of w toward w_avg: `w_avg + psi * (w - w_avg)`.
/// psi outside [0, 1] extrapolates and is flagged on stderr.
pub fn truncate(w: &Array1<f64>, w_avg: &Array1<f64>, psi: f64) -> Array1<f64> {
    assert_eq!(w.len(), w_avg.len(), "truncate dimension mismatch");
    if !(0.0..=1.0).contains(&psi) {
        eprintln!("warning: truncation psi={psi} lies outside [0, 1] (extrapolation)");
    }
    w_avg + &((w - w_avg) * psi)
}

/// Row-wise truncation of a batch of w vectors.
pub fn truncate_batch(w: &Array2<f64>, w_avg: &Array1<f64>, psi: f64) -> Array2<f64> {
    let mut out = w.clone();
    for mut row in out.rows_mut() {
        let t = truncate(&row.to_owned(), w_avg, psi);
        row.assign(&t);
    }
    out
}

/// Mean of `map_latent` over n fresh standard-normal samples.
pub fn estimate_w_mean(g: &GeneratorParams, n: usize, seed: u64) -> Result<Array1<f64>> {
    let z = sample_latent(n, seed, g.arch.d_z)?;
    let w = map_latent(g, &z.values);
    Ok(w.mean_axis(Axis(0)).unwrap())
}

/// Names the variant is allowed to update.
pub fn trainable_mask(g: &GeneratorParams, variant: TrainVariant) -> HashSet<String> {
    match variant {
        TrainVariant::FullMapping => g.mapping_names(),
        TrainVariant::WShift => {
            let mut s = HashSet::new();
            s.insert("mapping.w_shift".to_string());
            s
        }
        TrainVariant::AllParams => g.store.names().map(String::from).collect(),
    }
}

// ---------------------------------------------------------------------------
// Discriminators
// ---------------------------------------------------------------------------

/// Discriminator architecture; MLP for 1x1 spatial inputs, conv stack otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscArch {
    pub input_shape: [usize; 3],
    pub hidden: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Discriminator {
    pub arch: DiscArch,
    pub store: ParamStore,
}

impl Discriminator {
    pub fn init(arch: DiscArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let [c, h, w] = arch.input_shape;
        if h == 1 && w == 1 {
            store.insert("d.fc0.w", he_normal(&mut rng, &[c, arch.hidden], c));
            store.insert("d.fc0.b", zeros(&[arch.hidden]));
            store.insert(
                "d.fc1.w",
                he_normal(&mut rng, &[arch.hidden, arch.hidden], arch.hidden),
            );
            store.insert("d.fc1.b", zeros(&[arch.hidden]));
            store.insert("d.out.w", he_normal(&mut rng, &[arch.hidden, 1], arch.hidden));
            store.insert("d.out.b", zeros(&[1]));
        } else {
            let downs = (h / 4).trailing_zeros() as usize;
            let mut ch_in = c;
            let mut ch_out = arch.hidden;
            for i in 0..downs {
                store.insert(
                    format!("d.conv{i}.w"),
                    he_normal(&mut rng, &[ch_out, ch_in, 4, 4], ch_in * 16),
                );
                store.insert(format!("d.conv{i}.b"), zeros(&[ch_out]));
                ch_in = ch_out;
                ch_out *= 2;
            }
            let flat = ch_in * 16;
            store.insert("d.out.w", he_normal(&mut rng, &[flat, 1], flat));
            store.insert("d.out.b", zeros(&[1]));
        }
        Discriminator { arch, store }
    }

    /// Tape forward: x [n, C, H, W] -> logits [n, 1].
    pub fn forward_var(&self, params: &ParamVars, x: &Var) -> Var {
        let [c, h, w] = self.arch.input_shape;
        assert_eq!(
            &x.shape()[1..],
            &[c, h, w],
            "discriminator input shape mismatch"
        );
        let n = x.shape()[0];
        if h == 1 && w == 1 {
            let mut v = ad::reshape(x, &[n, c]);
            for i in 0..2 {
                let wk = params.get(&format!("d.fc{i}.w"));
                let bk = params.get(&format!("d.fc{i}.b"));
                v = ad::leaky_relu(&ad::add_bias(&ad::matmul(&v, wk), bk), 0.2);
            }
            ad::add_bias(&ad::matmul(&v, params.get("d.out.w")), params.get("d.out.b"))
        } else {
            let downs = (h / 4).trailing_zeros() as usize;
            let mut v = x.clone();
            for i in 0..downs {
                let wk = params.get(&format!("d.conv{i}.w"));
                let bk = params.get(&format!("d.conv{i}.b"));
                v = ad::leaky_relu(&ad::add_channel_bias(&ad::conv2d(&v, wk, 2, 1), bk), 0.2);
            }
            let flat: usize = v.shape()[1..].iter().product();
            let v = ad::reshape(&v, &[n, flat]);
            ad::add_bias(&ad::matmul(&v, params.get("d.out.w")), params.get("d.out.b"))
        }
    }

    /// Eager logits for evaluation.
    pub fn logits(&self, x: &ArrayD<f64>) -> Array1<f64> {
        let vars = self.store.bind(None);
        let xv = Var::constant(x.clone());
        let out = self.forward_var(&vars, &xv);
        let v = out.value();
        Array1::from_iter(v.iter().cloned())
    }

    /// Re-target the input layer to a different channel count by averaging the
    /// existing input-channel weights; used when a discriminator pretrained on
    /// images seeds the sketch discriminator.
    pub fn with_input_channels(&self, new_c: usize) -> Self {
        let [c, h, w] = self.arch.input_shape;
        if new_c == c {
            return self.clone();
        }
        let mut out = self.clone();
        out.arch.input_shape = [new_c, h, w];
        if h == 1 && w == 1 {
            let wk = self.store.get("d.fc0.w").unwrap();
            let mean = wk.mean_axis(Axis(0)).unwrap();
            let mut neww = ArrayD::zeros(IxDyn(&[new_c, wk.shape()[1]]));
            for i in 0..new_c {
                neww.index_axis_mut(Axis(0), i).assign(&mean);
            }
            out.store = rebuild_with(&self.store, "d.fc0.w", neww);
        } else {
            let wk = self.store.get("d.conv0.w").unwrap();
            let mean = wk.mean_axis(Axis(1)).unwrap();
            let mut neww = ArrayD::zeros(IxDyn(&[wk.shape()[0], new_c, wk.shape()[2], wk.shape()[3]]));
            for i in 0..new_c {
                neww.index_axis_mut(Axis(1), i).assign(&mean);
            }
            out.store = rebuild_with(&self.store, "d.conv0.w", neww);
        }
        out
    }
}

fn rebuild_with(store: &ParamStore, name: &str, value: ArrayD<f64>) -> ParamStore {
    let mut out = ParamStore::new();
    for (k, v) in store.iter() {
        if k == name {
            out.insert(k, value.clone());
        } else {
            out.insert(k, v.to_array());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Self-describing checkpoint container.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub generator: GeneratorParams,
    /// name -> "mapping" | "synthesis"
    pub partition: std::collections::BTreeMap<String, String>,
    pub w_avg: Option<Vec<f64>>,
    pub iteration: u64,
    pub d_x: Option<Discriminator>,
    pub d_y: Option<Discriminator>,
}

impl Checkpoint {
    pub fn new(generator: GeneratorParams) -> Self {
        let partition = generator
            .store
            .names()
            .map(|n| {
                let side = if n.starts_with(MAPPING_PREFIX) {
                    "mapping"
                } else {
                    "synthesis"
                };
                (n.to_string(), side.to_string())
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            generator,
            partition,
            w_avg: None,
            iteration: 0,
            d_x: None,
            d_y: None,
        }
    }

    /// Cached mean W latent, estimating and storing it on first use.
    pub fn w_avg_or_estimate(&mut self, n: usize, seed: u64) -> Result<Array1<f64>> {
        if let Some(v) = &self.w_avg {
            return Ok(Array1::from_vec(v.clone()));
        }
        let m = estimate_w_mean(&self.generator, n, seed)?;
        self.w_avg = Some(m.to_vec());
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {} (expected {})",
                path.display(),
                ckpt.version,
                CHECKPOINT_VERSION
            )));
        }
        Ok(ckpt)
    }
}

/// Default w_avg estimation sample count.
pub const W_AVG_SAMPLES: usize = 10_000;
pub const W_AVG_SEED: u64 = 710;

/// Desk-scale architecture for the 2D toy task.
pub fn toy_arch() -> ModelArch {
    ModelArch {
        d_z: 8,
        d_w: 8,
        output_shape: [2, 1, 1],
        mapping_layers: 4,
        synthesis: SynthesisArch::Mlp { hidden: 32 },
    }
}

/// Desk-scale architecture for the 32x32 image task.
pub fn image_arch(channels: usize) -> ModelArch {
    ModelArch {
        d_z: 64,
        d_w: 64,
        output_shape: [channels, 32, 32],
        mapping_layers: 4,
        synthesis: SynthesisArch::Conv { base_ch: 64 },
    }
}
