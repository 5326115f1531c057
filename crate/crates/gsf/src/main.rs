//! Command-line surface: pretraining, sketch-guided fine-tuning, evaluation,
//! the latent-shift baseline, and the latent-space application commands.
//!
//! Exit codes: 0 on success, 1 on runtime failure (numerical trouble,
//! serialization bugs), 2 on user or configuration errors (bad flags, missing
//! files, malformed configs).
//!
//! Run artifacts live under `$GSF_RUNS_DIR` (default `./runs`), one
//! exclusively-owned directory per training run.

use std::cell::RefCell;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use serde::Serialize;

use gsf::apps::{
    apply_edit, cross_model_transfer, discover_directions, interpolate, mean_step_delta,
    project_image, DISCOVERY_SAMPLES, PROJECT_ITERS, PROJECT_RESTARTS,
};
use gsf::baseline::{latent_shift_baseline, MatchCriterion};
use gsf::config::{train_config_from, ConfigMap};
use gsf::data::{load_points_csv, points_to_samples, samples_to_points, save_points_csv};
use gsf::data::{load_image_dir, save_image_dir};
use gsf::eval::{
    curate_eval_set, fid, fit_pixel_pca, precision_recall, ppl, FeatureExtractor,
};
use gsf::loss::full_objective;
use gsf::model::{
    generate, image_arch, map_latent, sample_latent, synthesize, toy_arch, truncate_batch,
    Checkpoint,
};
use gsf::runs::{
    collect_report, render_report_json, render_report_text, runs_root, write_fid_plot,
    write_sample_grid, ExperimentRecord, MetricLine, RunDir,
};
use gsf::sketch::{load_sketch_set, SketchSet, SketchTranslator};
use gsf::train::{pretrain, train_with_observer, PretrainConfig, TrainData};
use gsf::{Error, Result};

#[derive(Parser)]
#[command(name = "gsf", version, about = "Customize a pretrained generator from a few exemplar sketches", long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a source model from scratch on its own dataset
    Pretrain {
        /// Flat key=value config file
        #[arg(long)]
        config: PathBuf,
    },
    /// Fine-tune a source model against exemplar sketches
    Train {
        /// Flat key=value config file
        #[arg(long)]
        config: PathBuf,
        /// Start from this checkpoint instead of the config's source model.
        /// The weight-regularizer anchor re-bases to this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint against a reference set
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Reference images: a directory of rasters or a CSV of 2D points
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Samples drawn for FID / precision-recall (untruncated)
        #[arg(long, default_value_t = 500)]
        n: usize,
        /// Path pairs for perceptual path length
        #[arg(long, default_value_t = 500)]
        ppl_n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// identity | pca:<dim> (fit on the reference set)
        #[arg(long, default_value = "identity")]
        extractor: String,
    },
    /// Latent-shift baseline: average matched minus average w
    Baseline {
        #[arg(long)]
        ckpt: PathBuf,
        /// Exemplar sketches: directory of rasters or CSV of sketch points
        #[arg(long = "sketch_dir", alias = "sketch-dir")]
        sketch_dir: PathBuf,
        /// chamfer | sbir
        #[arg(long)]
        criterion: String,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 1_000)]
        topk: usize,
        /// Output file (JSON: dw, w_sigma, matched)
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// edge | point-squash | point-direction | learned:<path>
        #[arg(long, default_value = "edge")]
        translator: String,
    },
    /// Draw truncated samples to individual files plus a tiled grid
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Truncation strength
        #[arg(long, default_value_t = 0.5)]
        psi: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Spherical interpolation between two seeded latents
    Interp {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed_a: u64,
        #[arg(long, default_value_t = 1)]
        seed_b: u64,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value_t = 0.5)]
        psi: f64,
        /// Output grid PNG
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a principal latent direction and show before/after pairs
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        /// Which principal direction (0 = largest variance)
        #[arg(long, default_value_t = 0)]
        rank: usize,
        #[arg(long, default_value_t = 2.0)]
        magnitude: f64,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output grid PNG (original | edited per row)
        #[arg(long)]
        out: PathBuf,
        /// Also write the discovered directions as a labeled vector file
        #[arg(long)]
        directions_out: Option<PathBuf>,
        #[arg(long, default_value_t = DISCOVERY_SAMPLES)]
        discovery_samples: usize,
    },
    /// Recover the latent of a target image by optimization
    Project {
        #[arg(long)]
        ckpt: PathBuf,
        /// Target: a raster file, or a CSV whose first row is a 2D point
        #[arg(long)]
        target: PathBuf,
        /// Output directory (projection.json + reconstruction)
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = PROJECT_RESTARTS)]
        restarts: usize,
        #[arg(long, default_value_t = PROJECT_ITERS)]
        iters: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// identity | pca:<dim> — pca is unavailable here (no reference set)
        #[arg(long, default_value = "identity")]
        extractor: String,
    },
    /// Feed the same latents to a source model and its customized variant
    Transfer {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        customized: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output grid PNG (original | customized per row)
        #[arg(long)]
        out: PathBuf,
    },
    /// Deterministically curate an evaluation set near the sketches
    Curate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "sketch_dir", alias = "sketch-dir")]
        sketch_dir: PathBuf,
        /// Candidates sampled from the generator
        #[arg(long, default_value_t = 2_000)]
        n: usize,
        /// Size of the chamfer-ranked shortlist
        #[arg(long, default_value_t = 200)]
        pool: usize,
        /// Final kept subset
        #[arg(long, default_value_t = 50)]
        keep: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSON (indices, scores, curation method)
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "edge")]
        translator: String,
        /// Also save the kept images here
        #[arg(long)]
        images_out: Option<PathBuf>,
    },
    /// Consolidate completed runs into a best-FID table
    Report {
        /// Run root (default: $GSF_RUNS_DIR or ./runs)
        #[arg(long)]
        root: Option<PathBuf>,
        /// Also write the table as JSON here
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) | Error::Input(_) | Error::Io { .. } | Error::Checkpoint(_) => 2,
                _ => 1,
            };
            std::process::exit(code);
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain { config } => cmd_pretrain(&config),
        Command::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Command::Eval {
            ckpt,
            reference,
            out,
            n,
            ppl_n,
            seed,
            extractor,
        } => cmd_eval(&ckpt, &reference, &out, n, ppl_n, seed, &extractor),
        Command::Baseline {
            ckpt,
            sketch_dir,
            criterion,
            n,
            topk,
            out,
            seed,
            translator,
        } => cmd_baseline(&ckpt, &sketch_dir, &criterion, n, topk, &out, seed, &translator),
        Command::Sample {
            ckpt,
            n,
            psi,
            seed,
            out,
        } => cmd_sample(&ckpt, n, psi, seed, &out),
        Command::Interp {
            ckpt,
            seed_a,
            seed_b,
            steps,
            psi,
            out,
        } => cmd_interp(&ckpt, seed_a, seed_b, steps, psi, &out),
        Command::Edit {
            ckpt,
            rank,
            magnitude,
            n,
            seed,
            out,
            directions_out,
            discovery_samples,
        } => cmd_edit(
            &ckpt,
            rank,
            magnitude,
            n,
            seed,
            &out,
            directions_out.as_deref(),
            discovery_samples,
        ),
        Command::Project {
            ckpt,
            target,
            out_dir,
            restarts,
            iters,
            seed,
            extractor,
        } => cmd_project(&ckpt, &target, &out_dir, restarts, iters, seed, &extractor),
        Command::Transfer {
            original,
            customized,
            n,
            seed,
            out,
        } => cmd_transfer(&original, &customized, n, seed, &out),
        Command::Curate {
            ckpt,
            sketch_dir,
            n,
            pool,
            keep,
            seed,
            out,
            translator,
            images_out,
        } => cmd_curate(
            &ckpt,
            &sketch_dir,
            n,
            pool,
            keep,
            seed,
            &out,
            &translator,
            images_out.as_deref(),
        ),
        Command::Report { root, json } => cmd_report(root.as_deref(), json.as_deref()),
    }
}

// ---------------------------------------------------------------------------
// Shared loading helpers
// ---------------------------------------------------------------------------

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "csv")
}

/// Load a sample batch shaped like the generator output: a CSV of 2D points
/// (for vector-valued models) or a directory of rasters.
fn load_samples(path: &Path, shape: [usize; 3]) -> Result<ArrayD<f64>> {
    if is_csv(path) {
        if shape != [2, 1, 1] {
            return Err(Error::Config(format!(
                "CSV point data needs a [2,1,1] model output, got {shape:?}"
            )));
        }
        Ok(points_to_samples(&load_points_csv(path)?))
    } else {
        if shape[0] != 1 {
            return Err(Error::Config(format!(
                "image directories load as single-channel, but the model wants {} channels",
                shape[0]
            )));
        }
        load_image_dir(path, shape[1], shape[2])
    }
}

/// Load exemplar sketches in the sketch domain implied by the translator:
/// a CSV of sketch-space points or a directory of sketch rasters.
fn load_sketches(
    path: &Path,
    translator: &SketchTranslator,
    output_shape: [usize; 3],
) -> Result<SketchSet> {
    let sk = translator.sketch_shape(output_shape);
    if is_csv(path) {
        let rows = points_to_samples(&load_points_csv(path)?);
        let samples = (0..rows.shape()[0])
            .map(|i| rows.index_axis(Axis(0), i).to_owned().into_dyn())
            .collect();
        Ok(SketchSet { samples })
    } else {
        load_sketch_set(path, sk[1], sk[2])
    }
}

/// "edge" | "point-squash" | "point-direction" | "learned:<path>".
fn parse_translator(s: &str) -> Result<SketchTranslator> {
    match s {
        "edge" => Ok(SketchTranslator::EdgeOperator),
        "point-squash" => Ok(SketchTranslator::PointSquash),
        "point-direction" => Ok(SketchTranslator::PointDirection),
        other => match other.strip_prefix("learned:") {
            Some(p) => SketchTranslator::load(Path::new(p)),
            None => Err(Error::Config(format!(
                "unknown translator `{other}` (expected edge | point-squash | point-direction | learned:<path>)"
            ))),
        },
    }
}

/// "identity" | "pca:<dim>"; PCA is fit on `reference`.
fn parse_extractor(s: &str, reference: Option<&ArrayD<f64>>) -> Result<FeatureExtractor> {
    match s {
        "identity" => Ok(FeatureExtractor::Identity),
        other => match other.strip_prefix("pca:") {
            Some(k) => {
                let dim: usize = k
                    .parse()
                    .map_err(|_| Error::Config(format!("bad PCA dimension `{k}`")))?;
                let reference = reference.ok_or_else(|| {
                    Error::Config("pca extractor needs a reference set to fit on".into())
                })?;
                fit_pixel_pca(reference, dim)
            }
            None => Err(Error::Config(format!(
                "unknown extractor `{other}` (expected identity | pca:<dim>)"
            ))),
        },
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// For point-valued models also drop a CSV next to the rasters so the samples
/// stay machine-readable.
fn save_batch(dir: &Path, images: &ArrayD<f64>) -> Result<()> {
    save_image_dir(dir, images)?;
    if images.shape()[1..] == [2, 1, 1] {
        save_points_csv(&dir.join("samples.csv"), &samples_to_points(images))?;
    }
    Ok(())
}

/// Interleave two equally-shaped batches row by row for a 2-column grid.
fn interleave(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    let n = a.shape()[0];
    let mut shape = a.shape().to_vec();
    shape[0] = 2 * n;
    let mut out = ArrayD::zeros(IxDyn(&shape));
    for i in 0..n {
        out.index_axis_mut(Axis(0), 2 * i)
            .assign(&a.index_axis(Axis(0), i));
        out.index_axis_mut(Axis(0), 2 * i + 1)
            .assign(&b.index_axis(Axis(0), i));
    }
    out
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

fn cmd_pretrain(config: &Path) -> Result<()> {
    let cfg = ConfigMap::load(config)?;
    let arch = match cfg.require("arch")?.as_str() {
        "toy" => toy_arch(),
        "image" => image_arch(cfg.get_or("channels", 1usize)?),
        other => {
            return Err(Error::Config(format!(
                "unknown arch `{other}` (expected toy | image)"
            )))
        }
    };
    let data_path = PathBuf::from(cfg.require("data")?);
    let out = PathBuf::from(cfg.require("out")?);
    let mut pcfg = PretrainConfig::default();
    pcfg.iters = cfg.get_or("pretrain.iters", pcfg.iters)?;
    pcfg.batch_size = cfg.get_or("pretrain.batch_size", pcfg.batch_size)?;
    pcfg.lr = cfg.get_or("pretrain.lr", pcfg.lr)?;
    pcfg.beta1 = cfg.get_or("pretrain.beta1", pcfg.beta1)?;
    pcfg.beta2 = cfg.get_or("pretrain.beta2", pcfg.beta2)?;
    pcfg.r1_gamma = cfg.get_or("pretrain.r1_gamma", pcfg.r1_gamma)?;
    pcfg.seed = cfg.get_or("pretrain.seed", pcfg.seed)?;
    pcfg.d_hidden = cfg.get_or("pretrain.d_hidden", pcfg.d_hidden)?;
    cfg.finish()?;

    let pool = load_samples(&data_path, arch.output_shape)?;
    let started = Instant::now();
    let ckpt = pretrain(arch, &pool, &pcfg)?;
    ckpt.save(&out)?;
    println!(
        "pretrained {} iterations in {:.1}s -> {}",
        pcfg.iters,
        started.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(config: &Path, resume: Option<&Path>) -> Result<()> {
    let raw = std::fs::read_to_string(config)
        .map_err(|e| Error::io(config.display().to_string(), e))?;
    let cfg = ConfigMap::parse(&raw)?;
    let tcfg = train_config_from(&cfg)?;

    let ckpt_path = PathBuf::from(cfg.require("ckpt")?);
    let sketch_path = PathBuf::from(cfg.require("sketch_dir")?);
    let image_path = cfg.get("image_dir").map(PathBuf::from);
    let eval_path = PathBuf::from(cfg.require("eval_dir")?);
    let translator_name = cfg.get("translator").unwrap_or_else(|| "edge".into());
    let extractor_name = cfg.get("extractor").unwrap_or_else(|| "identity".into());
    let default_name = format!(
        "{}-{}",
        config
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into()),
        tcfg.seed
    );
    let run_name = cfg.get("run").unwrap_or(default_name);
    cfg.finish()?;

    let translator = parse_translator(&translator_name)?;
    let source = Checkpoint::load(resume.unwrap_or(&ckpt_path))?;
    let shape = source.generator.arch.output_shape;

    let sketches = load_sketches(&sketch_path, &translator, shape)?;
    let images = image_path.map(|p| load_samples(&p, shape)).transpose()?;
    let eval_ref = load_samples(&eval_path, shape)?;
    let fx = parse_extractor(&extractor_name, Some(&eval_ref))?;
    let data = TrainData {
        sketches,
        images,
        eval_ref,
        fx,
    };

    let root = runs_root();
    std::fs::create_dir_all(&root).map_err(|e| Error::io(root.display().to_string(), e))?;
    let run = RunDir::create(&root, &run_name)?;
    run.write_config(&raw)?;

    // The eval observer logs the most recent step's combined losses next to
    // each FID point; the report observer just keeps them current.
    let last_losses = RefCell::new((0.0f64, 0.0f64));
    let log_err = RefCell::new(None::<Error>);
    let weights = tcfg.weights;
    let started = Instant::now();
    let outcome = train_with_observer(
        &source,
        &tcfg,
        translator,
        &data,
        |_, report| {
            *last_losses.borrow_mut() = full_objective(report, &weights);
        },
        |point| {
            let (g_loss, d_loss) = *last_losses.borrow();
            let line = MetricLine {
                iteration: point.iteration,
                fid: point.fid,
                g_loss,
                d_loss,
            };
            if let Err(e) = run.append_metric(&line) {
                log_err.borrow_mut().get_or_insert(e);
            }
            eprintln!("iter {:>6}  fid {:.4}", point.iteration, point.fid);
        },
    )?;
    if let Some(e) = log_err.into_inner() {
        return Err(e);
    }

    outcome.best.save(&run.file("ckpt_best.bin"))?;
    outcome.last.save(&run.file("ckpt_last.bin"))?;
    write_fid_plot(&run.file("fid.svg"), &outcome.series)?;
    grid_of_best(&run, &outcome.best)?;
    run.write_record(&ExperimentRecord {
        name: run_name.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        metrics_file: "metrics.jsonl".into(),
        ckpt_best: "ckpt_best.bin".into(),
        ckpt_last: "ckpt_last.bin".into(),
        best_fid: outcome.best_fid,
        best_iteration: outcome.best_iteration,
        wall_seconds: started.elapsed().as_secs_f64(),
        completed: true,
    })?;
    println!(
        "run `{}`: best fid {:.4} at iteration {} ({})",
        run_name,
        outcome.best_fid,
        outcome.best_iteration,
        run.path().display()
    );
    Ok(())
}

/// A 16-sample truncated grid from the best checkpoint, for eyeballing.
fn grid_of_best(run: &RunDir, best: &Checkpoint) -> Result<()> {
    let mut best = best.clone();
    let x = truncated_samples(&mut best, 16, 0.5, 0)?;
    write_sample_grid(&run.file("samples_best.png"), &x, 4)
}

fn truncated_samples(ckpt: &mut Checkpoint, n: usize, psi: f64, seed: u64) -> Result<ArrayD<f64>> {
    let g = ckpt.generator.clone();
    let z = sample_latent(n, seed, g.arch.d_z)?;
    let w = map_latent(&g, &z.values);
    let w_avg = ckpt.w_avg_or_estimate(gsf::model::W_AVG_SAMPLES, gsf::model::W_AVG_SEED)?;
    Ok(synthesize(&g, &truncate_batch(&w, &w_avg, psi)))
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// The report written by `eval`, exactly this key set.
#[derive(Serialize)]
struct CliEvalReport {
    fid: f64,
    ppl: f64,
    precision: f64,
    recall: f64,
    n_samples: usize,
    extractor: &'static str,
    seed: u64,
}

fn cmd_eval(
    ckpt: &Path,
    reference: &Path,
    out: &Path,
    n: usize,
    ppl_n: usize,
    seed: u64,
    extractor: &str,
) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let g = &ckpt.generator;
    let reference = load_samples(reference, g.arch.output_shape)?;
    let fx = parse_extractor(extractor, Some(&reference))?;

    // FID samples are drawn untruncated.
    let z = sample_latent(n, seed, g.arch.d_z)?;
    let samples = generate(g, &z.values);
    let fid_v = fid(&samples, &reference, &fx)?;
    let gen_feats = fx.extract(&samples);
    let ref_feats = fx.extract(&reference);
    let (precision, recall) = precision_recall(&gen_feats, &ref_feats, 3)?;
    let ppl_v = ppl(g, ppl_n, 1e-4, seed, &fx, false)?;

    let report = CliEvalReport {
        fid: fid_v,
        ppl: ppl_v,
        precision,
        recall,
        n_samples: n,
        extractor: fx.kind_name(),
        seed,
    };
    write_json(out, &report)?;
    println!(
        "fid {:.4}  ppl {:.4}  precision {:.3}  recall {:.3} -> {}",
        fid_v,
        ppl_v,
        precision,
        recall,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// baseline
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ShiftFile {
    dw: Vec<f64>,
    w_sigma: Vec<f64>,
    matched: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_baseline(
    ckpt: &Path,
    sketch_dir: &Path,
    criterion: &str,
    n: usize,
    topk: usize,
    out: &Path,
    seed: u64,
    translator: &str,
) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let g = &ckpt.generator;
    let translator = parse_translator(translator)?;
    let sketches = load_sketches(sketch_dir, &translator, g.arch.output_shape)?;
    let criterion = match criterion {
        "chamfer" => MatchCriterion::Chamfer { translator },
        "sbir" => MatchCriterion::FeatureCosine {
            translator,
            fx: FeatureExtractor::Identity,
        },
        other => {
            return Err(Error::Config(format!(
                "unknown criterion `{other}` (expected chamfer | sbir)"
            )))
        }
    };
    let shift = latent_shift_baseline(g, &criterion, &sketches, n, topk, seed)?;
    write_json(
        out,
        &ShiftFile {
            dw: shift.dw.to_vec(),
            w_sigma: shift.w_sigma.to_vec(),
            matched: shift.matched.clone(),
        },
    )?;
    let norm = shift.dw.dot(&shift.dw).sqrt();
    println!(
        "matched {} of {} samples, |dw| = {:.4} -> {}",
        shift.matched.len(),
        n,
        norm,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sample / interp / edit / project / transfer
// ---------------------------------------------------------------------------

fn cmd_sample(ckpt: &Path, n: usize, psi: f64, seed: u64, out: &Path) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    let mut ckpt = Checkpoint::load(ckpt)?;
    let x = truncated_samples(&mut ckpt, n, psi, seed)?;
    save_batch(out, &x)?;
    let cols = (n as f64).sqrt().ceil() as usize;
    write_sample_grid(&out.join("grid.png"), &x, cols.max(1))?;
    println!("{n} samples at psi={psi} -> {}", out.display());
    Ok(())
}

fn cmd_interp(
    ckpt: &Path,
    seed_a: u64,
    seed_b: u64,
    steps: usize,
    psi: f64,
    out: &Path,
) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let g = &ckpt.generator;
    let z1 = row0(&sample_latent(1, seed_a, g.arch.d_z)?.values);
    let z2 = row0(&sample_latent(1, seed_b, g.arch.d_z)?.values);
    let frames = interpolate(g, &z1, &z2, steps, psi)?;
    write_sample_grid(out, &frames, steps)?;
    println!(
        "{steps}-step path, mean frame delta {:.4} -> {}",
        mean_step_delta(&frames),
        out.display()
    );
    Ok(())
}

fn row0(z: &Array2<f64>) -> Array1<f64> {
    z.row(0).to_owned()
}

#[allow(clippy::too_many_arguments)]
fn cmd_edit(
    ckpt: &Path,
    rank: usize,
    magnitude: f64,
    n: usize,
    seed: u64,
    out: &Path,
    directions_out: Option<&Path>,
    discovery_samples: usize,
) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let g = &ckpt.generator;
    let dirs = discover_directions(g, discovery_samples, rank + 1, seed)?;
    if let Some(path) = directions_out {
        let mut text = String::new();
        for d in &dirs {
            text.push_str(&format!(
                "direction {} eigenvalue {:.6}:", d.rank, d.eigenvalue
            ));
            for v in d.vector.iter() {
                text.push_str(&format!(" {v:.6}"));
            }
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    let direction = &dirs[rank];

    let z = sample_latent(n, seed.wrapping_add(1), g.arch.d_z)?;
    let w = map_latent(g, &z.values);
    let mut edited = w.clone();
    for i in 0..n {
        let row = apply_edit(&w.row(i).to_owned(), direction, magnitude)?;
        edited.row_mut(i).assign(&row);
    }
    let pairs = interleave(&synthesize(g, &w), &synthesize(g, &edited));
    write_sample_grid(out, &pairs, 2)?;
    println!(
        "direction {} (eigenvalue {:.4}) at magnitude {} on {} samples -> {}",
        rank,
        direction.eigenvalue,
        magnitude,
        n,
        out.display()
    );
    Ok(())
}

fn load_target(path: &Path, shape: [usize; 3]) -> Result<ArrayD<f64>> {
    let batch = if is_csv(path) {
        let points = load_points_csv(path)?;
        if shape != [2, 1, 1] {
            return Err(Error::Config(format!(
                "CSV target needs a [2,1,1] model output, got {shape:?}"
            )));
        }
        points_to_samples(&points.slice(ndarray::s![..1, ..]).to_owned())
    } else {
        // A single raster file: load its parent-free path via a temp batch of 1.
        let img = image::open(path)
            .map_err(|e| Error::Input(format!("unreadable image {}: {e}", path.display())))?
            .to_luma8();
        if shape[0] != 1 {
            return Err(Error::Config(format!(
                "raster target needs a single-channel model, got {} channels",
                shape[0]
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        let (iw, ih) = img.dimensions();
        let mut out = ArrayD::zeros(IxDyn(&[1, 1, h, w]));
        for y in 0..h {
            for x in 0..w {
                let sy = (((y as f64 + 0.5) * ih as f64 / h as f64) as u32).min(ih - 1);
                let sx = (((x as f64 + 0.5) * iw as f64 / w as f64) as u32).min(iw - 1);
                let v = img.get_pixel(sx, sy).0[0] as f64 / 255.0;
                out[[0, 0, y, x]] = v * 2.0 - 1.0;
            }
        }
        out
    };
    Ok(batch.index_axis(Axis(0), 0).to_owned())
}

#[derive(Serialize)]
struct ProjectionFile {
    z: Vec<f64>,
    loss: f64,
}

fn cmd_project(
    ckpt: &Path,
    target: &Path,
    out_dir: &Path,
    restarts: usize,
    iters: u64,
    seed: u64,
    extractor: &str,
) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let g = &ckpt.generator;
    let target = load_target(target, g.arch.output_shape)?;
    let fx = parse_extractor(extractor, None)?;
    let proj = project_image(g, &fx, &target, restarts, iters, seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    write_json(
        &out_dir.join("projection.json"),
        &ProjectionFile {
            z: proj.z.to_vec(),
            loss: proj.loss,
        },
    )?;
    let pair = interleave(
        &target.clone().insert_axis(Axis(0)),
        &proj.reconstruction.clone().insert_axis(Axis(0)),
    );
    write_sample_grid(&out_dir.join("reconstruction.png"), &pair, 2)?;
    if g.arch.output_shape == [2, 1, 1] {
        save_points_csv(
            &out_dir.join("reconstruction.csv"),
            &samples_to_points(&proj.reconstruction.insert_axis(Axis(0))),
        )?;
    }
    println!(
        "projection loss {:.6} after {} iters x {} restarts -> {}",
        proj.loss,
        iters,
        restarts,
        out_dir.display()
    );
    Ok(())
}

fn cmd_transfer(original: &Path, customized: &Path, n: usize, seed: u64, out: &Path) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("need at least one latent".into()));
    }
    let original = Checkpoint::load(original)?.generator;
    let customized = Checkpoint::load(customized)?.generator;
    let z = sample_latent(n, seed, original.arch.d_z)?;
    let mut rows: Option<(ArrayD<f64>, ArrayD<f64>)> = None;
    for i in 0..n {
        let (a, b) = cross_model_transfer(&z.values.row(i).to_owned(), &original, &customized)?;
        let (acc_a, acc_b) = rows.get_or_insert_with(|| {
            let mut shape = vec![n];
            shape.extend_from_slice(a.shape());
            (ArrayD::zeros(IxDyn(&shape)), ArrayD::zeros(IxDyn(&shape)))
        });
        acc_a.index_axis_mut(Axis(0), i).assign(&a);
        acc_b.index_axis_mut(Axis(0), i).assign(&b);
    }
    let (a, b) = rows.expect("n >= 1");
    write_sample_grid(out, &interleave(&a, &b), 2)?;
    println!("{n} shared latents, original | customized -> {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// curate / report
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cmd_curate(
    ckpt: &Path,
    sketch_dir: &Path,
    n: usize,
    pool: usize,
    keep: usize,
    seed: u64,
    out: &Path,
    translator: &str,
    images_out: Option<&Path>,
) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let g = &ckpt.generator;
    let translator = parse_translator(translator)?;
    let sketches = load_sketches(sketch_dir, &translator, g.arch.output_shape)?;
    let z = sample_latent(n, seed, g.arch.d_z)?;
    let candidates = generate(g, &z.values);
    let set = curate_eval_set(&candidates, &sketches, pool, keep, &translator)?;
    write_json(out, &set)?;
    if let Some(dir) = images_out {
        let mut shape = candidates.shape().to_vec();
        shape[0] = set.indices.len();
        let mut kept = ArrayD::zeros(IxDyn(&shape));
        for (row, &i) in set.indices.iter().enumerate() {
            kept.index_axis_mut(Axis(0), row)
                .assign(&candidates.index_axis(Axis(0), i));
        }
        save_batch(dir, &kept)?;
    }
    println!(
        "kept {} of {} candidates (pool {}) -> {}",
        set.indices.len(),
        n,
        pool,
        out.display()
    );
    Ok(())
}

fn cmd_report(root: Option<&Path>, json: Option<&Path>) -> Result<()> {
    let root = root.map(Path::to_path_buf).unwrap_or_else(runs_root);
    let rows = collect_report(&root)?;
    print!("{}", render_report_text(&rows));
    if let Some(path) = json {
        std::fs::write(path, render_report_json(&rows))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}
