//! Run-directory layout, experiment records, metric logs, and plot/grid
//! emission.
//!
//! Every run owns one directory under the run root (`GSF_RUNS_DIR`, default
//! `./runs`). The layout is fixed:
//!
//! ```text
//! <root>/<name>/config.txt      exact config snapshot, re-runnable
//! <root>/<name>/record.json     ExperimentRecord (written on completion)
//! <root>/<name>/metrics.jsonl   one JSON object per evaluation
//! <root>/<name>/ckpt_best.bin   minimum-FID checkpoint
//! <root>/<name>/ckpt_last.bin   final checkpoint
//! <root>/<name>/*.svg, *.png    plots and sample grids
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::EvalPoint;

/// Run root: `$GSF_RUNS_DIR` if set, else `./runs`.
pub fn runs_root() -> PathBuf {
    std::env::var_os("GSF_RUNS_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Completed-run summary. Immutable once written; the config snapshot plus
/// the seeds inside it reproduce the checkpoints bit for bit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub name: String,
    /// Crate version that produced the run.
    pub code_version: String,
    /// Relative path of the metric series file.
    pub metrics_file: String,
    pub ckpt_best: String,
    pub ckpt_last: String,
    pub best_fid: f64,
    pub best_iteration: u64,
    pub wall_seconds: f64,
    pub completed: bool,
}

/// One metrics.jsonl line: an evaluation plus the loss terms at that step.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricLine {
    pub iteration: u64,
    pub fid: f64,
    #[serde(default)]
    pub g_loss: f64,
    #[serde(default)]
    pub d_loss: f64,
}

/// Handle to one exclusively-owned run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Create a fresh run directory; an existing one is refused so two runs
    /// can never share a directory.
    pub fn create(root: &Path, name: &str) -> Result<RunDir> {
        if name.is_empty() || name.contains('/') || name.contains("..") {
            return Err(Error::Config(format!("bad run name `{name}`")));
        }
        std::fs::create_dir_all(root).map_err(|e| Error::io(root.display().to_string(), e))?;
        let path = root.join(name);
        std::fs::create_dir(&path).map_err(|e| {
            Error::Config(format!(
                "run directory {} not usable (already exists?): {e}",
                path.display()
            ))
        })?;
        Ok(RunDir { path })
    }

    /// Open an existing run directory (for reporting).
    pub fn open(path: &Path) -> Result<RunDir> {
        if !path.is_dir() {
            return Err(Error::Input(format!("no run directory at {}", path.display())));
        }
        Ok(RunDir {
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_config(&self, text: &str) -> Result<()> {
        let p = self.file("config.txt");
        std::fs::write(&p, text).map_err(|e| Error::io(p.display().to_string(), e))
    }

    pub fn read_config(&self) -> Result<String> {
        let p = self.file("config.txt");
        std::fs::read_to_string(&p).map_err(|e| Error::io(p.display().to_string(), e))
    }

    pub fn append_metric(&self, line: &MetricLine) -> Result<()> {
        let p = self.file("metrics.jsonl");
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(|e| Error::io(p.display().to_string(), e))?;
        let json = serde_json::to_string(line)
            .map_err(|e| Error::Input(format!("metric serialization: {e}")))?;
        writeln!(f, "{json}").map_err(|e| Error::io(p.display().to_string(), e))
    }

    pub fn read_metrics(&self) -> Result<Vec<MetricLine>> {
        let p = self.file("metrics.jsonl");
        let text =
            std::fs::read_to_string(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(line).map_err(|e| {
                Error::Input(format!("{}:{}: bad metric line: {e}", p.display(), i + 1))
            })?);
        }
        Ok(out)
    }

    pub fn write_record(&self, record: &ExperimentRecord) -> Result<()> {
        let p = self.file("record.json");
        let json = serde_json::to_string_pretty(record)
            .map_err(|e| Error::Input(format!("record serialization: {e}")))?;
        std::fs::write(&p, json).map_err(|e| Error::io(p.display().to_string(), e))
    }

    pub fn read_record(&self) -> Result<ExperimentRecord> {
        let p = self.file("record.json");
        let text =
            std::fs::read_to_string(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Input(format!("{}: bad record: {e}", p.display())))
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct ReportRow {
    pub name: String,
    pub best_fid: f64,
    pub best_iteration: u64,
    /// True on the row with the minimum best_fid.
    pub is_minimum: bool,
}

/// Collect completed runs under `root` into a per-run best-FID table,
/// marking the minimum. Errors when nothing has completed.
pub fn collect_report(root: &Path) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root.display().to_string(), e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let run = RunDir::open(&dir)?;
        match run.read_record() {
            Ok(rec) if rec.completed => rows.push(ReportRow {
                name: rec.name,
                best_fid: rec.best_fid,
                best_iteration: rec.best_iteration,
                is_minimum: false,
            }),
            _ => {} // incomplete or foreign directory: skip
        }
    }
    if rows.is_empty() {
        return Err(Error::Input(format!(
            "no completed runs under {}",
            root.display()
        )));
    }
    let min = rows
        .iter()
        .map(|r| r.best_fid)
        .fold(f64::INFINITY, f64::min);
    for r in &mut rows {
        r.is_minimum = r.best_fid == min;
    }
    Ok(rows)
}

/// Plain-text rendering with the minimum marked by `*`.
pub fn render_report_text(rows: &[ReportRow]) -> String {
    let name_w = rows
        .iter()
        .map(|r| r.name.len())
        .max()
        .unwrap_or(4)
        .max("run".len());
    let mut s = format!("{:<name_w$}  {:>10}  {:>9}\n", "run", "best FID", "iter");
    for r in rows {
        s.push_str(&format!(
            "{:<name_w$}  {:>10.4}  {:>9}{}\n",
            r.name,
            r.best_fid,
            r.best_iteration,
            if r.is_minimum { "  *" } else { "" }
        ));
    }
    s
}

pub fn render_report_json(rows: &[ReportRow]) -> String {
    serde_json::to_string_pretty(rows).expect("report rows serialize")
}

// ---------------------------------------------------------------------------
// Plots and grids
// ---------------------------------------------------------------------------

/// Minimal SVG line plot of (x, y) points, axes annotated with the ranges.
pub fn write_line_plot(path: &Path, title: &str, points: &[(f64, f64)]) -> Result<()> {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 48.0;
    if points.is_empty() {
        return Err(Error::Input("cannot plot an empty series".into()));
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut d = String::new();
    for (i, &(x, y)) in points.iter().enumerate() {
        d.push_str(if i == 0 { "M" } else { "L" });
        d.push_str(&format!("{:.1},{:.1} ", px(x), py(y)));
    }
    let svg = format!(
        concat!(
            "<svg xmlns='http://www.w3.org/2000/svg' width='{w}' height='{h}'>",
            "<rect width='100%' height='100%' fill='white'/>",
            "<text x='{tm}' y='24' font-size='16'>{title}</text>",
            "<path d='{d}' fill='none' stroke='black' stroke-width='1.5'/>",
            "<text x='{tm}' y='{bl}' font-size='11'>x: {x0:.4} .. {x1:.4}</text>",
            "<text x='{tm}' y='{bl2}' font-size='11'>y: {y0:.4} .. {y1:.4}</text>",
            "</svg>"
        ),
        w = W,
        h = H,
        tm = M,
        title = title,
        d = d.trim_end(),
        bl = H - 18.0,
        bl2 = H - 4.0,
        x0 = x0,
        x1 = x1,
        y0 = y0,
        y1 = y1,
    );
    std::fs::write(path, svg).map_err(|e| Error::io(path.display().to_string(), e))
}

/// FID-vs-iteration convenience wrapper.
pub fn write_fid_plot(path: &Path, series: &[EvalPoint]) -> Result<()> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .map(|p| (p.iteration as f64, p.fid))
        .collect();
    write_line_plot(path, "FID vs iteration", &pts)
}

/// Tile a [n, c, h, w] batch in [-1, 1] into one grayscale PNG grid (channel
/// mean for multi-channel samples), `cols` images per row.
pub fn write_sample_grid(path: &Path, images: &ArrayD<f64>, cols: usize) -> Result<()> {
    if images.ndim() != 4 || images.shape()[0] == 0 {
        return Err(Error::Input("sample grid needs a non-empty [n,c,h,w] batch".into()));
    }
    if cols == 0 {
        return Err(Error::Config("grid needs at least one column".into()));
    }
    let (n, c, h, w) = (
        images.shape()[0],
        images.shape()[1],
        images.shape()[2],
        images.shape()[3],
    );
    let cols = cols.min(n);
    let rows = n.div_ceil(cols);
    let pad = 2usize;
    let gw = cols * w + (cols + 1) * pad;
    let gh = rows * h + (rows + 1) * pad;
    let mut img = image::GrayImage::from_pixel(gw as u32, gh as u32, image::Luma([32u8]));
    for i in 0..n {
        let (gy, gx) = (i / cols, i % cols);
        let oy = pad + gy * (h + pad);
        let ox = pad + gx * (w + pad);
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.0;
                for ch in 0..c {
                    v += images[[i, ch, y, x]];
                }
                v = ((v / c as f64 + 1.0) * 0.5).clamp(0.0, 1.0);
                img.put_pixel(
                    (ox + x) as u32,
                    (oy + y) as u32,
                    image::Luma([(v * 255.0).round() as u8]),
                );
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))
}
