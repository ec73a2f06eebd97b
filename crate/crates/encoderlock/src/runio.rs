//! Run persistence: checkpoints, run-directory layout, embedding export,
//! and plot rendering.
//!
//! Layout of a run directory:
//!
//! ```text
//! run/
//!   config.json            full experiment config (input copy)
//!   manifest.json          config hash, seed, artifact paths, status
//!   rounds.jsonl           per-round loss bundle + challenger + ΔW
//!   selection_log.jsonl    per-round selection records
//!   critical_set.json      final selected coordinates
//!   encoder_baseline.json  checkpoint at lock start
//!   encoder_locked.json    checkpoint after locking
//!   state/                 resume state (encoder_current, lock_state)
//!   probe/report.json|.csv attacker-side report
//!   plots/*.png            metric curves
//!   failure_ledger.json    present only after partial failures
//! ```

use crate::error::{Error, Result};
use crate::nn::{ConvEncoder, EncoderArch, HeadSpec, MlpHead};
use crate::scalar::Scalar;
use crate::weightspace::{CriticalWeightRecord, CriticalWeightSet, MaskedAdam, MaskedOptimizer, ParamModel, WeightCoordinate};
use ndarray::{Array2, ArrayD};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_FORMAT: &str = "encoderlock/checkpoint@1";

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    arch: EncoderArch,
    params: Vec<ParamRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Persist encoder parameters. Values are stored as f64, which round-trips
/// f32 parameters exactly.
pub fn save_encoder<F: Scalar>(encoder: &ConvEncoder<F>, path: &Path) -> Result<()> {
    let params = (0..encoder.param_count())
        .map(|id| ParamRecord {
            name: encoder.param_name(id).to_string(),
            shape: encoder.param(id).shape().to_vec(),
            data: encoder.param(id).iter().map(|v| v.as_f64()).collect(),
        })
        .collect();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        arch: encoder.arch.clone(),
        params,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

pub fn load_encoder<F: Scalar>(path: &Path) -> Result<ConvEncoder<F>> {
    let raw = std::fs::read(path)?;
    let file: CheckpointFile = serde_json::from_slice(&raw)?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::validation(format!(
            "unknown checkpoint format `{}`",
            file.format
        )));
    }
    let mut rng = crate::seeds::stream(0, "checkpoint/placeholder", 0);
    let mut enc: ConvEncoder<F> = ConvEncoder::init(file.arch.clone(), &mut rng)?;
    if file.params.len() != enc.param_count() {
        return Err(Error::shape("checkpoint tensor count mismatch"));
    }
    for (id, rec) in file.params.iter().enumerate() {
        if rec.name != enc.param_name(id) {
            return Err(Error::validation(format!(
                "checkpoint tensor `{}` does not match expected `{}`",
                rec.name,
                enc.param_name(id)
            )));
        }
        let arr = ArrayD::from_shape_vec(
            rec.shape.clone(),
            rec.data.iter().map(|&v| F::from_f64(v)).collect(),
        )
        .map_err(|e| Error::shape(format!("checkpoint tensor `{}`: {e}", rec.name)))?;
        if arr.shape() != enc.param(id).shape() {
            return Err(Error::shape(format!(
                "checkpoint tensor `{}` has shape {:?}, expected {:?}",
                rec.name,
                arr.shape(),
                enc.param(id).shape()
            )));
        }
        enc.param_mut(id).assign(&arr);
    }
    Ok(enc)
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadFile {
    spec: HeadSpec,
    in_dim: usize,
    n_classes: usize,
    params: Vec<ParamRecord>,
}

pub fn save_head<F: Scalar>(
    head: &MlpHead<F>,
    spec: HeadSpec,
    in_dim: usize,
    n_classes: usize,
    path: &Path,
) -> Result<()> {
    let params = head
        .params()
        .into_iter()
        .enumerate()
        .map(|(i, p)| ParamRecord {
            name: format!("head.{}", i),
            shape: p.shape().to_vec(),
            data: p.iter().map(|v| v.as_f64()).collect(),
        })
        .collect();
    let file = HeadFile {
        spec,
        in_dim,
        n_classes,
        params,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

pub fn load_head<F: Scalar>(path: &Path) -> Result<(MlpHead<F>, HeadSpec, usize, usize)> {
    let raw = std::fs::read(path)?;
    let file: HeadFile = serde_json::from_slice(&raw)?;
    let mut rng = crate::seeds::stream(0, "head/placeholder", 0);
    let mut head: MlpHead<F> = MlpHead::init(file.spec, file.in_dim, file.n_classes, &mut rng)?;
    let params: Vec<ArrayD<F>> = file
        .params
        .iter()
        .map(|r| {
            ArrayD::from_shape_vec(r.shape.clone(), r.data.iter().map(|&v| F::from_f64(v)).collect())
                .map_err(|e| Error::shape(e.to_string()))
        })
        .collect::<Result<_>>()?;
    head.set_params(&params)?;
    Ok((head, file.spec, file.in_dim, file.n_classes))
}

// ---------------------------------------------------------------------------
// Lock resume state
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct LockStateFile {
    pub completed_round: u32,
    pub critical_set: Vec<CriticalWeightRecord>,
    pub budget: usize,
    pub adam: Vec<AdamSlotRecord>,
    pub rounds: Vec<crate::locktrain::RoundRecord>,
    pub challengers: Vec<crate::locktrain::ChallengerRecord>,
    pub selections: Vec<crate::dws::RoundSelectionRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AdamSlotRecord {
    pub layer: usize,
    pub index: usize,
    pub m: f64,
    pub v: f64,
    pub t: u32,
}

pub fn save_lock_state(path: &Path, state: &LockStateFile) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec(state)?)?;
    Ok(())
}

pub fn load_lock_state(path: &Path) -> Result<LockStateFile> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

pub fn adam_to_records<F: Scalar>(opt: &MaskedOptimizer<F>) -> Vec<AdamSlotRecord> {
    match opt {
        MaskedOptimizer::Sgd => Vec::new(),
        MaskedOptimizer::Adam(a) => a
            .export_slots()
            .into_iter()
            .map(|(c, m, v, t)| AdamSlotRecord {
                layer: c.layer,
                index: c.index,
                m,
                v,
                t,
            })
            .collect(),
    }
}

pub fn adam_from_records<F: Scalar>(rows: &[AdamSlotRecord]) -> MaskedOptimizer<F> {
    let mut adam = MaskedAdam::default();
    let slots: Vec<(WeightCoordinate, f64, f64, u32)> = rows
        .iter()
        .map(|r| (WeightCoordinate::new(r.layer, r.index), r.m, r.v, r.t))
        .collect();
    adam.import_slots(&slots);
    MaskedOptimizer::Adam(adam)
}

// ---------------------------------------------------------------------------
// Run directory
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        std::fs::create_dir_all(root.join("state"))?;
        std::fs::create_dir_all(root.join("probe"))?;
        std::fs::create_dir_all(root.join("plots"))?;
        Ok(RunDir { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(Error::validation(format!(
                "run directory {} does not exist",
                root.display()
            )));
        }
        Ok(RunDir { root })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn config_path(&self) -> PathBuf {
        self.path("config.json")
    }
    pub fn manifest_path(&self) -> PathBuf {
        self.path("manifest.json")
    }
    pub fn rounds_path(&self) -> PathBuf {
        self.path("rounds.jsonl")
    }
    pub fn selection_log_path(&self) -> PathBuf {
        self.path("selection_log.jsonl")
    }
    pub fn critical_set_path(&self) -> PathBuf {
        self.path("critical_set.json")
    }
    pub fn baseline_checkpoint_path(&self) -> PathBuf {
        self.path("encoder_baseline.json")
    }
    pub fn locked_checkpoint_path(&self) -> PathBuf {
        self.path("encoder_locked.json")
    }
    pub fn pretrained_head_path(&self) -> PathBuf {
        self.path("head_source.json")
    }
    pub fn lock_state_path(&self) -> PathBuf {
        self.path("state/lock_state.json")
    }
    pub fn current_checkpoint_path(&self) -> PathBuf {
        self.path("state/encoder_current.json")
    }
    pub fn report_json_path(&self) -> PathBuf {
        self.path("probe/report.json")
    }
    pub fn report_csv_path(&self) -> PathBuf {
        self.path("probe/report.csv")
    }
    pub fn failure_ledger_path(&self) -> PathBuf {
        self.path("failure_ledger.json")
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(value)?)?;
        Ok(())
    }

    pub fn append_jsonl<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let path = self.path(rel);
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{}", serde_json::to_string(value)?)?;
        Ok(())
    }

    pub fn read_jsonl<T: for<'de> Deserialize<'de>>(&self, rel: &str) -> Result<Vec<T>> {
        let path = self.path(rel);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let raw = std::fs::read_to_string(path)?;
        raw.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }

    /// Write the critical set in its serialized record form.
    pub fn write_critical_set(&self, set: &CriticalWeightSet, layer_names: &[String]) -> Result<()> {
        self.write_json("critical_set.json", &set.to_records(layer_names))
    }
}

/// SHA-256 hex digest of a serializable value's canonical JSON.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let canon = serde_json::to_vec(value)?;
    Ok(format!("{:x}", Sha256::digest(&canon)))
}

// ---------------------------------------------------------------------------
// Embedding export
// ---------------------------------------------------------------------------

/// Write embeddings (+ labels when present) as tab-separated text.
///
/// Header names each column; the label column is present only for labeled
/// data, and the header says so.
pub fn export_embeddings<F: Scalar>(
    embeddings: &Array2<F>,
    labels: Option<&[usize]>,
    path: &Path,
) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != embeddings.shape()[0] {
            return Err(Error::shape("labels length != embedding rows"));
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d = embeddings.shape()[1];
    let mut header = Vec::with_capacity(d + 1);
    if labels.is_some() {
        header.push("label".to_string());
    }
    for j in 0..d {
        header.push(format!("e{j}"));
    }
    writeln!(f, "{}", header.join("\t"))?;
    for (i, row) in embeddings.outer_iter().enumerate() {
        let mut cells = Vec::with_capacity(d + 1);
        if let Some(l) = labels {
            cells.push(l[i].to_string());
        }
        for v in row.iter() {
            cells.push(format!("{:.9e}", v.as_f64()));
        }
        writeln!(f, "{}", cells.join("\t"))?;
    }
    Ok(())
}

/// Read back an embedding export.
pub fn read_embeddings(path: &Path) -> Result<(Vec<Vec<f64>>, Option<Vec<usize>>)> {
    let raw = std::fs::read_to_string(path)?;
    let mut lines = raw.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::validation("empty embedding file"))?;
    let has_labels = header.starts_with("label\t") || header == "label";
    let mut vectors = Vec::new();
    let mut labels = if has_labels { Some(Vec::new()) } else { None };
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.split('\t');
        if let Some(lab) = labels.as_mut() {
            let l: usize = cells
                .next()
                .ok_or_else(|| Error::validation("missing label cell"))?
                .parse()
                .map_err(|e| Error::validation(format!("bad label: {e}")))?;
            lab.push(l);
        }
        let row: std::result::Result<Vec<f64>, _> = cells.map(|c| c.parse::<f64>()).collect();
        vectors.push(row.map_err(|e| Error::validation(format!("bad value: {e}")))?);
    }
    Ok((vectors, labels))
}

// ---------------------------------------------------------------------------
// Plots
// ---------------------------------------------------------------------------

const FONT: [(char, [u8; 7]); 44] = [
    ('0', [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e]),
    ('1', [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e]),
    ('2', [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f]),
    ('3', [0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e]),
    ('4', [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02]),
    ('5', [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e]),
    ('6', [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e]),
    ('7', [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08]),
    ('8', [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e]),
    ('9', [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c]),
    ('.', [0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c]),
    ('-', [0x00, 0x00, 0x00, 0x1f, 0x00, 0x00, 0x00]),
    ('%', [0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13]),
    (' ', [0x00; 7]),
    ('A', [0x0e, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11]),
    ('B', [0x1e, 0x11, 0x11, 0x1e, 0x11, 0x11, 0x1e]),
    ('C', [0x0e, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0e]),
    ('D', [0x1e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1e]),
    ('E', [0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x1f]),
    ('F', [0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x10]),
    ('G', [0x0e, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0f]),
    ('H', [0x11, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11]),
    ('I', [0x0e, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e]),
    ('J', [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0c]),
    ('K', [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11]),
    ('L', [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1f]),
    ('M', [0x11, 0x1b, 0x15, 0x15, 0x11, 0x11, 0x11]),
    ('N', [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11]),
    ('O', [0x0e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e]),
    ('P', [0x1e, 0x11, 0x11, 0x1e, 0x10, 0x10, 0x10]),
    ('Q', [0x0e, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0d]),
    ('R', [0x1e, 0x11, 0x11, 0x1e, 0x14, 0x12, 0x11]),
    ('S', [0x0f, 0x10, 0x10, 0x0e, 0x01, 0x01, 0x1e]),
    ('T', [0x1f, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04]),
    ('U', [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e]),
    ('V', [0x11, 0x11, 0x11, 0x11, 0x11, 0x0a, 0x04]),
    ('W', [0x11, 0x11, 0x11, 0x15, 0x15, 0x1b, 0x11]),
    ('X', [0x11, 0x11, 0x0a, 0x04, 0x0a, 0x11, 0x11]),
    ('Y', [0x11, 0x11, 0x0a, 0x04, 0x04, 0x04, 0x04]),
    ('Z', [0x1f, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1f]),
    ('/', [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10]),
    (':', [0x00, 0x0c, 0x0c, 0x00, 0x0c, 0x0c, 0x00]),
    ('(', [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02]),
    (')', [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08]),
];

fn glyph(c: char) -> [u8; 7] {
    let up = c.to_ascii_uppercase();
    FONT.iter()
        .find(|(g, _)| *g == up)
        .map(|(_, rows)| *rows)
        .unwrap_or([0x1f, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1f])
}

fn draw_text(img: &mut image::RgbImage, x: i64, y: i64, text: &str, color: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        let g = glyph(ch);
        for (gy, row) in g.iter().enumerate() {
            for gx in 0..5i64 {
                if row & (1 << (4 - gx)) != 0 {
                    let (px, py) = (cx + gx, y + gy as i64);
                    if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                        img.put_pixel(px as u32, py as u32, image::Rgb(color));
                    }
                }
            }
        }
        cx += 6;
    }
}

fn draw_line(img: &mut image::RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = x0 + (x1 - x0) * t;
        let y = y0 + (y1 - y0) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    }
}

const SERIES_COLORS: [[u8; 3]; 6] = [
    [204, 51, 51],
    [51, 102, 204],
    [34, 153, 84],
    [230, 126, 34],
    [142, 68, 173],
    [90, 90, 90],
];

/// Render a simple line chart to a PNG.
pub fn render_line_chart(
    path: &Path,
    title: &str,
    series: &[(String, Vec<(f64, f64)>)],
    x_label: &str,
    y_label: &str,
) -> Result<()> {
    let (w, h) = (820u32, 520u32);
    let (ml, mr, mt, mb) = (70.0, 30.0, 40.0, 60.0);
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));

    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, pts)| pts.iter().copied()).collect();
    if points.is_empty() {
        return Err(Error::validation("no points to plot"));
    }
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &points {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if (x_max - x_min).abs() < 1e-12 {
        x_max = x_min + 1.0;
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_max = y_min + 1.0;
    }
    let pad = (y_max - y_min) * 0.08;
    y_min -= pad;
    y_max += pad;

    let plot_w = w as f64 - ml - mr;
    let plot_h = h as f64 - mt - mb;
    let sx = |x: f64| ml + (x - x_min) / (x_max - x_min) * plot_w;
    let sy = |y: f64| mt + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h;

    let axis = [30, 30, 30];
    draw_line(&mut img, ml, mt, ml, h as f64 - mb, axis);
    draw_line(&mut img, ml, h as f64 - mb, w as f64 - mr, h as f64 - mb, axis);
    // ticks
    for k in 0..=5 {
        let xv = x_min + (x_max - x_min) * k as f64 / 5.0;
        let px = sx(xv);
        draw_line(&mut img, px, h as f64 - mb, px, h as f64 - mb + 4.0, axis);
        draw_text(&mut img, px as i64 - 12, h as i64 - (mb as i64) + 8, &format_tick(xv), axis);
        let yv = y_min + (y_max - y_min) * k as f64 / 5.0;
        let py = sy(yv);
        draw_line(&mut img, ml - 4.0, py, ml, py, axis);
        draw_text(&mut img, 8, py as i64 - 3, &format_tick(yv), axis);
    }
    draw_text(&mut img, ml as i64, 12, title, axis);
    draw_text(&mut img, (w as i64) / 2 - 20, h as i64 - 16, x_label, axis);
    draw_text(&mut img, 8, mt as i64 - 14, y_label, axis);

    for (si, (name, pts)) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        for pair in pts.windows(2) {
            draw_line(&mut img, sx(pair[0].0), sy(pair[0].1), sx(pair[1].0), sy(pair[1].1), color);
        }
        for &(x, y) in pts {
            let (px, py) = (sx(x), sy(y));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (qx, qy) = (px as i64 + dx, py as i64 + dy);
                    if qx >= 0 && qy >= 0 && (qx as u32) < w && (qy as u32) < h {
                        img.put_pixel(qx as u32, qy as u32, image::Rgb(color));
                    }
                }
            }
        }
        // legend
        let ly = mt as i64 + 14 * si as i64;
        let lx = w as i64 - mr as i64 - 160;
        for dx in 0..10i64 {
            for dy in 0..10i64 {
                img.put_pixel((lx + dx) as u32, (ly + dy) as u32, image::Rgb(color));
            }
        }
        draw_text(&mut img, lx + 14, ly + 1, name, axis);
    }

    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path)?;
    Ok(())
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else if v.abs() >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::EncoderArch;
    use tempfile::tempdir;

    #[test]
    fn encoder_checkpoint_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let mut rng = crate::seeds::stream(3, "test/ckpt", 0);
        let enc: ConvEncoder<f32> = ConvEncoder::init(
            EncoderArch {
                in_shape: (3, 16, 16),
                conv_channels: vec![4],
                embed_dim: 8,
            },
            &mut rng,
        )
        .unwrap();
        let path = dir.path().join("enc.json");
        save_encoder(&enc, &path).unwrap();
        let loaded: ConvEncoder<f32> = load_encoder(&path).unwrap();
        for id in 0..enc.param_count() {
            assert_eq!(enc.param(id), loaded.param(id), "tensor {id}");
        }
    }

    #[test]
    fn head_checkpoint_roundtrip() {
        let dir = tempdir().unwrap();
        let mut rng = crate::seeds::stream(4, "test/head-ckpt", 0);
        let head: MlpHead<f32> = MlpHead::init(HeadSpec::mlp(2, 16), 8, 5, &mut rng).unwrap();
        let path = dir.path().join("head.json");
        save_head(&head, HeadSpec::mlp(2, 16), 8, 5, &path).unwrap();
        let (loaded, spec, in_dim, classes) = load_head::<f32>(&path).unwrap();
        assert_eq!(loaded.checksum(), head.checksum());
        assert_eq!(spec, HeadSpec::mlp(2, 16));
        assert_eq!((in_dim, classes), (8, 5));
    }

    #[test]
    fn embeddings_roundtrip_with_and_without_labels() {
        let dir = tempdir().unwrap();
        let emb = Array2::<f32>::from_shape_fn((6, 3), |(i, j)| (i as f32 + 1.0) * 0.1 + j as f32);
        let labels = vec![0usize, 1, 2, 0, 1, 2];
        let p1 = dir.path().join("labeled.tsv");
        export_embeddings(&emb, Some(&labels), &p1).unwrap();
        let (v, l) = read_embeddings(&p1).unwrap();
        assert_eq!(l.unwrap(), labels);
        assert_eq!(v.len(), 6);
        for (i, row) in v.iter().enumerate() {
            for (j, &val) in row.iter().enumerate() {
                assert!((val - emb[[i, j]] as f64).abs() < 1e-6);
            }
        }
        let p2 = dir.path().join("unlabeled.tsv");
        export_embeddings(&emb, None, &p2).unwrap();
        let raw = std::fs::read_to_string(&p2).unwrap();
        assert!(!raw.starts_with("label"));
        let (_, l2) = read_embeddings(&p2).unwrap();
        assert!(l2.is_none());
    }

    #[test]
    fn jsonl_append_and_read() {
        let dir = tempdir().unwrap();
        let run = RunDir::create(dir.path().join("run")).unwrap();
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct Row {
            a: u32,
        }
        run.append_jsonl("rows.jsonl", &Row { a: 1 }).unwrap();
        run.append_jsonl("rows.jsonl", &Row { a: 2 }).unwrap();
        let rows: Vec<Row> = run.read_jsonl("rows.jsonl").unwrap();
        assert_eq!(rows, vec![Row { a: 1 }, Row { a: 2 }]);
    }

    #[test]
    fn chart_renders_to_png() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("plots/curve.png");
        render_line_chart(
            &path,
            "ACCURACY VS EPOCH",
            &[
                ("ORIGINAL".to_string(), vec![(0.0, 0.9), (1.0, 0.92), (2.0, 0.95)]),
                ("LOCKED".to_string(), vec![(0.0, 0.5), (1.0, 0.3), (2.0, 0.2)]),
            ],
            "EPOCH",
            "ACC",
        )
        .unwrap();
        let img = image::open(&path).unwrap();
        assert!(img.width() > 100);
    }
}
