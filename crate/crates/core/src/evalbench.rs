//! Sequences, synthetic generation and one-pass evaluation.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clnet::ClNet;
use crate::error::{input_err, Error, Result};
use crate::geometry::{iou, BBox};
use crate::siamese::RpnModel;
use crate::tracker::{FrameRecord, TrackMode, Tracker, TrackerConfig};

/// A frame on disk or already decoded.
#[derive(Clone, Debug)]
pub enum Frame {
    File(PathBuf),
    Memory(Arc<RgbImage>),
}

impl Frame {
    pub fn load(&self) -> Result<Arc<RgbImage>> {
        match self {
            Frame::Memory(img) => Ok(Arc::clone(img)),
            Frame::File(p) => Ok(Arc::new(image::open(p)?.to_rgb8())),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sequence {
    pub id: String,
    pub frames: Vec<Frame>,
    pub gt: Vec<BBox>,
    pub attributes: Vec<String>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Decodes every frame into memory.
    pub fn preload(&self) -> Result<Sequence> {
        let frames = self.frames.iter().map(|f| f.load().map(Frame::Memory)).collect::<Result<Vec<_>>>()?;
        Ok(Sequence { frames, ..self.clone() })
    }
}

const GT_FILE: &str = "groundtruth_rect.txt";
const IMG_DIR: &str = "img";
const ATTR_FILE: &str = "attributes.txt";

fn ingestion(path: &Path, message: impl Into<String>) -> Error {
    Error::Ingestion { path: path.to_path_buf(), message: message.into() }
}

/// Reads an OTB-style directory: `img/NNNN.{png,jpg}` plus `groundtruth_rect.txt`.
///
/// With `allow_whitespace`, ground-truth fields may also be separated by
/// tabs or spaces.
pub fn load_sequence(path: &Path, allow_whitespace: bool) -> Result<Sequence> {
    let gt_path = path.join(GT_FILE);
    let file = fs::File::open(&gt_path).map_err(|e| ingestion(&gt_path, e.to_string()))?;
    let mut gt = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let b = BBox::parse_line(&line, allow_whitespace)
            .map_err(|e| ingestion(&gt_path, format!("line {}: {e}", n + 1)))?;
        gt.push(b);
    }

    let img_dir = path.join(IMG_DIR);
    let mut frames: Vec<(u64, PathBuf)> = fs::read_dir(&img_dir)
        .map_err(|e| ingestion(&img_dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|s| s.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .filter_map(|p| {
            let n = p.file_stem()?.to_str()?.parse::<u64>().ok()?;
            Some((n, p))
        })
        .collect();
    frames.sort();

    if frames.len() != gt.len() {
        return Err(ingestion(path, format!("{} frames but {} ground-truth boxes", frames.len(), gt.len())));
    }
    if gt.is_empty() {
        return Err(ingestion(path, "sequence has no frames"));
    }
    let attributes = match fs::read_to_string(path.join(ATTR_FILE)) {
        Ok(s) => s.split(',').map(|a| a.trim().to_string()).filter(|a| !a.is_empty()).collect(),
        Err(_) => Vec::new(),
    };
    let id = path.file_name().and_then(|s| s.to_str()).unwrap_or("sequence").to_string();
    Ok(Sequence { id, frames: frames.into_iter().map(|(_, p)| Frame::File(p)).collect(), gt, attributes })
}

/// Every subdirectory of `dir` holding a ground-truth file, ordered by name.
pub fn load_dataset(dir: &Path, allow_whitespace: bool) -> Result<Vec<Sequence>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| ingestion(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(GT_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(ingestion(dir, "no sequence directories"));
    }
    dirs.iter().map(|d| load_sequence(d, allow_whitespace)).collect()
}

/// Writes a sequence in the layout [`load_sequence`] reads.
pub fn write_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    let img_dir = dir.join(IMG_DIR);
    fs::create_dir_all(&img_dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.load()?.save(img_dir.join(format!("{:04}.png", i + 1)))?;
    }
    let mut out = fs::File::create(dir.join(GT_FILE))?;
    for b in &seq.gt {
        writeln!(out, "{b}")?;
    }
    if !seq.attributes.is_empty() {
        fs::write(dir.join(ATTR_FILE), seq.attributes.join(","))?;
    }
    Ok(())
}

/// Parameters of a synthetic sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub length: usize,
    pub width: u32,
    pub height: u32,
    /// Inclusive range of target side lengths in pixels.
    pub target_size: (u32, u32),
    pub distractor_count: usize,
    /// Frame index (0-based) from which the appearance changes.
    pub shift_frame: Option<usize>,
    /// Standard deviation of per-pixel noise, in intensity units of `[0, 1]`.
    pub noise: f64,
    /// Maximum target speed in pixels per frame.
    pub speed: f64,
    /// Range of distractor distances from the target center.
    pub orbit: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            length: 60,
            width: 128,
            height: 128,
            target_size: (12, 16),
            distractor_count: 2,
            shift_frame: None,
            noise: 0.02,
            speed: 2.0,
            orbit: (13.0, 20.0),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return input_err("synthetic sequences need at least 2 frames");
        }
        let (lo, hi) = self.target_size;
        if lo == 0 || lo > hi || 4 * hi >= self.width.min(self.height) {
            return input_err("target size range does not fit the frame");
        }
        if !(self.noise >= 0.0 && self.speed >= 0.0 && self.orbit.0 >= 0.0 && self.orbit.0 <= self.orbit.1) {
            return input_err("noise, speed and orbit must be non-negative and ordered");
        }
        Ok(())
    }
}

type Color = [f64; 3];

/// A rectangle with four quadrant colors.
#[derive(Clone, Debug)]
struct Sprite {
    w: u32,
    h: u32,
    quads: [Color; 4],
}

impl Sprite {
    fn draw(&self, img: &mut [Color], width: u32, height: u32, x0: i64, y0: i64, shift: bool) {
        for dy in 0..self.h as i64 {
            for dx in 0..self.w as i64 {
                let (x, y) = (x0 + dx, y0 + dy);
                if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
                    continue;
                }
                let q = usize::from(2 * dy >= self.h as i64) * 2 + usize::from(2 * dx >= self.w as i64);
                let c = self.quads[q];
                img[(y as u32 * width + x as u32) as usize] = if shift { shift_color(c) } else { c };
            }
        }
    }
}

/// Abrupt appearance change: channel rotation plus inversion of the first channel.
fn shift_color(c: Color) -> Color {
    [1.0 - c[2], c[0], c[1]]
}

fn random_color<R: Rng>(rng: &mut R) -> Color {
    [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
}

/// Renders a sequence: a quadrant-colored target on a smooth background,
/// with distractors that reuse the target's colors in a different layout
/// and circle around it.
pub fn synth_generate(spec: &SynthSpec) -> Result<Sequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);

    let base = random_color(&mut rng);
    let waves: Vec<(f64, f64, f64, f64, usize)> = (0..6)
        .map(|i| {
            (
                rng.random_range(0.02..0.08),
                rng.random_range(0.02..0.08),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.1),
                i % 3,
            )
        })
        .collect();
    let mut background = vec![[0.0; 3]; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut c = base;
            for &(fx, fy, ph, amp, ch) in &waves {
                c[ch] += amp * (fx * x as f64 + fy * y as f64 + ph).sin();
            }
            background[(y * w + x) as usize] = c;
        }
    }
    let shifted_background: Vec<Color> = background.iter().map(|&c| shift_color(c)).collect();

    let tw = rng.random_range(spec.target_size.0..=spec.target_size.1);
    let th = rng.random_range(spec.target_size.0..=spec.target_size.1);
    let quads = [random_color(&mut rng), random_color(&mut rng), random_color(&mut rng), random_color(&mut rng)];
    let target = Sprite { w: tw, h: th, quads };

    // Each distractor permutes the target's quadrants (never the identity).
    let distractors: Vec<(Sprite, f64, f64, f64)> = (0..spec.distractor_count)
        .map(|_| {
            let mut order = [0usize, 1, 2, 3];
            while order == [0, 1, 2, 3] {
                order.shuffle(&mut rng);
            }
            let sprite = Sprite { w: tw, h: th, quads: order.map(|i| quads[i]) };
            let radius = rng.random_range(spec.orbit.0..=spec.orbit.1);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let omega = rng.random_range(0.04..0.12) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (sprite, radius, phase, omega)
        })
        .collect();

    let margin_x = tw as f64 / 2.0 + 6.0;
    let margin_y = th as f64 / 2.0 + 6.0;
    let mut cx = w as f64 / 2.0 + rng.random_range(-15.0..15.0);
    let mut cy = h as f64 / 2.0 + rng.random_range(-15.0..15.0);
    let mut vx = rng.random_range(-spec.speed..=spec.speed);
    let mut vy = rng.random_range(-spec.speed..=spec.speed);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid std");

    let mut frames = Vec::with_capacity(spec.length);
    let mut gt = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        let shift = spec.shift_frame.is_some_and(|s| t >= s);
        let mut img = if shift { shifted_background.clone() } else { background.clone() };
        for (sprite, radius, phase, omega) in &distractors {
            let a = phase + omega * t as f64;
            let dx = (cx + radius * a.cos() - sprite.w as f64 / 2.0).round() as i64;
            let dy = (cy + radius * a.sin() - sprite.h as f64 / 2.0).round() as i64;
            sprite.draw(&mut img, w, h, dx, dy, shift);
        }
        let x0 = (cx - tw as f64 / 2.0).round();
        let y0 = (cy - th as f64 / 2.0).round();
        target.draw(&mut img, w, h, x0 as i64, y0 as i64, shift);
        gt.push(BBox::new(x0, y0, tw as f64, th as f64)?);

        let mut out = RgbImage::new(w, h);
        for (i, p) in out.pixels_mut().enumerate() {
            let c = img[i];
            *p = Rgb(std::array::from_fn(|ch| {
                let v = if spec.noise > 0.0 { c[ch] + noise.sample(&mut rng) } else { c[ch] };
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            }));
        }
        frames.push(Frame::Memory(Arc::new(out)));

        vx = (vx + rng.random_range(-0.5..0.5)).clamp(-spec.speed, spec.speed);
        vy = (vy + rng.random_range(-0.5..0.5)).clamp(-spec.speed, spec.speed);
        cx += vx;
        cy += vy;
        if cx < margin_x || cx > w as f64 - margin_x {
            vx = -vx;
            cx = cx.clamp(margin_x, w as f64 - margin_x);
        }
        if cy < margin_y || cy > h as f64 - margin_y {
            vy = -vy;
            cy = cy.clamp(margin_y, h as f64 - margin_y);
        }
    }

    let mut attributes = vec!["synthetic".to_string()];
    if spec.distractor_count > 0 {
        attributes.push("distractors".into());
    }
    if spec.shift_frame.is_some() {
        attributes.push("appearance_shift".into());
    }
    Ok(Sequence { id: format!("synth_{:06}", spec.seed), frames, gt, attributes })
}

/// `count` sequences with seeds `first_seed..first_seed + count`.
pub fn synth_suite(template: &SynthSpec, first_seed: u64, count: usize) -> Result<Vec<Sequence>> {
    (0..count as u64).map(|i| synth_generate(&SynthSpec { seed: first_seed + i, ..template.clone() })).collect()
}

pub const PRECISION_THRESHOLDS: usize = 51;
pub const SUCCESS_THRESHOLDS: usize = 21;

fn check_lengths(preds: &[BBox], gts: &[BBox]) -> Result<()> {
    if preds.len() != gts.len() {
        return input_err(format!("{} predictions for {} ground-truth boxes", preds.len(), gts.len()));
    }
    Ok(())
}

/// Fraction of frames with center error `<= t` for `t = 0, 1, ..., 50` pixels.
pub fn precision_curve(preds: &[BBox], gts: &[BBox]) -> Result<Vec<f64>> {
    check_lengths(preds, gts)?;
    let d: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| p.center_distance(g)).collect();
    let n = d.len().max(1) as f64;
    Ok((0..PRECISION_THRESHOLDS).map(|t| d.iter().filter(|&&e| e <= t as f64).count() as f64 / n).collect())
}

/// Success rate at IoU thresholds `0, 0.05, ..., 1`.
///
/// A frame succeeds at `t` when its IoU exceeds `t`; a perfect overlap
/// succeeds at every threshold.
pub fn success_curve(preds: &[BBox], gts: &[BBox]) -> Result<Vec<f64>> {
    check_lengths(preds, gts)?;
    let o: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| iou(p, g)).collect();
    let n = o.len().max(1) as f64;
    Ok((0..SUCCESS_THRESHOLDS)
        .map(|i| {
            let t = i as f64 / (SUCCESS_THRESHOLDS - 1) as f64;
            o.iter().filter(|&&v| v > t || v >= 1.0).count() as f64 / n
        })
        .collect())
}

pub fn success_auc(preds: &[BBox], gts: &[BBox]) -> Result<f64> {
    let c = success_curve(preds, gts)?;
    Ok(c.iter().sum::<f64>() / c.len() as f64)
}

/// Metrics of one tracked sequence, excluding the initialization frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpeMetrics {
    pub auc: f64,
    pub precision20: f64,
    pub mean_iou: f64,
}

pub fn ope_metrics(preds: &[BBox], gts: &[BBox]) -> Result<OpeMetrics> {
    check_lengths(preds, gts)?;
    if preds.len() < 2 {
        return input_err("evaluation needs at least two frames");
    }
    let (p, g) = (&preds[1..], &gts[1..]);
    let mean_iou = p.iter().zip(g).map(|(a, b)| iou(a, b)).sum::<f64>() / p.len() as f64;
    Ok(OpeMetrics { auc: success_auc(p, g)?, precision20: precision_curve(p, g)?[20], mean_iou })
}

/// Outcome of one sequence in a benchmark run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub id: String,
    pub frames: usize,
    pub auc: Option<f64>,
    pub precision20: Option<f64>,
    pub mean_iou: Option<f64>,
    pub updates: usize,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub run_id: String,
    pub mode: TrackMode,
    pub sequences: usize,
    pub failures: usize,
    /// Means over the sequences that completed.
    pub auc: f64,
    pub precision20: f64,
    pub mean_iou: f64,
}

pub struct BenchmarkRun {
    pub summary: BenchmarkSummary,
    pub per_sequence: Vec<SequenceResult>,
    /// Frame records per sequence, empty for failed ones.
    pub records: Vec<Vec<FrameRecord>>,
}

fn track_one(tracker: &Tracker<'_>, seq: &Sequence) -> Result<Vec<FrameRecord>> {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| tracker.track_sequence(seq))) {
        Ok(r) => r,
        Err(_) => Err(Error::Numeric(format!("tracker panicked on {}", seq.id))),
    }
}

fn evaluate(tracker: &Tracker<'_>, seq: &Sequence) -> (SequenceResult, Vec<FrameRecord>) {
    let outcome = track_one(tracker, seq).and_then(|recs| {
        let preds = recs.iter().map(FrameRecord::bbox).collect::<Result<Vec<_>>>()?;
        let m = ope_metrics(&preds, &seq.gt)?;
        Ok((recs, m))
    });
    let mut r = SequenceResult {
        id: seq.id.clone(),
        frames: seq.len(),
        auc: None,
        precision20: None,
        mean_iou: None,
        updates: 0,
        failure: None,
    };
    match outcome {
        Ok((recs, m)) => {
            r.auc = Some(m.auc);
            r.precision20 = Some(m.precision20);
            r.mean_iou = Some(m.mean_iou);
            r.updates = recs.iter().filter(|f| f.updated).count();
            (r, recs)
        }
        Err(e) => {
            r.failure = Some(e.to_string());
            (r, Vec::new())
        }
    }
}

/// Tracks every sequence and scores it; a failing sequence is recorded and
/// the run continues. Sequences are spread over `workers` threads and the
/// results are ordered by sequence id.
pub fn run_benchmark(
    model: &RpnModel,
    clnet: Option<&ClNet>,
    dataset: &[Sequence],
    cfg: &TrackerConfig,
    run_id: &str,
    workers: usize,
) -> Result<BenchmarkRun> {
    let tracker = Tracker::new(model, clnet, cfg.clone())?;
    let workers = workers.clamp(1, dataset.len().max(1));
    let mut results: Vec<(SequenceResult, Vec<FrameRecord>)> = if workers == 1 {
        dataset.iter().map(|s| evaluate(&tracker, s)).collect()
    } else {
        let tracker = &tracker;
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || {
                        dataset.iter().skip(w).step_by(workers).map(|s| evaluate(tracker, s)).collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().unwrap_or_default()).collect()
        })
    };
    results.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    let (per_sequence, records): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let ok: Vec<&SequenceResult> = per_sequence.iter().filter(|r| r.failure.is_none()).collect();
    let mean = |f: fn(&SequenceResult) -> Option<f64>| {
        if ok.is_empty() {
            0.0
        } else {
            ok.iter().filter_map(|r| f(r)).sum::<f64>() / ok.len() as f64
        }
    };
    let summary = BenchmarkSummary {
        run_id: run_id.to_string(),
        mode: cfg.mode,
        sequences: dataset.len(),
        failures: dataset.len() - ok.len(),
        auc: mean(|r| r.auc),
        precision20: mean(|r| r.precision20),
        mean_iou: mean(|r| r.mean_iou),
    };
    Ok(BenchmarkRun { summary, per_sequence, records })
}

/// Writes `<root>/<run_id>/{summary.json, per_sequence.csv, frames/<seq>.jsonl}`.
pub fn write_bundle(run: &BenchmarkRun, root: &Path) -> Result<PathBuf> {
    let dir = root.join(&run.summary.run_id);
    let frames = dir.join("frames");
    fs::create_dir_all(&frames)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&run.summary)?)?;
    let mut w = csv::Writer::from_path(dir.join("per_sequence.csv"))?;
    for r in &run.per_sequence {
        w.serialize(r)?;
    }
    w.flush()?;
    for (r, recs) in run.per_sequence.iter().zip(&run.records) {
        let mut f = std::io::BufWriter::new(fs::File::create(frames.join(format!("{}.jsonl", r.id)))?);
        for rec in recs {
            serde_json::to_writer(&mut f, rec)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    Ok(dir)
}
