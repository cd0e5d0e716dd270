//! Compact latent network.
//!
//! Pipeline per adapted branch:
//!
//! ```text
//! M --g_a--> M_bar --LE(Y)--> c --g_delta--> t in (-1,1)^D --augment--> theta_a
//! ```
//!
//! `g_a` is three 1x1 conv blocks (conv, batch norm, ReLU) acting on the
//! rows of `M`; `LE` concatenates the mean and population standard
//! deviation of the positive and negative hidden vectors; `g_delta` is an
//! MLP ending in `tanh`. The raw output `t` is turned into a
//! [`WeightDelta`] according to the augmentation mode and combined with
//! the frozen last-layer weights.
//!
//! Sample sets are multisets of rows: every labelled anchor contributes the
//! hidden vector at its position, so a cell with several positive anchors
//! is counted once per anchor.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Error, Result};
use crate::geometry::{Label, LabelMap};
use crate::nn::{relu, relu_backward, BatchNorm, BatchNormCache, BatchStats, Linear, Params};
use crate::siamese::{dw_xcorr, dw_xcorr_backward, head_forward, HeadWeights};
use crate::tensor::FeatureMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Cls,
    Reg,
    Fc,
}

impl Branch {
    /// Regression latents use only the positive set.
    pub fn uses_negatives(self) -> bool {
        !matches!(self, Branch::Reg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    Additive,
    Cbam,
    Film,
}

/// What the similarity-map variant's predictor adjusts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FcDeltaMode {
    /// `[delta phi(z), delta b]`, template-sized.
    Template,
    /// `[delta S, delta b]`, response-sized.
    Response,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClNetConfig {
    /// `c_bar`: width of `g_a` for cls/fc branches (doubled for regression).
    pub latent_channels: usize,
    /// `c_dot`: width of the two hidden FC layers of `g_delta`.
    pub hidden: usize,
    pub augmentation: Augmentation,
    pub fc_delta_mode: FcDeltaMode,
}

impl Default for ClNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 128,
            hidden: 256,
            augmentation: Augmentation::Additive,
            fc_delta_mode: FcDeltaMode::Template,
        }
    }
}

impl ClNetConfig {
    /// Channels of `M_bar` for a branch.
    pub fn adjust_width(&self, branch: Branch) -> usize {
        match branch {
            Branch::Reg => 2 * self.latent_channels,
            Branch::Cls | Branch::Fc => self.latent_channels,
        }
    }

    /// Length of the latent feature, `4 * c_bar` for every branch.
    pub fn latent_len(&self) -> usize {
        4 * self.latent_channels
    }

    /// `in_channels` is the channel count `c` of the map being adapted.
    pub fn validate(&self, branch: Branch, in_channels: usize) -> Result<()> {
        if self.latent_channels == 0 || self.hidden == 0 || in_channels == 0 {
            return config_err("latent network widths must be positive");
        }
        // The similarity map has a single channel, so the c_bar <= 2c bound
        // only applies to the RPN branches.
        if branch != Branch::Fc && self.latent_channels > 2 * in_channels {
            return config_err(format!(
                "latent_channels {} exceeds twice the input channels {in_channels}",
                self.latent_channels
            ));
        }
        Ok(())
    }
}

/// Batch-norm behavior inside `g_a`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are returned for the caller to fold in.
    Train,
    /// Stored running statistics.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentPart {
    PosMean,
    PosStd,
    NegMean,
    NegStd,
}

/// `c = concat(mu+, sigma+, mu-, sigma-)`; regression latents carry only the
/// positive segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentFeature {
    pub values: Array1<f64>,
    pub parts: Vec<(LatentPart, usize)>,
}

impl LatentFeature {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn part(&self, which: LatentPart) -> Option<&[f64]> {
        let mut off = 0;
        for &(p, n) in &self.parts {
            if p == which {
                return Some(&self.values.as_slice().expect("standard")[off..off + n]);
            }
            off += n;
        }
        None
    }
}

/// Mean and population standard deviation of the selected rows.
fn set_stats(rows: ArrayView2<f64>, members: &[usize]) -> (Array1<f64>, Array1<f64>) {
    let c = rows.ncols();
    let n = members.len() as f64;
    let mut mean = Array1::zeros(c);
    for &i in members {
        mean += &rows.row(i);
    }
    mean /= n;
    let mut var = Array1::zeros(c);
    for &i in members {
        let d = &rows.row(i) - &mean;
        var += &(&d * &d);
    }
    var /= n;
    (mean, var.mapv(f64::sqrt))
}

/// Backward of [`set_stats`]; accumulates into `drows`.
fn set_stats_backward(
    rows: ArrayView2<f64>,
    members: &[usize],
    mean: &Array1<f64>,
    std: &Array1<f64>,
    dmean: &[f64],
    dstd: &[f64],
    drows: &mut Array2<f64>,
) {
    let n = members.len() as f64;
    let c = rows.ncols();
    for &i in members {
        let r = rows.row(i);
        let mut d = drows.row_mut(i);
        for j in 0..c {
            let mut g = dmean[j] / n;
            if std[j] > 0.0 {
                g += dstd[j] * (r[j] - mean[j]) / (n * std[j]);
            }
            d[j] += g;
        }
    }
}

/// Row indices of the positive / negative sets.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SampleRows {
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

impl SampleRows {
    /// Maps anchor labels of one map to rows, offset by `row_offset`.
    pub fn push_labels(&mut self, labels: &LabelMap, positions: usize, row_offset: usize) -> Result<()> {
        if positions == 0 || !labels.len().is_multiple_of(positions) {
            return input_err(format!("{} labels cannot be spread over {positions} positions", labels.len()));
        }
        let k = labels.len() / positions;
        for (i, &l) in labels.labels().iter().enumerate() {
            match l {
                Label::Pos => self.pos.push(row_offset + i / k),
                Label::Neg => self.neg.push(row_offset + i / k),
                Label::Ignore => {}
            }
        }
        Ok(())
    }

    pub fn from_labels(labels: &LabelMap, positions: usize) -> Result<Self> {
        let mut s = Self::default();
        s.push_labels(labels, positions, 0)?;
        Ok(s)
    }
}

/// Latent encoder over rows of `M_bar` (one row per position).
pub fn encode_rows(rows: ArrayView2<f64>, sets: &SampleRows, branch: Branch) -> Result<LatentFeature> {
    if sets.pos.is_empty() {
        return Err(Error::EncoderInput("positive set is empty".into()));
    }
    if branch.uses_negatives() && sets.neg.is_empty() {
        return Err(Error::EncoderInput("negative set is empty".into()));
    }
    let c = rows.ncols();
    let (mp, sp) = set_stats(rows, &sets.pos);
    let mut values = Vec::with_capacity(4 * c);
    values.extend(mp.iter());
    values.extend(sp.iter());
    let mut parts = vec![(LatentPart::PosMean, c), (LatentPart::PosStd, c)];
    if branch.uses_negatives() {
        let (mn, sn) = set_stats(rows, &sets.neg);
        values.extend(mn.iter());
        values.extend(sn.iter());
        parts.push((LatentPart::NegMean, c));
        parts.push((LatentPart::NegStd, c));
    }
    Ok(LatentFeature { values: Array1::from(values), parts })
}

/// Backward of [`encode_rows`]: `dL/d rows` given `dL/dc`.
pub fn encode_rows_backward(
    rows: ArrayView2<f64>,
    sets: &SampleRows,
    latent: &LatentFeature,
    dlatent: &Array1<f64>,
) -> Array2<f64> {
    let c = rows.ncols();
    let v = latent.values.as_slice().expect("standard");
    let d = dlatent.as_slice().expect("standard");
    let mut drows = Array2::zeros(rows.dim());
    let groups: Vec<&[usize]> = if latent.parts.len() == 4 { vec![&sets.pos, &sets.neg] } else { vec![&sets.pos] };
    for (g, members) in groups.into_iter().enumerate() {
        let off = g * 2 * c;
        let mean = Array1::from(v[off..off + c].to_vec());
        let std = Array1::from(v[off + c..off + 2 * c].to_vec());
        set_stats_backward(rows, members, &mean, &std, &d[off..off + c], &d[off + c..off + 2 * c], &mut drows);
    }
    drows
}

/// `LE(M_bar, Y)`: per-set mean and population standard deviation.
///
/// `labels` holds one entry per anchor; with `k` anchors per cell the
/// label count is `k` times the number of map positions.
pub fn latent_encode(m_bar: &FeatureMap, labels: &LabelMap, branch: Branch) -> Result<LatentFeature> {
    let sets = SampleRows::from_labels(labels, m_bar.positions())?;
    encode_rows(m_bar.to_rows().view(), &sets, branch)
}

/// One `g_a` block: 1x1 conv, batch norm, ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjustBlock {
    pub conv: Linear,
    pub norm: BatchNorm,
}

/// Feature-adjusting subnetwork `g_a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureAdjuster {
    pub blocks: Vec<AdjustBlock>,
}

pub struct AdjusterCache {
    inputs: Vec<Array2<f64>>,
    norms: Vec<BatchNormCache>,
    outputs: Vec<Array2<f64>>,
    pub stats: Vec<BatchStats>,
}

impl FeatureAdjuster {
    pub fn init<R: Rng + ?Sized>(in_channels: usize, width: usize, rng: &mut R) -> Self {
        let mut c = in_channels;
        let blocks = (0..3)
            .map(|_| {
                let block = AdjustBlock { conv: Linear::init(c, width, rng), norm: BatchNorm::new(width) };
                c = width;
                block
            })
            .collect();
        Self { blocks }
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].conv.inputs()
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().expect("three blocks").conv.outputs()
    }

    pub fn forward_rows(&self, rows: ArrayView2<f64>, mode: NormMode) -> (Array2<f64>, AdjusterCache) {
        let mut cache = AdjusterCache { inputs: Vec::new(), norms: Vec::new(), outputs: Vec::new(), stats: Vec::new() };
        let mut x = rows.to_owned();
        for b in &self.blocks {
            let y = b.conv.forward(x.view());
            let (z, nc) = match mode {
                NormMode::Train => {
                    let (z, nc, st) = b.norm.forward_train(y.view());
                    cache.stats.push(st);
                    (z, nc)
                }
                NormMode::Eval => b.norm.forward_eval(y.view()),
            };
            let out = relu(&z);
            cache.inputs.push(x);
            cache.norms.push(nc);
            cache.outputs.push(out.clone());
            x = out;
        }
        (x, cache)
    }

    /// `M_bar = g_a(M)`.
    pub fn forward(&self, m: &FeatureMap, mode: NormMode) -> Result<FeatureMap> {
        if m.channels() != self.in_channels() {
            return config_err(format!("g_a expects {} channels, map has {}", self.in_channels(), m.channels()));
        }
        let (rows, _) = self.forward_rows(m.to_rows().view(), mode);
        Ok(FeatureMap::from_rows(rows.view(), m.height(), m.width()))
    }

    pub fn backward_rows(&self, cache: &AdjusterCache, dout: Array2<f64>, grad: &mut FeatureAdjuster) -> Array2<f64> {
        let mut d = dout;
        for i in (0..self.blocks.len()).rev() {
            let b = &self.blocks[i];
            let gb = &mut grad.blocks[i];
            let dz = relu_backward(&cache.outputs[i], &d);
            let dy = b.norm.backward(&cache.norms[i], dz.view(), &mut gb.norm);
            d = b.conv.backward(cache.inputs[i].view(), dy.view(), &mut gb.conv);
        }
        d
    }

    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (b, s) in self.blocks.iter_mut().zip(stats) {
            b.norm.update_running(s);
        }
    }
}

impl Params for FeatureAdjuster {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for b in &self.blocks {
            b.conv.visit(f);
            b.norm.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for b in &mut self.blocks {
            b.conv.visit_mut(f);
            b.norm.visit_mut(f);
        }
    }
}

/// `tanh` kept strictly inside `(-1, 1)` where it would round to +-1.
fn bounded_tanh(x: f64) -> f64 {
    const MAX: f64 = 1.0 - f64::EPSILON;
    x.tanh().clamp(-MAX, MAX)
}

/// Deviation predictor `g_delta`: FC-ReLU-FC-ReLU-FC-tanh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationPredictor {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
}

pub struct PredictorCache {
    input: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    out: Array2<f64>,
}

impl DeviationPredictor {
    /// The last layer starts at zero so a fresh network leaves the head untouched.
    pub fn init<R: Rng + ?Sized>(inputs: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::init(inputs, hidden, rng),
            fc2: Linear::init(hidden, hidden, rng),
            fc3: Linear::zeros(hidden, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.fc1.inputs()
    }

    pub fn outputs(&self) -> usize {
        self.fc3.outputs()
    }

    pub fn forward_cached(&self, c: &Array1<f64>) -> (Array1<f64>, PredictorCache) {
        let input = c.view().insert_axis(Axis(0)).to_owned();
        let h1 = relu(&self.fc1.forward(input.view()));
        let h2 = relu(&self.fc2.forward(h1.view()));
        let out = self.fc3.forward(h2.view()).mapv(bounded_tanh);
        (out.row(0).to_owned(), PredictorCache { input, h1, h2, out })
    }

    pub fn forward(&self, c: &LatentFeature) -> Result<Array1<f64>> {
        if c.len() != self.inputs() {
            return config_err(format!("latent has length {}, predictor expects {}", c.len(), self.inputs()));
        }
        Ok(self.forward_cached(&c.values).0)
    }

    pub fn backward(&self, cache: &PredictorCache, dout: &Array1<f64>, grad: &mut DeviationPredictor) -> Array1<f64> {
        let dt = dout.view().insert_axis(Axis(0)).to_owned();
        let dpre3 = &dt * &cache.out.mapv(|t| 1.0 - t * t);
        let dh2 = self.fc3.backward(cache.h2.view(), dpre3.view(), &mut grad.fc3);
        let dh2 = relu_backward(&cache.h2, &dh2);
        let dh1 = self.fc2.backward(cache.h1.view(), dh2.view(), &mut grad.fc2);
        let dh1 = relu_backward(&cache.h1, &dh1);
        let dc = self.fc1.backward(cache.input.view(), dh1.view(), &mut grad.fc1);
        dc.row(0).to_owned()
    }
}

impl Params for DeviationPredictor {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.fc1.visit(f);
        self.fc2.visit(f);
        self.fc3.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
        self.fc3.visit_mut(f);
    }
}

/// A deviation for head weights, already mapped from the predictor's raw
/// `tanh` output.
///
/// CBAM and FILM act on the augmented `out x (in + 1)` matrix `[W | b]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WeightDelta {
    Additive(HeadWeights),
    Cbam {
        /// `delta_m`, one factor per output row.
        rows: Array1<f64>,
        /// `delta_n`, one factor per input column plus the bias column.
        cols: Array1<f64>,
        offset: f64,
    },
    Film {
        gamma: Array2<f64>,
        beta: Array2<f64>,
        offset: f64,
    },
}

impl WeightDelta {
    /// Raw predictor length for a head of the given shape.
    pub fn raw_len(mode: Augmentation, out_dim: usize, in_dim: usize) -> usize {
        match mode {
            Augmentation::Additive => out_dim * (in_dim + 1) + 1,
            Augmentation::Cbam => out_dim + in_dim + 1 + 1,
            Augmentation::Film => 2 * out_dim * (in_dim + 1) + 1,
        }
    }

    /// Partitions the raw vector row-major into the delta's parts.
    ///
    /// Multiplicative factors are `1 + t` so that `t = 0` is the identity.
    pub fn from_raw(mode: Augmentation, out_dim: usize, in_dim: usize, t: &[f64]) -> Result<Self> {
        let need = Self::raw_len(mode, out_dim, in_dim);
        if t.len() != need {
            return config_err(format!("delta has length {}, expected {need}", t.len()));
        }
        let aug = |v: &[f64]| Array2::from_shape_vec((out_dim, in_dim + 1), v.to_vec()).expect("shape");
        let last = t[need - 1];
        Ok(match mode {
            Augmentation::Additive => {
                let m = aug(&t[..need - 1]);
                WeightDelta::Additive(HeadWeights {
                    weight: m.slice(s![.., ..in_dim]).to_owned(),
                    bias: m.column(in_dim).to_owned(),
                    offset: last,
                })
            }
            Augmentation::Cbam => WeightDelta::Cbam {
                rows: t[..out_dim].iter().map(|v| 1.0 + v).collect(),
                cols: t[out_dim..out_dim + in_dim + 1].iter().map(|v| 1.0 + v).collect(),
                offset: last,
            },
            Augmentation::Film => {
                let half = out_dim * (in_dim + 1);
                WeightDelta::Film {
                    gamma: aug(&t[..half]).mapv(|v| 1.0 + v),
                    beta: aug(&t[half..2 * half]),
                    offset: last,
                }
            }
        })
    }

    pub fn all_finite(&self) -> bool {
        match self {
            WeightDelta::Additive(h) => h.all_finite(),
            WeightDelta::Cbam { rows, cols, offset } => {
                rows.iter().chain(cols.iter()).all(|v| v.is_finite()) && offset.is_finite()
            }
            WeightDelta::Film { gamma, beta, offset } => {
                gamma.iter().chain(beta.iter()).all(|v| v.is_finite()) && offset.is_finite()
            }
        }
    }
}

fn augmented(theta: &HeadWeights) -> Array2<f64> {
    let (o, i) = theta.weight.dim();
    let mut m = Array2::zeros((o, i + 1));
    m.slice_mut(s![.., ..i]).assign(&theta.weight);
    m.column_mut(i).assign(&theta.bias);
    m
}

fn split_augmented(m: Array2<f64>, offset: f64) -> HeadWeights {
    let i = m.ncols() - 1;
    HeadWeights { weight: m.slice(s![.., ..i]).to_owned(), bias: m.column(i).to_owned(), offset }
}

/// `theta_a` from the base weights and a deviation.
///
/// * additive: `theta_1 + delta`
/// * CBAM: `(theta_1 (x) delta_m) (x) delta_n`
/// * FILM: `theta_1 (x) gamma + beta`
pub fn augment_weights(theta: &HeadWeights, delta: &WeightDelta) -> Result<HeadWeights> {
    let (o, i) = theta.weight.dim();
    match delta {
        WeightDelta::Additive(d) => {
            if d.weight.dim() != (o, i) || d.bias.len() != o {
                return config_err("additive delta shape does not match head");
            }
            Ok(HeadWeights {
                weight: &theta.weight + &d.weight,
                bias: &theta.bias + &d.bias,
                offset: theta.offset + d.offset,
            })
        }
        WeightDelta::Cbam { rows, cols, offset } => {
            if rows.len() != o || cols.len() != i + 1 {
                return config_err("CBAM factors do not match head");
            }
            let mut m = augmented(theta);
            for ((r, c), v) in m.indexed_iter_mut() {
                *v = *v * rows[r] * cols[c];
            }
            Ok(split_augmented(m, theta.offset + offset))
        }
        WeightDelta::Film { gamma, beta, offset } => {
            if gamma.dim() != (o, i + 1) || beta.dim() != (o, i + 1) {
                return config_err("FILM coefficients do not match head");
            }
            let m = augmented(theta) * gamma + beta;
            Ok(split_augmented(m, theta.offset + offset))
        }
    }
}

/// Gradient of the raw predictor output given `dL/d theta_a`.
fn augment_backward(theta: &HeadWeights, delta: &WeightDelta, dtheta_a: &HeadWeights) -> Vec<f64> {
    let (o, i) = theta.weight.dim();
    let dm = augmented(dtheta_a);
    let mut out = Vec::new();
    match delta {
        WeightDelta::Additive(_) => {
            out.extend(dm.iter());
        }
        WeightDelta::Cbam { rows, cols, .. } => {
            let base = augmented(theta);
            let mut drows = vec![0.0; o];
            let mut dcols = vec![0.0; i + 1];
            for ((r, c), &g) in dm.indexed_iter() {
                drows[r] += g * base[[r, c]] * cols[c];
                dcols[c] += g * base[[r, c]] * rows[r];
            }
            out.extend(drows);
            out.extend(dcols);
        }
        WeightDelta::Film { gamma, .. } => {
            let _ = gamma;
            let base = augmented(theta);
            out.extend((&dm * &base).iter());
            out.extend(dm.iter());
        }
    }
    out.push(dtheta_a.offset);
    out
}

/// `A_a = head1(M; theta_a)`.
pub fn adjusted_forward(m: &FeatureMap, theta_a: &HeadWeights) -> Result<FeatureMap> {
    head_forward(m, theta_a)
}

/// Output of the similarity-map predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FcDelta {
    Template { template: Array3<f64>, bias: f64 },
    Response { response: Array2<f64>, bias: f64 },
}

impl FcDelta {
    pub fn raw_len(mode: FcDeltaMode, template_dims: (usize, usize, usize), map_dims: (usize, usize)) -> usize {
        match mode {
            FcDeltaMode::Template => template_dims.0 * template_dims.1 * template_dims.2 + 1,
            FcDeltaMode::Response => map_dims.0 * map_dims.1 + 1,
        }
    }

    fn from_raw(mode: FcDeltaMode, template_dims: (usize, usize, usize), map_dims: (usize, usize), t: &[f64]) -> Self {
        let n = t.len() - 1;
        match mode {
            FcDeltaMode::Template => FcDelta::Template {
                template: Array3::from_shape_vec(template_dims, t[..n].to_vec()).expect("shape"),
                bias: t[n],
            },
            FcDeltaMode::Response => FcDelta::Response {
                response: Array2::from_shape_vec(map_dims, t[..n].to_vec()).expect("shape"),
                bias: t[n],
            },
        }
    }
}

/// Shape of what a branch network adjusts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetShape {
    Head { out_dim: usize, in_dim: usize },
    FcTemplate { channels: usize, height: usize, width: usize, map: (usize, usize) },
    FcResponse { template: (usize, usize, usize), map: (usize, usize) },
}

/// Latent network for one branch (and one head level).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchNet {
    pub branch: Branch,
    pub augmentation: Augmentation,
    pub target: TargetShape,
    pub adjuster: FeatureAdjuster,
    pub predictor: DeviationPredictor,
}

/// Intermediate values of one adaptation, kept for the backward pass.
pub struct AdaptCache {
    rows: Array2<f64>,
    adjuster: AdjusterCache,
    m_bar: Array2<f64>,
    sets: SampleRows,
    pub latent: LatentFeature,
    predictor: PredictorCache,
    pub raw: Array1<f64>,
}

impl AdaptCache {
    pub fn batch_stats(&self) -> &[BatchStats] {
        &self.adjuster.stats
    }
}

impl BranchNet {
    pub fn raw_len(&self) -> usize {
        match self.target {
            TargetShape::Head { out_dim, in_dim } => WeightDelta::raw_len(self.augmentation, out_dim, in_dim),
            TargetShape::FcTemplate { channels, height, width, map } => {
                FcDelta::raw_len(FcDeltaMode::Template, (channels, height, width), map)
            }
            TargetShape::FcResponse { template, map } => FcDelta::raw_len(FcDeltaMode::Response, template, map),
        }
    }

    /// Network adapting an RPN `head1` with `in_dim` inputs and `out_dim` outputs.
    pub fn for_head<R: Rng + ?Sized>(
        branch: Branch,
        cfg: &ClNetConfig,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if branch == Branch::Fc {
            return config_err("use BranchNet::for_similarity for the fc branch");
        }
        cfg.validate(branch, in_dim)?;
        let width = cfg.adjust_width(branch);
        let d = WeightDelta::raw_len(cfg.augmentation, out_dim, in_dim);
        Ok(Self {
            branch,
            augmentation: cfg.augmentation,
            target: TargetShape::Head { out_dim, in_dim },
            adjuster: FeatureAdjuster::init(in_dim, width, rng),
            predictor: DeviationPredictor::init(cfg.latent_len(), cfg.hidden, d, rng),
        })
    }

    /// Network adapting a similarity-map tracker's template and bias.
    pub fn for_similarity<R: Rng + ?Sized>(
        cfg: &ClNetConfig,
        template_dims: (usize, usize, usize),
        map_dims: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(Branch::Fc, 1)?;
        let target = match cfg.fc_delta_mode {
            FcDeltaMode::Template => TargetShape::FcTemplate {
                channels: template_dims.0,
                height: template_dims.1,
                width: template_dims.2,
                map: map_dims,
            },
            FcDeltaMode::Response => TargetShape::FcResponse { template: template_dims, map: map_dims },
        };
        let d = FcDelta::raw_len(cfg.fc_delta_mode, template_dims, map_dims);
        Ok(Self {
            branch: Branch::Fc,
            augmentation: cfg.augmentation,
            target,
            adjuster: FeatureAdjuster::init(1, cfg.adjust_width(Branch::Fc), rng),
            predictor: DeviationPredictor::init(cfg.latent_len(), cfg.hidden, d, rng),
        })
    }

    /// Runs `g_a`, `LE` and `g_delta` over one or more maps of this branch.
    ///
    /// With several maps the sets pool the labelled rows of all of them and
    /// batch norm (in train mode) sees every row.
    pub fn adapt(&self, maps: &[&FeatureMap], labels: &[&LabelMap], mode: NormMode) -> Result<AdaptCache> {
        if maps.is_empty() || maps.len() != labels.len() {
            return input_err("adapt needs one label map per feature map");
        }
        let c = self.adjuster.in_channels();
        let mut sets = SampleRows::default();
        let total: usize = maps.iter().map(|m| m.positions()).sum();
        let mut rows = Array2::zeros((total, c));
        let mut off = 0;
        for (m, y) in maps.iter().zip(labels) {
            if m.channels() != c {
                return config_err(format!("branch expects {c} channels, map has {}", m.channels()));
            }
            rows.slice_mut(s![off..off + m.positions(), ..]).assign(&m.to_rows());
            sets.push_labels(y, m.positions(), off)?;
            off += m.positions();
        }
        let (m_bar, adjuster) = self.adjuster.forward_rows(rows.view(), mode);
        let latent = encode_rows(m_bar.view(), &sets, self.branch)?;
        if latent.len() != self.predictor.inputs() {
            return config_err(format!(
                "latent length {} does not match predictor input {}",
                latent.len(),
                self.predictor.inputs()
            ));
        }
        let (raw, predictor) = self.predictor.forward_cached(&latent.values);
        Ok(AdaptCache { rows, adjuster, m_bar, sets, latent, predictor, raw })
    }

    /// Backpropagates `dL/d raw` into this network's parameter gradients.
    pub fn backward(&self, cache: &AdaptCache, draw: &Array1<f64>, grad: &mut BranchNet) -> Array2<f64> {
        let dc = self.predictor.backward(&cache.predictor, draw, &mut grad.predictor);
        let dm_bar = encode_rows_backward(cache.m_bar.view(), &cache.sets, &cache.latent, &dc);
        let _ = &cache.rows;
        self.adjuster.backward_rows(&cache.adjuster, dm_bar, &mut grad.adjuster)
    }

    pub fn delta_from_raw(&self, raw: &Array1<f64>) -> Result<WeightDelta> {
        match self.target {
            TargetShape::Head { out_dim, in_dim } => {
                WeightDelta::from_raw(self.augmentation, out_dim, in_dim, raw.as_slice().expect("standard"))
            }
            _ => config_err("similarity-map networks produce FcDelta, not WeightDelta"),
        }
    }

    /// `theta_a` for a head branch given an adaptation result.
    pub fn adjust_head(&self, theta: &HeadWeights, cache: &AdaptCache) -> Result<HeadWeights> {
        let delta = self.delta_from_raw(&cache.raw)?;
        augment_weights(theta, &delta)
    }

    /// `dL/d raw` given `dL/d theta_a`.
    pub fn head_raw_grad(
        &self,
        theta: &HeadWeights,
        cache: &AdaptCache,
        dtheta_a: &HeadWeights,
    ) -> Result<Array1<f64>> {
        let delta = self.delta_from_raw(&cache.raw)?;
        Ok(Array1::from(augment_backward(theta, &delta, dtheta_a)))
    }

    pub fn fc_delta(&self, raw: &Array1<f64>) -> Result<FcDelta> {
        let t = raw.as_slice().expect("standard");
        match self.target {
            TargetShape::FcTemplate { channels, height, width, map } => {
                Ok(FcDelta::from_raw(FcDeltaMode::Template, (channels, height, width), map, t))
            }
            TargetShape::FcResponse { template, map } => Ok(FcDelta::from_raw(FcDeltaMode::Response, template, map, t)),
            TargetShape::Head { .. } => config_err("head networks produce WeightDelta"),
        }
    }

    pub fn update_running(&mut self, cache: &AdaptCache) {
        self.adjuster.update_running(cache.batch_stats());
    }
}

impl Params for BranchNet {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.adjuster.visit(f);
        self.predictor.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.adjuster.visit_mut(f);
        self.predictor.visit_mut(f);
    }
}

/// Output of [`fc_adjust`].
#[derive(Clone, Debug, PartialEq)]
pub struct FcAdjusted {
    pub template: FeatureMap,
    pub bias: f64,
    pub response: FeatureMap,
}

/// Adapts a similarity-map tracker from its first-frame response.
///
/// The map `S` stands in for `M`; in template mode the predictor emits
/// `[delta phi(z), delta b]` and the response is recomputed, in response
/// mode it emits `[delta S, delta b]` directly.
pub fn fc_adjust(
    s_map: &FeatureMap,
    labels: &LabelMap,
    inst: &FeatureMap,
    tmpl: &FeatureMap,
    b: f64,
    net: &BranchNet,
    mode: NormMode,
) -> Result<FcAdjusted> {
    if s_map.channels() != 1 {
        return input_err(format!("similarity map must have 1 channel, has {}", s_map.channels()));
    }
    let cache = net.adapt(&[s_map], &[labels], mode)?;
    apply_fc_delta(&net.fc_delta(&cache.raw)?, s_map, inst, tmpl, b)
}

pub fn apply_fc_delta(
    delta: &FcDelta,
    s_map: &FeatureMap,
    inst: &FeatureMap,
    tmpl: &FeatureMap,
    b: f64,
) -> Result<FcAdjusted> {
    match delta {
        FcDelta::Template { template, bias } => {
            if template.dim() != tmpl.data().dim() {
                return config_err("template delta shape does not match template");
            }
            let t_a = FeatureMap::from_raw(tmpl.data() + template);
            let b_a = b + bias;
            let response = crate::siamese::similarity_map(inst, &t_a, b_a)?;
            Ok(FcAdjusted { template: t_a, bias: b_a, response })
        }
        FcDelta::Response { response, bias } => {
            if response.dim() != (s_map.height(), s_map.width()) {
                return config_err("response delta shape does not match map");
            }
            let mut r = s_map.data().clone();
            r.index_axis_mut(Axis(0), 0).zip_mut_with(response, |v, d| *v += d + bias);
            Ok(FcAdjusted { template: tmpl.clone(), bias: b + bias, response: FeatureMap::from_raw(r) })
        }
    }
}

/// `dL/d raw` for the similarity-map predictor given `dL/d S_f`.
pub fn fc_raw_grad(delta: &FcDelta, inst: &FeatureMap, tmpl_a: &FeatureMap, ds: &FeatureMap) -> Array1<f64> {
    let d1 = ds.data().index_axis(Axis(0), 0);
    let db = d1.sum();
    match delta {
        FcDelta::Template { .. } => {
            let c = inst.channels();
            let dout = Array3::from_shape_fn((c, d1.nrows(), d1.ncols()), |(_, i, j)| d1[[i, j]]);
            let (_, dz) = dw_xcorr_backward(inst.data(), tmpl_a.data(), &dout);
            let mut v: Vec<f64> = dz.iter().copied().collect();
            v.push(db);
            Array1::from(v)
        }
        FcDelta::Response { .. } => {
            let mut v: Vec<f64> = d1.iter().copied().collect();
            v.push(db);
            Array1::from(v)
        }
    }
}

/// Correlation of an instance with a template delta alone.
pub fn correlate_delta(inst: &FeatureMap, dtmpl: &Array3<f64>) -> Array2<f64> {
    dw_xcorr(inst.data(), dtmpl).sum_axis(Axis(0))
}

/// Latent networks for both RPN branches of one head level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelNets {
    pub cls: BranchNet,
    pub loc: BranchNet,
}

impl Params for LevelNets {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.cls.visit(f);
        self.loc.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.cls.visit_mut(f);
        self.loc.visit_mut(f);
    }
}

/// One latent network per branch per head level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClNet {
    pub config: ClNetConfig,
    pub levels: Vec<LevelNets>,
}

impl ClNet {
    /// `hidden` is the channel count of `M`, `k` the anchors per cell.
    pub fn init<R: Rng + ?Sized>(
        config: ClNetConfig,
        hidden: usize,
        k: usize,
        levels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if levels == 0 || k == 0 {
            return config_err("levels and anchors_per_cell must be positive");
        }
        let levels = (0..levels)
            .map(|_| {
                Ok(LevelNets {
                    cls: BranchNet::for_head(Branch::Cls, &config, hidden, 2 * k, rng)?,
                    loc: BranchNet::for_head(Branch::Reg, &config, hidden, 4 * k, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, levels })
    }

    /// Zeroes every `g_delta` output layer, making adaptation the identity.
    pub fn zero_output(&mut self) {
        for l in &mut self.levels {
            for b in [&mut l.cls, &mut l.loc] {
                b.predictor.fc3.weight.fill(0.0);
                b.predictor.fc3.bias.fill(0.0);
            }
        }
    }
}

impl Params for ClNet {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.levels.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.levels.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

/// Closed-form parameter count of one branch network.
///
/// Batch-norm scale and shift are counted; running statistics are not.
pub fn branch_param_count(cfg: &ClNetConfig, branch: Branch, in_channels: usize, raw_len: usize) -> BranchParamCount {
    let w = cfg.adjust_width(branch);
    let conv1 = in_channels * w + w + 2 * w;
    let conv23 = 2 * (w * w + w + 2 * w);
    let h = cfg.hidden;
    let fc1 = cfg.latent_len() * h + h;
    let fc2 = h * h + h;
    let fc3 = h * raw_len + raw_len;
    BranchParamCount { adjuster: conv1 + conv23, fc1, fc2, fc3 }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BranchParamCount {
    pub adjuster: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub fc3: usize,
}

impl BranchParamCount {
    pub fn total(&self) -> usize {
        self.adjuster + self.fc1 + self.fc2 + self.fc3
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamRow {
    pub level: usize,
    pub branch: Branch,
    pub counts: BranchParamCount,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub rows: Vec<ParamRow>,
    pub total: usize,
}

/// Closed-form counts for a latent network over `levels` RPN levels with
/// `hidden`-channel maps and `k` anchors per cell.
pub fn param_report(cfg: &ClNetConfig, hidden: usize, k: usize, levels: usize) -> Result<ParamReport> {
    if levels == 0 || k == 0 {
        return config_err("levels and anchors_per_cell must be positive");
    }
    cfg.validate(Branch::Cls, hidden)?;
    cfg.validate(Branch::Reg, hidden)?;
    let mut rows = Vec::with_capacity(2 * levels);
    for level in 0..levels {
        for (branch, out) in [(Branch::Cls, 2 * k), (Branch::Reg, 4 * k)] {
            let raw = WeightDelta::raw_len(cfg.augmentation, out, hidden);
            rows.push(ParamRow { level, branch, counts: branch_param_count(cfg, branch, hidden, raw) });
        }
    }
    let total = rows.iter().map(|r| r.counts.total()).sum();
    Ok(ParamReport { rows, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_map(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::new(Array::from_shape_fn((c, h, w), |_| r.random_range(-1.0..1.0))).unwrap()
    }

    fn labels_k1(spec: &[Label]) -> LabelMap {
        LabelMap::from_labels(spec.to_vec())
    }

    #[test]
    fn latent_two_sample_oracle() {
        // positions: (1,3) POS, (3,5) POS, (0,0) NEG, (2,2) NEG
        let data = Array::from_shape_vec((2, 1, 4), vec![1.0, 3.0, 0.0, 2.0, 3.0, 5.0, 0.0, 2.0]).unwrap();
        let m = FeatureMap::new(data).unwrap();
        let y = labels_k1(&[Label::Pos, Label::Pos, Label::Neg, Label::Neg]);
        let c = latent_encode(&m, &y, Branch::Cls).unwrap();
        assert_eq!(c.part(LatentPart::PosMean).unwrap(), &[2.0, 4.0]);
        assert_eq!(c.part(LatentPart::PosStd).unwrap(), &[1.0, 1.0]);
        assert_eq!(c.part(LatentPart::NegMean).unwrap(), &[1.0, 1.0]);
        assert_eq!(c.part(LatentPart::NegStd).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn latent_constant_set_has_zero_std() {
        let data = Array::from_shape_fn((3, 1, 5), |(c, _, _)| c as f64 + 0.5);
        let m = FeatureMap::new(data).unwrap();
        let y = labels_k1(&[Label::Pos, Label::Pos, Label::Pos, Label::Neg, Label::Ignore]);
        let c = latent_encode(&m, &y, Branch::Cls).unwrap();
        assert_eq!(c.part(LatentPart::PosMean).unwrap(), &[0.5, 1.5, 2.5]);
        assert!(c.part(LatentPart::PosStd).unwrap().iter().all(|&v| v == 0.0));
        assert!(c.part(LatentPart::NegStd).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn latent_errors_on_empty_sets() {
        let m = FeatureMap::zeros(2, 1, 3);
        let only_pos = labels_k1(&[Label::Pos, Label::Ignore, Label::Ignore]);
        assert!(matches!(latent_encode(&m, &only_pos, Branch::Cls), Err(Error::EncoderInput(_))));
        let reg = latent_encode(&m, &only_pos, Branch::Reg).unwrap();
        assert_eq!(reg.len(), 4);
        let none = labels_k1(&[Label::Neg, Label::Neg, Label::Ignore]);
        assert!(latent_encode(&m, &none, Branch::Reg).is_err());
    }

    #[test]
    fn full_size_latent_and_delta_lengths() {
        let cfg = ClNetConfig::default();
        assert_eq!(cfg.latent_len(), 512);
        let mut r = rng(1);
        let cls = BranchNet::for_head(Branch::Cls, &cfg, 256, 10, &mut r).unwrap();
        assert_eq!(cls.raw_len(), 2571);
        let reg = BranchNet::for_head(Branch::Reg, &cfg, 256, 20, &mut r).unwrap();
        assert_eq!(reg.raw_len(), 4 * 5 * 257 + 1);
        assert_eq!(reg.adjuster.out_channels(), 256);
        let m = random_map(&mut r, 256, 25, 25);
        let m_bar = cls.adjuster.forward(&m, NormMode::Eval).unwrap();
        assert_eq!((m_bar.channels(), m_bar.height(), m_bar.width()), (128, 25, 25));
        let fc = BranchNet::for_similarity(&cfg, (16, 7, 7), (25, 25), &mut r).unwrap();
        assert_eq!(fc.adjuster.in_channels(), 1);
        let fcr = BranchNet::for_similarity(
            &ClNetConfig { fc_delta_mode: FcDeltaMode::Response, ..cfg.clone() },
            (16, 7, 7),
            (25, 25),
            &mut r,
        )
        .unwrap();
        assert_eq!(fcr.raw_len(), 25 * 25 + 1);
    }

    #[test]
    fn adjuster_zero_weights_give_zero_map() {
        let mut r = rng(2);
        let mut g = FeatureAdjuster::init(6, 4, &mut r);
        g.visit_mut(&mut |s| s.fill(0.0));
        for b in &mut g.blocks {
            b.norm.running_mean.fill(0.0);
        }
        let m = random_map(&mut r, 6, 5, 5);
        let out = g.forward(&m, NormMode::Eval).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(g.forward(&random_map(&mut r, 5, 2, 2), NormMode::Eval).is_err());
    }

    #[test]
    fn adjuster_block_is_per_position_affine() {
        let mut r = rng(3);
        let g = FeatureAdjuster::init(3, 2, &mut r);
        let m = random_map(&mut r, 3, 2, 3);
        let (rows, _) = g.forward_rows(m.to_rows().view(), NormMode::Eval);
        // oracle: explicit loops per position through all three blocks
        for p in 0..6 {
            let mut v: Vec<f64> = (0..3).map(|c| m.get(c, p / 3, p % 3)).collect();
            for b in &g.blocks {
                let mut next = vec![0.0; b.conv.outputs()];
                for (o, out) in next.iter_mut().enumerate() {
                    let mut acc = b.conv.bias[o];
                    for (i, x) in v.iter().enumerate() {
                        acc += b.conv.weight[[o, i]] * x;
                    }
                    let z = (acc - b.norm.running_mean[o]) / (b.norm.running_var[o] + b.norm.eps).sqrt();
                    *out = (z * b.norm.gamma[o] + b.norm.beta[o]).max(0.0);
                }
                v = next;
            }
            for (o, x) in v.iter().enumerate() {
                assert!((rows[[p, o]] - x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_fc3_gives_exact_zero_delta() {
        let mut r = rng(4);
        let p = DeviationPredictor::init(8, 5, 7, &mut r);
        let c = LatentFeature {
            values: Array1::from_shape_fn(8, |i| i as f64 - 3.0),
            parts: vec![(LatentPart::PosMean, 8)],
        };
        assert!(p.forward(&c).unwrap().iter().all(|&v| v == 0.0));
        let short = LatentFeature { values: Array1::zeros(3), parts: vec![] };
        assert!(p.forward(&short).is_err());
    }

    #[test]
    fn predictor_matches_explicit_mlp() {
        let mut r = rng(5);
        let mut p = DeviationPredictor::init(6, 4, 3, &mut r);
        p.fc3 = Linear::init(4, 3, &mut r);
        p.fc3.bias = Array1::from(vec![0.1, -0.2, 0.3]);
        let x: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let out = p.forward_cached(&Array1::from(x.clone())).0;
        let layer = |l: &Linear, v: &[f64]| -> Vec<f64> {
            (0..l.outputs())
                .map(|o| l.bias[o] + (0..l.inputs()).map(|i| l.weight[[o, i]] * v[i]).sum::<f64>())
                .collect()
        };
        let h1: Vec<f64> = layer(&p.fc1, &x).into_iter().map(|v| v.max(0.0)).collect();
        let h2: Vec<f64> = layer(&p.fc2, &h1).into_iter().map(|v| v.max(0.0)).collect();
        let y: Vec<f64> = layer(&p.fc3, &h2).into_iter().map(f64::tanh).collect();
        for (a, b) in out.iter().zip(&y) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn head(r: &mut ChaCha8Rng, o: usize, i: usize) -> HeadWeights {
        let mut h = HeadWeights::init(i, o, 1.0, r);
        h.bias.mapv_inplace(|_| r.random_range(-1.0..1.0));
        h
    }

    #[test]
    fn identity_deltas_leave_weights_bit_exact() {
        let mut r = rng(6);
        let theta = head(&mut r, 4, 3);
        for mode in [Augmentation::Additive, Augmentation::Cbam, Augmentation::Film] {
            let zero = vec![0.0; WeightDelta::raw_len(mode, 4, 3)];
            let d = WeightDelta::from_raw(mode, 4, 3, &zero).unwrap();
            assert_eq!(augment_weights(&theta, &d).unwrap(), theta, "{mode:?}");
        }
    }

    #[test]
    fn cbam_elementwise_example() {
        // [W | b] = [[1, 2], [3, 4]]
        let theta = HeadWeights {
            weight: Array2::from_shape_vec((2, 1), vec![1.0, 3.0]).unwrap(),
            bias: Array1::from(vec![2.0, 4.0]),
            offset: 0.0,
        };
        let d =
            WeightDelta::Cbam { rows: Array1::from(vec![2.0, 1.0]), cols: Array1::from(vec![1.0, 3.0]), offset: 0.0 };
        let a = augment_weights(&theta, &d).unwrap();
        assert_eq!(a.weight, Array2::from_shape_vec((2, 1), vec![2.0, 3.0]).unwrap());
        assert_eq!(a.bias, Array1::from(vec![12.0, 12.0]));
    }

    #[test]
    fn film_and_additive_arithmetic() {
        let theta = HeadWeights {
            weight: Array2::from_shape_vec((1, 2), vec![2.0, -1.0]).unwrap(),
            bias: Array1::from(vec![0.5]),
            offset: 0.0,
        };
        let film = WeightDelta::Film {
            gamma: Array2::from_shape_vec((1, 3), vec![2.0, 0.5, 1.0]).unwrap(),
            beta: Array2::from_shape_vec((1, 3), vec![1.0, 0.0, -0.5]).unwrap(),
            offset: 0.25,
        };
        let a = augment_weights(&theta, &film).unwrap();
        assert_eq!(a.weight.as_slice().unwrap(), &[5.0, -0.5]);
        assert_eq!(a.bias[0], 0.0);
        assert_eq!(a.offset, 0.25);
        let add = WeightDelta::from_raw(Augmentation::Additive, 1, 2, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let a = augment_weights(&theta, &add).unwrap();
        assert_eq!(a.weight.as_slice().unwrap(), &[2.1, -0.8]);
        assert_eq!(a.bias[0], 0.8);
        assert_eq!(a.offset, 0.4);
        assert!(WeightDelta::from_raw(Augmentation::Additive, 1, 2, &[0.0; 3]).is_err());
        let wrong = WeightDelta::Additive(HeadWeights::zeros(3, 1));
        assert!(augment_weights(&theta, &wrong).is_err());
    }

    #[test]
    fn adjusted_forward_composes_augment_and_head() {
        let mut r = rng(7);
        let cfg = ClNetConfig { latent_channels: 3, hidden: 5, ..ClNetConfig::default() };
        let mut net = BranchNet::for_head(Branch::Cls, &cfg, 4, 2, &mut r).unwrap();
        net.predictor.fc3 = Linear::init(5, net.raw_len(), &mut r);
        let theta = head(&mut r, 2, 4);
        let m = random_map(&mut r, 4, 3, 3);
        let y = labels_k1(&[
            Label::Pos,
            Label::Pos,
            Label::Neg,
            Label::Neg,
            Label::Neg,
            Label::Ignore,
            Label::Neg,
            Label::Neg,
            Label::Neg,
        ]);
        let cache = net.adapt(&[&m], &[&y], NormMode::Eval).unwrap();
        let theta_a = net.adjust_head(&theta, &cache).unwrap();
        let a = adjusted_forward(&m, &theta_a).unwrap();
        assert_eq!(a.channels(), 2);
        // oracle: add the raw vector row-major by hand, then per-position affine
        let t = cache.raw.as_slice().unwrap();
        for o in 0..2 {
            for p in 0..9 {
                let mut acc = theta.bias[o] + t[o * 5 + 4] + t[10];
                for c in 0..4 {
                    acc += (theta.weight[[o, c]] + t[o * 5 + c]) * m.get(c, p / 3, p % 3);
                }
                assert!((acc - a.get(o, p / 3, p % 3)).abs() < 1e-12);
            }
        }
        assert!(t.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn fc_adjust_zero_predictor_and_linearity() {
        let mut r = rng(8);
        let cfg = ClNetConfig { latent_channels: 4, hidden: 6, ..ClNetConfig::default() };
        let inst = random_map(&mut r, 3, 8, 8);
        let tmpl = random_map(&mut r, 3, 4, 4);
        let s = crate::siamese::similarity_map(&inst, &tmpl, 0.2).unwrap();
        let mut y = vec![Label::Neg; 25];
        y[12] = Label::Pos;
        y[7] = Label::Pos;
        let y = LabelMap::from_labels(y);
        let mut net = BranchNet::for_similarity(&cfg, (3, 4, 4), (5, 5), &mut r).unwrap();
        let out = fc_adjust(&s, &y, &inst, &tmpl, 0.2, &net, NormMode::Eval).unwrap();
        assert_eq!(out.response, s);
        assert_eq!(out.bias, 0.2);

        net.predictor.fc3 = Linear::init(6, net.raw_len(), &mut r);
        let out = fc_adjust(&s, &y, &inst, &tmpl, 0.2, &net, NormMode::Eval).unwrap();
        let dtmpl = out.template.data() - tmpl.data();
        let db = out.bias - 0.2;
        let expect = correlate_delta(&inst, &dtmpl) + db;
        let diff = out.response.data().index_axis(Axis(0), 0).to_owned() - s.data().index_axis(Axis(0), 0);
        let err = diff.iter().zip(expect.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9);

        let resp_cfg = ClNetConfig { fc_delta_mode: FcDeltaMode::Response, ..cfg };
        let mut rnet = BranchNet::for_similarity(&resp_cfg, (3, 4, 4), (5, 5), &mut r).unwrap();
        assert_eq!(fc_adjust(&s, &y, &inst, &tmpl, 0.2, &rnet, NormMode::Eval).unwrap().response, s);
        rnet.predictor.fc3 = Linear::init(6, rnet.raw_len(), &mut r);
        let out = fc_adjust(&s, &y, &inst, &tmpl, 0.2, &rnet, NormMode::Eval).unwrap();
        assert_eq!(out.template, tmpl);
        assert!(fc_adjust(&inst, &y, &inst, &tmpl, 0.2, &rnet, NormMode::Eval).is_err());
    }

    #[test]
    fn full_size_param_counts() {
        let cfg = ClNetConfig::default();
        let cls = branch_param_count(&cfg, Branch::Cls, 256, 2571);
        assert_eq!(cls.fc3, 256 * 2571 + 2571);
        let mut r = rng(9);
        let net = BranchNet::for_head(Branch::Cls, &cfg, 256, 10, &mut r).unwrap();
        assert_eq!(net.num_params(), cls.total());
        let reg = BranchNet::for_head(Branch::Reg, &cfg, 256, 20, &mut r).unwrap();
        assert_eq!(reg.num_params(), branch_param_count(&cfg, Branch::Reg, 256, reg.raw_len()).total());
    }

    #[test]
    fn report_matches_instantiation() {
        for aug in [Augmentation::Additive, Augmentation::Cbam, Augmentation::Film] {
            let cfg = ClNetConfig { latent_channels: 8, hidden: 12, augmentation: aug, ..ClNetConfig::default() };
            let rep = param_report(&cfg, 16, 3, 2).unwrap();
            let net = ClNet::init(cfg, 16, 3, 2, &mut rng(4)).unwrap();
            assert_eq!(rep.total, net.num_params());
            assert_eq!(rep.rows.len(), 4);
        }
    }

    #[test]
    fn rejects_oversized_latent() {
        let cfg = ClNetConfig { latent_channels: 9, ..ClNetConfig::default() };
        assert!(cfg.validate(Branch::Cls, 4).is_err());
        assert!(cfg.validate(Branch::Cls, 5).is_ok());
        assert!(cfg.validate(Branch::Fc, 1).is_ok());
    }

    fn chain_loss(
        net: &BranchNet,
        theta: &HeadWeights,
        maps: &[FeatureMap],
        labels: &[LabelMap],
        probes: &[Array2<f64>],
    ) -> f64 {
        let mrefs: Vec<&FeatureMap> = maps.iter().collect();
        let lrefs: Vec<&LabelMap> = labels.iter().collect();
        let cache = net.adapt(&mrefs, &lrefs, NormMode::Train).unwrap();
        let theta_a = net.adjust_head(theta, &cache).unwrap();
        maps.iter().zip(probes).map(|(m, p)| (adjusted_forward(m, &theta_a).unwrap().to_rows() * p).sum()).sum()
    }

    #[test]
    fn full_chain_gradient_matches_finite_differences() {
        for (branch, mode) in [
            (Branch::Cls, Augmentation::Additive),
            (Branch::Reg, Augmentation::Cbam),
            (Branch::Cls, Augmentation::Film),
        ] {
            let mut r = rng(11);
            let cfg = ClNetConfig { latent_channels: 3, hidden: 6, augmentation: mode, ..ClNetConfig::default() };
            let out_dim = if branch == Branch::Reg { 4 } else { 2 };
            let mut net = BranchNet::for_head(branch, &cfg, 4, out_dim, &mut r).unwrap();
            net.predictor.fc3 = Linear::init_with_std(6, net.raw_len(), 0.3, &mut r);
            let theta = head(&mut r, out_dim, 4);
            let maps: Vec<FeatureMap> = (0..2).map(|_| random_map(&mut r, 4, 3, 3)).collect();
            let labels: Vec<LabelMap> = (0..2)
                .map(|i| {
                    let mut y = vec![Label::Neg; 9];
                    y[4] = Label::Pos;
                    y[i + 1] = Label::Pos;
                    y[8] = Label::Ignore;
                    LabelMap::from_labels(y)
                })
                .collect();
            let probes: Vec<Array2<f64>> =
                (0..2).map(|_| Array2::from_shape_fn((9, out_dim), |_| r.random_range(-1.0..1.0))).collect();

            let mrefs: Vec<&FeatureMap> = maps.iter().collect();
            let lrefs: Vec<&LabelMap> = labels.iter().collect();
            let cache = net.adapt(&mrefs, &lrefs, NormMode::Train).unwrap();
            let theta_a = net.adjust_head(&theta, &cache).unwrap();
            let mut dtheta = theta_a.zeros_like();
            for (m, p) in maps.iter().zip(&probes) {
                theta_a.backward_rows(&m.to_rows(), p, &mut dtheta);
            }
            let draw = net.head_raw_grad(&theta, &cache, &dtheta).unwrap();
            let mut grad = net.zeros_like();
            net.backward(&cache, &draw, &mut grad);
            let analytic = grad.flat();

            let base = net.flat();
            let h = 1e-6;
            let mut worst: f64 = 0.0;
            for _ in 0..40 {
                let i = r.random_range(0..base.len());
                let mut p = base.clone();
                p[i] += h;
                let mut plus = net.clone();
                plus.set_flat(&p);
                p[i] -= 2.0 * h;
                let mut minus = net.clone();
                minus.set_flat(&p);
                let num = (chain_loss(&plus, &theta, &maps, &labels, &probes)
                    - chain_loss(&minus, &theta, &maps, &labels, &probes))
                    / (2.0 * h);
                let rel = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-3);
                worst = worst.max(rel);
            }
            assert!(worst < 1e-4, "{branch:?} {mode:?}: {worst}");
        }
    }

    proptest! {
        #[test]
        fn latent_length_is_number_free(npos in 1usize..20, nneg in 1usize..20, seed in 0u64..1000) {
            let mut r = rng(seed);
            let m = random_map(&mut r, 3, 5, 8);
            let mut labels = vec![Label::Ignore; 40];
            for l in labels.iter_mut().take(npos) { *l = Label::Pos; }
            for l in labels.iter_mut().skip(20).take(nneg) { *l = Label::Neg; }
            let c = latent_encode(&m, &LabelMap::from_labels(labels), Branch::Cls).unwrap();
            prop_assert_eq!(c.len(), 12);
            prop_assert!(c.part(LatentPart::PosStd).unwrap().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn latent_is_permutation_invariant(seed in 0u64..1000, shift in 1usize..9) {
            let mut r = rng(seed);
            let rows = Array2::from_shape_fn((10, 3), |_| r.random_range(-2.0..2.0));
            let sets = SampleRows { pos: vec![0, 1, 2, 3], neg: vec![4, 5, 6, 7, 8, 9] };
            let a = encode_rows(rows.view(), &sets, Branch::Cls).unwrap();
            let mut p = sets.pos.clone();
            p.rotate_left(shift % 4);
            let mut n = sets.neg.clone();
            n.reverse();
            n.rotate_left(shift % 6);
            let b = encode_rows(rows.view(), &SampleRows { pos: p, neg: n }, Branch::Cls).unwrap();
            for (x, y) in a.values.iter().zip(b.values.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn additive_deltas_are_tanh_bounded(seed in 0u64..500) {
            let mut r = rng(seed);
            let mut p = DeviationPredictor::init(4, 6, 9, &mut r);
            p.fc3 = Linear::init_with_std(6, 9, 5.0, &mut r);
            let c = Array1::from_shape_fn(4, |_| r.random_range(-3.0..3.0));
            let out = p.forward_cached(&c).0;
            prop_assert!(out.iter().all(|v| v.abs() < 1.0));
        }
    }
}
