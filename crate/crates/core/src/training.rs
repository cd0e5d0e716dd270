//! Offline training: losses, sample selection, one-sequence batches, and
//! the training loops for the base tracker and the latent network.

use std::path::Path;

use ndarray::Array3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clnet::{ClNet, NormMode};
use crate::error::{input_err, Error, Result};
use crate::evalbench::Sequence;
use crate::geometry::{assign_labels, encode_offsets, AnchorGrid, BBox, Label, LabelMap};
use crate::nn::{Params, Sgd};
use crate::patch::crop;
use crate::siamese::{HeadWeights, RpnModel};
use crate::tensor::FeatureMap;

/// Role of a selected anchor in a training pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Pos,
    Neg,
    Diverse,
}

/// Anchor indices taking part in the loss, with their roles.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub items: Vec<(usize, Role)>,
}

impl Selection {
    pub fn count(&self, role: Role) -> usize {
        self.items.iter().filter(|(_, r)| *r == role).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.items.iter().map(|(i, _)| *i).collect()
    }

    /// Labels restricted to the selection; diverse anchors count as negatives.
    pub fn label_map(&self, len: usize) -> LabelMap {
        let mut labels = vec![Label::Ignore; len];
        for &(i, r) in &self.items {
            labels[i] = if r == Role::Pos { Label::Pos } else { Label::Neg };
        }
        LabelMap::from_labels(labels)
    }
}

/// Sizes of the per-pair sample protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleProtocol {
    pub total: usize,
    pub max_pos: usize,
    pub diverse: usize,
}

impl Default for SampleProtocol {
    fn default() -> Self {
        Self { total: 64, max_pos: 16, diverse: 16 }
    }
}

/// Draws up to `max_pos` positives and fills the rest of `total` with negatives.
pub fn select_samples<R: Rng + ?Sized>(labels: &LabelMap, protocol: &SampleProtocol, rng: &mut R) -> Selection {
    let pos: Vec<usize> = labels.indices_of(Label::Pos).collect();
    let neg: Vec<usize> = labels.indices_of(Label::Neg).collect();
    let npos = pos.len().min(protocol.max_pos);
    let nneg = neg.len().min(protocol.total.saturating_sub(npos));
    let mut items: Vec<(usize, Role)> = sample(rng, pos.len(), npos).into_iter().map(|i| (pos[i], Role::Pos)).collect();
    items.extend(sample(rng, neg.len(), nneg).into_iter().map(|i| (neg[i], Role::Neg)));
    Selection { items }
}

/// Positive-class probability per anchor from a `(2k, h, w)` map.
///
/// Channels `2a` and `2a + 1` hold the background and target logits of
/// anchor `a`.
pub fn positive_scores(cls: &FeatureMap) -> Vec<f64> {
    let k = cls.channels() / 2;
    let (h, w) = (cls.height(), cls.width());
    let mut out = Vec::with_capacity(h * w * k);
    for y in 0..h {
        for x in 0..w {
            for a in 0..k {
                let (n, p) = (cls.get(2 * a, y, x), cls.get(2 * a + 1, y, x));
                out.push(1.0 / (1.0 + (n - p).exp()));
            }
        }
    }
    out
}

/// Up to `count` unused negative anchors with the highest base positive
/// score, best first; ties go to the lower index.
pub fn mine_diverse_samples(cls_base: &FeatureMap, labels: &LabelMap, used: &[usize], count: usize) -> Vec<usize> {
    let scores = positive_scores(cls_base);
    let mut is_used = vec![false; labels.len()];
    for &i in used {
        is_used[i] = true;
    }
    let mut cand: Vec<usize> = labels.indices_of(Label::Neg).filter(|&i| !is_used[i]).collect();
    cand.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    cand.truncate(count);
    cand
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub loc: f64,
    pub total: f64,
}

/// Loss and its gradients with respect to both maps.
pub struct LossGrad {
    pub loss: LossParts,
    pub d_cls: FeatureMap,
    pub d_loc: FeatureMap,
}

/// `L = L_cls + lambda * L_loc` over the selected anchors.
///
/// `L_cls` averages softmax cross-entropy over positives and over
/// negatives (diverse included) and weighs the two halves equally;
/// `L_loc` is the smooth-L1 offset error summed over coordinates and
/// averaged over positives. `targets[i]` is anchor `i`'s offset target.
pub fn combined_loss(
    cls: &FeatureMap,
    loc: &FeatureMap,
    selection: &Selection,
    targets: &[[f64; 4]],
    lambda: f64,
) -> Result<LossGrad> {
    if cls.data().iter().chain(loc.data().iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in score maps".into()));
    }
    let k = cls.channels() / 2;
    if loc.channels() != 4 * k || cls.height() != loc.height() || cls.width() != loc.width() {
        return input_err("classification and regression maps disagree on shape");
    }
    let w = cls.width();
    let mut d_cls = Array3::zeros(cls.data().dim());
    let mut d_loc = Array3::zeros(loc.data().dim());
    let npos = selection.count(Role::Pos);
    let nneg = selection.items.len() - npos;
    let halves = usize::from(npos > 0) + usize::from(nneg > 0);
    let mut loss = LossParts::default();
    for &(i, role) in &selection.items {
        let (p, a) = (i / k, i % k);
        let (y, x) = (p / w, p % w);
        let (ln, lp) = (cls.get(2 * a, y, x), cls.get(2 * a + 1, y, x));
        let m = ln.max(lp);
        let lse = m + ((ln - m).exp() + (lp - m).exp()).ln();
        let (pn, pp) = ((ln - lse).exp(), (lp - lse).exp());
        let is_pos = role == Role::Pos;
        let weight = 1.0 / (halves as f64 * if is_pos { npos } else { nneg } as f64);
        loss.cls += weight * (lse - if is_pos { lp } else { ln });
        d_cls[[2 * a, y, x]] += weight * (pn - f64::from(u8::from(!is_pos)));
        d_cls[[2 * a + 1, y, x]] += weight * (pp - f64::from(u8::from(is_pos)));
        if is_pos {
            for j in 0..4 {
                let r = loc.get(4 * a + j, y, x) - targets[i][j];
                loss.loc += smooth_l1(r) / npos as f64;
                d_loc[[4 * a + j, y, x]] += lambda * smooth_l1_grad(r) / npos as f64;
            }
        }
    }
    loss.total = loss.cls + lambda * loss.loc;
    if !loss.total.is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    Ok(LossGrad { loss, d_cls: FeatureMap::new(d_cls)?, d_loc: FeatureMap::new(d_loc)? })
}

/// A template/search crop pair with labels in search-crop coordinates.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub sequence: usize,
    pub template_patch: Array3<f64>,
    pub search_patch: Array3<f64>,
    /// Ground truth relative to the search-crop center.
    pub gt: BBox,
    pub labels: LabelMap,
    pub selection: Selection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairSampling {
    /// Maximum frame gap between template and search frames.
    pub max_gap: usize,
    /// Maximum offset of the search-crop center from the target center.
    pub max_shift: f64,
    pub neg_threshold: f64,
    pub pos_threshold: f64,
    pub protocol: SampleProtocol,
}

impl Default for PairSampling {
    fn default() -> Self {
        Self {
            max_gap: 100,
            max_shift: 8.0,
            neg_threshold: crate::geometry::DEFAULT_NEG_THRESHOLD,
            pos_threshold: crate::geometry::DEFAULT_POS_THRESHOLD,
            protocol: SampleProtocol::default(),
        }
    }
}

/// Builds one pair from sequence `seq_idx`; diverse samples are added later.
pub fn sample_pair<R: Rng + ?Sized>(
    dataset: &[Sequence],
    seq_idx: usize,
    model: &RpnModel,
    anchors: &AnchorGrid,
    cfg: &PairSampling,
    rng: &mut R,
) -> Result<TrainingPair> {
    let seq = &dataset[seq_idx];
    if seq.len() < 2 {
        return input_err(format!("sequence {} is too short for pairs", seq.id));
    }
    let n = seq.len();
    let t = rng.random_range(0..n);
    let gap = cfg.max_gap.max(1);
    let lo = t.saturating_sub(gap);
    let hi = (t + gap).min(n - 1);
    let mut s = rng.random_range(lo..=hi);
    if s == t {
        s = if t + 1 < n { t + 1 } else { t - 1 };
    }
    let (tc, sc) = (seq.gt[t].center(), seq.gt[s].center());
    let zimg = seq.frames[t].load()?;
    let ximg = seq.frames[s].load()?;
    let z = crop(&zimg, tc.0, tc.1, model.config.template_size);
    let dx = rng.random_range(-cfg.max_shift..=cfg.max_shift);
    let dy = rng.random_range(-cfg.max_shift..=cfg.max_shift);
    let x = crop(&ximg, sc.0 + dx, sc.1 + dy, model.config.search_size);
    let gt = seq.gt[s].translate(-x.center.0, -x.center.1);
    let labels = assign_labels(anchors, &gt, cfg.neg_threshold, cfg.pos_threshold);
    let selection = select_samples(&labels, &cfg.protocol, rng);
    Ok(TrainingPair { sequence: seq_idx, template_patch: z.data, search_patch: x.data, gt, labels, selection })
}

/// `batch_size` pairs drawn from one uniformly chosen sequence.
pub fn sample_sequence_batch<R: Rng + ?Sized>(
    dataset: &[Sequence],
    batch_size: usize,
    model: &RpnModel,
    anchors: &AnchorGrid,
    cfg: &PairSampling,
    rng: &mut R,
) -> Result<Vec<TrainingPair>> {
    if dataset.iter().all(|s| s.len() < 2) {
        return input_err("dataset has no sequence with at least two frames");
    }
    // Sequences shorter than a pair are skipped by redrawing.
    let seq_idx = loop {
        let i = rng.random_range(0..dataset.len());
        if dataset[i].len() >= 2 {
            break i;
        }
    };
    (0..batch_size).map(|_| sample_pair(dataset, seq_idx, model, anchors, cfg, rng)).collect()
}

/// Warmup followed by exponential decay, per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub warmup_epochs: usize,
    pub warmup_start: f64,
    pub base: f64,
    pub end: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { warmup_epochs: 1, warmup_start: 0.001, base: 0.01, end: 0.001 }
    }
}

/// Geometric interpolation, linear when either end is not positive.
fn interpolate(a: f64, b: f64, f: f64) -> f64 {
    if a > 0.0 && b > 0.0 {
        a * (b / a).powf(f)
    } else {
        a + (b - a) * f
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize, epochs: usize) -> f64 {
        if epoch < self.warmup_epochs {
            let f = (epoch + 1) as f64 / self.warmup_epochs as f64;
            return interpolate(self.warmup_start, self.base, f);
        }
        let rest = epochs.saturating_sub(self.warmup_epochs).max(1);
        let i = (epoch - self.warmup_epochs) as f64 / (rest.max(2) - 1) as f64;
        interpolate(self.base, self.end, i.min(1.0))
    }
}

/// Where the latent feature of a one-sequence batch comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    /// Pool the selected samples of every pair in the batch.
    Batch,
    /// Use only the first pair of the batch.
    FirstPair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mining: bool,
    pub latent_source: LatentSource,
    pub sampling: PairSampling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.2,
            batch_size: 8,
            epochs: 10,
            steps_per_epoch: 100,
            lr: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            mining: true,
            latent_source: LatentSource::Batch,
            sampling: PairSampling::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config("lambda must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("batch_size, epochs and steps_per_epoch must be positive".into()));
        }
        let lr = &self.lr;
        if [lr.warmup_start, lr.base, lr.end].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        let p = &self.sampling.protocol;
        if p.max_pos > p.total {
            return Err(Error::Config("max_pos cannot exceed the sample total".into()));
        }
        let s = &self.sampling;
        if !(0.0 <= s.neg_threshold && s.neg_threshold < s.pos_threshold && s.pos_threshold <= 1.0) {
            return Err(Error::Config("label thresholds must satisfy 0 <= neg < pos <= 1".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss_cls: f64,
    pub loss_loc: f64,
    pub loss_total: f64,
}

pub fn write_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn targets_for(anchors: &AnchorGrid, gt: &BBox) -> Vec<[f64; 4]> {
    anchors.boxes().iter().map(|a| encode_offsets(a, gt)).collect()
}

fn diverged(step: usize, what: &str) -> Error {
    Error::Numeric(format!("training diverged at step {step}: {what}"))
}

/// Trains every parameter of the base tracker with the 64-sample protocol.
pub fn train_base(model: &mut RpnModel, dataset: &[Sequence], cfg: &TrainConfig) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    let anchors = model.config.anchors()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.at(epoch, cfg.epochs);
        for _ in 0..cfg.steps_per_epoch {
            let mut grad = model.zeros_like();
            let mut acc = LossParts::default();
            for _ in 0..cfg.batch_size {
                let i = rng.random_range(0..dataset.len());
                let pair = sample_pair(dataset, i, model, &anchors, &cfg.sampling, &mut rng)?;
                let (out, cache) = model.forward_train(&pair.template_patch, &pair.search_patch);
                let targets = targets_for(&anchors, &pair.gt);
                let lg = combined_loss(&out.cls, &out.loc, &pair.selection, &targets, cfg.lambda)
                    .map_err(|e| diverged(step, &e.to_string()))?;
                grad.accumulate(&model.backward(&cache, &lg.d_cls, &lg.d_loc));
                acc.cls += lg.loss.cls;
                acc.loc += lg.loss.loc;
                acc.total += lg.loss.total;
            }
            let b = cfg.batch_size as f64;
            grad.visit_mut(&mut |s| s.iter_mut().for_each(|v| *v /= b));
            if !grad.all_finite() {
                return Err(diverged(step, "non-finite gradient"));
            }
            opt.step(model, &grad, lr);
            log.push(LogRow { step, loss_cls: acc.cls / b, loss_loc: acc.loc / b, loss_total: acc.total / b });
            step += 1;
        }
    }
    Ok(log)
}

/// A training pair with everything the frozen base model contributes.
pub struct PreparedPair {
    pub hidden_cls: FeatureMap,
    pub hidden_loc: FeatureMap,
    pub selection: Selection,
    pub targets: Vec<[f64; 4]>,
}

/// Runs the frozen base model on a pair and completes its selection with
/// mined diverse negatives.
pub fn prepare_pair(
    model: &RpnModel,
    anchors: &AnchorGrid,
    pair: TrainingPair,
    mining: bool,
    diverse: usize,
) -> Result<PreparedPair> {
    let kernels = model.template_kernels(&pair.template_patch)?;
    let hidden = model.hidden_maps(&kernels, &pair.search_patch)?;
    let mut selection = pair.selection;
    if mining {
        let base = crate::siamese::head_forward(&hidden.cls, &model.cls.head1)?;
        let used = selection.indices();
        for i in mine_diverse_samples(&base, &pair.labels, &used, diverse) {
            selection.items.push((i, Role::Diverse));
        }
    }
    Ok(PreparedPair {
        targets: targets_for(anchors, &pair.gt),
        hidden_cls: hidden.cls,
        hidden_loc: hidden.loc,
        selection,
    })
}

/// Loss and latent-network gradient for one one-sequence batch.
pub fn clnet_batch_step(
    model: &RpnModel,
    net: &ClNet,
    batch: &[PreparedPair],
    cfg: &TrainConfig,
    mode: NormMode,
) -> Result<(LossParts, ClNet, Vec<crate::nn::BatchStats>, Vec<crate::nn::BatchStats>)> {
    let level = &net.levels[0];
    let n = match cfg.latent_source {
        LatentSource::Batch => batch.len(),
        LatentSource::FirstPair => 1,
    };
    let len = batch[0].targets.len();
    let labels: Vec<LabelMap> = batch[..n].iter().map(|p| p.selection.label_map(len)).collect();
    let lrefs: Vec<&LabelMap> = labels.iter().collect();
    let cls_maps: Vec<&FeatureMap> = batch[..n].iter().map(|p| &p.hidden_cls).collect();
    let loc_maps: Vec<&FeatureMap> = batch[..n].iter().map(|p| &p.hidden_loc).collect();
    let cls_cache = level.cls.adapt(&cls_maps, &lrefs, mode)?;
    let loc_cache = level.loc.adapt(&loc_maps, &lrefs, mode)?;
    let theta_cls = level.cls.adjust_head(&model.cls.head1, &cls_cache)?;
    let theta_loc = level.loc.adjust_head(&model.loc.head1, &loc_cache)?;

    let mut dcls = HeadWeights::zeros(theta_cls.in_dim(), theta_cls.out_dim());
    let mut dloc = HeadWeights::zeros(theta_loc.in_dim(), theta_loc.out_dim());
    let mut acc = LossParts::default();
    let b = batch.len() as f64;
    for p in batch {
        let a_cls = crate::clnet::adjusted_forward(&p.hidden_cls, &theta_cls)?;
        let a_loc = crate::clnet::adjusted_forward(&p.hidden_loc, &theta_loc)?;
        let lg = combined_loss(&a_cls, &a_loc, &p.selection, &p.targets, cfg.lambda)?;
        let scale = |m: &FeatureMap| m.to_rows() / b;
        theta_cls.backward_rows(&p.hidden_cls.to_rows(), &scale(&lg.d_cls), &mut dcls);
        theta_loc.backward_rows(&p.hidden_loc.to_rows(), &scale(&lg.d_loc), &mut dloc);
        acc.cls += lg.loss.cls / b;
        acc.loc += lg.loss.loc / b;
        acc.total += lg.loss.total / b;
    }
    let mut grad = net.zeros_like();
    let draw_cls = level.cls.head_raw_grad(&model.cls.head1, &cls_cache, &dcls)?;
    let draw_loc = level.loc.head_raw_grad(&model.loc.head1, &loc_cache, &dloc)?;
    level.cls.backward(&cls_cache, &draw_cls, &mut grad.levels[0].cls);
    level.loc.backward(&loc_cache, &draw_loc, &mut grad.levels[0].loc);
    Ok((acc, grad, cls_cache.batch_stats().to_vec(), loc_cache.batch_stats().to_vec()))
}

/// Trains the latent network with the base model frozen.
pub fn train_clnet(model: &RpnModel, net: &mut ClNet, dataset: &[Sequence], cfg: &TrainConfig) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if net.levels.is_empty() {
        return input_err("latent network has no levels");
    }
    let anchors = model.config.anchors()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.at(epoch, cfg.epochs);
        for _ in 0..cfg.steps_per_epoch {
            let pairs = sample_sequence_batch(dataset, cfg.batch_size, model, &anchors, &cfg.sampling, &mut rng)?;
            let batch = pairs
                .into_iter()
                .map(|p| prepare_pair(model, &anchors, p, cfg.mining, cfg.sampling.protocol.diverse))
                .collect::<Result<Vec<_>>>()?;
            if batch.iter().all(|p| p.selection.count(Role::Pos) == 0) {
                continue;
            }
            let (loss, grad, cls_stats, loc_stats) = match clnet_batch_step(model, net, &batch, cfg, NormMode::Train) {
                Ok(v) => v,
                Err(Error::EncoderInput(_)) => continue,
                Err(e) => return Err(diverged(step, &e.to_string())),
            };
            if !grad.all_finite() {
                return Err(diverged(step, "non-finite gradient"));
            }
            opt.step(net, &grad, lr);
            net.levels[0].cls.adjuster.update_running(&cls_stats);
            net.levels[0].loc.adjuster.update_running(&loc_stats);
            log.push(LogRow { step, loss_cls: loss.cls, loss_loc: loss.loc, loss_total: loss.total });
            step += 1;
        }
    }
    Ok(log)
}
