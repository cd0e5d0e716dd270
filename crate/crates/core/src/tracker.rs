//! Online tracking with first-frame adaptation and conditional updating.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clnet::{ClNet, NormMode};
use crate::error::{config_err, Error, Result};
use crate::evalbench::Sequence;
use crate::geometry::{assign_labels, decode_offsets, AnchorGrid, BBox, Label, LabelMap};
use crate::patch::crop;
use crate::siamese::{head_forward, HeadWeights, HiddenMaps, RpnModel, TemplateKernels};
use crate::training::{mine_diverse_samples, positive_scores, select_samples, Role, SampleProtocol, Selection};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackMode {
    /// The base tracker, no latent network.
    Base,
    /// First-frame adaptation only.
    Clnet,
    /// First-frame adaptation plus conditional updating.
    ClnetStar,
}

impl std::fmt::Display for TrackMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrackMode::Base => "base",
            TrackMode::Clnet => "clnet",
            TrackMode::ClnetStar => "clnet_star",
        })
    }
}

impl std::str::FromStr for TrackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(TrackMode::Base),
            "clnet" => Ok(TrackMode::Clnet),
            "clnet_star" | "clnet*" | "star" => Ok(TrackMode::ClnetStar),
            other => config_err(format!("unknown tracking mode `{other}`")),
        }
    }
}

/// Which labelled anchors feed the latent encoder at track time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitLabels {
    /// Every POS and NEG anchor.
    Full,
    /// The training protocol: sampled positives and negatives plus mined negatives.
    Protocol,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub mode: TrackMode,
    /// Reliability threshold on the selected proposal's score.
    pub tau_r: f64,
    /// Margin threshold below which an update fires.
    pub tau_m: f64,
    pub window_influence: f64,
    pub penalty_k: f64,
    pub size_lr: f64,
    pub init_labels: InitLabels,
    pub init_seed: u64,
    pub neg_threshold: f64,
    pub pos_threshold: f64,
    pub protocol: SampleProtocol,
    /// Keep every anchor's box and score in the frame records.
    pub dump_candidates: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            mode: TrackMode::Clnet,
            tau_r: 0.9,
            tau_m: 0.2,
            window_influence: 0.44,
            penalty_k: 0.04,
            size_lr: 0.4,
            init_labels: InitLabels::Protocol,
            init_seed: 0,
            neg_threshold: crate::geometry::DEFAULT_NEG_THRESHOLD,
            pos_threshold: crate::geometry::DEFAULT_POS_THRESHOLD,
            protocol: SampleProtocol::default(),
            dump_candidates: false,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.window_influence) || !(0.0..=1.0).contains(&self.size_lr) {
            return config_err("window_influence and size_lr must lie in [0, 1]");
        }
        if self.penalty_k < 0.0 || self.tau_r.is_nan() || self.tau_m.is_nan() {
            return config_err("penalty_k must be non-negative and thresholds must be numbers");
        }
        Ok(())
    }
}

/// Hidden maps and box of the last reliable frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateSet {
    feature: Option<HiddenMaps>,
    bbox: Option<BBox>,
}

impl CandidateSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(feature: HiddenMaps, bbox: BBox) -> Self {
        Self { feature: Some(feature), bbox: Some(bbox) }
    }

    pub fn is_empty(&self) -> bool {
        self.feature.is_none()
    }

    pub fn feature(&self) -> Option<&HiddenMaps> {
        self.feature.as_ref()
    }

    /// Box in the search-crop coordinates of the frame it came from.
    pub fn bbox(&self) -> Option<&BBox> {
        self.bbox.as_ref()
    }
}

/// Keeps the previous candidate unless the frame's score exceeds `tau_r`.
/// Frame index 0 (the first frame) always yields the empty set.
pub fn update_candidates(
    prev: CandidateSet,
    frame: usize,
    feature: &HiddenMaps,
    bbox: &BBox,
    score: f64,
    tau_r: f64,
) -> CandidateSet {
    if frame == 0 {
        CandidateSet::empty()
    } else if score > tau_r {
        CandidateSet::new(feature.clone(), *bbox)
    } else {
        prev
    }
}

/// Highest positive score minus highest negative score, if both sets exist.
pub fn margin(scores: &[f64], pseudo: &LabelMap) -> Option<f64> {
    let best = |label| {
        pseudo.indices_of(label).map(|i| scores[i]).fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s))))
    };
    Some(best(Label::Pos)? - best(Label::Neg)?)
}

/// One anchor's decoded box with its positive-class score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub bbox: BBox,
    pub score: f64,
}

/// Per-frame output line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub eta: Option<f64>,
    pub updated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<Candidate>>,
}

impl FrameRecord {
    pub fn bbox(&self) -> Result<BBox> {
        BBox::new(self.x, self.y, self.w, self.h)
    }
}

/// Mutable per-sequence state.
#[derive(Clone, Debug)]
pub struct TrackerState {
    pub kernels: TemplateKernels,
    pub theta_cls: HeadWeights,
    pub theta_loc: HeadWeights,
    pub candidates: CandidateSet,
    pub tau_r: f64,
    pub tau_m: f64,
    pub mode: TrackMode,
    pub history: Vec<FrameRecord>,
    pub center: (f64, f64),
    pub size: (f64, f64),
    pub frame_size: (u32, u32),
    pub updates: usize,
}

/// Decoded `(cx, cy, w, h)` in crop coordinates.
type CropBox = (f64, f64, f64, f64);

/// A base model, an optional latent network and the tracking settings.
pub struct Tracker<'a> {
    model: &'a RpnModel,
    clnet: Option<&'a ClNet>,
    cfg: TrackerConfig,
    anchors: AnchorGrid,
    window: Vec<f64>,
}

/// Output of one tracked frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput {
    pub bbox: BBox,
    pub score: f64,
    pub updated: bool,
}

fn hanning(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()).collect()
}

impl<'a> Tracker<'a> {
    pub fn new(model: &'a RpnModel, clnet: Option<&'a ClNet>, cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode != TrackMode::Base && clnet.is_none() {
            return config_err("adapted modes need a latent network in the checkpoint");
        }
        let anchors = model.config.anchors()?;
        let (w, h, k) = (anchors.width(), anchors.height(), anchors.anchors_per_cell());
        let (hx, hy) = (hanning(w), hanning(h));
        let mut window = Vec::with_capacity(w * h * k);
        for wy in &hy {
            for wx in &hx {
                for _ in 0..k {
                    window.push(wy * wx);
                }
            }
        }
        Ok(Self { model, clnet, cfg, anchors, window })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn anchors(&self) -> &AnchorGrid {
        &self.anchors
    }

    /// Labels for adapting on `hidden` given a box in crop coordinates.
    fn adaptation_labels(&self, hidden: &HiddenMaps, bbox: &BBox, seed: u64) -> Result<LabelMap> {
        let labels = assign_labels(&self.anchors, bbox, self.cfg.neg_threshold, self.cfg.pos_threshold);
        match self.cfg.init_labels {
            InitLabels::Full => Ok(labels),
            InitLabels::Protocol => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut sel: Selection = select_samples(&labels, &self.cfg.protocol, &mut rng);
                let base = head_forward(&hidden.cls, &self.model.cls.head1)?;
                for i in mine_diverse_samples(&base, &labels, &sel.indices(), self.cfg.protocol.diverse) {
                    sel.items.push((i, Role::Diverse));
                }
                Ok(sel.label_map(labels.len()))
            }
        }
    }

    /// `theta_a` for both branches from one frame's hidden maps and labels.
    fn adapt(&self, hidden: &HiddenMaps, labels: &LabelMap) -> Result<(HeadWeights, HeadWeights)> {
        let net = self.clnet.expect("checked in new");
        let level = &net.levels[0];
        let c = level.cls.adapt(&[&hidden.cls], &[labels], NormMode::Eval)?;
        let l = level.loc.adapt(&[&hidden.loc], &[labels], NormMode::Eval)?;
        Ok((level.cls.adjust_head(&self.model.cls.head1, &c)?, level.loc.adjust_head(&self.model.loc.head1, &l)?))
    }

    /// Positive scores and decoded `(cx, cy, w, h)` boxes, in crop coordinates.
    fn score_boxes(
        &self,
        hidden: &HiddenMaps,
        cls: &HeadWeights,
        loc: &HeadWeights,
    ) -> Result<(Vec<f64>, Vec<CropBox>)> {
        let out = self.model.heads_forward(hidden, cls, loc)?;
        let scores = positive_scores(&out.cls);
        let k = self.anchors.anchors_per_cell();
        let w = self.anchors.width();
        let boxes = self
            .anchors
            .boxes()
            .iter()
            .enumerate()
            .map(|(i, anchor)| {
                let (p, a) = (i / k, i % k);
                let d = std::array::from_fn(|j| out.loc.get(4 * a + j, p / w, p % w));
                decode_offsets(anchor, d)
            })
            .collect();
        Ok((scores, boxes))
    }

    fn dump(&self, scores: &[f64], boxes: &[CropBox], center: (f64, f64)) -> Option<Vec<Candidate>> {
        self.cfg.dump_candidates.then(|| {
            boxes
                .iter()
                .zip(scores)
                .filter_map(|(b, &s)| {
                    BBox::from_center(b.0 + center.0, b.1 + center.1, b.2, b.3)
                        .ok()
                        .map(|bbox| Candidate { bbox, score: s })
                })
                .collect()
        })
    }

    pub fn init(&self, first_frame: &RgbImage, gt: &BBox) -> Result<TrackerState> {
        let (cx, cy) = gt.center();
        let cfg = &self.model.config;
        let z = crop(first_frame, cx, cy, cfg.template_size);
        let kernels = self.model.template_kernels(&z.data)?;
        let (mut theta_cls, mut theta_loc) = (self.model.cls.head1.clone(), self.model.loc.head1.clone());
        let x = crop(first_frame, cx, cy, cfg.search_size);
        let needs_hidden = self.cfg.mode != TrackMode::Base || self.cfg.dump_candidates;
        let hidden = if needs_hidden { Some(self.model.hidden_maps(&kernels, &x.data)?) } else { None };
        if self.cfg.mode != TrackMode::Base {
            let hidden = hidden.as_ref().expect("computed above");
            let rel = gt.translate(-x.center.0, -x.center.1);
            let labels = self.adaptation_labels(hidden, &rel, self.cfg.init_seed)?;
            if labels.pos_count() == 0 {
                return Err(Error::Init("first frame has no positive anchors".into()));
            }
            (theta_cls, theta_loc) = self.adapt(hidden, &labels).map_err(|e| match e {
                Error::EncoderInput(m) => Error::Init(m),
                other => other,
            })?;
        }
        let first = FrameRecord {
            frame: 0,
            x: gt.x(),
            y: gt.y(),
            w: gt.w(),
            h: gt.h(),
            score: 1.0,
            eta: None,
            updated: false,
            candidates: match &hidden {
                Some(h) if self.cfg.dump_candidates => {
                    let (scores, boxes) = self.score_boxes(h, &theta_cls, &theta_loc)?;
                    self.dump(&scores, &boxes, x.center)
                }
                _ => None,
            },
        };
        Ok(TrackerState {
            kernels,
            theta_cls,
            theta_loc,
            candidates: CandidateSet::empty(),
            tau_r: self.cfg.tau_r,
            tau_m: self.cfg.tau_m,
            mode: self.cfg.mode,
            history: vec![first],
            center: (cx, cy),
            size: (gt.w(), gt.h()),
            frame_size: first_frame.dimensions(),
            updates: 0,
        })
    }

    /// Fires an update when `eta < tau_m` and a candidate exists; the
    /// candidate set is emptied afterwards.
    pub fn maybe_update(&self, state: &mut TrackerState, eta: f64, seed: u64) -> Result<bool> {
        if state.mode != TrackMode::ClnetStar || !(eta < state.tau_m) || state.candidates.is_empty() {
            return Ok(false);
        }
        let cand = std::mem::take(&mut state.candidates);
        let (feature, bbox) = (cand.feature.expect("paired"), cand.bbox.expect("paired"));
        let labels = self.adaptation_labels(&feature, &bbox, seed)?;
        if labels.pos_count() == 0 {
            return Ok(false);
        }
        match self.adapt(&feature, &labels) {
            Ok((c, l)) => {
                state.theta_cls = c;
                state.theta_loc = l;
                state.updates += 1;
                Ok(true)
            }
            Err(Error::EncoderInput(_)) => Ok(false),
            Err(e) => Err(e),
        }
    }

    pub fn track_frame(&self, state: &mut TrackerState, frame: &RgbImage) -> Result<FrameOutput> {
        let index = state.history.len();
        let cfg = &self.model.config;
        let x = crop(frame, state.center.0, state.center.1, cfg.search_size);
        let hidden = self.model.hidden_maps(&state.kernels, &x.data)?;
        let (scores, boxes) = self.score_boxes(&hidden, &state.theta_cls, &state.theta_loc)?;
        let (tw, th) = state.size;
        let sz = |w: f64, h: f64| {
            let p = (w + h) / 2.0;
            ((w + p) * (h + p)).sqrt()
        };
        let change = |r: f64| r.max(1.0 / r);
        let target_sz = sz(tw, th);
        let wi = self.cfg.window_influence;

        let mut best = 0;
        let mut best_p = f64::NEG_INFINITY;
        let mut best_pen = 1.0;
        for (i, b) in boxes.iter().enumerate() {
            let s_c = change(sz(b.2, b.3) / target_sz);
            let r_c = change((tw / th) / (b.2 / b.3));
            let penalty = (-(r_c * s_c - 1.0) * self.cfg.penalty_k).exp();
            let pscore = penalty * scores[i] * (1.0 - wi) + self.window[i] * wi;
            if pscore > best_p {
                best_p = pscore;
                best = i;
                best_pen = penalty;
            }
        }

        let (bx, by, bw, bh) = boxes[best];
        let score = scores[best];
        let lr = best_pen * score * self.cfg.size_lr;
        let (fw, fh) = (state.frame_size.0 as f64, state.frame_size.1 as f64);
        let cx = (bx + x.center.0).clamp(0.0, fw);
        let cy = (by + x.center.1).clamp(0.0, fh);
        let nw = (tw * (1.0 - lr) + bw * lr).clamp(4.0, fw);
        let nh = (th * (1.0 - lr) + bh * lr).clamp(4.0, fh);
        state.center = (cx, cy);
        state.size = (nw, nh);
        let bbox = BBox::from_center(cx, cy, nw, nh)?;

        let rel = bbox.translate(-x.center.0, -x.center.1);
        let pseudo = assign_labels(&self.anchors, &rel, self.cfg.neg_threshold, self.cfg.pos_threshold);
        let eta = margin(&scores, &pseudo);
        let mut updated = false;
        if state.mode == TrackMode::ClnetStar {
            let prev = std::mem::take(&mut state.candidates);
            state.candidates = update_candidates(prev, index, &hidden, &rel, score, state.tau_r);
            if let Some(e) = eta {
                updated = self.maybe_update(state, e, self.cfg.init_seed.wrapping_add(index as u64))?;
            }
        }

        let candidates = self.dump(&scores, &boxes, x.center);
        state.history.push(FrameRecord {
            frame: index,
            x: bbox.x(),
            y: bbox.y(),
            w: bbox.w(),
            h: bbox.h(),
            score,
            eta,
            updated,
            candidates,
        });
        Ok(FrameOutput { bbox, score, updated })
    }

    /// Runs a whole sequence from its first ground-truth box.
    pub fn track_sequence(&self, seq: &Sequence) -> Result<Vec<FrameRecord>> {
        let first = seq.frames.first().ok_or_else(|| Error::Input("empty sequence".into()))?;
        let mut state = self.init(&*first.load()?, &seq.gt[0])?;
        for f in &seq.frames[1..] {
            self.track_frame(&mut state, &*f.load()?)?;
        }
        Ok(state.history)
    }
}
