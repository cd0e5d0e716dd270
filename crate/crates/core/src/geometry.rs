//! Boxes, anchor grids, overlap and label assignment.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};

/// Axis-aligned box stored as `(left, top, width, height)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return input_err(format!("non-finite box ({x}, {y}, {w}, {h})"));
        }
        if w <= 0.0 || h <= 0.0 {
            return input_err(format!("box must have positive size, got {w}x{h}"));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Same box shifted by `(dx, dy)`.
    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self { x: self.x + dx, y: self.y + dy, ..*self }
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }

    /// Parses one ground-truth line. Commas are always accepted; with
    /// `allow_whitespace` tabs and spaces also separate fields.
    pub fn parse_line(line: &str, allow_whitespace: bool) -> Result<Self> {
        let fields: Vec<&str> = if allow_whitespace {
            line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect()
        } else {
            line.trim().split(',').map(str::trim).collect()
        };
        if fields.len() != 4 {
            return input_err(format!("expected 4 fields, found {}", fields.len()));
        }
        let mut v = [0.0; 4];
        for (slot, field) in v.iter_mut().zip(&fields) {
            *slot = field.parse::<f64>().map_err(|e| crate::Error::Input(format!("bad number {field:?}: {e}")))?;
        }
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x, self.y, self.w, self.h)
    }
}

impl FromStr for BBox {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse_line(s, false)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = crate::Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Intersection-over-union on continuous coordinates.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Per-anchor training label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Pos,
    Neg,
    Ignore,
}

/// Labels for every anchor of a grid, indexed like [`AnchorGrid::boxes`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    labels: Vec<Label>,
    pos_count: usize,
    neg_count: usize,
}

impl LabelMap {
    pub fn from_labels(labels: Vec<Label>) -> Self {
        let pos_count = labels.iter().filter(|&&l| l == Label::Pos).count();
        let neg_count = labels.iter().filter(|&&l| l == Label::Neg).count();
        Self { labels, pos_count, neg_count }
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pos_count(&self) -> usize {
        self.pos_count
    }

    pub fn neg_count(&self) -> usize {
        self.neg_count
    }

    pub fn get(&self, idx: usize) -> Label {
        self.labels[idx]
    }

    pub fn indices_of(&self, label: Label) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(move |(_, &l)| l == label).map(|(i, _)| i)
    }

    /// Keeps labels only at `keep` indices; everything else becomes `Ignore`.
    pub fn restrict_to(&self, keep: &[usize]) -> Self {
        let mut labels = vec![Label::Ignore; self.labels.len()];
        for &i in keep {
            labels[i] = self.labels[i];
        }
        Self::from_labels(labels)
    }
}

/// Dense grid of `width * height * anchors_per_cell` boxes.
///
/// Anchor `(cx, cy, a)` lives at index `(cy * width + cx) * k + a`, so the
/// feature-map position of an anchor is `index / k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    width: usize,
    height: usize,
    anchors_per_cell: usize,
    stride: f64,
    boxes: Vec<BBox>,
}

impl AnchorGrid {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchors_per_cell
    }

    pub fn stride(&self) -> f64 {
        self.stride
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn position_of(&self, anchor: usize) -> usize {
        anchor / self.anchors_per_cell
    }

    /// Offset of cell `(cx, cy)` from the grid center, in pixels.
    pub fn cell_center(&self, cx: usize, cy: usize) -> (f64, f64) {
        (
            (cx as f64 - (self.width as f64 - 1.0) / 2.0) * self.stride,
            (cy as f64 - (self.height as f64 - 1.0) / 2.0) * self.stride,
        )
    }

    /// Same grid with every box moved by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self { boxes: self.boxes.iter().map(|b| b.translate(dx, dy)).collect(), ..self.clone() }
    }

    /// One box of fixed size per cell; used by the similarity-map tracker
    /// whose response has no anchor shapes of its own.
    pub fn uniform(width: usize, height: usize, stride: f64, w: f64, h: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return config_err("anchor grid must have at least one cell");
        }
        let mut grid = Self { width, height, anchors_per_cell: 1, stride, boxes: Vec::with_capacity(width * height) };
        for cy in 0..height {
            for cx in 0..width {
                let (ox, oy) = grid.cell_center(cx, cy);
                grid.boxes.push(BBox::from_center(ox, oy, w, h)?);
            }
        }
        Ok(grid)
    }
}

/// Builds the anchor grid centered on the search region.
///
/// Each anchor has base side `stride * scale`; ratio `r` is height over
/// width, so the box is `base / sqrt(r)` wide and `base * sqrt(r)` tall.
pub fn generate_anchors(
    width: usize,
    height: usize,
    k: usize,
    stride: f64,
    scales: &[f64],
    ratios: &[f64],
) -> Result<AnchorGrid> {
    if scales.len() * ratios.len() != k {
        return config_err(format!(
            "{} scales x {} ratios does not equal anchors_per_cell {k}",
            scales.len(),
            ratios.len()
        ));
    }
    if width == 0 || height == 0 || k == 0 {
        return config_err("anchor grid dimensions must be positive");
    }
    if !(stride.is_finite() && stride > 0.0) {
        return config_err(format!("stride must be positive, got {stride}"));
    }
    let mut shapes = Vec::with_capacity(k);
    for &r in ratios {
        for &s in scales {
            if !(r > 0.0 && s > 0.0) {
                return config_err("scales and ratios must be positive");
            }
            let base = stride * s;
            shapes.push((base / r.sqrt(), base * r.sqrt()));
        }
    }
    let mut grid =
        AnchorGrid { width, height, anchors_per_cell: k, stride, boxes: Vec::with_capacity(width * height * k) };
    for cy in 0..height {
        for cx in 0..width {
            let (ox, oy) = grid.cell_center(cx, cy);
            for &(w, h) in &shapes {
                grid.boxes.push(BBox::from_center(ox, oy, w, h)?);
            }
        }
    }
    Ok(grid)
}

/// Ratios used when `k = 5` and nothing else is configured.
pub const DEFAULT_RATIOS: [f64; 5] = [0.33, 0.5, 1.0, 2.0, 3.0];

pub const DEFAULT_NEG_THRESHOLD: f64 = 0.3;
pub const DEFAULT_POS_THRESHOLD: f64 = 0.6;

/// POS when IoU exceeds `pos_thr`, NEG when below `neg_thr`, IGNORE between.
pub fn assign_labels(anchors: &AnchorGrid, gt: &BBox, neg_thr: f64, pos_thr: f64) -> LabelMap {
    debug_assert!((0.0..=1.0).contains(&neg_thr) && neg_thr < pos_thr && pos_thr <= 1.0);
    let labels = anchors
        .boxes
        .iter()
        .map(|a| {
            let o = iou(a, gt);
            if o > pos_thr {
                Label::Pos
            } else if o < neg_thr {
                Label::Neg
            } else {
                Label::Ignore
            }
        })
        .collect();
    LabelMap::from_labels(labels)
}

/// Regression target `(dx, dy, dw, dh)` of `gt` relative to `anchor`.
pub fn encode_offsets(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    [(gx - ax) / anchor.w(), (gy - ay) / anchor.h(), (gt.w() / anchor.w()).ln(), (gt.h() / anchor.h()).ln()]
}

/// Inverse of [`encode_offsets`], returned as `(cx, cy, w, h)`.
pub fn decode_offsets(anchor: &BBox, d: [f64; 4]) -> (f64, f64, f64, f64) {
    let (ax, ay) = anchor.center();
    (
        ax + d[0] * anchor.w(),
        ay + d[1] * anchor.h(),
        anchor.w() * d[2].clamp(-10.0, 10.0).exp(),
        anchor.h() * d[3].clamp(-10.0, 10.0).exp(),
    )
}
