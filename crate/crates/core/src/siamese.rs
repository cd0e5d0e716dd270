//! Toy Siamese trackers.
//!
//! Two models share one convolutional embedding:
//!
//! * [`FcModel`]: a single similarity map `S = phi(x) * phi(z) + b`.
//! * [`RpnModel`]: per-branch 1x1 adjust layers, depth-wise correlation,
//!   a hidden 1x1 layer producing the map `M`, and the last layer `head1`
//!   whose weights ([`HeadWeights`]) are what the latent network adjusts.
//!
//! Every forward op has a matching backward so the base trackers can be
//! trained from scratch on synthetic data.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::geometry::{generate_anchors, AnchorGrid};
use crate::nn::{relu, relu_backward, Conv2d, ConvCache, Linear, Params};
use crate::tensor::FeatureMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Shape of the toy backbone and RPN heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub input_channels: usize,
    /// Convolution stack; the last entry's `channels` is the embedding width `c`.
    pub layers: Vec<ConvSpec>,
    pub template_size: usize,
    pub search_size: usize,
    /// Channels of the hidden map `M` fed to `head1`.
    pub head_hidden: usize,
    pub anchors_per_cell: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    /// Number of RPN head levels. The toy trackers run a single level;
    /// larger values only matter for parameter accounting.
    pub levels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            layers: vec![
                ConvSpec { channels: 8, kernel: 3, stride: 2 },
                ConvSpec { channels: 16, kernel: 3, stride: 1 },
                ConvSpec { channels: 16, kernel: 3, stride: 1 },
            ],
            template_size: 23,
            search_size: 47,
            head_hidden: 32,
            anchors_per_cell: 5,
            anchor_scales: vec![7.0],
            anchor_ratios: crate::geometry::DEFAULT_RATIOS.to_vec(),
            levels: 1,
        }
    }
}

impl BackboneConfig {
    pub fn embed_channels(&self) -> usize {
        self.layers.last().map_or(self.input_channels, |l| l.channels)
    }

    /// Product of the layer strides: pixels per score-map cell.
    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn feature_size(&self, input: usize) -> Option<usize> {
        self.layers.iter().try_fold(input, |n, l| (n >= l.kernel).then(|| (n - l.kernel) / l.stride + 1))
    }

    /// Side of the correlation (score) map.
    pub fn map_size(&self) -> Option<usize> {
        let x = self.feature_size(self.search_size)?;
        let z = self.feature_size(self.template_size)?;
        (x >= z).then(|| x - z + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.head_hidden == 0 || self.anchors_per_cell == 0 || self.levels == 0 {
            return config_err("backbone counts must be positive");
        }
        if self.layers.iter().any(|l| l.channels == 0 || l.kernel == 0 || l.stride == 0) {
            return config_err("backbone layers must have positive channels, kernel and stride");
        }
        if self.anchor_scales.len() * self.anchor_ratios.len() != self.anchors_per_cell {
            return config_err(format!(
                "anchor scales ({}) x ratios ({}) must equal anchors_per_cell ({})",
                self.anchor_scales.len(),
                self.anchor_ratios.len(),
                self.anchors_per_cell
            ));
        }
        match self.map_size() {
            Some(n) if n > 0 => Ok(()),
            _ => config_err(format!(
                "template {} / search {} do not produce a valid score map",
                self.template_size, self.search_size
            )),
        }
    }

    /// Anchors in search-crop coordinates relative to the crop center.
    pub fn anchors(&self) -> Result<AnchorGrid> {
        let n = self.map_size().ok_or_else(|| crate::Error::Config("no score map".into()))?;
        generate_anchors(
            n,
            n,
            self.anchors_per_cell,
            self.total_stride() as f64,
            &self.anchor_scales,
            &self.anchor_ratios,
        )
    }
}

/// Stack of valid convolutions with ReLU between layers (none after the last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub layers: Vec<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct BackboneCache {
    steps: Vec<(ConvCache, Array3<f64>)>,
}

impl Backbone {
    pub fn init<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let mut inputs = cfg.input_channels;
        let layers = cfg
            .layers
            .iter()
            .map(|spec| {
                let conv = Conv2d::init(inputs, spec.channels, spec.kernel, spec.stride, rng);
                inputs = spec.channels;
                conv
            })
            .collect();
        Self { layers }
    }

    pub fn input_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_channels())
    }

    /// `phi(patch)`.
    pub fn embed(&self, patch: &Array3<f64>) -> Result<FeatureMap> {
        self.check_input(patch)?;
        Ok(FeatureMap::from_raw(self.forward_cached(patch).0))
    }

    fn check_input(&self, patch: &Array3<f64>) -> Result<()> {
        let (c, h, w) = patch.dim();
        if c != self.input_channels() {
            return input_err(format!("patch has {c} channels, backbone expects {}", self.input_channels()));
        }
        let mut side = (h, w);
        for l in &self.layers {
            match (l.output_size(side.0), l.output_size(side.1)) {
                (Some(a), Some(b)) => side = (a, b),
                _ => return input_err(format!("patch {h}x{w} is smaller than the receptive field")),
            }
        }
        if patch.iter().any(|v| !v.is_finite()) {
            return input_err("patch contains non-finite values");
        }
        Ok(())
    }

    pub fn forward_cached(&self, patch: &Array3<f64>) -> (Array3<f64>, BackboneCache) {
        let last = self.layers.len().saturating_sub(1);
        let mut x = patch.clone();
        let mut steps = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = layer.forward_cached(&x);
            let y = if i < last { relu(&y) } else { y };
            steps.push((cache, y.clone()));
            x = y;
        }
        (x, BackboneCache { steps })
    }

    pub fn backward(&self, cache: &BackboneCache, dout: Array3<f64>, grad: &mut Backbone) {
        let last = self.layers.len().saturating_sub(1);
        let mut d = dout;
        for i in (0..self.layers.len()).rev() {
            let (conv_cache, out) = &cache.steps[i];
            if i < last {
                d = relu_backward(out, &d);
            }
            match self.layers[i].backward(conv_cache, &d, &mut grad.layers[i], i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }
}

impl Params for Backbone {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

/// Depth-wise valid cross-correlation: `out[c] = x[c] * z[c]`.
pub fn dw_xcorr(x: &Array3<f64>, z: &Array3<f64>) -> Array3<f64> {
    let (c, hx, wx) = x.dim();
    let (cz, hz, wz) = z.dim();
    assert_eq!(c, cz, "depth-wise correlation needs equal channels");
    let (ho, wo) = (hx - hz + 1, wx - wz + 1);
    let xs = x.as_standard_layout();
    let zs = z.as_standard_layout();
    let xv = xs.as_slice().expect("standard");
    let zv = zs.as_slice().expect("standard");
    let mut out = Array3::zeros((c, ho, wo));
    let ov = out.as_slice_mut().expect("standard");
    for ch in 0..c {
        let xo = ch * hx * wx;
        let zo = ch * hz * wz;
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0.0;
                for u in 0..hz {
                    let xr = xo + (i + u) * wx + j;
                    let zr = zo + u * wz;
                    for v in 0..wz {
                        acc += xv[xr + v] * zv[zr + v];
                    }
                }
                ov[ch * ho * wo + i * wo + j] = acc;
            }
        }
    }
    out
}

/// Gradients of [`dw_xcorr`] with respect to `x` and `z`.
pub fn dw_xcorr_backward(x: &Array3<f64>, z: &Array3<f64>, dout: &Array3<f64>) -> (Array3<f64>, Array3<f64>) {
    let (c, hx, wx) = x.dim();
    let (_, hz, wz) = z.dim();
    let (_, ho, wo) = dout.dim();
    let mut dx = Array3::zeros((c, hx, wx));
    let mut dz = Array3::zeros((c, hz, wz));
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let g = dout[[ch, i, j]];
                if g == 0.0 {
                    continue;
                }
                for u in 0..hz {
                    for v in 0..wz {
                        dx[[ch, i + u, j + v]] += g * z[[ch, u, v]];
                        dz[[ch, u, v]] += g * x[[ch, i + u, j + v]];
                    }
                }
            }
        }
    }
    (dx, dz)
}

/// `S = inst * tmpl + b`, a single-channel valid correlation summed over channels.
pub fn similarity_map(inst: &FeatureMap, tmpl: &FeatureMap, b: f64) -> Result<FeatureMap> {
    if inst.channels() != tmpl.channels() {
        return input_err(format!("instance has {} channels, template has {}", inst.channels(), tmpl.channels()));
    }
    if tmpl.height() > inst.height() || tmpl.width() > inst.width() {
        return input_err("template larger than instance");
    }
    let corr = dw_xcorr(inst.data(), tmpl.data());
    let mut s = corr.sum_axis(ndarray::Axis(0));
    s += b;
    let (h, w) = s.dim();
    Ok(FeatureMap::from_raw(s.into_shape_with_order((1, h, w)).expect("shape")))
}

/// Weights of the last head layer `head1`: a per-position affine map plus
/// a scalar offset added to every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    /// `(out_dim, in_dim)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub offset: f64,
}

impl HeadWeights {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { weight: Array2::zeros((out_dim, in_dim)), bias: Array1::zeros(out_dim), offset: 0.0 }
    }

    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, std: f64, rng: &mut R) -> Self {
        let lin = Linear::init_with_std(in_dim, out_dim, std, rng);
        Self { weight: lin.weight, bias: lin.bias, offset: 0.0 }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Length of the flattened `out x (in + 1)` matrix plus the offset.
    pub fn flat_len(&self) -> usize {
        self.out_dim() * (self.in_dim() + 1) + 1
    }

    fn forward_rows(&self, rows: &Array2<f64>) -> Array2<f64> {
        let mut out = rows.dot(&self.weight.t());
        out += &self.bias;
        if self.offset != 0.0 {
            out += self.offset;
        }
        out
    }

    /// Backward of [`head_forward`] given the input rows; returns `dL/dM` rows.
    pub fn backward_rows(&self, rows: &Array2<f64>, dout: &Array2<f64>, grad: &mut HeadWeights) -> Array2<f64> {
        grad.weight += &dout.t().dot(rows);
        grad.bias += &dout.sum_axis(ndarray::Axis(0));
        grad.offset += dout.sum();
        dout.dot(&self.weight)
    }
}

impl Params for HeadWeights {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.weight.as_slice().expect("standard"));
        f(self.bias.as_slice().expect("standard"));
        f(std::slice::from_ref(&self.offset));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.weight.as_slice_mut().expect("standard"));
        f(self.bias.as_slice_mut().expect("standard"));
        f(std::slice::from_mut(&mut self.offset));
    }
}

/// `A = head1(M; theta)`, applied independently at every position.
pub fn head_forward(m: &FeatureMap, theta: &HeadWeights) -> Result<FeatureMap> {
    if m.channels() != theta.in_dim() {
        return input_err(format!("hidden map has {} channels, head expects {}", m.channels(), theta.in_dim()));
    }
    let out = theta.forward_rows(&m.to_rows());
    Ok(FeatureMap::from_rows(out.view(), m.height(), m.width()))
}

/// One RPN branch: adjust layers, hidden layer `head0` and last layer `head1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchHead {
    pub adjust_kernel: Conv2d,
    pub adjust_search: Conv2d,
    pub head0: Conv2d,
    pub head1: HeadWeights,
}

impl BranchHead {
    fn init<R: Rng + ?Sized>(embed: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            adjust_kernel: Conv2d::init(embed, embed, 1, 1, rng),
            adjust_search: Conv2d::init(embed, embed, 1, 1, rng),
            head0: Conv2d::init(embed, hidden, 1, 1, rng),
            head1: HeadWeights::init(hidden, outputs, 0.01, rng),
        }
    }

    /// `alpha_ker(phi(z))`, computed once per template.
    pub fn kernel(&self, fz: &FeatureMap) -> Array3<f64> {
        relu(&self.adjust_kernel.forward(fz.data()))
    }

    /// Hidden map `M = head0(alpha_fea(phi(x)) * alpha_ker(phi(z)))`.
    pub fn hidden(&self, fx: &FeatureMap, kernel: &Array3<f64>) -> FeatureMap {
        let sx = relu(&self.adjust_search.forward(fx.data()));
        let corr = dw_xcorr(&sx, kernel);
        FeatureMap::from_raw(relu(&self.head0.forward(&corr)))
    }
}

impl Params for BranchHead {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.adjust_kernel.visit(f);
        self.adjust_search.visit(f);
        self.head0.visit(f);
        self.head1.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.adjust_kernel.visit_mut(f);
        self.adjust_search.visit_mut(f);
        self.head0.visit_mut(f);
        self.head1.visit_mut(f);
    }
}

/// Adjusted template kernels for both branches.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateKernels {
    pub cls: Array3<f64>,
    pub loc: Array3<f64>,
}

/// Penultimate maps `M(x, z)` of both branches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenMaps {
    pub cls: FeatureMap,
    pub loc: FeatureMap,
}

/// Returns the hidden maps for both branches from embedded search features
/// and adjusted template kernels.
pub fn dw_xcorr_heads(
    fx: &FeatureMap,
    kernels: &TemplateKernels,
    heads: (&BranchHead, &BranchHead),
) -> Result<HiddenMaps> {
    let c = heads.0.adjust_search.in_channels();
    if fx.channels() != c || kernels.cls.dim().0 != c || kernels.loc.dim().0 != c {
        return input_err(format!("features must have {c} channels"));
    }
    if kernels.cls.dim().1 > fx.height() || kernels.cls.dim().2 > fx.width() {
        return input_err("template kernel larger than search features");
    }
    Ok(HiddenMaps { cls: heads.0.hidden(fx, &kernels.cls), loc: heads.1.hidden(fx, &kernels.loc) })
}

/// Classification map `(2k, h, w)` and regression map `(4k, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnOutput {
    pub cls: FeatureMap,
    pub loc: FeatureMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpnModel {
    pub config: BackboneConfig,
    pub backbone: Backbone,
    pub cls: BranchHead,
    pub loc: BranchHead,
}

/// Everything a backward pass through the whole RPN model needs.
pub struct RpnCache {
    z: BackboneCache,
    x: BackboneCache,
    fz: Array3<f64>,
    fx: Array3<f64>,
    branches: [BranchCache; 2],
}

struct BranchCache {
    kz_cache: ConvCache,
    kz: Array3<f64>,
    sx_cache: ConvCache,
    sx: Array3<f64>,
    h0_cache: ConvCache,
    hidden: Array3<f64>,
    rows: Array2<f64>,
}

impl RpnModel {
    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.embed_channels();
        let k = config.anchors_per_cell;
        let backbone = Backbone::init(&config, rng);
        let cls = BranchHead::init(c, config.head_hidden, 2 * k, rng);
        let loc = BranchHead::init(c, config.head_hidden, 4 * k, rng);
        Ok(Self { config, backbone, cls, loc })
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.config.anchors_per_cell
    }

    pub fn template_kernels(&self, z_patch: &Array3<f64>) -> Result<TemplateKernels> {
        let fz = self.backbone.embed(z_patch)?;
        Ok(TemplateKernels { cls: self.cls.kernel(&fz), loc: self.loc.kernel(&fz) })
    }

    pub fn hidden_maps(&self, kernels: &TemplateKernels, x_patch: &Array3<f64>) -> Result<HiddenMaps> {
        let fx = self.backbone.embed(x_patch)?;
        dw_xcorr_heads(&fx, kernels, (&self.cls, &self.loc))
    }

    pub fn heads_forward(&self, hidden: &HiddenMaps, cls: &HeadWeights, loc: &HeadWeights) -> Result<RpnOutput> {
        Ok(RpnOutput { cls: head_forward(&hidden.cls, cls)?, loc: head_forward(&hidden.loc, loc)? })
    }

    /// Full forward with the model's own `head1` weights, keeping caches.
    pub fn forward_train(&self, z_patch: &Array3<f64>, x_patch: &Array3<f64>) -> (RpnOutput, RpnCache) {
        let (fz, zc) = self.backbone.forward_cached(z_patch);
        let (fx, xc) = self.backbone.forward_cached(x_patch);
        let run = |b: &BranchHead| {
            let (kz, kz_cache) = b.adjust_kernel.forward_cached(&fz);
            let kz = relu(&kz);
            let (sx, sx_cache) = b.adjust_search.forward_cached(&fx);
            let sx = relu(&sx);
            let corr = dw_xcorr(&sx, &kz);
            let (h, h0_cache) = b.head0.forward_cached(&corr);
            let hidden = relu(&h);
            let fm = FeatureMap::from_raw(hidden.clone());
            let rows = fm.to_rows();
            let out = b.head1.forward_rows(&rows);
            let out = FeatureMap::from_rows(out.view(), fm.height(), fm.width());
            (out, BranchCache { kz_cache, kz, sx_cache, sx, h0_cache, hidden, rows })
        };
        let (cls, cc) = run(&self.cls);
        let (loc, lc) = run(&self.loc);
        (RpnOutput { cls, loc }, RpnCache { z: zc, x: xc, fz, fx, branches: [cc, lc] })
    }

    /// Gradients of every parameter given `dL/dA` for both branches.
    pub fn backward(&self, cache: &RpnCache, d_cls: &FeatureMap, d_loc: &FeatureMap) -> RpnModel {
        let mut grad = self.zeros_like();
        let mut dfz = Array3::zeros(cache.fz.dim());
        let mut dfx = Array3::zeros(cache.fx.dim());
        for (bi, dout) in [d_cls, d_loc].into_iter().enumerate() {
            let (branch, gbranch) = if bi == 0 { (&self.cls, &mut grad.cls) } else { (&self.loc, &mut grad.loc) };
            let bc = &cache.branches[bi];
            let drows = dout.to_rows();
            let dh_rows = branch.head1.backward_rows(&bc.rows, &drows, &mut gbranch.head1);
            let (_, h, w) = bc.hidden.dim();
            let dh = FeatureMap::from_rows(dh_rows.view(), h, w).into_data();
            let dh = relu_backward(&bc.hidden, &dh);
            let dcorr = branch.head0.backward(&bc.h0_cache, &dh, &mut gbranch.head0, true).expect("input grad");
            let (dsx, dkz) = dw_xcorr_backward(&bc.sx, &bc.kz, &dcorr);
            let dsx = relu_backward(&bc.sx, &dsx);
            let dkz = relu_backward(&bc.kz, &dkz);
            dfx += &branch
                .adjust_search
                .backward(&bc.sx_cache, &dsx, &mut gbranch.adjust_search, true)
                .expect("input grad");
            dfz += &branch
                .adjust_kernel
                .backward(&bc.kz_cache, &dkz, &mut gbranch.adjust_kernel, true)
                .expect("input grad");
        }
        self.backbone.backward(&cache.z, dfz, &mut grad.backbone);
        self.backbone.backward(&cache.x, dfx, &mut grad.backbone);
        grad
    }
}

impl Params for RpnModel {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.backbone.visit(f);
        self.cls.visit(f);
        self.loc.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.backbone.visit_mut(f);
        self.cls.visit_mut(f);
        self.loc.visit_mut(f);
    }
}

/// Similarity-map tracker: `S = phi(x) * phi(z) + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcModel {
    pub config: BackboneConfig,
    pub backbone: Backbone,
    pub bias: f64,
}

pub struct FcCache {
    z: BackboneCache,
    x: BackboneCache,
    fz: Array3<f64>,
    fx: Array3<f64>,
}

impl FcModel {
    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut backbone = Backbone::init(&config, rng);
        // Keep the initial correlation magnitude near unit scale.
        if let Some(last) = backbone.layers.last_mut() {
            let z = config.feature_size(config.template_size).unwrap_or(1);
            let scale = 1.0 / ((config.embed_channels() * z * z) as f64).sqrt();
            last.weight.mapv_inplace(|w| w * scale.sqrt());
        }
        Ok(Self { config, backbone, bias: 0.0 })
    }

    pub fn template(&self, z_patch: &Array3<f64>) -> Result<FeatureMap> {
        self.backbone.embed(z_patch)
    }

    pub fn instance(&self, x_patch: &Array3<f64>) -> Result<FeatureMap> {
        self.backbone.embed(x_patch)
    }

    pub fn forward_train(&self, z_patch: &Array3<f64>, x_patch: &Array3<f64>) -> (FeatureMap, FcCache) {
        let (fz, z) = self.backbone.forward_cached(z_patch);
        let (fx, x) = self.backbone.forward_cached(x_patch);
        let s = similarity_map(&FeatureMap::from_raw(fx.clone()), &FeatureMap::from_raw(fz.clone()), self.bias)
            .expect("shapes come from one backbone");
        (s, FcCache { z, x, fz, fx })
    }

    pub fn backward(&self, cache: &FcCache, ds: &FeatureMap) -> FcModel {
        let mut grad = self.zeros_like();
        let c = cache.fx.dim().0;
        let d1 = ds.data().index_axis(ndarray::Axis(0), 0).to_owned();
        grad.bias += d1.sum();
        let dout = Array3::from_shape_fn((c, d1.nrows(), d1.ncols()), |(_, i, j)| d1[[i, j]]);
        let (dfx, dfz) = dw_xcorr_backward(&cache.fx, &cache.fz, &dout);
        self.backbone.backward(&cache.z, dfz, &mut grad.backbone);
        self.backbone.backward(&cache.x, dfx, &mut grad.backbone);
        grad
    }
}

impl Params for FcModel {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.backbone.visit(f);
        f(std::slice::from_ref(&self.bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.backbone.visit_mut(f);
        f(std::slice::from_mut(&mut self.bias));
    }
}
