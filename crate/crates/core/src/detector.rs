//! Single-stage anchor-grid detector.
//!
//! The encoder is a stack of stride-2 3×3 convolutions. The head is a pair
//! of 1×1 convolutions producing, per grid cell, one objectness logit, one
//! logit per class and four box offsets. Each cell carries one square anchor
//! whose side equals the cell size.
//!
//! Box offsets follow the usual encoding relative to the anchor centre
//! `(ax, ay)` and side `s`:
//!
//! ```text
//! tx = (cx - ax) / s    ty = (cy - ay) / s
//! tw = ln(w / s)        th = ln(h / s)
//! ```
//!
//! The loss has three terms: dense objectness cross-entropy over every cell,
//! class cross-entropy over positive cells and smooth-L1 box regression over
//! positive cells (summed over the four coordinates).

use bridge_autodiff::{Graph, ParamSet, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::metrics::iou;
use crate::nn::{self, ConvSpec};
use crate::seed;
use crate::synth::{BBox, Image, Scene, CHANNELS, NUM_CLASSES};
use crate::CoreError;

pub const BOX_PARAMS: usize = 4;
/// Objectness + class logits + box offsets.
pub const HEAD_OUTPUTS: usize = 1 + NUM_CLASSES + BOX_PARAMS;
/// Prior probability used to initialise the objectness bias.
const OBJECTNESS_PRIOR: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorArch {
    pub image_size: usize,
    /// Channel counts from the input through every encoder layer.
    pub encoder_channels: Vec<usize>,
    pub head_hidden: usize,
    pub leaky_alpha: f64,
}

impl Default for DetectorArch {
    fn default() -> Self {
        Self {
            image_size: 64,
            encoder_channels: vec![CHANNELS, 16, 32, 64, 64],
            head_hidden: 32,
            leaky_alpha: 0.2,
        }
    }
}

impl DetectorArch {
    pub fn validate(&self) -> Result<(), CoreError> {
        let n = self.encoder_channels.len();
        if n < 2 || self.encoder_channels[0] != CHANNELS {
            return Err(CoreError::InvalidConfig(
                "encoder_channels must start at 3 and list at least one layer".into(),
            ));
        }
        if self.encoder_channels.iter().any(|&c| c == 0) || self.head_hidden == 0 {
            return Err(CoreError::InvalidConfig("channel counts must be positive".into()));
        }
        let down = 1usize << (n - 1);
        if self.image_size % down != 0 || self.image_size < down {
            return Err(CoreError::InvalidConfig(format!(
                "image size {} is not divisible by encoder stride {down}",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn encoder_layers(&self) -> usize {
        self.encoder_channels.len() - 1
    }

    /// Cells per side of the feature map.
    pub fn grid(&self) -> usize {
        self.image_size >> self.encoder_layers()
    }

    /// Cell side in pixels; also the anchor side.
    pub fn cell(&self) -> f64 {
        (self.image_size / self.grid()) as f64
    }

    pub fn feature_channels(&self) -> usize {
        *self.encoder_channels.last().unwrap()
    }

    pub(crate) fn encoder_specs(&self) -> Vec<ConvSpec> {
        self.encoder_channels
            .windows(2)
            .map(|w| ConvSpec {
                c_in: w[0],
                c_out: w[1],
                k: 3,
                stride: 2,
                pad: 1,
            })
            .collect()
    }

    pub(crate) fn head_specs(&self) -> Vec<ConvSpec> {
        let one = |c_in, c_out| ConvSpec {
            c_in,
            c_out,
            k: 1,
            stride: 1,
            pad: 0,
        };
        vec![one(self.feature_channels(), self.head_hidden), one(self.head_hidden, HEAD_OUTPUTS)]
    }
}

/// Encoder + head parameters. Tensors are stored encoder first, then head,
/// as `w, b` pairs per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub arch: DetectorArch,
    pub params: ParamSet,
}

impl DetectorModel {
    pub fn new(arch: DetectorArch, init_seed: u64) -> Result<Self, CoreError> {
        arch.validate()?;
        let mut rng = seed::rng(init_seed, seed::TAG_DETECTOR_INIT);
        let mut params = ParamSet::new();
        let a = arch.leaky_alpha;
        for (i, s) in arch.encoder_specs().into_iter().enumerate() {
            nn::push_conv(&mut params, &format!("enc.{i}"), s, nn::he_std(s.c_in * 9, a), 0.0, &mut rng);
        }
        let head = arch.head_specs();
        nn::push_conv(&mut params, "head.0", head[0], nn::he_std(head[0].c_in, a), 0.0, &mut rng);
        nn::push_conv(&mut params, "head.1", head[1], 0.01, 0.0, &mut rng);
        // objectness bias starts at the prior log-odds
        let b = params.index_of("head.1.b").unwrap();
        params.tensors_mut()[b].data_mut()[0] = (OBJECTNESS_PRIOR / (1.0 - OBJECTNESS_PRIOR)).ln();
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: DetectorArch, params: ParamSet) -> Result<Self, CoreError> {
        arch.validate()?;
        let mut specs = arch.encoder_specs();
        specs.extend(arch.head_specs());
        nn::check_conv_params(params.tensors(), &specs, "detector")?;
        Ok(Self { arch, params })
    }

    /// Number of parameter tensors belonging to the encoder.
    pub fn encoder_tensors(&self) -> usize {
        2 * self.arch.encoder_layers()
    }

    pub fn attach(&self, g: &mut Graph) -> DetectorVars {
        let all = self.params.attach(g);
        let split = self.encoder_tensors();
        DetectorVars {
            encoder: all[..split].to_vec(),
            head: all[split..].to_vec(),
        }
    }
}

/// Graph leaves for a [`DetectorModel`], in parameter order.
#[derive(Debug, Clone)]
pub struct DetectorVars {
    pub encoder: Vec<Var>,
    pub head: Vec<Var>,
}

impl DetectorVars {
    pub fn all(&self) -> Vec<Var> {
        self.encoder.iter().chain(&self.head).copied().collect()
    }
}

/// `E(I)`: `[C, G, G]` feature map for a `[3, H, W]` image leaf.
pub fn encoder_graph(g: &mut Graph, arch: &DetectorArch, vars: &DetectorVars, image: Var) -> Result<Var, CoreError> {
    nn::conv_stack(g, image, &vars.encoder, &arch.encoder_specs(), arch.leaky_alpha, true)
}

/// Raw head output `[HEAD_OUTPUTS, G, G]`.
pub fn head_graph(g: &mut Graph, arch: &DetectorArch, vars: &DetectorVars, features: Var) -> Result<Var, CoreError> {
    nn::conv_stack(g, features, &vars.head, &arch.head_specs(), arch.leaky_alpha, false)
}

fn check_image(arch: &DetectorArch, image: &Image) -> Result<(), CoreError> {
    if image.height != arch.image_size || image.width != arch.image_size || image.data.len() != CHANNELS * image.height * image.width {
        return Err(CoreError::Precondition(format!(
            "expected a {0}x{0}x3 image, got {1}x{2} with {3} values",
            arch.image_size,
            image.height,
            image.width,
            image.data.len()
        )));
    }
    Ok(())
}

/// Forward-only inference graph over a reusable image leaf.
pub struct InferenceGraph {
    graph: Graph,
    image: Var,
    features: Var,
    head: Var,
    size: usize,
}

impl InferenceGraph {
    pub fn new(model: &DetectorModel) -> Result<Self, CoreError> {
        let mut graph = Graph::new();
        let vars = model.attach(&mut graph);
        let s = model.arch.image_size;
        let image = graph.input(Tensor::zeros(&[CHANNELS, s, s]));
        let features = encoder_graph(&mut graph, &model.arch, &vars, image)?;
        let head = head_graph(&mut graph, &model.arch, &vars, features)?;
        Ok(Self {
            graph,
            image,
            features,
            head,
            size: s,
        })
    }

    fn load(&mut self, image: &Image) -> Result<(), CoreError> {
        if image.height != self.size || image.width != self.size {
            return Err(CoreError::Precondition(format!(
                "expected a {0}x{0} image, got {1}x{2}",
                self.size, image.height, image.width
            )));
        }
        self.graph.leaf_data_mut(self.image)?.copy_from_slice(&image.data);
        Ok(())
    }

    pub fn features(&mut self, image: &Image) -> Result<Tensor, CoreError> {
        self.load(image)?;
        Ok(self.graph.eval_forward(self.features)?)
    }

    pub fn head(&mut self, image: &Image) -> Result<Tensor, CoreError> {
        self.load(image)?;
        Ok(self.graph.eval_forward(self.head)?)
    }
}

/// `E(I)` for one image.
pub fn encode(model: &DetectorModel, image: &Image) -> Result<Tensor, CoreError> {
    check_image(&model.arch, image)?;
    InferenceGraph::new(model)?.features(image)
}

/// Anchor assignment for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorMatch {
    pub grid: usize,
    /// Per cell (row-major): whether it holds a positive anchor.
    pub positive: Vec<bool>,
    /// Per cell: the ground-truth index providing its targets.
    pub matched: Vec<Option<usize>>,
    /// Per cell: `(tx, ty, tw, th)` regression target (zero for negatives).
    pub offsets: Vec<[f64; 4]>,
    /// Per ground-truth box: the cell its centre falls in.
    pub gt_cells: Vec<usize>,
}

impl AnchorMatch {
    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|p| **p).count()
    }
}

/// Anchor box of cell `(row, col)`.
pub fn anchor_box(row: usize, col: usize, cell: f64) -> (f64, f64, f64) {
    ((col as f64 + 0.5) * cell, (row as f64 + 0.5) * cell, cell)
}

pub fn encode_offsets(b: &BBox, row: usize, col: usize, cell: f64) -> [f64; 4] {
    let (ax, ay, s) = anchor_box(row, col, cell);
    let (cx, cy) = b.center();
    [(cx - ax) / s, (cy - ay) / s, (b.width() / s).ln(), (b.height() / s).ln()]
}

pub fn decode_offsets(t: &[f64; 4], row: usize, col: usize, cell: f64, class: usize) -> BBox {
    let (ax, ay, s) = anchor_box(row, col, cell);
    let (cx, cy) = (ax + t[0] * s, ay + t[1] * s);
    let (w, h) = (s * t[2].exp(), s * t[3].exp());
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h, class)
}

/// The cell containing each box centre is positive. When several centres
/// share a cell, the lowest-index box provides that cell's targets.
pub fn match_anchors(boxes: &[BBox], grid: usize, cell: f64) -> AnchorMatch {
    let n = grid * grid;
    let mut m = AnchorMatch {
        grid,
        positive: vec![false; n],
        matched: vec![None; n],
        offsets: vec![[0.0; 4]; n],
        gt_cells: Vec::with_capacity(boxes.len()),
    };
    for (i, b) in boxes.iter().enumerate() {
        let (cx, cy) = b.center();
        let col = ((cx / cell).floor() as isize).clamp(0, grid as isize - 1) as usize;
        let row = ((cy / cell).floor() as isize).clamp(0, grid as isize - 1) as usize;
        let c = row * grid + col;
        m.gt_cells.push(c);
        if m.matched[c].is_none() {
            m.positive[c] = true;
            m.matched[c] = Some(i);
            m.offsets[c] = encode_offsets(b, row, col, cell);
        }
    }
    m
}

/// Boxes sorted by `(class, x_min, y_min, x_max, y_max)`. Matching on this
/// order makes the loss independent of how the annotation list is ordered.
pub fn canonical_order(boxes: &[BBox]) -> Vec<BBox> {
    let mut v = boxes.to_vec();
    v.sort_by(|a, b| {
        a.class.cmp(&b.class).then_with(|| {
            [a.x_min, a.y_min, a.x_max, a.y_max]
                .iter()
                .zip([b.x_min, b.y_min, b.x_max, b.y_max].iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    v
}

/// Dense target tensors for the loss graph.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTargets {
    /// `[N, 2]` one-hot over (background, object).
    pub objectness: Tensor,
    /// `[N, C]` one-hot class for positive cells, zero rows elsewhere.
    pub class: Tensor,
    /// `[4, N]` regression targets.
    pub offsets: Tensor,
    /// `[4, N]` 1 on positive cells.
    pub mask: Tensor,
    /// `1 / #positives`, or 0 without positives.
    pub inv_positive: Tensor,
}

impl LossTargets {
    pub fn new(m: &AnchorMatch, boxes: &[BBox]) -> Self {
        let n = m.grid * m.grid;
        let mut obj = vec![0.0; n * 2];
        let mut cls = vec![0.0; n * NUM_CLASSES];
        let mut off = vec![0.0; BOX_PARAMS * n];
        let mut mask = vec![0.0; BOX_PARAMS * n];
        for c in 0..n {
            match m.matched[c] {
                Some(i) => {
                    obj[c * 2 + 1] = 1.0;
                    cls[c * NUM_CLASSES + boxes[i].class] = 1.0;
                    for k in 0..BOX_PARAMS {
                        off[k * n + c] = m.offsets[c][k];
                        mask[k * n + c] = 1.0;
                    }
                }
                None => obj[c * 2] = 1.0,
            }
        }
        let npos = m.num_positive();
        Self {
            objectness: Tensor::new(&[n, 2], obj),
            class: Tensor::new(&[n, NUM_CLASSES], cls),
            offsets: Tensor::new(&[BOX_PARAMS, n], off),
            mask: Tensor::new(&[BOX_PARAMS, n], mask),
            inv_positive: Tensor::scalar(if npos > 0 { 1.0 / npos as f64 } else { 0.0 }),
        }
    }

    pub fn for_scene(scene: &Scene, arch: &DetectorArch) -> Result<Self, CoreError> {
        if !scene.is_labeled() {
            return Err(CoreError::Precondition(format!(
                "detection loss needs a labeled scene (seed {}, domain {})",
                scene.content_seed,
                scene.domain.tag()
            )));
        }
        let boxes = canonical_order(&scene.boxes);
        let m = match_anchors(&boxes, arch.grid(), arch.cell());
        Ok(Self::new(&m, &boxes))
    }
}

/// Input leaves holding [`LossTargets`].
#[derive(Debug, Clone, Copy)]
pub struct TargetVars {
    pub objectness: Var,
    pub class: Var,
    pub offsets: Var,
    pub mask: Var,
    pub inv_positive: Var,
}

impl TargetVars {
    pub fn new(g: &mut Graph, grid: usize) -> Self {
        let n = grid * grid;
        Self {
            objectness: g.input(Tensor::zeros(&[n, 2])),
            class: g.input(Tensor::zeros(&[n, NUM_CLASSES])),
            offsets: g.input(Tensor::zeros(&[BOX_PARAMS, n])),
            mask: g.input(Tensor::zeros(&[BOX_PARAMS, n])),
            inv_positive: g.input(Tensor::scalar(0.0)),
        }
    }

    pub fn load(&self, g: &mut Graph, t: &LossTargets) -> Result<(), CoreError> {
        g.set_value(self.objectness, &t.objectness)?;
        g.set_value(self.class, &t.class)?;
        g.set_value(self.offsets, &t.offsets)?;
        g.set_value(self.mask, &t.mask)?;
        g.set_value(self.inv_positive, &t.inv_positive)?;
        Ok(())
    }
}

/// Scalar nodes of the detection loss.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub objectness: Var,
    pub class: Var,
    pub regression: Var,
    pub total: Var,
}

/// Build `L_obj + L_cls + L_reg` over a head output.
pub fn detection_loss_graph(g: &mut Graph, head: Var, grid: usize, t: &TargetVars) -> Result<LossTerms, CoreError> {
    let n = grid * grid;
    let flat = g.reshape(head, &[HEAD_OUTPUTS, n])?;

    // objectness as a two-way softmax over (0, logit): equal to sigmoid BCE
    let obj_logit = g.slice(flat, 0, 0, 1)?;
    let zeros = g.input(Tensor::zeros(&[1, n]));
    let obj_pair = g.concat(&[zeros, obj_logit], 0)?;
    let obj_pair = g.transpose(obj_pair)?;
    let obj_ce = g.softmax_xent(obj_pair, t.objectness)?;
    let objectness = g.mean(obj_ce)?;

    let cls_logits = g.slice(flat, 0, 1, NUM_CLASSES)?;
    let cls_logits = g.transpose(cls_logits)?;
    let cls_ce = g.softmax_xent(cls_logits, t.class)?;
    let cls_sum = g.sum(cls_ce)?;
    let class = g.mul(cls_sum, t.inv_positive)?;

    let pred = g.slice(flat, 0, 1 + NUM_CLASSES, BOX_PARAMS)?;
    let diff = g.sub(pred, t.offsets)?;
    let huber = g.smooth_l1(diff)?;
    let huber = g.mul(huber, t.mask)?;
    let reg_sum = g.sum(huber)?;
    let regression = g.mul(reg_sum, t.inv_positive)?;

    let partial = g.add(objectness, class)?;
    let total = g.add(partial, regression)?;
    Ok(LossTerms {
        objectness,
        class,
        regression,
        total,
    })
}

/// Self-contained detection-loss graph for one labeled scene.
pub struct DetectionLoss {
    pub graph: Graph,
    pub vars: DetectorVars,
    pub terms: LossTerms,
}

impl DetectionLoss {
    pub fn value(&mut self) -> Result<f64, CoreError> {
        Ok(self.graph.eval_forward(self.terms.total)?.item())
    }
}

pub fn detection_loss(model: &DetectorModel, scene: &Scene) -> Result<DetectionLoss, CoreError> {
    check_image(&model.arch, &scene.image)?;
    let targets = LossTargets::for_scene(scene, &model.arch)?;
    let mut graph = Graph::new();
    let vars = model.attach(&mut graph);
    let image = graph.input(scene.image.to_tensor());
    let feat = encoder_graph(&mut graph, &model.arch, &vars, image)?;
    let head = head_graph(&mut graph, &model.arch, &vars, feat)?;
    let tv = TargetVars::new(&mut graph, model.arch.grid());
    tv.load(&mut graph, &targets)?;
    let terms = detection_loss_graph(&mut graph, head, model.arch.grid(), &tv)?;
    graph.eval_forward(terms.total)?;
    Ok(DetectionLoss { graph, vars, terms })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Greedy per-class NMS; input order is irrelevant, output is sorted by
/// confidence descending.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut keep: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let suppressed = keep
            .iter()
            .any(|k| k.bbox.class == d.bbox.class && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            keep.push(d);
        }
    }
    keep
}

/// Turn a raw `[HEAD_OUTPUTS, G, G]` head output into detections.
/// Confidence is objectness probability times the top class probability.
pub fn decode_head(head: &Tensor, arch: &DetectorArch, conf_threshold: f64, nms_iou: f64) -> Vec<Detection> {
    let grid = arch.grid();
    let n = grid * grid;
    let cell = arch.cell();
    let v = head.data();
    let mut dets = Vec::new();
    for c in 0..n {
        let obj = sigmoid(v[c]);
        let logits: Vec<f64> = (0..NUM_CLASSES).map(|k| v[(1 + k) * n + c]).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let (class, best) = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, l)| (k, (l - m).exp() / z))
            .unwrap();
        let confidence = obj * best;
        if confidence <= conf_threshold {
            continue;
        }
        let t = [
            v[(1 + NUM_CLASSES) * n + c],
            v[(2 + NUM_CLASSES) * n + c],
            v[(3 + NUM_CLASSES) * n + c],
            v[(4 + NUM_CLASSES) * n + c],
        ];
        let b = decode_offsets(&t, c / grid, c % grid, cell, class).clip(arch.image_size);
        if b.area() > 0.0 {
            dets.push(Detection { bbox: b, confidence });
        }
    }
    nms(dets, nms_iou)
}

pub fn decode(model: &DetectorModel, image: &Image, conf_threshold: f64, nms_iou: f64) -> Result<Vec<Detection>, CoreError> {
    check_image(&model.arch, image)?;
    let head = InferenceGraph::new(model)?.head(image)?;
    Ok(decode_head(&head, &model.arch, conf_threshold, nms_iou))
}

/// Head output that decodes to exactly `boxes` (one box per cell; later
/// boxes sharing a cell are dropped, as in matching).
pub fn head_from_boxes(boxes: &[BBox], arch: &DetectorArch, logit: f64) -> Tensor {
    let grid = arch.grid();
    let n = grid * grid;
    let m = match_anchors(boxes, grid, arch.cell());
    let mut v = vec![0.0; HEAD_OUTPUTS * n];
    for c in 0..n {
        match m.matched[c] {
            Some(i) => {
                v[c] = logit;
                for k in 0..NUM_CLASSES {
                    v[(1 + k) * n + c] = if k == boxes[i].class { logit } else { -logit };
                }
                for k in 0..BOX_PARAMS {
                    v[(1 + NUM_CLASSES + k) * n + c] = m.offsets[c][k];
                }
            }
            None => v[c] = -logit,
        }
    }
    Tensor::new(&[HEAD_OUTPUTS, grid, grid], v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> DetectorArch {
        DetectorArch::default()
    }

    #[test]
    fn default_geometry() {
        let a = arch();
        assert_eq!(a.grid(), 4);
        assert_eq!(a.cell(), 16.0);
        assert_eq!(a.feature_channels(), 64);
    }

    #[test]
    fn centered_box_hits_cell_2_2() {
        let b = BBox::new(24.0, 24.0, 40.0, 40.0, 0);
        let m = match_anchors(&[b], 4, 16.0);
        assert_eq!(m.gt_cells, vec![2 * 4 + 2]);
        assert_eq!(m.num_positive(), 1);
        assert!(m.positive[10]);
        assert_eq!(m.positive.iter().filter(|p| !**p).count(), 15);
        assert_eq!(m.offsets[10], [-0.5, -0.5, 0.0, 0.0]);
    }

    #[test]
    fn no_boxes_all_negative() {
        let m = match_anchors(&[], 4, 16.0);
        assert_eq!(m.num_positive(), 0);
        let t = LossTargets::new(&m, &[]);
        assert_eq!(t.inv_positive.item(), 0.0);
    }

    #[test]
    fn shared_cell_lower_index_wins() {
        let a = BBox::new(2.0, 2.0, 14.0, 12.0, 0);
        let b = BBox::new(4.0, 3.0, 14.0, 13.0, 1);
        let m = match_anchors(&[a, b], 4, 16.0);
        assert_eq!(m.gt_cells, vec![0, 0]);
        assert_eq!(m.matched[0], Some(0));
        assert_eq!(m.offsets[0], encode_offsets(&a, 0, 0, 16.0));
        assert_eq!(m.num_positive(), 1);
    }

    #[test]
    fn offsets_invert() {
        let b = BBox::new(5.0, 20.0, 27.0, 31.0, 1);
        let (cx, cy) = b.center();
        let (row, col) = ((cy / 16.0) as usize, (cx / 16.0) as usize);
        let t = encode_offsets(&b, row, col, 16.0);
        let back = decode_offsets(&t, row, col, 16.0, 1);
        assert!(iou(&b, &back) > 1.0 - 1e-12);
    }

    #[test]
    fn saturated_logits_suppress_everything() {
        let a = arch();
        let head = Tensor::filled(&[HEAD_OUTPUTS, 4, 4], -10.0);
        assert!(decode_head(&head, &a, 0.1, 0.5).is_empty());
    }

    #[test]
    fn zero_offsets_decode_to_anchor() {
        let a = arch();
        let mut v = vec![-10.0; HEAD_OUTPUTS * 16];
        let c = 4 + 1; // cell (1, 1)
        v[c] = 10.0;
        v[16 + c] = 10.0;
        for k in 0..4 {
            v[(3 + k) * 16 + c] = 0.0;
        }
        let dets = decode_head(&Tensor::new(&[HEAD_OUTPUTS, 4, 4], v), &a, 0.1, 0.5);
        assert_eq!(dets.len(), 1);
        let b = dets[0].bbox;
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (16.0, 16.0, 32.0, 32.0));
        assert_eq!(b.class, 0);
    }

    #[test]
    fn nms_keeps_highest() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0, 0);
        let kept = nms(
            vec![
                Detection { bbox: b, confidence: 0.8 },
                Detection { bbox: b, confidence: 0.9 },
            ],
            0.5,
        );
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);
    }

    #[test]
    fn encode_rejects_wrong_shape() {
        let m = DetectorModel::new(arch(), 0).unwrap();
        let img = Image::filled(32, 32, 0.0);
        assert!(matches!(encode(&m, &img), Err(CoreError::Precondition(_))));
    }

    #[test]
    fn unlabeled_scene_rejected() {
        let m = DetectorModel::new(arch(), 0).unwrap();
        let s = crate::synth::gen_scene(1, &crate::synth::AppearanceParams::IDENTITY, crate::synth::Domain::Target)
            .unwrap()
            .unlabeled();
        assert!(matches!(detection_loss(&m, &s), Err(CoreError::Precondition(_))));
    }

    #[test]
    fn from_params_validates_shapes() {
        let m = DetectorModel::new(arch(), 0).unwrap();
        assert!(DetectorModel::from_params(arch(), m.params.clone()).is_ok());
        let mut small = arch();
        small.head_hidden = 8;
        assert!(DetectorModel::from_params(small, m.params).is_err());
    }
}
