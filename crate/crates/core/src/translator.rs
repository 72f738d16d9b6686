//! Intermediate-domain construction and the translation discriminator.
//!
//! Source images are mapped to target-like appearance by a per-channel
//! affine transform `a·x + b_c` plus additive noise, all fitted by moment
//! matching. A quality score `q ∈ [0, 1]` controls three translation
//! artifacts, all inert at `q = 1`:
//!
//! * over-haze: an extra blend toward white of strength `haze_error·(1-q)`;
//! * object fading: every annotated object is blended toward its local
//!   background with strength `fade·(1-q)` (labels are kept, so a faded
//!   object is a poor training example);
//! * patch dropout: each `patch×patch` tile is replaced by the image mean
//!   with probability `dropout·(1-q)`.
//!
//! The translation discriminator `D_cycle` is trained to separate
//! translated images (label 0) from target images (label 1); its frozen
//! score on a translated image is that image's importance weight.

use bridge_autodiff::{sgd_step, Graph, ParamSet, SgdState, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nn::{self, ConvSpec};
use crate::seed;
use crate::synth::{quantize, AppearanceParams, Domain, Image, Scene, CHANNELS};
use crate::CoreError;

pub const MIN_FIT_SCENES: usize = 20;
pub const MIN_DCYCLE_SCENES: usize = 50;
/// Median absolute value of `N(0, 2σ²)` divided by `σ`.
const MAD_DIFF_FACTOR: f64 = 0.953_872_552_417_314_4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArtifactModel {
    pub haze_error: f64,
    pub fade: f64,
    pub dropout: f64,
    pub patch: usize,
    /// Translation quality is drawn from Beta(quality_shape, 1).
    pub quality_shape: f64,
}

impl Default for ArtifactModel {
    fn default() -> Self {
        Self {
            haze_error: 0.3,
            fade: 0.8,
            dropout: 0.15,
            patch: 8,
            quality_shape: 3.0,
        }
    }
}

impl ArtifactModel {
    pub fn validate(&self) -> Result<(), CoreError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let shape_ok = self.quality_shape > 0.0 && self.quality_shape.is_finite();
        if !(unit(self.haze_error) && unit(self.fade) && unit(self.dropout)) || self.patch == 0 || !shape_ok {
            return Err(CoreError::InvalidConfig(format!("artifact model out of range: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TranslatorParams {
    /// Common slope of the per-channel affine map.
    pub slope: f64,
    /// Per-channel offsets.
    pub offset: [f64; 3],
    /// Std of the Gaussian noise added after the affine map.
    pub noise: f64,
    /// The same transform expressed as appearance parameters, with the
    /// channel shift taken as zero-mean.
    pub estimated: AppearanceParams,
    pub artifacts: ArtifactModel,
}

impl TranslatorParams {
    pub fn identity() -> Self {
        Self::from_affine(1.0, [0.0; 3], 0.0, ArtifactModel::default())
    }

    pub fn from_affine(slope: f64, offset: [f64; 3], noise: f64, artifacts: ArtifactModel) -> Self {
        let haze = (offset.iter().sum::<f64>() / 3.0).clamp(0.0, 1.0);
        let shift = [offset[0] - haze, offset[1] - haze, offset[2] - haze];
        let gain = if haze < 1.0 { slope / (1.0 - haze) } else { 0.0 };
        Self {
            slope,
            offset,
            noise,
            estimated: AppearanceParams {
                haze,
                gain,
                noise,
                shift,
            },
            artifacts,
        }
    }
}

/// Pooled per-channel mean and variance plus a robust estimate of the
/// pixel-noise std.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainStats {
    pub mean: [f64; 3],
    pub var: [f64; 3],
    pub noise: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pixel noise std from horizontal neighbour differences; the median is
/// insensitive to the few differences that straddle object edges.
pub fn estimate_noise(images: &[&Image]) -> f64 {
    let mut diffs = Vec::new();
    for img in images {
        for c in 0..CHANNELS {
            let p = img.plane(c);
            for y in 0..img.height {
                let row = &p[y * img.width..(y + 1) * img.width];
                diffs.extend(row.windows(2).map(|w| (w[1] - w[0]).abs()));
            }
        }
    }
    if diffs.is_empty() {
        return 0.0;
    }
    median(&mut diffs) / MAD_DIFF_FACTOR
}

pub fn domain_stats(scenes: &[Scene]) -> DomainStats {
    let mut mean = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut n = 0.0;
    for s in scenes {
        for (c, (m, q)) in mean.iter_mut().zip(sq.iter_mut()).enumerate() {
            for v in s.image.plane(c) {
                *m += v;
                *q += v * v;
            }
        }
        n += (s.image.height * s.image.width) as f64;
    }
    let mut var = [0.0; 3];
    for c in 0..3 {
        mean[c] /= n;
        var[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0);
    }
    let imgs: Vec<&Image> = scenes.iter().map(|s| &s.image).collect();
    DomainStats {
        mean,
        var,
        noise: estimate_noise(&imgs),
    }
}

/// Fit the translator by matching per-channel moments of the target.
///
/// Signal variance is total variance minus the noise estimate. The common
/// slope is the least-squares fit `v_T ≈ a² v_S` of target to source signal
/// variances; offsets match the means; additive noise makes up the
/// remaining noise variance.
pub fn fit_translator(source: &[Scene], target: &[Scene], artifacts: ArtifactModel) -> Result<TranslatorParams, CoreError> {
    artifacts.validate()?;
    for (name, set) in [("source", source), ("target", target)] {
        if set.len() < MIN_FIT_SCENES {
            return Err(CoreError::Precondition(format!(
                "fit_translator needs at least {MIN_FIT_SCENES} {name} scenes, got {}",
                set.len()
            )));
        }
    }
    let s = domain_stats(source);
    let t = domain_stats(target);
    if t.var.iter().any(|v| *v <= 1e-12) || s.var.iter().any(|v| *v <= 1e-12) {
        return Err(CoreError::Precondition(format!(
            "degenerate statistics: source var {:?}, target var {:?}",
            s.var, t.var
        )));
    }
    let signal = |st: &DomainStats| st.var.map(|v| (v - st.noise * st.noise).max(1e-12));
    let (ss, ts) = (signal(&s), signal(&t));
    let num: f64 = ss.iter().zip(&ts).map(|(a, b)| a * b).sum();
    let den: f64 = ss.iter().map(|a| a * a).sum();
    let slope = (num / den).sqrt();
    let offset = [0, 1, 2].map(|c| t.mean[c] - slope * s.mean[c]);
    let noise = (t.noise * t.noise - slope * slope * s.noise * s.noise).max(0.0).sqrt();
    Ok(TranslatorParams::from_affine(slope, offset, noise, artifacts))
}

/// Mean of a one-pixel ring just outside `b`, per channel; falls back to the
/// image mean when the ring lies outside the image.
fn ring_mean(img: &Image, b: &crate::synth::BBox) -> [f64; 3] {
    let (x0, y0) = (b.x_min as isize - 1, b.y_min as isize - 1);
    let (x1, y1) = (b.x_max as isize, b.y_max as isize);
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    let inb = |x: isize, y: isize| x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let on_ring = y == y0 || y == y1 || x == x0 || x == x1;
            if on_ring && inb(x, y) {
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += img.data[img.idx(c, y as usize, x as usize)];
                }
                n += 1;
            }
        }
    }
    if n == 0 {
        let m = img.mean();
        return [m; 3];
    }
    acc.map(|a| a / n as f64)
}

/// Render `scene` (tagged S) into the intermediate domain at quality `q`.
/// Randomness is keyed by the content seed, so the same scene and `q`
/// always give the same image.
pub fn translate(scene: &Scene, q: f64, params: &TranslatorParams) -> Result<Scene, CoreError> {
    if scene.domain != Domain::Source {
        return Err(CoreError::Precondition(format!(
            "translate expects a source scene, got domain {}",
            scene.domain.tag()
        )));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(CoreError::Precondition(format!("quality must lie in [0, 1], got {q}")));
    }
    let src = &scene.image;
    let mut rng = seed::rng(scene.content_seed, seed::TAG_TRANSLATE);
    let plane = src.height * src.width;
    let mut img = src.clone();
    for (i, v) in img.data.iter_mut().enumerate() {
        let n: f64 = rng.sample(StandardNormal);
        *v = params.slope * *v + params.offset[i / plane] + params.noise * n;
    }

    let a = params.artifacts;
    let bad = 1.0 - q;
    let fade = a.fade * bad;
    if fade > 0.0 {
        for b in &scene.boxes {
            let bg = ring_mean(&img, b);
            for y in b.y_min as usize..(b.y_max as usize).min(img.height) {
                for x in b.x_min as usize..(b.x_max as usize).min(img.width) {
                    for (c, m) in bg.iter().enumerate() {
                        let i = img.idx(c, y, x);
                        img.data[i] += fade * (m - img.data[i]);
                    }
                }
            }
        }
    }
    let haze = a.haze_error * bad;
    if haze > 0.0 {
        img.data.iter_mut().for_each(|v| *v = (1.0 - haze) * *v + haze);
    }
    let drop = a.dropout * bad;
    // Draw per-tile decisions unconditionally so the stream is the same for every q.
    let fill = img.mean();
    for ty in (0..img.height).step_by(a.patch) {
        for tx in (0..img.width).step_by(a.patch) {
            let u: f64 = rng.gen();
            if u < drop {
                for c in 0..CHANNELS {
                    for y in ty..(ty + a.patch).min(img.height) {
                        for x in tx..(tx + a.patch).min(img.width) {
                            let i = img.idx(c, y, x);
                            img.data[i] = fill;
                        }
                    }
                }
            }
        }
    }
    img.data.iter_mut().for_each(|v| *v = quantize(*v));

    Ok(Scene {
        image: img,
        boxes: scene.boxes.clone(),
        domain: Domain::Synthetic,
        content_seed: scene.content_seed,
        quality: Some(q),
        weight: None,
    })
}

/// Translation quality for a scene, Beta(`shape`, 1) distributed and keyed
/// by the master seed and content seed.
pub fn sample_quality(master_seed: u64, content_seed: u64, shape: f64) -> f64 {
    let u: f64 = seed::rng(seed::derive(master_seed, content_seed), seed::TAG_QUALITY).gen();
    u.powf(1.0 / shape)
}

/// Translate every source scene at its sampled quality.
pub fn build_intermediate(source: &[Scene], params: &TranslatorParams, master_seed: u64) -> Result<Vec<Scene>, CoreError> {
    source
        .iter()
        .map(|s| translate(s, sample_quality(master_seed, s.content_seed, params.artifacts.quality_shape), params))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryTrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl BinaryTrainOptions {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.batch == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(CoreError::InvalidConfig(format!("binary training options out of range: {self:?}")));
        }
        Ok(())
    }
}

/// A binary classifier expressed as a graph builder producing one logit.
pub trait BinaryModel {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn input_shape(&self) -> Vec<usize>;
    /// Scalar logit for the input leaf `x`.
    fn logit(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var, CoreError>;
}

/// Shared single-input scoring/training graph for a [`BinaryModel`].
struct BinaryGraph {
    g: Graph,
    vars: Vec<Var>,
    x: Var,
    target: Var,
    prob: Var,
    loss: Var,
}

impl BinaryGraph {
    fn new<M: BinaryModel>(m: &M) -> Result<Self, CoreError> {
        let mut g = Graph::new();
        let vars = m.params().attach(&mut g);
        let x = g.input(Tensor::zeros(&m.input_shape()));
        let logit = m.logit(&mut g, &vars, x)?;
        let logit = g.reshape(logit, &[1, 1])?;
        let prob = g.sigmoid(logit)?;
        // BCE as a two-way softmax over (0, logit)
        let zero = g.input(Tensor::zeros(&[1, 1]));
        let pair = g.concat(&[zero, logit], 1)?;
        let target = g.input(Tensor::zeros(&[1, 2]));
        let ce = g.softmax_xent(pair, target)?;
        let loss = g.sum(ce)?;
        Ok(Self {
            g,
            vars,
            x,
            target,
            prob,
            loss,
        })
    }

    fn load(&mut self, x: &Tensor, label: Option<f64>) -> Result<(), CoreError> {
        self.g.set_value(self.x, x)?;
        if let Some(d) = label {
            self.g.set_value(self.target, &Tensor::new(&[1, 2], vec![1.0 - d, d]))?;
        }
        Ok(())
    }
}

/// Probability of label 1 for each input.
pub fn score_binary<M: BinaryModel>(m: &M, inputs: &[Tensor]) -> Result<Vec<f64>, CoreError> {
    let mut bg = BinaryGraph::new(m)?;
    inputs
        .iter()
        .map(|x| {
            bg.load(x, None)?;
            Ok(bg.g.eval_forward(bg.prob)?.item())
        })
        .collect()
}

/// Minimise BCE with `negatives` labeled 0 and `positives` labeled 1.
/// Each epoch visits a seeded shuffle of all samples; gradients are averaged
/// over `batch` samples per SGD step. Returns the mean loss of every epoch.
pub fn train_binary<M: BinaryModel>(
    m: &mut M,
    negatives: &[Tensor],
    positives: &[Tensor],
    opts: &BinaryTrainOptions,
    shuffle_seed: u64,
) -> Result<Vec<f64>, CoreError> {
    opts.validate()?;
    let mut bg = BinaryGraph::new(m)?;
    let mut state = SgdState::new(m.params(), opts.lr, opts.momentum, opts.weight_decay);
    let mut order: Vec<(bool, usize)> = (0..negatives.len())
        .map(|i| (false, i))
        .chain((0..positives.len()).map(|i| (true, i)))
        .collect();
    let mut rng = seed::rng(shuffle_seed, seed::TAG_SHUFFLE);
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(opts.batch).enumerate() {
            m.params().sync_into(&mut bg.g, &bg.vars)?;
            let mut acc: Option<Vec<Tensor>> = None;
            for &(pos, i) in chunk {
                let (x, d) = if pos { (&positives[i], 1.0) } else { (&negatives[i], 0.0) };
                bg.load(x, Some(d))?;
                let l = bg.g.eval_forward(bg.loss)?.item();
                if !l.is_finite() {
                    return Err(CoreError::NonFiniteLoss {
                        stage: "binary discriminator".into(),
                        iteration: epoch * order.len().div_ceil(opts.batch) + step,
                        detail: format!("loss {l} on {} sample {i}", if pos { "positive" } else { "negative" }),
                        last_good: None,
                    });
                }
                total += l;
                bg.g.backprop(bg.loss)?;
                let grads = m.params().grads_from(&bg.g, &bg.vars);
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (t, g) in a.iter_mut().zip(&grads) {
                            t.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = acc.unwrap();
            let k = chunk.len() as f64;
            grads.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v /= k));
            sgd_step(m.params_mut(), &grads, &mut state)?;
        }
        epoch_losses.push(total / order.len().max(1) as f64);
    }
    Ok(epoch_losses)
}

/// Image classifier: three stride-2 3×3 convolutions with 64 channels and
/// leaky ReLU, a final 3×3 convolution to one channel, global average
/// pooling and a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleDiscriminator {
    pub image_size: usize,
    pub params: ParamSet,
}

const CYCLE_HIDDEN: usize = 64;
const CYCLE_ALPHA: f64 = 0.2;

impl CycleDiscriminator {
    pub fn new(image_size: usize, init_seed: u64) -> Self {
        let mut rng = seed::rng(init_seed, seed::TAG_DCYCLE);
        let mut params = ParamSet::new();
        let specs = Self::specs();
        for (i, s) in specs.iter().enumerate() {
            let std = if i + 1 < specs.len() {
                nn::he_std(s.c_in * 9, CYCLE_ALPHA)
            } else {
                0.01
            };
            nn::push_conv(&mut params, &format!("dcycle.{i}"), *s, std, 0.0, &mut rng);
        }
        Self { image_size, params }
    }

    pub fn from_params(image_size: usize, params: ParamSet) -> Result<Self, CoreError> {
        nn::check_conv_params(params.tensors(), &Self::specs(), "cycle discriminator")?;
        Ok(Self { image_size, params })
    }

    fn specs() -> Vec<ConvSpec> {
        let conv = |c_in, c_out| ConvSpec {
            c_in,
            c_out,
            k: 3,
            stride: 2,
            pad: 1,
        };
        vec![
            conv(CHANNELS, CYCLE_HIDDEN),
            conv(CYCLE_HIDDEN, CYCLE_HIDDEN),
            conv(CYCLE_HIDDEN, CYCLE_HIDDEN),
            conv(CYCLE_HIDDEN, 1),
        ]
    }

    /// `D_cycle(I)` for each image, strictly inside `(0, 1)`.
    pub fn score(&self, images: &[&Image]) -> Result<Vec<f64>, CoreError> {
        let xs: Vec<Tensor> = images.iter().map(|i| i.to_tensor()).collect();
        score_binary(self, &xs)
    }
}

impl BinaryModel for CycleDiscriminator {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![CHANNELS, self.image_size, self.image_size]
    }

    fn logit(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var, CoreError> {
        let map = nn::conv_stack(g, x, vars, &Self::specs(), CYCLE_ALPHA, false)?;
        Ok(g.mean(map)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcycleConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for DcycleConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch: 1,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

impl DcycleConfig {
    fn options(&self) -> BinaryTrainOptions {
        BinaryTrainOptions {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Train `D_cycle` with intermediate-domain images labeled 0 and target
/// images labeled 1. Returns the frozen discriminator and per-epoch losses.
pub fn train_dcycle(
    synthetic: &[Scene],
    target: &[Scene],
    cfg: &DcycleConfig,
    seed_value: u64,
) -> Result<(CycleDiscriminator, Vec<f64>), CoreError> {
    for (name, set) in [("intermediate", synthetic), ("target", target)] {
        if set.len() < MIN_DCYCLE_SCENES {
            return Err(CoreError::Precondition(format!(
                "train_dcycle needs at least {MIN_DCYCLE_SCENES} {name} scenes, got {}",
                set.len()
            )));
        }
    }
    let size = synthetic[0].image.height;
    let mut d = CycleDiscriminator::new(size, seed_value);
    let neg: Vec<Tensor> = synthetic.iter().map(|s| s.image.to_tensor()).collect();
    let pos: Vec<Tensor> = target.iter().map(|s| s.image.to_tensor()).collect();
    let losses = train_binary(&mut d, &neg, &pos, &cfg.options(), seed::derive(seed_value, seed::TAG_DCYCLE))?;
    Ok((d, losses))
}

/// Importance weight: `D_cycle(I)` for intermediate-domain scenes, exactly 1
/// otherwise.
pub fn weight_of(scene: &Scene, d_cycle: &CycleDiscriminator) -> Result<f64, CoreError> {
    if scene.domain != Domain::Synthetic {
        return Ok(1.0);
    }
    Ok(d_cycle.score(&[&scene.image])?[0])
}

/// Compute and store the weight of every scene.
pub fn assign_weights(scenes: &mut [Scene], d_cycle: &CycleDiscriminator) -> Result<(), CoreError> {
    let synthetic: Vec<&Image> = scenes
        .iter()
        .filter(|s| s.domain == Domain::Synthetic)
        .map(|s| &s.image)
        .collect();
    let mut scores = d_cycle.score(&synthetic)?.into_iter();
    for s in scenes.iter_mut() {
        s.weight = Some(if s.domain == Domain::Synthetic {
            scores.next().expect("one score per intermediate scene")
        } else {
            1.0
        });
    }
    Ok(())
}

/// Logistic model `σ(w·x + b)` on scalar inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Logistic1d {
    pub params: ParamSet,
}

impl Default for Logistic1d {
    fn default() -> Self {
        let mut params = ParamSet::new();
        params.push("w".to_string(), Tensor::new(&[1, 1], vec![0.0]));
        params.push("b".to_string(), Tensor::new(&[1, 1], vec![0.0]));
        Self { params }
    }
}

impl BinaryModel for Logistic1d {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![1, 1]
    }

    fn logit(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var, CoreError> {
        let wx = g.matmul(x, vars[0])?;
        Ok(g.add(wx, vars[1])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_scene, AppearanceParams};

    fn source(n: u64) -> Vec<Scene> {
        let p = AppearanceParams {
            noise: 0.01,
            ..AppearanceParams::IDENTITY
        };
        (0..n).map(|i| gen_scene(i, &p, Domain::Source).unwrap()).collect()
    }

    #[test]
    fn identity_translation_at_full_quality() {
        for s in source(5) {
            let f = translate(&s, 1.0, &TranslatorParams::identity()).unwrap();
            assert_eq!(f.image, s.image);
            assert_eq!(f.boxes, s.boxes);
            assert_eq!(f.domain, Domain::Synthetic);
            assert_eq!(f.content_seed, s.content_seed);
        }
    }

    #[test]
    fn fitting_rejects_small_sets() {
        let s = source(1);
        assert!(matches!(
            fit_translator(&s, &s, ArtifactModel::default()),
            Err(CoreError::Precondition(_))
        ));
    }

    #[test]
    fn fitting_rejects_flat_target() {
        let s = source(20);
        let flat: Vec<Scene> = s
            .iter()
            .map(|x| Scene {
                image: Image::filled(64, 64, 0.5),
                ..x.clone()
            })
            .collect();
        assert!(fit_translator(&s, &flat, ArtifactModel::default()).is_err());
    }

    #[test]
    fn translate_rejects_non_source() {
        let mut s = source(1).remove(0);
        s.domain = Domain::Target;
        assert!(translate(&s, 0.5, &TranslatorParams::identity()).is_err());
        s.domain = Domain::Source;
        assert!(translate(&s, 1.5, &TranslatorParams::identity()).is_err());
    }

    #[test]
    fn noise_estimate_recovers_sigma() {
        let p = AppearanceParams {
            noise: 0.05,
            ..AppearanceParams::IDENTITY
        };
        let scenes: Vec<Scene> = (0..10).map(|i| gen_scene(i, &p, Domain::Source).unwrap()).collect();
        let imgs: Vec<&Image> = scenes.iter().map(|s| &s.image).collect();
        let est = estimate_noise(&imgs);
        assert!((est - 0.05).abs() < 0.005, "estimate {est}");
    }

    #[test]
    fn weight_is_one_off_domain() {
        let d = CycleDiscriminator::new(64, 0);
        let s = source(1).remove(0);
        assert_eq!(weight_of(&s, &d).unwrap(), 1.0);
        let f = translate(&s, 0.5, &TranslatorParams::identity()).unwrap();
        let w = weight_of(&f, &d).unwrap();
        assert!(w > 0.0 && w < 1.0);
    }

    #[test]
    fn quality_follows_beta_and_is_deterministic() {
        for (shape, want) in [(1.0, 0.5), (3.0, 0.75)] {
            let qs: Vec<f64> = (0..2000).map(|i| sample_quality(3, i, shape)).collect();
            assert_eq!(qs[17], sample_quality(3, 17, shape));
            let mean = qs.iter().sum::<f64>() / qs.len() as f64;
            assert!((mean - want).abs() < 0.03, "shape {shape}: mean {mean}");
            assert!(qs.iter().all(|q| (0.0..1.0).contains(q)));
        }
        let qs: Vec<f64> = (0..1000).map(|i| sample_quality(3, i, 1.0)).collect();
        assert!(qs.iter().all(|q| (0.0..1.0).contains(q)));
    }
}
