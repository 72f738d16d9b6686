//! Experiment orchestration: configuration, checkpoints, single training
//! stages, the four experiment arms and the fixed-weight ablation.
//!
//! Every run is a pure function of its [`TrainConfig`]. Scene sampling is
//! driven by per-epoch permutations derived from the stage seed, so the
//! scene drawn at iteration `i` depends only on `(seed, stage, i)` and a
//! resumed stage replays the exact same stream.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use bridge_autodiff::{clip_grad_norm, sgd_step, ParamSet, SgdState, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{scene_weight, DEFAULT_LAMBDA_DISC, DomainDiscriminator, ObjectiveGraph, ObjectiveOptions, ObjectiveValues};
use crate::codec::{fnv1a, Reader, Writer};
use crate::detector::{DetectorArch, DetectorModel};
use crate::metrics::{evaluate, EvalResult, EvalSettings, AP_PROTOCOL};
use crate::seed;
use crate::synth::{gen_dataset, DatasetConfig, Datasets, Domain, Scene};
use crate::translator::{
    assign_weights, build_intermediate, fit_translator, train_dcycle, ArtifactModel, CycleDiscriminator, DcycleConfig,
    TranslatorParams,
};
use crate::CoreError;

/// How the detection loss of intermediate-domain scenes is weighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightMode {
    /// The cached `D_cycle` score of each scene.
    Dynamic,
    /// Every scene weighs 1.
    None,
    /// Every intermediate-domain scene weighs `c`.
    Fixed(f64),
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightMode::Dynamic => f.write_str("dynamic"),
            WeightMode::None => f.write_str("none"),
            WeightMode::Fixed(c) => write!(f, "fixed:{c}"),
        }
    }
}

impl FromStr for WeightMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, CoreError> {
        match s {
            "dynamic" => Ok(WeightMode::Dynamic),
            "none" => Ok(WeightMode::None),
            _ => {
                let c = s
                    .strip_prefix("fixed:")
                    .and_then(|c| c.parse::<f64>().ok())
                    .ok_or_else(|| {
                        CoreError::InvalidConfig(format!("weight mode must be dynamic, none or fixed:<c>, got {s:?}"))
                    })?;
                if !(c > 0.0 && c.is_finite()) {
                    return Err(CoreError::InvalidConfig(format!("fixed weight must be > 0, got {c}")));
                }
                Ok(WeightMode::Fixed(c))
            }
        }
    }
}

impl Serialize for WeightMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for WeightMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Experiment arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    SourceOnly,
    Direct,
    SyntheticAugment,
    Progressive,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::SourceOnly, Arm::Direct, Arm::SyntheticAugment, Arm::Progressive];

    pub fn name(self) -> &'static str {
        match self {
            Arm::SourceOnly => "source-only",
            Arm::Direct => "direct",
            Arm::SyntheticAugment => "synthetic-augment",
            Arm::Progressive => "progressive",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, CoreError> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| CoreError::InvalidConfig(format!("unknown arm {s:?}")))
    }
}

/// Full experiment configuration. Serialized as TOML; missing keys take
/// their defaults and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Source-only steps every arm starts from.
    pub pretrain_iterations: usize,
    /// Steps per progressive stage.
    pub iterations: usize,
    /// Steps of the single-stage baselines.
    pub baseline_iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the summed per-location discriminator losses. The default
    /// is 0.1 per location of the default 4x4 feature map.
    pub lambda_disc: f64,
    pub lambda_grl: f64,
    /// Global gradient-norm cap applied separately to the detector and the
    /// discriminator each step; 0 disables clipping.
    pub grad_clip: f64,
    pub weight_mode: WeightMode,
    /// Fixed weights compared against dynamic weighting by the ablation.
    pub ablation_weights: Vec<f64>,
    pub data: DatasetConfig,
    pub translator: ArtifactModel,
    pub dcycle: DcycleConfig,
    pub eval: EvalSettings,
    pub model: DetectorArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain_iterations: 2000,
            iterations: 6000,
            baseline_iterations: 12000,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            lambda_disc: DEFAULT_LAMBDA_DISC / 16.0,
            lambda_grl: 1.0,
            grad_clip: 10.0,
            weight_mode: WeightMode::Dynamic,
            ablation_weights: DEFAULT_ABLATION_WEIGHTS.to_vec(),
            data: DatasetConfig::default(),
            translator: ArtifactModel::default(),
            dcycle: DcycleConfig::default(),
            eval: EvalSettings::default(),
            model: DetectorArch::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        let bad = |m: String| Err(CoreError::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.lambda_disc > 0.0 && self.lambda_disc.is_finite()) {
            return bad(format!("lambda_disc must be > 0, got {}", self.lambda_disc));
        }
        if !(self.lambda_grl > 0.0 && self.lambda_grl.is_finite()) {
            return bad(format!("lambda_grl must be > 0, got {}", self.lambda_grl));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad(format!("grad_clip must be >= 0, got {}", self.grad_clip));
        }
        if self.ablation_weights.is_empty() {
            return bad("ablation_weights must not be empty".into());
        }
        if let Some(w) = self.ablation_weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return bad(format!("ablation weights must be > 0, got {w}"));
        }
        if let WeightMode::Fixed(c) = self.weight_mode {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("fixed weight must be > 0, got {c}"));
            }
        }
        let e = &self.eval;
        for (name, v) in [("conf_threshold", e.conf_threshold), ("nms_iou", e.nms_iou), ("iou_threshold", e.iou_threshold)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("eval.{name} must lie in (0, 1), got {v}"));
            }
        }
        self.data.validate()?;
        self.translator.validate()?;
        self.model.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self, CoreError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| CoreError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn optimizer(&self, params: &ParamSet) -> SgdState {
        SgdState::new(params, self.lr, self.momentum, self.weight_decay)
    }
}

const CKPT_MAGIC: &[u8; 8] = b"BRDGCKP\0";
const CKPT_VERSION: u32 = 1;

/// Model, discriminator and optimizer state at a point in a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub iteration: u64,
    pub config_hash: String,
    pub arch: DetectorArch,
    pub detector: ParamSet,
    pub disc: ParamSet,
    pub detector_velocity: Vec<Tensor>,
    pub disc_velocity: Vec<Tensor>,
}

fn zeros_like(ps: &ParamSet) -> Vec<Tensor> {
    ps.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect()
}

fn disc_seed(master: u64, stage: &str) -> u64 {
    seed::derive(seed::derive(master, seed::TAG_DISC_INIT), fnv1a(stage.as_bytes()))
}

impl Checkpoint {
    /// Freshly initialised detector and discriminator for `cfg`.
    pub fn initial(cfg: &TrainConfig) -> Result<Self, CoreError> {
        let model = DetectorModel::new(cfg.model.clone(), cfg.seed)?;
        let disc = DomainDiscriminator::new(cfg.model.feature_channels(), disc_seed(cfg.seed, "init"));
        Ok(Self {
            stage: "init".into(),
            iteration: 0,
            config_hash: cfg.hash(),
            arch: cfg.model.clone(),
            detector_velocity: zeros_like(&model.params),
            disc_velocity: zeros_like(&disc.params),
            detector: model.params,
            disc: disc.params,
        })
    }

    /// Start `stage` from this state: detector parameters carry over, the
    /// discriminator is re-drawn from the stage seed and both optimizers
    /// restart from zero velocity.
    pub fn begin_stage(&self, stage: &str, master_seed: u64) -> Self {
        let disc = DomainDiscriminator::new(self.arch.feature_channels(), disc_seed(master_seed, stage));
        Self {
            stage: stage.to_string(),
            iteration: 0,
            config_hash: self.config_hash.clone(),
            arch: self.arch.clone(),
            detector: self.detector.clone(),
            detector_velocity: zeros_like(&self.detector),
            disc_velocity: zeros_like(&disc.params),
            disc: disc.params,
        }
    }

    pub fn model(&self) -> Result<DetectorModel, CoreError> {
        DetectorModel::from_params(self.arch.clone(), self.detector.clone())
    }

    pub fn discriminator(&self) -> Result<DomainDiscriminator, CoreError> {
        DomainDiscriminator::from_params(self.arch.feature_channels(), self.disc.clone())
    }

    pub fn check_config(&self, cfg: &TrainConfig) -> Result<(), CoreError> {
        let h = cfg.hash();
        if self.config_hash != h {
            return Err(CoreError::Checkpoint(format!(
                "config hash mismatch: checkpoint {}, config {h}",
                self.config_hash
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CKPT_MAGIC);
        w.u32(CKPT_VERSION);
        w.str(&self.config_hash);
        w.str(&self.stage);
        w.u64(self.iteration);
        w.str(&serde_json::to_string(&self.arch).expect("arch serializes"));
        w.param_set(&self.detector);
        w.param_set(&self.disc);
        for vs in [&self.detector_velocity, &self.disc_velocity] {
            w.u32(vs.len() as u32);
            vs.iter().for_each(|t| w.tensor(t));
        }
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, CoreError> {
        let mut r = Reader::checked(buf)?;
        if r.take(8)? != CKPT_MAGIC {
            return Err(r.invalid(0, "not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(r.invalid(8, format!("unsupported checkpoint version {version}")));
        }
        let config_hash = r.str()?;
        let stage = r.str()?;
        let iteration = r.u64()?;
        let at = r.pos;
        let arch: DetectorArch =
            serde_json::from_str(&r.str()?).map_err(|e| r.invalid(at, format!("bad architecture record: {e}")))?;
        let detector = r.param_set()?;
        let disc = r.param_set()?;
        let mut vel = || -> Result<Vec<Tensor>, CoreError> {
            let n = r.u32()? as usize;
            (0..n).map(|_| r.tensor()).collect()
        };
        let detector_velocity = vel()?;
        let disc_velocity = vel()?;
        if !r.at_end() {
            return Err(r.invalid(r.pos, "trailing bytes in checkpoint"));
        }
        let ck = Self {
            stage,
            iteration,
            config_hash,
            arch,
            detector,
            disc,
            detector_velocity,
            disc_velocity,
        };
        ck.model()?;
        ck.discriminator()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        std::fs::write(path, self.encode()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let buf = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::decode(&buf)
    }
}

const DCYCLE_MAGIC: &[u8; 8] = b"BRDGDCY\0";

pub fn encode_dcycle(d: &CycleDiscriminator) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(DCYCLE_MAGIC);
    w.u32(d.image_size as u32);
    w.param_set(&d.params);
    w.finish()
}

pub fn decode_dcycle(buf: &[u8]) -> Result<CycleDiscriminator, CoreError> {
    let mut r = Reader::checked(buf)?;
    if r.take(8)? != DCYCLE_MAGIC {
        return Err(r.invalid(0, "not a D_cycle file"));
    }
    let size = r.u32()? as usize;
    let params = r.param_set()?;
    if !r.at_end() {
        return Err(r.invalid(r.pos, "trailing bytes in D_cycle file"));
    }
    CycleDiscriminator::from_params(size, params)
}

pub fn save_dcycle(d: &CycleDiscriminator, path: &Path) -> Result<(), CoreError> {
    std::fs::write(path, encode_dcycle(d)).map_err(|e| CoreError::io(path, e))
}

pub fn load_dcycle(path: &Path) -> Result<CycleDiscriminator, CoreError> {
    let buf = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_dcycle(&buf)
}

/// One row of a loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub weight: f64,
    pub total: f64,
    pub detection: f64,
    pub objectness: f64,
    pub class: f64,
    pub regression: f64,
    pub disc_labeled: f64,
    pub disc_unlabeled: f64,
    /// Detector gradient norm before clipping.
    pub grad_norm: f64,
}

impl TracePoint {
    fn new(iteration: usize, weight: f64, v: &ObjectiveValues, grad_norm: f64) -> Self {
        Self {
            iteration,
            weight,
            total: v.total,
            detection: v.detection,
            objectness: v.objectness,
            class: v.class,
            regression: v.regression,
            disc_labeled: v.disc_labeled,
            disc_unlabeled: v.disc_unlabeled,
            grad_norm,
        }
    }
}

/// What one stage trains on.
#[derive(Debug, Clone, Copy)]
pub struct StageSpec<'a> {
    pub name: &'a str,
    pub labeled: &'a [Scene],
    /// Images only; annotations, if any, are never read.
    pub unlabeled: &'a [Scene],
    pub iterations: usize,
    pub adversarial: bool,
    pub weight_mode: WeightMode,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TracePoint>,
}

fn sample_weight(mode: WeightMode, scene: &Scene) -> Result<f64, CoreError> {
    match (mode, scene.domain) {
        (WeightMode::None, _) => Ok(1.0),
        (WeightMode::Fixed(c), Domain::Synthetic) => Ok(c),
        (WeightMode::Fixed(_), _) => Ok(1.0),
        (WeightMode::Dynamic, _) => scene_weight(scene),
    }
}

fn clip(grads: &mut [Tensor], max_norm: f64) -> f64 {
    if max_norm > 0.0 {
        clip_grad_norm(grads, max_norm)
    } else {
        bridge_autodiff::grad_norm(grads)
    }
}

/// Per-epoch seeded permutations over `n` items.
struct Sampler {
    n: usize,
    seed: u64,
    epoch: Option<usize>,
    perm: Vec<usize>,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            epoch: None,
            perm: Vec::new(),
        }
    }

    fn at(&mut self, iteration: usize) -> usize {
        let epoch = iteration / self.n;
        if self.epoch != Some(epoch) {
            self.perm = (0..self.n).collect();
            self.perm.shuffle(&mut seed::rng(self.seed, epoch as u64));
            self.epoch = Some(epoch);
        }
        self.perm[iteration % self.n]
    }
}

/// Train one stage starting from `init`.
///
/// If `init` belongs to a different stage the stage is started afresh via
/// [`Checkpoint::begin_stage`]; if it belongs to this stage training resumes
/// at `init.iteration`. A stage with zero iterations returns `init`
/// unchanged.
pub fn train_stage(spec: &StageSpec, cfg: &TrainConfig, init: Checkpoint) -> Result<StageOutcome, CoreError> {
    cfg.validate()?;
    init.check_config(cfg)?;
    if spec.iterations == 0 {
        return Ok(StageOutcome {
            checkpoint: init,
            trace: Vec::new(),
        });
    }
    if spec.labeled.is_empty() {
        return Err(CoreError::Precondition(format!("stage {}: no labeled scenes", spec.name)));
    }
    if let Some(s) = spec.labeled.iter().find(|s| !s.is_labeled() || s.domain == Domain::Target) {
        return Err(CoreError::Precondition(format!(
            "stage {}: scene {} ({}) cannot be used as labeled data",
            spec.name,
            s.content_seed,
            s.domain.tag()
        )));
    }
    if spec.adversarial && spec.unlabeled.is_empty() {
        return Err(CoreError::Precondition(format!("stage {}: no unlabeled scenes", spec.name)));
    }
    for s in spec.labeled {
        sample_weight(spec.weight_mode, s)?;
    }

    let ckpt = if init.stage == spec.name {
        init
    } else {
        init.begin_stage(spec.name, cfg.seed)
    };
    let start = ckpt.iteration as usize;
    if start > spec.iterations {
        return Err(CoreError::Checkpoint(format!(
            "checkpoint is at iteration {start}, past the stage length {}",
            spec.iterations
        )));
    }
    let mut model = ckpt.model()?;
    let mut disc = ckpt.discriminator()?;
    let options = ObjectiveOptions {
        lambda_disc: if spec.adversarial { cfg.lambda_disc } else { 0.0 },
        lambda_grl: cfg.lambda_grl,
        reverse_gradients: true,
    };
    let mut og = ObjectiveGraph::new(&model, Some(&disc), options)?;
    let mut det_opt = cfg.optimizer(&model.params);
    det_opt.set_velocities(ckpt.detector_velocity.clone())?;
    let mut disc_opt = cfg.optimizer(&disc.params);
    disc_opt.set_velocities(ckpt.disc_velocity.clone())?;

    let stage_seed = seed::derive(seed::derive(cfg.seed, seed::TAG_SHUFFLE), fnv1a(spec.name.as_bytes()));
    let mut pick_l = Sampler::new(spec.labeled.len(), seed::derive(stage_seed, 0));
    let mut pick_u = Sampler::new(spec.unlabeled.len().max(1), seed::derive(stage_seed, 1));

    let snapshot = |model: &DetectorModel, disc: &DomainDiscriminator, dv: &SgdState, sv: &SgdState, it: usize| Checkpoint {
        stage: spec.name.to_string(),
        iteration: it as u64,
        config_hash: ckpt.config_hash.clone(),
        arch: ckpt.arch.clone(),
        detector: model.params.clone(),
        disc: disc.params.clone(),
        detector_velocity: dv.velocities().to_vec(),
        disc_velocity: sv.velocities().to_vec(),
    };

    let mut trace = Vec::with_capacity(spec.iterations - start);
    for it in start..spec.iterations {
        let labeled = &spec.labeled[pick_l.at(it)];
        let unlabeled = spec.unlabeled.get(pick_u.at(it));
        let w = sample_weight(spec.weight_mode, labeled)?;
        og.sync(&model, Some(&disc))?;
        og.load(labeled, unlabeled, w)?;
        let v = og.forward()?;
        og.backward()?;
        let mut det_grads = og.detector_grads();
        let mut disc_grads = og.disc_grads();
        let grads_ok = det_grads.iter().chain(disc_grads.iter().flatten()).all(Tensor::all_finite);
        if !v.all_finite() || !grads_ok {
            return Err(CoreError::NonFiniteLoss {
                stage: spec.name.to_string(),
                iteration: it,
                detail: format!("objective {v:?}, finite gradients: {grads_ok}, labeled scene {}", labeled.content_seed),
                last_good: Some(Box::new(snapshot(&model, &disc, &det_opt, &disc_opt, it))),
            });
        }
        let norm = clip(&mut det_grads, cfg.grad_clip);
        if let Some(g) = disc_grads.as_mut() {
            clip(g, cfg.grad_clip);
        }
        sgd_step(&mut model.params, &det_grads, &mut det_opt)?;
        if let Some(g) = disc_grads {
            sgd_step(&mut disc.params, &g, &mut disc_opt)?;
        }
        trace.push(TracePoint::new(it, w, &v, norm));
    }
    Ok(StageOutcome {
        checkpoint: snapshot(&model, &disc, &det_opt, &disc_opt, spec.iterations),
        trace,
    })
}

/// Generated data, the fitted translator, the intermediate domain with its
/// cached weights and the frozen `D_cycle`.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub data: Datasets,
    pub translator: TranslatorParams,
    pub intermediate: Vec<Scene>,
    pub dcycle: CycleDiscriminator,
    pub dcycle_losses: Vec<f64>,
}

pub fn prepare_benchmark(cfg: &TrainConfig) -> Result<Benchmark, CoreError> {
    cfg.validate()?;
    let data = gen_dataset(cfg.seed, &cfg.data)?;
    let translator = fit_translator(&data.train_source, &data.train_target, cfg.translator)?;
    let mut intermediate = build_intermediate(&data.train_source, &translator, cfg.seed)?;
    let (dcycle, dcycle_losses) = train_dcycle(
        &intermediate,
        &data.train_target,
        &cfg.dcycle,
        seed::derive(cfg.seed, seed::TAG_DCYCLE),
    )?;
    assign_weights(&mut intermediate, &dcycle)?;
    Ok(Benchmark {
        data,
        translator,
        intermediate,
        dcycle,
        dcycle_losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub labeled_domains: String,
    pub unlabeled_domain: String,
    pub labeled_samples: usize,
    pub unlabeled_samples: usize,
    pub iterations: usize,
    pub adversarial: bool,
    pub weight_mode: WeightMode,
    pub detector_init: String,
    pub discriminator_init: String,
    pub trace: Vec<TracePoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl WeightSummary {
    pub fn of(scenes: &[Scene]) -> Option<Self> {
        let w: Vec<f64> = scenes.iter().filter_map(|s| s.weight).collect();
        if w.is_empty() {
            return None;
        }
        Some(Self {
            count: w.len(),
            mean: w.iter().sum::<f64>() / w.len() as f64,
            min: w.iter().copied().fold(f64::INFINITY, f64::min),
            max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// Metrics ledger of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub arm: Arm,
    pub seed: u64,
    pub config_hash: String,
    pub ap_protocol: String,
    pub stages: Vec<StageReport>,
    pub eval_target: EvalResult,
    pub eval_source: EvalResult,
    pub intermediate_weights: Option<WeightSummary>,
    pub config: TrainConfig,
}

impl RunReport {
    /// Labeled scenes of the final (adaptation) stage.
    pub fn labeled_samples(&self) -> usize {
        self.stages.last().map_or(0, |s| s.labeled_samples)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CoreError> {
        serde_json::from_str(text).map_err(|e| CoreError::Parse {
            offset: 0,
            message: format!("run report: {e}"),
        })
    }
}

/// Loss traces of every stage as CSV.
pub fn trace_csv(stages: &[StageReport]) -> String {
    let mut out =
        String::from("stage,iteration,weight,total,detection,objectness,class,regression,disc_labeled,disc_unlabeled,grad_norm\n");
    for s in stages {
        for t in &s.trace {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                s.name,
                t.iteration,
                t.weight,
                t.total,
                t.detection,
                t.objectness,
                t.class,
                t.regression,
                t.disc_labeled,
                t.disc_unlabeled,
                t.grad_norm
            ));
        }
    }
    out
}

fn domains(scenes: &[Scene]) -> String {
    let mut tags: Vec<&str> = scenes.iter().map(|s| s.domain.tag()).collect();
    tags.sort_unstable();
    tags.dedup();
    tags.join("+")
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub checkpoint: Checkpoint,
}

fn stage_report(spec: &StageSpec, outcome: &StageOutcome, detector_init: &str) -> StageReport {
    StageReport {
        name: spec.name.to_string(),
        labeled_domains: domains(spec.labeled),
        unlabeled_domain: if spec.adversarial { domains(spec.unlabeled) } else { String::new() },
        labeled_samples: spec.labeled.len(),
        unlabeled_samples: if spec.adversarial { spec.unlabeled.len() } else { 0 },
        iterations: spec.iterations,
        adversarial: spec.adversarial,
        weight_mode: spec.weight_mode,
        detector_init: detector_init.to_string(),
        discriminator_init: "fresh".to_string(),
        trace: outcome.trace.clone(),
    }
}

fn finish(arm: Arm, cfg: &TrainConfig, bench: &Benchmark, stages: Vec<StageReport>, checkpoint: Checkpoint) -> Result<RunOutcome, CoreError> {
    let model = checkpoint.model()?;
    let uses_f = stages.iter().any(|s| s.labeled_domains.contains('F'));
    Ok(RunOutcome {
        report: RunReport {
            arm,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            ap_protocol: AP_PROTOCOL.to_string(),
            eval_target: evaluate(&model, &bench.data.eval_target, &cfg.eval)?,
            eval_source: evaluate(&model, &bench.data.eval_source, &cfg.eval)?,
            intermediate_weights: if uses_f { WeightSummary::of(&bench.intermediate) } else { None },
            stages,
            config: cfg.clone(),
        },
        checkpoint,
    })
}

pub const PRETRAIN: &str = "pretrain";
pub const STAGE1: &str = "stage1";
pub const STAGE2: &str = "stage2";

/// Stages run so far and the checkpoint they ended with.
#[derive(Debug, Clone)]
pub struct StagePrefix {
    pub stages: Vec<StageReport>,
    pub checkpoint: Checkpoint,
}

fn pretrain_spec<'a>(bench: &'a Benchmark, cfg: &TrainConfig) -> StageSpec<'a> {
    StageSpec {
        name: PRETRAIN,
        labeled: &bench.data.train_source,
        unlabeled: &[],
        iterations: cfg.pretrain_iterations,
        adversarial: false,
        weight_mode: WeightMode::None,
    }
}

/// Source-only training from the initial checkpoint, shared by every arm.
pub fn pretrain(bench: &Benchmark, cfg: &TrainConfig) -> Result<StagePrefix, CoreError> {
    let spec = pretrain_spec(bench, cfg);
    let out = train_stage(&spec, cfg, Checkpoint::initial(cfg)?)?;
    Ok(StagePrefix {
        stages: vec![stage_report(&spec, &out, "fresh")],
        checkpoint: out.checkpoint,
    })
}

fn extend(prefix: &StagePrefix, spec: &StageSpec, cfg: &TrainConfig) -> Result<StagePrefix, CoreError> {
    let from = prefix.stages.last().map_or("init", |s| s.name.as_str());
    let out = train_stage(spec, cfg, prefix.checkpoint.clone())?;
    let mut stages = prefix.stages.clone();
    stages.push(stage_report(spec, &out, &format!("warm start from {from}")));
    Ok(StagePrefix {
        stages,
        checkpoint: out.checkpoint,
    })
}

/// Single-stage baseline arms, trained after the shared pre-training.
pub fn run_baseline(arm: Arm, bench: &Benchmark, cfg: &TrainConfig) -> Result<RunOutcome, CoreError> {
    let augmented: Vec<Scene>;
    let (labeled, adversarial): (&[Scene], bool) = match arm {
        Arm::SourceOnly => (&bench.data.train_source, false),
        Arm::Direct => (&bench.data.train_source, true),
        Arm::SyntheticAugment => {
            augmented = bench.data.train_source.iter().chain(&bench.intermediate).cloned().collect();
            (&augmented, true)
        }
        Arm::Progressive => {
            return Err(CoreError::Precondition("progressive is not a baseline arm".into()));
        }
    };
    let spec = StageSpec {
        name: arm.name(),
        labeled,
        unlabeled: &bench.data.train_target,
        iterations: cfg.baseline_iterations,
        adversarial,
        weight_mode: WeightMode::None,
    };
    let done = extend(&pretrain(bench, cfg)?, &spec, cfg)?;
    finish(arm, cfg, bench, done.stages, done.checkpoint)
}

fn stage1_spec<'a>(bench: &'a Benchmark, cfg: &TrainConfig) -> StageSpec<'a> {
    StageSpec {
        name: STAGE1,
        labeled: &bench.data.train_source,
        unlabeled: &bench.intermediate,
        iterations: cfg.iterations,
        adversarial: true,
        weight_mode: WeightMode::None,
    }
}

fn stage2_spec<'a>(bench: &'a Benchmark, cfg: &TrainConfig) -> StageSpec<'a> {
    StageSpec {
        name: STAGE2,
        labeled: &bench.intermediate,
        unlabeled: &bench.data.train_target,
        iterations: cfg.iterations,
        adversarial: true,
        weight_mode: cfg.weight_mode,
    }
}

/// Pre-training and stage 1 of the progressive arm: source labeled,
/// intermediate unlabeled.
pub fn run_stage1(bench: &Benchmark, cfg: &TrainConfig) -> Result<StagePrefix, CoreError> {
    extend(&pretrain(bench, cfg)?, &stage1_spec(bench, cfg), cfg)
}

/// Stage 2 of the progressive arm from a finished stage 1: intermediate
/// labeled and weighted per `cfg.weight_mode`, target unlabeled, detector
/// warm-started and discriminator re-initialized.
pub fn run_progressive_from(bench: &Benchmark, cfg: &TrainConfig, stage1: &StagePrefix) -> Result<RunOutcome, CoreError> {
    if stage1.checkpoint.stage != STAGE1 {
        return Err(CoreError::Checkpoint(format!(
            "expected a finished {STAGE1} checkpoint, got stage {}",
            stage1.checkpoint.stage
        )));
    }
    // earlier stages do not read the weight mode; accept them under any mode
    let mut prefix = stage1.clone();
    prefix.checkpoint.config_hash = cfg.hash();
    let done = extend(&prefix, &stage2_spec(bench, cfg), cfg)?;
    finish(Arm::Progressive, cfg, bench, done.stages, done.checkpoint)
}

pub fn run_progressive(bench: &Benchmark, cfg: &TrainConfig) -> Result<RunOutcome, CoreError> {
    let s1 = run_stage1(bench, cfg)?;
    run_progressive_from(bench, cfg, &s1)
}

pub fn run_arm(arm: Arm, bench: &Benchmark, cfg: &TrainConfig) -> Result<RunOutcome, CoreError> {
    match arm {
        Arm::Progressive => run_progressive(bench, cfg),
        _ => run_baseline(arm, bench, cfg),
    }
}

pub const DEFAULT_ABLATION_WEIGHTS: [f64; 5] = [0.8, 0.9, 1.0, 1.1, 1.2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub weight_mode: WeightMode,
    pub map: f64,
    pub class_ap: Vec<f64>,
    pub mean_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub config_hash: String,
    pub ap_protocol: String,
    /// Fixed-weight rows in the order given, then the dynamic row.
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn dynamic(&self) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.weight_mode == WeightMode::Dynamic)
    }

    pub fn fixed(&self) -> impl Iterator<Item = &AblationRow> {
        self.rows.iter().filter(|r| matches!(r.weight_mode, WeightMode::Fixed(_)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CoreError> {
        serde_json::from_str(text).map_err(|e| CoreError::Parse {
            offset: 0,
            message: format!("ablation report: {e}"),
        })
    }
}

/// Progressive runs with each fixed weight and once with dynamic weights.
/// Stage 1 is shared: it does not depend on the weight mode.
pub fn ablate_weights(bench: &Benchmark, cfg: &TrainConfig, weights: &[f64]) -> Result<(AblationReport, Vec<RunOutcome>), CoreError> {
    if weights.is_empty() {
        return Err(CoreError::InvalidConfig("ablation needs at least one fixed weight".into()));
    }
    let modes: Vec<WeightMode> = weights
        .iter()
        .map(|w| format!("fixed:{w}").parse())
        .chain(std::iter::once(Ok(WeightMode::Dynamic)))
        .collect::<Result<_, _>>()?;
    let s1 = run_stage1(bench, cfg)?;
    let mut rows = Vec::with_capacity(modes.len());
    let mut runs = Vec::with_capacity(modes.len());
    for mode in modes {
        let c = TrainConfig {
            weight_mode: mode,
            ..cfg.clone()
        };
        let run = run_progressive_from(bench, &c, &s1)?;
        let mean_weight = match mode {
            WeightMode::Fixed(w) => w,
            WeightMode::None => 1.0,
            WeightMode::Dynamic => WeightSummary::of(&bench.intermediate).map_or(1.0, |s| s.mean),
        };
        rows.push(AblationRow {
            weight_mode: mode,
            map: run.report.eval_target.map,
            class_ap: run.report.eval_target.classes.iter().map(|c| c.ap).collect(),
            mean_weight,
        });
        runs.push(run);
    }
    Ok((
        AblationReport {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            ap_protocol: AP_PROTOCOL.to_string(),
            rows,
        },
        runs,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_mode_parses() {
        assert_eq!("dynamic".parse::<WeightMode>().unwrap(), WeightMode::Dynamic);
        assert_eq!("none".parse::<WeightMode>().unwrap(), WeightMode::None);
        assert_eq!("fixed:0.8".parse::<WeightMode>().unwrap(), WeightMode::Fixed(0.8));
        assert!("fixed:0".parse::<WeightMode>().is_err());
        assert!("fixed:-1".parse::<WeightMode>().is_err());
        assert!("sometimes".parse::<WeightMode>().is_err());
        assert_eq!(WeightMode::Fixed(1.1).to_string(), "fixed:1.1");
    }

    #[test]
    fn arm_names_round_trip() {
        for a in Arm::ALL {
            assert_eq!(a.name().parse::<Arm>().unwrap(), a);
        }
        assert!("oracle".parse::<Arm>().is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = TrainConfig {
            seed: 5,
            weight_mode: WeightMode::Fixed(0.9),
            ..Default::default()
        };
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
    }

    #[test]
    fn partial_config_takes_defaults() {
        let cfg = TrainConfig::from_toml("seed = 3\niterations = 10\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.lr, 0.001);
        assert!(TrainConfig::from_toml("sed = 3").is_err());
        assert!(TrainConfig::from_toml("lr = -1.0").is_err());
        assert!(TrainConfig::from_toml("weight_mode = \"fixed:0\"").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let ck = Checkpoint::initial(&TrainConfig::default()).unwrap();
        let bytes = ck.encode();
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
        let mut bad = bytes.clone();
        bad[100] ^= 0x10;
        assert!(Checkpoint::decode(&bad).is_err());
        assert!(Checkpoint::decode(&bytes[..bytes.len() / 2]).is_err());
    }

    #[test]
    fn begin_stage_keeps_detector_and_redraws_disc() {
        let cfg = TrainConfig::default();
        let ck = Checkpoint::initial(&cfg).unwrap();
        let s = ck.begin_stage("stage2", cfg.seed);
        assert_eq!(s.detector, ck.detector);
        assert_ne!(s.disc, ck.disc);
        assert_eq!(s.iteration, 0);
        assert_eq!(s, ck.begin_stage("stage2", cfg.seed));
    }

    #[test]
    fn sampler_is_a_permutation_per_epoch() {
        let mut s = Sampler::new(7, 3);
        let mut first: Vec<usize> = (0..7).map(|i| s.at(i)).collect();
        first.sort_unstable();
        assert_eq!(first, (0..7).collect::<Vec<_>>());
        let mut fresh = Sampler::new(7, 3);
        assert_eq!(fresh.at(12), s.at(12));
    }
}
