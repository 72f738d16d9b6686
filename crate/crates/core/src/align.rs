//! Adversarial feature alignment: per-pixel domain discriminator, its BCE
//! loss and the composite training objectives routed through the GRL.

use bridge_autodiff::{Graph, ParamSet, Tensor, Var};

use crate::detector::{self, DetectorArch, DetectorModel, DetectorVars, LossTargets, LossTerms, TargetVars};
use crate::nn::{self, ConvSpec};
use crate::seed;
use crate::synth::{Domain, Scene, CHANNELS};
use crate::CoreError;

pub const DISC_HIDDEN: usize = 64;
pub const DISC_LAYERS: usize = 4;
pub const DEFAULT_LAMBDA_DISC: f64 = 0.1;

/// Which side of the current sub-task a feature map comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainLabel {
    /// `d = 0`: the labeled side.
    Source,
    /// `d = 1`: the side being adapted to.
    Target,
}

impl DomainLabel {
    pub fn value(self) -> f64 {
        match self {
            DomainLabel::Source => 0.0,
            DomainLabel::Target => 1.0,
        }
    }
}

/// Four 3×3 stride-1 convolutions over a feature map; sigmoid of the last
/// one is the per-pixel target probability.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDiscriminator {
    pub in_channels: usize,
    pub leaky_alpha: f64,
    pub params: ParamSet,
}

impl DomainDiscriminator {
    pub fn new(in_channels: usize, init_seed: u64) -> Self {
        let mut rng = seed::rng(init_seed, seed::TAG_DISC_INIT);
        let leaky_alpha = 0.2;
        let mut params = ParamSet::new();
        for (i, s) in Self::specs(in_channels).into_iter().enumerate() {
            let std = if i + 1 < DISC_LAYERS {
                nn::he_std(s.c_in * 9, leaky_alpha)
            } else {
                0.01
            };
            nn::push_conv(&mut params, &format!("disc.{i}"), s, std, 0.0, &mut rng);
        }
        Self {
            in_channels,
            leaky_alpha,
            params,
        }
    }

    pub fn from_params(in_channels: usize, params: ParamSet) -> Result<Self, CoreError> {
        nn::check_conv_params(params.tensors(), &Self::specs(in_channels), "discriminator")?;
        Ok(Self {
            in_channels,
            leaky_alpha: 0.2,
            params,
        })
    }

    fn specs(in_channels: usize) -> Vec<ConvSpec> {
        (0..DISC_LAYERS)
            .map(|i| ConvSpec {
                c_in: if i == 0 { in_channels } else { DISC_HIDDEN },
                c_out: if i + 1 == DISC_LAYERS { 1 } else { DISC_HIDDEN },
                k: 3,
                stride: 1,
                pad: 1,
            })
            .collect()
    }

    pub fn attach(&self, g: &mut Graph) -> Vec<Var> {
        self.params.attach(g)
    }

    /// `P = D(features)` as an `[H, W]` probability map.
    pub fn prob_graph(&self, g: &mut Graph, vars: &[Var], features: Var) -> Result<Var, CoreError> {
        let shape = g.shape(features).to_vec();
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(CoreError::Precondition(format!(
                "discriminator expects [{}, H, W] features, got {shape:?}",
                self.in_channels
            )));
        }
        let logits = nn::conv_stack(g, features, vars, &Self::specs(self.in_channels), self.leaky_alpha, false)?;
        let logits = g.reshape(logits, &shape[1..])?;
        Ok(g.sigmoid(logits)?)
    }

    /// Evaluate `P` on a fixed feature map.
    pub fn prob_map(&self, features: &Tensor) -> Result<Tensor, CoreError> {
        let mut g = Graph::new();
        let vars = self.attach(&mut g);
        let f = g.input(features.clone());
        let p = self.prob_graph(&mut g, &vars, f)?;
        Ok(g.eval_forward(p)?)
    }
}

/// `-Σ_{h,w} [d log P + (1-d) log(1-P)]` as a graph node.
pub fn disc_loss_graph(g: &mut Graph, p: Var, d: DomainLabel) -> Result<Var, CoreError> {
    let arg = match d {
        DomainLabel::Target => p,
        DomainLabel::Source => g.one_minus(p)?,
    };
    let logs = g.log(arg)?;
    let s = g.sum(logs)?;
    Ok(g.neg(s)?)
}

/// Numeric form of [`disc_loss_graph`] with the same clamping.
pub fn disc_loss(p: &Tensor, d: DomainLabel) -> f64 {
    let clamp = |x: f64| x.clamp(bridge_autodiff::LOG_CLAMP_MIN, bridge_autodiff::LOG_CLAMP_MAX);
    -p.data()
        .iter()
        .map(|&v| match d {
            DomainLabel::Target => clamp(v).ln(),
            DomainLabel::Source => clamp(1.0 - v).ln(),
        })
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveOptions {
    pub lambda_disc: f64,
    pub lambda_grl: f64,
    /// Route features to D through the GRL. `false` builds the control
    /// graph in which E descends on the discriminator loss.
    pub reverse_gradients: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            lambda_disc: DEFAULT_LAMBDA_DISC,
            lambda_grl: 1.0,
            reverse_gradients: true,
        }
    }
}

impl ObjectiveOptions {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.lambda_disc >= 0.0 && self.lambda_disc.is_finite()) {
            return Err(CoreError::InvalidConfig(format!("lambda_disc must be >= 0, got {}", self.lambda_disc)));
        }
        if !(self.lambda_grl > 0.0 && self.lambda_grl.is_finite()) {
            return Err(CoreError::InvalidConfig(format!("lambda_grl must be > 0, got {}", self.lambda_grl)));
        }
        Ok(())
    }

    /// The adversarial branch exists only for a positive `lambda_disc`.
    pub fn adversarial(&self) -> bool {
        self.lambda_disc > 0.0
    }
}

/// Scalar values of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveValues {
    pub total: f64,
    pub detection: f64,
    pub objectness: f64,
    pub class: f64,
    pub regression: f64,
    pub disc_labeled: f64,
    pub disc_unlabeled: f64,
}

impl ObjectiveValues {
    pub fn all_finite(&self) -> bool {
        [
            self.total,
            self.detection,
            self.objectness,
            self.class,
            self.regression,
            self.disc_labeled,
            self.disc_unlabeled,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

struct AdversarialBranch {
    disc_vars: Vec<Var>,
    unlabeled_image: Var,
    labeled: Var,
    unlabeled: Var,
}

/// `w · L_det(labeled) + λ_disc [L_disc(E(labeled), 0) + L_disc(E(unlabeled), 1)]`
/// built once and re-fed each step. With `w = 1` this is the plain min-max
/// objective; with `lambda_disc = 0` it is the detection loss alone and no
/// discriminator is attached.
pub struct ObjectiveGraph {
    graph: Graph,
    options: ObjectiveOptions,
    arch: DetectorArch,
    det_vars: DetectorVars,
    labeled_image: Var,
    targets: TargetVars,
    weight: Var,
    terms: LossTerms,
    adversarial: Option<AdversarialBranch>,
    total: Var,
}

impl ObjectiveGraph {
    pub fn new(
        model: &DetectorModel,
        disc: Option<&DomainDiscriminator>,
        options: ObjectiveOptions,
    ) -> Result<Self, CoreError> {
        options.validate()?;
        let arch = &model.arch;
        let s = arch.image_size;
        let mut g = Graph::new();
        let det_vars = model.attach(&mut g);
        let labeled_image = g.input(Tensor::zeros(&[CHANNELS, s, s]));
        let feat_l = detector::encoder_graph(&mut g, arch, &det_vars, labeled_image)?;
        let head = detector::head_graph(&mut g, arch, &det_vars, feat_l)?;
        let targets = TargetVars::new(&mut g, arch.grid());
        let terms = detector::detection_loss_graph(&mut g, head, arch.grid(), &targets)?;
        let weight = g.input(Tensor::scalar(1.0));
        let weighted = g.mul(weight, terms.total)?;

        let (adversarial, total) = if options.adversarial() {
            let disc = disc.ok_or_else(|| {
                CoreError::Precondition("lambda_disc > 0 needs a domain discriminator".into())
            })?;
            if disc.in_channels != arch.feature_channels() {
                return Err(CoreError::Precondition(format!(
                    "discriminator takes {} channels, encoder yields {}",
                    disc.in_channels,
                    arch.feature_channels()
                )));
            }
            let disc_vars = disc.attach(&mut g);
            let unlabeled_image = g.input(Tensor::zeros(&[CHANNELS, s, s]));
            let feat_u = detector::encoder_graph(&mut g, arch, &det_vars, unlabeled_image)?;
            let branch = |g: &mut Graph, f: Var, d: DomainLabel| -> Result<Var, CoreError> {
                let f = if options.reverse_gradients {
                    g.grl(f, options.lambda_grl)?
                } else {
                    f
                };
                let p = disc.prob_graph(g, &disc_vars, f)?;
                disc_loss_graph(g, p, d)
            };
            let labeled = branch(&mut g, feat_l, DomainLabel::Source)?;
            let unlabeled = branch(&mut g, feat_u, DomainLabel::Target)?;
            let pair = g.add(labeled, unlabeled)?;
            let scaled = g.scale(pair, options.lambda_disc)?;
            let total = g.add(weighted, scaled)?;
            (
                Some(AdversarialBranch {
                    disc_vars,
                    unlabeled_image,
                    labeled,
                    unlabeled,
                }),
                total,
            )
        } else {
            (None, weighted)
        };

        Ok(Self {
            graph: g,
            options,
            arch: arch.clone(),
            det_vars,
            labeled_image,
            targets,
            weight,
            terms,
            adversarial,
            total,
        })
    }

    pub fn options(&self) -> ObjectiveOptions {
        self.options
    }

    pub fn is_adversarial(&self) -> bool {
        self.adversarial.is_some()
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn total(&self) -> Var {
        self.total
    }

    pub fn detector_vars(&self) -> &DetectorVars {
        &self.det_vars
    }

    pub fn disc_vars(&self) -> Option<&[Var]> {
        self.adversarial.as_ref().map(|a| a.disc_vars.as_slice())
    }

    /// Copy current parameter values into the graph leaves.
    pub fn sync(&mut self, model: &DetectorModel, disc: Option<&DomainDiscriminator>) -> Result<(), CoreError> {
        model.params.sync_into(&mut self.graph, &self.det_vars.all())?;
        if let (Some(a), Some(d)) = (&self.adversarial, disc) {
            d.params.sync_into(&mut self.graph, &a.disc_vars)?;
        }
        Ok(())
    }

    fn load_image(&mut self, leaf: Var, scene: &Scene) -> Result<(), CoreError> {
        let img = &scene.image;
        let s = self.arch.image_size;
        if img.height != s || img.width != s {
            return Err(CoreError::Precondition(format!(
                "scene {} is {}x{}, expected {s}x{s}",
                scene.content_seed, img.height, img.width
            )));
        }
        self.graph.leaf_data_mut(leaf)?.copy_from_slice(&img.data);
        Ok(())
    }

    /// Feed one labeled scene, one unlabeled scene (ignored without the
    /// adversarial branch) and the detection-loss weight.
    pub fn load(&mut self, labeled: &Scene, unlabeled: Option<&Scene>, weight: f64) -> Result<(), CoreError> {
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(CoreError::Precondition(format!("weight must be finite and >= 0, got {weight}")));
        }
        let targets = LossTargets::for_scene(labeled, &self.arch)?;
        self.targets.load(&mut self.graph, &targets)?;
        self.load_image(self.labeled_image, labeled)?;
        if let Some(leaf) = self.adversarial.as_ref().map(|a| a.unlabeled_image) {
            let u = unlabeled.ok_or_else(|| CoreError::Precondition("adversarial objective needs an unlabeled scene".into()))?;
            self.load_image(leaf, u)?;
        }
        self.graph.set_value(self.weight, &Tensor::scalar(weight))?;
        Ok(())
    }

    pub fn forward(&mut self) -> Result<ObjectiveValues, CoreError> {
        let total = self.graph.eval_forward(self.total)?.item();
        let v = |g: &Graph, x: Var| g.value(x).item();
        let g = &self.graph;
        let (disc_labeled, disc_unlabeled) = match &self.adversarial {
            Some(a) => (v(g, a.labeled), v(g, a.unlabeled)),
            None => (0.0, 0.0),
        };
        Ok(ObjectiveValues {
            total,
            detection: v(g, self.terms.total),
            objectness: v(g, self.terms.objectness),
            class: v(g, self.terms.class),
            regression: v(g, self.terms.regression),
            disc_labeled,
            disc_unlabeled,
        })
    }

    /// One backward pass from the total; call after [`Self::forward`].
    pub fn backward(&mut self) -> Result<(), CoreError> {
        self.graph.backprop(self.total)?;
        Ok(())
    }

    pub fn detector_grads(&self) -> Vec<Tensor> {
        self.det_vars.all().iter().map(|v| self.graph.grad(*v)).collect()
    }

    pub fn disc_grads(&self) -> Option<Vec<Tensor>> {
        self.adversarial
            .as_ref()
            .map(|a| a.disc_vars.iter().map(|v| self.graph.grad(*v)).collect())
    }
}

/// Unweighted objective value for one scene pair.
pub fn adapt_objective(
    model: &DetectorModel,
    disc: &DomainDiscriminator,
    labeled: &Scene,
    unlabeled: &Scene,
    lambda_disc: f64,
) -> Result<ObjectiveValues, CoreError> {
    let opts = ObjectiveOptions {
        lambda_disc,
        ..ObjectiveOptions::default()
    };
    let mut og = ObjectiveGraph::new(model, Some(disc), opts)?;
    og.load(labeled, Some(unlabeled), 1.0)?;
    og.forward()
}

/// Objective with the intermediate-domain scene's importance weight on the
/// detection term.
pub fn weighted_objective(
    model: &DetectorModel,
    disc: &DomainDiscriminator,
    scene_f: &Scene,
    scene_t: &Scene,
    lambda_disc: f64,
) -> Result<ObjectiveValues, CoreError> {
    let w = scene_weight(scene_f)?;
    let opts = ObjectiveOptions {
        lambda_disc,
        ..ObjectiveOptions::default()
    };
    let mut og = ObjectiveGraph::new(model, Some(disc), opts)?;
    og.load(scene_f, Some(scene_t), w)?;
    og.forward()
}

/// The stored weight of an intermediate-domain scene, or 1 for any other domain.
pub fn scene_weight(scene: &Scene) -> Result<f64, CoreError> {
    match (scene.domain, scene.weight) {
        (Domain::Synthetic, Some(w)) => Ok(w),
        (Domain::Synthetic, None) => Err(CoreError::Precondition(format!(
            "intermediate-domain scene {} has no importance weight",
            scene.content_seed
        ))),
        _ => Ok(1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_half_is_16_ln2() {
        let p = Tensor::filled(&[4, 4], 0.5);
        let want = 16.0 * std::f64::consts::LN_2;
        for d in [DomainLabel::Source, DomainLabel::Target] {
            assert!((disc_loss(&p, d) - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn hand_summed_2x2() {
        let p = Tensor::new(&[2, 2], vec![0.9, 0.1, 0.5, 0.5]);
        let want = -(0.9f64.ln() + 0.1f64.ln() + 2.0 * 0.5f64.ln());
        assert!((disc_loss(&p, DomainLabel::Target) - want).abs() < 1e-12);
        assert!((want - 3.794240).abs() < 1e-6);
    }

    #[test]
    fn graph_matches_numeric() {
        let p = Tensor::new(&[2, 2], vec![0.9, 0.1, 0.3, 0.7]);
        for d in [DomainLabel::Source, DomainLabel::Target] {
            let mut g = Graph::new();
            let x = g.input(p.clone());
            let l = disc_loss_graph(&mut g, x, d).unwrap();
            assert_eq!(g.eval_forward(l).unwrap().item(), disc_loss(&p, d));
        }
    }

    #[test]
    fn confident_correct_tends_to_zero() {
        let mut last = f64::INFINITY;
        for eps in [1e-2, 1e-4, 1e-8] {
            let l = disc_loss(&Tensor::filled(&[4, 4], 1.0 - eps), DomainLabel::Target);
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn prob_map_shape_and_range() {
        let d = DomainDiscriminator::new(64, 3);
        let f = Tensor::filled(&[64, 4, 4], 0.3);
        let p = d.prob_map(&f).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert!(p.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert!(d.prob_map(&Tensor::zeros(&[32, 4, 4])).is_err());
    }

    #[test]
    fn weight_rule() {
        let s = crate::synth::gen_scene(4, &crate::synth::AppearanceParams::IDENTITY, Domain::Source).unwrap();
        assert_eq!(scene_weight(&s).unwrap(), 1.0);
        let mut f = s.clone();
        f.domain = Domain::Synthetic;
        assert!(scene_weight(&f).is_err());
        f.weight = Some(0.73);
        assert_eq!(scene_weight(&f).unwrap(), 0.73);
    }

    #[test]
    fn negative_lambda_rejected() {
        let bad = ObjectiveOptions {
            lambda_disc: -0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ObjectiveOptions {
            lambda_grl: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
