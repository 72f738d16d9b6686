use bridge_autodiff::Tensor;
use bridge_core::align::{
    adapt_objective, disc_loss, weighted_objective, DomainDiscriminator, DomainLabel, ObjectiveGraph,
    ObjectiveOptions,
};
use bridge_core::detector::{detection_loss, DetectorArch, DetectorModel};
use bridge_core::synth::{gen_scene, AppearanceParams, Domain, Scene};
use proptest::prelude::*;

struct Setup {
    model: DetectorModel,
    disc: DomainDiscriminator,
    labeled: Scene,
    unlabeled: Scene,
}

fn setup(seed: u64) -> Setup {
    let fog = AppearanceParams {
        haze: 0.4,
        gain: 0.9,
        noise: 0.05,
        shift: [0.04, 0.0, -0.04],
    };
    let model = DetectorModel::new(DetectorArch::default(), seed).unwrap();
    Setup {
        disc: DomainDiscriminator::new(model.arch.feature_channels(), seed + 100),
        labeled: gen_scene(seed, &AppearanceParams::IDENTITY, Domain::Source).unwrap(),
        unlabeled: gen_scene(seed + 1, &fog, Domain::Target).unwrap().unlabeled(),
        model,
    }
}

struct Grads {
    total: f64,
    detector: Vec<Tensor>,
    disc: Vec<Tensor>,
}

fn grads(s: &Setup, weight: f64, opts: ObjectiveOptions) -> Grads {
    let mut og = ObjectiveGraph::new(&s.model, Some(&s.disc), opts).unwrap();
    og.load(&s.labeled, Some(&s.unlabeled), weight).unwrap();
    let total = og.forward().unwrap().total;
    og.backward().unwrap();
    Grads {
        total,
        detector: og.detector_grads(),
        disc: og.disc_grads().unwrap_or_default(),
    }
}

fn opts(lambda_disc: f64, reverse: bool) -> ObjectiveOptions {
    ObjectiveOptions {
        lambda_disc,
        lambda_grl: 1.0,
        reverse_gradients: reverse,
    }
}

#[test]
fn zero_lambda_is_the_detection_loss() {
    for seed in 0..3 {
        let s = setup(seed);
        let v = adapt_objective(&s.model, &s.disc, &s.labeled, &s.unlabeled, 0.0).unwrap();
        let det = detection_loss(&s.model, &s.labeled).unwrap().value().unwrap();
        assert_eq!(v.total, det);
        assert_eq!((v.disc_labeled, v.disc_unlabeled), (0.0, 0.0));
    }
}

#[test]
fn unit_weight_reduces_to_the_unweighted_objective() {
    let s = setup(1);
    let mut f = s.labeled.clone();
    f.domain = Domain::Synthetic;
    f.weight = Some(1.0);
    let a = adapt_objective(&s.model, &s.disc, &f, &s.unlabeled, 0.1).unwrap();
    let b = weighted_objective(&s.model, &s.disc, &f, &s.unlabeled, 0.1).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.total.to_bits(), b.total.to_bits());
}

#[test]
fn weighted_objective_composes_its_terms() {
    let s = setup(2);
    let mut f = s.labeled.clone();
    f.domain = Domain::Synthetic;
    f.weight = Some(0.5);
    let v = weighted_objective(&s.model, &s.disc, &f, &s.unlabeled, 0.1).unwrap();
    let want = 0.5 * v.detection + 0.1 * (v.disc_labeled + v.disc_unlabeled);
    assert!((v.total - want).abs() <= 1e-12 * want.abs());
    let plain = detection_loss(&s.model, &s.labeled).unwrap().value().unwrap();
    assert_eq!(v.detection, plain);
}

#[test]
fn missing_weight_and_unlabeled_scenes_are_rejected() {
    let s = setup(3);
    let mut f = s.labeled.clone();
    f.domain = Domain::Synthetic;
    assert!(weighted_objective(&s.model, &s.disc, &f, &s.unlabeled, 0.1).is_err());
    assert!(adapt_objective(&s.model, &s.disc, &s.unlabeled, &s.unlabeled, 0.1).is_err());
}

#[test]
fn head_gradients_scale_linearly_with_weight() {
    let s = setup(4);
    let heads = s.model.encoder_tensors();
    for w in [0.3, 0.55, 1.7] {
        let a = grads(&s, w, opts(0.1, true));
        let b = grads(&s, 2.0 * w, opts(0.1, true));
        for (x, y) in a.detector[heads..].iter().zip(&b.detector[heads..]) {
            let doubled: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
            assert_eq!(doubled, y.data());
        }
    }
}

#[test]
fn weight_leaves_discriminator_gradients_untouched() {
    let s = setup(5);
    let a = grads(&s, 0.3, opts(0.1, true));
    let b = grads(&s, 0.9, opts(0.1, true));
    assert!(!a.disc.is_empty());
    assert_eq!(a.disc, b.disc);
}

#[test]
fn reversal_negates_only_the_encoder_share() {
    for seed in 6..9 {
        let s = setup(seed);
        let det = grads(&s, 1.0, opts(0.0, true));
        let rev = grads(&s, 1.0, opts(0.1, true));
        let ctl = grads(&s, 1.0, opts(0.1, false));
        assert_eq!(rev.total, ctl.total);
        assert_eq!(rev.disc, ctl.disc);
        let enc = s.model.encoder_tensors();
        let mut moved = 0;
        for i in 0..rev.detector.len() {
            let (r, c, d) = (rev.detector[i].data(), ctl.detector[i].data(), det.detector[i].data());
            for k in 0..r.len() {
                let adv_rev = r[k] - d[k];
                let adv_ctl = c[k] - d[k];
                let scale = adv_rev.abs().max(adv_ctl.abs()).max(1e-12);
                if i < enc {
                    assert!((adv_rev + adv_ctl).abs() <= 1e-9 * scale + 1e-15, "tensor {i} elem {k}: {adv_rev} vs {adv_ctl}");
                    moved += (adv_ctl.abs() > 1e-12) as usize;
                } else {
                    assert_eq!(r[k], d[k]);
                    assert_eq!(c[k], d[k]);
                }
            }
        }
        assert!(moved > 0);
    }
}

#[test]
fn discriminator_maps_match_the_feature_grid() {
    let s = setup(0);
    let f = bridge_core::detector::encode(&s.model, &s.labeled.image).unwrap();
    let p = s.disc.prob_map(&f).unwrap();
    assert_eq!(p.shape(), &[4, 4]);
    assert!(p.data().iter().all(|v| *v > 0.0 && *v < 1.0));
}

proptest! {
    #[test]
    fn constant_map_is_h_times_w_pointwise_losses(p in 0.001..0.999f64, h in 1usize..6, w in 1usize..6) {
        let map = Tensor::filled(&[h, w], p);
        let n = (h * w) as f64;
        for (d, bce) in [(DomainLabel::Target, -p.ln()), (DomainLabel::Source, -(1.0 - p).ln())] {
            let got = disc_loss(&map, d);
            prop_assert!((got - n * bce).abs() <= 1e-14 * n * bce.max(1e-3), "{got} vs {}", n * bce);
        }
    }
}
