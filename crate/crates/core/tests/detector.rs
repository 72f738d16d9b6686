use bridge_autodiff::{GradCheck, Graph, Tensor};
use bridge_core::detector::{
    decode_head, detection_loss, detection_loss_graph, encode, encoder_graph, head_from_boxes, DetectorArch,
    DetectorModel, InferenceGraph, LossTargets, TargetVars, HEAD_OUTPUTS,
};
use bridge_core::metrics::iou;
use bridge_core::synth::{gen_scene, AppearanceParams, BBox, Domain, Image, Scene, CHANNELS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-term loss computed directly from a head tensor.
fn reference_terms(head: &[f64], boxes: &[BBox], grid: usize, cell: f64) -> [f64; 3] {
    let n = grid * grid;
    let mut sorted = boxes.to_vec();
    sorted.sort_by(|a, b| {
        (a.class, a.x_min, a.y_min, a.x_max, a.y_max)
            .partial_cmp(&(b.class, b.x_min, b.y_min, b.x_max, b.y_max))
            .unwrap()
    });
    let mut owner: Vec<Option<BBox>> = vec![None; n];
    for b in &sorted {
        let cx = 0.5 * (b.x_min + b.x_max);
        let cy = 0.5 * (b.y_min + b.y_max);
        let col = ((cx / cell) as usize).min(grid - 1);
        let row = ((cy / cell) as usize).min(grid - 1);
        owner[row * grid + col].get_or_insert(*b);
    }
    let softplus = |x: f64| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    let huber = |x: f64| if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 };
    let (mut obj, mut cls, mut reg, mut pos) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..n {
        let o = head[c];
        match owner[c] {
            None => obj += softplus(o),
            Some(b) => {
                obj += softplus(-o);
                pos += 1;
                let l0 = head[n + c];
                let l1 = head[2 * n + c];
                let m = l0.max(l1);
                let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
                cls += lse - if b.class == 0 { l0 } else { l1 };
                let (row, col) = (c / grid, c % grid);
                let (ax, ay) = ((col as f64 + 0.5) * cell, (row as f64 + 0.5) * cell);
                let t = [
                    (0.5 * (b.x_min + b.x_max) - ax) / cell,
                    (0.5 * (b.y_min + b.y_max) - ay) / cell,
                    ((b.x_max - b.x_min) / cell).ln(),
                    ((b.y_max - b.y_min) / cell).ln(),
                ];
                for (k, tk) in t.iter().enumerate() {
                    reg += huber(head[(3 + k) * n + c] - tk);
                }
            }
        }
    }
    let p = pos.max(1) as f64;
    [obj / n as f64, if pos > 0 { cls / p } else { 0.0 }, if pos > 0 { reg / p } else { 0.0 }]
}

/// Loss graph over a free head tensor.
fn loss_on_head(head: &Tensor, boxes: &[BBox], arch: &DetectorArch) -> [f64; 4] {
    let mut g = Graph::new();
    let h = g.input(head.clone());
    let tv = TargetVars::new(&mut g, arch.grid());
    let scene = Scene {
        image: Image::filled(arch.image_size, arch.image_size, 0.0),
        boxes: boxes.to_vec(),
        domain: Domain::Source,
        content_seed: 0,
        quality: None,
        weight: None,
    };
    tv.load(&mut g, &LossTargets::for_scene(&scene, arch).unwrap()).unwrap();
    let terms = detection_loss_graph(&mut g, h, arch.grid(), &tv).unwrap();
    let total = g.eval_forward(terms.total).unwrap().item();
    let v = |x| g.value(x).item();
    [v(terms.objectness), v(terms.class), v(terms.regression), total]
}

fn tiny_arch() -> DetectorArch {
    DetectorArch {
        image_size: 16,
        encoder_channels: vec![CHANNELS, 4, 4],
        head_hidden: 4,
        leaky_alpha: 0.2,
    }
}

fn random_scene(rng: &mut ChaCha8Rng, size: usize) -> Scene {
    let mut image = Image::filled(size, size, 0.0);
    image.data.iter_mut().for_each(|v| *v = rng.gen());
    let n = rng.gen_range(1..=3);
    let s = size as f64;
    let boxes = (0..n)
        .map(|_| {
            let w = rng.gen_range(0.2 * s..0.6 * s);
            let h = rng.gen_range(0.2 * s..0.6 * s);
            let x = rng.gen_range(0.0..s - w);
            let y = rng.gen_range(0.0..s - h);
            BBox::new(x, y, x + w, y + h, rng.gen_range(0..2))
        })
        .collect();
    Scene {
        image,
        boxes,
        domain: Domain::Source,
        content_seed: 0,
        quality: None,
        weight: None,
    }
}

#[test]
fn loss_is_the_sum_of_reference_terms() {
    let arch = DetectorArch::default();
    for seed in 0..20 {
        let model = DetectorModel::new(arch.clone(), seed).unwrap();
        let scene = gen_scene(seed, &AppearanceParams::IDENTITY, Domain::Source).unwrap();
        let head = InferenceGraph::new(&model).unwrap().head(&scene.image).unwrap();
        let [obj, cls, reg, total] = loss_on_head(&head, &scene.boxes, &arch);
        let want = reference_terms(head.data(), &scene.boxes, arch.grid(), arch.cell());
        for (got, want) in [obj, cls, reg].iter().zip(want) {
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
        }
        assert!((total - (obj + cls + reg)).abs() <= 1e-15 * total.abs().max(1.0));
        let mut dl = detection_loss(&model, &scene).unwrap();
        assert_eq!(dl.value().unwrap(), total);
    }
}

#[test]
fn perfect_head_has_near_zero_loss() {
    let arch = DetectorArch::default();
    let scene = gen_scene(4, &AppearanceParams::IDENTITY, Domain::Source).unwrap();
    let head = head_from_boxes(&scene.boxes, &arch, 12.0);
    assert!(loss_on_head(&head, &scene.boxes, &arch)[3] < 0.01);
}

#[test]
fn half_offset_error_costs_an_eighth() {
    let arch = DetectorArch::default();
    let b = BBox::new(32.0, 32.0, 48.0, 48.0, 0);
    let mut head = head_from_boxes(&[b], &arch, 12.0);
    let n = arch.grid() * arch.grid();
    let cell = 2 * arch.grid() + 2;
    head.data_mut()[3 * n + cell] += 0.5;
    let [_, _, reg, _] = loss_on_head(&head, &[b], &arch);
    assert!((reg - 0.125).abs() < 1e-12, "{reg}");
    head.data_mut()[4 * n + cell] -= 0.5;
    let [_, _, reg, _] = loss_on_head(&head, &[b], &arch);
    assert!((reg - 0.25).abs() < 1e-12, "{reg}");
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let arch = tiny_arch();
    for seed in 0..25 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = DetectorModel::new(arch.clone(), seed).unwrap();
        let scene = random_scene(&mut rng, arch.image_size);
        let mut dl = detection_loss(&model, &scene).unwrap();
        let report = GradCheck::default().run(&mut dl.graph, dl.terms.total, &dl.vars.all());
        assert!(report.passed, "seed {seed}: {report:?}");
    }
}

#[test]
fn encoder_gradient_of_default_model_matches_finite_differences() {
    let model = DetectorModel::new(DetectorArch::default(), 1).unwrap();
    let scene = gen_scene(9, &AppearanceParams::IDENTITY, Domain::Source).unwrap();
    let mut g = Graph::new();
    let vars = model.attach(&mut g);
    let img = g.input(scene.image.to_tensor());
    let feat = encoder_graph(&mut g, &model.arch, &vars, img).unwrap();
    let root = g.sum(feat).unwrap();
    let check = GradCheck {
        max_per_param: Some(64),
        ..GradCheck::default()
    };
    let report = check.run(&mut g, root, &vars.encoder[..2]);
    assert!(report.passed, "{report:?}");
}

#[test]
fn encoder_output_contract() {
    let model = DetectorModel::new(DetectorArch::default(), 0).unwrap();
    let zero = Image::filled(64, 64, 0.0);
    let f = encode(&model, &zero).unwrap();
    assert_eq!(f.shape(), &[64, 4, 4]);
    assert!(f.data().iter().all(|v| v.is_finite()));
    assert_eq!(f, encode(&model, &zero).unwrap());
    assert!(encode(&model, &Image::filled(32, 32, 0.0)).is_err());
    let head = InferenceGraph::new(&model).unwrap().head(&zero).unwrap();
    assert_eq!(head.shape(), &[HEAD_OUTPUTS, 4, 4]);
}

fn boxes_in_distinct_cells() -> impl Strategy<Value = Vec<BBox>> {
    prop::sample::subsequence((0..16usize).collect::<Vec<_>>(), 1..=4).prop_flat_map(|cells| {
        let n = cells.len();
        (
            Just(cells),
            prop::collection::vec((0.05..0.95f64, 0.05..0.95f64, 8.0..24.0f64, 8.0..24.0f64, 0usize..2), n),
        )
            .prop_map(|(cells, geo)| {
                cells
                    .into_iter()
                    .zip(geo)
                    .map(|(c, (fx, fy, w, h, class))| {
                        let cx = ((c % 4) as f64 + fx) * 16.0;
                        let cy = ((c / 4) as f64 + fy) * 16.0;
                        let w = w.min(2.0 * cx.min(64.0 - cx));
                        let h = h.min(2.0 * cy.min(64.0 - cy));
                        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h, class)
                    })
                    .collect()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_ignores_box_order(seed in 0u64..1000, perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let model = DetectorModel::new(DetectorArch::default(), seed).unwrap();
        let scene = gen_scene(seed, &AppearanceParams::IDENTITY, Domain::Source).unwrap();
        let mut shuffled = scene.clone();
        shuffled.boxes.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let a = detection_loss(&model, &scene).unwrap().value().unwrap();
        let b = detection_loss(&model, &shuffled).unwrap().value().unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn shared_cells_ignore_box_order(boxes in boxes_in_distinct_cells(), perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        // a second box centred in the first box's cell
        let mut all = boxes.clone();
        let b = boxes[0];
        all.push(BBox::new(b.x_min - 1.0, b.y_min - 2.0, b.x_max + 1.0, b.y_max + 2.0, 1 - b.class));
        let arch = DetectorArch::default();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        let head = Tensor::new(&[HEAD_OUTPUTS, 4, 4], (0..HEAD_OUTPUTS * 16).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let before = loss_on_head(&head, &all, &arch)[3];
        all.shuffle(&mut rng);
        prop_assert_eq!(before, loss_on_head(&head, &all, &arch)[3]);
    }

    #[test]
    fn decoding_constructed_head_recovers_boxes(boxes in boxes_in_distinct_cells()) {
        let arch = DetectorArch::default();
        let head = head_from_boxes(&boxes, &arch, 10.0);
        let dets = decode_head(&head, &arch, 0.5, 0.99);
        prop_assert_eq!(dets.len(), boxes.len());
        for b in &boxes {
            let best = dets
                .iter()
                .filter(|d| d.bbox.class == b.class)
                .map(|d| iou(&d.bbox, b))
                .fold(0.0, f64::max);
            prop_assert!(best >= 0.99, "box {b:?} best IoU {best}");
        }
    }
}
