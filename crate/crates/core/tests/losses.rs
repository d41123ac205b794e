use d2etr::attention::Linear;
use d2etr::autodiff::{check_tape_gradients, Graph, ParamStore};
use d2etr::backbone::FeatureMap;
use d2etr::decoder::LayerOutput;
use d2etr::losses::{
    bce, focal_loss, giou, giou_rows, hungarian_match, iou, loss_aware, loss_cls_bbox, loss_token, matching_cost,
    token_targets, total_loss, BBox, CostWeights, LossTerms, LossWeights, MatchAssignment, Targets, FOCAL_EPS,
};
use d2etr::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- boxes

#[test]
fn iou_examples() {
    let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
    let b = BBox::from_corners(1.0, 1.0, 3.0, 3.0);
    // intersection 1, union 4 + 4 − 1
    assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
    // hull 9: GIoU = 1/7 − (9 − 7)/9
    assert!((giou(&a, &b) - (1.0 / 7.0 - 2.0 / 9.0)).abs() < 1e-15);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(giou(&a, &a), 1.0);
    let far = BBox::from_corners(5.0, 5.0, 6.0, 6.0);
    let unit = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
    assert_eq!(iou(&unit, &far), 0.0);
    // hull 36, union 2
    assert!((giou(&unit, &far) - (-34.0 / 36.0)).abs() < 1e-15);
    assert_eq!(iou(&BBox::new(0.5, 0.5, 0.0, 0.3), &unit), 0.0);
}

proptest! {
    #[test]
    fn iou_bounds(ax in 0.0f64..1.0, ay in 0.0f64..1.0, aw in 0.01f64..1.0, ah in 0.01f64..1.0,
                  bx in 0.0f64..1.0, by in 0.0f64..1.0, bw in 0.01f64..1.0, bh in 0.01f64..1.0) {
        let (a, b) = (BBox::new(ax, ay, aw, ah), BBox::new(bx, by, bw, bh));
        let i = iou(&a, &b);
        let g = giou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&i));
        prop_assert!(g > -1.0 && g <= i + 1e-15);
        prop_assert!((i - iou(&b, &a)).abs() < 1e-15);
    }
}

// ---------------------------------------------------------------- matching

/// Exhaustive minimum over all injections of `b` targets into `n` queries.
fn brute_force(cost: &Tensor) -> f64 {
    let (n, b) = (cost.shape()[0], cost.shape()[1]);
    fn go(t: usize, n: usize, b: usize, used: &mut Vec<bool>, acc: f64, cost: &Tensor, best: &mut f64) {
        if t == b {
            *best = best.min(acc);
            return;
        }
        for q in 0..n {
            if !used[q] {
                used[q] = true;
                go(t + 1, n, b, used, acc + cost.at(&[q, t]), cost, best);
                used[q] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, n, b, &mut vec![false; n], 0.0, cost, &mut best);
    best
}

fn check_assignment(m: &MatchAssignment, n: usize, b: usize) {
    assert_eq!(m.pairs.len(), b);
    let mut qs: Vec<_> = m.pairs.iter().map(|p| p.0).collect();
    let mut ts: Vec<_> = m.pairs.iter().map(|p| p.1).collect();
    qs.sort();
    qs.dedup();
    ts.sort();
    ts.dedup();
    assert_eq!(qs.len(), b);
    assert_eq!(ts, (0..b).collect::<Vec<_>>());
    assert!(qs.iter().all(|&q| q < n));
}

#[test]
fn hungarian_small_examples() {
    let m = hungarian_match(&Tensor::new(&[1, 1], vec![3.0]).unwrap()).unwrap();
    assert_eq!(m.pairs, vec![(0, 0)]);
    let cost = Tensor::new(&[2, 2], vec![1.0, 2.0, 2.0, 1.0]).unwrap();
    let m = hungarian_match(&cost).unwrap();
    assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
    assert_eq!(m.total_cost(&cost), 2.0);
    assert_eq!(m.target_of(), vec![Some(0), Some(1)]);
    assert!(hungarian_match(&Tensor::zeros(&[2, 3])).is_err());
    assert!(hungarian_match(&Tensor::new(&[1, 1], vec![f64::NAN]).unwrap()).is_err());
}

#[test]
fn hungarian_matches_exhaustive_search() {
    let mut r = rng(0);
    for _ in 0..100 {
        let b = r.gen_range(1..=5);
        let n = r.gen_range(b..=7);
        let cost = Tensor::uniform(&[n, b], -1.0, 3.0, &mut r);
        let m = hungarian_match(&cost).unwrap();
        check_assignment(&m, n, b);
        assert!((m.total_cost(&cost) - brute_force(&cost)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Every query row is matched when `N = B`, so shifting a row shifts all
    /// assignments equally; for `N > B` the same holds for target columns.
    #[test]
    fn constant_shift_leaves_assignment_unchanged(seed in 0u64..1000, line in 0usize..7, shift in -5.0f64..5.0) {
        let mut r = rng(seed);
        let b = r.gen_range(1..=5);
        let n = r.gen_range(b..=7);
        let square = Tensor::uniform(&[b, b], 0.0, 1.0, &mut r);
        let mut shifted = square.clone();
        let row = line % b;
        for t in 0..b {
            shifted.set(&[row, t], square.at(&[row, t]) + shift);
        }
        prop_assert_eq!(hungarian_match(&square).unwrap().pairs, hungarian_match(&shifted).unwrap().pairs);

        let tall = Tensor::uniform(&[n, b], 0.0, 1.0, &mut r);
        let mut shifted = tall.clone();
        let col = line % b;
        for q in 0..n {
            shifted.set(&[q, col], tall.at(&[q, col]) + shift);
        }
        prop_assert_eq!(hungarian_match(&tall).unwrap().pairs, hungarian_match(&shifted).unwrap().pairs);
    }
}

#[test]
fn matching_cost_by_hand() {
    let probs = Tensor::new(&[2, 2], vec![0.9, 0.2, 0.3, 0.6]).unwrap();
    let boxes = [BBox::new(0.5, 0.5, 0.2, 0.2), BBox::new(0.3, 0.3, 0.2, 0.4)];
    let targets = [BBox::new(0.5, 0.5, 0.2, 0.2), BBox::new(0.3, 0.4, 0.2, 0.2)];
    let classes = [0, 1];
    let cost = matching_cost(&probs, &boxes, &targets, &classes, CostWeights::default()).unwrap();
    for q in 0..2 {
        for t in 0..2 {
            let l1: f64 = boxes[q].as_array().iter().zip(targets[t].as_array()).map(|(a, b)| (a - b).abs()).sum();
            let want = -2.0 * probs.at(&[q, classes[t]]) + 5.0 * l1 + 2.0 * (1.0 - giou(&boxes[q], &targets[t]));
            assert!((cost.at(&[q, t]) - want).abs() < 1e-14);
        }
    }
    // perfect prediction is the strict minimum of its column
    assert!(cost.at(&[0, 0]) < cost.at(&[1, 0]));
    assert_eq!(cost.at(&[0, 0]), -1.8);

    // without class and GIoU weight the ordering is pure L1
    let l1_only = CostWeights { class: 0.0, l1: 1.0, giou: 0.0 };
    let cost = matching_cost(&probs, &boxes, &targets, &classes, l1_only).unwrap();
    assert!((cost.at(&[1, 1]) - 0.3).abs() < 1e-15);
    assert!(matching_cost(&probs, &boxes, &targets, &[0, 2], l1_only).is_err());
}

// ---------------------------------------------------------------- focal and BCE

#[test]
fn focal_examples() {
    for (p, t) in [(0.3, 1.0), (0.3, 0.0), (0.7, 0.4)] {
        let want = -(t * f64::ln(p) + (1.0 - t) * f64::ln(1.0 - p));
        assert!((focal_loss(p, t, 0.0, 1.0) - want).abs() < 1e-15);
        assert!((bce(p, t) - want).abs() < 1e-15);
    }
    assert!(focal_loss(1.0, 1.0, 2.0, 0.25) < 1e-12);
    let want = 0.25 * 0.4f64.powi(2) * -f64::ln(0.6);
    assert!((focal_loss(0.6, 1.0, 2.0, 0.25) - want).abs() < 1e-15);
    assert!((want - 0.020433).abs() < 1e-6);
    assert!(focal_loss(0.0, 1.0, 2.0, 0.25).is_finite());
}

/// The tape's fused focal sum agrees with the scalar definition.
#[test]
fn tape_focal_matches_scalar() {
    let mut r = rng(3);
    let z = Tensor::randn(&[4, 3], 2.0, &mut r);
    let t = Tensor::uniform(&[4, 3], 0.0, 1.0, &mut r);
    let mut g = d2etr::autodiff::Tape::new();
    let zv = g.constant(z.clone()).unwrap();
    let f = g.sigmoid_focal_sum(zv, &t, 2.0, 0.25, FOCAL_EPS).unwrap();
    let want: f64 = z.data().iter().zip(t.data()).map(|(&z, &t)| focal_loss(1.0 / (1.0 + (-z).exp()), t, 2.0, 0.25)).sum();
    assert!((g.value(f).item() - want).abs() < 1e-12);
}

// ---------------------------------------------------------------- per-layer terms

fn layer(g: &mut Graph, logits: Tensor, boxes: Tensor, iou: Tensor, ctr: Option<Tensor>) -> LayerOutput {
    let hidden = g.constant(Tensor::zeros(&[logits.shape()[0], 1])).unwrap();
    LayerOutput {
        hidden,
        logits: g.variable(logits).unwrap(),
        boxes: g.variable(boxes).unwrap(),
        iou: g.variable(iou).unwrap(),
        ctr: ctr.map(|c| g.variable(c).unwrap()),
    }
}

#[test]
fn empty_targets_are_background_only() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let l = layer(&mut g, Tensor::full(&[3, 2], -1.0), Tensor::full(&[3, 4], 0.5), Tensor::zeros(&[3, 1]), None);
    let targets = Targets { boxes: vec![], classes: vec![], masks: None };
    let m = MatchAssignment { pairs: vec![], num_queries: 3 };
    let (cls, bbox) = loss_cls_bbox(&mut g, &l, &targets, &m, &LossWeights::default()).unwrap();
    let p = 1.0 / (1.0 + 1f64.exp());
    assert!((g.value(cls).item() - 6.0 * focal_loss(p, 0.0, 2.0, 0.25)).abs() < 1e-14);
    assert_eq!(g.value(bbox).item(), 0.0);
    let a = loss_aware(&mut g, &l, &targets, &m, None).unwrap();
    assert_eq!(g.value(a).item(), 0.0);
}

#[test]
fn single_pair_by_hand() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let pred = BBox::new(0.4, 0.5, 0.2, 0.3);
    let tgt = BBox::new(0.45, 0.5, 0.3, 0.2);
    let l = layer(
        &mut g,
        Tensor::new(&[1, 2], vec![0.3, -0.2]).unwrap(),
        Tensor::new(&[1, 4], pred.as_array().to_vec()).unwrap(),
        Tensor::zeros(&[1, 1]),
        None,
    );
    let targets = Targets { boxes: vec![tgt], classes: vec![1], masks: None };
    let m = MatchAssignment { pairs: vec![(0, 0)], num_queries: 1 };
    let (cls, bbox) = loss_cls_bbox(&mut g, &l, &targets, &m, &LossWeights::default()).unwrap();
    let s = |z: f64| 1.0 / (1.0 + (-z).exp());
    let want_cls = focal_loss(s(0.3), 0.0, 2.0, 0.25) + focal_loss(s(-0.2), 1.0, 2.0, 0.25);
    assert!((g.value(cls).item() - want_cls).abs() < 1e-14);
    let l1 = 0.05 + 0.0 + 0.1 + 0.1;
    let want_bbox = 5.0 * l1 + 2.0 * (1.0 - giou(&pred, &tgt));
    assert!((g.value(bbox).item() - want_bbox).abs() < 1e-12);
}

#[test]
fn perfect_predictions_have_zero_box_loss() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let tgt = [BBox::new(0.3, 0.3, 0.2, 0.2), BBox::new(0.7, 0.6, 0.1, 0.3)];
    let boxes: Vec<f64> = [tgt[1], BBox::new(0.5, 0.5, 0.5, 0.5), tgt[0]].iter().flat_map(|b| b.as_array()).collect();
    let logits = Tensor::new(&[3, 2], vec![-30.0, 30.0, -30.0, -30.0, 30.0, -30.0]).unwrap();
    let l = layer(&mut g, logits, Tensor::new(&[3, 4], boxes).unwrap(), Tensor::zeros(&[3, 1]), None);
    let targets = Targets { boxes: tgt.to_vec(), classes: vec![0, 1], masks: None };
    let m = MatchAssignment { pairs: vec![(0, 1), (2, 0)], num_queries: 3 };
    let (cls, bbox) = loss_cls_bbox(&mut g, &l, &targets, &m, &LossWeights::default()).unwrap();
    assert!(g.value(bbox).item().abs() < 1e-14);
    assert!(g.value(cls).item() < 1e-12);
}

#[test]
fn aware_loss_is_ln2_for_uninformed_prediction() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    // corner boxes (0,0,.2,.2) and (.1,.1,.3,.3): IoU = 0.01 / 0.07
    let pred = BBox::from_corners(0.0, 0.0, 0.2, 0.2);
    let tgt = BBox::from_corners(0.1, 0.1, 0.3, 0.3);
    assert!((iou(&pred, &tgt) - 1.0 / 7.0).abs() < 1e-12);
    let l = layer(
        &mut g,
        Tensor::zeros(&[1, 2]),
        Tensor::new(&[1, 4], pred.as_array().to_vec()).unwrap(),
        Tensor::zeros(&[1, 1]),
        Some(Tensor::full(&[1, 1], 3.0)),
    );
    let targets = Targets { boxes: vec![tgt], classes: vec![0], masks: None };
    let m = MatchAssignment { pairs: vec![(0, 0)], num_queries: 1 };
    // no reference points: the centerness term is skipped
    let a = loss_aware(&mut g, &l, &targets, &m, None).unwrap();
    assert!((g.value(a).item() - std::f64::consts::LN_2).abs() < 1e-12);

    // with a reference point at the target center the centerness target is 1
    let a = loss_aware(&mut g, &l, &targets, &m, Some(&[(0.2, 0.2)])).unwrap();
    let want = std::f64::consts::LN_2 + bce(1.0 / (1.0 + (-3f64).exp()), 1.0);
    assert!((g.value(a).item() - want).abs() < 1e-12);

    // the IoU target is detached: no gradient reaches the boxes
    g.backward(a).unwrap();
    assert!(g.grad(l.boxes).map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn aware_loss_minimized_at_target() {
    let store = ParamStore::new();
    let pred = BBox::from_corners(0.0, 0.0, 0.2, 0.2);
    let tgt = BBox::from_corners(0.1, 0.1, 0.3, 0.3);
    let t: f64 = 1.0 / 7.0;
    let at = |z: f64| {
        let mut g = Graph::new(&store);
        let l = layer(
            &mut g,
            Tensor::zeros(&[1, 2]),
            Tensor::new(&[1, 4], pred.as_array().to_vec()).unwrap(),
            Tensor::full(&[1, 1], z),
            None,
        );
        let targets = Targets { boxes: vec![tgt], classes: vec![0], masks: None };
        let m = MatchAssignment { pairs: vec![(0, 0)], num_queries: 1 };
        let a = loss_aware(&mut g, &l, &targets, &m, None).unwrap();
        g.value(a).item()
    };
    let z_star = (t / (1.0 - t)).ln();
    for dz in [-0.5, -0.01, 0.01, 0.5] {
        assert!(at(z_star + dz) > at(z_star));
    }
}

#[test]
fn giou_rows_gradients() {
    let mut r = rng(5);
    let targets: Vec<BBox> = (0..3).map(|_| BBox::new(r.gen_range(0.3..0.7), r.gen_range(0.3..0.7), 0.3, 0.2)).collect();
    let pred = Tensor::new(&[3, 4], (0..3).flat_map(|_| [r.gen_range(0.3..0.7), r.gen_range(0.3..0.7), 0.25, 0.35]).collect()).unwrap();
    let check = check_tape_gradients(&[pred.clone()], 1e-6, |g, v| {
        let gi = giou_rows(g, v[0], &targets)?;
        g.sum(gi)
    })
    .unwrap();
    assert!(check.max_rel_error < 1e-6, "{check:?}");
    let mut g = d2etr::autodiff::Tape::new();
    let v = g.constant(pred.clone()).unwrap();
    let gi = giou_rows(&mut g, v, &targets).unwrap();
    for (i, t) in targets.iter().enumerate() {
        let p = &pred.data()[i * 4..i * 4 + 4];
        assert!((g.value(gi).data()[i] - giou(&BBox::new(p[0], p[1], p[2], p[3]), t)).abs() < 1e-14);
    }
}

// ---------------------------------------------------------------- token labeling

#[test]
fn token_targets_match_bilinear_oracle() {
    // 2×2 single-class mask resized to 4×4 with half-pixel centers
    let masks = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 1.0, 1.0]).unwrap();
    let t = token_targets(&masks, 4, 4).unwrap();
    let axis = [0.0, 0.25, 0.75, 1.0];
    for y in 0..4 {
        for x in 0..4 {
            let (fy, fx) = (axis[y], axis[x]);
            let want = (1.0 - fy) * fx * 1.0 + fy * (1.0 - fx) * 1.0 + fy * fx * 1.0;
            assert!((t.at(&[y * 4 + x, 0]) - want).abs() < 1e-15);
        }
    }
    assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn token_loss_examples() {
    let mut store = ParamStore::new();
    let head = Linear::new(&mut store, "token_head", 2, 1, true, &mut rng(0)).unwrap();
    let set = |store: &mut ParamStore, name: &str, t: Tensor| {
        let id = store.id(name).unwrap();
        store.get_mut(id).value = t;
    };
    set(&mut store, "token_head.weight", Tensor::zeros(&[2, 1]));
    set(&mut store, "token_head.bias", Tensor::full(&[1], 40.0));
    let targets = Targets { boxes: vec![BBox::new(0.5, 0.5, 1.0, 1.0)], classes: vec![0], masks: Some(Tensor::ones(&[8, 8, 1])) };
    let mut g = Graph::new(&store);
    let maps = vec![
        FeatureMap::constant(&mut g, Tensor::randn(&[4, 4, 2], 1.0, &mut rng(1)), 1, 2).unwrap(),
        FeatureMap::constant(&mut g, Tensor::randn(&[2, 2, 2], 1.0, &mut rng(2)), 2, 4).unwrap(),
    ];
    let l = loss_token(&mut g, &head, &maps, &targets).unwrap();
    assert!(g.value(l).item() < 1e-12);

    let none = Targets { masks: None, ..targets.clone() };
    let l = loss_token(&mut g, &head, &maps, &none).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    // composed oracle: interpolation then scalar focal, averaged
    set(&mut store, "token_head.bias", Tensor::full(&[1], 0.3));
    let masks = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let two = Targets { boxes: vec![BBox::new(0.5, 0.5, 0.5, 0.5); 2], classes: vec![0, 0], masks: Some(masks.clone()) };
    let mut g = Graph::new(&store);
    let map = FeatureMap::constant(&mut g, Tensor::zeros(&[4, 4, 2]), 1, 2).unwrap();
    let l = loss_token(&mut g, &head, &[map], &two).unwrap();
    let t = token_targets(&masks, 4, 4).unwrap();
    let p = 1.0 / (1.0 + (-0.3f64).exp());
    let want = t.data().iter().map(|&t| focal_loss(p, t, 2.0, 0.25)).sum::<f64>() / 16.0 / 2.0;
    assert!((g.value(l).item() - want).abs() < 1e-14);
}

// ---------------------------------------------------------------- total

#[test]
fn total_loss_is_weighted_sum() {
    let mut g = d2etr::autodiff::Tape::new();
    let mk = |g: &mut d2etr::autodiff::Tape, v: f64| g.constant(Tensor::scalar(v)).unwrap();
    let terms = LossTerms { cls: mk(&mut g, 0.7), bbox: mk(&mut g, 1.3), awr: mk(&mut g, 0.4), token: mk(&mut g, 0.2) };
    let (t, v) = total_loss(&mut g, &terms, &LossWeights::default()).unwrap();
    assert!((g.value(t).item() - (2.0 * 0.7 + 1.3 + 0.4 + 0.2)).abs() < 1e-15);
    assert!((v.total - (v.cls + v.bbox + v.awr + v.token)).abs() < 1e-15);

    let only_cls = LossWeights { cls: 1.0, l1: 0.0, giou: 0.0, awr: 0.0, token: 0.0 };
    let zero = mk(&mut g, 0.0);
    let terms = LossTerms { bbox: zero, ..terms };
    let (t, _) = total_loss(&mut g, &terms, &only_cls).unwrap();
    assert_eq!(g.value(t).item(), 0.7);

    let all_zero = LossTerms { cls: zero, bbox: zero, awr: zero, token: zero };
    let (t, _) = total_loss(&mut g, &all_zero, &LossWeights::default()).unwrap();
    assert_eq!(g.value(t).item(), 0.0);
    assert!(LossWeights { awr: -1.0, ..LossWeights::default() }.validate().is_err());
}
