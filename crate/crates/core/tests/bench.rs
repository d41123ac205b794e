use std::process::Command;

use d2etr::autodiff::{Gradients, Graph, ParamStore};
use d2etr::bench::checkpoint::{read_tensors, write_tensors};
use d2etr::bench::*;
use d2etr::decoder::Detection;
use d2etr::detector::DetectorConfig;
use d2etr::losses::BBox;
use d2etr::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (_, store) = init_model(&RunConfig::default()).unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&path, &store).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.len(), store.len());
    for (a, b) in store.iter().zip(loaded.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value.shape(), b.value.shape());
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let (_, mut fresh) = init_model(&RunConfig { seed: 9, ..RunConfig::default() }).unwrap();
    assert_ne!(fresh, store);
    restore_checkpoint(&path, &mut fresh).unwrap();
    assert_eq!(fresh, store);
}

#[test]
fn checkpoint_framing() {
    let t = Tensor::new(&[2, 1], vec![1.5, -0.0]).unwrap();
    let mut buf = Vec::new();
    write_tensors(&mut buf, &[("ab", &t)]).unwrap();
    let mut want = b"D2ETR1".to_vec();
    for word in [2u32] {
        want.extend(word.to_le_bytes());
    }
    want.extend(b"ab");
    for word in [2u32, 2, 1] {
        want.extend(word.to_le_bytes());
    }
    want.extend(1.5f64.to_le_bytes());
    want.extend((-0.0f64).to_le_bytes());
    assert_eq!(buf, want);
    let back = read_tensors(&mut buf.as_slice()).unwrap();
    assert_eq!(back, vec![("ab".to_string(), t)]);

    assert!(read_tensors(&mut &b"D2ETR2"[..]).is_err());
    assert!(read_tensors(&mut &buf[..buf.len() - 3]).is_err());
    let dir = tempfile::tempdir().unwrap();
    let (_, mut store) = init_model(&RunConfig::default()).unwrap();
    let path = dir.path().join("small.bin");
    let mut other = ParamStore::new();
    other.add("x", Tensor::zeros(&[1])).unwrap();
    save_checkpoint(&path, &other).unwrap();
    assert!(restore_checkpoint(&path, &mut store).is_err());
}

#[test]
fn dataset_is_deterministic_on_disk() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_synthetic_dataset(a.path(), 12, 4, 32, 5).unwrap();
    gen_synthetic_dataset(b.path(), 12, 4, 32, 5).unwrap();
    for split in ["train", "val"] {
        for file in ["images.bin", "masks.bin", "annotations.jsonl"] {
            let x = std::fs::read(a.path().join(split).join(file)).unwrap();
            let y = std::fs::read(b.path().join(split).join(file)).unwrap();
            assert_eq!(x, y, "{split}/{file}");
        }
    }
    let loaded = load_split(&a.path().join("train")).unwrap();
    assert_eq!(loaded, generate(12, 32, 5).unwrap());
    assert_ne!(loaded, generate(12, 32, 6).unwrap());
    assert!(load_split(&a.path().join("missing")).is_err());
    assert!(generate(0, 32, 0).is_err());
}

#[test]
fn samples_satisfy_construction_invariants() {
    for s in generate(200, 48, 3).unwrap() {
        assert!((1..=3).contains(&s.boxes.len()));
        assert_eq!(s.boxes.len(), s.classes.len());
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for (b, &k) in s.boxes.iter().zip(&s.classes) {
            let [x1, y1, x2, y2] = b.corners();
            assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 + 1e-12 && y2 <= 1.0 + 1e-12);
            assert!(k < NUM_CLASSES);
        }
        for y in 0..48 {
            for x in 0..48 {
                for k in 0..NUM_CLASSES {
                    let v = s.masks.at(&[y, x, k]);
                    assert!(v == 0.0 || v == 1.0);
                    if v == 1.0 {
                        let (px, py) = ((x as f64 + 0.5) / 48.0, (y as f64 + 0.5) / 48.0);
                        let inside = s.boxes.iter().zip(&s.classes).any(|(b, &c)| {
                            let [x1, y1, x2, y2] = b.corners();
                            c == k && px > x1 && px < x2 && py > y1 && py < y2
                        });
                        assert!(inside, "mask pixel ({x},{y}) class {k} outside every box");
                    }
                }
            }
        }
    }
}

#[test]
fn class_balance_over_a_thousand_images() {
    let data = generate(1000, 64, 0).unwrap();
    let (mut counts, mut total) = ([0usize; NUM_CLASSES], 0);
    for s in &data {
        for &c in &s.classes {
            counts[c] += 1;
            total += 1;
        }
    }
    for c in counts {
        let f = c as f64 / total as f64;
        assert!((0.45..=0.55).contains(&f), "{counts:?}");
    }
}

#[test]
fn hflip_is_an_involution() {
    let s = &generate(3, 32, 1).unwrap()[2];
    let f = s.hflip();
    assert_ne!(&f, s);
    let back = f.hflip();
    assert_eq!(back.image, s.image);
    assert_eq!(back.masks, s.masks);
    for (a, b) in back.boxes.iter().zip(&s.boxes) {
        assert!((a.cx - b.cx).abs() < 1e-15 && a.w == b.w);
    }
}

fn scalar_store(v: f64) -> (ParamStore, Gradients) {
    let mut store = ParamStore::new();
    store.add("theta", Tensor::new(&[1], vec![v]).unwrap()).unwrap();
    let grads = Gradients::zeros_like(&store);
    (store, grads)
}

#[test]
fn adamw_hand_oracles() {
    let (mut store, grads) = scalar_store(0.7);
    let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..AdamWConfig::default() };
    let mut state = AdamWState::new(&store);
    for _ in 0..3 {
        assert!(adamw_step(&mut store, &grads, &mut state, &cfg));
    }
    assert_eq!(store.iter().next().unwrap().value.data()[0], 0.7);

    let (mut store, mut grads) = scalar_store(1.0);
    let id = store.id("theta").unwrap();
    grads.get_mut(id).data_mut()[0] = 1.0;
    let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, eps: 1e-8, ..AdamWConfig::default() };
    let mut state = AdamWState::new(&store);
    adamw_step(&mut store, &grads, &mut state, &cfg);
    // m̂ = v̂ = 1, so the step is lr / (1 + ε)
    let moved = 1.0 - store.get(id).value.data()[0];
    assert!((moved - 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{moved}");

    let (mut store, grads) = scalar_store(2.0);
    let cfg = AdamWConfig { lr: 0.05, weight_decay: 0.3, ..AdamWConfig::default() };
    let mut state = AdamWState::new(&store);
    for _ in 0..10 {
        adamw_step(&mut store, &grads, &mut state, &cfg);
    }
    let want = 2.0 * (1.0f64 - 0.05 * 0.3).powi(10);
    assert!((store.get(id).value.data()[0] - want).abs() < 1e-12);
}

#[test]
fn adamw_skips_non_finite_gradients() {
    let (mut store, mut grads) = scalar_store(1.0);
    let id = store.id("theta").unwrap();
    grads.get_mut(id).data_mut()[0] = f64::NAN;
    let mut state = AdamWState::new(&store);
    assert!(!adamw_step(&mut store, &grads, &mut state, &AdamWConfig::default()));
    assert_eq!(state.step, 0);
    assert_eq!(store.get(id).value.data()[0], 1.0);
}

fn det(class: usize, score: f64, b: BBox) -> Detection {
    Detection { query: 0, class, score, bbox: b }
}

fn gt(boxes: Vec<BBox>, classes: Vec<usize>) -> GroundTruth {
    GroundTruth { boxes, classes, side: 64.0 }
}

#[test]
fn ap_hand_oracles() {
    let target = BBox::new(20.0, 20.0, 20.0, 20.0);
    let gts = vec![gt(vec![target], vec![0])];

    let perfect = evaluate_detections(&[vec![det(0, 1.0, target)]], &gts, 1).unwrap();
    assert_eq!((perfect.ap50, perfect.ap75, perfect.map), (1.0, 1.0, 1.0));

    let none = evaluate_detections(&[vec![]], &gts, 1).unwrap();
    assert_eq!((none.ap50, none.map), (0.0, 0.0));

    // IoU 0.9 true positive above a disjoint false positive
    let tp = BBox::new(20.0, 20.0, 18.0, 20.0);
    let fp = BBox::new(50.0, 50.0, 8.0, 8.0);
    let r = evaluate_detections(&[vec![det(0, 0.9, tp), det(0, 0.8, fp)]], &gts, 1).unwrap();
    assert_eq!(r.ap50, 1.0);
    // the other order halves precision at full recall
    let r = evaluate_detections(&[vec![det(0, 0.8, tp), det(0, 0.9, fp)]], &gts, 1).unwrap();
    assert!((r.ap50 - 0.5).abs() < 1e-12);
    // IoU 0.9 fails the 0.95 threshold only
    let r = evaluate_detections(&[vec![det(0, 0.9, tp)]], &gts, 1).unwrap();
    assert!((r.map - 0.9).abs() < 1e-12);
    // wrong class never matches
    let r = evaluate_detections(&[vec![det(1, 0.9, target)]], &gts, 2).unwrap();
    assert_eq!(r.ap50, 0.0);
    assert_eq!(r.per_class[1].ap50, None);

    assert!(evaluate_detections(&[], &[], 1).is_err());
}

#[test]
fn interpolation_oracle() {
    // recall 0.5 at precision 1, then recall 1 at precision 2/3
    let ap = interpolated_ap(&[0.5, 0.5, 1.0], &[1.0, 0.5, 2.0 / 3.0]);
    let want = (51.0 * 1.0 + 50.0 * 2.0 / 3.0) / 101.0;
    assert!((ap - want).abs() < 1e-12);
}

#[test]
fn size_classes_scale_with_image() {
    assert_eq!(SizeClass::thresholds(640.0), (1024.0, 9216.0));
    let (s, l) = SizeClass::thresholds(64.0);
    assert!((s - 10.24).abs() < 1e-12 && (l - 92.16).abs() < 1e-12);
    assert_eq!(SizeClass::of(10.0, 64.0), SizeClass::Small);
    assert_eq!(SizeClass::of(50.0, 64.0), SizeClass::Medium);
    assert_eq!(SizeClass::of(100.0, 64.0), SizeClass::Large);

    let small = BBox::new(5.0, 5.0, 3.0, 3.0);
    let large = BBox::new(40.0, 40.0, 20.0, 20.0);
    let gts = vec![gt(vec![small, large], vec![0, 0])];
    let r = evaluate_detections(&[vec![det(0, 0.9, large)]], &gts, 1).unwrap();
    assert_eq!(r.large, Some(1.0));
    assert_eq!(r.small, Some(0.0));
    assert_eq!(r.medium, None);
}

fn tiny_run(epochs: usize, seed: u64) -> RunConfig {
    let mut cfg = RunConfig { seed, ..RunConfig::default() };
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 4;
    cfg
}

#[test]
fn smoke_training_writes_outputs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(6, 64, 0).unwrap();
    let cfg = tiny_run(2, 3);
    let a = train(&cfg, &data, Some(dir.path())).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,l_cls,l_bbox,l_awr,l_token,l_total,lr");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,"));

    let b = train(&cfg, &data, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.store, b.store);
    let c = train(&tiny_run(2, 4), &data, None).unwrap();
    assert_ne!(a.log, c.log);

    let (detector, mut loaded) = init_model(&cfg).unwrap();
    restore_checkpoint(&dir.path().join("checkpoint_final.bin"), &mut loaded).unwrap();
    assert_eq!(loaded, a.store);
    let best = load_checkpoint(&dir.path().join("checkpoint_best.bin")).unwrap();
    assert_eq!(best, a.best);
    let in_memory = evaluate_ap(&a.detector, &a.store, &data, None).unwrap();
    assert_eq!(evaluate_ap(&detector, &loaded, &data, None).unwrap(), in_memory);
    assert!([in_memory.ap50, in_memory.ap75, in_memory.map].iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn learning_rate_schedule() {
    let tc = TrainConfig { epochs: 10, ..TrainConfig::default() };
    assert_eq!(tc.drop_epoch(), 8);
    assert_eq!(tc.lr_at(7), 2e-3);
    assert!((tc.lr_at(8) - 2e-4).abs() < 1e-19);
}

#[test]
fn smoothing_oracle() {
    let log: Vec<EpochLog> = [4.0, 2.0, 6.0, 8.0]
        .iter()
        .enumerate()
        .map(|(i, &t)| EpochLog { epoch: i + 1, losses: d2etr::losses::LossValues { total: t, ..Default::default() }, lr: 1.0 })
        .collect();
    assert_eq!(smoothed_totals(&log, 2), vec![4.0, 3.0, 4.0, 7.0]);
    assert_eq!(log_csv(&log).lines().count(), 5);
}

#[test]
fn config_parsing_and_validation() {
    let cfg = RunConfig::from_toml("seed = 3\n[train]\nepochs = 5\n[model.decoder]\nnum_queries = 10\n").unwrap();
    assert_eq!((cfg.seed, cfg.train.epochs, cfg.model.decoder.num_queries), (3, 5, 10));
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());

    let err = |text: &str| RunConfig::from_toml(text).unwrap_err().to_string();
    assert!(err("[train]\nlr = -1.0\n").contains("train.lr"));
    assert!(err("[train]\nbatch_size = 0\n").contains("train.batch_size"));
    assert!(err("[train]\nlearning_rate = 0.1\n").contains("learning_rate"));
    assert!(err("[data]\nimage_size = 48\n").contains("data.image_size"));
    assert!(err("[model.decoder]\nchannels = 16\n").contains("decoder.channels"));
}

#[test]
fn attention_report_contract() {
    let samples = generate(3, 64, 2).unwrap();
    let (vanilla, store) = init_model(&RunConfig { model: DetectorConfig::vanilla(), ..RunConfig::default() }).unwrap();
    assert!(attention_scale_report(&vanilla, &store, &samples, 3).is_err());

    let cfg = RunConfig { model: DetectorConfig::multi_scale(), ..RunConfig::default() };
    let (detector, mut store) = init_model(&cfg).unwrap();
    let rows = attention_scale_report(&detector, &store, &samples, 3).unwrap();
    for (_, _, masses) in group_masses(&rows) {
        assert_eq!(masses.len(), 4);
        assert!((masses.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert!(rows.iter().any(|r| r.layer == "sum" && r.size_class == "all"));
    assert_eq!(rows.iter().filter(|r| r.layer == "0" && r.size_class == "all").map(|r| r.stride).collect::<Vec<_>>(), vec![8, 16, 32, 64]);
    let csv = attention_csv(&rows);
    assert!(csv.starts_with("layer,size_class,scale,stride,attention_mass\n"));
    assert_eq!(attention_scale_report(&detector, &store, &samples, 1).unwrap(), attention_scale_report(&detector, &store, &samples, 1).unwrap());

    uniform_cross_attention(&detector, &mut store).unwrap();
    let rows = attention_scale_report(&detector, &store, &samples, 3).unwrap();
    let counts = [64.0, 16.0, 4.0, 1.0];
    for r in rows {
        let share = counts[r.scale] / 85.0;
        assert!((r.attention_mass - share).abs() < 1e-9, "{r:?}");
    }
}

#[test]
fn grad_check_controls() {
    let empty = ParamStore::new();
    let r = grad_check_model(&empty, 1e-6, 4, |g: &mut Graph| g.constant(Tensor::scalar(1.0))).unwrap();
    assert!(r.passed() && r.groups.is_empty());

    let mut store = ParamStore::new();
    store.add("probe.w", Tensor::randn(&[3], 1.0, &mut rng(0))).unwrap();
    let id = store.id("probe.w").unwrap();
    let good = grad_check_model(&store, 1e-6, 3, |g: &mut Graph| {
        let w = g.param(id)?;
        let sq = g.mul(w, w)?;
        g.sum(sq)
    })
    .unwrap();
    assert!(good.passed());
    // a stop-gradient on one factor corrupts the backward pass
    let bad = grad_check_model(&store, 1e-6, 3, |g: &mut Graph| {
        let w = g.param(id)?;
        let frozen = g.value(w).clone();
        let c = g.constant(frozen)?;
        let sq = g.mul(w, c)?;
        g.sum(sq)
    })
    .unwrap();
    assert!(!bad.passed());
    assert_eq!(bad.groups[0].group, "probe.w");
    assert!(bad.render().contains("FAILED"));
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_d2etr")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlr = 0.0\n").unwrap();
    let out = cli(&["flops", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lr"));

    let good = dir.path().join("tiny.toml");
    std::fs::write(&good, "[data]\ntrain_size = 2\nval_size = 2\n[eval]\ngrad_check_coords = 1\n").unwrap();
    let data = dir.path().join("data");
    let out = cli(&["gen-data", "--config", good.to_str().unwrap(), "--out-dir", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(data.join("val/annotations.jsonl").exists());

    let out = cli(&["grad-check", "--config", good.to_str().unwrap(), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));

    let flops_dir = dir.path().join("flops");
    let out = cli(&["flops", "--out-dir", flops_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(flops_dir.join("scaling_report.csv")).unwrap().lines().count(), 6);
}
