use d2etr::autodiff::{check_param_gradients, Graph, ParamStore};
use d2etr::backbone::{extra_scale, patch_embed, Backbone, ExtraScale, FeatureMap, PatchEmbed, PyramidConfig, StageConfig};
use d2etr::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_config() -> PyramidConfig {
    let stage = |channels, heads, patch_stride| StageConfig { depth: 1, channels, heads, patch_stride };
    PyramidConfig {
        image_size: 64,
        stages: vec![stage(4, 1, 4), stage(8, 2, 2), stage(8, 2, 2), stage(8, 2, 2)],
        fusing_width: 4,
        fusing_depth: 1,
        fusing_heads: 1,
        pool_size: 2,
        fuse_start_lvl: 1,
        ..PyramidConfig::default()
    }
}

#[test]
fn patch_embed_geometry() {
    for (n, stride, want) in [(64, 4, 16), (16, 2, 8), (7, 2, 4), (9, 4, 3)] {
        let mut store = ParamStore::new();
        let pe = PatchEmbed::new(&mut store, "pe", 3, 5, stride, &mut rng(0)).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::randn(&[n, n, 3], 1.0, &mut rng(1))).unwrap();
        let m = patch_embed(&mut g, x, &pe, 1, stride).unwrap();
        assert_eq!((m.height, m.width, m.channels), (want, want, 5), "{n} / {stride}");
    }
}

#[test]
fn patch_embed_rejects_tiny_input() {
    let mut store = ParamStore::new();
    let pe = PatchEmbed::new(&mut store, "pe", 1, 2, 4, &mut rng(0)).unwrap();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::zeros(&[6, 9, 1])).unwrap();
    assert!(patch_embed(&mut g, x, &pe, 1, 4).is_err());
    let x = g.constant(Tensor::zeros(&[7, 7, 1])).unwrap();
    assert_eq!(patch_embed(&mut g, x, &pe, 1, 4).unwrap().grid(), (2, 2));
    assert!(PyramidConfig { image_size: 32, ..PyramidConfig::default() }.validate().is_err());
    assert!(PyramidConfig { image_size: 64, ..PyramidConfig::default() }.validate().is_ok());
}

#[test]
fn constant_image_gives_constant_interior_embedding() {
    let mut store = ParamStore::new();
    let pe = PatchEmbed::new(&mut store, "pe", 3, 4, 2, &mut rng(0)).unwrap();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::full(&[12, 12, 3], 0.7)).unwrap();
    let m = patch_embed(&mut g, x, &pe, 1, 2).unwrap();
    let t = m.to_tensor(&g);
    // away from the zero padding every output sees the same input window
    let reference: Vec<f64> = (0..4).map(|c| t.at(&[1, 1, c])).collect();
    for y in 1..m.height {
        for x in 1..m.width {
            for c in 0..4 {
                assert!((t.at(&[y, x, c]) - reference[c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn config_validation() {
    let cfg = PyramidConfig::default();
    cfg.validate().unwrap();
    assert_eq!(cfg.strides(), vec![4, 8, 16, 32]);
    assert_eq!(cfg.grid_sizes(), vec![16, 8, 4, 2]);
    assert_eq!(cfg.num_fused(), 1);
    assert!(PyramidConfig { fuse_start_lvl: 0, ..cfg.clone() }.validate().is_err());
    assert!(PyramidConfig { fuse_start_lvl: 5, ..cfg.clone() }.validate().is_err());
    assert!(PyramidConfig { fusing_heads: 3, ..cfg.clone() }.validate().is_err());
    let mut bad = cfg.clone();
    bad.stages[1].patch_stride = 3;
    assert!(bad.validate().is_err());
}

#[test]
fn last_stage_only_gives_single_fused_output() {
    let cfg = PyramidConfig { fuse_start_lvl: 4, ..small_config() };
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, cfg, &mut rng(0)).unwrap();
    let mut g = Graph::new(&store);
    let out = bb.forward(&mut g, &Tensor::randn(&[64, 64, 3], 1.0, &mut rng(1))).unwrap();
    assert_eq!(out.pyramid.len(), 1);
    assert_eq!(out.pyramid.strides(), vec![32]);
    assert_eq!(out.raw.len(), 4);
    assert!(store.id("fuse4.block0.attn.sr.proj0.weight").is_some());
    assert!(store.id("fuse4.block0.attn.sr.proj1.weight").is_none());
}

#[test]
fn full_fusion_pyramid_contract() {
    let cfg = small_config();
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, cfg, &mut rng(0)).unwrap();
    let mut g = Graph::new(&store);
    let out = bb.forward(&mut g, &Tensor::randn(&[64, 64, 3], 1.0, &mut rng(1))).unwrap();
    assert_eq!(out.pyramid.strides(), vec![4, 8, 16, 32]);
    assert!(out.pyramid.maps().iter().all(|m| m.channels == 4));
    let grids: Vec<_> = out.pyramid.maps().iter().map(|m| m.grid()).collect();
    assert_eq!(grids, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
    assert!(store.id("stage2.block0.norm1.weight").is_some());
    assert!(store.id("fuse4.block0.attn.sr.proj3.weight").is_some());
}

#[test]
fn extra_scale_halves_grid() {
    let cfg = PyramidConfig { extra_scale: true, fuse_start_lvl: 3, image_size: 64, ..small_config() };
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, cfg, &mut rng(0)).unwrap();
    let mut g = Graph::new(&store);
    let out = bb.forward(&mut g, &Tensor::randn(&[64, 64, 3], 1.0, &mut rng(1))).unwrap();
    assert_eq!(out.pyramid.strides(), vec![16, 32, 64]);
    assert_eq!(out.pyramid.last().grid(), (1, 1));
    assert_eq!(out.pyramid.maps()[1].grid(), (2, 2));

    let mut store = ParamStore::new();
    let conv = ExtraScale::new(&mut store, "extra", 3, &mut rng(2)).unwrap();
    let mut g = Graph::new(&store);
    let m = FeatureMap::constant(&mut g, Tensor::randn(&[8, 8, 3], 1.0, &mut rng(3)), 4, 32).unwrap();
    let e = extra_scale(&mut g, &m, &conv).unwrap();
    assert_eq!((e.height, e.width, e.channels, e.stride), (4, 4, 3, 64));
}

#[test]
fn extra_scale_gradients() {
    let mut store = ParamStore::new();
    let conv = ExtraScale::new(&mut store, "extra", 2, &mut rng(2)).unwrap();
    let x = Tensor::randn(&[5, 4, 2], 1.0, &mut rng(3));
    let checks = check_param_gradients(&store, 1e-6, None, |g| {
        let m = FeatureMap::constant(g, x.clone(), 4, 32)?;
        let e = extra_scale(g, &m, &conv)?;
        let sq = g.mul(e.tokens, e.tokens)?;
        g.sum(sq)
    })
    .unwrap();
    for c in checks {
        assert!(c.check.max_rel_error < 1e-5, "{}: {:?}", c.name, c.check);
    }
}

#[test]
fn no_fusion_keeps_shapes() {
    let image = Tensor::randn(&[64, 64, 3], 1.0, &mut rng(1));
    let shapes = |no_fusion| {
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, PyramidConfig { no_fusion, ..small_config() }, &mut rng(0)).unwrap();
        let mut g = Graph::new(&store);
        let out = bb.forward(&mut g, &image).unwrap();
        (
            out.pyramid.maps().iter().map(|m| (m.stride, m.height, m.width, m.channels)).collect::<Vec<_>>(),
            store.len(),
        )
    };
    let (fused, n_fused) = shapes(false);
    let (plain, n_plain) = shapes(true);
    assert_eq!(fused, plain);
    assert!(n_plain < n_fused);
}

#[test]
fn forward_is_deterministic() {
    let image = Tensor::randn(&[64, 64, 3], 1.0, &mut rng(1));
    let run = || {
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, small_config(), &mut rng(7)).unwrap();
        let mut g = Graph::new(&store);
        let out = bb.forward(&mut g, &image).unwrap();
        out.pyramid.maps().iter().map(|m| m.to_tensor(&g)).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

/// A loss on the last fused map alone reaches every stage and every fusing stage.
#[test]
fn last_fused_map_reaches_all_scales() {
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, small_config(), &mut rng(0)).unwrap();
    let mut g = Graph::new(&store);
    let out = bb.forward(&mut g, &Tensor::randn(&[64, 64, 3], 1.0, &mut rng(1))).unwrap();
    let last = out.pyramid.last().tokens;
    let shape = g.shape(last).to_vec();
    let probe = g.constant(Tensor::randn(&shape, 1.0, &mut rng(2))).unwrap();
    let prod = g.mul(last, probe).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();
    let grads = g.gradients();
    for name in [
        "stage1.patch_embed.proj.weight",
        "stage2.block0.attn.q.weight",
        "stage4.norm.weight",
        "fuse1.proj.weight",
        "fuse2.block0.mlp.fc1.weight",
        "fuse3.norm.weight",
        "fuse4.block0.attn.sr.proj0.weight",
    ] {
        assert!(grads.any_nonzero(store.id(name).unwrap()), "{name} unreachable");
    }
}

#[test]
fn backbone_gradients() {
    let stage = |channels, heads, patch_stride| StageConfig { depth: 1, channels, heads, patch_stride };
    let cfg = PyramidConfig {
        image_size: 12,
        stages: vec![stage(2, 1, 4), stage(2, 1, 2)],
        fusing_width: 2,
        fusing_depth: 1,
        fusing_heads: 1,
        pool_size: 1,
        fuse_start_lvl: 1,
        mlp_ratio: 1,
        fusing_mlp_ratio: 1,
        ..PyramidConfig::default()
    };
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, cfg, &mut rng(0)).unwrap();
    let image = Tensor::randn(&[12, 12, 3], 1.0, &mut rng(1));
    let probe = Tensor::randn(&[4, 2], 1.0, &mut rng(2));
    let checks = check_param_gradients(&store, 1e-6, Some(6), |g| {
        let out = bb.forward(g, &image)?;
        let p = g.constant(probe.clone())?;
        let prod = g.mul(out.pyramid.last().tokens, p)?;
        g.sum(prod)
    })
    .unwrap();
    for c in checks {
        assert!(c.check.max_rel_error < 1e-5, "{}: {:?}", c.name, c.check);
    }
}
