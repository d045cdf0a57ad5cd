use ean_core::model::{count_parameters, DecoderConfig, ForwardHooks, Model, SelfAttentionKind};
use ean_core::query::NoncentralAnchors;
use ean_core::tensor::{ParamStore, Tape, Tensor};
use ean_core::{EanRng, Error};
use rand::{Rng, SeedableRng};

fn small() -> DecoderConfig {
    DecoderConfig {
        layers: 2,
        groups: 5,
        points: 4,
        dim: 16,
        heads: 2,
        sampling_points: 2,
        bev_channels: 4,
        bev_height: 20,
        bev_width: 10,
        ..Default::default()
    }
}

fn bev(cfg: &DecoderConfig, seed: u64, scale: f64) -> Tensor {
    let mut rng = EanRng::seed_from_u64(seed);
    let n = cfg.bev_channels * cfg.bev_height * cfg.bev_width;
    Tensor::new(
        &[cfg.bev_channels, cfg.bev_height, cfg.bev_width],
        (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

struct Outputs {
    logits: Vec<Tensor>,
    points: Vec<Tensor>,
    twin: Option<Vec<Tensor>>,
}

fn run(model: &Model, bev_t: &Tensor, nc: Option<&NoncentralAnchors>) -> Outputs {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let b = tape.constant(bev_t.clone());
    let det = model.forward(&mut tape, &bound, b, nc, ForwardHooks::default(), None, None).unwrap();
    Outputs {
        logits: det.central.iter().map(|o| tape.value(o.class_logits).clone()).collect(),
        points: det.central.iter().map(|o| tape.value(o.points).clone()).collect(),
        twin: det
            .noncentral
            .as_ref()
            .map(|v| v.iter().map(|o| tape.value(o.points).clone()).collect()),
    }
}

fn anchors(model: &Model) -> Tensor {
    let cfg = &model.cfg;
    let p = model.params.get("query.P").unwrap();
    let gp = model.params.get("query.gp").unwrap();
    let mut out = Vec::new();
    for g in 0..cfg.groups {
        for j in 0..cfg.points {
            out.push(p.data()[2 * j] + gp.data()[2 * g]);
            out.push(p.data()[2 * j + 1] + gp.data()[2 * g + 1]);
        }
    }
    Tensor::new(&[cfg.groups, cfg.points, 2], out).unwrap()
}

#[test]
fn zero_initialized_heads_keep_anchors_in_every_layer() {
    let cfg = small();
    let model = Model::new(cfg.clone(), &mut EanRng::seed_from_u64(0)).unwrap();
    let out = run(&model, &bev(&cfg, 1, 1.0), None);
    let a = anchors(&model);
    assert_eq!(out.points.len(), 2);
    for p in &out.points {
        assert!(p.max_abs_diff(&a) < 1e-12, "{}", p.max_abs_diff(&a));
    }
    assert_eq!(out.logits[0].shape(), &[5, 4]);
}

#[test]
fn inference_has_no_twin_branch() {
    let cfg = small();
    let model = Model::new(cfg.clone(), &mut EanRng::seed_from_u64(0)).unwrap();
    let b = bev(&cfg, 1, 1.0);
    assert!(run(&model, &b, None).twin.is_none());
    let nc = model.sample_noncentral(&mut EanRng::seed_from_u64(3)).unwrap();
    let train = run(&model, &b, Some(&nc));
    assert_eq!(train.twin.as_ref().unwrap().len(), 2);
    // the central branch does not see the twin
    assert_eq!(train.logits, run(&model, &b, None).logits);
}

#[test]
fn disabled_twin_samples_nothing() {
    let cfg = DecoderConfig { use_noncentral_branch: false, ..small() };
    let model = Model::new(cfg, &mut EanRng::seed_from_u64(0)).unwrap();
    assert!(model.sample_noncentral(&mut EanRng::seed_from_u64(3)).is_none());
}

#[test]
fn louder_bev_keeps_shapes_and_finiteness() {
    let cfg = small();
    let model = Model::new(cfg.clone(), &mut EanRng::seed_from_u64(0)).unwrap();
    for scale in [1.0, 2.0, 4.0] {
        let out = run(&model, &bev(&cfg, 2, scale), None);
        for (l, p) in out.logits.iter().zip(&out.points) {
            assert!(l.is_finite() && p.is_finite());
            assert_eq!(p.shape(), &[5, 4, 2]);
            assert!(p.data().iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}

#[test]
fn repeated_calls_agree() {
    let cfg = small();
    let model = Model::new(cfg.clone(), &mut EanRng::seed_from_u64(4)).unwrap();
    let b = bev(&cfg, 5, 1.0);
    let (x, y) = (run(&model, &b, None), run(&model, &b, None));
    assert_eq!(x.logits, y.logits);
    assert_eq!(x.points, y.points);
}

fn attention_weights(cfg: &DecoderConfig) -> usize {
    let model = Model::new(cfg.clone(), &mut EanRng::seed_from_u64(0)).unwrap();
    model
        .params
        .iter()
        .filter(|(k, _)| k.starts_with("dec0.sa.") && k.ends_with(".w"))
        .map(|(_, t)| t.numel())
        .sum()
}

#[test]
fn attention_projections_scale_quadratically() {
    let a = attention_weights(&DecoderConfig { dim: 64, ..small() });
    let b = attention_weights(&DecoderConfig { dim: 128, ..small() });
    assert_eq!(b, 4 * a);
}

#[test]
fn twin_branch_is_free_in_parameters() {
    let on = count_parameters(&small()).unwrap();
    let off = count_parameters(&DecoderConfig { use_noncentral_branch: false, ..small() }).unwrap();
    assert_eq!(on, off);
}

#[test]
fn vanilla_self_attention_variant_runs() {
    let cfg = DecoderConfig { self_attention: SelfAttentionKind::Vanilla, ..small() };
    let model = Model::new(cfg.clone(), &mut EanRng::seed_from_u64(0)).unwrap();
    let out = run(&model, &bev(&cfg, 1, 1.0), None);
    assert!(out.logits.iter().all(Tensor::is_finite));
}

#[test]
fn wrong_bev_shape_is_a_dimension_error() {
    let cfg = small();
    let model = Model::new(cfg.clone(), &mut EanRng::seed_from_u64(0)).unwrap();
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let b = tape.constant(Tensor::zeros(&[4, 10, 10]));
    let r = model.forward(&mut tape, &bound, b, None, ForwardHooks::default(), None, None);
    assert!(matches!(r, Err(Error::Dimension(_))));
}

#[test]
fn checkpoint_parameters_are_validated() {
    let cfg = small();
    let model = Model::new(cfg.clone(), &mut EanRng::seed_from_u64(0)).unwrap();
    let ok = Model::from_params(cfg.clone(), model.params.clone(), &mut EanRng::seed_from_u64(9)).unwrap();
    assert_eq!(ok.params, model.params);
    let mut bad = model.params.clone();
    bad.insert("dec0.cls.w", Tensor::zeros(&[3, 3]));
    assert!(Model::from_params(cfg.clone(), bad, &mut EanRng::seed_from_u64(9)).is_err());
    let mut extra = model.params.clone();
    extra.insert("stray", Tensor::zeros(&[1]));
    assert!(Model::from_params(cfg.clone(), extra, &mut EanRng::seed_from_u64(9)).is_err());
    assert!(Model::from_params(cfg, ParamStore::new(), &mut EanRng::seed_from_u64(9)).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        DecoderConfig { heads: 3, ..small() },
        DecoderConfig { dim: 18, heads: 2, ..small() },
        DecoderConfig { layers: 0, ..small() },
    ] {
        assert!(Model::new(cfg, &mut EanRng::seed_from_u64(0)).is_err());
    }
    let parsed: Result<DecoderConfig, _> = serde_json::from_str(r#"{"layerz": 3}"#);
    assert!(parsed.is_err());
}
