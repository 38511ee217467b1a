use cardcount::autodiff::{grad_check, Tape};
use cardcount::datagen::{generate_corpus, Corpus, SceneSpec, Split};
use cardcount::harness::report::{self, Table};
use cardcount::harness::{
    evaluate, guide_optimize, render_blob_scene, run_ablation, size_bias_sweep, softplus_inverse,
    threshold_sweep, variant_configs, AblationConfig, BlobSceneParams, BlobSlot, CorpusSizes,
    GuidanceConfig, Inference, TargetKind, TrainConfig, Variant, SLOT_WIDTH,
};
use cardcount::model::{CountModel, ModelConfig};
use cardcount::raster::oracle_count_components;
use cardcount::Error;

fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        input_size: 32,
        grid_factor: 8,
        widths: vec![3, 4, 5],
        embed_dim: 4,
        categories: 2,
        seed,
    }
}

fn small_model(seed: u64) -> CountModel {
    CountModel::new(small_config(seed)).unwrap()
}

fn small_spec() -> SceneSpec {
    SceneSpec {
        image_size: 32,
        count_min: 1,
        count_max: 4,
        radius_min: 2.0,
        radius_max: 3.0,
        ..SceneSpec::default()
    }
}

fn corpus(n: usize) -> Corpus {
    generate_corpus(&small_spec(), Split::Test, n).unwrap()
}

fn blob(presence: f64, cx: f64, cy: f64, radius: f64) -> BlobSlot {
    BlobSlot {
        presence,
        cx,
        cy,
        radius: softplus_inverse(radius),
        amplitude: 0.7,
    }
}

fn scene(width: usize, slots: Vec<BlobSlot>) -> BlobSceneParams {
    BlobSceneParams {
        width,
        height: width,
        background: 0.1,
        softness: 0.5,
        presence_gain: 25.0,
        slots,
    }
}

#[test]
fn absent_blobs_render_the_background() {
    let p = scene(16, vec![blob(f64::NEG_INFINITY, 8.0, 8.0, 4.0); 3]);
    let img = p.render();
    assert!(img.pixels.iter().all(|&v| v == 0.1));
}

#[test]
fn one_present_blob_is_one_component() {
    let p = scene(32, vec![blob(10.0, 16.0, 16.0, 5.0), blob(-10.0, 5.0, 5.0, 3.0)]);
    assert_eq!(oracle_count_components(&p.render(), 0.45), 1);
}

#[test]
fn blob_render_matches_the_tape_version() {
    let p = BlobSceneParams::scattered(24, 24, 6, 3, 4).unwrap();
    let mut tape = Tape::new();
    let v = tape.param(&[6, SLOT_WIDTH], &p.flat()).unwrap();
    let img = render_blob_scene(&mut tape, v, &p).unwrap();
    assert_eq!(tape.shape(img), &[24, 24, 1]);
    assert_eq!(tape.value(img), p.render().pixels.as_slice());
}

#[test]
fn blob_render_gradients_match_finite_differences() {
    let p = scene(12, vec![blob(0.05, 4.3, 5.1, 2.5), blob(-0.03, 8.2, 7.4, 3.0)]);
    let weights: Vec<f64> = (0..144).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
    let report = grad_check(
        |t, x| {
            let img = render_blob_scene(t, x, &p)?;
            let w = t.constant(&[12, 12, 1], &weights)?;
            let prod = t.mul(img, w)?;
            Ok(t.reduce_sum(prod))
        },
        &[2, SLOT_WIDTH],
        &p.flat(),
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn guidance_never_touches_the_model() {
    let model = small_model(2);
    let before = model.checksum();
    let p = BlobSceneParams::scattered(32, 32, 8, 3, 1).unwrap();
    let cfg = GuidanceConfig {
        requested: 6.0,
        max_steps: 30,
        ..GuidanceConfig::default()
    };
    let (_, traj) = guide_optimize(&model, p, &cfg).unwrap();
    assert_eq!(model.checksum(), before);
    assert!(traj.steps.len() <= 30);
    for w in traj.steps.windows(2) {
        assert!(w[1].loss <= w[0].loss);
    }
}

#[test]
fn guidance_budget_caps_the_trajectory() {
    let model = small_model(2);
    let p = BlobSceneParams::scattered(32, 32, 8, 2, 9).unwrap();
    let cfg = GuidanceConfig {
        requested: 50.0,
        min_improvement: 0.0,
        patience: 1000,
        ..GuidanceConfig::default()
    };
    let (_, traj) = guide_optimize(&model, p, &cfg).unwrap();
    assert!(traj.steps.len() <= 150);
    assert!(!traj.stopped_on_plateau);
}

#[test]
fn guidance_at_the_requested_count_stops_on_plateau() {
    let model = small_model(2);
    let p = BlobSceneParams::scattered(32, 32, 8, 4, 3).unwrap();
    let start = model.predict_count(&p.render(), 0).unwrap();
    let cfg = GuidanceConfig {
        requested: start,
        ..GuidanceConfig::default()
    };
    let (out, traj) = guide_optimize(&model, p.clone(), &cfg).unwrap();
    assert!(traj.stopped_on_plateau);
    assert!(traj.steps.len() <= cfg.patience + 1);
    let drift = out
        .flat()
        .iter()
        .zip(p.flat())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(drift < 1e-6, "{drift}");
}

#[test]
fn guidance_rejects_bad_inputs() {
    let model = small_model(2);
    let wrong = BlobSceneParams::scattered(16, 16, 4, 2, 0).unwrap();
    assert!(matches!(
        guide_optimize(&model, wrong, &GuidanceConfig::default()),
        Err(Error::InputSize { .. })
    ));
    let p = BlobSceneParams::scattered(32, 32, 4, 2, 0).unwrap();
    let cfg = GuidanceConfig {
        requested: -1.0,
        ..GuidanceConfig::default()
    };
    assert!(guide_optimize(&model, p, &cfg).is_err());
    assert!(BlobSceneParams::scattered(32, 32, 2, 3, 0).is_err());
}

#[test]
fn smoothing_keeps_a_monotone_sequence_monotone() {
    let model = small_model(4);
    let p = BlobSceneParams::scattered(32, 32, 8, 2, 5).unwrap();
    let (_, traj) = guide_optimize(
        &model,
        p,
        &GuidanceConfig {
            requested: 7.0,
            max_steps: 40,
            ..GuidanceConfig::default()
        },
    )
    .unwrap();
    let s = traj.smoothed_loss(5);
    assert_eq!(s.len(), traj.steps.len());
    assert_eq!(s[0], traj.steps[0].loss);
    for w in s.windows(2) {
        assert!(w[1] <= w[0] + 1e-12);
    }
}

#[test]
fn size_bias_identity_ratio_has_no_drift() {
    let (a, b) = (small_model(0), small_model(1));
    let c = corpus(12);
    let ratios = [1.0, 1.5, 2.0, 3.0];
    let r = size_bias_sweep(&[("a", &a), ("b", &b)], &c, &ratios, 3).unwrap();
    assert_eq!(r.rows.len(), 2 * ratios.len());
    for m in ["a", "b"] {
        let row = r.row(m, 1.0).unwrap();
        assert_eq!(row.mean_drift, 0.0);
        assert_eq!(row.mean_abs_drift, 0.0);
        assert!(r.class_drift(m, 1.0).iter().all(|&d| d == 0.0));
    }
    assert_eq!(r.class_bounds.len(), 2);
    let per_class: usize = r.classes.iter().filter(|x| x.model == "a" && x.ratio == 2.0).map(|x| x.n).sum();
    assert_eq!(per_class, 12);
}

#[test]
fn size_bias_preconditions() {
    let m = small_model(0);
    let c = corpus(3);
    assert!(size_bias_sweep(&[("m", &m)], &c, &[2.0], 1).is_err());
    let crowded = generate_corpus(
        &SceneSpec {
            count_min: 31,
            count_max: 32,
            radius_min: 1.0,
            radius_max: 1.5,
            separation: 2.0,
            ..SceneSpec::default()
        },
        Split::Test,
        1,
    )
    .unwrap();
    let big = CountModel::new(ModelConfig::default()).unwrap();
    assert!(size_bias_sweep(&[("m", &big)], &crowded, &[1.0], 1).is_err());
}

#[test]
fn threshold_sweep_semantics() {
    let m = small_model(6);
    let c = corpus(10);
    let kappas: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
    let r = threshold_sweep(&m, &c, &kappas).unwrap();
    assert_eq!(r.rows[0].metrics, evaluate(&m, &c, Inference::default()).unwrap());
    for counts in &r.counts {
        for w in counts.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }
    assert!(kappas.contains(&r.best_kappa));
    assert!(threshold_sweep(&m, &c, &[0.0, 1.0]).is_err());
    assert!(threshold_sweep(&m, &c, &[]).is_err());
}

fn tiny_ablation(variants: &[&str]) -> AblationConfig {
    let train = TrainConfig {
        epochs: 1,
        batch_size: 4,
        ..TrainConfig::default()
    };
    AblationConfig {
        variants: variants.iter().map(|s| s.to_string()).collect(),
        model: small_config(0),
        strong_data: small_spec(),
        weak_data: small_spec(),
        eval_data: small_spec(),
        sizes: CorpusSizes {
            strong: 6,
            weak: 6,
            val: 2,
            eval: 3,
        },
        strong: train.clone(),
        weak: TrainConfig {
            stage: cardcount::harness::Stage::Weak,
            ..train
        },
        kappa: 0.0,
    }
}

#[test]
fn ablation_rejects_unknown_variants() {
    let err = run_ablation(&tiny_ablation(&["full", "w/o-everything"])).err().unwrap();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!("bogus".parse::<Variant>().is_err());
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
}

#[test]
fn single_variant_suite_gives_one_row() {
    let (out, _) = run_ablation(&tiny_ablation(&["full"])).unwrap();
    assert_eq!(out.len(), 1);
    let row = &out[0].row;
    assert_eq!(row.variant, Variant::Full);
    assert_eq!(row.metrics.n, 3);
    assert_eq!(out[0].logs.len(), 2);
}

#[test]
fn ablation_rows_carry_their_loss_weights() {
    let cfg = tiny_ablation(&["no-alignment", "no-pretrain", "density-target", "no-weak"]);
    let (out, _) = run_ablation(&cfg).unwrap();
    for o in &out {
        let (s, w) = variant_configs(o.row.variant, &cfg.strong, &cfg.weak);
        assert_eq!(o.row.strong_weights, s.map(|c| c.weights));
        assert_eq!(o.row.weak_weights, w.map(|c| c.weights));
    }
    let na = &out[0].row;
    assert_eq!(na.strong_weights.unwrap().beta1, 0.0);
    assert_eq!(na.weak_weights.unwrap().beta2, 0.0);
    assert_eq!(out[1].row.strong_weights, None);
    assert_eq!(out[1].row.weak_weights.unwrap().gamma, 0.0);
    assert_eq!(out[2].row.target, TargetKind::Density);
    assert_eq!(out[3].row.weak_weights, None);
}

#[test]
fn csv_tables_round_trip() {
    let m = small_model(6);
    let c = corpus(5);
    let r = threshold_sweep(&m, &c, &[0.0, 0.3, 0.6]).unwrap();
    let t = report::threshold_table(&r);
    let parsed = Table::parse_csv(&t.to_csv()).unwrap();
    assert_eq!(parsed, t);
    assert_eq!(parsed.header, report::THRESHOLD_HEADER);
    let mae: Vec<f64> = parsed.column("mae").unwrap().iter().map(|s| s.parse().unwrap()).collect();
    assert_eq!(mae, r.rows.iter().map(|x| x.metrics.mae).collect::<Vec<_>>());
    assert!(Table::parse_csv("a,b\n1\n").is_err());
    assert!(Table::parse_csv("").is_err());
}
