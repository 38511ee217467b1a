//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. The trained-model criteria take about
//! ten minutes on one core.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use cardcount::autodiff::{check_primitives, grad_check_coords};
use cardcount::datagen::{generate_corpus, sample_scene, Corpus, SceneSpec, Split};
use cardcount::harness::{
    evaluate, predict_corpus, run_guide_suite, run_variant, size_bias_sweep, train_stage, truths,
    render_blob_scene, AblationConfig, AblationData, BlobSceneParams, CorpusSizes, GuideSuiteConfig,
    Inference, Metrics, Stage, TargetKind, TrainConfig, TrainData, Variant, SLOT_WIDTH,
};
use cardcount::losses::guidance_loss;
use cardcount::model::{CountModel, ModelConfig};
use cardcount::raster::{Image, ShapeKind};
use cardcount::targets::{scene_cardinality, SigmaRule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(bool, String), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

/// Scenes shared by the trained-model criteria.
fn base_spec() -> SceneSpec {
    SceneSpec {
        radius_min: 1.5,
        radius_max: 3.0,
        separation: 2.2,
        distractor_max: 3,
        ..SceneSpec::default()
    }
}

fn shifted_spec() -> SceneSpec {
    SceneSpec {
        count_min: 15,
        count_max: 40,
        distractor_max: 2,
        ..base_spec()
    }
}

fn strong_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 12,
        final_lr_fraction: 0.1,
        ..TrainConfig::default()
    }
}

fn ablation_cfg() -> AblationConfig {
    AblationConfig {
        variants: ["full", "no-weak", "no-pretrain"].map(String::from).to_vec(),
        strong_data: SceneSpec { seed: 1, ..base_spec() },
        weak_data: SceneSpec { seed: 2, ..shifted_spec() },
        eval_data: SceneSpec { seed: 3, ..shifted_spec() },
        sizes: CorpusSizes {
            strong: 2000,
            weak: 1000,
            val: 200,
            eval: 200,
        },
        strong: strong_cfg(),
        weak: TrainConfig {
            stage: Stage::Weak,
            epochs: 8,
            final_lr_fraction: 0.1,
            ..TrainConfig::default()
        },
        ..AblationConfig::default()
    }
}

fn c1_cardinality_conservation() -> Check {
    let spec = SceneSpec {
        count_min: 0,
        count_max: 40,
        separation: 0.0,
        distractor_max: 5,
        seed: 101,
        ..SceneSpec::default()
    };
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let s = sample_scene(&spec, &mut rng).map_err(err)?;
        let q = s.count() as f64;
        let map = scene_cardinality(&s.scene, s.category, 8).map_err(err)?;
        let total: f64 = map.grid.data.iter().sum();
        worst = worst.max((total - q).abs() / q.max(1.0));
    }
    let elapsed = start.elapsed();
    let ok = worst <= 1e-9 && elapsed < Duration::from_secs(10);
    Ok((ok, format!("worst relative error {worst:.2e} over 1000 scenes in {}", secs(elapsed))))
}

fn c2_gradient_fidelity(model: &CountModel) -> Check {
    let start = Instant::now();
    let mut worst_primitive = (0.0f64, "");
    let mut kinks = 0;
    for seed in [1, 2, 3] {
        for (name, r) in check_primitives(seed).map_err(err)? {
            kinks += r.at_kink.len();
            if r.max_rel_error >= worst_primitive.0 {
                worst_primitive = (r.max_rel_error, name);
            }
        }
    }

    // A requested count far from the prediction keeps |pred - Q| away from
    // its kink.
    let spec = SceneSpec { seed: 7, ..base_spec() };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sample = sample_scene(&spec, &mut rng).map_err(err)?;
    let cat = sample.category as usize;
    let img = &sample.scene.image;
    let requested = model.predict_count(img, cat).map_err(err)? + 25.0;
    let coords: Vec<usize> = (0..256).map(|_| rng.random_range(0..img.pixels.len())).collect();
    let image_report = grad_check_coords(
        |t, x| {
            let out = model.forward_frozen(t, x, cat)?;
            guidance_loss(t, out.count, requested)
        },
        &[img.height, img.width, 1],
        &img.pixels,
        1e-5,
        &coords,
    )
    .map_err(err)?;

    // Every slot half on, so each parameter moves the loss by more than the
    // rounding floor of a central difference. A switched-off slot has
    // gradients near 1e-9 that differences cannot resolve.
    let mut blobs = BlobSceneParams::scattered(64, 64, 12, 5, 7).map_err(err)?;
    let mut point = blobs.flat();
    for slot in point.chunks_exact_mut(SLOT_WIDTH) {
        slot[0] = rng.random_range(-0.1..0.1);
    }
    blobs.set_flat(&point);
    let shape = [blobs.slots.len(), SLOT_WIDTH];
    let blob_report = grad_check_coords(
        |t, p| {
            let image = render_blob_scene(t, p, &blobs)?;
            let out = model.forward_frozen(t, image, 0)?;
            guidance_loss(t, out.count, requested)
        },
        &shape,
        &blobs.flat(),
        1e-5,
        &(0..shape[0] * shape[1]).collect::<Vec<_>>(),
    )
    .map_err(err)?;
    let elapsed = start.elapsed();
    let end_to_end_kinks = image_report.at_kink.len() + blob_report.at_kink.len();
    let ok = worst_primitive.0 <= 1e-6
        && kinks == 0
        && image_report.max_rel_error <= 1e-4
        && blob_report.max_rel_error <= 1e-4
        && end_to_end_kinks == 0
        && elapsed < Duration::from_secs(120);
    Ok((
        ok,
        format!(
            "primitives worst {:.2e} ({}), image {:.2e} over {} coords, blob params {:.2e} over {} coords, {} kinks, {}",
            worst_primitive.0,
            worst_primitive.1,
            image_report.max_rel_error,
            image_report.checked,
            blob_report.max_rel_error,
            blob_report.checked,
            kinks + end_to_end_kinks,
            secs(elapsed)
        ),
    ))
}

struct Trained {
    model: CountModel,
    data: AblationData,
    held_out: Corpus,
    metrics: Metrics,
}

fn c3_train() -> Result<(Trained, Duration), String> {
    let cfg = ablation_cfg();
    let start = Instant::now();
    let data = AblationData::generate(&cfg).map_err(err)?;
    let (model, _) = train_stage(
        CountModel::new(cfg.model.clone()).map_err(err)?,
        TrainData {
            primary: &data.strong,
            strong: None,
            val: Some(&data.strong_val),
        },
        &cfg.strong,
    )
    .map_err(err)?;
    let elapsed = start.elapsed();
    let held_out = generate_corpus(&cfg.strong_data, Split::Test, 200).map_err(err)?;
    let metrics = evaluate(&model, &held_out, Inference::default()).map_err(err)?;
    Ok((
        Trained {
            model,
            data,
            held_out,
            metrics,
        },
        elapsed,
    ))
}

fn c3_convergence(t: &Trained, elapsed: Duration) -> Check {
    let m = &t.metrics;
    let ok = m.mae <= 1.5 && m.rmse <= 2.5 && elapsed < Duration::from_secs(30 * 60);
    Ok((
        ok,
        format!("held-out MAE {:.3} RMSE {:.3} on {} scenes, trained in {}", m.mae, m.rmse, m.n, secs(elapsed)),
    ))
}

fn union_mae(model: &CountModel, a: &Corpus, b: &Corpus) -> Result<f64, String> {
    let mut preds = predict_corpus(model, a, Inference::default()).map_err(err)?;
    preds.extend(predict_corpus(model, b, Inference::default()).map_err(err)?);
    let mut truth = truths(a);
    truth.extend(truths(b));
    Ok(Metrics::from_pairs(&preds, &truth).map_err(err)?.mae)
}

fn c4_hybrid_ordering(t: &Trained) -> Check {
    let cfg = ablation_cfg();
    let full = run_variant(Variant::Full, &cfg, &t.data, Some(&t.model)).map_err(err)?;
    let no_weak = run_variant(Variant::NoWeak, &cfg, &t.data, Some(&t.model)).map_err(err)?;
    let no_pre = run_variant(Variant::NoPretrain, &cfg, &t.data, None).map_err(err)?;
    let (f, s, w) = (
        full.row.metrics.mae,
        no_weak.row.metrics.mae,
        no_pre.row.metrics.mae,
    );
    let improvement = 1.0 - f / s;
    let mixed = |m: &CountModel| union_mae(m, &t.held_out, &t.data.eval);
    let (mf, ms, mw) = (mixed(&full.model)?, mixed(&no_weak.model)?, mixed(&no_pre.model)?);
    let ok = improvement >= 0.2 && mf < mw && ms < mw && f < w && w < s;
    Ok((
        ok,
        format!(
            "shifted MAE full {f:.3} / no-pretrain {w:.3} / no-weak {s:.3} ({:.1}% better than strong-only); \
             mixed MAE full {mf:.3} / no-weak {ms:.3} / no-pretrain {mw:.3}",
            100.0 * improvement
        ),
    ))
}

fn c5_size_bias() -> Check {
    let start = Instant::now();
    let spec = SceneSpec {
        kinds: vec![ShapeKind::Disk],
        count_min: 1,
        count_max: 5,
        radius_min: 2.0,
        radius_max: 3.0,
        scale_min: 0.5,
        scale_max: 3.0,
        separation: 2.0,
        seed: 1,
        ..SceneSpec::default()
    };
    let train = generate_corpus(&spec, Split::Train, 2000).map_err(err)?;
    let val = generate_corpus(&spec, Split::Val, 200).map_err(err)?;
    let large = SceneSpec { scale_min: 1.5, ..spec.clone() };
    let test = generate_corpus(&large, Split::Test, 200).map_err(err)?;
    let twin = |target| -> Result<CountModel, String> {
        let cfg = TrainConfig {
            target,
            sigma: SigmaRule::default(),
            epochs: 6,
            final_lr_fraction: 0.1,
            ..TrainConfig::default()
        };
        let model = CountModel::new(ModelConfig { seed: 1, ..ModelConfig::default() }).map_err(err)?;
        let data = TrainData {
            primary: &train,
            strong: None,
            val: Some(&val),
        };
        Ok(train_stage(model, data, &cfg).map_err(err)?.0)
    };
    let car = twin(TargetKind::Cardinality)?;
    let den = twin(TargetKind::Density)?;
    let ratios = [1.5, 2.0, 3.0];
    let report = size_bias_sweep(&[("cardinality", &car), ("density", &den)], &test, &[1.0, 1.5, 2.0, 3.0], 3)
        .map_err(err)?;
    let mut ok = true;
    let mut detail = Vec::new();
    for r in ratios {
        let c = report.row("cardinality", r).ok_or("missing row")?.mean_abs_drift;
        let d = report.row("density", r).ok_or("missing row")?.mean_abs_drift;
        let classes = report.class_drift("density", r);
        let grows = classes.windows(2).all(|w| w[1] > w[0]);
        ok &= c < d && grows;
        let classes: Vec<String> = classes.iter().map(|v| format!("{v:+.3}")).collect();
        detail.push(format!("ratio {r}: |drift| car {c:.3} den {d:.3}, den by class [{}]", classes.join(" ")));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(3600);
    Ok((ok, format!("{}; {}", detail.join("; "), secs(elapsed))))
}

fn c6_guidance(model: &CountModel) -> Check {
    let start = Instant::now();
    let cfg = GuideSuiteConfig::default();
    let runs = run_guide_suite(model, &cfg).map_err(err)?;
    let successes = runs.iter().filter(|r| r.success).count();
    let within_budget = runs.iter().all(|r| r.trajectory.steps.len() <= 150);
    let smooth_monotone = runs.iter().all(|r| {
        r.trajectory
            .smoothed_loss(5)
            .windows(2)
            .all(|w| w[1] <= w[0])
    });
    let rate = successes as f64 / runs.len() as f64;
    let ok = rate >= 0.7 && within_budget && smooth_monotone;
    Ok((
        ok,
        format!(
            "{successes}/{} runs hit the requested count ({:.1}%), budget respected {within_budget}, \
             smoothed loss non-increasing {smooth_monotone}, {}",
            runs.len(),
            100.0 * rate,
            secs(start.elapsed())
        ),
    ))
}

fn c7_threshold(model: &CountModel) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let spec = SceneSpec { seed: 77, ..base_spec() };
    let mut inputs: Vec<(Image, usize)> = Vec::new();
    for i in 0..100 {
        if i % 2 == 0 {
            let s = sample_scene(&spec, &mut rng).map_err(err)?;
            inputs.push((s.scene.image, s.category as usize));
        } else {
            let pixels = (0..64 * 64).map(|_| rng.random::<f64>()).collect();
            let img = Image {
                width: 64,
                height: 64,
                pixels,
            };
            inputs.push((img, rng.random_range(0..2)));
        }
    }
    let kappas: Vec<f64> = (0..10).map(|k| k as f64 / 10.0).collect();
    let mut exact = 0;
    let mut monotone = 0;
    for (img, cat) in &inputs {
        let full = model.predict_count(img, *cat).map_err(err)?;
        let at_zero = model.thresholded_count(img, *cat, 0.0).map_err(err)?;
        if full.to_bits() == at_zero.to_bits() {
            exact += 1;
        }
        let counts = kappas
            .iter()
            .map(|&k| model.thresholded_count(img, *cat, k))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        if counts.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
    }
    let ok = exact == 100 && monotone == 100;
    Ok((ok, format!("kappa 0 bit-exact on {exact}/100, monotone on {monotone}/100")))
}

fn c8_metrics() -> Check {
    let m = Metrics::from_errors(&[1.0, -1.0, 3.0, -3.0, 0.0]).map_err(err)?;
    Ok((m.mae == 1.6 && m.rmse == 2.0, format!("MAE {} RMSE {}", m.mae, m.rmse)))
}

/// Two independently rendered scenes side by side, so every object lies
/// inside one tile.
fn c9_tiling(t: &Trained) -> Check {
    let spec = SceneSpec {
        query: Some(0),
        seed: 99,
        ..base_spec()
    };
    let left = generate_corpus(&spec, Split::Test, 100).map_err(err)?;
    let right = generate_corpus(&SceneSpec { seed: 98, ..spec.clone() }, Split::Test, 100).map_err(err)?;
    let mut mismatch = 0.0f64;
    let mut errors = Vec::new();
    for (a, b) in left.samples().zip(right.samples()) {
        let (ia, ib) = (&a.scene.image, &b.scene.image);
        let mut pixels = Vec::with_capacity(128 * 64);
        for y in 0..64 {
            pixels.extend_from_slice(&ia.pixels[y * 64..(y + 1) * 64]);
            pixels.extend_from_slice(&ib.pixels[y * 64..(y + 1) * 64]);
        }
        let wide = Image {
            width: 128,
            height: 64,
            pixels,
        };
        let tiled = t.model.tiled_count(&wide, 0, 64, 64, spec.background).map_err(err)?;
        let per_tile = t.model.predict_count(ia, 0).map_err(err)? + t.model.predict_count(ib, 0).map_err(err)?;
        mismatch = mismatch.max((tiled - per_tile).abs());
        errors.push(tiled - (a.count() + b.count()) as f64);
    }
    let tiled_mae = Metrics::from_errors(&errors).map_err(err)?.mae;
    let bound = 2.0 * t.metrics.mae;
    let ok = mismatch == 0.0 && tiled_mae <= bound;
    Ok((
        ok,
        format!(
            "max |tiled - sum of tiles| {mismatch}, mean |tiled - truth| {tiled_mae:.3} vs bound {bound:.3} on 100 two-tile images"
        ),
    ))
}

fn random_spec(rng: &mut ChaCha8Rng) -> SceneSpec {
    // Kept sparse enough that placement always succeeds.
    let image_size = rng.random_range(16..=40);
    let count_min = rng.random_range(0..=3);
    let radius_min = rng.random_range(0.4..1.5);
    SceneSpec {
        image_size,
        kinds: if rng.random_bool(0.5) {
            vec![ShapeKind::Disk, ShapeKind::Square]
        } else {
            vec![ShapeKind::Square]
        },
        count_min,
        count_max: count_min + rng.random_range(0..=4),
        distractor_max: rng.random_range(0..=2),
        radius_min,
        radius_max: radius_min + rng.random_range(0.0..1.0),
        separation: rng.random_range(0.0..2.0),
        noise: rng.random_range(0.0..0.1),
        negative_points: rng.random_range(0..=6),
        seed: rng.random(),
        ..SceneSpec::default()
    }
}

fn c10_serialization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let dir = std::env::temp_dir().join(format!("cardcount-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(err)?;
    let mut corpora = 0;
    let mut checkpoints = 0;
    for i in 0..100 {
        let split = [Split::Train, Split::Val, Split::Test][i % 3];
        let n = rng.random_range(0..5);
        // A crowded draw can fail placement; that is not what this checks.
        let corpus = (0..20)
            .find_map(|_| generate_corpus(&random_spec(&mut rng), split, n).ok())
            .ok_or("no placeable random spec in 20 draws")?;
        let bytes = corpus.to_bytes();
        let back = Corpus::from_bytes(&bytes).map_err(err)?;
        if back == corpus && back.to_bytes() == bytes {
            corpora += 1;
        }

        let config = ModelConfig {
            input_size: 16,
            grid_factor: 8,
            widths: (0..3).map(|_| rng.random_range(1..=5)).collect(),
            embed_dim: rng.random_range(1..=6),
            categories: rng.random_range(1..=3),
            seed: rng.random(),
        };
        let model = CountModel::new(config).map_err(err)?;
        let path = dir.join(format!("{i}.ckpt"));
        model.save(&path).map_err(err)?;
        let loaded = CountModel::load(&path).map_err(err)?;
        let same_params = loaded.params().iter().zip(model.params()).all(|(a, b)| {
            a.name == b.name
                && a.shape == b.shape
                && a.values.iter().map(|v| v.to_bits()).eq(b.values.iter().map(|v| v.to_bits()))
        });
        if same_params && loaded.config() == model.config() && loaded.to_bytes() == model.to_bytes() {
            checkpoints += 1;
        }
    }
    std::fs::remove_dir_all(&dir).map_err(err)?;
    Ok((
        corpora == 100 && checkpoints == 100,
        format!("corpus {corpora}/100, checkpoint {checkpoints}/100 identical after a round trip"),
    ))
}

fn report(results: &mut Vec<(usize, bool)>, id: usize, name: &str, check: Check) {
    let (ok, detail) = check.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!("criterion {id:>2} {} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    results.push((id, ok));
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    report(&mut results, 1, "cardinality conservation", c1_cardinality_conservation());
    report(&mut results, 8, "metric hand case", c8_metrics());
    report(&mut results, 10, "serialization round trips", c10_serialization());
    match c3_train() {
        Ok((trained, elapsed)) => {
            report(&mut results, 3, "toy training convergence", c3_convergence(&trained, elapsed));
            report(&mut results, 2, "gradient fidelity", c2_gradient_fidelity(&trained.model));
            report(&mut results, 7, "threshold semantics", c7_threshold(&trained.model));
            report(&mut results, 9, "tiling consistency", c9_tiling(&trained));
            report(&mut results, 6, "guidance control", c6_guidance(&trained.model));
            report(&mut results, 4, "hybrid training ordering", c4_hybrid_ordering(&trained));
        }
        Err(e) => {
            for (id, name) in [
                (3, "toy training convergence"),
                (2, "gradient fidelity"),
                (7, "threshold semantics"),
                (9, "tiling consistency"),
                (6, "guidance control"),
                (4, "hybrid training ordering"),
            ] {
                report(&mut results, id, name, Err(format!("training failed: {e}")));
            }
        }
    }
    report(&mut results, 5, "size-bias reproduction", c5_size_bias());
    results.sort();
    let passed = results.iter().filter(|(_, ok)| *ok).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
