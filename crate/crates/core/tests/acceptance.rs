//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and fails at
//! the end if any criterion failed. Run with `--nocapture` to see the lines:
//!
//! ```text
//! cargo test -p eraser-core --test acceptance -- --nocapture
//! ```
//!
//! Everything runs inside a single test so criteria execute in a fixed order
//! and timing-sensitive ones are not measured while other tests compete for
//! the CPU.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use common::{bits, clean_references, make_references, toy_config, untrained};
use eraser_core::backend::toy::{
    clean_sample, concept_prompts, pretrain_toy, ToyBackend, ToyPretrainConfig, CONCEPTS,
};
use eraser_core::backend::DiffusionBackend;
use eraser_core::eval::{
    score_images, tally_detections, ConceptClassifier, Detection, Metric, MetricReport,
    NUDITY_CATEGORIES,
};
use eraser_core::fusion::{
    add_positional, fuse, make_multiscale_tokens, noise_latent, FusionConfig, FusionTransformer,
    LatentGrid, ScaleSet,
};
use eraser_core::manifold::{
    build_prompt_bank, diagnose_manifold, sample_concept_embedding, sample_weights, DirichletSpec,
    TextEncoder,
};
use eraser_core::objective::{build_target, erasure_loss, GuidanceSpec};
use eraser_core::rng::{self, derive_seed};
use eraser_core::trainer::{
    erase, load_erased, run, Checkpoint, EraseOptions, StepInputs, Trainer,
};
use image::{DynamicImage, GrayImage, Luma};
use rand::Rng as _;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------------------
// Manifold

fn simplex_suite() -> Outcome {
    let start = Instant::now();
    let spec = DirichletSpec::new(0.7).unwrap();
    let mut rng = rng::stream(0, "acceptance-simplex", 0);
    let n = 10_000;
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        draws.push(sample_weights(&spec, 4, &mut rng).unwrap());
    }
    let elapsed = start.elapsed();
    let min = draws
        .iter()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let worst_sum = draws
        .iter()
        .map(|w| (w.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let mut worst_z: f64 = 0.0;
    for i in 0..4 {
        let xs: Vec<f64> = draws.iter().map(|w| w[i]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        worst_z = worst_z.max((mean - 0.25).abs() / se);
    }
    outcome(
        min >= 0.0 && worst_sum <= 1e-6 && worst_z <= 3.0 && elapsed < Duration::from_secs(5),
        format!(
            "min w {min:.3e}, max |sum-1| {worst_sum:.1e}, worst |mean-0.25|/SE {worst_z:.2}, {:.2}s",
            secs(elapsed)
        ),
    )
}

fn hull_suite(backend: &ToyBackend) -> Outcome {
    let start = Instant::now();
    let prompts: Vec<String> = concept_prompts("square").into_iter().take(5).collect();
    let bank = build_prompt_bank("square", &prompts, backend.text_encoder()).unwrap();
    let lo = bits_free(&bank.embeddings.min(0).unwrap());
    let hi = bits_free(&bank.embeddings.max(0).unwrap());
    let spec = DirichletSpec::new(0.7).unwrap();
    let mut rng = rng::stream(2, "acceptance-hull", 0);
    let mut violations = 0usize;
    for _ in 0..1000 {
        let e = sample_concept_embedding(&bank, &spec, 0.0, &mut rng).unwrap();
        let v = bits_free(&e.combined);
        violations += v
            .iter()
            .zip(lo.iter().zip(&hi))
            .filter(|(x, (l, h))| *x < l || *x > h)
            .count();
    }
    let elapsed = start.elapsed();
    outcome(
        violations == 0 && elapsed < Duration::from_secs(5),
        format!(
            "{violations} coordinate violations over 1000 x {} coordinates, {:.2}s",
            lo.len(),
            secs(elapsed)
        ),
    )
}

fn bits_free(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn tau_variance() -> Outcome {
    let n = 10_000;
    let mut rows = Vec::new();
    for tau in [0.25, 0.7, 2.0] {
        let spec = DirichletSpec::new(tau).unwrap();
        let mut rng = rng::stream(3, "acceptance-tau", (tau * 100.0) as u64);
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..n {
            let w = sample_weights(&spec, 4, &mut rng).unwrap();
            for i in 0..4 {
                sum[i] += w[i];
                sq[i] += w[i] * w[i];
            }
        }
        let var: f64 = (0..4)
            .map(|i| sq[i] / n as f64 - (sum[i] / n as f64).powi(2))
            .sum::<f64>()
            / 4.0;
        let alpha = 1.0 / tau;
        let analytic = 3.0 / (16.0 * (4.0 * alpha + 1.0));
        rows.push((tau, var, analytic));
    }
    let increasing = rows.windows(2).all(|w| w[1].1 > w[0].1);
    let detail = rows
        .iter()
        .map(|(t, v, a)| format!("tau {t}: Var {v:.5} (analytic {a:.5})"))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(
        increasing,
        format!("{detail}. Concentration is 1/tau, so larger tau gives sparser weights"),
    )
}

// ---------------------------------------------------------------------------
// Fusion and objective

fn token_arithmetic() -> Outcome {
    let scales = ScaleSet::default();
    let big = scales.sequence_length(64, 64).unwrap();
    let small = scales.sequence_length(8, 8).unwrap();
    let z = LatentGrid {
        values: Tensor::zeros((1, 1, 8, 8), DType::F64, &Device::Cpu).unwrap(),
        timestep: 0,
        source_id: String::new(),
    };
    let built = make_multiscale_tokens(&z, &scales).unwrap();
    let built_len = built.tokens.dim(1).unwrap();
    outcome(
        big == 7424 && small == 116 && built_len == 116,
        format!("64x64 -> {big}, 8x8 -> {small} (materialized {built_len})"),
    )
}

fn noised(backend: &dyn DiffusionBackend, seed: u64) -> LatentGrid {
    let refs = clean_references(backend, "square", 2);
    let clean = Tensor::stack(&[refs[0].1.clone(), refs[1].1.clone()], 0).unwrap();
    let mut rng = rng::stream(seed, "acceptance-noise", 0);
    noise_latent(&clean, 20, backend.schedule(), &mut rng).unwrap()
}

fn degenerate_identities(backend: &ToyBackend) -> Outcome {
    let z = noised(backend, 4);
    let tokens =
        add_positional(&make_multiscale_tokens(&z, &ScaleSet::default()).unwrap()).unwrap();
    let random_cfg = FusionConfig {
        zero_init_output: false,
        ..FusionConfig::default()
    };
    let (random, _) = FusionTransformer::init(&random_cfg, 1, 5, DType::F64, &Device::Cpu).unwrap();
    let (zeroed, _) =
        FusionTransformer::init(&FusionConfig::default(), 1, 5, DType::F64, &Device::Cpu).unwrap();
    let z_bits = bits(&z.values);

    let lambda_zero = bits(&fuse(&z, &tokens, &random, 0.0).unwrap().values) == z_bits;
    let random_moves = bits(&fuse(&z, &tokens, &random, 0.5).unwrap().values) != z_bits;
    let zero_init = [0.5, 1.0, 3.0, -2.0]
        .iter()
        .all(|l| bits(&fuse(&z, &tokens, &zeroed, *l).unwrap().values) == z_bits);

    let frozen = backend.snapshot().unwrap();
    let fused = fuse(&z, &tokens, &random, 0.5).unwrap();
    let cond = backend.condition("a photo of a square").unwrap();
    let uncond = backend.condition("").unwrap();
    let spec = GuidanceSpec {
        gamma: 0.0,
        uncond_embedding: uncond.clone(),
    };
    let target = build_target(frozen.as_ref(), &fused, 20, &cond, &spec).unwrap();
    let batch = uncond.unsqueeze(0).unwrap().repeat((2, 1, 1)).unwrap();
    let direct = frozen.predict_noise(&fused.values, 20, &batch).unwrap();
    let gamma_zero = bits(&target) == bits(&direct);

    outcome(
        lambda_zero && zero_init && gamma_zero && random_moves,
        format!(
            "lambda=0 identity {lambda_zero}, zero-init identity for lambda in {{0.5,1,3,-2}} \
             {zero_init}, gamma=0 target equals unconditional prediction {gamma_zero}"
        ),
    )
}

/// Loss with the guidance target held fixed, as the analytic gradient sees it.
fn fixed_target_loss(t: &Trainer<'_>, inputs: &StepInputs, target: &Tensor) -> f64 {
    let cfg = t.config();
    let tokens =
        add_positional(&make_multiscale_tokens(&inputs.noised, &cfg.scales).unwrap()).unwrap();
    let fused = fuse(&inputs.noised, &tokens, t.fusion(), cfg.lambda).unwrap();
    let loss = erasure_loss(
        t.denoiser(),
        &fused,
        inputs.timestep,
        &inputs.embedding,
        target,
        cfg.reduction,
    )
    .unwrap();
    loss.to_scalar::<f64>().unwrap()
}

fn gradient_check(backend: &ToyBackend) -> Outcome {
    let start = Instant::now();
    let mut config = toy_config("erase-square.toml", std::path::Path::new("unused"));
    config.fusion_zero_init = false;
    config.batch_size = 2;
    let t = Trainer::from_parts(
        &config,
        backend,
        &concept_prompts("square"),
        clean_references(backend, "square", 4),
        None,
    )
    .unwrap();
    let mut rng = rng::stream(6, "acceptance-gradcheck", 0);
    let inputs = t.draw_inputs(&mut rng).unwrap();
    let out = t.forward(&inputs).unwrap();
    let grads = out.loss.backward().unwrap();
    let vars = t.trainable_vars();
    let (fusion_vars, denoiser_vars): (Vec<_>, Vec<_>) =
        vars.iter().partition(|(k, _)| k.starts_with("fusion."));

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    let mut checked = 0;
    for group in [&fusion_vars, &denoiser_vars] {
        for _ in 0..10 {
            let (name, var) = group[rng.gen_range(0..group.len())];
            let shape = var.as_tensor().dims().to_vec();
            let original = var
                .as_tensor()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            let idx = rng.gen_range(0..original.len());
            let analytic = grads
                .get(var.as_tensor())
                .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[idx])
                .unwrap_or(0.0);
            let eval_at = |delta: f64| {
                let mut v = original.clone();
                v[idx] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap())
                    .unwrap();
                fixed_target_loss(&t, &inputs, &out.target)
            };
            let numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
            eval_at(0.0);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-300);
            if rel > worst {
                worst = rel;
                worst_name = format!("{name}[{idx}] analytic {analytic:.6e} numeric {numeric:.6e}");
            }
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-4 && checked == 20 && elapsed < Duration::from_secs(60),
        format!(
            "{checked} parameters (10 fusion, 10 denoiser), worst relative error {worst:.2e} at \
             {worst_name}, {:.2}s",
            secs(elapsed)
        ),
    )
}

fn frozen_isolation(backend: &ToyBackend) -> Outcome {
    let mut config = toy_config("erase-square.toml", std::path::Path::new("unused"));
    config.steps = 3;
    config.train_scope = Default::default();
    let mut t = Trainer::from_parts(
        &config,
        backend,
        &concept_prompts("square"),
        clean_references(backend, "square", 4),
        None,
    )
    .unwrap();
    let mut rng = rng::stream(7, "acceptance-isolation", 0);
    let inputs = t.draw_inputs(&mut rng).unwrap();
    let tokens =
        add_positional(&make_multiscale_tokens(&inputs.noised, &config.scales).unwrap()).unwrap();
    let fused = fuse(&inputs.noised, &tokens, t.fusion(), config.lambda).unwrap();
    let spec = GuidanceSpec {
        gamma: config.gamma,
        uncond_embedding: backend.condition("").unwrap(),
    };
    let before = bits(
        &build_target(
            t.frozen(),
            &fused,
            inputs.timestep,
            &inputs.embedding,
            &spec,
        )
        .unwrap(),
    );
    let frozen_hash = t.frozen_params().content_hash().unwrap();
    let trainable_hash = t.denoiser_params().content_hash().unwrap();
    run(&mut t, None, None).unwrap();
    let after = bits(
        &build_target(
            t.frozen(),
            &fused,
            inputs.timestep,
            &inputs.embedding,
            &spec,
        )
        .unwrap(),
    );
    let updated = t.denoiser_params().content_hash().unwrap() != trainable_hash;
    let same = before == after && t.frozen_params().content_hash().unwrap() == frozen_hash;
    outcome(
        same && updated,
        format!("trainable weights updated {updated}, target and frozen hash unchanged {same}"),
    )
}

// ---------------------------------------------------------------------------
// End to end

struct EndToEnd {
    backend: ToyBackend,
    reports: Vec<MetricReport>,
}

fn clean_accuracy(backend: &ToyBackend) -> f64 {
    let classifier = backend.classifier();
    let mut rng = rng::stream(8, "acceptance-clean", 0);
    let mut hits = 0;
    let mut total = 0;
    for concept in CONCEPTS {
        for _ in 0..200 {
            let img = clean_sample(concept, &mut rng).unwrap();
            hits += (classifier.predict(&img).unwrap() == concept) as usize;
            total += 1;
        }
    }
    hits as f64 / total as f64
}

fn toy_end_to_end(dir: &std::path::Path) -> (Outcome, Option<EndToEnd>) {
    let start = Instant::now();
    // Pretrain from scratch so the timing covers the whole pipeline; the
    // result is stored in the shared cache for the other test binaries.
    let backend = match pretrain_toy(0, &ToyPretrainConfig::default(), None) {
        Ok(b) => b,
        Err(e) => return (outcome(false, format!("pretraining failed: {e}")), None),
    };
    let pretrain_time = start.elapsed();
    let accuracy = clean_accuracy(&backend);

    let config = toy_config("erase-square.toml", &dir.join("refs-square"));
    make_references(&backend, &config);
    let mut trainer = Trainer::new(&config, &backend, None).unwrap();
    let mut probe_rng = rng::stream(9, "acceptance-probe", 0);
    let probe: Vec<StepInputs> = (0..64)
        .map(|_| trainer.draw_inputs(&mut probe_rng).unwrap())
        .collect();
    let loss_before = trainer.evaluate(&probe).unwrap();
    let erased = run(&mut trainer, None, None).unwrap();
    let loss_after = trainer.evaluate(&probe).unwrap();
    let reduction = 1.0 - loss_after / loss_before;

    let model = load_erased(&backend, &erased.checkpoint).unwrap();
    let (asr, mcp) = common::asr_and_mcp(&backend, model.as_ref(), "square", "circle");
    let elapsed = start.elapsed();
    let pass = accuracy >= 0.99
        && erased.records.len() == 500
        && reduction >= 0.5
        && asr.scalar() <= 0.2
        && mcp.scalar() >= 0.9
        && elapsed < Duration::from_secs(300);
    let detail = format!(
        "clean classifier accuracy {accuracy:.3}; 500 steps; probe loss {loss_before:.4} -> \
         {loss_after:.4} ({:.1}% lower); ASR(square) {:.3} over {}; MCP(circle) {:.3} over {}; \
         {:.0}s total ({:.0}s pretraining); erasure config lr {} scope {:?}",
        reduction * 100.0,
        asr.scalar(),
        asr.n_samples,
        mcp.scalar(),
        mcp.n_samples,
        secs(elapsed),
        secs(pretrain_time),
        config.learning_rate,
        config.train_scope,
    );
    (
        outcome(pass, detail),
        Some(EndToEnd {
            backend,
            reports: vec![asr, mcp],
        }),
    )
}

fn determinism_and_resume(backend: &ToyBackend, dir: &std::path::Path) -> Outcome {
    let mut config = toy_config("erase-square.toml", &dir.join("refs-square"));
    config.steps = 40;
    let full_a = erase(&config, backend, EraseOptions::default(), None).unwrap();
    let full_b = erase(&config, backend, EraseOptions::default(), None).unwrap();
    let hash_a = full_a.checkpoint.content_hash().unwrap();
    let same_hash = hash_a == full_b.checkpoint.content_hash().unwrap();

    let k = 17;
    let partial = erase(
        &config,
        backend,
        EraseOptions {
            stop_at: Some(k),
            ..Default::default()
        },
        None,
    )
    .unwrap();
    let path = dir.join("step17.safetensors");
    partial.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path, DType::F64, &Device::Cpu).unwrap();
    let mut log = Vec::new();
    let resumed = erase(
        &config,
        backend,
        EraseOptions {
            resume: Some(&loaded),
            ..Default::default()
        },
        Some(&mut log),
    )
    .unwrap();
    let logged: Vec<u64> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["loss"].as_f64().unwrap().to_bits()
        })
        .collect();
    let expected: Vec<u64> = full_a.records[k..]
        .iter()
        .map(|r| r.loss.unwrap().to_bits())
        .collect();
    let resume_equal = logged == expected;
    let resume_hash = resumed.checkpoint.content_hash().unwrap() == hash_a;
    outcome(
        same_hash && resume_equal && resume_hash,
        format!(
            "two 40-step runs hash-equal {same_hash}; resume from step {k} via file: {} logged \
             losses bitwise equal {resume_equal}, final hash equal {resume_hash}",
            logged.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// Metrics

/// Labels encoded in the first pixel: 0 = camera, 1 = phone.
struct PixelLabels;

impl ConceptClassifier for PixelLabels {
    fn id(&self) -> String {
        "pixel-labels".into()
    }

    fn scores(&self, image: &DynamicImage, labels: &[String]) -> eraser_core::Result<Vec<f64>> {
        let truth = if image.to_luma8().get_pixel(0, 0).0[0] == 0 {
            "camera"
        } else {
            "phone"
        };
        Ok(labels.iter().map(|l| (l == truth) as u8 as f64).collect())
    }
}

fn metric_fixtures(e2e: Option<&EndToEnd>) -> Outcome {
    let images: Vec<(String, DynamicImage)> = (0..63)
        .map(|i| {
            let v = if i % 13 == 5 { 1 } else { 0 };
            let img = DynamicImage::ImageLuma8(GrayImage::from_pixel(2, 2, Luma([v])));
            (format!("fixture_{i:02}"), img)
        })
        .collect();
    let positives_by_hand = (0..63).filter(|i| i % 13 != 5).count();
    let report = score_images(
        &PixelLabels,
        &images,
        "camera",
        &["phone".to_string()],
        Metric::Mcp,
        0,
    )
    .unwrap();
    let mcp = report.scalar();
    let mcp_exact = positives_by_hand == 58 && mcp == 58.0 / 63.0 && report.n_samples == 63;

    // Synthetic detector output with firings counted by hand below.
    let det = |c: &str, p: f64| Detection {
        category: c.into(),
        confidence: p,
    };
    let fixture: Vec<Vec<Detection>> = vec![
        vec![det("BELLY_EXPOSED", 0.91), det("FEET_EXPOSED", 0.62)],
        vec![det("BELLY_EXPOSED", 0.59)],
        vec![det("ARMPITS_EXPOSED", 0.60), det("ARMPITS_EXPOSED", 0.95)],
        vec![],
        vec![det("FACE_FEMALE", 0.99)],
        vec![det("MALE_BREAST_EXPOSED", 0.7), det("FACE_MALE", 0.3)],
        vec![det("FEET_EXPOSED", 0.61), det("BELLY_EXPOSED", 0.61)],
    ];
    let mut truth: BTreeMap<String, usize> = NUDITY_CATEGORIES
        .iter()
        .map(|c| (c.to_string(), 0))
        .collect();
    truth.insert("BELLY_EXPOSED".into(), 2);
    truth.insert("FEET_EXPOSED".into(), 2);
    truth.insert("ARMPITS_EXPOSED".into(), 1);
    truth.insert("MALE_BREAST_EXPOSED".into(), 1);
    truth.insert("other".into(), 1);
    truth.insert("images_flagged".into(), 4);
    let counts = tally_detections(fixture.iter().map(Vec::as_slice), &NUDITY_CATEGORIES, 0.6);
    let counts_exact = counts == truth;

    let mut integral = true;
    let mut checked = 0;
    if let Some(e) = e2e {
        for r in &e.reports {
            let x = r.scalar() * r.n_samples as f64;
            integral &= (x - x.round()).abs() <= 1e-9;
            checked += 1;
        }
    }
    integral &= (mcp * 63.0 - 58.0).abs() <= 1e-9;
    outcome(
        mcp_exact && counts_exact && integral && checked == 2,
        format!(
            "MCP fixture {:.4}% (58/63 exact {mcp_exact}); category counts match {counts_exact}; \
             value*n integral for {} reports {integral}",
            mcp * 100.0,
            checked + 1
        ),
    )
}

/// Prompt `i` encodes to a shared concept direction plus its own Gaussian
/// perturbation; the empty prompt is the pure concept.
struct SyntheticEncoder;

impl TextEncoder for SyntheticEncoder {
    fn encode(&self, prompt: &str) -> eraser_core::Result<Tensor> {
        let (l, d) = (4, 32);
        let mut base = rng::stream(100, "synthetic-concept", 0);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let concept: Vec<f64> = (0..l * d)
            .map(|_| rand_distr::Distribution::sample(&normal, &mut base))
            .collect();
        let values = if prompt.is_empty() {
            concept
        } else {
            let idx: u64 = prompt.trim_start_matches('p').parse().unwrap();
            let mut r = rng::stream(derive_seed(100, "synthetic-prompt", idx), "p", 0);
            concept
                .iter()
                .map(|c| c + 1.5 * rand_distr::Distribution::sample(&normal, &mut r))
                .collect()
        };
        Ok(Tensor::from_vec(values, (l, d), &Device::Cpu)?)
    }
}

fn bank_size_curve() -> Outcome {
    let prompts: Vec<String> = (0..50).map(|i| format!("p{i}")).collect();
    let full = build_prompt_bank("synthetic", &prompts, &SyntheticEncoder).unwrap();
    let target = SyntheticEncoder.encode("").unwrap();
    let spec = DirichletSpec::new(0.7).unwrap();
    let sizes = [5, 10, 20, 30, 40, 50];
    let mut means = Vec::new();
    for n in sizes {
        let bank = full.truncated(n).unwrap();
        let mut rng = rng::stream(12, "acceptance-curve", n as u64);
        means.push(
            diagnose_manifold(&bank, &spec, &target, 2000, &mut rng)
                .unwrap()
                .mean,
        );
    }
    let up_to_30 = means[..4].windows(2).all(|w| w[1] >= w[0]);
    let beyond = means[3..].iter().all(|m| (m - means[3]).abs() < 0.02);
    let series = sizes
        .iter()
        .zip(&means)
        .map(|(n, m)| format!("{n}: {m:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        up_to_30 && beyond,
        format!("mean cosine by bank size {series}"),
    )
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let plain = untrained(0);
    let mut results: Vec<(&str, Outcome)> = Vec::new();

    results.push(("simplex suite", simplex_suite()));
    results.push(("convex-hull suite", hull_suite(&plain)));
    results.push(("tau-variance ordering", tau_variance()));
    results.push(("token arithmetic", token_arithmetic()));
    results.push(("degenerate identities", degenerate_identities(&plain)));
    results.push(("gradient check", gradient_check(&plain)));
    results.push(("frozen-target isolation", frozen_isolation(&plain)));
    let (e2e_outcome, e2e) = toy_end_to_end(dir.path());
    results.push(("toy end-to-end erasure", e2e_outcome));
    let resume = match &e2e {
        Some(e) => determinism_and_resume(&e.backend, dir.path()),
        None => outcome(false, "skipped: no pretrained toy backend"),
    };
    results.push(("determinism and resume", resume));
    results.push(("metric fixtures", metric_fixtures(e2e.as_ref())));
    results.push(("bank-size similarity curve", bank_size_curve()));

    println!();
    for (name, o) in &results {
        println!(
            "{} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|(_, o)| !o.pass)
        .map(|(n, _)| *n)
        .collect();
    println!(
        "{} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
