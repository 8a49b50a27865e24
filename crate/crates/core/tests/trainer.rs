mod common;

use candle_core::{DType, Device};
use common::{
    asr_and_mcp, bits, clean_references, make_references, pretrained, toy_config, untrained,
};
use eraser_core::backend::toy::concept_prompts;
use eraser_core::backend::DiffusionBackend;
use eraser_core::trainer::{
    erase, generate_reference_set, load_erased, multi_concept_erase, run, AcceptAll, Checkpoint,
    EraseOptions, ErasureConfig, ReferenceFilter, ReferenceManifest, ReferenceRequest, StepRecord,
    Trainer,
};
use eraser_core::Error;
use image::DynamicImage;

fn small_config(steps: usize) -> ErasureConfig {
    let mut c = ErasureConfig::new("square", "unused.txt", "unused", steps);
    c.learning_rate = 1e-3;
    c
}

fn trainer<'a>(backend: &'a dyn DiffusionBackend, config: &ErasureConfig) -> Trainer<'a> {
    Trainer::from_parts(
        config,
        backend,
        &concept_prompts("square"),
        clean_references(backend, "square", 4),
        None,
    )
    .unwrap()
}

fn losses(records: &[StepRecord]) -> Vec<u64> {
    records.iter().map(|r| r.loss.unwrap().to_bits()).collect()
}

#[test]
fn zero_steps_checkpoint_equals_initialization() {
    let backend = untrained(1);
    let config = small_config(0);
    let mut t = trainer(&backend, &config);
    let fusion_init = t.fusion_params().content_hash().unwrap();
    let out = run(&mut t, None, None).unwrap();
    assert!(out.records.is_empty());
    assert_eq!(out.checkpoint.step(), 0);
    let pretrained = backend.pretrained().tensors();
    for (name, tensor) in &out.checkpoint.denoiser {
        assert_eq!(bits(tensor), bits(&pretrained[name]), "{name}");
    }
    assert_eq!(out.checkpoint.denoiser.len(), pretrained.len());
    assert_eq!(t.fusion_params().content_hash().unwrap(), fusion_init);
}

#[test]
fn identical_runs_give_identical_checkpoints() {
    let backend = untrained(1);
    let config = small_config(5);
    let a = run(&mut trainer(&backend, &config), None, None).unwrap();
    let b = run(&mut trainer(&backend, &config), None, None).unwrap();
    assert_eq!(
        a.checkpoint.content_hash().unwrap(),
        b.checkpoint.content_hash().unwrap()
    );
    assert_eq!(losses(&a.records), losses(&b.records));

    let mut other = config.clone();
    other.seed = 3;
    let c = run(&mut trainer(&backend, &other), None, None).unwrap();
    assert_ne!(
        a.checkpoint.content_hash().unwrap(),
        c.checkpoint.content_hash().unwrap()
    );
}

#[test]
fn resume_through_a_file_matches_uninterrupted_run() {
    let backend = untrained(2);
    let mut config = small_config(8);
    config.batch_size = 2;
    let full = run(&mut trainer(&backend, &config), None, None).unwrap();

    let first = run(&mut trainer(&backend, &config), Some(3), None).unwrap();
    assert_eq!(first.checkpoint.step(), 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.safetensors");
    first.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path, DType::F64, &Device::Cpu).unwrap();
    assert_eq!(
        loaded.content_hash().unwrap(),
        first.checkpoint.content_hash().unwrap()
    );

    let mut resumed = trainer(&backend, &config);
    resumed.resume_from(&loaded).unwrap();
    let rest = run(&mut resumed, None, None).unwrap();
    let mut stitched = first.records.clone();
    stitched.extend(rest.records);
    assert_eq!(losses(&stitched), losses(&full.records));
    assert_eq!(
        stitched.iter().map(|r| r.step).collect::<Vec<_>>(),
        (0..8).collect::<Vec<_>>()
    );
    assert_eq!(
        rest.checkpoint.content_hash().unwrap(),
        full.checkpoint.content_hash().unwrap()
    );
}

#[test]
fn resume_rejects_a_different_config() {
    let backend = untrained(2);
    let config = small_config(4);
    let ckpt = run(&mut trainer(&backend, &config), Some(2), None)
        .unwrap()
        .checkpoint;
    let mut changed = config.clone();
    changed.lambda = 0.25;
    let err = trainer(&backend, &changed).resume_from(&ckpt).unwrap_err();
    assert!(err.is_config(), "{err}");
}

#[test]
fn frozen_snapshot_survives_training() {
    let backend = untrained(3);
    let config = small_config(4);
    let mut t = trainer(&backend, &config);
    let before = t.frozen_params().content_hash().unwrap();
    let trainable_before = t.denoiser_params().content_hash().unwrap();
    run(&mut t, None, None).unwrap();
    assert_eq!(t.frozen_params().content_hash().unwrap(), before);
    assert_eq!(backend.pretrained().content_hash().unwrap(), before);
    assert_ne!(
        t.denoiser_params().content_hash().unwrap(),
        trainable_before
    );
}

#[test]
fn conditioning_scope_only_touches_cross_attention() {
    let backend = untrained(3);
    let mut config = small_config(3);
    config.train_scope = eraser_core::trainer::TrainScope::Conditioning;
    let mut t = trainer(&backend, &config);
    let out = run(&mut t, None, None).unwrap();
    assert!(out
        .checkpoint
        .denoiser
        .keys()
        .all(|k| k.starts_with("attn2.")));
    let pretrained = backend.pretrained().tensors();
    for (name, var) in t.denoiser_params().iter() {
        let changed = bits(var.as_tensor()) != bits(&pretrained[name]);
        assert_eq!(changed, name.starts_with("attn2."), "{name}");
    }
}

#[test]
fn non_finite_loss_aborts_with_a_diagnostic_record() {
    let backend = untrained(4);
    let mut config = small_config(3);
    config.gamma = 1e308;
    let mut t = trainer(&backend, &config);
    let mut log = Vec::new();
    let err = run(&mut t, None, Some(&mut log)).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 0, .. }), "{err}");
    let text = String::from_utf8(log).unwrap();
    let record: StepRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(record.loss, None);
    assert!(record.error.unwrap().contains("non-finite"));
    assert_eq!(t.step_count(), 0);
}

fn write_bank(dir: &std::path::Path) -> std::path::PathBuf {
    let path = dir.join("bank.txt");
    std::fs::write(&path, concept_prompts("square").join("\n")).unwrap();
    path
}

#[test]
fn erase_reads_files_and_logs_json_lines() {
    let backend = untrained(5);
    let dir = tempfile::tempdir().unwrap();
    let refs = dir.path().join("refs");
    let request = ReferenceRequest {
        concept: "square".into(),
        prompt: "a photo of a square".into(),
        n: 3,
        threshold: 0.5,
        budget: 3,
        seed: 0,
    };
    generate_reference_set(&backend, &request, &AcceptAll, &refs).unwrap();
    let mut config = ErasureConfig::new("square", write_bank(dir.path()), &refs, 4);
    config.n_reference_images = 3;
    let mut log = Vec::new();
    let out = erase(&config, &backend, EraseOptions::default(), Some(&mut log)).unwrap();
    let lines: Vec<StepRecord> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines, out.records);
    assert_eq!(
        lines.iter().map(|r| r.step).collect::<Vec<_>>(),
        vec![0, 1, 2, 3]
    );
    assert!(lines
        .iter()
        .all(|r| r.images.len() == 1 && r.images[0].starts_with("ref_")));
}

#[test]
fn erase_reports_missing_inputs_as_config_errors() {
    let backend = untrained(5);
    let dir = tempfile::tempdir().unwrap();
    let config = ErasureConfig::new("square", dir.path().join("nope.txt"), dir.path(), 1);
    let err = erase(&config, &backend, EraseOptions::default(), None)
        .err()
        .unwrap();
    assert!(err.is_config(), "{err}");
    let config = ErasureConfig::new("square", write_bank(dir.path()), dir.path().join("refs"), 1);
    let err = erase(&config, &backend, EraseOptions::default(), None)
        .err()
        .unwrap();
    assert!(err.is_config(), "{err}");
}

fn png_bytes(dir: &std::path::Path, manifest: &ReferenceManifest) -> Vec<Vec<u8>> {
    manifest
        .entries
        .iter()
        .map(|e| std::fs::read(dir.join(&e.file)).unwrap())
        .collect()
}

#[test]
fn reference_generation_is_deterministic() {
    let backend = untrained(6);
    let request = ReferenceRequest {
        concept: "square".into(),
        prompt: "a photo of a square".into(),
        n: 5,
        threshold: 0.6,
        budget: 20,
        seed: 9,
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_reference_set(&backend, &request, &AcceptAll, a.path()).unwrap();
    let mb = generate_reference_set(&backend, &request, &AcceptAll, b.path()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ma.entries.len(), 5);
    assert_eq!(ma.candidates_tried, 5);
    assert_eq!(png_bytes(a.path(), &ma), png_bytes(b.path(), &mb));
    assert_eq!(ReferenceManifest::load(a.path()).unwrap(), ma);
}

#[test]
fn empty_reference_request_writes_an_empty_manifest() {
    let backend = untrained(6);
    let request = ReferenceRequest {
        concept: "square".into(),
        prompt: "a photo of a square".into(),
        n: 0,
        threshold: 0.6,
        budget: 0,
        seed: 0,
    };
    let dir = tempfile::tempdir().unwrap();
    let m = generate_reference_set(&backend, &request, &AcceptAll, dir.path()).unwrap();
    assert!(m.complete && m.entries.is_empty());
    assert!(dir.path().join("manifest.json").exists());
}

/// Accepts every other candidate.
struct Alternate(std::cell::Cell<usize>);

impl ReferenceFilter for Alternate {
    fn id(&self) -> String {
        "alternate".into()
    }
    fn score(&self, _: &DynamicImage, _: &str) -> eraser_core::Result<f64> {
        let i = self.0.get();
        self.0.set(i + 1);
        Ok(if i.is_multiple_of(2) { 1.0 } else { 0.0 })
    }
}

#[test]
fn exhausted_budget_keeps_the_accepted_images() {
    let backend = untrained(6);
    let request = ReferenceRequest {
        concept: "square".into(),
        prompt: "a photo of a square".into(),
        n: 4,
        threshold: 0.6,
        budget: 5,
        seed: 0,
    };
    let dir = tempfile::tempdir().unwrap();
    let err =
        generate_reference_set(&backend, &request, &Alternate(0.into()), dir.path()).unwrap_err();
    match err {
        Error::PartialReferenceSet {
            accepted,
            requested,
            tried,
            manifest,
        } => {
            assert_eq!((accepted, requested, tried), (3, 4, 5));
            let m = ReferenceManifest::load(manifest.parent().unwrap()).unwrap();
            assert!(!m.complete);
            assert_eq!(m.entries.len(), 3);
            assert!(m.entries.iter().all(|e| dir.path().join(&e.file).exists()));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn single_stage_chain_equals_erase() {
    let backend = untrained(7);
    let dir = tempfile::tempdir().unwrap();
    let refs = dir.path().join("refs");
    let request = ReferenceRequest {
        concept: "square".into(),
        prompt: "a photo of a square".into(),
        n: 2,
        threshold: 0.5,
        budget: 2,
        seed: 0,
    };
    generate_reference_set(&backend, &request, &AcceptAll, &refs).unwrap();
    let mut config = ErasureConfig::new("square", write_bank(dir.path()), &refs, 3);
    config.n_reference_images = 2;
    let single = erase(&config, &backend, EraseOptions::default(), None).unwrap();
    let chain = multi_concept_erase(std::slice::from_ref(&config), &backend, None).unwrap();
    assert_eq!(chain.len(), 1);
    assert_eq!(
        chain[0].checkpoint.content_hash().unwrap(),
        single.checkpoint.content_hash().unwrap()
    );
}

#[test]
fn erased_weights_need_the_matching_backend() {
    let backend = untrained(8);
    let ckpt = run(&mut trainer(&backend, &small_config(1)), None, None)
        .unwrap()
        .checkpoint;
    assert!(load_erased(&backend, &ckpt).is_ok());
    let err = load_erased(&untrained(9), &ckpt).err().unwrap();
    assert!(err.is_config(), "{err}");
}

/// Two-stage chain with the per-concept toy configs. On the toy model the
/// second stage slowly undoes the first (ASR("square") climbs back to about
/// 0.3 over 500 triangle steps), so this oracle currently fails.
#[test]
#[ignore = "fails on the toy backend: the first erasure is partly forgotten during the second stage"]
fn toy_chain_keeps_both_concepts_erased() {
    let backend = pretrained();
    let dir = tempfile::tempdir().unwrap();
    let square = toy_config("erase-square.toml", &dir.path().join("square"));
    let triangle = toy_config("erase-triangle.toml", &dir.path().join("triangle"));
    make_references(backend, &square);
    make_references(backend, &triangle);
    let stages = multi_concept_erase(&[square, triangle], backend, None).unwrap();
    let last = &stages[1].checkpoint;
    assert_eq!(last.meta.erased_before, vec!["square".to_string()]);
    let model = load_erased(backend, last).unwrap();
    let (asr_square, mcp_circle) = asr_and_mcp(backend, model.as_ref(), "square", "circle");
    let (asr_triangle, _) = asr_and_mcp(backend, model.as_ref(), "triangle", "circle");
    let (a, b, m) = (
        asr_square.scalar(),
        asr_triangle.scalar(),
        mcp_circle.scalar(),
    );
    eprintln!("chain: ASR(square) {a:.3}, ASR(triangle) {b:.3}, MCP(circle) {m:.3}");
    assert!(a <= 0.2 && b <= 0.2, "ASR square {a}, triangle {b}");
}
