//! Fixtures shared by the integration tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use candle_core::{DType, Device, Tensor};
use eraser_core::backend::toy::{pretrain_toy, ToyBackend, ToyPretrainConfig};
use eraser_core::backend::DiffusionBackend;
use eraser_core::eval::{Evaluator, MetricReport, PromptSuite, SuiteKind};
use eraser_core::manifold::read_prompt_file;
use eraser_core::trainer::{
    generate_reference_set, ClassifierFilter, ErasureConfig, ReferenceManifest, ReferenceRequest,
};

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy")
}

pub fn cache_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("toy-cache")
}

/// The pretrained toy backend for seed 0, trained once per cache directory.
pub fn pretrained() -> &'static ToyBackend {
    static BACKEND: OnceLock<ToyBackend> = OnceLock::new();
    BACKEND.get_or_init(|| {
        pretrain_toy(0, &ToyPretrainConfig::default(), Some(&cache_dir())).expect("toy pretraining")
    })
}

/// Untrained toy backend; enough for tests that only need the plumbing.
pub fn untrained(seed: u64) -> ToyBackend {
    ToyBackend::untrained(seed, &ToyPretrainConfig::default()).unwrap()
}

/// Loads a toy erasure config and points its reference set at `refs`.
pub fn toy_config(name: &str, refs: &Path) -> ErasureConfig {
    let mut config = ErasureConfig::load(&data_dir().join(name)).unwrap();
    config.reference_set_path = refs.to_path_buf();
    config
}

/// Generates the classifier-filtered reference set `config` asks for.
pub fn make_references(backend: &ToyBackend, config: &ErasureConfig) -> ReferenceManifest {
    let classifier = backend.classifier();
    let filter = ClassifierFilter {
        classifier: &classifier,
        distractors: classifier.distractors(&config.concept_name),
    };
    let request = ReferenceRequest {
        concept: config.concept_name.clone(),
        prompt: config.reference_prompt(),
        n: config.n_reference_images,
        threshold: config.filter_threshold,
        budget: config.n_reference_images * config.candidate_factor,
        seed: config.seed,
    };
    generate_reference_set(backend, &request, &filter, &config.reference_set_path).unwrap()
}

pub fn suite(concept: &str, kind: SuiteKind) -> PromptSuite {
    let prompts = read_prompt_file(&data_dir().join(format!("{concept}.txt"))).unwrap();
    PromptSuite::new(concept, prompts, kind).unwrap()
}

/// ASR on `target` and MCP on `related` for `model`, 10 images per prompt.
pub fn asr_and_mcp(
    backend: &ToyBackend,
    model: &dyn eraser_core::backend::Denoiser,
    target: &str,
    related: &str,
) -> (MetricReport, MetricReport) {
    let classifier = backend.classifier();
    let distractors = |c: &str| classifier.distractors(c);
    let evaluator = Evaluator {
        backend,
        model,
        classifier: &classifier,
        distractors: &distractors,
        n_per_prompt: 10,
        seed: 7,
    };
    let asr = evaluator
        .compute_asr(&suite(target, SuiteKind::TargetInductive))
        .unwrap();
    let mcp = evaluator
        .compute_mcp(&[suite(related, SuiteKind::RelatedPreservation)])
        .unwrap()
        .remove(0);
    (asr, mcp)
}

/// Clean toy latents of `concept`, encoded by `backend`.
pub fn clean_references(
    backend: &dyn DiffusionBackend,
    concept: &str,
    n: usize,
) -> Vec<(String, Tensor)> {
    let mut rng = eraser_core::rng::stream(11, "clean-refs", 0);
    (0..n)
        .map(|i| {
            let img = eraser_core::backend::toy::clean_sample(concept, &mut rng).unwrap();
            (format!("clean_{i}"), backend.encode_image(&img).unwrap())
        })
        .collect()
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .to_device(&Device::Cpu)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
        .into_iter()
        .map(f64::to_bits)
        .collect()
}
