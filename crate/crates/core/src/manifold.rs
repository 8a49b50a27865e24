//! Prompt banks and convex concept-embedding sampling.
//!
//! A concept is represented by the encodings of several prompts that all
//! describe it. Training conditions on random convex combinations of those
//! encodings, with weights drawn from a symmetric Dirichlet distribution whose
//! concentration is `1 / tau`. Note the direction: a *larger* `tau` gives a
//! *smaller* concentration and therefore sparser weights, while a small `tau`
//! pulls the weights towards uniform.

use std::path::Path;

use candle_core::{Tensor, D};
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{layer_norm, to_vec};
use crate::rng::{Rng, RngState};

pub const NORM_EPS: f64 = 1e-5;

/// Maps a prompt to a `(tokens, dim)` embedding.
pub trait TextEncoder {
    fn encode(&self, prompt: &str) -> Result<Tensor>;
}

/// Produces extra prompts for a concept, e.g. by asking an external language
/// model. No implementation ships with the library.
pub trait PromptExpander {
    fn expand(&self, concept: &str, seed_prompts: &[String], n: usize) -> Result<Vec<String>>;
}

/// Parses a prompt list: one prompt per line, blank lines and lines starting
/// with `#` are skipped.
pub fn parse_prompt_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

pub fn read_prompt_file(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_prompt_lines(&text))
}

/// Encoded prompts for one concept, stacked as `(N, L, d)`.
#[derive(Debug, Clone)]
pub struct PromptBank {
    pub concept_name: String,
    pub prompts: Vec<String>,
    pub embeddings: Tensor,
    pub normalized: bool,
}

impl PromptBank {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// `(L, d)` of each entry.
    pub fn token_shape(&self) -> (usize, usize) {
        let dims = self.embeddings.dims();
        (dims[1], dims[2])
    }

    /// Bank restricted to its first `n` prompts.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::config(format!(
                "cannot truncate bank of {} prompts to {n}",
                self.len()
            )));
        }
        Ok(Self {
            concept_name: self.concept_name.clone(),
            prompts: self.prompts[..n].to_vec(),
            embeddings: self.embeddings.narrow(0, 0, n)?,
            normalized: self.normalized,
        })
    }
}

/// Encodes `prompts` and normalizes every token vector.
pub fn build_prompt_bank(
    concept_name: &str,
    prompts: &[String],
    encoder: &dyn TextEncoder,
) -> Result<PromptBank> {
    if prompts.is_empty() {
        return Err(Error::config("prompt bank needs at least one prompt"));
    }
    let mut encoded = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let e = encoder.encode(prompt)?;
        if e.rank() != 2 {
            return Err(Error::EncoderContract(format!(
                "expected a (tokens, dim) embedding for {prompt:?}, got {:?}",
                e.dims()
            )));
        }
        if let Some(first) = encoded.first() {
            let first: &Tensor = first;
            if first.dims() != e.dims() {
                return Err(Error::EncoderContract(format!(
                    "embedding shape {:?} for {prompt:?} differs from {:?}",
                    e.dims(),
                    first.dims()
                )));
            }
        }
        encoded.push(e);
    }
    let stacked = Tensor::stack(&encoded, 0)?;
    Ok(PromptBank {
        concept_name: concept_name.to_string(),
        prompts: prompts.to_vec(),
        embeddings: layer_norm(&stacked, NORM_EPS)?,
        normalized: true,
    })
}

/// Symmetric Dirichlet prior with concentration `1 / tau` on every prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirichletSpec {
    tau: f64,
}

impl DirichletSpec {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::config(format!("tau must be positive, got {tau}")));
        }
        Ok(Self { tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn alpha(&self) -> f64 {
        1.0 / self.tau
    }

    pub fn concentration(&self, n: usize) -> Vec<f64> {
        vec![self.alpha(); n]
    }
}

/// Draws a point on the `(n-1)`-simplex from `Dirichlet(alpha * 1_n)`.
///
/// Uses normalized Gamma(alpha, 1) variates, computed in log space so that
/// small concentrations do not underflow: for `alpha < 1`,
/// `G(alpha) = G(alpha + 1) * U^(1/alpha)`.
pub fn sample_weights(spec: &DirichletSpec, n_prompts: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if n_prompts == 0 {
        return Err(Error::config("n_prompts must be at least 1"));
    }
    if n_prompts == 1 {
        return Ok(vec![1.0]);
    }
    let alpha = spec.alpha();
    let boosted = alpha < 1.0;
    let shape = if boosted { alpha + 1.0 } else { alpha };
    let gamma = Gamma::new(shape, 1.0).map_err(|e| Error::config(e.to_string()))?;
    let logs: Vec<f64> = (0..n_prompts)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let mut lg = g.ln();
            if boosted {
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                lg += u.ln() / alpha;
            }
            lg
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    Ok(unnorm.into_iter().map(|v| v / total).collect())
}

/// One sampled conditioning embedding.
#[derive(Debug, Clone)]
pub struct ConceptEmbedding {
    /// Final `(L, d)` embedding after noise and normalization.
    pub values: Tensor,
    /// Convex combination before noise and normalization.
    pub combined: Tensor,
    /// Convex weights, recorded before noise injection.
    pub weights_used: Vec<f64>,
    pub noise_std: f64,
    /// Stream position the draw started from.
    pub seed: RngState,
}

/// `sum_i weights[i] * bank[i]`, clamped coordinate-wise into the bank's
/// bounding box. The exact result always lies in the box; the clamp only
/// removes last-ulp rounding excursions.
pub fn convex_combination(bank: &PromptBank, weights: &[f64]) -> Result<Tensor> {
    if weights.len() != bank.len() {
        return Err(Error::contract(format!(
            "{} weights for a bank of {}",
            weights.len(),
            bank.len()
        )));
    }
    let emb = &bank.embeddings;
    let w = Tensor::from_vec(weights.to_vec(), (weights.len(), 1, 1), emb.device())?
        .to_dtype(emb.dtype())?;
    let combined = emb.broadcast_mul(&w)?.sum(0)?;
    let lo = emb.min(0)?;
    let hi = emb.max(0)?;
    Ok(combined.maximum(&lo)?.minimum(&hi)?)
}

pub fn sample_concept_embedding(
    bank: &PromptBank,
    spec: &DirichletSpec,
    noise_std: f64,
    rng: &mut Rng,
) -> Result<ConceptEmbedding> {
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(Error::config(format!(
            "noise_std must be nonnegative, got {noise_std}"
        )));
    }
    if bank.is_empty() {
        return Err(Error::config("empty prompt bank"));
    }
    if !bank.normalized {
        return Err(Error::contract("prompt bank is not normalized"));
    }
    let seed = RngState::capture(rng);
    let weights = sample_weights(spec, bank.len(), rng)?;
    let combined = convex_combination(bank, &weights)?;
    let noisy = if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).map_err(|e| Error::config(e.to_string()))?;
        let noise: Vec<f64> = (0..combined.elem_count())
            .map(|_| normal.sample(rng))
            .collect();
        let noise = Tensor::from_vec(noise, combined.dims(), combined.device())?
            .to_dtype(combined.dtype())?;
        (&combined + noise)?
    } else {
        combined.clone()
    };
    Ok(ConceptEmbedding {
        values: layer_norm(&noisy, NORM_EPS)?,
        combined,
        weights_used: weights,
        noise_std,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityStats {
    pub mean: f64,
    pub std: f64,
}

/// Record written by the embedding diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldDiagnostic {
    pub bank_size: usize,
    pub tau: f64,
    pub n_samples: usize,
    pub mean_cosine: f64,
    pub std_cosine: f64,
    pub seed: u64,
}

fn pooled(t: &Tensor) -> Result<Vec<f64>> {
    let t = if t.rank() == 2 { t.mean(0)? } else { t.clone() };
    to_vec(&t)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Cosine similarity between token-mean-pooled samples from the manifold and
/// the pooled target embedding. Samples are drawn without noise.
pub fn diagnose_manifold(
    bank: &PromptBank,
    spec: &DirichletSpec,
    target_embedding: &Tensor,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<SimilarityStats> {
    if n_samples < 1 {
        return Err(Error::config("n_samples must be at least 1"));
    }
    let (l, d) = bank.token_shape();
    let target = match target_embedding.rank() {
        2 if target_embedding.dims() == [l, d] => layer_norm(target_embedding, NORM_EPS)?,
        1 if target_embedding.dim(D::Minus1)? == d => target_embedding.clone(),
        _ => {
            return Err(Error::contract(format!(
                "target embedding {:?} does not match bank tokens ({l}, {d})",
                target_embedding.dims()
            )))
        }
    };
    let target = pooled(&target)?;
    let mut sims = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let e = sample_concept_embedding(bank, spec, 0.0, rng)?;
        sims.push(cosine(&pooled(&e.values)?, &target));
    }
    let mean = sims.iter().sum::<f64>() / n_samples as f64;
    let var = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n_samples as f64;
    Ok(SimilarityStats {
        mean,
        std: var.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    struct TableEncoder {
        rows: Vec<(String, Vec<f64>)>,
        l: usize,
        d: usize,
    }

    impl TextEncoder for TableEncoder {
        fn encode(&self, prompt: &str) -> Result<Tensor> {
            let row = self
                .rows
                .iter()
                .find(|(p, _)| p == prompt)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::config("unknown prompt"))?;
            Ok(Tensor::from_vec(row, (self.l, self.d), &Device::Cpu)?)
        }
    }

    fn random_encoder(prompts: &[&str], l: usize, d: usize, seed: u64) -> TableEncoder {
        let mut rng = stream(seed, "table", 0);
        let normal = Normal::new(0.0, 1.0).unwrap();
        TableEncoder {
            rows: prompts
                .iter()
                .map(|p| {
                    (
                        p.to_string(),
                        (0..l * d).map(|_| normal.sample(&mut rng)).collect(),
                    )
                })
                .collect(),
            l,
            d,
        }
    }

    fn bank_of(n: usize) -> PromptBank {
        let prompts: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
        let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
        let enc = random_encoder(&refs, 3, 6, n as u64);
        build_prompt_bank("c", &prompts, &enc).unwrap()
    }

    #[test]
    fn prompt_lines_skip_comments_and_blanks() {
        let parsed = parse_prompt_lines("# header\na photo of gun\n\n  gun  \n#x\n");
        assert_eq!(parsed, vec!["a photo of gun", "gun"]);
    }

    #[test]
    fn empty_prompt_list_is_a_config_error() {
        let enc = random_encoder(&[], 2, 2, 0);
        let err = build_prompt_bank("c", &[], &enc).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn mismatched_encoder_shapes_are_rejected() {
        struct Ragged;
        impl TextEncoder for Ragged {
            fn encode(&self, prompt: &str) -> Result<Tensor> {
                Ok(Tensor::zeros((2, prompt.len()), DType::F64, &Device::Cpu)?)
            }
        }
        let err = build_prompt_bank("c", &["ab".into(), "abc".into()], &Ragged).unwrap_err();
        assert!(matches!(err, Error::EncoderContract(_)));
    }

    #[test]
    fn single_prompt_bank_is_normalized_and_ordered() {
        let enc = random_encoder(&["a photo of gun"], 4, 8, 1);
        let bank = build_prompt_bank("gun", &["a photo of gun".into()], &enc).unwrap();
        assert_eq!(bank.len(), 1);
        assert!(bank.normalized);
        let rows = bank.embeddings.get(0).unwrap().to_vec2::<f64>().unwrap();
        for row in rows {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-4);
            assert!((var.sqrt() - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn one_prompt_gives_unit_weight() {
        let spec = DirichletSpec::new(0.3).unwrap();
        let mut rng = stream(0, "w", 0);
        assert_eq!(sample_weights(&spec, 1, &mut rng).unwrap(), vec![1.0]);
    }

    #[test]
    fn nonpositive_tau_is_rejected() {
        assert!(DirichletSpec::new(0.0).is_err());
        assert!(DirichletSpec::new(-1.0).is_err());
        assert!(DirichletSpec::new(f64::NAN).is_err());
    }

    #[test]
    fn concentration_is_inverse_tau() {
        let spec = DirichletSpec::new(0.25).unwrap();
        assert_eq!(spec.concentration(3), vec![4.0, 4.0, 4.0]);
    }

    #[test]
    fn tiny_concentration_does_not_underflow() {
        let spec = DirichletSpec::new(500.0).unwrap();
        let mut rng = stream(1, "w", 0);
        for _ in 0..200 {
            let w = sample_weights(&spec, 6, &mut rng).unwrap();
            assert!(w.iter().all(|v| v.is_finite() && *v >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn single_entry_bank_reproduces_entry() {
        let bank = bank_of(1);
        let spec = DirichletSpec::new(0.7).unwrap();
        let mut rng = stream(0, "e", 0);
        let e = sample_concept_embedding(&bank, &spec, 0.0, &mut rng).unwrap();
        let entry = bank.embeddings.get(0).unwrap();
        assert_eq!(to_vec(&e.combined).unwrap(), to_vec(&entry).unwrap());
        for (a, b) in to_vec(&e.values)
            .unwrap()
            .iter()
            .zip(to_vec(&entry).unwrap())
        {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn hull_bounds_hold_for_three_prompts() {
        let bank = bank_of(3);
        let spec = DirichletSpec::new(0.7).unwrap();
        let mut rng = stream(2, "e", 0);
        let lo = to_vec(&bank.embeddings.min(0).unwrap()).unwrap();
        let hi = to_vec(&bank.embeddings.max(0).unwrap()).unwrap();
        for _ in 0..50 {
            let e = sample_concept_embedding(&bank, &spec, 0.0, &mut rng).unwrap();
            for ((v, l), h) in to_vec(&e.combined).unwrap().iter().zip(&lo).zip(&hi) {
                assert!(l <= v && v <= h);
            }
        }
    }

    #[test]
    fn seeded_sampling_is_byte_identical() {
        let bank = bank_of(5);
        let spec = DirichletSpec::new(0.7).unwrap();
        let draw = || {
            let mut rng = stream(11, "e", 0);
            let e = sample_concept_embedding(&bank, &spec, 0.01, &mut rng).unwrap();
            to_vec(&e.values)
                .unwrap()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn negative_noise_is_rejected() {
        let bank = bank_of(2);
        let spec = DirichletSpec::new(0.7).unwrap();
        let mut rng = stream(0, "e", 0);
        let err = sample_concept_embedding(&bank, &spec, -0.1, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn output_tokens_are_normalized() {
        let bank = bank_of(4);
        let spec = DirichletSpec::new(0.7).unwrap();
        let mut rng = stream(5, "e", 0);
        let e = sample_concept_embedding(&bank, &spec, 0.3, &mut rng).unwrap();
        for row in e.values.to_vec2::<f64>().unwrap() {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-4);
            assert!((std - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn target_only_bank_has_unit_similarity() {
        let bank = bank_of(1);
        let target = bank.embeddings.get(0).unwrap();
        let spec = DirichletSpec::new(0.7).unwrap();
        let mut rng = stream(0, "d", 0);
        let stats = diagnose_manifold(&bank, &spec, &target, 10, &mut rng).unwrap();
        assert!((stats.mean - 1.0).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_target_has_near_zero_similarity() {
        // Pooled bank vectors live in the span of e0; the target pools onto e1.
        let (l, d) = (2, 4);
        let rows = vec![
            (
                "a".to_string(),
                vec![3.0, -1.0, -1.0, -1.0, 3.0, -1.0, -1.0, -1.0],
            ),
            (
                "b".to_string(),
                vec![2.0, -2.0, 0.0, 0.0, 4.0, 0.0, -2.0, -2.0],
            ),
        ];
        let enc = TableEncoder { rows, l, d };
        let bank = build_prompt_bank("c", &["a".into(), "b".into()], &enc).unwrap();
        let target = Tensor::new(&[0.0f64, 0.0, 1.0, -1.0], &Device::Cpu).unwrap();
        let spec = DirichletSpec::new(0.7).unwrap();
        let mut rng = stream(0, "d", 0);
        let stats = diagnose_manifold(&bank, &spec, &target, 200, &mut rng).unwrap();
        assert!(stats.mean.abs() < 1e-6, "{}", stats.mean);
    }

    #[test]
    fn diagnose_requires_samples() {
        let bank = bank_of(2);
        let target = bank.embeddings.get(0).unwrap();
        let spec = DirichletSpec::new(0.7).unwrap();
        let mut rng = stream(0, "d", 0);
        assert!(matches!(
            diagnose_manifold(&bank, &spec, &target, 0, &mut rng),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn weights_lie_on_simplex(tau in 0.01f64..50.0, n in 1usize..40, seed in any::<u64>()) {
            let spec = DirichletSpec::new(tau).unwrap();
            let mut rng = stream(seed, "prop", 0);
            let w = sample_weights(&spec, n, &mut rng).unwrap();
            prop_assert_eq!(w.len(), n);
            prop_assert!(w.iter().all(|v| *v >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn weights_are_reproducible(tau in 0.05f64..10.0, seed in any::<u64>()) {
            let spec = DirichletSpec::new(tau).unwrap();
            let a = sample_weights(&spec, 7, &mut stream(seed, "prop", 1)).unwrap();
            let b = sample_weights(&spec, 7, &mut stream(seed, "prop", 1)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
