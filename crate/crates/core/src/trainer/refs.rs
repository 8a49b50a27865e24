//! Synthetic reference images for the concept being erased.

use std::path::{Path, PathBuf};

use image::DynamicImage;
use serde::{Deserialize, Serialize};

use crate::backend::DiffusionBackend;
use crate::error::{Error, Result};
use crate::eval::{verdict, ConceptClassifier};
use crate::rng::derive_seed;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Decides whether a generated candidate is good enough to keep.
pub trait ReferenceFilter {
    fn id(&self) -> String;

    /// Score in `[0, 1]`; candidates at or above the threshold are kept.
    fn score(&self, image: &DynamicImage, concept: &str) -> Result<f64>;
}

/// Keeps every candidate.
pub struct AcceptAll;

impl ReferenceFilter for AcceptAll {
    fn id(&self) -> String {
        "accept-all".into()
    }

    fn score(&self, _image: &DynamicImage, _concept: &str) -> Result<f64> {
        Ok(1.0)
    }
}

/// Softmax probability of the concept against a set of distractor labels.
pub struct ClassifierFilter<'a> {
    pub classifier: &'a dyn ConceptClassifier,
    pub distractors: Vec<String>,
}

impl ReferenceFilter for ClassifierFilter<'_> {
    fn id(&self) -> String {
        self.classifier.id()
    }

    fn score(&self, image: &DynamicImage, concept: &str) -> Result<f64> {
        Ok(verdict(self.classifier, "", image, concept, &self.distractors)?.score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub file: String,
    pub prompt: String,
    pub seed: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceManifest {
    pub concept: String,
    pub prompt: String,
    pub filter: String,
    pub threshold: f64,
    pub requested: usize,
    pub candidates_tried: usize,
    pub complete: bool,
    pub entries: Vec<ReferenceEntry>,
}

impl ReferenceManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::config(format!("no reference manifest at {}", path.display()))
            } else {
                Error::io(&path, e)
            }
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Reads every listed image, in manifest order.
    pub fn images(&self, dir: &Path) -> Result<Vec<(String, DynamicImage)>> {
        self.entries
            .iter()
            .map(|e| {
                let path = dir.join(&e.file);
                let img = image::open(&path).map_err(|err| match err {
                    image::ImageError::IoError(io) => Error::io(&path, io),
                    other => Error::Image(other),
                })?;
                Ok((e.file.clone(), img))
            })
            .collect()
    }
}

/// Request for [`generate_reference_set`].
#[derive(Debug, Clone)]
pub struct ReferenceRequest {
    pub concept: String,
    /// Full prompt, e.g. `"a photo of gun"`.
    pub prompt: String,
    pub n: usize,
    pub threshold: f64,
    /// Maximum number of candidates to generate.
    pub budget: usize,
    pub seed: u64,
}

/// Samples candidates from `backend` until `n` pass `filter`, writing
/// `ref_NNNN.png` files and a manifest into `out_dir`.
///
/// Candidate `i` uses seed `derive_seed(seed, "refs", i)`, so the accepted
/// set depends only on the request. When the budget runs out first, the
/// manifest of accepted images is still written and
/// [`Error::PartialReferenceSet`] is returned.
pub fn generate_reference_set(
    backend: &dyn DiffusionBackend,
    request: &ReferenceRequest,
    filter: &dyn ReferenceFilter,
    out_dir: &Path,
) -> Result<ReferenceManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let net = backend.snapshot()?;
    let chunk = backend.sampler_config().batch.max(1);
    let mut entries = Vec::new();
    let mut tried = 0;
    while entries.len() < request.n && tried < request.budget {
        let wanted = (request.n - entries.len()).max(1);
        let take = wanted.min(chunk).min(request.budget - tried);
        let seeds: Vec<u64> = (tried..tried + take)
            .map(|i| derive_seed(request.seed, "refs", i as u64))
            .collect();
        let prompts = vec![request.prompt.clone(); take];
        let images = backend.sample(net.as_ref(), &prompts, &seeds)?;
        for (img, seed) in images.into_iter().zip(seeds) {
            if entries.len() == request.n {
                break;
            }
            let score = filter.score(&img, &request.concept)?;
            if score >= request.threshold {
                let file = format!("ref_{:04}.png", entries.len());
                let path = out_dir.join(&file);
                img.save(&path)?;
                entries.push(ReferenceEntry {
                    file,
                    prompt: request.prompt.clone(),
                    seed,
                    score,
                });
            }
        }
        tried += take;
    }
    let manifest = ReferenceManifest {
        concept: request.concept.clone(),
        prompt: request.prompt.clone(),
        filter: filter.id(),
        threshold: request.threshold,
        requested: request.n,
        candidates_tried: tried,
        complete: entries.len() == request.n,
        entries,
    };
    let path = manifest.write(out_dir)?;
    if !manifest.complete {
        return Err(Error::PartialReferenceSet {
            accepted: manifest.entries.len(),
            requested: request.n,
            tried,
            manifest: path,
        });
    }
    Ok(manifest)
}
