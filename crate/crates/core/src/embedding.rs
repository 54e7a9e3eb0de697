//! Joint image/text embeddings: vector math, providers, and the wire client
//! for the embedding sidecar.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::domain::Instance;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Tolerance on the unit-norm invariant.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Dense, finite, unit-L2-norm vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<S> {
    values: Vec<S>,
}

impl<S: Scalar> Embedding<S> {
    /// Normalizes `values` to unit length. Rejects empty, zero and non-finite input.
    pub fn normalized(values: Vec<S>) -> Result<Embedding<S>> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch { expected: 1, found: 0 });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidEmbedding("non-finite component".into()));
        }
        let norm = l2_norm(&values);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidEmbedding("zero vector".into()));
        }
        let inv = S::from_f64_lossy(1.0 / norm);
        Ok(Embedding {
            values: values.into_iter().map(|v| v * inv).collect(),
        })
    }

    /// Wraps values that are already unit-norm, checking the invariant.
    pub fn from_unit(values: Vec<S>) -> Result<Embedding<S>> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch { expected: 1, found: 0 });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidEmbedding("non-finite component".into()));
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::InvalidEmbedding(format!("norm {norm} is not 1")));
        }
        Ok(Embedding { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    pub fn cast<T: Scalar>(&self) -> Embedding<T> {
        Embedding {
            values: self.values.iter().map(|v| T::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }
}

fn l2_norm<S: Scalar>(values: &[S]) -> f64 {
    values
        .iter()
        .map(|v| {
            let x = v.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Concatenates image-first and re-normalizes; output dim is the sum of both.
pub fn combine<S: Scalar>(image: &Embedding<S>, text: &Embedding<S>) -> Result<Embedding<S>> {
    if image.dim() == 0 || text.dim() == 0 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: 0,
        });
    }
    let mut values = Vec::with_capacity(image.dim() + text.dim());
    values.extend_from_slice(image.values());
    values.extend_from_slice(text.values());
    Embedding::normalized(values)
}

/// Dot product of two unit vectors.
pub fn cosine_similarity<S: Scalar>(a: &Embedding<S>, b: &Embedding<S>) -> Result<S> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(dot(a.values(), b.values()))
}

pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (x, y)| acc + *x * *y)
}

/// Source of per-modality embeddings.
pub trait EmbeddingProvider<S: Scalar>: Send + Sync {
    fn model_id(&self) -> &str;

    fn embed_image(&self, instance: &Instance) -> Result<Embedding<S>>;

    fn embed_text(&self, instance: &Instance) -> Result<Embedding<S>>;
}

/// Embeds an instance as `combine(image, text)`.
pub fn embed_instance<S: Scalar>(instance: &Instance, provider: &dyn EmbeddingProvider<S>) -> Result<Embedding<S>> {
    let image = provider.embed_image(instance)?;
    let text = provider.embed_text(instance)?;
    combine(&image, &text)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecomputedRecord {
    pub id: String,
    pub image_vec: Vec<f64>,
    pub text_vec: Vec<f64>,
}

/// Embeddings read from a JSON Lines file keyed by instance id.
#[derive(Debug, Clone)]
pub struct PrecomputedEmbeddings {
    model_id: String,
    expected_dim: Option<usize>,
    records: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl PrecomputedEmbeddings {
    pub fn new(model_id: impl Into<String>, expected_dim: Option<usize>) -> Self {
        PrecomputedEmbeddings {
            model_id: model_id.into(),
            expected_dim,
            records: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, image_vec: Vec<f64>, text_vec: Vec<f64>) {
        self.records.insert(id.into(), (image_vec, text_vec));
    }

    pub fn load(path: impl AsRef<Path>, model_id: impl Into<String>, expected_dim: Option<usize>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        let mut out = PrecomputedEmbeddings::new(model_id, expected_dim);
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PrecomputedRecord = serde_json::from_str(&line).map_err(|e| Error::Schema {
                row: i + 1,
                message: e.to_string(),
            })?;
            out.insert(rec.id, rec.image_vec, rec.text_vec);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn lookup<S: Scalar>(&self, id: &str, image: bool) -> Result<Embedding<S>> {
        let (img, txt) = self.records.get(id).ok_or_else(|| Error::ProviderUnavailable {
            attempts: 1,
            message: format!("no precomputed embedding for id {id}"),
        })?;
        let raw = if image { img } else { txt };
        if let Some(expected) = self.expected_dim {
            if raw.len() != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    found: raw.len(),
                });
            }
        }
        Embedding::normalized(raw.iter().map(|v| S::from_f64_lossy(*v)).collect())
    }
}

impl<S: Scalar> EmbeddingProvider<S> for PrecomputedEmbeddings {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_image(&self, instance: &Instance) -> Result<Embedding<S>> {
        self.lookup(&instance.id, true)
    }

    fn embed_text(&self, instance: &Instance) -> Result<Embedding<S>> {
        self.lookup(&instance.id, false)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingProviderConfig {
    /// Base URL of the sidecar, e.g. `http://127.0.0.1:8008`.
    pub endpoint: String,
    pub model_id: String,
    #[serde(with = "duration_ms")]
    pub timeout: Duration,
    pub expected_dim: usize,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_retries() -> u32 {
    3
}

fn default_in_flight() -> usize {
    4
}

impl EmbeddingProviderConfig {
    pub fn new(endpoint: impl Into<String>, model_id: impl Into<String>, expected_dim: usize) -> Result<Self> {
        if expected_dim == 0 {
            return Err(Error::InvalidInput("expected-dim must be positive".into()));
        }
        Ok(EmbeddingProviderConfig {
            endpoint: endpoint.into(),
            model_id: model_id.into(),
            timeout: Duration::from_secs(30),
            expected_dim,
            retries: default_retries(),
            max_in_flight: default_in_flight(),
        })
    }
}

#[derive(Debug, Serialize)]
struct TextRequest<'a> {
    texts: Vec<&'a str>,
}

#[derive(Debug, Serialize)]
struct ImageRequest {
    images_b64: Vec<String>,
}

/// Response body shared by `/embed/text` and `/embed/image`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub model: String,
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
}

/// Client for the embedding sidecar's HTTP protocol.
pub struct HttpEmbeddingProvider {
    config: EmbeddingProviderConfig,
    client: reqwest::blocking::Client,
    gate: InFlightGate,
}

impl HttpEmbeddingProvider {
    pub fn new(config: EmbeddingProviderConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        let gate = InFlightGate::new(config.max_in_flight.max(1));
        Ok(HttpEmbeddingProvider { config, client, gate })
    }

    pub fn embed_texts<S: Scalar>(&self, texts: &[&str]) -> Result<Vec<Embedding<S>>> {
        self.post("embed/text", &TextRequest { texts: texts.to_vec() }, texts.len())
    }

    pub fn embed_images<S: Scalar>(&self, images: &[&[u8]]) -> Result<Vec<Embedding<S>>> {
        let body = ImageRequest {
            images_b64: images
                .iter()
                .map(|b| base64::engine::general_purpose::STANDARD.encode(b))
                .collect(),
        };
        self.post("embed/image", &body, images.len())
    }

    fn post<S: Scalar, B: Serialize>(&self, route: &str, body: &B, n: usize) -> Result<Vec<Embedding<S>>> {
        let url = format!("{}/{}", self.config.endpoint.trim_end_matches('/'), route);
        let _permit = self.gate.acquire();
        let mut attempts = 0;
        let mut last_err = String::new();
        while attempts <= self.config.retries {
            attempts += 1;
            match self.client.post(&url).json(body).send() {
                Ok(resp) if resp.status().is_success() => {
                    let parsed: EmbedResponse = resp.json().map_err(|e| Error::InvalidEmbedding(e.to_string()))?;
                    return self.validate(parsed, n);
                }
                Ok(resp) if resp.status().is_client_error() => {
                    return Err(Error::BadRequest(format!("{url}: HTTP {}", resp.status())));
                }
                Ok(resp) => last_err = format!("{url}: HTTP {}", resp.status()),
                Err(e) => last_err = format!("{url}: {e}"),
            }
            if attempts <= self.config.retries {
                std::thread::sleep(Duration::from_millis(100 * (1 << attempts.min(6))));
            }
        }
        Err(Error::ProviderUnavailable {
            attempts,
            message: last_err,
        })
    }

    fn validate<S: Scalar>(&self, resp: EmbedResponse, n: usize) -> Result<Vec<Embedding<S>>> {
        if resp.dim != self.config.expected_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.expected_dim,
                found: resp.dim,
            });
        }
        if resp.vectors.len() != n {
            return Err(Error::InvalidEmbedding(format!(
                "requested {n} vectors, received {}",
                resp.vectors.len()
            )));
        }
        resp.vectors
            .into_iter()
            .map(|v| {
                if v.len() != resp.dim {
                    return Err(Error::DimensionMismatch {
                        expected: resp.dim,
                        found: v.len(),
                    });
                }
                Embedding::normalized(v.into_iter().map(S::from_f64_lossy).collect())
            })
            .collect()
    }
}

impl<S: Scalar> EmbeddingProvider<S> for HttpEmbeddingProvider {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn embed_image(&self, instance: &Instance) -> Result<Embedding<S>> {
        let image = instance.image.load()?;
        Ok(self.embed_images::<S>(&[&image.bytes])?.remove(0))
    }

    fn embed_text(&self, instance: &Instance) -> Result<Embedding<S>> {
        Ok(self.embed_texts::<S>(&[instance.text.as_str()])?.remove(0))
    }
}

/// Counting gate bounding concurrent requests.
struct InFlightGate {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlightGate);

impl InFlightGate {
    fn new(limit: usize) -> Self {
        InFlightGate {
            limit,
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

pub(crate) mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ImageSource;

    fn unit(v: &[f64]) -> Embedding<f64> {
        Embedding::normalized(v.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6)
    }

    #[test]
    fn combine_orthonormal() {
        let c = combine(&unit(&[1.0, 0.0]), &unit(&[0.0, 1.0])).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(c.values(), &[h, 0.0, 0.0, h]));
    }

    #[test]
    fn combine_hand_computed() {
        let c = combine(&unit(&[0.6, 0.8]), &unit(&[1.0, 0.0])).unwrap();
        let s = 2f64.sqrt();
        assert!(close(c.values(), &[0.6 / s, 0.8 / s, 1.0 / s, 0.0]));
        assert!((c.values()[0] - 0.4243).abs() < 1e-4);
    }

    #[test]
    fn combine_with_itself_and_order_sensitivity() {
        let v = unit(&[0.3, -0.4, 1.2]);
        let c = combine(&v, &v).unwrap();
        let expect: Vec<f64> = v.values().iter().chain(v.values()).map(|x| x / 2f64.sqrt()).collect();
        assert!(close(c.values(), &expect));

        let a = unit(&[1.0, 0.0]);
        let b = unit(&[0.6, 0.8]);
        assert_ne!(combine(&a, &b).unwrap(), combine(&b, &a).unwrap());
    }

    #[test]
    fn cosine_examples() {
        let v = unit(&[0.2, 0.9, -0.1]);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&unit(&[1.0, 0.0]), &unit(&[0.0, 1.0])).unwrap(), 0.0);
        assert!((cosine_similarity(&unit(&[1.0, 0.0]), &unit(&[0.6, 0.8])).unwrap() - 0.6).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&unit(&[1.0, 0.0]), &unit(&[1.0, 0.0, 0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rejects_degenerate_vectors() {
        assert!(Embedding::<f32>::normalized(vec![]).is_err());
        assert!(Embedding::<f32>::normalized(vec![0.0, 0.0]).is_err());
        assert!(Embedding::<f32>::normalized(vec![f32::NAN, 1.0]).is_err());
        assert!(Embedding::<f64>::from_unit(vec![0.5, 0.5]).is_err());
        assert!(Embedding::<f64>::from_unit(vec![0.6, 0.8]).is_ok());
    }

    fn instance(id: &str) -> Instance {
        Instance::new(id, ImageSource::File("unused.png".into()), "t", "k").unwrap()
    }

    #[test]
    fn precomputed_embed_instance() {
        let mut p = PrecomputedEmbeddings::new("fixture", Some(2));
        p.insert("a", vec![1.0, 0.0], vec![0.0, 1.0]);
        p.insert("bad", vec![1.0, 0.0, 0.0], vec![0.0, 1.0]);
        let v: Embedding<f32> = embed_instance(&instance("a"), &p).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!(v.values().iter().zip([h, 0.0, 0.0, h]).all(|(x, y)| (x - y).abs() < 1e-6));
        let again: Embedding<f32> = embed_instance(&instance("a"), &p).unwrap();
        assert_eq!(v, again);
        assert!(matches!(
            embed_instance::<f32>(&instance("bad"), &p),
            Err(Error::DimensionMismatch { expected: 2, found: 3 })
        ));
        assert!(matches!(
            embed_instance::<f32>(&instance("nobody"), &p),
            Err(Error::ProviderUnavailable { .. })
        ));
    }
}
