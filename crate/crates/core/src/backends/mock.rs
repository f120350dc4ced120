//! Deterministic in-process backend with latent ground truth.
//!
//! Each image the mock produces is a tiny PNG whose `tEXt` chunk carries the
//! latent state (identity, attribute flags, age, distortion), so a fresh
//! mock pointed at an existing image store can answer for images created by
//! an earlier process. Every response is a function of the world seed and
//! the request contents only.

use std::collections::{BTreeMap, HashMap};
use std::io::Cursor;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AttributeQuery, Backend, BackendError, EditRequest};
use crate::attrdetect::render_attribute_response;
use crate::domain::{AttributeId, AttributeVector, ImageRef};

const LATENT_KEY: &str = "cforge-latent";

/// Hyperparameter the mock reads to decide whether an edit over-edits.
pub const MOCK_STRENGTH_KEY: &str = "edit_guidance_scale";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub seed: u64,
    pub edit_success_rate: f64,
    pub distortion_rate: f64,
    pub side_effect_rate: f64,
    /// Per-attribute presence rate on generated source faces.
    pub source_attribute_rate: f64,
    pub embedding_dim: usize,
    /// Edits with `edit_guidance_scale` at or above this are always distorted.
    pub overedit_strength: f64,
    /// Probability that an attribute response is garbage.
    pub garble_rate: f64,
    /// Artificial per-request latency, for concurrency probing.
    pub latency_ms: u64,
    /// Where to rehydrate latent state for images this process did not make.
    pub image_dir: Option<PathBuf>,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            seed: 1,
            edit_success_rate: 0.9,
            distortion_rate: 0.1,
            side_effect_rate: 0.1,
            source_attribute_rate: 0.08,
            embedding_dim: 768,
            overedit_strength: 12.0,
            garble_rate: 0.0,
            latency_ms: 0,
            image_dir: None,
        }
    }
}

/// Ground truth for one mock image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub identity: String,
    pub attributes: AttributeVector,
    pub distorted: bool,
    /// Provenance string; keeps bytes distinct for otherwise equal states.
    pub lineage: String,
}

/// Concepts the mock scores as a function of latent flags.
pub const MOCK_CONCEPTS: [&str; 8] = ["beard", "eyeglasses", "sunglass", "face", "smile", "hat", "lipstick", "hair"];

fn concept_base(concept: &str, v: &AttributeVector) -> Option<f64> {
    use AttributeId::*;
    let f = |a| if v.get(a) { 1.0 } else { 0.0 };
    Some(match concept {
        "beard" => 0.2 + 0.5 * f(ThickBeard) + 0.25 * f(Mustache),
        "eyeglasses" => 0.1 + 0.6 * f(Glasses) + 0.3 * f(Sunglasses),
        "sunglass" => 0.1 + 0.6 * f(Sunglasses),
        "face" => 0.9 - 0.4 * f(Facemask) - 0.1 * f(Sunglasses),
        "smile" => 0.15 + 0.6 * f(Smile) - 0.1 * f(Facemask),
        "hat" => 0.05 + 0.3 * f(HeadBand),
        "lipstick" => 0.1 + 0.5 * f(RedLipstick) + 0.2 * f(HeavyMakeup),
        "hair" => 0.5 + 0.1 * f(CurlyHair) + 0.1 * f(BlueHair) + 0.1 * f(RedHair) - 0.2 * f(BuzzCut),
        _ => return None,
    })
}

pub struct MockWorld {
    config: MockConfig,
    images: Mutex<HashMap<ImageRef, (Latent, Vec<u8>)>>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

struct InFlight<'a>(&'a MockWorld);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

impl MockWorld {
    pub fn new(config: MockConfig) -> Self {
        MockWorld {
            config,
            images: Mutex::new(HashMap::new()),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    /// Highest number of simultaneously outstanding requests observed.
    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    fn enter(&self) -> InFlight<'_> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        if self.config.latency_ms > 0 {
            std::thread::sleep(std::time::Duration::from_millis(self.config.latency_ms));
        }
        InFlight(self)
    }

    fn rng(&self, parts: &[&str]) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.config.seed.to_le_bytes());
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p.as_bytes());
        }
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    /// Latent state of an image, rehydrating from the image directory when
    /// this instance has not seen it.
    pub fn latent(&self, image: &ImageRef) -> Option<Latent> {
        if let Some((l, _)) = self.images.lock().expect("mock lock").get(image) {
            return Some(l.clone());
        }
        let dir = self.config.image_dir.as_ref()?;
        let bytes = std::fs::read(dir.join(format!("{image}.png"))).ok()?;
        if &ImageRef::of_bytes(&bytes) != image {
            return None;
        }
        let latent = decode_latent(&bytes)?;
        self.images.lock().expect("mock lock").insert(image.clone(), (latent.clone(), bytes));
        Some(latent)
    }

    fn insert(&self, latent: Latent) -> ImageRef {
        let bytes = encode_png(&latent);
        let image = ImageRef::of_bytes(&bytes);
        self.images.lock().expect("mock lock").entry(image.clone()).or_insert((latent, bytes));
        image
    }

    fn require(&self, image: &ImageRef) -> Result<Latent, BackendError> {
        self.latent(image).ok_or_else(|| BackendError::UnknownImage(image.clone()))
    }
}

fn encode_png(latent: &Latent) -> Vec<u8> {
    let json = serde_json::to_string(latent).expect("latent serializes");
    let digest = Sha256::digest(json.as_bytes());
    let mut pixels = Vec::with_capacity(8 * 8 * 3);
    for i in 0..64 {
        pixels.extend_from_slice(&[digest[i % 32], digest[(i * 7 + 3) % 32], digest[(i * 13 + 5) % 32]]);
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, 8, 8);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.add_text_chunk(LATENT_KEY.to_string(), hex::encode(json.as_bytes())).expect("ascii keyword");
        let mut w = enc.write_header().expect("in-memory png");
        w.write_image_data(&pixels).expect("in-memory png");
        w.finish().expect("in-memory png");
    }
    out
}

fn decode_latent(bytes: &[u8]) -> Option<Latent> {
    let reader = png::Decoder::new(Cursor::new(bytes)).read_info().ok()?;
    let chunk = reader.info().uncompressed_latin1_text.iter().find(|c| c.keyword == LATENT_KEY)?;
    let json = hex::decode(&chunk.text).ok()?;
    serde_json::from_slice(&json).ok()
}

impl Backend for MockWorld {
    fn txt2img(&self, prompt: &str, seed: u64) -> Result<ImageRef, BackendError> {
        let _g = self.enter();
        let mut rng = self.rng(&["txt2img", prompt, &seed.to_string()]);
        let age = rng.random_range(18..=80);
        let mut attributes = AttributeVector::blank(age);
        for a in AttributeId::NON_AGE {
            attributes.set(a, rng.random_bool(self.config.source_attribute_rate));
        }
        let identity = prompt.rsplit("of ").next().unwrap_or(prompt).trim().to_string();
        Ok(self.insert(Latent { identity, attributes, distorted: false, lineage: format!("txt2img:{seed}:{prompt}") }))
    }

    fn edit(&self, request: &EditRequest) -> Result<ImageRef, BackendError> {
        let _g = self.enter();
        let parent = self
            .latent(&request.parent_image_ref)
            .ok_or_else(|| BackendError::UnknownParent(request.parent_image_ref.clone()))?;
        let params = serde_json::to_string(&request.hyperparams).expect("map serializes");
        let mut rng = self.rng(&[
            "edit",
            request.parent_image_ref.as_str(),
            request.attribute.as_str(),
            &params,
            &request.seed.to_string(),
        ]);
        let c = &self.config;
        let mut v = parent.attributes.clone();
        let attr = request.attribute;
        let age = i64::from(v.age_years);
        let new_age = match attr {
            AttributeId::Old => age + rng.random_range(10..=25),
            AttributeId::Young => age - rng.random_range(10..=25),
            _ => {
                if rng.random_bool(c.edit_success_rate) {
                    v.set(attr, true);
                }
                age + rng.random_range(-3..=3)
            }
        };
        v.age_years = new_age.max(1) as u32;
        if rng.random_bool(c.side_effect_rate) {
            let others: Vec<AttributeId> = AttributeId::NON_AGE.into_iter().filter(|a| *a != attr).collect();
            let t = others[rng.random_range(0..others.len())];
            v.set(t, !v.get(t));
        }
        let overedit = request.hyperparams.get(MOCK_STRENGTH_KEY).is_some_and(|s| *s >= c.overedit_strength);
        let distorted = rng.random_bool(c.distortion_rate) || overedit || parent.distorted;
        Ok(self.insert(Latent {
            identity: parent.identity,
            attributes: v,
            distorted,
            lineage: format!("edit:{}:{}:{}:{}", request.parent_image_ref, attr, params, request.seed),
        }))
    }

    fn embed(&self, image: &ImageRef) -> Result<Vec<f64>, BackendError> {
        let _g = self.enter();
        let latent = self.require(image)?;
        let dim = self.config.embedding_dim.max(1);
        let mut rng = self.rng(&["embed", image.as_str()]);
        let mut noise: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = noise.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        // Whole noise vector has L2 norm below 0.45.
        let scale = 0.45 * rng.random_range(0.0..1.0) / norm;
        noise.iter_mut().for_each(|x| *x *= scale);
        noise[0] += if latent.distorted { 1.0 } else { -1.0 };
        Ok(noise)
    }

    fn query_attributes(&self, query: &AttributeQuery) -> Result<String, BackendError> {
        let _g = self.enter();
        let source = self.require(&query.source_ref)?;
        let transformed = self.require(&query.transformed_ref)?;
        let attrs: Vec<&str> = query.attributes.iter().map(|a| a.as_str()).collect();
        let mut rng =
            self.rng(&["attributes", query.source_ref.as_str(), query.transformed_ref.as_str(), &attrs.join(",")]);
        if rng.random_bool(self.config.garble_rate) {
            return Ok("I'm sorry, I can't determine that from these images.".into());
        }
        let pick = |v: &AttributeVector| -> BTreeMap<AttributeId, bool> {
            query.attributes.iter().map(|a| (*a, v.get(*a))).collect()
        };
        Ok(format!(
            "```json\n{}\n```",
            render_attribute_response(&pick(&source.attributes), &pick(&transformed.attributes))
        ))
    }

    fn age(&self, image: &ImageRef) -> Result<i64, BackendError> {
        let _g = self.enter();
        Ok(i64::from(self.require(image)?.attributes.age_years))
    }

    fn concept_scores(&self, image: &ImageRef, concepts: &[String]) -> Result<BTreeMap<String, f64>, BackendError> {
        let _g = self.enter();
        let latent = self.require(image)?;
        concepts
            .iter()
            .map(|c| {
                let mut rng = self.rng(&["concept", image.as_str(), c]);
                let base = match concept_base(c, &latent.attributes) {
                    Some(b) => b,
                    // Unmodelled concepts score a constant per concept.
                    None => 0.3 + 0.4 * self.rng(&["concept-const", c]).random_range(0.0..1.0),
                };
                Ok((c.clone(), base + rng.random_range(-0.009..0.009)))
            })
            .collect()
    }

    fn fetch_image(&self, image: &ImageRef) -> Result<Vec<u8>, BackendError> {
        let _g = self.enter();
        self.latent(image).ok_or_else(|| BackendError::UnknownImage(image.clone()))?;
        Ok(self.images.lock().expect("mock lock")[image].1.clone())
    }

    fn version(&self) -> String {
        format!("mock-seed-{}", self.config.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::estimate_age;

    const PROMPT: &str = "A photo of the face of Test Person";

    fn world(cfg: MockConfig) -> MockWorld {
        MockWorld::new(cfg)
    }

    fn edit_req(parent: &ImageRef, attribute: AttributeId) -> EditRequest {
        EditRequest {
            parent_image_ref: parent.clone(),
            attribute,
            hyperparams: [(MOCK_STRENGTH_KEY.to_string(), 5.0)].into(),
            seed: 11,
        }
    }

    #[test]
    fn txt2img_is_deterministic() {
        let w = world(MockConfig::default());
        let a = w.txt2img(PROMPT, 7).unwrap();
        let b = w.txt2img(PROMPT, 7).unwrap();
        assert_eq!(a, b);
        let fresh = world(MockConfig::default());
        assert_eq!(fresh.txt2img(PROMPT, 7).unwrap(), a);
        assert_ne!(w.txt2img(PROMPT, 8).unwrap(), a);
    }

    #[test]
    fn source_latent_audit() {
        let w = world(MockConfig::default());
        for seed in 0..200 {
            let r = w.txt2img(PROMPT, seed).unwrap();
            let l = w.latent(&r).unwrap();
            assert!(!l.distorted);
            assert!((18..=80).contains(&l.attributes.age_years));
        }
    }

    #[test]
    fn forced_success_edit_sets_only_attribute() {
        let w = world(MockConfig {
            edit_success_rate: 1.0,
            side_effect_rate: 0.0,
            distortion_rate: 0.0,
            ..MockConfig::default()
        });
        for seed in 0..30 {
            let src = w.txt2img(PROMPT, seed).unwrap();
            let tf = w.edit(&edit_req(&src, AttributeId::Scarf)).unwrap();
            let (s, t) = (w.latent(&src).unwrap(), w.latent(&tf).unwrap());
            let expected = s.attributes.clone().with(AttributeId::Scarf, true);
            assert_eq!(t.attributes.flags, expected.flags);
            assert!(!t.distorted);
            let drift = i64::from(t.attributes.age_years) - i64::from(s.attributes.age_years);
            assert!((-3..=3).contains(&drift));
        }
    }

    #[test]
    fn forced_distortion_and_edit_determinism() {
        let w = world(MockConfig { distortion_rate: 1.0, ..MockConfig::default() });
        let src = w.txt2img(PROMPT, 1).unwrap();
        let req = edit_req(&src, AttributeId::Smile);
        let a = w.edit(&req).unwrap();
        assert_eq!(w.edit(&req).unwrap(), a);
        assert!(w.latent(&a).unwrap().distorted);
    }

    #[test]
    fn overedit_is_distorted() {
        let w = world(MockConfig { distortion_rate: 0.0, ..MockConfig::default() });
        let src = w.txt2img(PROMPT, 1).unwrap();
        let mut req = edit_req(&src, AttributeId::BlueHair);
        req.hyperparams.insert(MOCK_STRENGTH_KEY.into(), 15.0);
        assert!(w.latent(&w.edit(&req).unwrap()).unwrap().distorted);
    }

    #[test]
    fn unknown_parent() {
        let w = world(MockConfig::default());
        let bogus = ImageRef::of_bytes(b"nothing");
        assert_eq!(w.edit(&edit_req(&bogus, AttributeId::Smile)), Err(BackendError::UnknownParent(bogus)));
    }

    #[test]
    fn embedding_construction_audit() {
        let w = world(MockConfig { distortion_rate: 0.5, ..MockConfig::default() });
        for seed in 0..40 {
            let src = w.txt2img(PROMPT, seed).unwrap();
            let tf = w.edit(&edit_req(&src, AttributeId::Goatee)).unwrap();
            for r in [src, tf] {
                let e = w.embed(&r).unwrap();
                assert_eq!(e.len(), 768);
                if w.latent(&r).unwrap().distorted {
                    assert!(e[0] > 0.5 && e[0] < 1.5, "{}", e[0]);
                } else {
                    assert!(e[0] > -1.5 && e[0] < -0.5, "{}", e[0]);
                }
            }
        }
    }

    #[test]
    fn age_edits_follow_mock_semantics() {
        let w = world(MockConfig::default());
        for seed in 0..50 {
            let src = w.txt2img(PROMPT, seed).unwrap();
            let s_age = estimate_age(&w, &src).unwrap() as i64;
            let old = w.edit(&edit_req(&src, AttributeId::Old)).unwrap();
            let d = estimate_age(&w, &old).unwrap() as i64 - s_age;
            assert!((10..=25).contains(&d), "{d}");
        }
    }

    #[test]
    fn concept_scores_follow_table() {
        let w = world(MockConfig {
            edit_success_rate: 1.0,
            side_effect_rate: 0.0,
            source_attribute_rate: 0.0,
            ..MockConfig::default()
        });
        let src = w.txt2img(PROMPT, 3).unwrap();
        let tf = w.edit(&edit_req(&src, AttributeId::ThickBeard)).unwrap();
        let beard = ["beard".to_string()];
        let s = w.concept_scores(&tf, &beard).unwrap()["beard"];
        assert!(s > 0.69 && s < 0.71, "{s}");
        assert_eq!(w.concept_scores(&tf, &beard).unwrap()["beard"], s);
        assert!(w.concept_scores(&tf, &[]).unwrap().is_empty());
    }

    #[test]
    fn rehydrates_from_image_dir() {
        let dir = tempfile::tempdir().unwrap();
        let w = world(MockConfig::default());
        let src = w.txt2img(PROMPT, 5).unwrap();
        std::fs::write(dir.path().join(format!("{src}.png")), w.fetch_image(&src).unwrap()).unwrap();
        let fresh = world(MockConfig { image_dir: Some(dir.path().into()), ..MockConfig::default() });
        assert_eq!(fresh.latent(&src), w.latent(&src));
    }
}
