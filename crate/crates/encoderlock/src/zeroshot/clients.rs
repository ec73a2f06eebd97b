//! Client boundaries for the zero-shot pipeline: a prompt-completion agent
//! and a text-to-image generator.
//!
//! Two backends each: a deterministic offline mock (used by every test)
//! and a live backend speaking a generic HTTP JSON contract, configured
//! through `ENCODERLOCK_AGENT_URL` / `ENCODERLOCK_AGENT_KEY` and
//! `ENCODERLOCK_GEN_URL` / `ENCODERLOCK_GEN_KEY`.

use crate::error::{Error, Result};
use crate::seeds;
use base64::Engine;
use image::RgbImage;
use rand::Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use std::time::Duration;

use super::QualitySettings;

/// Prompt-completion boundary. One request in, one text completion out.
pub trait AgentClient {
    fn complete(&mut self, prompt: &str) -> Result<String>;
}

/// Text-to-image boundary. Deterministic given `(prompt, seed)` for
/// backends that support seeding.
pub trait ImageGeneratorClient: Sync {
    fn generate(
        &self,
        prompt: &str,
        count: usize,
        quality: &QualitySettings,
        seed: u64,
    ) -> Result<Vec<RgbImage>>;
}

// ---------------------------------------------------------------------------
// Mock agent
// ---------------------------------------------------------------------------

/// Deterministic offline agent.
///
/// Serves prompts from a fixed pool and revises flagged prompts by walking
/// a replacement pool. Optionally scripted to return a prompt unchanged
/// (to exercise the pair-freezing path).
#[derive(Debug, Clone)]
pub struct MockAgent {
    pub prompt_pool: Vec<String>,
    pub replacement_pool: Vec<String>,
    next_replacement: usize,
    /// Indices the agent stubbornly refuses to revise.
    pub refuse_indices: Vec<usize>,
}

/// Initial prompt fixture for the default mock (military-vehicles theme).
pub const MOCK_INITIAL_PROMPTS: [&str; 10] = [
    "futuristic tank, stealth design",
    "antique cannon, ceremonial use",
    "amphibious assault vehicle, coastal operations",
    "drone carrier truck, mobile base",
    "armored medical evacuation vehicle, red cross",
    "cyberpunk hoverbike, scout unit",
    "nuclear-powered submarine, deep-sea exploration",
    "stealth bomber, night operation",
    "battlefield command and control center, high-tech",
    "anti-aircraft missile system, mobile defense",
];

/// Refined-prompt fixture used as the mock's replacement pool.
pub const MOCK_REFINED_PROMPTS: [&str; 10] = [
    "Armored Ground Vehicle, Modern Combat",
    "Artillery System, Classic Aesthetics",
    "Amphibious Assault Transport",
    "Drone Carrier, Tactical",
    "Field Support Unit, Healthcare",
    "Reconnaissance Craft, Urban Aerial",
    "Deep Sea Explorer, Nuclear Propulsion",
    "Stealth Surveillance Plane",
    "Command Center, High-Tech",
    "Missile Defense Network, Mobile",
];

impl Default for MockAgent {
    fn default() -> Self {
        MockAgent {
            prompt_pool: MOCK_INITIAL_PROMPTS.iter().map(|s| s.to_string()).collect(),
            replacement_pool: MOCK_REFINED_PROMPTS.iter().map(|s| s.to_string()).collect(),
            next_replacement: 0,
            refuse_indices: Vec::new(),
        }
    }
}

impl MockAgent {
    pub fn with_pools(prompt_pool: Vec<String>, replacement_pool: Vec<String>) -> Self {
        MockAgent {
            prompt_pool,
            replacement_pool,
            next_replacement: 0,
            refuse_indices: Vec::new(),
        }
    }
}

#[derive(Deserialize)]
struct RefineRequestPayload {
    prompts: Vec<String>,
    flagged_indices: Vec<usize>,
}

impl AgentClient for MockAgent {
    fn complete(&mut self, prompt: &str) -> Result<String> {
        if let Some(json_start) = prompt.find("\n{") {
            // refinement request: revise the flagged prompts
            let payload: RefineRequestPayload = serde_json::from_str(&prompt[json_start + 1..])
                .map_err(|e| Error::Parse {
                    detail: format!("mock agent could not read refine payload: {e}"),
                    raw: prompt.to_string(),
                })?;
            let mut replacements = Vec::new();
            for &idx in &payload.flagged_indices {
                if self.refuse_indices.contains(&idx) {
                    // return the prompt unchanged
                    replacements.push(serde_json::json!({
                        "index": idx,
                        "prompt": payload.prompts.get(idx).cloned().unwrap_or_default(),
                    }));
                    continue;
                }
                let r = self.replacement_pool
                    [self.next_replacement % self.replacement_pool.len()]
                .clone();
                self.next_replacement += 1;
                replacements.push(serde_json::json!({ "index": idx, "prompt": r }));
            }
            return Ok(serde_json::json!({ "replacements": replacements }).to_string());
        }
        // generation request: emit the pool as a JSON array
        Ok(serde_json::to_string(&self.prompt_pool)?)
    }
}

// ---------------------------------------------------------------------------
// Mock generator
// ---------------------------------------------------------------------------

/// Deterministic procedural image generator.
///
/// Renders an oriented sinusoid plus a bright patch whose parameters are
/// derived from the prompt text, so identical prompts yield structurally
/// identical image groups and distinct prompts diverge. Lower
/// `inference_iterations` blends in more seeded noise (a crude quality
/// knob).
#[derive(Debug, Clone)]
pub struct MockGenerator {
    pub width: u32,
    pub height: u32,
    /// Hash only the leading token of the prompt, making prompts that
    /// share their first word render near-identically (used to stage
    /// high-similarity pairs in tests).
    pub key_on_first_token: bool,
}

impl Default for MockGenerator {
    fn default() -> Self {
        MockGenerator {
            width: 16,
            height: 16,
            key_on_first_token: false,
        }
    }
}

impl MockGenerator {
    fn prompt_key(&self, prompt: &str) -> u64 {
        let norm = super::normalize_prompt(prompt);
        let key_src = if self.key_on_first_token {
            norm.split_whitespace().next().unwrap_or("").to_string()
        } else {
            norm
        };
        let digest = Sha256::digest(key_src.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

impl ImageGeneratorClient for MockGenerator {
    fn generate(
        &self,
        prompt: &str,
        count: usize,
        quality: &QualitySettings,
        seed: u64,
    ) -> Result<Vec<RgbImage>> {
        let key = self.prompt_key(prompt);
        let (w, h) = (self.width, self.height);
        // generation quality: fewer iterations, more residual noise
        let iters = quality.inference_iterations.max(1) as f64;
        let residual = (1.0 / iters).min(1.0) * 120.0;
        let mut out = Vec::with_capacity(count);
        let mut prng = seeds::stream(key, "mockgen/params", 0);
        let fx = prng.gen_range(0.2..=1.2);
        let fy = prng.gen_range(0.2..=1.2);
        let phase = prng.gen_range(0.0..=std::f64::consts::TAU);
        let px = prng.gen_range(0..w);
        let py = prng.gen_range(0..h);
        let base_rgb = [
            prng.gen_range(40..=215u16) as f64,
            prng.gen_range(40..=215u16) as f64,
            prng.gen_range(40..=215u16) as f64,
        ];
        for i in 0..count {
            let mut rng = seeds::stream(key ^ seed, "mockgen/img", i as u64);
            let jx = rng.gen_range(-1i64..=1);
            let jy = rng.gen_range(-1i64..=1);
            let mut img = RgbImage::new(w, h);
            for y in 0..h {
                for x in 0..w {
                    let s = ((x as f64 * fx + y as f64 * fy) + phase).sin() * 0.5 + 0.5;
                    let patch = {
                        let dx = x as i64 - (px as i64 + jx);
                        let dy = y as i64 - (py as i64 + jy);
                        if dx * dx + dy * dy <= 4 {
                            70.0
                        } else {
                            0.0
                        }
                    };
                    let noise = residual * (rng.gen_range(0.0..=1.0) - 0.5);
                    let mut px_rgb = [0u8; 3];
                    for c in 0..3 {
                        let v = base_rgb[c] * s + patch + noise;
                        px_rgb[c] = v.clamp(0.0, 255.0) as u8;
                    }
                    img.put_pixel(x, y, image::Rgb(px_rgb));
                }
            }
            out.push(img);
        }
        Ok(out)
    }
}

/// A generator that fails for chosen prompts (exercises the partial-failure
/// ledger).
pub struct FailingGenerator<G> {
    pub inner: G,
    pub fail_substring: String,
}

impl<G: ImageGeneratorClient> ImageGeneratorClient for FailingGenerator<G> {
    fn generate(
        &self,
        prompt: &str,
        count: usize,
        quality: &QualitySettings,
        seed: u64,
    ) -> Result<Vec<RgbImage>> {
        if prompt.contains(&self.fail_substring) {
            return Err(Error::Generator(format!("scripted failure for `{prompt}`")));
        }
        self.inner.generate(prompt, count, quality, seed)
    }
}

// ---------------------------------------------------------------------------
// Live HTTP clients
// ---------------------------------------------------------------------------

pub const ENV_AGENT_URL: &str = "ENCODERLOCK_AGENT_URL";
pub const ENV_AGENT_KEY: &str = "ENCODERLOCK_AGENT_KEY";
pub const ENV_GEN_URL: &str = "ENCODERLOCK_GEN_URL";
pub const ENV_GEN_KEY: &str = "ENCODERLOCK_GEN_KEY";

const RETRIES: usize = 3;
const BACKOFF_MS: u64 = 250;

/// Generic prompt-completion endpoint:
/// `POST {url} {"prompt": ...}` -> `{"completion": ...}`.
pub struct HttpAgentClient {
    url: String,
    key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpAgentClient {
    pub fn new(url: String, key: Option<String>) -> Self {
        HttpAgentClient {
            url,
            key,
            client: reqwest::blocking::Client::new(),
        }
    }

    pub fn from_env() -> Result<Self> {
        let url = std::env::var(ENV_AGENT_URL)
            .map_err(|_| Error::Agent(format!("{ENV_AGENT_URL} not set")))?;
        Ok(Self::new(url, std::env::var(ENV_AGENT_KEY).ok()))
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    completion: String,
}

impl AgentClient for HttpAgentClient {
    fn complete(&mut self, prompt: &str) -> Result<String> {
        let mut last_err = String::new();
        for attempt in 0..RETRIES {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(BACKOFF_MS << attempt));
            }
            let mut req = self
                .client
                .post(&self.url)
                .json(&serde_json::json!({ "prompt": prompt }));
            if let Some(key) = &self.key {
                req = req.bearer_auth(key);
            }
            match req.send().and_then(|r| r.error_for_status()) {
                Ok(resp) => {
                    let text = resp.text().map_err(|e| Error::Agent(e.to_string()))?;
                    let parsed: CompletionResponse =
                        serde_json::from_str(&text).map_err(|e| Error::Parse {
                            detail: format!("bad completion payload: {e}"),
                            raw: text.clone(),
                        })?;
                    return Ok(parsed.completion);
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::Agent(format!(
            "agent unreachable after {RETRIES} attempts: {last_err}"
        )))
    }
}

/// Generic text-to-image endpoint:
/// `POST {url} {"prompt", "count", "steps", "seed"}` ->
/// `{"images": ["<base64 png>", ...]}`.
pub struct HttpGeneratorClient {
    url: String,
    key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpGeneratorClient {
    pub fn new(url: String, key: Option<String>) -> Self {
        HttpGeneratorClient {
            url,
            key,
            client: reqwest::blocking::Client::new(),
        }
    }

    pub fn from_env() -> Result<Self> {
        let url = std::env::var(ENV_GEN_URL)
            .map_err(|_| Error::Generator(format!("{ENV_GEN_URL} not set")))?;
        Ok(Self::new(url, std::env::var(ENV_GEN_KEY).ok()))
    }
}

#[derive(Deserialize)]
struct ImagesResponse {
    images: Vec<String>,
}

impl ImageGeneratorClient for HttpGeneratorClient {
    fn generate(
        &self,
        prompt: &str,
        count: usize,
        quality: &QualitySettings,
        seed: u64,
    ) -> Result<Vec<RgbImage>> {
        let mut last_err = String::new();
        for attempt in 0..RETRIES {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(BACKOFF_MS << attempt));
            }
            let mut req = self.client.post(&self.url).json(&serde_json::json!({
                "prompt": prompt,
                "count": count,
                "steps": quality.inference_iterations,
                "seed": seed,
            }));
            if let Some(key) = &self.key {
                req = req.bearer_auth(key);
            }
            match req.send().and_then(|r| r.error_for_status()) {
                Ok(resp) => {
                    let text = resp.text().map_err(|e| Error::Generator(e.to_string()))?;
                    let parsed: ImagesResponse =
                        serde_json::from_str(&text).map_err(|e| Error::Parse {
                            detail: format!("bad generator payload: {e}"),
                            raw: text.clone(),
                        })?;
                    let mut out = Vec::with_capacity(parsed.images.len());
                    for b64 in parsed.images {
                        let bytes = base64::engine::general_purpose::STANDARD
                            .decode(b64.as_bytes())
                            .map_err(|e| Error::Parse {
                                detail: format!("bad base64 image: {e}"),
                                raw: String::new(),
                            })?;
                        let img = image::load_from_memory(&bytes)?.to_rgb8();
                        out.push(img);
                    }
                    return Ok(out);
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::Generator(format!(
            "generator unreachable after {RETRIES} attempts: {last_err}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_generator_is_deterministic_per_prompt_and_seed() {
        let g = MockGenerator::default();
        let q = QualitySettings::default();
        let a = g.generate("futuristic tank", 3, &q, 7).unwrap();
        let b = g.generate("futuristic tank", 3, &q, 7).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.as_raw(), y.as_raw());
        }
        let c = g.generate("antique cannon", 3, &q, 7).unwrap();
        assert_ne!(a[0].as_raw(), c[0].as_raw());
    }

    #[test]
    fn first_token_keying_groups_prompts() {
        let g = MockGenerator {
            key_on_first_token: true,
            ..Default::default()
        };
        let q = QualitySettings::default();
        let a = g.generate("armored tank, desert", 1, &q, 0).unwrap();
        let b = g.generate("armored cannon, antique", 1, &q, 0).unwrap();
        // same leading token: identical pattern parameters
        assert_eq!(a[0].as_raw(), b[0].as_raw());
    }

    #[test]
    fn mock_agent_emits_pool_and_replacements() {
        let mut agent = MockAgent::default();
        let resp = agent.complete("Generate 10 prompts.").unwrap();
        let prompts: Vec<String> = serde_json::from_str(&resp).unwrap();
        assert_eq!(prompts.len(), 10);
        let refine_req = format!(
            "Revise the flagged prompts.\n{}",
            serde_json::json!({"prompts": prompts, "flagged_indices": [1, 3]})
        );
        let resp = agent.complete(&refine_req).unwrap();
        let v: serde_json::Value = serde_json::from_str(&resp).unwrap();
        assert_eq!(v["replacements"].as_array().unwrap().len(), 2);
    }
}
