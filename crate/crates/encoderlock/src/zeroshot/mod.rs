//! Zero-shot lock-data pipeline: theme → prompts → synthetic images →
//! similarity-matrix-driven prompt refinement.
//!
//! An agent turns the prohibited theme into candidate prompts, a
//! text-to-image generator renders per-prompt image groups, and the
//! per-prompt feature centroids (through the to-be-protected encoder's
//! pre-lock snapshot) yield a similarity matrix. Prompt pairs above the
//! threshold are sent back to the agent for revision; the loop stops when
//! all pairs are dissimilar, the maximum similarity stops decreasing, or
//! the round budget runs out. The final round's images become the
//! unsupervised lock dataset.

mod clients;

pub use clients::{
    AgentClient, FailingGenerator, HttpAgentClient, HttpGeneratorClient, ImageGeneratorClient,
    MockAgent, MockGenerator, ENV_AGENT_KEY, ENV_AGENT_URL, ENV_GEN_KEY, ENV_GEN_URL,
    MOCK_INITIAL_PROMPTS, MOCK_REFINED_PROMPTS,
};

use crate::error::{Error, Result};
use crate::losses::l2_normalize_rows;
use crate::nn::ConvEncoder;
use crate::scalar::Scalar;
use crate::seeds;
use image::RgbImage;
use ndarray::{Array2, Array4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

/// Whitespace/case normalization used for the duplicate-free invariant.
pub fn normalize_prompt(p: &str) -> String {
    p.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// An ordered, duplicate-free (after normalization) prompt list for a
/// theme, stamped with its refinement round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptSet {
    pub theme: String,
    pub prompts: Vec<String>,
    pub round: u32,
}

impl PromptSet {
    pub fn new(theme: &str, prompts: Vec<String>, round: u32) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::validation("prompt set must be nonempty"));
        }
        let mut seen = BTreeSet::new();
        for p in &prompts {
            if !seen.insert(normalize_prompt(p)) {
                return Err(Error::validation(format!("duplicate prompt after normalization: `{p}`")));
            }
        }
        Ok(PromptSet {
            theme: theme.to_string(),
            prompts,
            round,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// How per-prompt similarities are aggregated from image embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Cosine of per-prompt centroids of L2-normalized embeddings.
    CentroidCosine,
    /// Mean pairwise cross-group cosine.
    MeanPairwise,
}

impl Default for Aggregation {
    fn default() -> Self {
        Aggregation::CentroidCosine
    }
}

/// Symmetric prompt-by-prompt similarity matrix with unit diagonal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub values: Vec<Vec<f64>>,
    pub aggregation: Aggregation,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.values.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.values.len();
        for (i, row) in self.values.iter().enumerate() {
            if row.len() != n {
                return Err(Error::shape("similarity matrix not square"));
            }
            if (row[i] - 1.0).abs() > 1e-6 {
                return Err(Error::invariant(format!("similarity diagonal [{i}][{i}] != 1")));
            }
            for (j, &v) in row.iter().enumerate() {
                if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&v) {
                    return Err(Error::invariant(format!("similarity [{i}][{j}] = {v} outside [-1, 1]")));
                }
                if (v - self.values[j][i]).abs() > 1e-9 {
                    return Err(Error::invariant("similarity matrix not symmetric"));
                }
            }
        }
        Ok(())
    }

    /// Largest off-diagonal entry (None for a single prompt).
    pub fn max_off_diagonal(&self) -> Option<(f64, (usize, usize))> {
        let n = self.size();
        let mut best: Option<(f64, (usize, usize))> = None;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = self.values[i][j];
                if best.map(|(b, _)| v > b).unwrap_or(true) {
                    best = Some((v, (i, j)));
                }
            }
        }
        best
    }

    /// Off-diagonal pairs with similarity above the threshold.
    pub fn pairs_above(&self, threshold: f64) -> Vec<(usize, usize)> {
        let n = self.size();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if self.values[i][j] > threshold {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Generator quality knobs recorded in the manifest.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct QualitySettings {
    pub inference_iterations: usize,
    /// Additive Gaussian pixel noise (0–255 scale) applied post-generation.
    pub noise_sigma: f64,
}

impl Default for QualitySettings {
    fn default() -> Self {
        QualitySettings {
            inference_iterations: 50,
            noise_sigma: 0.0,
        }
    }
}

/// Per-prompt groups of generated images for one round.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub theme: String,
    pub round: u32,
    pub prompts: Vec<String>,
    pub groups: Vec<Vec<RgbImage>>,
    pub quality: QualitySettings,
    /// Prompts whose generation failed, with the error text.
    pub failures: Vec<(usize, String)>,
}

impl SyntheticDataset {
    pub fn total_images(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }

    /// Every image as a `[n, 3, h, w]` tensor in `[0, 1]`, resized to
    /// `(h, w)`, groups concatenated in prompt order.
    pub fn to_tensor<F: Scalar>(&self, h: usize, w: usize) -> Result<Array4<F>> {
        let n = self.total_images();
        if n == 0 {
            return Err(Error::validation("synthetic dataset has no images"));
        }
        let mut out = Array4::zeros((n, 3, h, w));
        let mut i = 0;
        for group in &self.groups {
            for img in group {
                write_image_tensor(img, out.index_axis_mut(Axis(0), i), h, w);
                i += 1;
            }
        }
        Ok(out)
    }

    /// Group index boundaries, aligned with `prompts`.
    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.len()).collect()
    }
}

fn write_image_tensor<F: Scalar>(
    img: &RgbImage,
    mut out: ndarray::ArrayViewMut3<F>,
    h: usize,
    w: usize,
) {
    let resized = if (img.width() as usize, img.height() as usize) == (w, h) {
        img.clone()
    } else {
        image::imageops::resize(img, w as u32, h as u32, image::imageops::FilterType::Triangle)
    };
    for y in 0..h {
        for x in 0..w {
            let px = resized.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[[c, y, x]] = F::from_f64(px[c] as f64 / 255.0);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

const PROMPT_REQUEST_RETRIES: usize = 4;

/// Ask the agent for `k` prompts describing the theme.
///
/// Duplicates (after normalization) are dropped and the agent re-queried
/// until `k` distinct prompts accumulate, within a bounded number of
/// attempts.
pub fn generate_prompts(agent: &mut dyn AgentClient, theme: &str, k: usize) -> Result<PromptSet> {
    if k < 2 {
        return Err(Error::validation("need at least 2 prompts"));
    }
    let mut collected: Vec<String> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for attempt in 0..PROMPT_REQUEST_RETRIES {
        let instruction = format!(
            "Generate {k} short text-to-image prompts covering the theme \"{theme}\". \
             Respond with a JSON array of strings.{}",
            if attempt > 0 { " Avoid prompts already given." } else { "" }
        );
        let raw = agent.complete(&instruction)?;
        let prompts: Vec<String> = serde_json::from_str(&raw).map_err(|e| Error::Parse {
            detail: format!("expected a JSON array of prompt strings: {e}"),
            raw: raw.clone(),
        })?;
        for p in prompts {
            let norm = normalize_prompt(&p);
            if !norm.is_empty() && seen.insert(norm) {
                collected.push(p);
                if collected.len() == k {
                    return PromptSet::new(theme, collected, 0);
                }
            }
        }
    }
    Err(Error::Agent(format!(
        "agent produced only {} distinct prompts after {PROMPT_REQUEST_RETRIES} attempts",
        collected.len()
    )))
}

/// Render `per_prompt` images per prompt, applying post-generation noise.
///
/// Per-prompt generator failures leave a partial dataset with a failure
/// ledger; zero successful prompts is a hard error.
pub fn synthesize(
    generator: &dyn ImageGeneratorClient,
    prompts: &PromptSet,
    per_prompt: usize,
    quality: &QualitySettings,
    seed: u64,
) -> Result<SyntheticDataset> {
    if per_prompt == 0 {
        return Err(Error::validation("per_prompt must be at least 1"));
    }
    let results: Vec<std::result::Result<Vec<RgbImage>, String>> = prompts
        .prompts
        .par_iter()
        .enumerate()
        .map(|(pi, prompt)| {
            generator
                .generate(prompt, per_prompt, quality, seeds::subseed(seed, "synthesize", pi as u64))
                .map_err(|e| e.to_string())
        })
        .collect();

    let mut groups = Vec::with_capacity(prompts.len());
    let mut failures = Vec::new();
    for (pi, res) in results.into_iter().enumerate() {
        match res {
            Ok(mut imgs) => {
                if quality.noise_sigma > 0.0 {
                    for (ii, img) in imgs.iter_mut().enumerate() {
                        let mut rng = seeds::stream(seed, "synthesize/noise", ((pi as u64) << 32) | ii as u64);
                        add_pixel_noise(img, quality.noise_sigma, &mut rng);
                    }
                }
                groups.push(imgs);
            }
            Err(e) => {
                failures.push((pi, e));
                groups.push(Vec::new());
            }
        }
    }
    if failures.len() == prompts.len() {
        return Err(Error::Generator("every prompt failed to generate".to_string()));
    }
    Ok(SyntheticDataset {
        theme: prompts.theme.clone(),
        round: prompts.round,
        prompts: prompts.prompts.clone(),
        groups,
        quality: *quality,
        failures,
    })
}

fn add_pixel_noise(img: &mut RgbImage, sigma: f64, rng: &mut rand_chacha::ChaCha8Rng) {
    for px in img.pixels_mut() {
        for c in 0..3 {
            let n: f64 = f64::standard_normal(rng) * sigma;
            px[c] = (px[c] as f64 + n).clamp(0.0, 255.0) as u8;
        }
    }
}

/// Per-prompt centroid similarity through a feature encoder.
pub fn prompt_similarity<F: Scalar>(
    dataset: &SyntheticDataset,
    feature_encoder: &ConvEncoder<F>,
    aggregation: Aggregation,
) -> Result<SimilarityMatrix> {
    let (_, h, w) = feature_encoder.arch.in_shape;
    let mut group_embeddings: Vec<Array2<F>> = Vec::with_capacity(dataset.groups.len());
    for (pi, group) in dataset.groups.iter().enumerate() {
        if group.is_empty() {
            return Err(Error::validation(format!(
                "prompt group {pi} is empty; cannot compute similarity"
            )));
        }
        let mut x = Array4::zeros((group.len(), 3, h, w));
        for (ii, img) in group.iter().enumerate() {
            write_image_tensor(img, x.index_axis_mut(Axis(0), ii), h, w);
        }
        let mut emb = feature_encoder.embed(&x);
        l2_normalize_rows(&mut emb);
        group_embeddings.push(emb);
    }
    let n = group_embeddings.len();
    let mut values = vec![vec![0.0; n]; n];
    match aggregation {
        Aggregation::CentroidCosine => {
            let centroids: Vec<Vec<F>> = group_embeddings
                .iter()
                .map(|e| (e.sum_axis(Axis(0)) / F::from_f64(e.shape()[0] as f64)).to_vec())
                .collect();
            for i in 0..n {
                for j in 0..n {
                    values[i][j] = if i == j {
                        1.0
                    } else {
                        crate::probebench::cosine(&centroids[i], &centroids[j])
                    };
                }
            }
        }
        Aggregation::MeanPairwise => {
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        values[i][j] = 1.0;
                        continue;
                    }
                    let a = &group_embeddings[i];
                    let b = &group_embeddings[j];
                    // embeddings are unit rows: mean pairwise cosine is a
                    // dot-product average
                    let mut acc = 0.0;
                    for ra in a.outer_iter() {
                        for rb in b.outer_iter() {
                            acc += ra.dot(&rb).as_f64();
                        }
                    }
                    values[i][j] = acc / (a.shape()[0] * b.shape()[0]) as f64;
                }
            }
        }
    }
    // symmetrize against float asymmetry from the cosine evaluation order
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (values[i][j] + values[j][i]);
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    let m = SimilarityMatrix {
        values,
        aggregation,
    };
    m.validate()?;
    Ok(m)
}

/// Tracks consecutive unchanged revisions so stubborn pairs get frozen.
#[derive(Debug, Clone, Default)]
pub struct RefineTracker {
    unchanged_streak: BTreeMap<(usize, usize), u32>,
    frozen: BTreeSet<(usize, usize)>,
}

impl RefineTracker {
    pub fn frozen_pairs(&self) -> Vec<(usize, usize)> {
        self.frozen.iter().copied().collect()
    }
}

/// Outcome of one refinement call.
#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub prompts: PromptSet,
    /// Pairs above threshold that were sent for revision.
    pub flagged: Vec<(usize, usize)>,
    /// Prompt indices actually changed.
    pub changed: Vec<usize>,
    /// Pairs frozen after the agent refused to change them twice running.
    pub frozen: Vec<(usize, usize)>,
}

#[derive(Deserialize)]
struct ReplacementItem {
    index: usize,
    prompt: String,
}

#[derive(Deserialize)]
struct ReplacementsPayload {
    replacements: Vec<ReplacementItem>,
}

/// Send over-threshold prompt pairs to the agent for revision.
///
/// Returns the revised set with the round incremented (or the input
/// unchanged when nothing is flagged or `max_rounds` is spent). The caller
/// owns the synthesize → similarity → refine loop.
pub fn refine(
    agent: &mut dyn AgentClient,
    prompts: &PromptSet,
    sim: &SimilarityMatrix,
    threshold: f64,
    max_rounds: u32,
    tracker: &mut RefineTracker,
) -> Result<RefineOutcome> {
    if sim.size() != prompts.len() {
        return Err(Error::shape("similarity matrix not indexed by these prompts"));
    }
    if prompts.round >= max_rounds {
        return Ok(RefineOutcome {
            prompts: prompts.clone(),
            flagged: Vec::new(),
            changed: Vec::new(),
            frozen: tracker.frozen_pairs(),
        });
    }
    let flagged: Vec<(usize, usize)> = sim
        .pairs_above(threshold)
        .into_iter()
        .filter(|p| !tracker.frozen.contains(p))
        .collect();
    if flagged.is_empty() {
        return Ok(RefineOutcome {
            prompts: prompts.clone(),
            flagged,
            changed: Vec::new(),
            frozen: tracker.frozen_pairs(),
        });
    }
    let mut flagged_indices: BTreeSet<usize> = BTreeSet::new();
    for &(i, j) in &flagged {
        flagged_indices.insert(i);
        flagged_indices.insert(j);
    }
    let payload = serde_json::json!({
        "prompts": prompts.prompts,
        "flagged_indices": flagged_indices.iter().copied().collect::<Vec<_>>(),
    });
    let instruction = format!(
        "Revise the flagged prompts for theme \"{}\" so they describe more distinct aspects; \
         keep others unchanged. Respond with JSON {{\"replacements\": [{{\"index\": n, \"prompt\": \"...\"}}]}}.\n{payload}",
        prompts.theme
    );
    let raw = agent.complete(&instruction)?;
    let parsed: ReplacementsPayload = serde_json::from_str(&raw).map_err(|e| Error::Parse {
        detail: format!("expected replacements payload: {e}"),
        raw: raw.clone(),
    })?;

    let mut new_prompts = prompts.prompts.clone();
    let mut changed = Vec::new();
    let existing: BTreeSet<String> = prompts.prompts.iter().map(|p| normalize_prompt(p)).collect();
    for item in parsed.replacements {
        if item.index >= new_prompts.len() {
            return Err(Error::Parse {
                detail: format!("replacement index {} out of range", item.index),
                raw,
            });
        }
        let norm_new = normalize_prompt(&item.prompt);
        let norm_old = normalize_prompt(&new_prompts[item.index]);
        if norm_new == norm_old {
            continue; // unchanged; handled via streak accounting below
        }
        // refuse collisions with other existing prompts
        if existing.contains(&norm_new) && norm_new != norm_old {
            continue;
        }
        new_prompts[item.index] = item.prompt;
        changed.push(item.index);
    }

    for &(i, j) in &flagged {
        let touched = changed.contains(&i) || changed.contains(&j);
        if touched {
            tracker.unchanged_streak.remove(&(i, j));
        } else {
            let streak = tracker.unchanged_streak.entry((i, j)).or_insert(0);
            *streak += 1;
            if *streak >= 2 {
                tracker.frozen.insert((i, j));
            }
        }
    }

    let set = PromptSet::new(&prompts.theme, new_prompts, prompts.round + 1)?;
    Ok(RefineOutcome {
        prompts: set,
        flagged,
        changed,
        frozen: tracker.frozen_pairs(),
    })
}

// ---------------------------------------------------------------------------
// Pipeline + manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZeroShotConfig {
    pub theme: String,
    pub prompt_count: usize,
    pub per_prompt: usize,
    pub quality: QualitySettings,
    pub similarity_threshold: f64,
    pub max_rounds: u32,
    pub aggregation: Aggregation,
    pub seed: u64,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        ZeroShotConfig {
            theme: String::new(),
            prompt_count: 10,
            per_prompt: 100,
            quality: QualitySettings::default(),
            similarity_threshold: 0.5,
            max_rounds: 5,
            aggregation: Aggregation::CentroidCosine,
            seed: 0,
        }
    }
}

/// Why the refinement loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitReason {
    /// All off-diagonal similarities at or below the threshold.
    Converged,
    /// Maximum off-diagonal similarity failed to decrease between rounds.
    StoppedDecreasing,
    /// Round budget exhausted.
    MaxRounds,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundLedgerEntry {
    pub round: u32,
    pub prompts: Vec<String>,
    pub max_off_diagonal: f64,
    pub flagged: Vec<(usize, usize)>,
    pub changed: Vec<usize>,
    pub frozen: Vec<(usize, usize)>,
    pub generation_failures: Vec<(usize, String)>,
}

#[derive(Debug)]
pub struct ZeroShotOutcome {
    /// Final round's dataset (the lock data).
    pub dataset: SyntheticDataset,
    pub ledger: Vec<RoundLedgerEntry>,
    pub exit: ExitReason,
    pub manifest_path: PathBuf,
}

/// Run the full theme → refined synthetic dataset pipeline, writing images
/// and the manifest under `out_dir`.
pub fn run_pipeline<F: Scalar>(
    agent: &mut dyn AgentClient,
    generator: &dyn ImageGeneratorClient,
    feature_encoder: &ConvEncoder<F>,
    cfg: &ZeroShotConfig,
    out_dir: &Path,
) -> Result<ZeroShotOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let mut prompts = generate_prompts(agent, &cfg.theme, cfg.prompt_count)?;
    let mut tracker = RefineTracker::default();
    let mut ledger: Vec<RoundLedgerEntry> = Vec::new();
    let mut manifest_rounds: Vec<ManifestRound> = Vec::new();
    let mut prev_max: Option<f64> = None;
    let exit;

    let dataset = loop {
        let round = prompts.round;
        let dataset = synthesize(
            generator,
            &prompts,
            cfg.per_prompt,
            &cfg.quality,
            seeds::subseed(cfg.seed, "zeroshot/round", round as u64),
        )?;
        // partial generation: similarity over the surviving groups only
        let live_prompts: Vec<usize> = dataset
            .groups
            .iter()
            .enumerate()
            .filter(|(_, g)| !g.is_empty())
            .map(|(i, _)| i)
            .collect();
        let sim = prompt_similarity(&pruned(&dataset, &live_prompts), feature_encoder, cfg.aggregation)?;
        let max_od = sim.max_off_diagonal().map(|(v, _)| v).unwrap_or(0.0);

        manifest_rounds.push(write_round_artifacts(out_dir, &dataset, Some(&sim))?);

        if max_od <= cfg.similarity_threshold {
            ledger.push(ledger_entry(&dataset, max_od, &[], &[], &tracker));
            exit = ExitReason::Converged;
            break dataset;
        }
        if let Some(prev) = prev_max {
            if max_od >= prev {
                ledger.push(ledger_entry(&dataset, max_od, &[], &[], &tracker));
                exit = ExitReason::StoppedDecreasing;
                break dataset;
            }
        }
        if round >= cfg.max_rounds {
            ledger.push(ledger_entry(&dataset, max_od, &[], &[], &tracker));
            exit = ExitReason::MaxRounds;
            break dataset;
        }
        prev_max = Some(max_od);

        // map flagged pairs on the pruned matrix back to prompt indices
        let outcome = {
            let mut mapped_sim = sim.clone();
            if live_prompts.len() != dataset.groups.len() {
                mapped_sim = expand_similarity(&sim, &live_prompts, dataset.groups.len());
            }
            refine(agent, &prompts, &mapped_sim, cfg.similarity_threshold, cfg.max_rounds, &mut tracker)?
        };
        ledger.push(ledger_entry(&dataset, max_od, &outcome.flagged, &outcome.changed, &tracker));
        if outcome.changed.is_empty() {
            exit = ExitReason::StoppedDecreasing;
            break dataset;
        }
        prompts = outcome.prompts;
    };

    let manifest = Manifest {
        theme: cfg.theme.clone(),
        rounds: manifest_rounds,
    };
    let manifest_path = out_dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;

    Ok(ZeroShotOutcome {
        dataset,
        ledger,
        exit,
        manifest_path,
    })
}

fn pruned(dataset: &SyntheticDataset, live: &[usize]) -> SyntheticDataset {
    if live.len() == dataset.groups.len() {
        return dataset.clone();
    }
    SyntheticDataset {
        theme: dataset.theme.clone(),
        round: dataset.round,
        prompts: live.iter().map(|&i| dataset.prompts[i].clone()).collect(),
        groups: live.iter().map(|&i| dataset.groups[i].clone()).collect(),
        quality: dataset.quality,
        failures: Vec::new(),
    }
}

fn expand_similarity(sim: &SimilarityMatrix, live: &[usize], full: usize) -> SimilarityMatrix {
    let mut values = vec![vec![0.0; full]; full];
    for (i, v) in values.iter_mut().enumerate() {
        v[i] = 1.0;
    }
    for (a, &ia) in live.iter().enumerate() {
        for (b, &ib) in live.iter().enumerate() {
            values[ia][ib] = sim.values[a][b];
        }
    }
    SimilarityMatrix {
        values,
        aggregation: sim.aggregation,
    }
}

fn ledger_entry(
    dataset: &SyntheticDataset,
    max_od: f64,
    flagged: &[(usize, usize)],
    changed: &[usize],
    tracker: &RefineTracker,
) -> RoundLedgerEntry {
    RoundLedgerEntry {
        round: dataset.round,
        prompts: dataset.prompts.clone(),
        max_off_diagonal: max_od,
        flagged: flagged.to_vec(),
        changed: changed.to_vec(),
        frozen: tracker.frozen_pairs(),
        generation_failures: dataset.failures.clone(),
    }
}

// --- manifest schema -------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub theme: String,
    pub rounds: Vec<ManifestRound>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRound {
    pub round: u32,
    pub prompts: Vec<String>,
    pub similarity_matrix: Option<Vec<Vec<f64>>>,
    pub images: Vec<ManifestImage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestImage {
    pub path: String,
    pub prompt_index: usize,
    pub checksum: String,
    pub quality: QualitySettings,
}

fn write_round_artifacts(
    out_dir: &Path,
    dataset: &SyntheticDataset,
    sim: Option<&SimilarityMatrix>,
) -> Result<ManifestRound> {
    let round_dir = out_dir.join(format!("round_{:03}", dataset.round));
    std::fs::create_dir_all(&round_dir)?;
    let mut images = Vec::new();
    for (pi, group) in dataset.groups.iter().enumerate() {
        for (ii, img) in group.iter().enumerate() {
            let rel = format!("round_{:03}/prompt_{:02}_img_{:03}.png", dataset.round, pi, ii);
            let path = out_dir.join(&rel);
            img.save(&path)?;
            let bytes = std::fs::read(&path)?;
            let checksum = format!("{:x}", Sha256::digest(&bytes));
            images.push(ManifestImage {
                path: rel,
                prompt_index: pi,
                checksum,
                quality: dataset.quality,
            });
        }
    }
    Ok(ManifestRound {
        round: dataset.round,
        prompts: dataset.prompts.clone(),
        similarity_matrix: sim.map(|s| s.values.clone()),
        images,
    })
}

/// Validate a manifest: every image present, checksums matching, counts
/// consistent with prompts.
pub fn validate_manifest(manifest_path: &Path) -> Result<Manifest> {
    let raw = std::fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&raw)?;
    let base = manifest_path
        .parent()
        .ok_or_else(|| Error::validation("manifest has no parent directory"))?;
    for round in &manifest.rounds {
        for img in &round.images {
            if img.prompt_index >= round.prompts.len() {
                return Err(Error::invariant(format!(
                    "image {} references prompt {} of {}",
                    img.path,
                    img.prompt_index,
                    round.prompts.len()
                )));
            }
            let bytes = std::fs::read(base.join(&img.path))?;
            let sum = format!("{:x}", Sha256::digest(&bytes));
            if sum != img.checksum {
                return Err(Error::invariant(format!("checksum mismatch for {}", img.path)));
            }
        }
    }
    Ok(manifest)
}

/// Load the final round's images from a manifest as a `[n, 3, h, w]`
/// tensor.
pub fn load_manifest_images<F: Scalar>(manifest_path: &Path) -> Result<Array4<F>> {
    let manifest = validate_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap();
    let last = manifest
        .rounds
        .last()
        .ok_or_else(|| Error::validation("manifest has no rounds"))?;
    if last.images.is_empty() {
        return Err(Error::validation("final round has no images"));
    }
    let first = image::open(base.join(&last.images[0].path))?.to_rgb8();
    let (w, h) = (first.width() as usize, first.height() as usize);
    let mut out = Array4::zeros((last.images.len(), 3, h, w));
    for (i, mi) in last.images.iter().enumerate() {
        let img = image::open(base.join(&mi.path))?.to_rgb8();
        write_image_tensor(&img, out.index_axis_mut(Axis(0), i), h, w);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::EncoderArch;

    fn tiny_encoder() -> ConvEncoder<f32> {
        let mut rng = seeds::stream(5, "test/zs-enc", 0);
        ConvEncoder::init(
            EncoderArch {
                in_shape: (3, 16, 16),
                conv_channels: vec![4, 8],
                embed_dim: 32,
            },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn generate_prompts_passes_canned_list_through() {
        let mut agent = MockAgent::default();
        let set = generate_prompts(&mut agent, "military vehicles", 10).unwrap();
        assert_eq!(set.prompts, MOCK_INITIAL_PROMPTS.to_vec());
        assert_eq!(set.round, 0);
    }

    #[test]
    fn duplicate_prompts_are_rerequested() {
        // pool with duplicates: dedup leaves 3 distinct; k=3 succeeds
        let mut agent = MockAgent::with_pools(
            vec!["Tank".into(), "tank".into(), "Cannon".into(), "Drone".into()],
            vec![],
        );
        let set = generate_prompts(&mut agent, "t", 3).unwrap();
        assert_eq!(set.prompts.len(), 3);
        // but k=4 cannot be satisfied -> hard error after bounded retries
        let mut agent = MockAgent::with_pools(
            vec!["Tank".into(), "tank".into(), " TANK ".into()],
            vec![],
        );
        assert!(generate_prompts(&mut agent, "t", 2).is_err());
    }

    #[test]
    fn synthesize_counts_and_noise_identity() {
        let set = PromptSet::new("t", vec!["a".into(), "b".into()], 0).unwrap();
        let gen = MockGenerator::default();
        let q = QualitySettings {
            inference_iterations: 50,
            noise_sigma: 0.0,
        };
        let d = synthesize(&gen, &set, 5, &q, 1).unwrap();
        assert_eq!(d.total_images(), 10);
        // sigma = 0 leaves pixels bit-identical to generator output
        let raw = gen.generate("a", 5, &q, seeds::subseed(1, "synthesize", 0)).unwrap();
        assert_eq!(d.groups[0][0].as_raw(), raw[0].as_raw());
        // sigma > 0 changes them
        let qn = QualitySettings {
            inference_iterations: 50,
            noise_sigma: 8.0,
        };
        let dn = synthesize(&gen, &set, 5, &qn, 1).unwrap();
        assert_ne!(dn.groups[0][0].as_raw(), raw[0].as_raw());
    }

    #[test]
    fn partial_failures_keep_ledger() {
        let set = PromptSet::new("t", vec!["ok one".into(), "bad one".into()], 0).unwrap();
        let gen = FailingGenerator {
            inner: MockGenerator::default(),
            fail_substring: "bad".into(),
        };
        let d = synthesize(&gen, &set, 3, &QualitySettings::default(), 1).unwrap();
        assert_eq!(d.failures.len(), 1);
        assert_eq!(d.failures[0].0, 1);
        assert_eq!(d.groups[0].len(), 3);
        assert!(d.groups[1].is_empty());

        let all_bad = PromptSet::new("t", vec!["bad a".into(), "bad b".into()], 0).unwrap();
        assert!(synthesize(&gen, &all_bad, 3, &QualitySettings::default(), 1).is_err());
    }

    #[test]
    fn identical_groups_have_unit_similarity() {
        let gen = MockGenerator::default();
        let q = QualitySettings::default();
        let imgs = gen.generate("same prompt", 4, &q, 3).unwrap();
        let d = SyntheticDataset {
            theme: "t".into(),
            round: 0,
            prompts: vec!["p0".into(), "p1".into()],
            groups: vec![imgs.clone(), imgs],
            quality: q,
            failures: vec![],
        };
        let sim = prompt_similarity(&d, &tiny_encoder(), Aggregation::CentroidCosine).unwrap();
        assert!((sim.values[0][1] - 1.0).abs() < 1e-6);
        sim.validate().unwrap();
    }

    #[test]
    fn refine_replaces_flagged_and_freezes_stubborn_pairs() {
        let prompts = PromptSet::new(
            "t",
            vec!["alpha tank".into(), "alpha cannon".into(), "gamma truck".into()],
            0,
        )
        .unwrap();
        let sim = SimilarityMatrix {
            values: vec![
                vec![1.0, 0.9, 0.1],
                vec![0.9, 1.0, 0.2],
                vec![0.1, 0.2, 1.0],
            ],
            aggregation: Aggregation::CentroidCosine,
        };
        let mut tracker = RefineTracker::default();
        let mut agent = MockAgent::with_pools(vec![], vec!["delta jeep".into(), "epsilon boat".into()]);
        let out = refine(&mut agent, &prompts, &sim, 0.5, 5, &mut tracker).unwrap();
        assert_eq!(out.flagged, vec![(0, 1)]);
        assert!(!out.changed.is_empty());
        assert_eq!(out.prompts.round, 1);

        // a stubborn agent leaves the pair unchanged twice -> frozen
        let mut tracker = RefineTracker::default();
        let mut stubborn = MockAgent::default();
        stubborn.refuse_indices = vec![0, 1];
        let r1 = refine(&mut stubborn, &prompts, &sim, 0.5, 5, &mut tracker).unwrap();
        assert!(r1.changed.is_empty());
        assert!(r1.frozen.is_empty());
        let r2 = refine(&mut stubborn, &r1.prompts, &sim, 0.5, 5, &mut tracker).unwrap();
        assert_eq!(r2.frozen, vec![(0, 1)]);
        // frozen pairs are not re-flagged
        let r3 = refine(&mut stubborn, &r2.prompts, &sim, 0.5, 5, &mut tracker).unwrap();
        assert!(r3.flagged.is_empty());
    }

    #[test]
    fn refine_respects_round_budget_and_converged_matrix() {
        let prompts = PromptSet::new("t", vec!["a".into(), "b".into()], 0).unwrap();
        let low_sim = SimilarityMatrix {
            values: vec![vec![1.0, 0.2], vec![0.2, 1.0]],
            aggregation: Aggregation::CentroidCosine,
        };
        let mut tracker = RefineTracker::default();
        let mut agent = MockAgent::default();
        // already converged: unchanged
        let out = refine(&mut agent, &prompts, &low_sim, 0.5, 5, &mut tracker).unwrap();
        assert_eq!(out.prompts.prompts, prompts.prompts);
        assert_eq!(out.prompts.round, 0);
        // max_rounds = 0: input returned unchanged even above threshold
        let high_sim = SimilarityMatrix {
            values: vec![vec![1.0, 0.9], vec![0.9, 1.0]],
            aggregation: Aggregation::CentroidCosine,
        };
        let out = refine(&mut agent, &prompts, &high_sim, 0.5, 0, &mut tracker).unwrap();
        assert_eq!(out.prompts.prompts, prompts.prompts);
    }
}
