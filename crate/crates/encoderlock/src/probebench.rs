//! Attacker simulator and scorekeeper.
//!
//! Probes a frozen encoder with configurable downstream heads and data
//! fractions, then computes the evaluation metrics: per-domain relative
//! accuracy drop, the ratio-of-sums aggregate drop across targets, ΔW, the
//! protection performance index (PPI), and the security verdict.

use crate::data::{DatasetHandle, ImageSet};
use crate::error::{Error, Result};
use crate::nn::{accuracy, train_head, ConvEncoder, HeadSpec, HeadTrainConfig};
use crate::scalar::Scalar;
use crate::weightspace::{DeltaW, EncoderState};
use serde::{Deserialize, Serialize};

/// Permitted hidden widths for probing heads.
pub const HIDDEN_DIMS: [usize; 6] = [64, 256, 512, 1024, 2048, 4096];

/// Default attacker data fraction and the sweep grid.
pub const DEFAULT_DATA_FRACTION: f64 = 0.1;
pub const DATA_FRACTION_SWEEP: [f64; 4] = [0.1, 0.25, 0.5, 1.0];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: String,
    pub learning_rate: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            kind: "adam".to_string(),
            learning_rate: 1e-2,
        }
    }
}

/// One attacker head configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadConfig {
    pub depth: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hidden_dim: Option<usize>,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default = "default_fraction")]
    pub data_fraction: f64,
}

fn default_fraction() -> f64 {
    DEFAULT_DATA_FRACTION
}

impl HeadConfig {
    pub fn linear(data_fraction: f64) -> Self {
        HeadConfig {
            depth: 1,
            hidden_dim: None,
            optimizer: OptimizerSpec::default(),
            data_fraction,
        }
    }

    pub fn mlp(depth: usize, hidden_dim: usize, data_fraction: f64) -> Self {
        HeadConfig {
            depth,
            hidden_dim: Some(hidden_dim),
            optimizer: OptimizerSpec::default(),
            data_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.head_spec().validate()?;
        if let Some(h) = self.hidden_dim {
            if !HIDDEN_DIMS.contains(&h) {
                return Err(Error::validation(format!(
                    "hidden_dim {h} not in the supported grid {HIDDEN_DIMS:?}"
                )));
            }
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::validation("data_fraction must be in (0, 1]"));
        }
        if self.optimizer.kind != "adam" {
            return Err(Error::validation(format!(
                "unsupported optimizer `{}` (only `adam`)",
                self.optimizer.kind
            )));
        }
        Ok(())
    }

    pub fn head_spec(&self) -> HeadSpec {
        HeadSpec {
            depth: self.depth,
            hidden_dim: self.hidden_dim,
        }
    }

    pub fn train_config(&self) -> HeadTrainConfig {
        HeadTrainConfig {
            learning_rate: self.optimizer.learning_rate,
            ..HeadTrainConfig::default()
        }
    }

    /// Compact label for reports, e.g. `d2-h256@0.10`.
    pub fn label(&self) -> String {
        match self.hidden_dim {
            Some(h) => format!("d{}-h{}@{:.2}", self.depth, h, self.data_fraction),
            None => format!("d{}@{:.2}", self.depth, self.data_fraction),
        }
    }
}

/// Domain tagging for report rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainRole {
    Authorized,
    Prohibited,
    Admissible,
}

/// Accessibility level of the prohibited domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accessibility {
    Labeled,
    Unlabeled,
    ThemeOnly,
}

impl Accessibility {
    pub fn level(self) -> u8 {
        match self {
            Accessibility::Labeled => 1,
            Accessibility::Unlabeled => 2,
            Accessibility::ThemeOnly => 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainData {
    Dataset(DatasetHandle),
    Theme { theme: String },
}

/// A dataset tagged with its role and accessibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub role: DomainRole,
    pub accessibility: Accessibility,
    pub data: DomainData,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        match (self.accessibility, &self.data) {
            (Accessibility::ThemeOnly, DomainData::Theme { .. }) => Ok(()),
            (Accessibility::ThemeOnly, _) => Err(Error::validation(
                "theme-only accessibility requires a theme, not samples",
            )),
            (_, DomainData::Theme { .. }) => Err(Error::validation(
                "sample-level accessibility requires a dataset",
            )),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match &self.data {
            DomainData::Dataset(h) => h.name.clone(),
            DomainData::Theme { theme } => format!("theme:{theme}"),
        }
    }
}

/// Result of one probe run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub accuracy: f64,
    pub epochs_trained: usize,
    /// Test accuracy after each training epoch.
    pub epoch_trace: Vec<f64>,
    pub train_samples: usize,
}

/// Train an attacker head on a frozen encoder and evaluate on the full
/// test split.
///
/// `head.data_fraction` of the training split is sampled with `seed`. The
/// encoder is checksummed before and after; any mutation is an invariant
/// violation.
pub fn probe<F: Scalar>(
    state: &EncoderState<F, ConvEncoder<F>>,
    train: &ImageSet<F>,
    test: &ImageSet<F>,
    head: &HeadConfig,
    seed: u64,
) -> Result<ProbeOutcome> {
    head.validate()?;
    let checksum_before = state.checksum();

    let sampled = train.sample_fraction(head.data_fraction, seed)?;
    let train_labels = sampled.labels()?.to_vec();
    let test_labels = test.labels()?.to_vec();
    let n_classes = sampled.n_classes.max(test.n_classes);

    let train_emb = state.model().embed(&sampled.images);
    let test_emb = state.model().embed(&test.images);

    let outcome = train_head(
        head.head_spec(),
        (&train_emb, &train_labels),
        (&test_emb, &test_labels),
        n_classes,
        &head.train_config(),
        seed,
    )?;

    if state.checksum() != checksum_before {
        return Err(Error::invariant("encoder parameters changed during probing"));
    }
    Ok(ProbeOutcome {
        accuracy: outcome.best_eval_accuracy,
        epochs_trained: outcome.epochs_trained,
        epoch_trace: outcome.eval_trace,
        train_samples: sampled.len(),
    })
}

// ---------------------------------------------------------------------------
// Metric arithmetic
// ---------------------------------------------------------------------------

/// `(acc_o − acc_m) / acc_o`. Scale-invariant, so callers may pass
/// fractions or percentage points as long as both use the same scale.
pub fn relative_drop(acc_original: f64, acc_modified: f64) -> Result<f64> {
    if acc_original <= 0.0 {
        return Err(Error::numeric(
            "relative drop undefined for zero original accuracy",
        ));
    }
    if acc_modified < 0.0 {
        return Err(Error::validation("accuracy cannot be negative"));
    }
    Ok((acc_original - acc_modified) / acc_original)
}

/// Ratio-of-sums aggregate drop across target domains:
/// `Σ(acc_o − acc_m) / Σ acc_o`.
pub fn aggregate_drop(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::validation("aggregate drop needs at least one pair"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for &(acc_o, acc_m) in pairs {
        if acc_o <= 0.0 {
            return Err(Error::numeric(
                "aggregate drop undefined with a zero original accuracy",
            ));
        }
        if acc_m < 0.0 {
            return Err(Error::validation("accuracy cannot be negative"));
        }
        num += acc_o - acc_m;
        den += acc_o;
    }
    Ok(num / den)
}

/// Protection performance index:
/// `(acc_o^T / acc_m^T) / (acc_o^B / acc_m^B)`.
pub fn ppi(acc_o_target: f64, acc_m_target: f64, acc_o_base: f64, acc_m_base: f64) -> Result<f64> {
    for (name, v) in [
        ("acc_o_target", acc_o_target),
        ("acc_m_target", acc_m_target),
        ("acc_o_base", acc_o_base),
        ("acc_m_base", acc_m_base),
    ] {
        if v <= 0.0 {
            return Err(Error::numeric(format!(
                "PPI undefined: {name} is not positive; report a floor-clamped variant separately if needed"
            )));
        }
    }
    Ok((acc_o_target / acc_m_target) / (acc_o_base / acc_m_base))
}

/// Security verdict over a locked encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Secure,
    NotSecure,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerdictReport {
    pub verdict: Verdict,
    /// Accuracy of the train-from-scratch alternative (the threshold).
    pub acc_threshold: f64,
    pub epsilon: f64,
    pub acc_probe_target: f64,
    pub drop_source: f64,
    /// Violated clauses when NOT_SECURE.
    pub violated: Vec<String>,
}

/// SECURE iff probing the locked encoder on the prohibited domain does no
/// better than training from scratch, and the authorized-domain relative
/// drop stays within epsilon.
pub fn security_verdict(
    acc_probe_target: f64,
    acc_train_from_scratch: f64,
    drop_source: f64,
    epsilon: f64,
) -> VerdictReport {
    let mut violated = Vec::new();
    if acc_probe_target > acc_train_from_scratch {
        violated.push("attacker-advantage: probing beats training from scratch".to_string());
    }
    if drop_source > epsilon {
        violated.push("utility: authorized-domain drop exceeds epsilon".to_string());
    }
    VerdictReport {
        verdict: if violated.is_empty() {
            Verdict::Secure
        } else {
            Verdict::NotSecure
        },
        acc_threshold: acc_train_from_scratch,
        epsilon,
        acc_probe_target,
        drop_source,
        violated,
    }
}

/// Cosine similarity between the mean feature vectors of two datasets.
pub fn domain_similarity<F: Scalar>(
    dataset_a: &ImageSet<F>,
    dataset_b: &ImageSet<F>,
    feature_encoder: &ConvEncoder<F>,
) -> Result<f64> {
    if dataset_a.is_empty() || dataset_b.is_empty() {
        return Err(Error::validation("domain similarity needs nonempty datasets"));
    }
    let ea = feature_encoder.embed(&dataset_a.images);
    let eb = feature_encoder.embed(&dataset_b.images);
    let ma = ea.sum_axis(ndarray::Axis(0)) / F::from_f64(dataset_a.len() as f64);
    let mb = eb.sum_axis(ndarray::Axis(0)) / F::from_f64(dataset_b.len() as f64);
    Ok(cosine(&ma.to_vec(), &mb.to_vec()))
}

pub(crate) fn cosine<F: Scalar>(a: &[F], b: &[F]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x.as_f64() * y.as_f64();
        na += x.as_f64() * x.as_f64();
        nb += y.as_f64() * y.as_f64();
    }
    let denom = (na.sqrt() * nb.sqrt()).max(1e-30);
    dot / denom
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

/// One row of the probe report (one head config on one domain).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub head: HeadConfig,
    pub domain: String,
    pub domain_role: DomainRole,
    pub acc_original: f64,
    pub acc_locked: f64,
    pub relative_drop: f64,
    pub epochs_original: usize,
    pub epochs_locked: usize,
    pub trace_original: Vec<f64>,
    pub trace_locked: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpiRecord {
    pub target_domain: String,
    pub base_domain: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FractionRecord {
    pub fraction: f64,
    pub acc_original: f64,
    pub acc_locked: f64,
}

/// Full attacker-side report for one locked encoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub records: Vec<ProbeRecord>,
    /// Relative drop on the authorized domain (default head).
    pub drop_source: f64,
    /// Ratio-of-sums aggregate drop over prohibited domains.
    pub aggregate_drop_target: f64,
    pub delta_w: DeltaW,
    pub ppi: Vec<PpiRecord>,
    pub verdict: VerdictReport,
    pub data_fraction_sweep: Vec<FractionRecord>,
}

impl ProbeReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "domain",
            "role",
            "head",
            "data_fraction",
            "acc_original",
            "acc_locked",
            "relative_drop",
            "epochs_original",
            "epochs_locked",
        ])
        .map_err(|e| Error::validation(format!("csv: {e}")))?;
        for r in &self.records {
            w.write_record([
                r.domain.clone(),
                format!("{:?}", r.domain_role).to_lowercase(),
                r.head.label(),
                format!("{}", r.head.data_fraction),
                format!("{:.6}", r.acc_original),
                format!("{:.6}", r.acc_locked),
                format!("{:.6}", r.relative_drop),
                format!("{}", r.epochs_original),
                format!("{}", r.epochs_locked),
            ])
            .map_err(|e| Error::validation(format!("csv: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::validation(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::validation(format!("csv: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_drop_matches_printed_row() {
        // 99.53 -> 99.32 prints as a 0.21% drop
        let d = relative_drop(99.53, 99.32).unwrap();
        assert!((d * 100.0 - 0.21).abs() < 0.005, "{}", d * 100.0);
        assert_eq!(relative_drop(0.8, 0.8).unwrap(), 0.0);
        assert_eq!(relative_drop(0.8, 0.0).unwrap(), 1.0);
        assert!(relative_drop(0.0, 0.5).is_err());
    }

    #[test]
    fn aggregate_drop_is_ratio_of_sums() {
        let pairs = [(96.35, 8.47), (43.74, 18.98), (68.24, 18.05), (69.65, 13.67)];
        let d = aggregate_drop(&pairs).unwrap() * 100.0;
        assert!((d - 78.71).abs() <= 0.05, "{d}");
        // singleton equals relative_drop
        let single = [(43.74, 18.98)];
        assert!(
            (aggregate_drop(&single).unwrap() - relative_drop(43.74, 18.98).unwrap()).abs() < 1e-15
        );
        // no change
        let same = [(50.0, 50.0), (20.0, 20.0)];
        assert_eq!(aggregate_drop(&same).unwrap(), 0.0);
    }

    #[test]
    fn ppi_fixture_and_identities() {
        let v = ppi(94.7, 17.8, 94.2, 93.5).unwrap();
        assert!((v - 5.281).abs() <= 0.01, "{v}");
        assert_eq!(ppi(0.5, 0.5, 0.9, 0.9).unwrap(), 1.0);
        // halving target acc_m doubles PPI
        let a = ppi(0.9, 0.4, 0.9, 0.9).unwrap();
        let b = ppi(0.9, 0.2, 0.9, 0.9).unwrap();
        assert!((b / a - 2.0).abs() < 1e-12);
        assert!(ppi(0.9, 0.0, 0.9, 0.9).is_err());
    }

    #[test]
    fn verdict_clauses() {
        let r = security_verdict(0.15, 0.60, 0.003, 0.02);
        assert_eq!(r.verdict, Verdict::Secure);
        assert!(r.violated.is_empty());

        let r = security_verdict(0.80, 0.60, 0.003, 0.02);
        assert_eq!(r.verdict, Verdict::NotSecure);
        assert!(r.violated[0].contains("attacker-advantage"));

        let r = security_verdict(0.10, 0.60, 0.05, 0.02);
        assert_eq!(r.verdict, Verdict::NotSecure);
        assert!(r.violated[0].contains("utility"));
    }

    #[test]
    fn head_config_validation() {
        assert!(HeadConfig::linear(0.1).validate().is_ok());
        assert!(HeadConfig::mlp(2, 256, 0.5).validate().is_ok());
        assert!(HeadConfig::mlp(2, 100, 0.5).validate().is_err()); // off-grid width
        assert!(HeadConfig::mlp(2, 256, 0.0).validate().is_err());
        let mut c = HeadConfig::linear(0.1);
        c.optimizer.kind = "sgd".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn domain_spec_accessibility_rules() {
        let theme = DomainSpec {
            role: DomainRole::Prohibited,
            accessibility: Accessibility::ThemeOnly,
            data: DomainData::Theme {
                theme: "military vehicles".into(),
            },
        };
        assert!(theme.validate().is_ok());
        let bad = DomainSpec {
            accessibility: Accessibility::Labeled,
            ..theme.clone()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn cosine_identities() {
        assert!((cosine(&[1.0f64, 0.0], &[1.0, 0.0]) - 1.0).abs() < 1e-12);
        assert!(cosine(&[1.0f64, 0.0], &[0.0, 1.0]).abs() < 1e-12);
    }
}
