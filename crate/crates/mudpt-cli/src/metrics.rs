//! Accuracy and aggregate metrics, plus the report structure every protocol
//! fills in. All percentages are reported to two decimals.

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModeName, Protocol};
use mudpt::{Error, Result};

/// Bumped whenever the report schema changes shape.
pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Round to two decimals, half away from zero — the precision every
/// percentage in a report carries.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Percentage of positions where prediction equals label, to two decimals.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "accuracy needs matched lengths, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidInput("accuracy needs at least one prediction".into()));
    }
    let matches = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(round2(100.0 * matches as f64 / predictions.len() as f64))
}

/// H = 2·base·new/(base + new), to two decimals. The balanced summary of
/// base-class and new-class accuracy: it punishes trading one for the other.
pub fn harmonic_mean(base: f64, new: f64) -> Result<f64> {
    if !(base > 0.0) || !(new > 0.0) {
        return Err(Error::InvalidInput(format!(
            "harmonic mean needs positive inputs, got {base} and {new}"
        )));
    }
    Ok(round2(2.0 * base * new / (base + new)))
}

/// Plain arithmetic mean, unrounded; round at the reporting boundary.
pub fn arithmetic_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("mean needs at least one value".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Accuracies on the three sampling splits of the home corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitAccuracies {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

/// Accuracy on one named evaluation set (a transfer world or a shift kind).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetAccuracy {
    pub name: String,
    pub accuracy: f64,
}

/// Image-access counters gathered while tuning ran. `hygiene_ok` asserts the
/// base-to-new contract: not a single held-out-class image was read before
/// evaluation started.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccessAudit {
    pub tuning_image_reads: usize,
    pub held_out_class_reads_during_tuning: usize,
    pub hygiene_ok: bool,
}

/// Everything measured for one mode under the configured protocol. Fields
/// that a protocol does not produce stay `None` and are omitted from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeReport {
    pub mode: ModeName,
    /// Relative path of the tuning loss trace; absent for zero_shot, which
    /// never takes a tuning step.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_trace: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub splits: Option<SplitAccuracies>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub base_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub new_accuracy: Option<f64>,
    /// Both aggregates of (base, new) are reported; the harmonic mean is the
    /// headline one, the arithmetic mean is kept alongside for comparison.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub harmonic_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub arith_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub datasets: Option<Vec<DatasetAccuracy>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub audit: Option<AccessAudit>,
}

/// Summary of the shared pretraining phase, when one ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub final_tau: f64,
    pub trace: String,
}

/// The full machine-readable result of one `run` invocation.
///
/// Serialization is canonical: struct fields serialize in declaration order,
/// floats carry their shortest round-trip form, and `wall_time_seconds` — the
/// only nondeterministic field — sits last so determinism checks can strip it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub version: u32,
    pub seed: u64,
    pub protocol: Protocol,
    pub config: ExperimentConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pretrain: Option<PretrainSummary>,
    pub modes: Vec<ModeReport>,
    pub wall_time_seconds: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_boundary_values() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.00);
        assert_eq!(accuracy(&[1, 2, 3], &[4, 5, 6]).unwrap(), 0.00);
        assert_eq!(accuracy(&[1, 0], &[1, 1]).unwrap(), 50.00);
        // 1/3 rounds to two decimals.
        assert_eq!(accuracy(&[7, 0, 0], &[7, 1, 1]).unwrap(), 33.33);
    }

    #[test]
    fn accuracy_rejects_malformed_input() {
        assert!(matches!(accuracy(&[1], &[1, 2]), Err(Error::InvalidInput(_))));
        assert!(matches!(accuracy(&[], &[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn harmonic_mean_reproduces_published_base_to_new_rows() {
        // (base, new) pairs with the aggregate each row prints.
        let rows = [
            (69.34, 74.22, 71.70),
            (82.69, 63.22, 71.66),
            (80.47, 71.69, 75.83),
            (82.71, 74.5, 78.39),
        ];
        for (base, new, expected) in rows {
            let h = harmonic_mean(base, new).unwrap();
            assert!(
                (h - expected).abs() <= 0.01,
                "H({base}, {new}) = {h}, expected {expected} ± 0.01"
            );
        }
    }

    #[test]
    fn harmonic_mean_identities() {
        // Equal arguments are a fixed point.
        for x in [1.0, 37.5, 81.38, 100.0] {
            assert_eq!(harmonic_mean(x, x).unwrap(), round2(x));
        }
        // Symmetric, and never above the arithmetic mean.
        let h = harmonic_mean(30.0, 60.0).unwrap();
        assert_eq!(h, harmonic_mean(60.0, 30.0).unwrap());
        assert!(h <= 45.0);
        assert_eq!(h, 40.00);
    }

    #[test]
    fn harmonic_mean_rejects_nonpositive_input() {
        assert!(matches!(harmonic_mean(0.0, 50.0), Err(Error::InvalidInput(_))));
        assert!(matches!(harmonic_mean(50.0, -1.0), Err(Error::InvalidInput(_))));
        assert!(matches!(harmonic_mean(f64::NAN, 50.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn averaging_reproduces_the_published_eleven_dataset_row() {
        let row = [
            72.7, 96.72, 94.19, 80.43, 96.47, 87.38, 43.13, 76.18, 72.37, 92.17, 83.53,
        ];
        let mean = arithmetic_mean(&row).unwrap();
        assert!((mean - 81.38).abs() <= 0.01, "mean {mean} should match 81.38 ± 0.01");
    }

    #[test]
    fn arithmetic_mean_rejects_empty_input() {
        assert!(matches!(arithmetic_mean(&[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn round2_is_idempotent_on_seeded_values() {
        let mut rng = mudpt::rng::rng_for(11, "metrics-round2");
        use rand::Rng;
        for _ in 0..200 {
            let x: f64 = rng.gen_range(-1000.0..1000.0);
            let r = round2(x);
            assert_eq!(round2(r), r);
            assert!((r - x).abs() <= 0.005 + 1e-12);
        }
    }

    #[test]
    fn report_round_trips_and_omits_absent_fields() {
        let config = ExperimentConfig::desk_default();
        let report = MetricsReport {
            version: REPORT_FORMAT_VERSION,
            seed: 0,
            protocol: Protocol::BaseToNew,
            config,
            pretrain: None,
            modes: vec![ModeReport {
                mode: ModeName::ZeroShot,
                loss_trace: None,
                splits: None,
                base_accuracy: Some(50.0),
                new_accuracy: Some(25.0),
                harmonic_mean: Some(33.33),
                arith_mean: Some(37.50),
                datasets: None,
                audit: None,
            }],
            wall_time_seconds: 1.25,
        };
        let json = serde_json::to_string_pretty(&report).unwrap();
        assert!(!json.contains("loss_trace"), "absent fields must be omitted");
        assert!(json.contains("harmonic_mean"));
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
