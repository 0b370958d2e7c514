use super::*;
use crate::protocol::roc_auc;

fn labels(cohort: &Cohort) -> Vec<u8> {
    cohort.patients.iter().map(|p| p.label).collect()
}

fn oracle_auc(config: &SynthConfig, cohort: &Cohort) -> f64 {
    roc_auc(&oracle_risk(config, cohort), &labels(cohort)).unwrap()
}

#[test]
fn identical_configs_give_bit_identical_cohorts() {
    let config = SynthConfig::default();
    let a = generate(&config).unwrap();
    let b = generate(&config).unwrap();
    assert_eq!(a, b);
    for (pa, pb) in a.patients.iter().zip(&b.patients) {
        for (la, lb) in pa.lesions.iter().zip(&pb.lesions) {
            for (x, y) in la.features.iter().zip(&lb.features) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}

#[test]
fn different_seeds_give_different_cohorts() {
    let a = generate(&SynthConfig::default()).unwrap();
    let b = generate(&SynthConfig {
        seed: 43,
        ..SynthConfig::default()
    })
    .unwrap();
    assert_ne!(a, b);
}

#[test]
fn default_cohort_matches_the_configured_shape() {
    let config = SynthConfig::default();
    let cohort = generate(&config).unwrap();
    assert_eq!(cohort.patients.len(), 583);
    assert_eq!(cohort.d_clinical, 8);
    assert_eq!(cohort.d_features, 40);
    for p in &cohort.patients {
        assert_eq!(p.clinical.len(), 8);
        assert!((1..=20).contains(&p.n_lesions()));
        for l in &p.lesions {
            assert_eq!(l.features.len(), 40);
            for axis in 0..3 {
                assert!((0.0..400.0).contains(&l.centroid[axis]));
            }
        }
    }
    let ids: std::collections::BTreeSet<_> =
        cohort.patients.iter().map(|p| &p.patient_id).collect();
    assert_eq!(ids.len(), 583, "patient ids are unique");
}

#[test]
fn positive_count_hits_the_target() {
    let config = SynthConfig::default();
    let cohort = generate(&config).unwrap();
    let positives = cohort.patients.iter().filter(|p| p.label == 1).count();
    let target = (0.194_f64 * 583.0).round() as usize;
    assert_eq!(target, 113);
    let tolerance = (0.02 * target as f64).max(1.0);
    assert!(
        (positives as f64 - target as f64).abs() <= tolerance,
        "positives {positives} off target {target}"
    );
}

#[test]
fn lesion_count_range_is_fully_attained() {
    let cohort = generate(&SynthConfig::default()).unwrap();
    let counts: Vec<usize> = cohort.patients.iter().map(|p| p.n_lesions()).collect();
    assert_eq!(counts.iter().min(), Some(&1));
    assert_eq!(counts.iter().max(), Some(&20));
}

#[test]
fn infinite_noise_washes_out_the_signal() {
    let config = SynthConfig {
        noise: 1e6,
        ..SynthConfig::default()
    };
    let cohort = generate(&config).unwrap();
    let auc = oracle_auc(&config, &cohort);
    assert!(
        (auc - 0.5).abs() <= 0.05,
        "risk score should be uninformative, AUC {auc}"
    );
}

#[test]
fn zero_noise_makes_the_risk_a_perfect_ranker() {
    let config = SynthConfig {
        noise: 0.0,
        ..SynthConfig::default()
    };
    let cohort = generate(&config).unwrap();
    assert_eq!(oracle_auc(&config, &cohort), 1.0);
}

#[test]
fn without_interaction_the_clinical_oracle_is_nearly_sufficient() {
    let config = SynthConfig {
        interaction_strength: 0.0,
        ..SynthConfig::default()
    };
    let cohort = generate(&config).unwrap();
    let full = oracle_auc(&config, &cohort);
    let clinical = roc_auc(&oracle_clinical(&config, &cohort), &labels(&cohort)).unwrap();
    assert!(
        (full - clinical).abs() <= 0.02,
        "full {full} vs clinical-only {clinical}"
    );
}

#[test]
fn gate_makes_both_modalities_necessary() {
    // With the interaction on (defaults), the clinical-only oracle should
    // trail the full-signal oracle by a clear margin.
    let config = SynthConfig::default();
    let cohort = generate(&config).unwrap();
    let full = oracle_auc(&config, &cohort);
    let clinical = roc_auc(&oracle_clinical(&config, &cohort), &labels(&cohort)).unwrap();
    assert!(
        full - clinical > 0.05,
        "full {full} vs clinical-only {clinical}"
    );
}

#[test]
fn config_validation_rejects_bad_values() {
    let base = SynthConfig::default();
    for config in [
        SynthConfig { n_patients: 1, ..base.clone() },
        SynthConfig { positive_ratio: 0.0, ..base.clone() },
        SynthConfig { positive_ratio: 1.0, ..base.clone() },
        SynthConfig { lesions_min: 0, ..base.clone() },
        SynthConfig { lesions_min: 5, lesions_max: 4, ..base.clone() },
        SynthConfig { d_features: 0, ..base.clone() },
        SynthConfig { d_clinical: 0, ..base.clone() },
        SynthConfig { noise: -1.0, ..base.clone() },
        SynthConfig { noise: f64::NAN, ..base.clone() },
        SynthConfig { interaction_strength: f64::INFINITY, ..base.clone() },
    ] {
        assert!(matches!(generate(&config), Err(SynthError::BadConfig(_))));
    }
}

#[test]
fn config_round_trips_through_json() {
    let config = SynthConfig {
        n_patients: 50,
        seed: 7,
        ..SynthConfig::default()
    };
    let text = serde_json::to_string_pretty(&config).unwrap();
    let back: SynthConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(config, back);
}

#[test]
fn partial_json_config_fills_in_defaults() {
    let config: SynthConfig = serde_json::from_str(r#"{"n_patients": 40, "seed": 9}"#).unwrap();
    assert_eq!(config.n_patients, 40);
    assert_eq!(config.seed, 9);
    assert_eq!(config.d_features, 40);
    let err = serde_json::from_str::<SynthConfig>(r#"{"n_patientz": 40}"#);
    assert!(err.is_err(), "unknown fields are rejected");
}

#[test]
fn generated_cohort_survives_a_csv_round_trip() {
    let config = SynthConfig {
        n_patients: 30,
        ..SynthConfig::default()
    };
    let cohort = generate(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let clin = dir.path().join("clinical.csv");
    let les = dir.path().join("lesions.csv");
    crate::cohort::write_cohort(&cohort, &clin, &les, "seed=42").unwrap();
    let back = crate::cohort::load_cohort(&clin, &les).unwrap();
    assert_eq!(cohort, back);
}
