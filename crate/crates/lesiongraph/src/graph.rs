//! Per-patient fully connected weighted lesion graphs.
//!
//! Edge weights follow a product of two exponential kernels over the
//! (unsquared) L2 distances between lesion centroids and between lesion
//! feature vectors, each normalized by `gamma * sigma^2` where the sigmas
//! are population-level standard deviations of intra-patient pairwise
//! distances on the standardized training cohort.

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, PatientRecord};
use crate::matrix::Matrix;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("degenerate population: no patient has two or more lesions")]
    DegeneratePopulation,
    #[error("invalid kernel statistics: {0}")]
    InvalidStats(String),
    #[error("non-finite edge weight for patient {patient_id} (pair {i}, {j})")]
    NonFinite {
        patient_id: String,
        i: usize,
        j: usize,
    },
}

/// Kernel normalization constants, fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationStats {
    /// Population std of intra-patient pairwise centroid distances.
    pub sigma1: f64,
    /// Population std of intra-patient pairwise feature distances.
    pub sigma2: f64,
    pub gamma: f64,
}

/// One patient's graph: node feature matrix and symmetric edge weights
/// with a unit diagonal (self-loops).
#[derive(Debug, Clone)]
pub struct LesionGraph {
    pub patient_id: String,
    /// L x D_features.
    pub features: Matrix,
    /// L x L, symmetric, entries in (0, 1], diagonal exactly 1.
    pub weights: Matrix,
}

fn centroid_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn feature_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Compute sigma1/sigma2 over all intra-patient unordered lesion pairs of
/// the (standardized) training cohort. A degenerate std of 0 is replaced
/// by 1 with a warning so tiny cohorts still run.
pub fn population_stats(training: &Cohort, gamma: f64) -> Result<PopulationStats, GraphError> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(GraphError::InvalidStats(format!("gamma = {gamma}")));
    }
    let mut centroid_dists = Vec::new();
    let mut feature_dists = Vec::new();
    for p in &training.patients {
        for i in 0..p.lesions.len() {
            for j in (i + 1)..p.lesions.len() {
                centroid_dists
                    .push(centroid_distance(&p.lesions[i].centroid, &p.lesions[j].centroid));
                feature_dists
                    .push(feature_distance(&p.lesions[i].features, &p.lesions[j].features));
            }
        }
    }
    if centroid_dists.is_empty() {
        return Err(GraphError::DegeneratePopulation);
    }
    let mut sigma1 = population_std(&centroid_dists);
    let mut sigma2 = population_std(&feature_dists);
    if sigma1 == 0.0 {
        warn!("population sigma1 is 0 (all centroid pair distances equal); substituting 1");
        sigma1 = 1.0;
    }
    if sigma2 == 0.0 {
        warn!("population sigma2 is 0 (all feature pair distances equal); substituting 1");
        sigma2 = 1.0;
    }
    Ok(PopulationStats {
        sigma1,
        sigma2,
        gamma,
    })
}

/// Build the fully connected weighted graph of one (standardized,
/// centroid-scaled) patient. Each unordered pair is computed once, so the
/// matrix is exactly symmetric; the diagonal is exactly 1.
pub fn build_graph(patient: &PatientRecord, stats: &PopulationStats) -> Result<LesionGraph, GraphError> {
    for (name, v) in [
        ("sigma1", stats.sigma1),
        ("sigma2", stats.sigma2),
        ("gamma", stats.gamma),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(GraphError::InvalidStats(format!("{name} = {v}")));
        }
    }
    let l = patient.lesions.len();
    let d = patient.lesions.first().map_or(0, |les| les.features.len());
    let mut features = Matrix::zeros(l, d);
    for (i, lesion) in patient.lesions.iter().enumerate() {
        features.data_mut()[i * d..(i + 1) * d].copy_from_slice(&lesion.features);
    }
    let denom1 = stats.gamma * stats.sigma1 * stats.sigma1;
    let denom2 = stats.gamma * stats.sigma2 * stats.sigma2;
    let mut weights = Matrix::zeros(l, l);
    for i in 0..l {
        weights.set(i, i, 1.0);
        for j in (i + 1)..l {
            let dp = centroid_distance(&patient.lesions[i].centroid, &patient.lesions[j].centroid);
            let dz = feature_distance(&patient.lesions[i].features, &patient.lesions[j].features);
            let w = (-dp / denom1).exp() * (-dz / denom2).exp();
            if !w.is_finite() {
                return Err(GraphError::NonFinite {
                    patient_id: patient.patient_id.clone(),
                    i,
                    j,
                });
            }
            weights.set(i, j, w);
            weights.set(j, i, w);
        }
    }
    Ok(LesionGraph {
        patient_id: patient.patient_id.clone(),
        features,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Lesion;
    use rand::Rng;

    fn patient(id: &str, lesions: Vec<([f64; 3], Vec<f64>)>) -> PatientRecord {
        PatientRecord {
            patient_id: id.into(),
            label: 0,
            clinical: vec![],
            lesions: lesions
                .into_iter()
                .enumerate()
                .map(|(i, (centroid, features))| Lesion {
                    lesion_id: format!("{i}"),
                    centroid,
                    features,
                })
                .collect(),
        }
    }

    fn cohort(patients: Vec<PatientRecord>) -> Cohort {
        let d_features = patients[0].lesions[0].features.len();
        Cohort {
            patients,
            d_clinical: 0,
            d_features,
        }
    }

    #[test]
    fn sigma_matches_hand_computed_distances() {
        // Centroid pair distances {1, 3}: mean 2, population variance 1.
        let train = cohort(vec![
            patient(
                "a",
                vec![([0.0, 0.0, 0.0], vec![5.0]), ([1.0, 0.0, 0.0], vec![5.0])],
            ),
            patient(
                "b",
                vec![([0.0, 0.0, 0.0], vec![5.0]), ([0.0, 3.0, 0.0], vec![5.0])],
            ),
        ]);
        let stats = population_stats(&train, 1.0).unwrap();
        assert_eq!(stats.sigma1, 1.0);
        // All feature distances are 0 -> degenerate sigma2 replaced by 1.
        assert_eq!(stats.sigma2, 1.0);
    }

    #[test]
    fn single_lesion_patients_contribute_no_pairs() {
        let mut patients = vec![
            patient(
                "a",
                vec![([0.0, 0.0, 0.0], vec![1.0]), ([2.0, 0.0, 0.0], vec![3.0])],
            ),
            patient(
                "b",
                vec![([0.0, 0.0, 0.0], vec![0.0]), ([0.0, 5.0, 0.0], vec![1.5])],
            ),
        ];
        let before = population_stats(&cohort(patients.clone()), 1.0).unwrap();
        patients.push(patient("solo", vec![([9.0, 9.0, 9.0], vec![42.0])]));
        let after = population_stats(&cohort(patients), 1.0).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn all_single_lesion_training_is_degenerate() {
        let train = cohort(vec![
            patient("a", vec![([0.0; 3], vec![1.0])]),
            patient("b", vec![([1.0; 3], vec![2.0])]),
        ]);
        assert!(matches!(
            population_stats(&train, 1.0),
            Err(GraphError::DegeneratePopulation)
        ));
    }

    #[test]
    fn rejects_non_positive_gamma() {
        let train = cohort(vec![patient(
            "a",
            vec![([0.0; 3], vec![1.0]), ([1.0, 0.0, 0.0], vec![2.0])],
        )]);
        assert!(population_stats(&train, 0.0).is_err());
        assert!(population_stats(&train, -1.0).is_err());
    }

    #[test]
    fn self_loops_are_exactly_one() {
        let p = patient(
            "a",
            vec![
                ([0.3, -0.1, 0.8], vec![1.0, 2.0]),
                ([-0.5, 0.2, 0.0], vec![0.5, -1.0]),
            ],
        );
        let stats = PopulationStats {
            sigma1: 0.7,
            sigma2: 1.3,
            gamma: 1.0,
        };
        let g = build_graph(&p, &stats).unwrap();
        assert_eq!(g.weights.get(0, 0), 1.0);
        assert_eq!(g.weights.get(1, 1), 1.0);
    }

    #[test]
    fn kernel_matches_hand_evaluation() {
        // Centroid distance = gamma * sigma1^2, identical features:
        // w = exp(-1) * exp(0).
        let p = patient(
            "a",
            vec![([0.0, 0.0, 0.0], vec![4.0]), ([2.0, 0.0, 0.0], vec![4.0])],
        );
        let stats = PopulationStats {
            sigma1: 1.0,
            sigma2: 1.0,
            gamma: 2.0,
        };
        let g = build_graph(&p, &stats).unwrap();
        assert!((g.weights.get(0, 1) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((g.weights.get(0, 1) - 0.367_879).abs() < 1e-6);
    }

    #[test]
    fn identical_lesions_get_unit_weight() {
        let p = patient(
            "a",
            vec![([1.0, 2.0, 3.0], vec![0.5]), ([1.0, 2.0, 3.0], vec![0.5])],
        );
        let stats = PopulationStats {
            sigma1: 1.0,
            sigma2: 1.0,
            gamma: 1.0,
        };
        let g = build_graph(&p, &stats).unwrap();
        assert_eq!(g.weights.get(0, 1), 1.0);
    }

    fn random_patient(rng: &mut impl Rng, l: usize, d: usize) -> PatientRecord {
        patient(
            "r",
            (0..l)
                .map(|_| {
                    (
                        [
                            rng.gen_range(-2.0..2.0),
                            rng.gen_range(-2.0..2.0),
                            rng.gen_range(-2.0..2.0),
                        ],
                        (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn weights_are_symmetric_and_in_unit_interval() {
        let mut rng = crate::rng::stream(5, &[crate::rng::Tag::Label("graph-sym")]);
        for _ in 0..30 {
            let l = rng.gen_range(1..=8);
            let p = random_patient(&mut rng, l, 4);
            let stats = PopulationStats {
                sigma1: rng.gen_range(0.2..2.0),
                sigma2: rng.gen_range(0.2..2.0),
                gamma: rng.gen_range(0.1..10.0),
            };
            let g = build_graph(&p, &stats).unwrap();
            for i in 0..l {
                for j in 0..l {
                    let w = g.weights.get(i, j);
                    assert!(w > 0.0 && w <= 1.0, "w[{i}][{j}] = {w}");
                    assert_eq!(w, g.weights.get(j, i), "asymmetry at ({i}, {j})");
                }
            }
        }
    }

    #[test]
    fn larger_gamma_strictly_increases_distinct_pair_weights() {
        let mut rng = crate::rng::stream(5, &[crate::rng::Tag::Label("graph-gamma")]);
        for _ in 0..20 {
            let l = rng.gen_range(2..=6);
            let p = random_patient(&mut rng, l, 3);
            let base = PopulationStats {
                sigma1: 1.0,
                sigma2: 1.0,
                gamma: rng.gen_range(0.1..5.0),
            };
            let doubled = PopulationStats {
                gamma: base.gamma * 2.0,
                ..base.clone()
            };
            let g1 = build_graph(&p, &base).unwrap();
            let g2 = build_graph(&p, &doubled).unwrap();
            for i in 0..l {
                for j in (i + 1)..l {
                    assert!(
                        g2.weights.get(i, j) > g1.weights.get(i, j),
                        "gamma doubling did not increase w[{i}][{j}]"
                    );
                }
            }
        }
    }

    #[test]
    fn huge_gamma_saturates_weights_at_one() {
        let mut rng = crate::rng::stream(5, &[crate::rng::Tag::Label("graph-sat")]);
        let p = random_patient(&mut rng, 6, 4);
        let stats = PopulationStats {
            sigma1: 1.0,
            sigma2: 1.0,
            gamma: 1e9,
        };
        let g = build_graph(&p, &stats).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert!((g.weights.get(i, j) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn build_graph_rejects_invalid_stats() {
        let p = patient("a", vec![([0.0; 3], vec![1.0])]);
        let bad = PopulationStats {
            sigma1: f64::NAN,
            sigma2: 1.0,
            gamma: 1.0,
        };
        assert!(build_graph(&p, &bad).is_err());
    }

    #[test]
    fn feature_matrix_rows_follow_lesion_order() {
        let p = patient(
            "a",
            vec![([0.0; 3], vec![1.0, 2.0]), ([1.0, 0.0, 0.0], vec![3.0, 4.0])],
        );
        let stats = PopulationStats {
            sigma1: 1.0,
            sigma2: 1.0,
            gamma: 1.0,
        };
        let g = build_graph(&p, &stats).unwrap();
        assert_eq!(g.features.row(0), &[1.0, 2.0]);
        assert_eq!(g.features.row(1), &[3.0, 4.0]);
    }
}
