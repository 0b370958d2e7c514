//! Deterministic synthetic cohort generator with a planted cross-modal
//! signal.
//!
//! Each patient gets a Gaussian clinical vector and a set of lesions whose
//! features scatter around a patient-level latent. The label risk combines
//! three terms:
//!
//! * a clinical score — the mean of the clinical profile;
//! * an imaging score — the max over lesions of a fixed feature projection,
//!   standardized against its lesion-count-conditional distribution so a
//!   patient's lesion count alone carries no label information;
//! * a cross-modal interaction — a soft selection over the clinical values
//!   whose direction and sharpness are set by the imaging score (high
//!   imaging burden pulls risk toward the patient's worst clinical values,
//!   low burden toward the best), centered by the population-average
//!   response at the same imaging score.
//!
//! The centering makes the interaction vanish in expectation conditioned on
//! either modality alone: an imaging-only model sees nothing of it beyond
//! the small direct imaging term, and a clinical-only model sees only the
//! profile-dependent average response. Recovering the full signal requires
//! coupling the imaging score to the clinical profile exactly the way the
//! selection does. Labels come from a logistic model over the summed risk;
//! the decision threshold is calibrated on the generated cohort so the
//! positive count lands on the configured ratio.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, Lesion, PatientRecord};
use crate::rng::{stream, Tag};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    BadConfig(String),
    #[error("threshold calibration failed: {0}")]
    Calibration(String),
}

/// Generator settings. The defaults mirror the real cohort's scale: 583
/// patients at a 19.4% positive rate, 1–20 lesions each, 40 imaging
/// features, and 8 clinical covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub positive_ratio: f64,
    pub lesions_min: usize,
    pub lesions_max: usize,
    pub d_features: usize,
    pub d_clinical: usize,
    /// Weight of the clinical score (profile mean) in the label risk.
    pub clinical_strength: f64,
    /// Weight of the standardized imaging score in the label risk.
    pub imaging_strength: f64,
    /// Weight of the cross-modal term: a soft selection over the clinical
    /// values tempered by the imaging score.
    pub interaction_strength: f64,
    /// Scale of the logistic noise; 0 makes labels a hard threshold on the
    /// risk, large values decouple labels from the risk entirely.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 583,
            positive_ratio: 0.194,
            lesions_min: 1,
            lesions_max: 20,
            d_features: 40,
            d_clinical: 8,
            clinical_strength: 0.12,
            imaging_strength: 0.08,
            interaction_strength: 2.2,
            noise: 0.55,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::BadConfig(msg));
        if self.n_patients < 2 {
            return bad(format!("need at least 2 patients, got {}", self.n_patients));
        }
        if !(self.positive_ratio > 0.0 && self.positive_ratio < 1.0) {
            return bad(format!(
                "positive_ratio must lie in (0, 1), got {}",
                self.positive_ratio
            ));
        }
        if self.lesions_min < 1 {
            return bad("lesions_min must be at least 1".into());
        }
        if self.lesions_min > self.lesions_max {
            return bad(format!(
                "lesion range is empty: {}..={}",
                self.lesions_min, self.lesions_max
            ));
        }
        if self.d_features == 0 || self.d_clinical == 0 {
            return bad("feature and clinical dimensions must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        for (name, v) in [
            ("clinical_strength", self.clinical_strength),
            ("imaging_strength", self.imaging_strength),
            ("interaction_strength", self.interaction_strength),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite, got {v}"));
            }
        }
        Ok(())
    }
}

/// Standard deviation of the per-lesion scatter around the patient latent.
const LESION_JITTER: f64 = 0.5;

/// Coupling between the imaging score and the temperature of the clinical
/// soft selection in the interaction term.
const SELECTION_TEMPERATURE: f64 = 2.0;

fn unit_gaussian_vec(rng: &mut ChaCha12Rng, len: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // A zero draw has probability zero; fall back to a basis vector so
        // the scores stay well defined.
        let mut e = vec![0.0; len];
        e[0] = 1.0;
        return e;
    }
    v.into_iter().map(|x| x / norm).collect()
}

/// The fixed projection vectors that define the planted clinical and imaging
/// scores. The clinical weights are uniform (the score is the profile mean,
/// up to scale); the imaging weights are a seeded random unit vector, so
/// oracles can recompute them without the cohort.
pub fn signal_weights(config: &SynthConfig) -> (Vec<f64>, Vec<f64>) {
    let w_clinical = vec![1.0 / (config.d_clinical as f64).sqrt(); config.d_clinical];
    let mut rng = stream(config.seed, &[Tag::Label("synth"), Tag::Label("w-imaging")]);
    let w_imaging = unit_gaussian_vec(&mut rng, config.d_features);
    (w_clinical, w_imaging)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean and variance of the maximum of `n` iid standard normals, by
/// trapezoid integration of the max density n·φ(x)·Φ(x)^(n−1) on [−9, 9].
fn max_normal_moments(n: usize) -> (f64, f64) {
    const LO: f64 = -9.0;
    const HI: f64 = 9.0;
    const STEPS: usize = 18_000;
    let h = (HI - LO) / STEPS as f64;
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let density = |pdf: f64, cdf: f64| n as f64 * pdf * cdf.min(1.0).powi(n as i32 - 1);
    let mut cdf = 0.0_f64;
    let mut prev_x = LO;
    let mut prev_pdf = phi(LO);
    let mut prev_d = density(prev_pdf, cdf);
    let (mut mean, mut raw2) = (0.0, 0.0);
    for i in 1..=STEPS {
        let x = LO + h * i as f64;
        let pdf = phi(x);
        cdf += 0.5 * h * (prev_pdf + pdf);
        let d = density(pdf, cdf);
        mean += 0.5 * h * (prev_x * prev_d + x * d);
        raw2 += 0.5 * h * (prev_x * prev_x * prev_d + x * x * d);
        prev_x = x;
        prev_pdf = pdf;
        prev_d = d;
    }
    (mean, raw2 - mean * mean)
}

/// Softmax-weighted mean of `values` at temperature signal `q`: q → +∞
/// selects the maximum value, q → −∞ the minimum, q = 0 the plain mean.
fn soft_select(q: f64, values: &[f64]) -> f64 {
    let top = values.iter().map(|&v| q * v).fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for &v in values {
        let w = (q * v - top).exp();
        num += v * w;
        den += w;
    }
    num / den
}

/// Population-average selection response E[soft_select(q, c)] over clinical
/// profiles c ~ N(0, I_d), tabulated on a q-grid by a fixed-seed Monte Carlo
/// average and interpolated linearly. Subtracting this curve from the
/// selection term centers the interaction: conditioned on any imaging score,
/// the interaction's expectation over clinical profiles is zero, so the
/// imaging score alone carries none of it.
struct MeanSelectionCurve {
    lo: f64,
    step: f64,
    values: Vec<f64>,
}

impl MeanSelectionCurve {
    fn new(d: usize) -> Self {
        const LO: f64 = -16.0;
        const HI: f64 = 16.0;
        const POINTS: usize = 321;
        const DRAWS: usize = 4000;
        // The curve is a fixed property of the profile dimension, not of any
        // one cohort, so it uses its own constant stream.
        let mut rng = stream(0x5EEDC4, &[Tag::Label("synth"), Tag::Label("mean-selection")]);
        let draws: Vec<Vec<f64>> = (0..DRAWS)
            .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let step = (HI - LO) / (POINTS - 1) as f64;
        let values = (0..POINTS)
            .map(|i| {
                let q = LO + step * i as f64;
                draws.iter().map(|c| soft_select(q, c)).sum::<f64>() / DRAWS as f64
            })
            .collect();
        MeanSelectionCurve { lo: LO, step, values }
    }

    fn at(&self, q: f64) -> f64 {
        let pos = (q - self.lo) / self.step;
        if pos <= 0.0 {
            return self.values[0];
        }
        let last = self.values.len() - 1;
        if pos >= last as f64 {
            return self.values[last];
        }
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }
}

/// Standardized imaging score per patient: the max over lesions of the
/// planted feature projection, centered and scaled by its lesion-count-
/// conditional moments under the generator's own lesion model (latent ~
/// N(0,1) plus jitter), so lesion count alone is uninformative about the
/// label.
fn standardized_imaging_scores(config: &SynthConfig, cohort: &Cohort) -> Vec<f64> {
    let (_, w_i) = signal_weights(config);
    let max_lesions = cohort.patients.iter().map(|p| p.n_lesions()).max().unwrap_or(1);
    let moments: Vec<(f64, f64)> = (1..=max_lesions).map(max_normal_moments).collect();
    cohort
        .patients
        .iter()
        .map(|p| {
            let raw_max = p
                .lesions
                .iter()
                .map(|l| dot(&l.features, &w_i))
                .fold(f64::NEG_INFINITY, f64::max);
            let (m, v) = moments[p.n_lesions() - 1];
            (raw_max - LESION_JITTER * m) / (1.0 + LESION_JITTER * LESION_JITTER * v).sqrt()
        })
        .collect()
}

/// Per-patient risk under the generator's own signal model (the quantity
/// whose logistic transform produces labels). Useful as a Bayes-score
/// reference when judging learned models.
pub fn oracle_risk(config: &SynthConfig, cohort: &Cohort) -> Vec<f64> {
    let (w_c, _) = signal_weights(config);
    let imaging = standardized_imaging_scores(config, cohort);
    let mean_curve = MeanSelectionCurve::new(config.d_clinical);
    cohort
        .patients
        .iter()
        .zip(imaging)
        .map(|(p, imaging_score)| {
            let clinical_score = dot(&p.clinical, &w_c);
            let q = SELECTION_TEMPERATURE * imaging_score;
            let interaction = soft_select(q, &p.clinical) - mean_curve.at(q);
            config.clinical_strength * clinical_score
                + config.imaging_strength * imaging_score
                + config.interaction_strength * interaction
        })
        .collect()
}

/// Clinical-only projection of the planted signal (ignores every lesion).
pub fn oracle_clinical(config: &SynthConfig, cohort: &Cohort) -> Vec<f64> {
    let (w_c, _) = signal_weights(config);
    cohort
        .patients
        .iter()
        .map(|p| config.clinical_strength * dot(&p.clinical, &w_c))
        .collect()
}

/// Imaging-only projection of the planted signal: the standardized imaging
/// score (the imaging marginal of the planted risk is monotone in it, so
/// this is the best lesion-only ranker).
pub fn oracle_imaging(config: &SynthConfig, cohort: &Cohort) -> Vec<f64> {
    standardized_imaging_scores(config, cohort)
}

/// Generate a cohort. Bit-identical for identical configs.
pub fn generate(config: &SynthConfig) -> Result<Cohort, SynthError> {
    config.validate()?;
    let n = config.n_patients;
    let mut patients = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let mut rng = stream(config.seed, &[Tag::Label("synth"), Tag::Label("clinical"), Tag::Index(i)]);
        let clinical: Vec<f64> = (0..config.d_clinical)
            .map(|_| rng.sample(StandardNormal))
            .collect();

        let mut rng = stream(config.seed, &[Tag::Label("synth"), Tag::Label("lesions"), Tag::Index(i)]);
        let n_lesions = rng.gen_range(config.lesions_min..=config.lesions_max);
        let latent: Vec<f64> = (0..config.d_features)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let lesions = (0..n_lesions)
            .map(|j| {
                let features = latent
                    .iter()
                    .map(|&m| m + LESION_JITTER * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let centroid = [
                    rng.gen_range(0.0..400.0),
                    rng.gen_range(0.0..400.0),
                    rng.gen_range(0.0..400.0),
                ];
                Lesion {
                    lesion_id: format!("L{j:02}"),
                    centroid,
                    features,
                }
            })
            .collect();

        patients.push(PatientRecord {
            patient_id: format!("SYN{i:05}"),
            label: 0,
            clinical,
            lesions,
        });
    }

    let mut cohort = Cohort {
        patients,
        d_clinical: config.d_clinical,
        d_features: config.d_features,
    };

    // Label model: positive iff u < sigmoid((risk - tau) / noise) for a
    // per-patient uniform u, i.e. iff tau < risk - noise * logit(u). The
    // positive count is a step function of tau that drops by one at each
    // patient's critical threshold, so placing tau between the order
    // statistics of those thresholds hits the target count exactly.
    let risks = oracle_risk(config, &cohort);
    let mut criticals: Vec<f64> = risks
        .iter()
        .enumerate()
        .map(|(i, &risk)| {
            let mut rng =
                stream(config.seed, &[Tag::Label("synth"), Tag::Label("label"), Tag::Index(i as u64)]);
            let u = loop {
                let u: f64 = rng.gen();
                if u > 0.0 {
                    break u;
                }
            };
            if config.noise == 0.0 {
                risk
            } else {
                risk - config.noise * (u / (1.0 - u)).ln()
            }
        })
        .collect();

    let target = ((config.positive_ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut sorted = criticals.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let tau = (sorted[target - 1] + sorted[target]) / 2.0;
    for (patient, critical) in cohort.patients.iter_mut().zip(criticals.drain(..)) {
        patient.label = u8::from(tau < critical);
    }

    let positives = cohort.patients.iter().filter(|p| p.label == 1).count();
    let tolerance = (0.02 * target as f64).max(1.0);
    if (positives as f64 - target as f64).abs() > tolerance {
        return Err(SynthError::Calibration(format!(
            "wanted {target} positives (±{tolerance:.1}), got {positives}; \
             critical thresholds around the cut are tied"
        )));
    }
    Ok(cohort)
}

#[cfg(test)]
mod tests;
