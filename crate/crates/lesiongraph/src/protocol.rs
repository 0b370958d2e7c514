//! Experimental machinery: repeated stratified splits around one fixed test
//! set, balanced-subset ROC AUC scoring, grid search with selection on
//! validation AUC only, and Welch t-tests between models.

use log::info;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, CohortError, FeatureKind, RobustScaler};
use crate::graph::{population_stats, GraphError, PopulationStats};
use crate::model::{
    balanced_auc, prepare_samples, train, Hyper, ModelError, Sample, TrainResult, Variant,
    VALIDATION_SUBSETS,
};
use crate::rng::{stream, stream_seed, Tag};

/// Repeats of the train/validation reshuffle around the fixed test set.
pub const DEFAULT_REPEATS: usize = 10;

/// Fraction of each class held out in the fixed test set.
pub const TEST_FRACTION: f64 = 0.1;

/// Fraction of each class held out for validation in every repeat.
pub const VAL_FRACTION: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("cohort too small: {0}")]
    TooSmall(String),
    #[error("ROC AUC undefined: {0}")]
    UndefinedAuc(String),
    #[error("degenerate t-test: {0}")]
    DegenerateTest(String),
    #[error("hyperparameter grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(Box<ModelError>),
}

// Manual impl: `ModelError` already embeds `ProtocolError` by value, so this
// direction boxes to keep the two types finite.
impl From<ModelError> for ProtocolError {
    fn from(e: ModelError) -> Self {
        ProtocolError::Model(Box::new(e))
    }
}

/// Train and validation ids of a single repeat.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepeatSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Stratified 80/10/10 split plan: the test set is fixed once; train and
/// validation are reshuffled per repeat from the remainder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub test: Vec<usize>,
    pub repeats: Vec<RepeatSplit>,
}

fn stratum_count(class_size: usize, fraction: f64) -> usize {
    ((fraction * class_size as f64).round() as usize).max(1)
}

fn shuffle(ids: &mut [usize], rng: &mut ChaCha12Rng) {
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.gen_range(0..=i));
    }
}

/// Stratified split plan over `labels` (0/1 per patient, by index).
pub fn make_splits(labels: &[u8], seed: u64, n_repeats: usize) -> Result<SplitPlan, ProtocolError> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    if pos.len() < 2 || neg.len() < 2 {
        return Err(ProtocolError::TooSmall(format!(
            "need at least 2 patients per class, got {} positive / {} negative",
            pos.len(),
            neg.len()
        )));
    }

    let mut test = Vec::new();
    let mut rest_by_class = Vec::new();
    let mut test_rng = stream(seed, &[Tag::Label("split"), Tag::Label("test")]);
    for class in [pos, neg] {
        let n_test = stratum_count(class.len(), TEST_FRACTION);
        let mut ids = class;
        shuffle(&mut ids, &mut test_rng);
        test.extend_from_slice(&ids[..n_test]);
        rest_by_class.push((ids[n_test..].to_vec(), stratum_count(ids.len(), VAL_FRACTION)));
    }
    test.sort_unstable();

    let repeats = (0..n_repeats)
        .map(|r| {
            let mut rng = stream(seed, &[Tag::Label("split"), Tag::Label("repeat"), Tag::Index(r as u64)]);
            let mut train = Vec::new();
            let mut val = Vec::new();
            for (rest, n_val) in &rest_by_class {
                let mut ids = rest.clone();
                shuffle(&mut ids, &mut rng);
                val.extend_from_slice(&ids[..*n_val]);
                train.extend_from_slice(&ids[*n_val..]);
            }
            train.sort_unstable();
            val.sort_unstable();
            RepeatSplit { train, val }
        })
        .collect();

    Ok(SplitPlan { seed, test, repeats })
}

/// Partition an eval set into `k` balanced subsets: every subset keeps all
/// positives and receives a distinct 1/k share of the shuffled negatives.
/// Returned entries are indices into `labels`.
pub fn balanced_subsets(
    labels: &[u8],
    k: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Vec<usize>>, ProtocolError> {
    assert!(k > 0, "k must be positive");
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    if pos.is_empty() {
        return Err(ProtocolError::TooSmall(
            "balanced subsets need at least one positive".into(),
        ));
    }
    if neg.len() < k {
        return Err(ProtocolError::TooSmall(format!(
            "balanced subsets need at least k = {k} negatives, got {}",
            neg.len()
        )));
    }
    shuffle(&mut neg, rng);
    let base = neg.len() / k;
    let extra = neg.len() % k;
    let mut subsets = Vec::with_capacity(k);
    let mut start = 0;
    for s in 0..k {
        let size = base + usize::from(s < extra);
        let mut subset = pos.clone();
        subset.extend_from_slice(&neg[start..start + size]);
        start += size;
        subsets.push(subset);
    }
    Ok(subsets)
}

/// ROC AUC in the Mann-Whitney formulation: the fraction of (positive,
/// negative) pairs ranked correctly, ties counting one half. Computed via
/// average ranks, which equals pair counting exactly.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, ProtocolError> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ProtocolError::UndefinedAuc(format!(
            "need both classes, got {n_pos} positive / {n_neg} negative"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of average ranks (1-based) over the positives; tied scores share
    // the mean rank of their run.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j average to (i + j + 1) / 2.
        let avg_rank = (i + j + 1) as f64 / 2.0;
        let ties_pos = order[i..j].iter().filter(|&&id| labels[id] == 1).count();
        rank_sum_pos += avg_rank * ties_pos as f64;
        i = j;
    }

    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// ln Γ(z) for z > 0, Lanczos approximation (Numerical Recipes g = 5).
pub fn ln_gamma(z: f64) -> f64 {
    assert!(z > 0.0, "ln_gamma defined here for positive arguments only");
    const C: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut sum = 1.000000000190015;
    for (i, c) in C.iter().enumerate() {
        sum += c / (z + i as f64 + 1.0);
    }
    let tmp = z + 5.5;
    (z + 0.5) * tmp.ln() - tmp + (2.5066282746310005 * sum / z).ln()
}

fn beta_cf_step(val: f64, c: &mut f64, d: &mut f64) -> f64 {
    const TINY: f64 = 1e-30;
    *d = 1.0 + val * *d;
    if d.abs() < TINY {
        *d = TINY;
    }
    *d = 1.0 / *d;
    *c = 1.0 + val / *c;
    if c.abs() < TINY {
        *c = TINY;
    }
    *c * *d
}

/// Regularized incomplete beta I_x(a, b) via Lentz's continued fraction,
/// with the symmetry flip for fast convergence.
pub fn inc_beta(x: f64, a: f64, b: f64) -> f64 {
    assert!((0.0..=1.0).contains(&x) && a > 0.0 && b > 0.0);
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - inc_beta(1.0 - x, b, a);
    }

    let ln_beta = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    let front = (a * x.ln() + b * (1.0 - x).ln() - ln_beta).exp();

    let mut f = 1.0;
    let mut c = 1.0;
    let mut d = 0.0;
    for m in 0..300 {
        let m = m as f64;
        let odd = -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
        let delta = beta_cf_step(odd, &mut c, &mut d);
        f *= delta;
        if (delta - 1.0).abs() < 1e-14 {
            break;
        }
        let even = (m + 1.0) * (b - m - 1.0) * x / ((a + 2.0 * m + 1.0) * (a + 2.0 * m + 2.0));
        let delta = beta_cf_step(even, &mut c, &mut d);
        f *= delta;
        if (delta - 1.0).abs() < 1e-14 {
            break;
        }
    }
    front / (f * a)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    /// Welch-Satterthwaite degrees of freedom.
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

fn mean_and_var(sample: &[f64]) -> (f64, f64) {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let var = sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided Welch t-test for a difference in means of two independent
/// samples with unequal variances.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<WelchResult, ProtocolError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(ProtocolError::TooSmall(format!(
            "t-test needs at least 2 values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mean_a, var_a) = mean_and_var(a);
    let (mean_b, var_b) = mean_and_var(b);
    if var_a == 0.0 && var_b == 0.0 {
        return Err(ProtocolError::DegenerateTest(
            "both samples have zero variance".into(),
        ));
    }
    let sa = var_a / a.len() as f64;
    let sb = var_b / b.len() as f64;
    let t = (mean_a - mean_b) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2)
        / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    // P(|T| > |t|) = I_{df/(df + t^2)}(df/2, 1/2).
    let p = inc_beta(df / (df + t * t), df / 2.0, 0.5);
    Ok(WelchResult { t, df, p })
}

/// Hyperparameter grid; axes a variant does not use collapse to one value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lrs: Vec<f64>,
    pub hiddens: Vec<usize>,
    pub gammas: Vec<f64>,
    pub dropouts: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            lrs: vec![1e-2, 1e-3, 1e-4],
            hiddens: vec![16, 32, 64],
            gammas: vec![0.1, 1.0, 10.0],
            dropouts: vec![0.0, 0.2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub hidden: usize,
    pub gamma: f64,
    pub dropout: f64,
}

impl Grid {
    /// Grid points for one variant, gamma as the outermost axis (points of
    /// equal gamma are consecutive, so per-gamma data preparation can be
    /// shared without disturbing the first-point-wins tie break).
    pub fn points_for(&self, variant: Variant) -> Vec<GridPoint> {
        let gammas: &[f64] = if variant.uses_graph() { &self.gammas } else { &[1.0] };
        let dropouts: &[f64] = if variant.uses_dropout() { &self.dropouts } else { &[0.0] };
        let mut points = Vec::new();
        for &gamma in gammas {
            for &lr in &self.lrs {
                for &hidden in &self.hiddens {
                    for &dropout in dropouts {
                        points.push(GridPoint { lr, hidden, gamma, dropout });
                    }
                }
            }
        }
        points
    }
}

/// Outcome of one repeat: the selected grid point and its scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatRow {
    pub variant: Variant,
    pub repeat: usize,
    pub lr: f64,
    pub hidden: usize,
    pub gamma: f64,
    pub dropout: f64,
    pub val_auc: f64,
    pub test_auc: f64,
}

/// Full grid-search report for one variant: one row per repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub rows: Vec<RepeatRow>,
}

impl VariantReport {
    pub fn test_aucs(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.test_auc).collect()
    }

    pub fn mean_test_auc(&self) -> f64 {
        let aucs = self.test_aucs();
        aucs.iter().sum::<f64>() / aucs.len() as f64
    }

    /// Sample standard deviation over repeats (the "±" convention).
    pub fn std_test_auc(&self) -> f64 {
        let aucs = self.test_aucs();
        if aucs.len() < 2 {
            return 0.0;
        }
        mean_and_var(&aucs).1.sqrt()
    }
}

/// Per-gamma data preparation: scalers fitted on this repeat's training ids
/// only, then applied to the whole cohort; edge statistics likewise come
/// from the standardized training subset.
fn prepare_for_gamma(
    variant: Variant,
    cohort: &Cohort,
    train_ids: &[usize],
    gamma: f64,
) -> Result<Vec<Sample>, ProtocolError> {
    let train_cohort = cohort.subset(train_ids);
    let clinical = RobustScaler::fit(&train_cohort, FeatureKind::Clinical);
    let imaging = RobustScaler::fit(&train_cohort, FeatureKind::Imaging);
    let standardized = cohort.standardized(&clinical, &imaging)?;
    let stats: Option<PopulationStats> = if variant.uses_graph() {
        Some(population_stats(&standardized.subset(train_ids), gamma)?)
    } else {
        None
    };
    Ok(prepare_samples(&standardized, stats.as_ref())?)
}

fn gather(samples: &[Sample], ids: &[usize]) -> Vec<Sample> {
    ids.iter().map(|&i| samples[i].clone()).collect()
}

struct SelectedPoint {
    point_idx: usize,
    result: TrainResult,
    samples: Vec<Sample>,
}

fn run_repeat(
    variant: Variant,
    cohort: &Cohort,
    plan: &SplitPlan,
    points: &[GridPoint],
    epochs: usize,
    seed: u64,
    repeat: usize,
) -> Result<RepeatRow, ProtocolError> {
    let split = &plan.repeats[repeat];
    let val_seed = stream_seed(seed, &[Tag::Label("val"), Tag::Index(repeat as u64)]);

    let mut selected: Option<SelectedPoint> = None;
    let mut prepared: Option<(f64, Vec<Sample>)> = None;
    for (point_idx, point) in points.iter().enumerate() {
        let fresh = match &prepared {
            Some((gamma, _)) if *gamma == point.gamma => false,
            _ => true,
        };
        if fresh {
            prepared = Some((
                point.gamma,
                prepare_for_gamma(variant, cohort, &split.train, point.gamma)?,
            ));
        }
        let samples = &prepared.as_ref().expect("just prepared").1;
        let hyper = Hyper {
            lr: point.lr,
            hidden: point.hidden,
            gamma: point.gamma,
            dropout: point.dropout,
            epochs,
        };
        let train_seed = stream_seed(
            seed,
            &[
                Tag::Label(variant.tag()),
                Tag::Label("train"),
                Tag::Index(repeat as u64),
                Tag::Index(point_idx as u64),
            ],
        );
        let result = train(
            variant,
            &gather(samples, &split.train),
            &gather(samples, &split.val),
            cohort.d_features,
            cohort.d_clinical,
            &hyper,
            train_seed,
            val_seed,
        )?;
        info!(
            "{variant} repeat {repeat} point {point_idx} (lr={} hidden={} gamma={} dropout={}): best val AUC {:.4} at epoch {}",
            point.lr, point.hidden, point.gamma, point.dropout, result.best_val_auc, result.best_epoch
        );
        let better = selected
            .as_ref()
            .map_or(true, |s| result.best_val_auc > s.result.best_val_auc);
        if better {
            selected = Some(SelectedPoint {
                point_idx,
                result,
                samples: gather(samples, &plan.test),
            });
        }
    }

    let selected = selected.ok_or(ProtocolError::EmptyGrid)?;
    let point = points[selected.point_idx];
    let mut test_rng = stream(seed, &[Tag::Label("test-subsets"), Tag::Index(repeat as u64)]);
    let test_auc = balanced_auc(
        variant,
        &selected.result.best_params,
        &selected.samples,
        VALIDATION_SUBSETS,
        &mut test_rng,
    )?;
    Ok(RepeatRow {
        variant,
        repeat,
        lr: point.lr,
        hidden: point.hidden,
        gamma: point.gamma,
        dropout: point.dropout,
        val_auc: selected.result.best_val_auc,
        test_auc,
    })
}

/// Grid search for one variant over every repeat of the plan. Selection
/// uses validation AUC only; the selected parameters are then scored once
/// on the fixed test set's balanced subsets. Repeats run in parallel.
pub fn grid_search(
    variant: Variant,
    cohort: &Cohort,
    plan: &SplitPlan,
    grid: &Grid,
    epochs: usize,
    seed: u64,
) -> Result<VariantReport, ProtocolError> {
    let points = grid.points_for(variant);
    if points.is_empty() {
        return Err(ProtocolError::EmptyGrid);
    }
    let rows = (0..plan.repeats.len())
        .into_par_iter()
        .map(|repeat| run_repeat(variant, cohort, plan, &points, epochs, seed, repeat))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VariantReport { variant, rows })
}

/// One line of the cross-model comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub mean_test_auc: f64,
    pub std_test_auc: f64,
    /// Welch p-value against the proposed model; None for the proposed
    /// model itself or when fewer than two repeats are available.
    pub p_vs_crossatt: Option<f64>,
}

/// Mean ± std of test AUC per variant plus Welch p-values against the
/// proposed model.
pub fn summarize(reports: &[VariantReport]) -> Result<Vec<SummaryRow>, ProtocolError> {
    let reference = reports
        .iter()
        .find(|r| r.variant == Variant::CrossAtt)
        .map(|r| r.test_aucs());
    reports
        .iter()
        .map(|report| {
            let aucs = report.test_aucs();
            let p_vs_crossatt = match &reference {
                Some(reference)
                    if report.variant != Variant::CrossAtt
                        && reference.len() >= 2
                        && aucs.len() >= 2 =>
                {
                    Some(welch_ttest(reference, &aucs)?.p)
                }
                _ => None,
            };
            Ok(SummaryRow {
                variant: report.variant,
                mean_test_auc: report.mean_test_auc(),
                std_test_auc: report.std_test_auc(),
                p_vs_crossatt,
            })
        })
        .collect()
}
