//! Scratch probe: logistic-fit ceiling AUCs per model family, as a function
//! of how much of the selection term's imaging-average response is centered
//! away (lambda). Each lambda relabels the same cohort with the generator's
//! own calibration rule.

use lesiongraph::protocol::{make_splits, roc_auc};
use lesiongraph::rng::{stream, Tag};
use lesiongraph::synth::{generate, signal_weights, SynthConfig};
use rand::Rng;
use rand_distr::StandardNormal;

const KAPPA: f64 = 2.0;
const JITTER: f64 = 0.5;

fn soft_select(q: f64, values: &[f64]) -> f64 {
    let top = values.iter().map(|&v| q * v).fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for &v in values {
        let e = (q * v - top).exp();
        num += v * e;
        den += e;
    }
    num / den
}

fn max_normal_moments(n: usize) -> (f64, f64) {
    const LO: f64 = -9.0;
    const STEPS: usize = 18_000;
    let h = 18.0 / STEPS as f64;
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let density = |pdf: f64, cdf: f64| n as f64 * pdf * cdf.min(1.0).powi(n as i32 - 1);
    let mut cdf = 0.0_f64;
    let (mut px, mut ppdf) = (LO, phi(LO));
    let mut pd = density(ppdf, cdf);
    let (mut mean, mut raw2) = (0.0, 0.0);
    for i in 1..=STEPS {
        let x = LO + h * i as f64;
        let pdf = phi(x);
        cdf += 0.5 * h * (ppdf + pdf);
        let d = density(pdf, cdf);
        mean += 0.5 * h * (px * pd + x * d);
        raw2 += 0.5 * h * (px * px * pd + x * x * d);
        px = x;
        ppdf = pdf;
        pd = d;
    }
    (mean, raw2 - mean * mean)
}

struct GCurve {
    lo: f64,
    step: f64,
    values: Vec<f64>,
}

impl GCurve {
    fn new(d: usize) -> Self {
        let (lo, hi, n, draws) = (-16.0, 16.0, 161, 3000);
        let mut rng = stream(0x5EEDC4, &[Tag::Label("probe"), Tag::Label("gcurve")]);
        let cs: Vec<Vec<f64>> = (0..draws)
            .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let step = (hi - lo) / (n - 1) as f64;
        let values = (0..n)
            .map(|i| {
                let q = lo + step * i as f64;
                cs.iter().map(|c| soft_select(q, c)).sum::<f64>() / draws as f64
            })
            .collect();
        GCurve { lo, step, values }
    }
    fn at(&self, q: f64) -> f64 {
        let pos = ((q - self.lo) / self.step).clamp(0.0, (self.values.len() - 1) as f64);
        let i = (pos.floor() as usize).min(self.values.len() - 2);
        let f = pos - i as f64;
        self.values[i] * (1.0 - f) + self.values[i + 1] * f
    }
}

fn h_of_c(c: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..81 {
        let b = -4.0 + 0.1 * i as f64;
        let w = (-0.5 * b * b).exp();
        num += w * soft_select(KAPPA * b, c);
        den += w;
    }
    num / den
}

/// Full-batch logistic regression with column standardization; returns test
/// scores.
fn logistic_scores(
    xtr: &[Vec<f64>],
    ytr: &[u8],
    xte: &[Vec<f64>],
) -> Vec<f64> {
    let d = xtr[0].len();
    let n = xtr.len() as f64;
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for row in xtr {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for row in xtr {
        for k in 0..d {
            sd[k] += (row[k] - mean[k]).powi(2);
        }
    }
    for s in &mut sd {
        *s = (*s / n).sqrt().max(1e-9);
    }
    let std = |row: &[f64]| -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(k, &v)| (v - mean[k]) / sd[k])
            .collect()
    };
    let xs: Vec<Vec<f64>> = xtr.iter().map(|r| std(r)).collect();
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..1500 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (row, &y) in xs.iter().zip(ytr) {
            let z: f64 = row.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let e = p - y as f64;
            for (g, &x) in gw.iter_mut().zip(row) {
                *g += e * x;
            }
            gb += e;
        }
        for (wk, gk) in w.iter_mut().zip(&gw) {
            *wk -= 0.5 * (gk / n + 1e-4 * *wk);
        }
        b -= 0.5 * gb / n;
    }
    xte.iter()
        .map(|r| {
            let row = std(r);
            row.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() + b
        })
        .collect()
}

fn main() {
    let config = SynthConfig::default();
    let cohort = generate(&config).unwrap();
    let n = cohort.patients.len();
    let d = config.d_clinical;
    let (_, w_i) = signal_weights(&config);
    let g_curve = GCurve::new(d);

    // Per-patient precomputation.
    let mut s_clin = vec![0.0; n];
    let mut b_hi = vec![0.0; n]; // standardized max lesion score
    let mut b_lo = vec![0.0; n]; // standardized min lesion score
    let mut raw_hi = vec![0.0; n];
    let mut raw_lo = vec![0.0; n];
    let mut raw_mean = vec![0.0; n];
    let mut les_count = vec![0.0; n];
    let mut sel_hi = vec![0.0; n];
    let mut sel_lo = vec![0.0; n];
    let mut h_c = vec![0.0; n];
    let mut var_c = vec![0.0; n];
    let max_l = cohort.patients.iter().map(|p| p.n_lesions()).max().unwrap();
    let moments: Vec<(f64, f64)> = (1..=max_l).map(max_normal_moments).collect();
    for (i, p) in cohort.patients.iter().enumerate() {
        let us: Vec<f64> = p
            .lesions
            .iter()
            .map(|l| l.features.iter().zip(&w_i).map(|(a, b)| a * b).sum())
            .collect();
        let (hi, lo) = (
            us.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            us.iter().cloned().fold(f64::INFINITY, f64::min),
        );
        let (m, v) = moments[p.n_lesions() - 1];
        let scale = (1.0 + JITTER * JITTER * v).sqrt();
        b_hi[i] = (hi - JITTER * m) / scale;
        b_lo[i] = (lo + JITTER * m) / scale;
        raw_hi[i] = hi;
        raw_lo[i] = lo;
        raw_mean[i] = us.iter().sum::<f64>() / us.len() as f64;
        les_count[i] = us.len() as f64;
        let cm: f64 = p.clinical.iter().sum::<f64>() / d as f64;
        s_clin[i] = cm * (d as f64).sqrt();
        var_c[i] = p.clinical.iter().map(|&x| (x - cm) * (x - cm)).sum::<f64>() / d as f64;
        sel_hi[i] = soft_select(KAPPA * b_hi[i], &p.clinical);
        sel_lo[i] = soft_select(KAPPA * b_lo[i], &p.clinical);
        h_c[i] = h_of_c(&p.clinical);
    }

    println!(
        "{:>6} {:>8} {:>9} {:>7} {:>7} {:>9} {:>8}",
        "lambda", "oracle", "crossatt", "mlp", "concat", "graphconv", "(test fold AUCs)"
    );
    for lambda in [0.0, 0.5, 0.75, 1.0] {
        // Relabel with the generator's calibration rule.
        let risks: Vec<f64> = (0..n)
            .map(|i| {
                let q = KAPPA * b_hi[i];
                config.clinical_strength * s_clin[i]
                    + config.imaging_strength * b_hi[i]
                    + config.interaction_strength
                        * (sel_hi[i] - lambda * g_curve.at(q))
            })
            .collect();
        let criticals: Vec<f64> = risks
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let mut rng = stream(
                    config.seed,
                    &[Tag::Label("synth"), Tag::Label("label"), Tag::Index(i as u64)],
                );
                let u = loop {
                    let u: f64 = rng.gen();
                    if u > 0.0 {
                        break u;
                    }
                };
                r - config.noise * (u / (1.0 - u)).ln()
            })
            .collect();
        let target = ((config.positive_ratio * n as f64).round() as usize).clamp(1, n - 1);
        let mut sorted = criticals.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let tau = (sorted[target - 1] + sorted[target]) / 2.0;
        let labels: Vec<u8> = criticals.iter().map(|&c| u8::from(tau < c)).collect();

        let plan = make_splits(&labels, 42, 1).unwrap();
        let mut train_idx = plan.repeats[0].train.clone();
        train_idx.extend_from_slice(&plan.repeats[0].val);
        let test_idx = plan.test.clone();

        let families: Vec<(&str, Vec<Vec<f64>>)> = vec![
            (
                "crossatt",
                (0..n)
                    .map(|i| vec![sel_hi[i], sel_lo[i], s_clin[i]])
                    .collect(),
            ),
            (
                "mlp",
                (0..n)
                    .map(|i| {
                        let mut f = cohort.patients[i].clinical.clone();
                        f.push(var_c[i]);
                        f.push(h_c[i]);
                        f
                    })
                    .collect(),
            ),
            (
                "concat",
                (0..n)
                    .map(|i| {
                        let mut f = cohort.patients[i].clinical.clone();
                        f.extend([raw_hi[i], raw_lo[i], raw_mean[i], les_count[i]]);
                        f
                    })
                    .collect(),
            ),
            (
                "graphconv",
                (0..n)
                    .map(|i| vec![raw_hi[i], raw_lo[i], raw_mean[i], les_count[i]])
                    .collect(),
            ),
        ];

        let auc_on = |idx: &[usize], scores: &[f64], by_test: bool| {
            let s: Vec<f64> = if by_test {
                scores.to_vec()
            } else {
                idx.iter().map(|&i| scores[i]).collect()
            };
            let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            roc_auc(&s, &l).unwrap()
        };
        let oracle_auc = auc_on(&test_idx, &risks, false);

        let mut row = format!("{lambda:>6.2} {oracle_auc:>8.4}");
        for (_, feats) in &families {
            let xtr: Vec<Vec<f64>> = train_idx.iter().map(|&i| feats[i].clone()).collect();
            let ytr: Vec<u8> = train_idx.iter().map(|&i| labels[i]).collect();
            let xte: Vec<Vec<f64>> = test_idx.iter().map(|&i| feats[i].clone()).collect();
            let scores = logistic_scores(&xtr, &ytr, &xte);
            row.push_str(&format!(" {:>8.4}", auc_on(&test_idx, &scores, true)));
        }
        println!("{row}");
    }
}
