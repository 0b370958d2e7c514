//! Scratch probe: ceiling AUCs for each model family on the default cohort.

use lesiongraph::protocol::{make_splits, roc_auc};
use lesiongraph::rng::{stream, Tag};
use lesiongraph::synth::{generate, oracle_clinical, oracle_imaging, oracle_risk, SynthConfig};
use rand::Rng;
use rand_distr::StandardNormal;

const KAPPA: f64 = 2.0; // SELECTION_TEMPERATURE

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

/// E_c[S(q; c)] over c ~ N(0, I_d), Monte Carlo with a fixed seed.
fn g_curve(d: usize) -> impl Fn(f64) -> f64 {
    let mut rng = stream(7, &[Tag::Label("gcurve")]);
    let draws: Vec<Vec<f64>> = (0..20_000)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    move |q: f64| draws.iter().map(|c| soft_select(q, c)).sum::<f64>() / draws.len() as f64
}

/// E_b[S(kappa·b; c)] over b ~ N(0,1), quadrature.
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

fn main() {
    let config = SynthConfig::default();
    let cohort = generate(&config).unwrap();
    let labels: Vec<u8> = cohort.patients.iter().map(|p| p.label).collect();

    let full = oracle_risk(&config, &cohort);
    let clin_term = oracle_clinical(&config, &cohort);
    let btilde = oracle_imaging(&config, &cohort);

    // Raw (un-standardized) max projection: what a lesion-only model sees
    // without knowing the lesion-count adjustment.
    let w_i = {
        let (_, w) = lesiongraph::synth::signal_weights(&config);
        w
    };
    let raw_max: Vec<f64> = cohort
        .patients
        .iter()
        .map(|p| {
            p.lesions
                .iter()
                .map(|l| l.features.iter().zip(&w_i).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();

    // Raw selection term alone (crossatt's exactly expressible channel,
    // before the generator's centering).
    let t_term: Vec<f64> = cohort
        .patients
        .iter()
        .zip(&btilde)
        .map(|(p, &b)| soft_select(KAPPA * b, &p.clinical))
        .collect();

    // Additive projection of the planted risk: the g(b) part is centered
    // away by the generator, so what additive models can see is
    // beta_c·s + beta_i·b + beta_x·(h(c) − E[g]).
    let g = g_curve(config.d_clinical);
    let _ = &g;
    let additive: Vec<f64> = cohort
        .patients
        .iter()
        .zip(&btilde)
        .zip(&clin_term)
        .map(|((p, &b), &ct)| {
            ct + config.imaging_strength * b
                + config.interaction_strength * h_of_c(&p.clinical)
        })
        .collect();

    // Bayes clinical: beta_c·s + beta_x·h(c).
    let bayes_c: Vec<f64> = cohort
        .patients
        .iter()
        .zip(&clin_term)
        .map(|(p, &ct)| ct + config.interaction_strength * h_of_c(&p.clinical))
        .collect();

    let auc_on = |idx: &[usize], scores: &[f64]| {
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        roc_auc(&s, &l).unwrap()
    };
    let all: Vec<usize> = (0..labels.len()).collect();
    let plan = make_splits(&labels, 42, 1).unwrap();
    let test = &plan.test;

    println!("{:22} {:>8} {:>8}", "score", "cohort", "test");
    for (name, scores) in [
        ("full risk", &full),
        ("selection term only", &t_term),
        ("additive projection", &additive),
        ("imaging b-tilde", &btilde),
        ("imaging raw max", &raw_max),
        ("bayes clinical", &bayes_c),
        ("clinical term", &clin_term),
    ] {
        println!(
            "{:22} {:>8.4} {:>8.4}",
            name,
            auc_on(&all, scores),
            auc_on(test, scores)
        );
    }
}
