//! Scratch probe: functional-ANOVA split of the selection term
//! S(kappa·b; c) into additive parts g(b), h(c) and the pure interaction
//! residual R, for candidate temperatures.

use lesiongraph::rng::{stream, Tag};
use rand::Rng;
use rand_distr::StandardNormal;

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

fn main() {
    let d = 8;
    let n_c = 3000;
    let n_b = 201;
    let bimodal = std::env::args().any(|a| a == "--bimodal");
    let mut rng = stream(11, &[Tag::Label("anova")]);
    let cs: Vec<Vec<f64>> = (0..n_c)
        .map(|_| {
            (0..d)
                .map(|_| {
                    if bimodal {
                        let center = if rng.gen_range(0..2) == 0 { -1.0 } else { 1.0 };
                        center + 0.35 * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        rng.sample(StandardNormal)
                    }
                })
                .collect()
        })
        .collect();
    // Gauss grid over b ~ N(0,1).
    let bs: Vec<(f64, f64)> = (0..n_b)
        .map(|i| {
            let b = -4.0 + 8.0 * i as f64 / (n_b - 1) as f64;
            (b, (-0.5 * b * b).exp())
        })
        .collect();
    let wsum: f64 = bs.iter().map(|(_, w)| w).sum();

    for kappa in [1.0_f64, 2.0, 3.0, 5.0, 8.0] {
        // Table of S values: n_c x n_b.
        let table: Vec<Vec<f64>> = cs
            .iter()
            .map(|c| bs.iter().map(|&(b, _)| soft_select(kappa * b, c)).collect())
            .collect();
        // Marginal means.
        let mut g = vec![0.0; n_b]; // E_c[S | b]
        for row in &table {
            for (gj, &v) in g.iter_mut().zip(row) {
                *gj += v;
            }
        }
        for gj in &mut g {
            *gj /= n_c as f64;
        }
        let h: Vec<f64> = table
            .iter()
            .map(|row| {
                row.iter().zip(&bs).map(|(&v, &(_, w))| v * w).sum::<f64>() / wsum
            })
            .collect();
        let grand: f64 = h.iter().sum::<f64>() / n_c as f64;

        let (mut var_g, mut var_h, mut var_r, mut var_t) = (0.0, 0.0, 0.0, 0.0);
        for (i, row) in table.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let w = bs[j].1 / wsum / n_c as f64;
                let gg = g[j] - grand;
                let hh = h[i] - grand;
                let rr = v - g[j] - h[i] + grand;
                var_g += w * gg * gg;
                var_h += w * hh * hh;
                var_r += w * rr * rr;
                let tt = v - grand;
                var_t += w * tt * tt;
            }
        }
        println!(
            "kappa {kappa:>3}: Var(T) {var_t:.4}  g-share {:.2}  h-share {:.2}  R-share {:.2}",
            var_g / var_t,
            var_h / var_t,
            var_r / var_t
        );
    }
}
