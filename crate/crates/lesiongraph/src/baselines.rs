//! The five comparison models and the two ablations, sharing the autodiff
//! core, the training loop, and the evaluation protocol with the proposed
//! model.
//!
//! Graph builders here return the probability node; parameter creation and
//! dispatch live in [`crate::model`].

use rand_chacha::ChaCha12Rng;

use crate::autodiff::{ExprGraph, NodeId};
use crate::matrix::Matrix;
use crate::model::{
    block_activation, cross_attention, gat_layer, BuildCtx, Capture, ParamInit, Sample, Variant,
};

pub(crate) fn graphconv_param_names(init: &mut ParamInit, prefix: &str, d_in: usize, d_out: usize) {
    init.weight(&format!("{prefix}.w1"), d_in, d_out);
    init.weight(&format!("{prefix}.w2"), d_in, d_out);
}

fn mlp_input_dim(variant: Variant, d_features: usize, d_clinical: usize) -> usize {
    match variant {
        Variant::MlpClinical => d_clinical,
        Variant::MlpImageAvg => d_features,
        Variant::MlpCombined => d_clinical + d_features,
        _ => unreachable!("not an MLP variant"),
    }
}

pub(crate) fn init_baseline_params(
    variant: Variant,
    d_features: usize,
    d_clinical: usize,
    hidden: usize,
    init: &mut ParamInit,
) {
    match variant {
        Variant::MlpClinical | Variant::MlpImageAvg | Variant::MlpCombined => {
            let d_in = mlp_input_dim(variant, d_features, d_clinical);
            init.weight("l1.w", d_in, hidden);
            init.bias("l1.b", hidden);
            init.weight("l2.w", hidden, hidden);
            init.bias("l2.b", hidden);
            init.weight("l3.w", hidden, 1);
            init.bias("l3.b", 1);
        }
        Variant::MilImage => {
            init.weight("lesion.w", d_features, hidden);
            init.bias("lesion.b", hidden);
            init.weight("head.w", hidden, 1);
            init.bias("head.b", 1);
        }
        Variant::GraphConvImage => {
            graphconv_param_names(init, "gc1", d_features, hidden);
            graphconv_param_names(init, "gc2", hidden, 1);
        }
        _ => unreachable!("{variant} is not initialized here"),
    }
}

/// One graph-convolution layer: z_i' = W1 z_i + W2 sum_j w_ij z_j, with the
/// neighbor sum including the self-loop (the graphs carry w_ii = 1).
pub(crate) fn graphconv_layer(
    g: &mut ExprGraph,
    z: NodeId,
    w_mat: NodeId,
    w1: NodeId,
    w2: NodeId,
) -> NodeId {
    let own = g.matmul(z, w1);
    let agg = g.matmul(w_mat, z);
    let mixed = g.matmul(agg, w2);
    g.add(own, mixed)
}

/// Two hidden linear+ReLU layers of one shared width, then linear+sigmoid.
pub(crate) fn build_mlp(
    g: &mut ExprGraph,
    variant: Variant,
    sample: &Sample,
    ctx: &BuildCtx,
) -> NodeId {
    let x = match variant {
        Variant::MlpClinical => g.input(sample.clinical_row.clone()),
        Variant::MlpImageAvg => g.input(sample.image_avg.clone()),
        Variant::MlpCombined => {
            let c = g.input(sample.clinical_row.clone());
            let f = g.input(sample.image_avg.clone());
            g.concat_cols(c, f)
        }
        _ => unreachable!("not an MLP variant"),
    };
    let h1 = g.matmul(x, ctx.node("l1.w"));
    let h1 = g.add(h1, ctx.node("l1.b"));
    let h1 = g.relu(h1);
    let h2 = g.matmul(h1, ctx.node("l2.w"));
    let h2 = g.add(h2, ctx.node("l2.b"));
    let h2 = g.relu(h2);
    let logit = g.matmul(h2, ctx.node("l3.w"));
    let logit = g.add(logit, ctx.node("l3.b"));
    g.sigmoid(logit)
}

/// Per-lesion linear+ReLU, column-wise max over lesions, linear+sigmoid.
pub(crate) fn build_mil(g: &mut ExprGraph, sample: &Sample, ctx: &BuildCtx) -> NodeId {
    let l = sample.n_lesions();
    let z = g.input(sample.features.clone());
    let ones = g.input(Matrix::filled(l, 1, 1.0));
    let h = g.matmul(z, ctx.node("lesion.w"));
    let bias = g.matmul(ones, ctx.node("lesion.b"));
    let h = g.add(h, bias);
    let h = g.relu(h);
    let pooled = g.row_max_pool(h);
    let logit = g.matmul(pooled, ctx.node("head.w"));
    let logit = g.add(logit, ctx.node("head.b"));
    g.sigmoid(logit)
}

/// Two graph-convolution layers (ReLU after the first, the second sized to
/// one output column), max pool over lesions, sigmoid.
pub(crate) fn build_graphconv(
    g: &mut ExprGraph,
    sample: &Sample,
    ctx: &BuildCtx,
    w_mat: NodeId,
) -> NodeId {
    let z = g.input(sample.features.clone());
    let h1 = graphconv_layer(g, z, w_mat, ctx.node("gc1.w1"), ctx.node("gc1.w2"));
    let h1 = g.relu(h1);
    let h2 = graphconv_layer(g, h1, w_mat, ctx.node("gc2.w1"), ctx.node("gc2.w2"));
    let pooled = g.row_max_pool(h2);
    g.sigmoid(pooled)
}

/// Ablation: the proposed architecture with each GATv2 layer swapped for a
/// graph-convolution layer; cross-attention fusion kept.
pub(crate) fn build_graphconv_crossatt(
    g: &mut ExprGraph,
    sample: &Sample,
    ctx: &BuildCtx,
    rng: &mut Option<&mut ChaCha12Rng>,
    capture: &mut Option<&mut Capture>,
    w_mat: NodeId,
) -> NodeId {
    let l = sample.n_lesions();
    let d_clin = sample.clinical_row.cols();
    let z = g.input(sample.features.clone());
    let c_row = g.input(sample.clinical_row.clone());
    let c_col = g.input(sample.clinical_col.clone());
    let mut h = z;
    for (layer, (gc_prefix, ca_prefix)) in [("gc1", "ca1"), ("gc2", "ca2")].into_iter().enumerate()
    {
        let gc_out = graphconv_layer(
            g,
            h,
            w_mat,
            ctx.node(&format!("{gc_prefix}.w1")),
            ctx.node(&format!("{gc_prefix}.w2")),
        );
        let block = block_activation(g, gc_out, l, ctx.hidden, ctx.mode, ctx.dropout, rng);
        let (ca_out, a) = cross_attention(g, block, c_row, c_col, &ctx.cross(ca_prefix), d_clin);
        if let Some(cap) = capture.as_deref_mut() {
            cap.cross_attention.push((layer + 1, a));
        }
        h = ca_out;
    }
    let pooled = g.row_max_pool(h);
    let logit = g.matmul(pooled, ctx.node("head.w"));
    let logit = g.add(logit, ctx.node("head.b"));
    g.sigmoid(logit)
}

/// Ablation: cross-attention replaced by concatenating the clinical vector
/// onto every lesion row, followed by a linear projection back to the GAT
/// width (so the second block's input dimension stays well-defined).
pub(crate) fn build_concat_fusion(
    g: &mut ExprGraph,
    sample: &Sample,
    ctx: &BuildCtx,
    rng: &mut Option<&mut ChaCha12Rng>,
    capture: &mut Option<&mut Capture>,
    w_col: NodeId,
) -> NodeId {
    let l = sample.n_lesions();
    let z = g.input(sample.features.clone());
    let c_row = g.input(sample.clinical_row.clone());
    let ones = g.input(Matrix::filled(l, 1, 1.0));
    let c_tiled = g.matmul(ones, c_row);
    let mut h = z;
    for (layer, (gat_prefix, proj_prefix)) in
        [("gat1", "proj1"), ("gat2", "proj2")].into_iter().enumerate()
    {
        let (gat_out, alpha) = gat_layer(g, h, l, w_col, &ctx.gat(gat_prefix));
        let z_gat = block_activation(g, gat_out, l, ctx.hidden, ctx.mode, ctx.dropout, rng);
        let cat = g.concat_cols(z_gat, c_tiled);
        let proj = g.matmul(cat, ctx.node(&format!("{proj_prefix}.w")));
        let bias = g.matmul(ones, ctx.node(&format!("{proj_prefix}.b")));
        let proj = g.add(proj, bias);
        if let Some(cap) = capture.as_deref_mut() {
            cap.gat_alpha.push((layer + 1, alpha));
        }
        h = proj;
    }
    let pooled = g.row_max_pool(h);
    let logit = g.matmul(pooled, ctx.node("head.w"));
    let logit = g.add(logit, ctx.node("head.b"));
    g.sigmoid(logit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::graph::PopulationStats;
    use crate::model::{build_prob, init_params, predict_prob, prepare_samples, Mode, ParamSet};
    use crate::rng::{stream, Tag};
    use rand::Rng;

    const SEED: u64 = 0xBA5E;

    fn random_cohort(rng: &mut ChaCha12Rng, n: usize, d_f: usize, d_c: usize) -> crate::cohort::Cohort {
        use crate::cohort::{Cohort, Lesion, PatientRecord};
        let patients = (0..n)
            .map(|i| PatientRecord {
                patient_id: format!("p{i}"),
                label: (i % 2) as u8,
                clinical: (0..d_c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                lesions: (0..rng.gen_range(1..=4))
                    .map(|j| Lesion {
                        lesion_id: format!("{j}"),
                        centroid: [
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                        ],
                        features: (0..d_f).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    })
                    .collect(),
            })
            .collect();
        Cohort {
            patients,
            d_clinical: d_c,
            d_features: d_f,
        }
    }

    fn sample_for(variant: Variant, rng: &mut ChaCha12Rng, d_f: usize, d_c: usize) -> Sample {
        let cohort = random_cohort(rng, 1, d_f, d_c);
        let stats = variant.uses_graph().then(|| PopulationStats {
            sigma1: 1.0,
            sigma2: 1.0,
            gamma: 1.0,
        });
        prepare_samples(&cohort, stats.as_ref()).unwrap().remove(0)
    }

    #[test]
    fn zero_mlp_weights_predict_half() {
        let mut rng = stream(SEED, &[Tag::Label("mlp-zero")]);
        let mut params = init_params(Variant::MlpClinical, 3, 4, 5, &mut rng);
        for (_, m) in &mut params.entries {
            *m = Matrix::zeros(m.rows(), m.cols());
        }
        let sample = sample_for(Variant::MlpClinical, &mut rng, 3, 4);
        let p = predict_prob(Variant::MlpClinical, &params, &sample).unwrap();
        assert_eq!(p, 0.5);
    }

    fn affine(x: &[f64], w: &Matrix, b: &Matrix) -> Vec<f64> {
        (0..w.cols())
            .map(|c| {
                let mut acc = 0.0;
                for (r, xv) in x.iter().enumerate() {
                    acc += xv * w.get(r, c);
                }
                acc + b.get(0, c)
            })
            .collect()
    }

    fn mlp_oracle(x: &[f64], params: &ParamSet) -> f64 {
        let h1: Vec<f64> = affine(x, params.get("l1.w"), params.get("l1.b"))
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let h2: Vec<f64> = affine(&h1, params.get("l2.w"), params.get("l2.b"))
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let logit = affine(&h2, params.get("l3.w"), params.get("l3.b"))[0];
        1.0 / (1.0 + (-logit).exp())
    }

    #[test]
    fn mlp_matches_straight_line_oracle() {
        for case in 0..20u64 {
            let mut rng = stream(SEED, &[Tag::Label("mlp-oracle"), Tag::Index(case)]);
            let (d_f, d_c, hidden) = (4, 3, 5);
            for variant in [
                Variant::MlpClinical,
                Variant::MlpImageAvg,
                Variant::MlpCombined,
            ] {
                let params = init_params(variant, d_f, d_c, hidden, &mut rng);
                let sample = sample_for(variant, &mut rng, d_f, d_c);
                let x: Vec<f64> = match variant {
                    Variant::MlpClinical => sample.clinical_row.data().to_vec(),
                    Variant::MlpImageAvg => sample.image_avg.data().to_vec(),
                    Variant::MlpCombined => {
                        let mut v = sample.clinical_row.data().to_vec();
                        v.extend_from_slice(sample.image_avg.data());
                        v
                    }
                    _ => unreachable!(),
                };
                let got = predict_prob(variant, &params, &sample).unwrap();
                let want = mlp_oracle(&x, &params);
                assert!(
                    (got - want).abs() < 1e-12,
                    "{variant} case {case}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn image_avg_of_identical_lesions_is_that_lesion() {
        use crate::cohort::{Cohort, Lesion, PatientRecord};
        let lesion = Lesion {
            lesion_id: "0".into(),
            centroid: [0.0; 3],
            features: vec![0.25, -1.5, 3.0],
        };
        let mut dup = lesion.clone();
        dup.lesion_id = "1".into();
        let cohort = Cohort {
            patients: vec![PatientRecord {
                patient_id: "p".into(),
                label: 0,
                clinical: vec![0.0],
                lesions: vec![lesion.clone(), dup],
            }],
            d_clinical: 1,
            d_features: 3,
        };
        let samples = prepare_samples(&cohort, None).unwrap();
        assert_eq!(samples[0].image_avg.data(), lesion.features.as_slice());
    }

    #[test]
    fn mil_is_unchanged_by_duplicating_a_lesion() {
        let mut rng = stream(SEED, &[Tag::Label("mil-dup")]);
        let params = init_params(Variant::MilImage, 4, 2, 6, &mut rng);
        let mut sample = sample_for(Variant::MilImage, &mut rng, 4, 2);
        let base = predict_prob(Variant::MilImage, &params, &sample).unwrap();

        let mut rows: Vec<Vec<f64>> = (0..sample.features.rows())
            .map(|r| sample.features.row(r).to_vec())
            .collect();
        rows.push(rows[0].clone());
        sample.features = Matrix::from_rows(&rows);
        let dup = predict_prob(Variant::MilImage, &params, &sample).unwrap();
        assert_eq!(base, dup);
    }

    #[test]
    fn mil_single_lesion_max_is_identity() {
        let mut rng = stream(SEED, &[Tag::Label("mil-single")]);
        let params = init_params(Variant::MilImage, 3, 2, 4, &mut rng);
        let sample = sample_for(Variant::MilImage, &mut rng, 3, 2);
        let one_lesion = Sample {
            features: Matrix::from_rows(&[sample.features.row(0).to_vec()]),
            ..sample.clone()
        };
        // Straight-line evaluation of the single-lesion path.
        let h = affine(
            one_lesion.features.row(0),
            params.get("lesion.w"),
            params.get("lesion.b"),
        );
        let pooled: Vec<f64> = h.into_iter().map(|v| v.max(0.0)).collect();
        let logit = affine(&pooled, params.get("head.w"), params.get("head.b"))[0];
        let want = 1.0 / (1.0 + (-logit).exp());
        let got = predict_prob(Variant::MilImage, &params, &one_lesion).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    fn graphconv_forward_once(z: &Matrix, w_mat: &Matrix, w1: &Matrix, w2: &Matrix) -> Matrix {
        let mut g = ExprGraph::new();
        let zn = g.input(z.clone());
        let wn = g.input(w_mat.clone());
        let w1n = g.input(w1.clone());
        let w2n = g.input(w2.clone());
        let out = graphconv_layer(&mut g, zn, wn, w1n, w2n);
        g.forward(out).unwrap()
    }

    #[test]
    fn graphconv_with_zero_mixing_is_per_node_linear() {
        let mut rng = stream(SEED, &[Tag::Label("gc-zero")]);
        let z = Matrix::from_vec(3, 2, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w_mat = Matrix::from_vec(3, 3, (0..9).map(|_| rng.gen_range(0.1..1.0)).collect());
        let w1 = Matrix::from_vec(2, 4, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w2 = Matrix::zeros(2, 4);
        let out = graphconv_forward_once(&z, &w_mat, &w1, &w2);
        assert_eq!(out.data(), z.matmul(&w1).data());
    }

    #[test]
    fn graphconv_single_node_includes_self_loop() {
        let mut rng = stream(SEED, &[Tag::Label("gc-self")]);
        let z = Matrix::from_vec(1, 3, (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w_mat = Matrix::from_vec(1, 1, vec![1.0]);
        let w1 = Matrix::from_vec(3, 2, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w2 = Matrix::from_vec(3, 2, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let out = graphconv_forward_once(&z, &w_mat, &w1, &w2);
        let want = z.matmul(&w1).add(&z.matmul(&w2));
        assert_eq!(out.data(), want.data());
    }

    #[test]
    fn graphconv_equal_nodes_equal_weights_give_equal_outputs() {
        let row = vec![0.4, -0.2, 0.9];
        let z = Matrix::from_rows(&[row.clone(), row.clone(), row]);
        let w_mat = Matrix::filled(3, 3, 1.0);
        let mut rng = stream(SEED, &[Tag::Label("gc-sym")]);
        let w1 = Matrix::from_vec(3, 2, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w2 = Matrix::from_vec(3, 2, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let out = graphconv_forward_once(&z, &w_mat, &w1, &w2);
        for r in 1..3 {
            assert_eq!(out.row(0), out.row(r));
        }
    }

    /// With c = 0 and identity projections, the concat ablation collapses
    /// to the bare GAT pipeline.
    #[test]
    fn concat_fusion_with_identity_projection_reduces_to_gat_only() {
        let mut rng = stream(SEED, &[Tag::Label("concat-id")]);
        let (d_f, d_c, hidden) = (3, 2, 4);
        let mut params = init_params(Variant::AblationConcatFusion, d_f, d_c, hidden, &mut rng);
        for (name, m) in &mut params.entries {
            if name.starts_with("proj") && name.ends_with(".w") {
                let mut ident = Matrix::zeros(hidden + d_c, hidden);
                for i in 0..hidden {
                    ident.set(i, i, 1.0);
                }
                *m = ident;
            }
        }
        let mut sample = sample_for(Variant::AblationConcatFusion, &mut rng, d_f, d_c);
        sample.clinical_row = Matrix::zeros(1, d_c);
        sample.clinical_col = Matrix::zeros(d_c, 1);
        let got = predict_prob(Variant::AblationConcatFusion, &params, &sample).unwrap();

        // Reference: gat1 -> ReLU -> gat2 -> ReLU -> head, built directly.
        let mut g = ExprGraph::new();
        let l = sample.n_lesions();
        let z = g.input(sample.features.clone());
        let w_col = g.input(Matrix::from_vec(
            l * l,
            1,
            sample.weights.as_ref().unwrap().data().to_vec(),
        ));
        let mut h = z;
        for prefix in ["gat1", "gat2"] {
            let nodes = crate::model::GatNodes {
                theta_src: g.input(params.get(&format!("{prefix}.theta_src")).clone()),
                theta_dst: g.input(params.get(&format!("{prefix}.theta_dst")).clone()),
                theta_edge: g.input(params.get(&format!("{prefix}.theta_edge")).clone()),
                att: g.input(params.get(&format!("{prefix}.att")).clone()),
            };
            let (out, _) = gat_layer(&mut g, h, l, w_col, &nodes);
            h = g.relu(out);
        }
        let pooled = g.row_max_pool(h);
        let head_w = g.input(params.get("head.w").clone());
        let head_b = g.input(params.get("head.b").clone());
        let logit = g.matmul(pooled, head_w);
        let logit = g.add(logit, head_b);
        let prob = g.sigmoid(logit);
        let want = g.forward(prob).unwrap().scalar_value();
        assert_eq!(got, want);
    }

    #[test]
    fn every_baseline_passes_gradient_checks() {
        for variant in [
            Variant::MlpClinical,
            Variant::MlpImageAvg,
            Variant::MlpCombined,
            Variant::MilImage,
            Variant::GraphConvImage,
            Variant::AblationGraphConvCrossAtt,
            Variant::AblationConcatFusion,
        ] {
            // Redraw until the graph sits clear of every ReLU/max-pool
            // kink; finite differences are unreliable within the step.
            let (d_f, d_c, hidden) = (5, 4, 6);
            let mut checked = false;
            for attempt in 0..50u64 {
                let mut rng = stream(
                    SEED,
                    &[Tag::Label("bl-grad"), Tag::Label(variant.tag()), Tag::Index(attempt)],
                );
                let params = init_params(variant, d_f, d_c, hidden, &mut rng);
                let sample = sample_for(variant, &mut rng, d_f, d_c);
                let mut g = ExprGraph::new();
                let (prob, _) = build_prob(
                    &mut g,
                    variant,
                    &params,
                    &sample,
                    Mode::Eval,
                    0.0,
                    None,
                    None,
                )
                .unwrap();
                let loss = g.weighted_bce(prob, 1.0, 2.5);
                g.forward(loss).unwrap();
                if crate::autodiff::kink_margin(&g) < 5e-3 {
                    continue;
                }
                let report = check_gradients(&mut g, loss, 1e-5, 1e-4).unwrap();
                assert!(report.passed(), "{variant} attempt {attempt}:\n{report}");
                checked = true;
                break;
            }
            assert!(checked, "{variant}: no kink-safe draw found in 50 attempts");
        }
    }
}
