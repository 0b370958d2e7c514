//! The proposed network: two stacked (GATv2 -> cross-attention) blocks,
//! max-pool prediction head, weighted BCE loss — plus the training loop
//! shared with the baselines.
//!
//! Parameter matrices are stored in input x output orientation so every
//! forward product is `rows x cols` without transposes; this is the
//! transpose of the conventional "weights act from the left" notation but
//! parameterizes the same maps. All per-pair GATv2 terms are laid out as an
//! L^2-row matrix (row i*L+j = pair (i, j)) built with repeat/tile ops.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamState, DiffError, ExprGraph, NodeId};
use crate::baselines;
use crate::cohort::Cohort;
use crate::graph::{build_graph, GraphError, PopulationStats};
use crate::matrix::Matrix;
use crate::protocol::{balanced_subsets, roc_auc, ProtocolError};
use crate::rng::{stream, Tag};

/// LeakyReLU slope inside the GATv2 scoring function.
pub const GAT_LEAKY_SLOPE: f64 = 0.2;

/// Balanced subsets used for per-epoch validation scoring.
pub const VALIDATION_SUBSETS: usize = 5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid hyperparameters: {0}")]
    BadHyper(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{context}: {source}")]
    Diff {
        context: String,
        #[source]
        source: DiffError,
    },
    #[error("training aborted at epoch {epoch} on patient {patient_id}: {source}")]
    TrainingAborted {
        epoch: usize,
        patient_id: String,
        #[source]
        source: DiffError,
    },
    #[error("training split has no positive patients")]
    NoPositives,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Model/baseline selector. Tags are the CLI-facing names, and serialized
/// forms use the same tags so checkpoints and CLI arguments agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "crossatt")]
    CrossAtt,
    #[serde(rename = "mlp-clinical")]
    MlpClinical,
    #[serde(rename = "mlp-image-avg")]
    MlpImageAvg,
    #[serde(rename = "mlp-clinical+image-avg")]
    MlpCombined,
    #[serde(rename = "mil-image")]
    MilImage,
    #[serde(rename = "graphconv-image")]
    GraphConvImage,
    #[serde(rename = "ablation-graphconv-crossatt")]
    AblationGraphConvCrossAtt,
    #[serde(rename = "ablation-concat-fusion")]
    AblationConcatFusion,
}

impl Variant {
    pub fn all() -> [Variant; 8] {
        [
            Variant::CrossAtt,
            Variant::MlpClinical,
            Variant::MlpImageAvg,
            Variant::MlpCombined,
            Variant::MilImage,
            Variant::GraphConvImage,
            Variant::AblationGraphConvCrossAtt,
            Variant::AblationConcatFusion,
        ]
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Variant::CrossAtt => "crossatt",
            Variant::MlpClinical => "mlp-clinical",
            Variant::MlpImageAvg => "mlp-image-avg",
            Variant::MlpCombined => "mlp-clinical+image-avg",
            Variant::MilImage => "mil-image",
            Variant::GraphConvImage => "graphconv-image",
            Variant::AblationGraphConvCrossAtt => "ablation-graphconv-crossatt",
            Variant::AblationConcatFusion => "ablation-concat-fusion",
        }
    }

    /// Variants that consume the lesion graph (and hence the gamma axis).
    pub fn uses_graph(&self) -> bool {
        matches!(
            self,
            Variant::CrossAtt
                | Variant::GraphConvImage
                | Variant::AblationGraphConvCrossAtt
                | Variant::AblationConcatFusion
        )
    }

    /// Variants with a dropout slot on their message-passing blocks.
    pub fn uses_dropout(&self) -> bool {
        matches!(
            self,
            Variant::CrossAtt | Variant::AblationGraphConvCrossAtt | Variant::AblationConcatFusion
        )
    }

    /// Variants exporting cross-attention maps.
    pub fn has_cross_attention(&self) -> bool {
        matches!(self, Variant::CrossAtt | Variant::AblationGraphConvCrossAtt)
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::all()
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| {
                format!(
                    "unknown variant {s:?}; expected one of {}",
                    Variant::all().map(|v| v.tag()).join(", ")
                )
            })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    /// Hidden width: D_GAT for graph models, MLP/MIL hidden size otherwise.
    pub hidden: usize,
    /// Edge-kernel hyperparameter (graph variants only).
    pub gamma: f64,
    /// Dropout probability on message-passing block outputs.
    pub dropout: f64,
    pub epochs: usize,
}

impl Hyper {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ModelError::BadHyper(format!("lr = {}", self.lr)));
        }
        if self.hidden == 0 {
            return Err(ModelError::BadHyper("hidden = 0".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(ModelError::BadHyper(format!("gamma = {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadHyper(format!("dropout = {}", self.dropout)));
        }
        Ok(())
    }
}

/// Named parameter matrices in a fixed order (checkpoint format and the
/// pairing between graph nodes and Adam moments both rely on the order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub entries: Vec<(String, Matrix)>,
}

impl ParamSet {
    fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn get(&self, name: &str) -> &Matrix {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
            .1
    }

    pub fn matrices(&self) -> Vec<Matrix> {
        self.entries.iter().map(|(_, m)| m.clone()).collect()
    }

    pub fn set_matrices(&mut self, matrices: Vec<Matrix>) {
        assert_eq!(matrices.len(), self.entries.len());
        for (slot, m) in self.entries.iter_mut().zip(matrices) {
            slot.1 = m;
        }
    }
}

fn glorot(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect(),
    )
}

/// Builder helper shared with the baselines module.
pub(crate) struct ParamInit<'a> {
    pub rng: &'a mut ChaCha12Rng,
    pub set: ParamSet,
}

impl ParamInit<'_> {
    pub fn weight(&mut self, name: &str, rows: usize, cols: usize) {
        let m = glorot(self.rng, rows, cols);
        self.set.entries.push((name.to_string(), m));
    }

    pub fn bias(&mut self, name: &str, cols: usize) {
        self.set.entries.push((name.to_string(), Matrix::zeros(1, cols)));
    }
}

fn gat_param_names(init: &mut ParamInit, prefix: &str, d_in: usize, d_out: usize) {
    init.weight(&format!("{prefix}.theta_src"), d_in, d_out);
    init.weight(&format!("{prefix}.theta_dst"), d_in, d_out);
    init.weight(&format!("{prefix}.theta_edge"), 1, d_out);
    init.weight(&format!("{prefix}.att"), d_out, 1);
}

fn cross_attention_param_names(init: &mut ParamInit, prefix: &str, d_gat: usize, d_clin: usize) {
    init.weight(&format!("{prefix}.w_q"), d_gat, d_clin);
    // W^K is 1 x D_clin on paper; stored transposed so K^T = w_k_t * c_row.
    init.weight(&format!("{prefix}.w_k_t"), d_clin, 1);
    init.weight(&format!("{prefix}.w_v"), 1, d_gat);
}

/// Glorot-initialized (seeded) parameters for any variant.
pub fn init_params(
    variant: Variant,
    d_features: usize,
    d_clinical: usize,
    hidden: usize,
    rng: &mut ChaCha12Rng,
) -> ParamSet {
    let mut init = ParamInit {
        rng,
        set: ParamSet::new(),
    };
    match variant {
        Variant::CrossAtt => {
            gat_param_names(&mut init, "gat1", d_features, hidden);
            cross_attention_param_names(&mut init, "ca1", hidden, d_clinical);
            gat_param_names(&mut init, "gat2", hidden, hidden);
            cross_attention_param_names(&mut init, "ca2", hidden, d_clinical);
            init.weight("head.w", hidden, 1);
            init.bias("head.b", 1);
        }
        Variant::AblationGraphConvCrossAtt => {
            baselines::graphconv_param_names(&mut init, "gc1", d_features, hidden);
            cross_attention_param_names(&mut init, "ca1", hidden, d_clinical);
            baselines::graphconv_param_names(&mut init, "gc2", hidden, hidden);
            cross_attention_param_names(&mut init, "ca2", hidden, d_clinical);
            init.weight("head.w", hidden, 1);
            init.bias("head.b", 1);
        }
        Variant::AblationConcatFusion => {
            gat_param_names(&mut init, "gat1", d_features, hidden);
            init.weight("proj1.w", hidden + d_clinical, hidden);
            init.bias("proj1.b", hidden);
            gat_param_names(&mut init, "gat2", hidden, hidden);
            init.weight("proj2.w", hidden + d_clinical, hidden);
            init.bias("proj2.b", hidden);
            init.weight("head.w", hidden, 1);
            init.bias("head.b", 1);
        }
        _ => baselines::init_baseline_params(variant, d_features, d_clinical, hidden, &mut init),
    }
    init.set
}

/// One patient, preprocessed into the matrices every variant consumes.
///
/// Lesions are put into a canonical content order (sorted by centroid then
/// features) before packing, so any permutation of the input lesions
/// yields bit-identical matrices — this is what makes predictions exactly
/// permutation-invariant despite non-associative float summation.
#[derive(Debug, Clone)]
pub struct Sample {
    pub patient_id: String,
    pub label: f64,
    /// L x D_features, standardized, canonical row order.
    pub features: Matrix,
    /// L x L kernel weights (graph variants only).
    pub weights: Option<Matrix>,
    /// 1 x D_clin.
    pub clinical_row: Matrix,
    /// D_clin x 1 (same values as `clinical_row`).
    pub clinical_col: Matrix,
    /// 1 x D_features mean over lesions.
    pub image_avg: Matrix,
}

impl Sample {
    pub fn n_lesions(&self) -> usize {
        self.features.rows()
    }
}

fn lesion_sort_key(a: &crate::cohort::Lesion, b: &crate::cohort::Lesion) -> std::cmp::Ordering {
    for axis in 0..3 {
        match a.centroid[axis].total_cmp(&b.centroid[axis]) {
            std::cmp::Ordering::Equal => {}
            other => return other,
        }
    }
    for (x, y) in a.features.iter().zip(&b.features) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => {}
            other => return other,
        }
    }
    a.lesion_id.cmp(&b.lesion_id)
}

/// Preprocess a standardized, centroid-scaled cohort into samples.
/// `stats` must be provided for graph variants (weights are built here).
pub fn prepare_samples(
    cohort: &Cohort,
    stats: Option<&PopulationStats>,
) -> Result<Vec<Sample>, ModelError> {
    cohort
        .patients
        .iter()
        .map(|patient| {
            let mut patient = patient.clone();
            patient.lesions.sort_by(lesion_sort_key);
            let l = patient.lesions.len();
            let d = cohort.d_features;
            let mut features = Matrix::zeros(l, d);
            for (i, lesion) in patient.lesions.iter().enumerate() {
                features.data_mut()[i * d..(i + 1) * d].copy_from_slice(&lesion.features);
            }
            let weights = stats
                .map(|s| build_graph(&patient, s).map(|g| g.weights))
                .transpose()?;
            let mut image_avg = Matrix::zeros(1, d);
            for i in 0..l {
                for c in 0..d {
                    let v = image_avg.get(0, c) + features.get(i, c);
                    image_avg.set(0, c, v);
                }
            }
            image_avg = image_avg.scale(1.0 / l as f64);
            Ok(Sample {
                patient_id: patient.patient_id.clone(),
                label: patient.label as f64,
                features,
                weights,
                clinical_row: Matrix::row_vector(&patient.clinical),
                clinical_col: Matrix::col_vector(&patient.clinical),
                image_avg,
            })
        })
        .collect()
}

/// Train or eval mode for graph building; train mode samples dropout masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Attention matrices captured while building, for normalization checks
/// and the attention-export CSV.
#[derive(Debug, Default)]
pub struct Capture {
    /// (layer number, alpha node): GAT attention, L x L rows over neighbors.
    pub gat_alpha: Vec<(usize, NodeId)>,
    /// (layer number, A node): cross-attention, L x D_clin rows over
    /// clinical entries.
    pub cross_attention: Vec<(usize, NodeId)>,
}

/// Node ids of one GATv2 layer's parameters inside a graph.
pub(crate) struct GatNodes {
    pub theta_src: NodeId,
    pub theta_dst: NodeId,
    pub theta_edge: NodeId,
    pub att: NodeId,
}

/// score(i,j) = a^T LeakyReLU(Theta_src z_i + Theta_dst z_j + theta_edge w_ij)
/// over all ordered pairs; alpha = row-softmax; out = alpha (Z Theta_dst).
/// Returns (pre-activation output, alpha).
pub(crate) fn gat_layer(
    g: &mut ExprGraph,
    z: NodeId,
    l: usize,
    w_col: NodeId,
    p: &GatNodes,
) -> (NodeId, NodeId) {
    let s_src = g.matmul(z, p.theta_src);
    let s_dst = g.matmul(z, p.theta_dst);
    let src_rep = g.repeat_rows(s_src, l);
    let dst_til = g.tile_rows(s_dst, l);
    let edge = g.matmul(w_col, p.theta_edge);
    let pair = g.add(src_rep, dst_til);
    let pair = g.add(pair, edge);
    let act = g.leaky_relu(pair, GAT_LEAKY_SLOPE);
    let scores = g.matmul(act, p.att);
    let scores = g.reshape(scores, l, l);
    let alpha = g.row_softmax(scores);
    let out = g.matmul(alpha, s_dst);
    (out, alpha)
}

pub(crate) struct CrossAttentionNodes {
    pub w_q: NodeId,
    pub w_k_t: NodeId,
    pub w_v: NodeId,
}

/// Q = Z W^Q; K^T = W^K^T c_row; A = row-softmax(Q K^T / sqrt(D_clin));
/// V = c_col W^V; out = A V. Returns (out, A).
pub(crate) fn cross_attention(
    g: &mut ExprGraph,
    z: NodeId,
    c_row: NodeId,
    c_col: NodeId,
    p: &CrossAttentionNodes,
    d_clinical: usize,
) -> (NodeId, NodeId) {
    let q = g.matmul(z, p.w_q);
    let k_t = g.matmul(p.w_k_t, c_row);
    let logits = g.matmul(q, k_t);
    let scaled = g.scale(logits, 1.0 / (d_clinical as f64).sqrt());
    let a = g.row_softmax(scaled);
    let v = g.matmul(c_col, p.w_v);
    let out = g.matmul(a, v);
    (out, a)
}

/// Inverted-scale dropout mask: entries are 0 or 1/(1-p).
pub(crate) fn sample_dropout_mask(
    rng: &mut ChaCha12Rng,
    rows: usize,
    cols: usize,
    p: f64,
) -> Matrix {
    let keep = 1.0 - p;
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                if rng.gen_range(0.0..1.0) < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect(),
    )
}

/// Message-passing block output -> dropout (train mode) -> ReLU.
pub(crate) fn block_activation(
    g: &mut ExprGraph,
    out: NodeId,
    rows: usize,
    cols: usize,
    mode: Mode,
    dropout: f64,
    rng: &mut Option<&mut ChaCha12Rng>,
) -> NodeId {
    let dropped = if mode == Mode::Train && dropout > 0.0 {
        let rng = rng.as_mut().expect("train mode requires a dropout rng");
        let mask = sample_dropout_mask(rng, rows, cols, dropout);
        g.dropout_mask(out, mask)
    } else {
        out
    };
    g.relu(dropped)
}

/// Everything build_prob needs besides the sample itself.
pub(crate) struct BuildCtx<'a> {
    pub params: Vec<NodeId>,
    pub names: Vec<&'a str>,
    pub mode: Mode,
    pub dropout: f64,
    pub hidden: usize,
}

impl BuildCtx<'_> {
    pub fn node(&self, name: &str) -> NodeId {
        self.params[self
            .names
            .iter()
            .position(|n| *n == name)
            .unwrap_or_else(|| panic!("no parameter node named {name}"))]
    }

    pub fn gat(&self, prefix: &str) -> GatNodes {
        GatNodes {
            theta_src: self.node(&format!("{prefix}.theta_src")),
            theta_dst: self.node(&format!("{prefix}.theta_dst")),
            theta_edge: self.node(&format!("{prefix}.theta_edge")),
            att: self.node(&format!("{prefix}.att")),
        }
    }

    pub fn cross(&self, prefix: &str) -> CrossAttentionNodes {
        CrossAttentionNodes {
            w_q: self.node(&format!("{prefix}.w_q")),
            w_k_t: self.node(&format!("{prefix}.w_k_t")),
            w_v: self.node(&format!("{prefix}.w_v")),
        }
    }
}

fn flatten_weights(weights: &Matrix) -> Matrix {
    Matrix::from_vec(weights.len(), 1, weights.data().to_vec())
}

/// Build the probability node for `variant` on one sample. Returns the
/// node and the parameter nodes in `ParamSet` order.
pub fn build_prob(
    g: &mut ExprGraph,
    variant: Variant,
    params: &ParamSet,
    sample: &Sample,
    mode: Mode,
    dropout: f64,
    mut rng: Option<&mut ChaCha12Rng>,
    mut capture: Option<&mut Capture>,
) -> Result<(NodeId, Vec<NodeId>), ModelError> {
    let hidden = match variant {
        Variant::GraphConvImage => params.get("gc1.w1").cols(),
        Variant::MilImage => params.get("lesion.w").cols(),
        Variant::MlpClinical | Variant::MlpImageAvg | Variant::MlpCombined => {
            params.get("l1.w").cols()
        }
        _ => params.get("head.w").rows(),
    };
    let param_nodes: Vec<NodeId> = params
        .entries
        .iter()
        .map(|(name, m)| g.param_named(m.clone(), name))
        .collect();
    let ctx = BuildCtx {
        params: param_nodes.clone(),
        names: params.entries.iter().map(|(n, _)| n.as_str()).collect(),
        mode,
        dropout,
        hidden,
    };
    let l = sample.n_lesions();
    let d_clin = sample.clinical_row.cols();

    let weights = |g: &mut ExprGraph| -> Result<(NodeId, NodeId), ModelError> {
        let w = sample.weights.as_ref().ok_or_else(|| {
            ModelError::BadHyper(format!(
                "variant {variant} needs lesion graphs; prepare samples with population stats"
            ))
        })?;
        let w_mat = g.input(w.clone());
        let w_col = g.input(flatten_weights(w));
        Ok((w_mat, w_col))
    };

    let prob = match variant {
        Variant::CrossAtt => {
            let (_, w_col) = weights(g)?;
            let z = g.input(sample.features.clone());
            let c_row = g.input(sample.clinical_row.clone());
            let c_col = g.input(sample.clinical_col.clone());
            let mut h = z;
            for (layer, (gat_prefix, ca_prefix)) in [("gat1", "ca1"), ("gat2", "ca2")]
                .into_iter()
                .enumerate()
            {
                let (gat_out, alpha) = gat_layer(g, h, l, w_col, &ctx.gat(gat_prefix));
                let z_gat = block_activation(g, gat_out, l, hidden, mode, dropout, &mut rng);
                let (ca_out, a) =
                    cross_attention(g, z_gat, c_row, c_col, &ctx.cross(ca_prefix), d_clin);
                if let Some(cap) = capture.as_deref_mut() {
                    cap.gat_alpha.push((layer + 1, alpha));
                    cap.cross_attention.push((layer + 1, a));
                }
                h = ca_out;
            }
            let pooled = g.row_max_pool(h);
            let logit = g.matmul(pooled, ctx.node("head.w"));
            let logit = g.add(logit, ctx.node("head.b"));
            g.sigmoid(logit)
        }
        Variant::AblationGraphConvCrossAtt => {
            let (w_mat, _) = weights(g)?;
            baselines::build_graphconv_crossatt(g, sample, &ctx, &mut rng, &mut capture, w_mat)
        }
        Variant::AblationConcatFusion => {
            let (_, w_col) = weights(g)?;
            baselines::build_concat_fusion(g, sample, &ctx, &mut rng, &mut capture, w_col)
        }
        Variant::GraphConvImage => {
            let (w_mat, _) = weights(g)?;
            baselines::build_graphconv(g, sample, &ctx, w_mat)
        }
        Variant::MilImage => baselines::build_mil(g, sample, &ctx),
        Variant::MlpClinical | Variant::MlpImageAvg | Variant::MlpCombined => {
            baselines::build_mlp(g, variant, sample, &ctx)
        }
    };
    Ok((prob, param_nodes))
}

/// Eval-mode probability for one sample.
pub fn predict_prob(
    variant: Variant,
    params: &ParamSet,
    sample: &Sample,
) -> Result<f64, ModelError> {
    let mut g = ExprGraph::new();
    let (prob, _) = build_prob(&mut g, variant, params, sample, Mode::Eval, 0.0, None, None)?;
    let out = g.forward(prob).map_err(|source| ModelError::Diff {
        context: format!("predicting patient {}", sample.patient_id),
        source,
    })?;
    Ok(out.scalar_value())
}

/// Eval-mode probability plus the cross-attention maps (layer, L x D_clin).
pub fn predict_with_attention(
    variant: Variant,
    params: &ParamSet,
    sample: &Sample,
) -> Result<(f64, Vec<(usize, Matrix)>), ModelError> {
    let mut g = ExprGraph::new();
    let mut capture = Capture::default();
    let (prob, _) = build_prob(
        &mut g,
        variant,
        params,
        sample,
        Mode::Eval,
        0.0,
        None,
        Some(&mut capture),
    )?;
    let out = g.forward(prob).map_err(|source| ModelError::Diff {
        context: format!("predicting patient {}", sample.patient_id),
        source,
    })?;
    let maps = capture
        .cross_attention
        .iter()
        .map(|(layer, node)| (*layer, g.value(*node).expect("forward ran").clone()))
        .collect();
    Ok((out.scalar_value(), maps))
}

/// Direct weighted BCE evaluation (mirrors the graph op).
pub fn weighted_bce_value(pred: f64, label: f64, pos_weight: f64) -> f64 {
    let p = pred.clamp(1e-12, 1.0 - 1e-12);
    -(pos_weight * label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub best_params: ParamSet,
    pub best_val_auc: f64,
    pub best_epoch: usize,
    pub pos_weight: f64,
    pub metrics: Vec<EpochMetrics>,
}

/// Mean balanced-subset ROC AUC of eval-mode predictions on `samples`.
pub fn balanced_auc(
    variant: Variant,
    params: &ParamSet,
    samples: &[Sample],
    k: usize,
    rng: &mut ChaCha12Rng,
) -> Result<f64, ModelError> {
    let scores: Vec<f64> = samples
        .iter()
        .map(|s| predict_prob(variant, params, s))
        .collect::<Result<_, _>>()?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label as u8).collect();
    let subsets = balanced_subsets(&labels, k, rng)?;
    let mut total = 0.0;
    for subset in &subsets {
        let sub_scores: Vec<f64> = subset.iter().map(|&i| scores[i]).collect();
        let sub_labels: Vec<u8> = subset.iter().map(|&i| labels[i]).collect();
        total += roc_auc(&sub_scores, &sub_labels)?;
    }
    Ok(total / subsets.len() as f64)
}

/// Full training loop: per-epoch seeded-shuffle passes of per-patient
/// forward/backward/Adam steps, per-epoch balanced validation AUC, and a
/// snapshot of the best-validation parameters (ties -> earliest epoch).
///
/// `train_seed` drives initialization, shuffling, and dropout;
/// `val_seed` drives the per-epoch validation subsets and is shared across
/// grid points of one repeat so their selection scores are comparable.
pub fn train(
    variant: Variant,
    train_samples: &[Sample],
    val_samples: &[Sample],
    d_features: usize,
    d_clinical: usize,
    hyper: &Hyper,
    train_seed: u64,
    val_seed: u64,
) -> Result<TrainResult, ModelError> {
    hyper.validate()?;
    let n_pos = train_samples.iter().filter(|s| s.label == 1.0).count();
    let n_neg = train_samples.len() - n_pos;
    if n_pos == 0 {
        return Err(ModelError::NoPositives);
    }
    let pos_weight = n_neg as f64 / n_pos as f64;

    let mut init_rng = stream(train_seed, &[Tag::Label("init")]);
    let mut params = init_params(variant, d_features, d_clinical, hyper.hidden, &mut init_rng);

    let val_auc_at = |epoch: usize, params: &ParamSet| -> Result<f64, ModelError> {
        let mut rng = stream(val_seed, &[Tag::Label("val-subsets"), Tag::Index(epoch as u64)]);
        balanced_auc(variant, params, val_samples, VALIDATION_SUBSETS, &mut rng)
    };

    let mut metrics = Vec::with_capacity(hyper.epochs + 1);
    let initial_auc = val_auc_at(0, &params)?;
    metrics.push(EpochMetrics {
        epoch: 0,
        mean_train_loss: f64::NAN,
        val_auc: initial_auc,
    });
    let mut best_params = params.clone();
    let mut best_val_auc = initial_auc;
    let mut best_epoch = 0;

    let mut adam = AdamState::new(hyper.lr, &params.matrices());
    let mut matrices = params.matrices();
    for epoch in 1..=hyper.epochs {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        let mut shuffle_rng = stream(
            train_seed,
            &[Tag::Label("shuffle"), Tag::Index(epoch as u64)],
        );
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.gen_range(0..=i));
        }
        let mut dropout_rng = stream(
            train_seed,
            &[Tag::Label("dropout"), Tag::Index(epoch as u64)],
        );

        let mut loss_sum = 0.0;
        for &idx in &order {
            let sample = &train_samples[idx];
            params.set_matrices(matrices.clone());
            let mut g = ExprGraph::new();
            let (prob, param_nodes) = build_prob(
                &mut g,
                variant,
                &params,
                sample,
                Mode::Train,
                hyper.dropout,
                Some(&mut dropout_rng),
                None,
            )?;
            let loss = g.weighted_bce(prob, sample.label, pos_weight);
            let abort = |source: DiffError| ModelError::TrainingAborted {
                epoch,
                patient_id: sample.patient_id.clone(),
                source,
            };
            loss_sum += g.forward(loss).map_err(abort)?.scalar_value();
            let grads = g.backward(loss).map_err(abort)?;
            let grad_list: Vec<Matrix> = param_nodes
                .iter()
                .map(|id| grads[id].clone())
                .collect();
            adam.step(&mut matrices, &grad_list).map_err(abort)?;
        }
        params.set_matrices(matrices.clone());

        let val_auc = val_auc_at(epoch, &params)?;
        metrics.push(EpochMetrics {
            epoch,
            mean_train_loss: loss_sum / train_samples.len() as f64,
            val_auc,
        });
        if val_auc > best_val_auc {
            best_val_auc = val_auc;
            best_epoch = epoch;
            best_params = params.clone();
        }
    }

    Ok(TrainResult {
        best_params,
        best_val_auc,
        best_epoch,
        pos_weight,
        metrics,
    })
}

#[cfg(test)]
mod tests;
