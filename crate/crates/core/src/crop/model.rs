//! Candidate scoring network and its training loss.

use ndarray::{s, Array1, Array2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::crop::candidates::CropCandidate;
use crate::crop::detection::{detect_objects, Detection, DetectionProvider, Rect};
use crate::crop::graph::{
    adjacency, adjacency_backward, appearance_similarity, appearance_similarity_backward, feature_aggregation_gate,
    feature_aggregation_gate_backward, graph_self_attention, graph_self_attention_backward, spatial_matrix,
    spatial_matrix_backward, AttentionParams, CropGraph, FagMode, Gate, SimilarityParams, SpatialParams,
};
use crate::error::{Result, VqaError};
use crate::nn::{self, SeededRng};
use crate::optim::Optimizer;
use crate::params::{flat, flat_mut, standardize, Gradients, ParamKind, ParamMeta, Parameterized};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropModelConfig {
    /// Node feature width `d`.
    pub node_dim: usize,
    #[serde(default = "CropModelConfig::default_spatial_dim")]
    pub spatial_dim: usize,
    #[serde(default = "CropModelConfig::default_hidden_dim")]
    pub hidden_dim: usize,
    /// Maximum number of object nodes `N`.
    pub top_n: usize,
    #[serde(default)]
    pub fag_mode: FagMode,
    /// `+1` uses `exp(+M_p)` in the adjacency, `-1` uses `exp(-M_p)`.
    #[serde(default = "CropModelConfig::default_sign")]
    pub spatial_exp_sign: i8,
}

impl CropModelConfig {
    fn default_spatial_dim() -> usize {
        4
    }
    fn default_hidden_dim() -> usize {
        16
    }
    fn default_sign() -> i8 {
        1
    }

    pub fn new(node_dim: usize, top_n: usize) -> Self {
        Self {
            node_dim,
            spatial_dim: Self::default_spatial_dim(),
            hidden_dim: Self::default_hidden_dim(),
            top_n,
            fag_mode: FagMode::default(),
            spatial_exp_sign: Self::default_sign(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.node_dim == 0 || self.spatial_dim == 0 || self.hidden_dim == 0 || self.top_n == 0 {
            return Err(VqaError::Config("crop dimensions and top_n must be positive".into()));
        }
        if self.spatial_exp_sign != 1 && self.spatial_exp_sign != -1 {
            return Err(VqaError::Config(format!(
                "spatial_exp_sign must be +1 or -1, got {}",
                self.spatial_exp_sign
            )));
        }
        Ok(())
    }
}

/// Two-layer MLP mapping the pooled node features to a score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: Array1<f64>,
}

/// Nodes of one graph: objects first, the crop candidate last.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphNodeSet {
    pub features: Array2<f64>,
    /// Box centres in pixels, `[n, 2]`.
    pub centers: Array2<f64>,
    pub boxes: Vec<Rect>,
    pub image_size: (usize, usize),
}

impl GraphNodeSet {
    pub fn new(objects: &[Detection], candidate: Rect, candidate_feature: Vec<f64>, image_size: (usize, usize)) -> Result<Self> {
        let (w, h) = image_size;
        let d = candidate_feature.len();
        let n = objects.len() + 1;
        let mut features = Array2::zeros((n, d));
        let mut centers = Array2::zeros((n, 2));
        let mut boxes = Vec::with_capacity(n);
        let rows = objects
            .iter()
            .map(|o| (o.bbox, o.feature.as_slice()))
            .chain(std::iter::once((candidate, candidate_feature.as_slice())));
        for (i, (bbox, feat)) in rows.enumerate() {
            if feat.len() != d {
                return Err(VqaError::shape("node feature", d, feat.len()));
            }
            if !bbox.within(w, h) {
                return Err(VqaError::InvalidArgument(format!("box {:?} outside {w}x{h} image", bbox.to_array())));
            }
            features.row_mut(i).assign(&Array1::from(feat.to_vec()));
            let (cx, cy) = bbox.center();
            centers[[i, 0]] = cx;
            centers[[i, 1]] = cy;
            boxes.push(bbox);
        }
        Ok(Self {
            features,
            centers,
            boxes,
            image_size,
        })
    }

    pub fn object_count(&self) -> usize {
        self.features.nrows() - 1
    }

    /// Centres divided by image width and height.
    pub fn positions(&self) -> Array2<f64> {
        let (w, h) = self.image_size;
        let mut p = self.centers.clone();
        p.column_mut(0).mapv_inplace(|v| v / w as f64);
        p.column_mut(1).mapv_inplace(|v| v / h as f64);
        p
    }
}

macro_rules! s2c_params {
    ($self:expr, $f:ident) => {
        vec![
            $f(&$self.similarity.phi_w),
            $f(&$self.similarity.phi_b),
            $f(&$self.similarity.psi_w),
            $f(&$self.similarity.psi_b),
            $f(&$self.spatial.m_w),
            $f(&$self.spatial.m_b),
            $f(&$self.spatial.n_w),
            $f(&$self.spatial.n_b),
            $f(&$self.gate),
            $f(&$self.attention.q_w),
            $f(&$self.attention.k_w),
            $f(&$self.attention.v_w),
            $f(&$self.mlp.w1),
            $f(&$self.mlp.b1),
            $f(&$self.mlp.w2),
            $f(&$self.mlp.b2),
        ]
    };
}

macro_rules! s2c_params_mut {
    ($self:expr, $f:ident) => {
        vec![
            $f(&mut $self.similarity.phi_w),
            $f(&mut $self.similarity.phi_b),
            $f(&mut $self.similarity.psi_w),
            $f(&mut $self.similarity.psi_b),
            $f(&mut $self.spatial.m_w),
            $f(&mut $self.spatial.m_b),
            $f(&mut $self.spatial.n_w),
            $f(&mut $self.spatial.n_b),
            $f(&mut $self.gate),
            $f(&mut $self.attention.q_w),
            $f(&mut $self.attention.k_w),
            $f(&mut $self.attention.v_w),
            $f(&mut $self.mlp.w1),
            $f(&mut $self.mlp.b1),
            $f(&mut $self.mlp.w2),
            $f(&mut $self.mlp.b2),
        ]
    };
}

/// Candidate scorer: graph construction, aggregation gate, graph-aware
/// attention, mean pooling and the score MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S2cNet {
    pub config: CropModelConfig,
    pub similarity: SimilarityParams,
    pub spatial: SpatialParams,
    /// `Z` with `top_n + 1` rows (hadamard) or `W` of shape `[d, d]` (projection).
    pub gate: Array2<f64>,
    pub attention: AttentionParams,
    pub mlp: ScoreMlp,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ScoreTrace {
    pub positions: Array2<f64>,
    pub graph: CropGraph,
    pub gate_rows: Array2<f64>,
    pub aggregated: Array2<f64>,
    pub attention_weights: Array2<f64>,
    pub attended: Array2<f64>,
    pub pooled: Array1<f64>,
    pub hidden_pre: Array1<f64>,
    pub score: f64,
}

/// Gradients of the scalar score.
#[derive(Debug, Clone)]
pub struct S2cNetGrads {
    pub features: Array2<f64>,
    pub params: S2cNet,
}

impl S2cNet {
    pub fn new(config: CropModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let d = config.node_dim;
        let gate = match config.fag_mode {
            FagMode::Hadamard => Array2::from_shape_fn((config.top_n + 1, d), |_| 1.0)
                + nn::normal_matrix(config.top_n + 1, d, 0.1, rng),
            FagMode::Projection => Array2::eye(d) + nn::normal_matrix(d, d, 0.1, rng),
        };
        Ok(Self {
            similarity: SimilarityParams::init(d, rng),
            spatial: SpatialParams::init(config.spatial_dim, rng),
            gate,
            attention: AttentionParams::init(d, rng),
            mlp: ScoreMlp {
                w1: nn::he_matrix(d, config.hidden_dim, rng),
                b1: Array1::zeros(config.hidden_dim),
                w2: nn::normal_vector(config.hidden_dim, (1.0 / config.hidden_dim as f64).sqrt(), rng),
                b2: Array1::zeros(1),
            },
            config,
        })
    }

    fn sign(&self) -> f64 {
        self.config.spatial_exp_sign as f64
    }

    fn zeros_like(&self) -> S2cNet {
        let z2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        let z1 = |a: &Array1<f64>| Array1::zeros(a.raw_dim());
        S2cNet {
            config: self.config.clone(),
            similarity: SimilarityParams {
                phi_w: z2(&self.similarity.phi_w),
                phi_b: z1(&self.similarity.phi_b),
                psi_w: z2(&self.similarity.psi_w),
                psi_b: z1(&self.similarity.psi_b),
            },
            spatial: SpatialParams {
                m_w: z2(&self.spatial.m_w),
                m_b: z1(&self.spatial.m_b),
                n_w: z2(&self.spatial.n_w),
                n_b: z1(&self.spatial.n_b),
            },
            gate: z2(&self.gate),
            attention: AttentionParams {
                q_w: z2(&self.attention.q_w),
                k_w: z2(&self.attention.k_w),
                v_w: z2(&self.attention.v_w),
            },
            mlp: ScoreMlp {
                w1: z2(&self.mlp.w1),
                b1: z1(&self.mlp.b1),
                w2: z1(&self.mlp.w2),
                b2: z1(&self.mlp.b2),
            },
        }
    }

    /// Rows of `Z` used by a graph with `objects` object nodes: the first
    /// `objects` rows plus the reserved candidate row.
    fn gate_rows(&self, objects: usize) -> Result<Array2<f64>> {
        match self.config.fag_mode {
            FagMode::Projection => Ok(self.gate.clone()),
            FagMode::Hadamard => {
                if objects > self.config.top_n {
                    return Err(VqaError::InvalidArgument(format!(
                        "{objects} object nodes exceed top_n = {}",
                        self.config.top_n
                    )));
                }
                let mut rows = Array2::zeros((objects + 1, self.gate.ncols()));
                rows.slice_mut(s![..objects, ..]).assign(&self.gate.slice(s![..objects, ..]));
                rows.row_mut(objects).assign(&self.gate.row(self.config.top_n));
                Ok(rows)
            }
        }
    }

    fn gate_ref<'a>(&self, rows: &'a Array2<f64>) -> Gate<'a> {
        match self.config.fag_mode {
            FagMode::Hadamard => Gate::Hadamard(rows),
            FagMode::Projection => Gate::Projection(rows),
        }
    }

    pub fn build_graph(&self, nodes: &GraphNodeSet) -> Result<CropGraph> {
        let m_a = appearance_similarity(&nodes.features, &self.similarity)?;
        let m_p = spatial_matrix(&nodes.positions(), &self.spatial)?;
        let a = adjacency(&m_a, &m_p, self.sign())?;
        Ok(CropGraph { m_a, m_p, a })
    }

    pub fn forward(&self, nodes: &GraphNodeSet) -> Result<ScoreTrace> {
        if nodes.features.ncols() != self.config.node_dim {
            return Err(VqaError::shape("crop node features", self.config.node_dim, nodes.features.ncols()));
        }
        let graph = self.build_graph(nodes)?;
        let gate_rows = self.gate_rows(nodes.object_count())?;
        let aggregated = feature_aggregation_gate(&graph.a, &nodes.features, self.gate_ref(&gate_rows))?;
        let att = graph_self_attention(&aggregated, &nodes.features, &graph.m_a, &graph.m_p, &self.attention)?;
        let pooled = att.out.mean_axis(Axis(0)).expect("at least one node");
        let hidden_pre = pooled.dot(&self.mlp.w1) + &self.mlp.b1;
        let score = hidden_pre.mapv(nn::relu).dot(&self.mlp.w2) + self.mlp.b2[0];
        if !score.is_finite() {
            return Err(VqaError::NonFinite {
                context: "crop score".into(),
            });
        }
        Ok(ScoreTrace {
            positions: nodes.positions(),
            graph,
            gate_rows,
            aggregated,
            attention_weights: att.weights,
            attended: att.out,
            pooled,
            hidden_pre,
            score,
        })
    }

    pub fn score(&self, nodes: &GraphNodeSet) -> Result<f64> {
        Ok(self.forward(nodes)?.score)
    }

    /// Gradients of `d_score * score` with respect to node features and all parameters.
    pub fn backward(&self, nodes: &GraphNodeSet, trace: &ScoreTrace, d_score: f64) -> S2cNetGrads {
        let x = &nodes.features;
        let n = x.nrows() as f64;
        let mut grads = self.zeros_like();

        let hidden = trace.hidden_pre.mapv(nn::relu);
        grads.mlp.b2[0] = d_score;
        grads.mlp.w2 = &hidden * d_score;
        let d_hidden_pre = Array1::from_shape_fn(hidden.len(), |k| {
            if trace.hidden_pre[k] > 0.0 {
                d_score * self.mlp.w2[k]
            } else {
                0.0
            }
        });
        grads.mlp.b1 = d_hidden_pre.clone();
        grads.mlp.w1 = trace
            .pooled
            .view()
            .insert_axis(Axis(1))
            .dot(&d_hidden_pre.view().insert_axis(Axis(0)));
        let d_pooled = self.mlp.w1.dot(&d_hidden_pre);
        let d_attended = Array2::from_shape_fn(trace.attended.raw_dim(), |(_, j)| d_pooled[j] / n);

        let att = graph_self_attention_backward(&trace.aggregated, x, &self.attention, &trace.attention_weights, &d_attended);
        grads.attention = att.params;
        let mut d_x = att.x;
        let mut d_ma = att.m_a;
        let mut d_mp = att.m_p;

        let gate = feature_aggregation_gate_backward(&trace.graph.a, x, self.gate_ref(&trace.gate_rows), &att.x_query);
        d_x += &gate.x;
        match self.config.fag_mode {
            FagMode::Projection => grads.gate = gate.gate,
            FagMode::Hadamard => {
                let objects = nodes.object_count();
                grads
                    .gate
                    .slice_mut(s![..objects, ..])
                    .assign(&gate.gate.slice(s![..objects, ..]));
                grads.gate.row_mut(self.config.top_n).assign(&gate.gate.row(objects));
            }
        }

        let (adj_ma, adj_mp) = adjacency_backward(&trace.graph.m_a, &trace.graph.m_p, self.sign(), &trace.graph.a, &gate.a);
        d_ma += &adj_ma;
        d_mp += &adj_mp;

        let sim = appearance_similarity_backward(x, &self.similarity, &d_ma);
        d_x += &sim.x;
        grads.similarity = sim.params;
        grads.spatial = spatial_matrix_backward(&trace.positions, &self.spatial, &d_mp);
        s2c_params_mut!(grads, standardize);

        S2cNetGrads { features: d_x, params: grads }
    }
}

const S2C_NAMES: [(&str, ParamKind); 16] = [
    ("similarity.phi.weight", ParamKind::Weight),
    ("similarity.phi.bias", ParamKind::Bias),
    ("similarity.psi.weight", ParamKind::Weight),
    ("similarity.psi.bias", ParamKind::Bias),
    ("spatial.m.weight", ParamKind::Weight),
    ("spatial.m.bias", ParamKind::Bias),
    ("spatial.n.weight", ParamKind::Weight),
    ("spatial.n.bias", ParamKind::Bias),
    ("gate.weight", ParamKind::Weight),
    ("attention.q.weight", ParamKind::Weight),
    ("attention.k.weight", ParamKind::Weight),
    ("attention.v.weight", ParamKind::Weight),
    ("mlp.hidden.weight", ParamKind::Weight),
    ("mlp.hidden.bias", ParamKind::Bias),
    ("mlp.out.weight", ParamKind::Weight),
    ("mlp.out.bias", ParamKind::Bias),
];

impl Parameterized for S2cNet {
    fn param_meta(&self) -> Vec<ParamMeta> {
        S2C_NAMES
            .iter()
            .zip(self.param_slices())
            .map(|(&(name, kind), s)| ParamMeta {
                name: name.to_string(),
                kind,
                len: s.len(),
            })
            .collect()
    }

    fn param_slices(&self) -> Vec<&[f64]> {
        s2c_params!(self, flat)
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        s2c_params_mut!(self, flat_mut)
    }
}

/// One node set per candidate, sharing the image's detections.
pub fn build_node_sets(
    image: ArrayView3<'_, f32>,
    candidates: &[Rect],
    detector: &dyn DetectionProvider,
    top_n: usize,
) -> Result<Vec<GraphNodeSet>> {
    if candidates.is_empty() {
        return Err(VqaError::Empty("no crop candidates"));
    }
    let (h, w, _) = image.dim();
    let objects = detect_objects(image, detector, top_n)?;
    candidates
        .iter()
        .map(|&c| GraphNodeSet::new(&objects, c, detector.region_feature(image, &c)?, (w, h)))
        .collect()
}

/// Score every candidate of one image.
pub fn score_candidates(
    image: ArrayView3<'_, f32>,
    candidates: &[Rect],
    detector: &dyn DetectionProvider,
    model: &S2cNet,
) -> Result<Vec<CropCandidate>> {
    build_node_sets(image, candidates, detector, model.config.top_n)?
        .iter()
        .zip(candidates)
        .map(|(nodes, &bbox)| Ok(CropCandidate { bbox, score: model.score(nodes)? }))
        .collect()
}

pub const RANKING_MARGIN: f64 = 0.1;
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropLoss {
    pub smooth_l1: f64,
    pub ranking: f64,
    pub total: f64,
}

fn smooth_l1(r: f64) -> (f64, f64) {
    if r.abs() < SMOOTH_L1_BETA {
        (0.5 * r * r / SMOOTH_L1_BETA, r / SMOOTH_L1_BETA)
    } else {
        (r.abs() - 0.5 * SMOOTH_L1_BETA, r.signum())
    }
}

/// Weighted smooth-L1 (weight `1 + |t - mean(t)|`) plus a pairwise hinge
/// ranking term averaged over pairs with strictly ordered targets. Returns the
/// loss and its gradient with respect to `pred`.
pub fn crop_train_loss(pred: &[f64], target: &[f64]) -> Result<(CropLoss, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(VqaError::shape("crop loss inputs", target.len(), pred.len()));
    }
    if pred.len() < 2 {
        return Err(VqaError::InvalidArgument("crop ranking loss needs at least two candidates".into()));
    }
    let n = pred.len() as f64;
    let mean_t = target.iter().sum::<f64>() / n;
    let mut grad = vec![0.0; pred.len()];
    let mut sl1 = 0.0;
    for (i, (&p, &t)) in pred.iter().zip(target).enumerate() {
        let w = 1.0 + (t - mean_t).abs();
        let (v, d) = smooth_l1(p - t);
        sl1 += w * v / n;
        grad[i] += w * d / n;
    }
    let mut pairs = 0usize;
    let mut hinge = Vec::new();
    for i in 0..pred.len() {
        for j in 0..pred.len() {
            if target[i] > target[j] {
                pairs += 1;
                let gap = RANKING_MARGIN - (pred[i] - pred[j]);
                if gap > 0.0 {
                    hinge.push((i, j, gap));
                }
            }
        }
    }
    let mut ranking = 0.0;
    for &(i, j, gap) in &hinge {
        ranking += gap / pairs as f64;
        grad[i] -= 1.0 / pairs as f64;
        grad[j] += 1.0 / pairs as f64;
    }
    Ok((
        CropLoss {
            smooth_l1: sl1,
            ranking,
            total: sl1 + ranking,
        },
        grad,
    ))
}

/// A training image: one node set per candidate and their target scores.
#[derive(Debug, Clone)]
pub struct CropExample {
    pub node_sets: Vec<GraphNodeSet>,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropTrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Also update graph parameters, not only the score MLP.
    pub train_graph: bool,
}

impl Default for CropTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 60,
            learning_rate: 0.01,
            train_graph: false,
        }
    }
}

/// Fit the scorer on examples; returns the mean loss per epoch.
pub fn train_crop_head(
    model: &mut S2cNet,
    examples: &[CropExample],
    opts: &CropTrainOptions,
    optimizer: &mut dyn Optimizer,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(VqaError::Empty("no crop training examples"));
    }
    let meta = model.param_meta();
    let trainable: Vec<bool> = meta
        .iter()
        .map(|m| opts.train_graph || m.name.starts_with("mlp."))
        .collect();
    let mut history = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        let mut epoch_loss = 0.0;
        for ex in examples {
            let traces = ex
                .node_sets
                .iter()
                .map(|nodes| model.forward(nodes))
                .collect::<Result<Vec<_>>>()?;
            let pred: Vec<f64> = traces.iter().map(|t| t.score).collect();
            let (loss, d_pred) = crop_train_loss(&pred, &ex.targets)?;
            epoch_loss += loss.total / examples.len() as f64;
            let mut total: Gradients = meta.iter().map(|m| vec![0.0; m.len]).collect();
            for ((nodes, trace), &d) in ex.node_sets.iter().zip(&traces).zip(&d_pred) {
                let g = model.backward(nodes, trace, d);
                for (acc, part) in total.iter_mut().zip(g.params.param_slices()) {
                    acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
                }
            }
            for (g, &keep) in total.iter_mut().zip(&trainable) {
                if !keep {
                    g.iter_mut().for_each(|v| *v = 0.0);
                }
            }
            optimizer.step(model.param_slices_mut(), &total, opts.learning_rate);
        }
        history.push(epoch_loss);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crop::detection::{RegionFeaturizer, StubDetector};
    use ndarray::Array3;

    fn model(mode: FagMode) -> S2cNet {
        let mut cfg = CropModelConfig::new(6, 3);
        cfg.fag_mode = mode;
        S2cNet::new(cfg, &mut nn::seeded_rng(5)).unwrap()
    }

    fn image() -> Array3<f32> {
        Array3::from_shape_fn((16, 16, 3), |(y, x, c)| ((y * 3 + x * 5 + c) % 7) as f32 / 7.0)
    }

    fn detector() -> StubDetector {
        StubDetector::new(
            vec![
                (Rect::new(1.0, 1.0, 6.0, 6.0).unwrap(), 0.8),
                (Rect::new(8.0, 2.0, 14.0, 9.0).unwrap(), 0.6),
            ],
            RegionFeaturizer::new(3, 6, 2),
        )
    }

    #[test]
    fn single_and_duplicate_candidates() {
        let m = model(FagMode::Hadamard);
        let img = image();
        let c = Rect::new(2.0, 2.0, 12.0, 12.0).unwrap();
        assert_eq!(score_candidates(img.view(), &[c], &detector(), &m).unwrap().len(), 1);
        let s = score_candidates(img.view(), &[c, c], &detector(), &m).unwrap();
        assert_eq!(s[0].score, s[1].score);
        assert!(score_candidates(img.view(), &[], &detector(), &m).is_err());
    }

    #[test]
    fn projection_mode_scores() {
        let m = model(FagMode::Projection);
        let img = image();
        let c = Rect::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert!(score_candidates(img.view(), &[c], &detector(), &m).unwrap()[0].score.is_finite());
    }

    #[test]
    fn adjacency_rows_sum_to_one() {
        let m = model(FagMode::Hadamard);
        let img = image();
        let sets = build_node_sets(img.view(), &[Rect::new(3.0, 3.0, 13.0, 13.0).unwrap()], &detector(), 3).unwrap();
        let g = m.build_graph(&sets[0]).unwrap();
        for row in g.a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        assert!(g.m_p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn crop_loss_values() {
        let (l, _) = crop_train_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap();
        assert_eq!(l.smooth_l1, 0.0);
        assert_eq!(l.ranking, 0.0);
        let (l, _) = crop_train_loss(&[0.5, 0.45], &[1.0, 0.0]).unwrap();
        assert!((l.smooth_l1 - 0.1696875).abs() < 1e-12);
        assert!((l.ranking - 0.05).abs() < 1e-12);
        assert!((l.total - 0.2196875).abs() < 1e-12);
        assert!(crop_train_loss(&[0.1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn crop_loss_gradient_matches_differences() {
        let pred = [0.2, -0.4, 1.7, 0.9];
        let target = [0.5, 0.1, 0.0, 1.0];
        let (_, g) = crop_train_loss(&pred, &target).unwrap();
        let h = 1e-6;
        for i in 0..pred.len() {
            let mut p = pred;
            p[i] += h;
            let up = crop_train_loss(&p, &target).unwrap().0.total;
            p[i] -= 2.0 * h;
            let dn = crop_train_loss(&p, &target).unwrap().0.total;
            assert!(((up - dn) / (2.0 * h) - g[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn too_many_objects_rejected() {
        let m = S2cNet::new(CropModelConfig::new(6, 1), &mut nn::seeded_rng(1)).unwrap();
        let img = image();
        let objects = detect_objects(img.view(), &detector(), 2).unwrap();
        let c = Rect::whole(16, 16);
        let nodes = GraphNodeSet::new(&objects, c, vec![0.0; 6], (16, 16)).unwrap();
        assert!(m.forward(&nodes).is_err());
    }
}
