//! Spatial-semantic graph over detected objects plus one crop candidate.
//!
//! Forward ops and their vector-Jacobian products. Node features are `[n, d]`
//! with the candidate as the last row; positions are box centres normalised by
//! the image size.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Result, VqaError};
use crate::nn::{self, SeededRng};

/// Rows of the adjacency whose denominator magnitude falls below this are rejected.
pub const MIN_ADJACENCY_DENOMINATOR: f64 = 1e-12;

/// The two embeddings `phi(x) = x W_phi + b_phi`, `psi(x) = x W_psi + b_psi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityParams {
    pub phi_w: Array2<f64>,
    pub phi_b: Array1<f64>,
    pub psi_w: Array2<f64>,
    pub psi_b: Array1<f64>,
}

impl SimilarityParams {
    /// Shared positive bias offsets keep initial similarities away from zero.
    pub fn init(dim: usize, rng: &mut SeededRng) -> Self {
        let std = 0.5 / (dim as f64).sqrt();
        Self {
            phi_w: nn::normal_matrix(dim, dim, std, rng),
            phi_b: Array1::from_elem(dim, 0.5),
            psi_w: nn::normal_matrix(dim, dim, std, rng),
            psi_b: Array1::from_elem(dim, 0.5),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            phi_w: Array2::eye(dim),
            phi_b: Array1::zeros(dim),
            psi_w: Array2::eye(dim),
            psi_b: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.phi_w.nrows()
    }
}

/// Two affine maps of the 2-D centres, `W_m p + b_m` and `W_n p + b_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialParams {
    pub m_w: Array2<f64>,
    pub m_b: Array1<f64>,
    pub n_w: Array2<f64>,
    pub n_b: Array1<f64>,
}

impl SpatialParams {
    pub fn init(embed: usize, rng: &mut SeededRng) -> Self {
        Self {
            m_w: nn::normal_matrix(2, embed, 0.5, rng),
            m_b: Array1::zeros(embed),
            n_w: nn::normal_matrix(2, embed, 0.5, rng),
            n_b: Array1::zeros(embed),
        }
    }

    pub fn identity() -> Self {
        Self {
            m_w: Array2::eye(2),
            m_b: Array1::zeros(2),
            n_w: Array2::eye(2),
            n_b: Array1::zeros(2),
        }
    }
}

/// Query/key/value projections for the graph-aware attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub q_w: Array2<f64>,
    pub k_w: Array2<f64>,
    pub v_w: Array2<f64>,
}

impl AttentionParams {
    pub fn init(dim: usize, rng: &mut SeededRng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            q_w: nn::normal_matrix(dim, dim, std, rng),
            k_w: nn::normal_matrix(dim, dim, std, rng),
            v_w: nn::normal_matrix(dim, dim, std, rng),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            q_w: Array2::eye(dim),
            k_w: Array2::eye(dim),
            v_w: Array2::eye(dim),
        }
    }
}

/// How the aggregation gate combines `Z` with the node features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FagMode {
    /// `ReLU(A (Z ⊙ X))` with `Z` of shape `[n, d]`.
    #[default]
    Hadamard,
    /// `ReLU(A X W)` with `W` of shape `[d, d]`.
    Projection,
}

/// Gate weights restricted to the current graph.
#[derive(Debug, Clone, Copy)]
pub enum Gate<'a> {
    Hadamard(&'a Array2<f64>),
    Projection(&'a Array2<f64>),
}

/// The three `[n, n]` matrices of one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct CropGraph {
    pub m_a: Array2<f64>,
    pub m_p: Array2<f64>,
    pub a: Array2<f64>,
}

fn check_square(context: &'static str, m: &Array2<f64>, n: usize) -> Result<()> {
    if m.dim() != (n, n) {
        return Err(VqaError::shape(context, format!("[{n}, {n}]"), format!("{:?}", m.dim())));
    }
    Ok(())
}

/// `M_a(i, j) = phi(x_i) . psi(x_j) / sqrt(d)`.
pub fn appearance_similarity(x: &Array2<f64>, params: &SimilarityParams) -> Result<Array2<f64>> {
    ensure_finite(x.iter(), || "node features".into())?;
    if x.ncols() != params.dim() {
        return Err(VqaError::shape("appearance similarity", params.dim(), x.ncols()));
    }
    let phi = nn::affine(x, &params.phi_w, &params.phi_b);
    let psi = nn::affine(x, &params.psi_w, &params.psi_b);
    Ok(phi.dot(&psi.t()) / (x.ncols() as f64).sqrt())
}

#[derive(Debug, Clone)]
pub struct SimilarityGrads {
    pub x: Array2<f64>,
    pub params: SimilarityParams,
}

pub fn appearance_similarity_backward(x: &Array2<f64>, params: &SimilarityParams, d_ma: &Array2<f64>) -> SimilarityGrads {
    let scale = 1.0 / (x.ncols() as f64).sqrt();
    let phi = nn::affine(x, &params.phi_w, &params.phi_b);
    let psi = nn::affine(x, &params.psi_w, &params.psi_b);
    let d_phi = d_ma.dot(&psi) * scale;
    let d_psi = d_ma.t().dot(&phi) * scale;
    SimilarityGrads {
        x: d_phi.dot(&params.phi_w.t()) + d_psi.dot(&params.psi_w.t()),
        params: SimilarityParams {
            phi_w: x.t().dot(&d_phi),
            phi_b: d_phi.sum_axis(Axis(0)),
            psi_w: x.t().dot(&d_psi),
            psi_b: d_psi.sum_axis(Axis(0)),
        },
    }
}

/// `M_p(i, j) = || (W_m p_i + b_m) - (W_n p_j + b_n) ||^2`.
pub fn spatial_matrix(positions: &Array2<f64>, params: &SpatialParams) -> Result<Array2<f64>> {
    ensure_finite(positions.iter(), || "node positions".into())?;
    if positions.ncols() != 2 {
        return Err(VqaError::shape("node positions", 2, positions.ncols()));
    }
    let pm = nn::affine(positions, &params.m_w, &params.m_b);
    let pn = nn::affine(positions, &params.n_w, &params.n_b);
    let n = positions.nrows();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        pm.row(i).iter().zip(pn.row(j)).map(|(a, b)| (a - b).powi(2)).sum()
    }))
}

pub fn spatial_matrix_backward(positions: &Array2<f64>, params: &SpatialParams, d_mp: &Array2<f64>) -> SpatialParams {
    let pm = nn::affine(positions, &params.m_w, &params.m_b);
    let pn = nn::affine(positions, &params.n_w, &params.n_b);
    let n = positions.nrows();
    let mut d_pm = Array2::<f64>::zeros(pm.raw_dim());
    let mut d_pn = Array2::<f64>::zeros(pn.raw_dim());
    for i in 0..n {
        for j in 0..n {
            let g = 2.0 * d_mp[[i, j]];
            for k in 0..pm.ncols() {
                let diff = pm[[i, k]] - pn[[j, k]];
                d_pm[[i, k]] += g * diff;
                d_pn[[j, k]] -= g * diff;
            }
        }
    }
    SpatialParams {
        m_w: positions.t().dot(&d_pm),
        m_b: d_pm.sum_axis(Axis(0)),
        n_w: positions.t().dot(&d_pn),
        n_b: d_pn.sum_axis(Axis(0)),
    }
}

/// Row-normalised `M_a ⊙ exp(sign * M_p)`. `sign` is `+1` for the literal
/// exponent and `-1` for distance decay.
pub fn adjacency(m_a: &Array2<f64>, m_p: &Array2<f64>, sign: f64) -> Result<Array2<f64>> {
    let n = m_a.nrows();
    check_square("similarity matrix", m_a, n)?;
    check_square("spatial matrix", m_p, n)?;
    let mut u = m_a * &m_p.mapv(|v| (sign * v).exp());
    for (row, mut u_row) in u.rows_mut().into_iter().enumerate() {
        let denom = u_row.sum();
        if !denom.is_finite() || denom.abs() < MIN_ADJACENCY_DENOMINATOR {
            return Err(VqaError::VanishingDenominator { row, value: denom });
        }
        u_row.mapv_inplace(|v| v / denom);
    }
    Ok(u)
}

/// Returns `(d M_a, d M_p)`.
pub fn adjacency_backward(
    m_a: &Array2<f64>,
    m_p: &Array2<f64>,
    sign: f64,
    a: &Array2<f64>,
    d_a: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let e = m_p.mapv(|v| (sign * v).exp());
    let u = m_a * &e;
    let mut d_u = Array2::zeros(u.raw_dim());
    for i in 0..u.nrows() {
        let denom: f64 = u.row(i).sum();
        let inner: f64 = d_a.row(i).dot(&a.row(i));
        for j in 0..u.ncols() {
            d_u[[i, j]] = (d_a[[i, j]] - inner) / denom;
        }
    }
    let d_ma = &d_u * &e;
    let d_mp = &d_u * &u * sign;
    (d_ma, d_mp)
}

fn gated(x: &Array2<f64>, gate: Gate<'_>) -> Result<Array2<f64>> {
    match gate {
        Gate::Hadamard(z) => {
            if z.dim() != x.dim() {
                return Err(VqaError::shape("aggregation gate Z", format!("{:?}", x.dim()), format!("{:?}", z.dim())));
            }
            Ok(z * x)
        }
        Gate::Projection(w) => {
            if w.dim() != (x.ncols(), x.ncols()) {
                return Err(VqaError::shape("aggregation gate W", format!("[{0}, {0}]", x.ncols()), format!("{:?}", w.dim())));
            }
            Ok(x.dot(w))
        }
    }
}

/// Feature aggregation gate: `ReLU(A (Z ⊙ X))` or `ReLU(A X W)`.
pub fn feature_aggregation_gate(a: &Array2<f64>, x: &Array2<f64>, gate: Gate<'_>) -> Result<Array2<f64>> {
    check_square("adjacency", a, x.nrows())?;
    Ok(a.dot(&gated(x, gate)?).mapv(nn::relu))
}

#[derive(Debug, Clone)]
pub struct GateGrads {
    pub a: Array2<f64>,
    pub x: Array2<f64>,
    pub gate: Array2<f64>,
}

pub fn feature_aggregation_gate_backward(a: &Array2<f64>, x: &Array2<f64>, gate: Gate<'_>, d_out: &Array2<f64>) -> GateGrads {
    let g = gated(x, gate).expect("shapes checked in forward");
    let pre = a.dot(&g);
    let mut d_pre = d_out.clone();
    d_pre.zip_mut_with(&pre, |d, &p| {
        if p <= 0.0 {
            *d = 0.0
        }
    });
    let d_a = d_pre.dot(&g.t());
    let d_g = a.t().dot(&d_pre);
    let (d_x, d_gate) = match gate {
        Gate::Hadamard(z) => (&d_g * z, &d_g * x),
        Gate::Projection(w) => (d_g.dot(&w.t()), x.t().dot(&d_g)),
    };
    GateGrads { a: d_a, x: d_x, gate: d_gate }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: Array2<f64>,
    /// Row-stochastic attention weights `[n, n]`.
    pub weights: Array2<f64>,
}

/// `softmax(Q K^T / sqrt(d) + M_a + M_p) V` with `Q = X' W_q`, `K = X W_k`,
/// `V = X W_v`.
pub fn graph_self_attention(
    x_query: &Array2<f64>,
    x: &Array2<f64>,
    m_a: &Array2<f64>,
    m_p: &Array2<f64>,
    params: &AttentionParams,
) -> Result<AttentionOutput> {
    let (n, d) = x.dim();
    if x_query.dim() != (n, d) {
        return Err(VqaError::shape("attention query", format!("{:?}", x.dim()), format!("{:?}", x_query.dim())));
    }
    check_square("attention similarity bias", m_a, n)?;
    check_square("attention spatial bias", m_p, n)?;
    for (name, w) in [("W_q", &params.q_w), ("W_k", &params.k_w), ("W_v", &params.v_w)] {
        if w.nrows() != d || w.ncols() != params.q_w.ncols() {
            return Err(VqaError::shape("attention projection", format!("[{d}, {}]", params.q_w.ncols()), format!("{name} {:?}", w.dim())));
        }
    }
    let q = x_query.dot(&params.q_w);
    let k = x.dot(&params.k_w);
    let v = x.dot(&params.v_w);
    let logits = q.dot(&k.t()) / (q.ncols() as f64).sqrt() + m_a + m_p;
    ensure_finite(logits.iter(), || "attention logits".into())?;
    let weights = nn::softmax_rows(&logits);
    Ok(AttentionOutput {
        out: weights.dot(&v),
        weights,
    })
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub x_query: Array2<f64>,
    pub x: Array2<f64>,
    pub m_a: Array2<f64>,
    pub m_p: Array2<f64>,
    pub params: AttentionParams,
}

pub fn graph_self_attention_backward(
    x_query: &Array2<f64>,
    x: &Array2<f64>,
    params: &AttentionParams,
    weights: &Array2<f64>,
    d_out: &Array2<f64>,
) -> AttentionGrads {
    let q = x_query.dot(&params.q_w);
    let k = x.dot(&params.k_w);
    let v = x.dot(&params.v_w);
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let d_weights = d_out.dot(&v.t());
    let d_v = weights.t().dot(d_out);
    let d_logits = nn::softmax_rows_backward(weights, &d_weights);
    let d_q = d_logits.dot(&k) * scale;
    let d_k = d_logits.t().dot(&q) * scale;
    AttentionGrads {
        x_query: d_q.dot(&params.q_w.t()),
        x: d_k.dot(&params.k_w.t()) + d_v.dot(&params.v_w.t()),
        m_a: d_logits.clone(),
        m_p: d_logits,
        params: AttentionParams {
            q_w: x_query.t().dot(&d_q),
            k_w: x.t().dot(&d_k),
            v_w: x.t().dot(&d_v),
        },
    }
}
