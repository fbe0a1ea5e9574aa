//! Attractor estimation, mask generation, the reconstruction objective and
//! its gradient with respect to the embeddings, and the deep-clustering
//! baseline objective.
//!
//! Every matrix here is indexed by bin in time-major order (see
//! [`crate::bin_index`]): embeddings are `N x K`, memberships and masks
//! `N x C`, magnitudes `N` or `N x C`, with `N = F * T`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};

use crate::{Error, Result};

/// Similarity-to-mask nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskHead {
    /// Independent logistic per source.
    Sigmoid,
    /// Normalised over sources, so masks sum to one per bin.
    Softmax,
}

impl fmt::Display for MaskHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskHead::Sigmoid => "sigmoid",
            MaskHead::Softmax => "softmax",
        })
    }
}

impl FromStr for MaskHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(MaskHead::Sigmoid),
            "softmax" => Ok(MaskHead::Softmax),
            other => Err(Error::invalid(format!(
                "unknown mask head {other:?} (sigmoid|softmax)"
            ))),
        }
    }
}

/// How the squared reconstruction error is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossNorm {
    /// Divide by `F * T * C`.
    Mean,
    /// Plain sum over bins and sources.
    Sum,
}

impl LossNorm {
    fn scale(self, n_bins: usize, n_src: usize) -> f64 {
        match self {
            LossNorm::Mean => 1.0 / (n_bins * n_src) as f64,
            LossNorm::Sum => 1.0,
        }
    }
}

/// Binary dominance indicator, `N x C`, exactly one 1 per row.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipTensor {
    pub y: Array2<f64>,
}

impl MembershipTensor {
    /// One-hot rows from a per-bin source label.
    pub fn from_labels(labels: &[usize], n_src: usize) -> Result<Self> {
        let mut y = Array2::zeros((labels.len(), n_src));
        for (i, &c) in labels.iter().enumerate() {
            if c >= n_src {
                return Err(Error::invalid(format!("label {c} out of range for {n_src} sources")));
            }
            y[[i, c]] = 1.0;
        }
        Ok(Self { y })
    }

    pub fn n_bins(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_sources(&self) -> usize {
        self.y.ncols()
    }

    pub fn label(&self, i: usize) -> usize {
        self.y
            .row(i)
            .iter()
            .position(|&v| v == 1.0)
            .expect("membership row without a 1")
    }
}

/// Binary per-bin weight selecting the salient bins used to form
/// attractors.
#[derive(Debug, Clone, PartialEq)]
pub struct SalienceWeight {
    pub w: Array1<f64>,
    pub threshold_pct: u32,
}

impl SalienceWeight {
    pub fn all_ones(n_bins: usize) -> Self {
        Self {
            w: Array1::ones(n_bins),
            threshold_pct: 0,
        }
    }

    /// Keeps bins whose mixture log-magnitude is at or above the
    /// `threshold_pct`-th percentile (nearest-rank) of the chunk.
    /// A threshold of 0 keeps everything.
    pub fn from_log_magnitude(log_mag: ArrayView1<f64>, threshold_pct: u32) -> Result<Self> {
        if threshold_pct >= 100 {
            return Err(Error::invalid(format!(
                "salience threshold {threshold_pct}% must be below 100"
            )));
        }
        let n = log_mag.len();
        if threshold_pct == 0 || n == 0 {
            return Ok(Self {
                w: Array1::ones(n),
                threshold_pct,
            });
        }
        let cut = percentile(log_mag, threshold_pct);
        Ok(Self {
            w: log_mag.mapv(|x| if x >= cut { 1.0 } else { 0.0 }),
            threshold_pct,
        })
    }

    pub fn n_kept(&self) -> usize {
        self.w.iter().filter(|&&x| x > 0.0).count()
    }
}

/// Nearest-rank percentile.
pub fn percentile(values: ArrayView1<f64>, pct: u32) -> f64 {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((pct as f64 / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.max(1) - 1]
}

/// Per-source attractor vectors, `C x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttractorSet {
    pub a: Array2<f64>,
}

impl AttractorSet {
    pub fn n_sources(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }
}

/// Masks for every bin and source, stored `N x C` in time-major bin order.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    pub m: Array2<f64>,
    pub n_freq: usize,
    pub n_frames: usize,
}

impl MaskTensor {
    pub fn new(m: Array2<f64>, n_freq: usize, n_frames: usize) -> Result<Self> {
        if m.nrows() != n_freq * n_frames {
            return Err(Error::shape(format!(
                "mask has {} rows, expected {} x {}",
                m.nrows(),
                n_freq,
                n_frames
            )));
        }
        Ok(Self { m, n_freq, n_frames })
    }

    pub fn get(&self, f: usize, t: usize, c: usize) -> f64 {
        self.m[[crate::bin_index(f, t, self.n_freq), c]]
    }

    pub fn n_sources(&self) -> usize {
        self.m.ncols()
    }

    /// The `F x T x C` view.
    pub fn to_ftc(&self) -> Array3<f64> {
        Array3::from_shape_fn((self.n_freq, self.n_frames, self.m.ncols()), |(f, t, c)| {
            self.get(f, t, c)
        })
    }
}

/// Flattens an `F x T` matrix into time-major bin order.
pub fn flatten_bins(ft: ArrayView2<f64>) -> Array1<f64> {
    ft.t().iter().copied().collect()
}

/// Flattens an `F x T x C` tensor into an `N x C` time-major matrix.
pub fn flatten_sources(ftc: &Array3<f64>) -> Array2<f64> {
    let (nf, nt, nc) = ftc.dim();
    Array2::from_shape_fn((nf * nt, nc), |(i, c)| ftc[[i % nf, i / nf, c]])
}

/// Salience-weighted centroid of each source's embeddings.
pub fn estimate_attractors(
    v: ArrayView2<f64>,
    y: &MembershipTensor,
    w: &SalienceWeight,
) -> Result<AttractorSet> {
    let (n, _k) = v.dim();
    if y.n_bins() != n || w.w.len() != n {
        return Err(Error::shape(format!(
            "embedding rows {n}, membership rows {}, weight rows {}",
            y.n_bins(),
            w.w.len()
        )));
    }
    // yw[i, c] = y[i, c] * w[i]
    let yw = &y.y * &w.w.view().insert_axis(Axis(1));
    let counts = yw.sum_axis(Axis(0));
    if let Some(c) = counts.iter().position(|&s| s <= 0.0) {
        return Err(Error::EmptySource(c));
    }
    let mut a = yw.t().dot(&v);
    for (mut row, &cnt) in a.rows_mut().into_iter().zip(&counts) {
        row /= cnt;
    }
    Ok(AttractorSet { a })
}

pub fn logits(v: ArrayView2<f64>, a: &AttractorSet) -> Result<Array2<f64>> {
    if v.ncols() != a.dim() {
        return Err(Error::shape(format!(
            "embedding dim {} vs attractor dim {}",
            v.ncols(),
            a.dim()
        )));
    }
    Ok(v.dot(&a.a.t()))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sum of per-source terms in ascending order, so relabelling the sources
/// cannot change the result in the last bit.
fn order_free_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

fn apply_head(mut l: Array2<f64>, head: MaskHead) -> Array2<f64> {
    match head {
        MaskHead::Sigmoid => l.mapv_inplace(sigmoid),
        MaskHead::Softmax => {
            let mut buf = Vec::with_capacity(l.ncols());
            for mut row in l.rows_mut() {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|x| (x - max).exp());
                buf.clear();
                buf.extend(row.iter().copied());
                let sum = order_free_sum(&mut buf);
                row /= sum;
            }
        }
    }
    l
}

/// Masks from the inner product of each embedding with each attractor,
/// `N x C`.
pub fn masks(v: ArrayView2<f64>, a: &AttractorSet, head: MaskHead) -> Result<Array2<f64>> {
    Ok(apply_head(logits(v, a)?, head))
}

fn check_loss_shapes(x_mag: &ArrayView1<f64>, s_mags: &ArrayView2<f64>, m: &ArrayView2<f64>) -> Result<()> {
    if s_mags.dim() != m.dim() || x_mag.len() != m.nrows() {
        return Err(Error::shape(format!(
            "mixture {} bins, sources {:?}, masks {:?}",
            x_mag.len(),
            s_mags.dim(),
            m.dim()
        )));
    }
    Ok(())
}

/// Squared error between each clean magnitude and the masked mixture.
pub fn loss(
    x_mag: ArrayView1<f64>,
    s_mags: ArrayView2<f64>,
    m: ArrayView2<f64>,
    norm: LossNorm,
) -> Result<f64> {
    check_loss_shapes(&x_mag, &s_mags, &m)?;
    let mut total = 0.0;
    let mut buf = Vec::with_capacity(m.ncols());
    for ((s_row, m_row), &x) in s_mags.rows().into_iter().zip(m.rows()).zip(x_mag) {
        buf.clear();
        buf.extend(s_row.iter().zip(m_row).map(|(&s, &mk)| (x * mk - s) * (x * mk - s)));
        total += order_free_sum(&mut buf);
    }
    Ok(total * norm.scale(m.nrows(), m.ncols()))
}

/// Settings of the reconstruction objective used during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub head: MaskHead,
    pub norm: LossNorm,
    /// Gradient flows through the centroid computation when set; otherwise
    /// attractors are treated as constants.
    pub flow_through_attractor: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            head: MaskHead::Sigmoid,
            norm: LossNorm::Mean,
            flow_through_attractor: true,
        }
    }
}

/// Loss value together with `dLoss/dV`.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_v: Array2<f64>,
    pub attractors: AttractorSet,
}

/// Gradient of the reconstruction loss with respect to the embeddings, with
/// attractors estimated from `v`, `y` and `w`.
pub fn loss_backward(
    x_mag: ArrayView1<f64>,
    s_mags: ArrayView2<f64>,
    v: ArrayView2<f64>,
    y: &MembershipTensor,
    w: &SalienceWeight,
    obj: &Objective,
) -> Result<LossGrad> {
    let a = estimate_attractors(v, y, w)?;
    let m = masks(v, &a, obj.head)?;
    check_loss_shapes(&x_mag, &s_mags, &m.view())?;
    let (n, c) = m.dim();
    let scale = obj.norm.scale(n, c);

    // dLoss/dM, then back through the head to the logits
    let mut total = 0.0;
    let mut d_logit = Array2::zeros((n, c));
    let mut buf = Vec::with_capacity(c);
    for i in 0..n {
        let x = x_mag[i];
        buf.clear();
        for j in 0..c {
            let r = x * m[[i, j]] - s_mags[[i, j]];
            buf.push(r * r);
            d_logit[[i, j]] = 2.0 * scale * r * x;
        }
        total += order_free_sum(&mut buf);
    }
    match obj.head {
        MaskHead::Sigmoid => {
            d_logit.zip_mut_with(&m, |d, &mk| *d *= mk * (1.0 - mk));
        }
        MaskHead::Softmax => {
            for (mut d_row, m_row) in d_logit.rows_mut().into_iter().zip(m.rows()) {
                let dot: f64 = d_row.iter().zip(m_row).map(|(d, mk)| d * mk).sum();
                d_row.zip_mut_with(&m_row, |d, &mk| *d = mk * (*d - dot));
            }
        }
    }

    let mut grad_v = d_logit.dot(&a.a);
    if obj.flow_through_attractor {
        let grad_a = d_logit.t().dot(&v);
        let yw = &y.y * &w.w.view().insert_axis(Axis(1));
        let counts = yw.sum_axis(Axis(0));
        let mut coef = yw;
        for (mut col, &cnt) in coef.columns_mut().into_iter().zip(&counts) {
            col /= cnt;
        }
        grad_v += &coef.dot(&grad_a);
    }
    Ok(LossGrad {
        loss: total * scale,
        grad_v,
        attractors: a,
    })
}

fn frob_sq(m: &Array2<f64>) -> f64 {
    m.iter().map(|x| x * x).sum()
}

/// `||Y Y^T - V V^T||_F^2` through the small `C x C`, `K x C` and `K x K`
/// Gram matrices.
pub fn dc_loss(v: ArrayView2<f64>, y: &MembershipTensor) -> Result<f64> {
    if v.nrows() != y.n_bins() {
        return Err(Error::shape(format!(
            "embedding rows {} vs membership rows {}",
            v.nrows(),
            y.n_bins()
        )));
    }
    let yty = y.y.t().dot(&y.y);
    let vty = v.t().dot(&y.y);
    let vtv = v.t().dot(&v);
    Ok(frob_sq(&yty) - 2.0 * frob_sq(&vty) + frob_sq(&vtv))
}

/// `||Y^T - U Y^T V V^T||_F^2` with `U = (Y^T Y)^{-1}`. Since `Y` is one-hot,
/// `Y^T Y` is diagonal and `U Y^T V` is the matrix of per-source centroids.
pub fn dc_reduced_loss(v: ArrayView2<f64>, y: &MembershipTensor) -> Result<f64> {
    let centroids = normalized_centroids(v, y)?;
    let proj = centroids.dot(&v.t());
    Ok(proj
        .iter()
        .zip(y.y.t().iter())
        .map(|(p, t)| (t - p) * (t - p))
        .sum())
}

/// `U Y^T V`.
pub fn normalized_centroids(v: ArrayView2<f64>, y: &MembershipTensor) -> Result<Array2<f64>> {
    if v.nrows() != y.n_bins() {
        return Err(Error::shape(format!(
            "embedding rows {} vs membership rows {}",
            v.nrows(),
            y.n_bins()
        )));
    }
    let counts = y.y.sum_axis(Axis(0));
    if let Some(c) = counts.iter().position(|&s| s <= 0.0) {
        return Err(Error::SourceWithNoBins(c));
    }
    let mut out = y.y.t().dot(&v);
    for (mut row, &cnt) in out.rows_mut().into_iter().zip(&counts) {
        row /= cnt;
    }
    Ok(out)
}
