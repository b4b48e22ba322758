//! Support/query matching: the object-level set metric, the frame-level
//! alignment metrics, and their fusion into a single episode logit.
//!
//! Everything here is a pure function of its inputs. The `*_with_grad`
//! variants also return the local Jacobian so the autograd graph can route
//! gradients through the hard and soft minima.

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Frame-pair distances `d_ij` between a query (rows) and a support (columns).
pub type FrameDistanceMatrix = Mat;

/// Soft-minimum settings for the alignment dynamic program.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothMinConfig {
    pub lambda: f64,
    pub hard: bool,
}

impl Default for SmoothMinConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            hard: false,
        }
    }
}

impl SmoothMinConfig {
    pub fn hard() -> Self {
        Self {
            lambda: 0.0,
            hard: true,
        }
    }

    pub fn smooth(lambda: f64) -> Self {
        Self {
            lambda,
            hard: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.hard && !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidLambda(self.lambda));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMetric {
    #[default]
    Otam,
    BiMhm,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    Cosine,
    Euclidean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub temporal: TemporalMetric,
    pub smooth: SmoothMinConfig,
    pub alpha: f64,
    /// Sum the inner minima instead of averaging them (unnormalized set distance).
    pub literal_alg1: bool,
    pub distance: DistanceKind,
    /// Logits are `-D / temperature`.
    pub temperature: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            temporal: TemporalMetric::Otam,
            smooth: SmoothMinConfig::default(),
            alpha: 0.5,
            literal_alg1: false,
            distance: DistanceKind::Cosine,
            temperature: 1.0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        self.smooth.validate()?;
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Spatial, temporal and fused distance for one (query, class) pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchScore {
    pub spatial: f64,
    pub temporal: f64,
    pub fused: f64,
    pub alpha: f64,
}

impl MatchScore {
    pub fn new(temporal: f64, spatial: f64, alpha: f64) -> Self {
        Self {
            spatial,
            temporal,
            fused: fuse(temporal, spatial, alpha),
            alpha,
        }
    }
}

/// `1 - cos(u, v)`, in `[0, 2]`.
pub fn cosine_distance(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "vector lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    let cos = (u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

fn euclidean(u: ArrayView1<f64>, v: ArrayView1<f64>) -> f64 {
    u.iter()
        .zip(v.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Pairwise distances between the rows of `a` and the rows of `b`.
pub fn pairwise_distances(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    kind: DistanceKind,
) -> Result<Mat> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "feature dims {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let mut out = Mat::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.outer_iter().enumerate() {
        for (j, rb) in b.outer_iter().enumerate() {
            out[[i, j]] = match kind {
                DistanceKind::Cosine => cosine_distance(ra, rb)?,
                DistanceKind::Euclidean => euclidean(ra, rb),
            };
        }
    }
    Ok(out)
}

/// Cosine distance matrix between query frame prototypes and support frame prototypes.
pub fn frame_distance_matrix(
    query: ArrayView2<f64>,
    support: ArrayView2<f64>,
) -> Result<FrameDistanceMatrix> {
    pairwise_distances(query, support, DistanceKind::Cosine)
}

/// Mean of row minima plus mean of column minima. With `normalize = false`
/// the minima are summed instead of averaged.
fn bidirectional_min(d: ArrayView2<f64>, normalize: bool) -> f64 {
    let (r, c) = d.dim();
    let row_sum: f64 = d
        .outer_iter()
        .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
        .sum();
    let col_sum: f64 = d
        .axis_iter(Axis(1))
        .map(|col| col.iter().copied().fold(f64::INFINITY, f64::min))
        .sum();
    if normalize {
        row_sum / r as f64 + col_sum / c as f64
    } else {
        row_sum + col_sum
    }
}

/// Local gradient of [`bidirectional_min`] w.r.t. its input (first argmin wins ties).
fn bidirectional_min_grad(d: ArrayView2<f64>, normalize: bool) -> Mat {
    let (r, c) = d.dim();
    let (wr, wc) = if normalize {
        (1.0 / r as f64, 1.0 / c as f64)
    } else {
        (1.0, 1.0)
    };
    let mut g = Mat::zeros((r, c));
    for i in 0..r {
        g[[i, argmin(d.row(i))]] += wr;
    }
    for j in 0..c {
        g[[argmin(d.column(j)), j]] += wc;
    }
    g
}

fn argmin(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = k;
        }
    }
    best
}

/// Bidirectional mean Hausdorff distance between two prototype sets (rows).
/// Unequal set sizes are allowed; each direction is averaged over its own set.
pub fn mean_hausdorff(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    mean_hausdorff_with(a, b, DistanceKind::Cosine, true)
}

pub fn mean_hausdorff_with(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    kind: DistanceKind,
    normalize: bool,
) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Shape("empty prototype set".into()));
    }
    let d = pairwise_distances(a, b, kind)?;
    Ok(bidirectional_min(d.view(), normalize))
}

/// Frame-level matrix `d_ij = MeanHausdorff(query frame i, support frame j)`.
pub fn hausdorff_frame_matrix(
    query: ArrayView3<f64>,
    support: ArrayView3<f64>,
    kind: DistanceKind,
    normalize: bool,
) -> Result<FrameDistanceMatrix> {
    let (tq, _, cq) = query.dim();
    let (ts, _, cs) = support.dim();
    if cq != cs {
        return Err(Error::Shape(format!("feature dims {cq} and {cs}")));
    }
    let mut d = Mat::zeros((tq, ts));
    for i in 0..tq {
        for j in 0..ts {
            d[[i, j]] = mean_hausdorff_with(
                query.index_axis(Axis(0), i),
                support.index_axis(Axis(0), j),
                kind,
                normalize,
            )?;
        }
    }
    Ok(d)
}

/// Object-level spatial score between two `T x N x C` prototype tensors.
pub fn spatial_metric(query: ArrayView3<f64>, support: ArrayView3<f64>) -> Result<f64> {
    let d = hausdorff_frame_matrix(query, support, DistanceKind::Cosine, true)?;
    Ok(bidirectional_min(d.view(), true))
}

/// Frame-level bidirectional mean Hausdorff over a frame distance matrix.
pub fn bi_mhm_temporal(d: ArrayView2<f64>) -> f64 {
    bidirectional_min(d, true)
}

pub fn bi_mhm_temporal_with_grad(d: ArrayView2<f64>) -> (f64, Mat) {
    (bidirectional_min(d, true), bidirectional_min_grad(d, true))
}

/// Given the flattened pairwise distances between `tq*nq` query prototypes and
/// `ts*ns` support prototypes (frame-major), returns the `tq x ts` mean
/// Hausdorff matrix together with, per output cell, the input cells it reads
/// and their weights.
pub(crate) fn block_hausdorff_with_routes(
    flat: ArrayView2<f64>,
    (tq, nq): (usize, usize),
    (ts, ns): (usize, usize),
    normalize: bool,
) -> (Mat, Vec<Vec<(usize, usize, f64)>>) {
    debug_assert_eq!(flat.dim(), (tq * nq, ts * ns));
    let (wq, ws) = if normalize {
        (1.0 / nq as f64, 1.0 / ns as f64)
    } else {
        (1.0, 1.0)
    };
    let mut out = Mat::zeros((tq, ts));
    let mut routes = Vec::with_capacity(tq * ts);
    for i in 0..tq {
        for j in 0..ts {
            let block = flat.slice(ndarray::s![i * nq..(i + 1) * nq, j * ns..(j + 1) * ns]);
            let mut route = Vec::with_capacity(nq + ns);
            let mut v = 0.0;
            for k in 0..nq {
                let l = argmin(block.row(k));
                v += wq * block[[k, l]];
                route.push((i * nq + k, j * ns + l, wq));
            }
            for l in 0..ns {
                let k = argmin(block.column(l));
                v += ws * block[[k, l]];
                route.push((i * nq + k, j * ns + l, ws));
            }
            out[[i, j]] = v;
            routes.push(route);
        }
    }
    (out, routes)
}

pub(crate) fn bidirectional_min_with_grad(d: ArrayView2<f64>, normalize: bool) -> (f64, Mat) {
    (
        bidirectional_min(d, normalize),
        bidirectional_min_grad(d, normalize),
    )
}

/// Soft (or hard) minimum of `values`, plus the weight each value receives in
/// the derivative.
fn soft_min(values: &[f64], cfg: SmoothMinConfig) -> (f64, [f64; 3]) {
    let mut weights = [0.0; 3];
    let mut best = 0;
    for (k, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = k;
        }
    }
    let m = values[best];
    if cfg.hard || values.len() == 1 {
        weights[best] = 1.0;
        return (m, weights);
    }
    let mut sum = 0.0;
    for (k, &v) in values.iter().enumerate() {
        weights[k] = (-(v - m) / cfg.lambda).exp();
        sum += weights[k];
    }
    for w in weights.iter_mut().take(values.len()) {
        *w /= sum;
    }
    (m - cfg.lambda * sum.ln(), weights)
}

/// Predecessors of cell `(i, j)` in the padded alignment grid with `ts`
/// support frames (columns `0` and `ts + 1` are the zero padding).
fn otam_predecessors(i: usize, j: usize, ts: usize) -> ([(usize, usize); 2], usize) {
    let mut preds = [(0, 0); 2];
    let mut n = 0;
    if j == 0 {
        if i > 0 {
            preds[0] = (i - 1, 0);
            n = 1;
        }
    } else if j <= ts {
        preds[0] = (i, j - 1);
        n = 1;
        if i > 0 && j >= 2 {
            preds[1] = (i - 1, j - 1);
            n = 2;
        }
    } else {
        preds[0] = (i, ts);
        n = 1;
        if i > 0 {
            preds[1] = (i - 1, ts + 1);
            n = 2;
        }
    }
    (preds, n)
}

/// One direction of the alignment score; returns the score and `dScore/dD`.
fn otam_one_way(d: ArrayView2<f64>, cfg: SmoothMinConfig) -> (f64, Mat) {
    let (tq, ts) = d.dim();
    let width = ts + 2;
    let cost = |i: usize, j: usize| {
        if (1..=ts).contains(&j) {
            d[[i, j - 1]]
        } else {
            0.0
        }
    };

    let mut gamma = Mat::zeros((tq, width));
    for i in 0..tq {
        for j in 0..width {
            let (preds, n) = otam_predecessors(i, j, ts);
            if n == 0 {
                gamma[[i, j]] = cost(i, j);
                continue;
            }
            let vals: Vec<f64> = preds[..n].iter().map(|&(a, b)| gamma[[a, b]]).collect();
            gamma[[i, j]] = cost(i, j) + soft_min(&vals, cfg).0;
        }
    }

    // Reverse sweep: every predecessor precedes its successor in row-major order.
    let mut adj = Mat::zeros((tq, width));
    adj[[tq - 1, width - 1]] = 1.0;
    for i in (0..tq).rev() {
        for j in (0..width).rev() {
            let e = adj[[i, j]];
            if e == 0.0 {
                continue;
            }
            let (preds, n) = otam_predecessors(i, j, ts);
            if n == 0 {
                continue;
            }
            let vals: Vec<f64> = preds[..n].iter().map(|&(a, b)| gamma[[a, b]]).collect();
            let (_, w) = soft_min(&vals, cfg);
            for (k, &(a, b)) in preds[..n].iter().enumerate() {
                adj[[a, b]] += e * w[k];
            }
        }
    }
    let grad = adj.slice(ndarray::s![.., 1..=ts]).to_owned();
    (gamma[[tq - 1, width - 1]], grad)
}

/// Ordered temporal alignment score between a query (rows) and a support
/// (columns), averaged over both alignment directions.
///
/// Columns are padded with a zero-cost column on each side. Inside the
/// sequence an alignment advances one support frame per step, either staying
/// on the same query frame or moving to the next one; in the padding columns
/// it may skip query frames, which relaxes the start and end boundaries.
pub fn otam(d: ArrayView2<f64>, cfg: SmoothMinConfig) -> Result<f64> {
    Ok(otam_with_grad(d, cfg)?.0)
}

pub fn otam_with_grad(d: ArrayView2<f64>, cfg: SmoothMinConfig) -> Result<(f64, Mat)> {
    cfg.validate()?;
    if d.is_empty() {
        return Err(Error::Shape("empty distance matrix".into()));
    }
    let (fwd, g_fwd) = otam_one_way(d, cfg);
    let (bwd, g_bwd) = otam_one_way(d.t(), cfg);
    let grad = (g_fwd + g_bwd.t()) * 0.5;
    Ok((0.5 * (fwd + bwd), grad))
}

/// `D = D_t + alpha * D_s`.
pub fn fuse(temporal: f64, spatial: f64, alpha: f64) -> f64 {
    temporal + alpha * spatial
}

/// Object- and frame-level prototypes of one clip (or one aggregated class).
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    /// `T x N x C`
    pub spatial: ndarray::Array3<f64>,
    /// `T x C`
    pub frame: Mat,
}

/// Scores a single (query, class) pair.
pub fn match_pair(
    query: &Prototypes,
    support: &Prototypes,
    cfg: &MetricConfig,
) -> Result<MatchScore> {
    let dhat = hausdorff_frame_matrix(
        query.spatial.view(),
        support.spatial.view(),
        cfg.distance,
        !cfg.literal_alg1,
    )?;
    let spatial = bidirectional_min(dhat.view(), true);
    let frame = pairwise_distances(query.frame.view(), support.frame.view(), cfg.distance)?;
    let temporal = match cfg.temporal {
        TemporalMetric::Otam => otam(frame.view(), cfg.smooth)?,
        TemporalMetric::BiMhm => bi_mhm_temporal(frame.view()),
    };
    Ok(MatchScore::new(temporal, spatial, cfg.alpha))
}

/// Logits (`n_query x M`) for an episode. `queries[q]` holds either one set
/// of prototypes shared by every class, or one per candidate class when the
/// query was conditioned on each class's attributes.
pub fn match_episode(
    queries: &[Vec<Prototypes>],
    support: &[Prototypes],
    cfg: &MetricConfig,
) -> Result<Mat> {
    cfg.validate()?;
    let m = support.len();
    let mut logits = Mat::zeros((queries.len(), m));
    for (q, per_class) in queries.iter().enumerate() {
        if per_class.len() != 1 && per_class.len() != m {
            return Err(Error::Shape(format!(
                "query {q} has {} prototype sets for {m} classes",
                per_class.len()
            )));
        }
        for (c, sup) in support.iter().enumerate() {
            let qp = if per_class.len() == 1 {
                &per_class[0]
            } else {
                &per_class[c]
            };
            logits[[q, c]] = -match_pair(qp, sup, cfg)?.fused / cfg.temperature;
        }
    }
    Ok(logits)
}
