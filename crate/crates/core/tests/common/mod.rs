//! Scalar-loop reference implementations and finite-difference helpers
//! shared by the integration tests.
#![allow(dead_code)]

pub mod grad;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dist_core::metrics::{MetricConfig, Prototypes, TemporalMetric};

pub type Mat = Array2<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

pub fn rand_tensor(rng: &mut impl Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
}

pub fn cos_dist(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for k in 0..u.len() {
        dot += u[k] * v[k];
        nu += u[k] * u[k];
        nv += v[k] * v[k];
    }
    1.0 - dot / (nu.sqrt() * nv.sqrt())
}

fn row(m: &Mat, i: usize) -> Vec<f64> {
    m.row(i).to_vec()
}

/// Mean over rows of the distance to the nearest column, plus the reverse.
pub fn bidirectional_min_loop(d: &Mat) -> f64 {
    let (r, c) = d.dim();
    let mut rows = 0.0;
    for i in 0..r {
        let mut m = f64::INFINITY;
        for j in 0..c {
            if d[[i, j]] < m {
                m = d[[i, j]];
            }
        }
        rows += m;
    }
    let mut cols = 0.0;
    for j in 0..c {
        let mut m = f64::INFINITY;
        for i in 0..r {
            if d[[i, j]] < m {
                m = d[[i, j]];
            }
        }
        cols += m;
    }
    rows / r as f64 + cols / c as f64
}

pub fn cosine_matrix_loop(a: &Mat, b: &Mat) -> Mat {
    let mut d = Mat::zeros((a.nrows(), b.nrows()));
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            d[[i, j]] = cos_dist(&row(a, i), &row(b, j));
        }
    }
    d
}

pub fn mean_hausdorff_loop(a: &Mat, b: &Mat) -> f64 {
    bidirectional_min_loop(&cosine_matrix_loop(a, b))
}

pub fn spatial_loop(q: &Array3<f64>, s: &Array3<f64>) -> f64 {
    let (tq, ts) = (q.dim().0, s.dim().0);
    let mut d = Mat::zeros((tq, ts));
    for i in 0..tq {
        for j in 0..ts {
            let a = q.index_axis(Axis(0), i).to_owned();
            let b = s.index_axis(Axis(0), j).to_owned();
            d[[i, j]] = mean_hausdorff_loop(&a, &b);
        }
    }
    bidirectional_min_loop(&d)
}

/// Costs of every alignment of the support frames (columns) to query frames
/// (rows): each support frame sits on one query frame, the first anywhere,
/// each next one on the same or the following query frame.
pub fn alignment_costs(d: &Mat) -> Vec<f64> {
    let (tq, ts) = d.dim();
    let mut out = Vec::new();
    let mut stack: Vec<(usize, usize, f64)> = (0..tq).map(|r| (0, r, d[[r, 0]])).collect();
    while let Some((j, r, cost)) = stack.pop() {
        if j + 1 == ts {
            out.push(cost);
            continue;
        }
        stack.push((j + 1, r, cost + d[[r, j + 1]]));
        if r + 1 < tq {
            stack.push((j + 1, r + 1, cost + d[[r + 1, j + 1]]));
        }
    }
    out
}

/// Minimum (`lambda = None`) or `-lambda * log(sum(exp(-cost / lambda)))`
/// over all alignments, averaged over both directions.
pub fn otam_paths(d: &Mat, lambda: Option<f64>) -> f64 {
    let agg = |costs: Vec<f64>| {
        let m = costs.iter().copied().fold(f64::INFINITY, f64::min);
        match lambda {
            None => m,
            Some(l) => m - l * costs.iter().map(|c| (-(c - m) / l).exp()).sum::<f64>().ln(),
        }
    };
    let back = d.t().to_owned();
    0.5 * (agg(alignment_costs(d)) + agg(alignment_costs(&back)))
}

pub fn match_episode_loop(
    queries: &[Vec<Prototypes>],
    support: &[Prototypes],
    cfg: &MetricConfig,
) -> Mat {
    let mut logits = Mat::zeros((queries.len(), support.len()));
    for (q, per_class) in queries.iter().enumerate() {
        for (c, sup) in support.iter().enumerate() {
            let qp = if per_class.len() == 1 {
                &per_class[0]
            } else {
                &per_class[c]
            };
            let spatial = spatial_loop(&qp.spatial, &sup.spatial);
            let frames = cosine_matrix_loop(&qp.frame, &sup.frame);
            let temporal = match cfg.temporal {
                TemporalMetric::Otam => {
                    otam_paths(&frames, (!cfg.smooth.hard).then_some(cfg.smooth.lambda))
                }
                TemporalMetric::BiMhm => bidirectional_min_loop(&frames),
            };
            logits[[q, c]] = -(temporal + cfg.alpha * spatial) / cfg.temperature;
        }
    }
    logits
}

pub fn random_prototypes(rng: &mut impl Rng, t: usize, n: usize, c: usize) -> Prototypes {
    Prototypes {
        spatial: rand_tensor(rng, (t, n, c)),
        frame: rand_mat(rng, t, c),
    }
}

/// Relative error with a small floor so exact zeros compare absolutely:
/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and central differences of `f` around `x`.
pub fn fd_worst(f: &mut dyn FnMut(&Mat) -> f64, x: &Mat, analytic: &Mat) -> f64 {
    const H: f64 = 1e-5;
    assert_eq!(x.dim(), analytic.dim());
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for idx in ndarray::indices(x.dim()) {
        let orig = probe[idx];
        probe[idx] = orig + H;
        let up = f(&probe);
        probe[idx] = orig - H;
        let down = f(&probe);
        probe[idx] = orig;
        worst = worst.max(rel_err(analytic[idx], (up - down) / (2.0 * H)));
    }
    worst
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
