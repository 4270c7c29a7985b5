//! Kernel independence statistics.
//!
//! The conditional mutual-information penalty is realized as a
//! label-stratified, biased empirical HSIC:
//!
//! `hsic(x, y) = (n-1)^-2 * trace(K H L H)` with `H = I - (1/n) 1 1^T`,
//!
//! summed over classes with at least two samples, weighted `n_c / n`. The
//! Gram matrices default to a Gaussian RBF kernel with the median-heuristic
//! bandwidth recomputed on the exact point set passed in; the bandwidth is a
//! constant with respect to differentiation. Everything is built from graph
//! primitives, so the penalty is differentiable end-to-end.

use crate::error::{Error, Result};
use crate::heads::FeatureBundle;
use crate::tensor::{Graph, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    Rbf,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    /// Median of pairwise Euclidean distances of the current point set.
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidth: Bandwidth,
    /// Used when the median heuristic degenerates to zero (all points equal).
    pub fallback_sigma: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            kind: KernelKind::Rbf,
            bandwidth: Bandwidth::MedianHeuristic,
            fallback_sigma: 1.0,
        }
    }
}

impl KernelSpec {
    fn sigma_for(&self, g: &Graph, x: TensorId) -> Result<f64> {
        let sigma = match self.bandwidth {
            Bandwidth::Fixed(s) => s,
            Bandwidth::MedianHeuristic => {
                let shape = g.shape(x);
                let med = median_pairwise_distance(g.value(x), shape[0], shape[1]);
                if med > 0.0 {
                    med
                } else {
                    self.fallback_sigma
                }
            }
        };
        if sigma <= 0.0 {
            return Err(Error::Config(format!("kernel bandwidth must be positive, got {sigma}")));
        }
        Ok(sigma)
    }
}

/// Upper median of the n(n-1)/2 pairwise Euclidean distances.
pub fn median_pairwise_distance(data: &[f64], n: usize, dim: usize) -> f64 {
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut ss = 0.0;
            for k in 0..dim {
                let d = data[i * dim + k] - data[j * dim + k];
                ss += d * d;
            }
            dists.push(ss.sqrt());
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists[dists.len() / 2]
}

/// Gram matrix of `x [n x p]` under the kernel spec, as a graph node.
fn gram(g: &mut Graph, x: TensorId, spec: &KernelSpec) -> Result<TensorId> {
    match spec.kind {
        KernelKind::Linear => {
            let xt = g.transpose(x)?;
            g.matmul(x, xt)
        }
        KernelKind::Rbf => {
            let sigma = spec.sigma_for(g, x)?;
            let n = g.shape(x)[0];
            // D_ij = r_i + r_j - 2 x_i . x_j ; K = exp(-D / (2 sigma^2))
            let sq = g.mul(x, x)?;
            let r = g.sum_axis(sq, 1)?;
            let ones_row = g.constant(vec![1.0; n], vec![1, n])?;
            let big_r = g.matmul(r, ones_row)?;
            let big_rt = g.transpose(big_r)?;
            let xt = g.transpose(x)?;
            let xxt = g.matmul(x, xt)?;
            let xxt2 = g.scale(xxt, 2.0)?;
            let sums = g.add(big_r, big_rt)?;
            let dist = g.sub(sums, xxt2)?;
            let scaled = g.scale(dist, -1.0 / (2.0 * sigma * sigma))?;
            g.exp(scaled)
        }
    }
}

/// Double-center a Gram matrix: `H K H` computed as
/// `K - rowmean 1^T - 1 colmean^T + grandmean` (O(n^2)).
fn center(g: &mut Graph, k: TensorId) -> Result<TensorId> {
    let n = g.shape(k)[0];
    let inv_n = 1.0 / n as f64;
    let row_sums = g.sum_axis(k, 1)?;
    let row_means = g.scale(row_sums, inv_n)?;
    let ones_row = g.constant(vec![1.0; n], vec![1, n])?;
    let row_block = g.matmul(row_means, ones_row)?;
    let col_block = g.transpose(row_block)?;
    let total = g.sum(k)?;
    let grand = g.scale(total, inv_n * inv_n)?;
    let a = g.sub(k, row_block)?;
    let b = g.sub(a, col_block)?;
    g.add(b, grand)
}

/// Biased empirical HSIC between `x [n x p]` and `y [n x q]` as a
/// differentiable scalar node, clamped at zero.
pub fn hsic(g: &mut Graph, x: TensorId, y: TensorId, spec: &KernelSpec) -> Result<TensorId> {
    let (sx, sy) = (g.shape(x).to_vec(), g.shape(y).to_vec());
    if sx.len() != 2 || sy.len() != 2 || sx[0] != sy[0] {
        return Err(Error::Shape(format!(
            "hsic requires matching sample counts; got {sx:?} and {sy:?}"
        )));
    }
    let n = sx[0];
    if n < 2 {
        return Err(Error::SampleSize(format!("hsic needs n >= 2 samples, got {n}")));
    }
    // With exactly two samples the median bandwidth equals the single
    // pairwise distance, so every RBF Gram entry is exp(-1/2) regardless of
    // the data: the estimator is literally constant. Its true gradient is
    // zero, so detach rather than backpropagate the frozen-bandwidth
    // surrogate (which would inject a large phantom gradient).
    if n == 2 && spec.kind == KernelKind::Rbf && spec.bandwidth == Bandwidth::MedianHeuristic {
        let k = gram(g, x, spec)?;
        let l = gram(g, y, spec)?;
        let kc = center(g, k)?;
        let prod = g.mul(kc, l)?;
        let tr = g.sum(prod)?;
        let value = (g.scalar_value(tr) / ((n - 1) as f64 * (n - 1) as f64)).max(0.0);
        return g.constant(vec![value], vec![1]);
    }
    let k = gram(g, x, spec)?;
    let l = gram(g, y, spec)?;
    let kc = center(g, k)?;
    let prod = g.mul(kc, l)?;
    let tr = g.sum(prod)?;
    let scaled = g.scale(tr, 1.0 / ((n - 1) as f64 * (n - 1) as f64))?;
    // trace(KHLH) is nonnegative for PSD kernels; clamp rounding noise at 0.
    g.relu(scaled)
}

/// Class-conditioned HSIC: `sum_c (n_c / n) * hsic(x_c, y_c)` over classes
/// with `n_c >= 2`. Errors if no class has two samples.
pub fn conditional_hsic(
    g: &mut Graph,
    x: TensorId,
    y: TensorId,
    labels: &[usize],
    spec: &KernelSpec,
) -> Result<TensorId> {
    let n = g.shape(x)[0];
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "conditional_hsic: {} labels for {n} samples",
            labels.len()
        )));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut acc: Option<TensorId> = None;
    for c in 0..num_classes {
        let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        if rows.len() < 2 {
            continue;
        }
        let xc = g.gather_rows(x, &rows)?;
        let yc = g.gather_rows(y, &rows)?;
        let h = hsic(g, xc, yc, spec)?;
        let weighted = g.scale(h, rows.len() as f64 / n as f64)?;
        acc = Some(match acc {
            Some(prev) => g.add(prev, weighted)?,
            None => weighted,
        });
    }
    acc.ok_or_else(|| {
        Error::EstimatorUndefined("no class has two or more samples in the batch".to_string())
    })
}

/// The conditional mutual-information penalty over a feature bundle:
/// the average of the vision term and the text term. Text features are
/// expanded to per-sample rows by indexing each sample's class embedding,
/// so both terms condition on the same per-sample labels.
pub fn cmi_loss(g: &mut Graph, bundle: &FeatureBundle, spec: &KernelSpec) -> Result<TensorId> {
    let vision = conditional_hsic(g, bundle.z_v_u, bundle.z_v_s, &bundle.labels, spec)?;
    let t_u = g.gather_rows(bundle.z_t_u, &bundle.labels)?;
    let t_s = g.gather_rows(bundle.z_t_s, &bundle.labels)?;
    let text = conditional_hsic(g, t_u, t_s, &bundle.labels, spec)?;
    let sum = g.add(vision, text)?;
    g.scale(sum, 0.5)
}
