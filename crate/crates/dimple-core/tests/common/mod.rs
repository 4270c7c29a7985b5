//! Shared oracles for the integration suites, coded independently of the
//! library's computation paths: explicit Gram double loops and mean-
//! subtraction centering instead of graph ops.

use dimple_core::independence::{Bandwidth, KernelKind, KernelSpec};
use rand::Rng;

pub fn unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Vec<f64> {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| v / norm));
    }
    data
}

fn naive_gram(x: &[Vec<f64>], spec: &KernelSpec) -> Vec<Vec<f64>> {
    let n = x.len();
    let sigma = match spec.bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::MedianHeuristic => {
            let mut d = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    let ss: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                    d.push(ss.sqrt());
                }
            }
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = if d.is_empty() { 0.0 } else { d[d.len() / 2] };
            if med > 0.0 {
                med
            } else {
                spec.fallback_sigma
            }
        }
    };
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            k[i][j] = match spec.kind {
                KernelKind::Linear => x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum(),
                KernelKind::Rbf => {
                    let ss: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                    (-ss / (2.0 * sigma * sigma)).exp()
                }
            };
        }
    }
    k
}

pub fn naive_hsic(x: &[Vec<f64>], y: &[Vec<f64>], spec: &KernelSpec) -> f64 {
    let n = x.len();
    let k = naive_gram(x, spec);
    let l = naive_gram(y, spec);
    let row_mean: Vec<f64> = k.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let col_mean: Vec<f64> = (0..n).map(|j| k.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let grand: f64 = row_mean.iter().sum::<f64>() / n as f64;
    let mut tr = 0.0;
    for i in 0..n {
        for j in 0..n {
            tr += (k[i][j] - row_mean[i] - col_mean[j] + grand) * l[i][j];
        }
    }
    (tr / ((n - 1) as f64 * (n - 1) as f64)).max(0.0)
}

pub fn naive_conditional_hsic(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    labels: &[usize],
    spec: &KernelSpec,
) -> Option<f64> {
    let n = x.len();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    let mut any = false;
    for c in 0..num_classes {
        let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        if idx.len() < 2 {
            continue;
        }
        let xc: Vec<Vec<f64>> = idx.iter().map(|&i| x[i].clone()).collect();
        let yc: Vec<Vec<f64>> = idx.iter().map(|&i| y[i].clone()).collect();
        total += idx.len() as f64 / n as f64 * naive_hsic(&xc, &yc, spec);
        any = true;
    }
    any.then_some(total)
}
