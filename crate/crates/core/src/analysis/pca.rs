use crate::error::{Error, Result};

/// Mean and leading principal directions of a set of feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// Unit directions, largest variance first.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component.
    pub variances: Vec<f64>,
    pub total_variance: f64,
}

impl PcaBasis {
    /// Fits `k` components to `rows` (each of length `dim`).
    ///
    /// Each direction's sign is chosen so the projections have nonnegative
    /// third moment, with the largest-magnitude loading made positive on ties.
    pub fn fit(rows: &[&[f64]], k: usize) -> Result<Self> {
        let n = rows.len();
        let dim = rows.first().map_or(0, |r| r.len());
        if n == 0 || dim == 0 {
            return Err(Error::invalid("PCA needs at least one nonempty row"));
        }
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("pca", "rows have different lengths"));
        }
        let k = k.min(dim);
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; dim * dim];
        for r in rows {
            for i in 0..dim {
                let di = r[i] - mean[i];
                for j in i..dim {
                    cov[i * dim + j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                let v = cov[i * dim + j] / n as f64;
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
        let total_variance = (0..dim).map(|i| cov[i * dim + i]).sum();
        let (values, vectors) = symmetric_eigen(cov, dim);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        let mut components = Vec::with_capacity(k);
        let mut variances = Vec::with_capacity(k);
        for &j in order.iter().take(k) {
            let mut v: Vec<f64> = (0..dim).map(|i| vectors[i * dim + j]).collect();
            orient(&mut v, rows, &mean);
            components.push(v);
            variances.push(values[j].max(0.0));
        }
        Ok(Self {
            mean,
            components,
            variances,
            total_variance,
        })
    }

    pub fn project(&self, row: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(row).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect()
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &a) in self.components.iter().zip(coords) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += a * v;
            }
        }
        out
    }

    /// Fraction of total variance captured by the kept components.
    pub fn explained_ratio(&self) -> f64 {
        if self.total_variance <= 0.0 {
            return 0.0;
        }
        self.variances.iter().sum::<f64>() / self.total_variance
    }
}

fn orient(v: &mut [f64], rows: &[&[f64]], mean: &[f64]) {
    let skew: f64 = rows
        .iter()
        .map(|r| {
            let p: f64 = v.iter().zip(*r).zip(mean).map(|((c, x), m)| c * (x - m)).sum();
            p * p * p
        })
        .sum();
    let flip = if skew.abs() > 1e-12 {
        skew < 0.0
    } else {
        let big = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        big < 0.0
    };
    if flip {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Cyclic Jacobi eigendecomposition of a dense symmetric matrix.
///
/// Returns eigenvalues and the row-major matrix whose columns are the
/// corresponding unit eigenvectors.
pub fn symmetric_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}
