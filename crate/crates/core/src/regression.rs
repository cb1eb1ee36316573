//! Polynomial least squares used by the backward regression schemes.

use nalgebra::{DMatrix, DVector};

/// Monomials `1, z, z^2, ...` of the standardized variable `z = (x - mean) / scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolyBasis {
    pub mean: f64,
    pub scale: f64,
    pub degree: usize,
}

impl PolyBasis {
    /// Basis for the sample `x`, with the degree capped at one less than the
    /// number of distinct values (a constant sample gets the constant basis).
    pub fn for_sample(x: &[f64], max_degree: usize) -> Self {
        let distinct = count_distinct(x, max_degree + 1);
        let degree = max_degree.min(distinct.saturating_sub(1));
        if degree == 0 {
            return Self { mean: 0.0, scale: 1.0, degree: 0 };
        }
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let scale = var.sqrt();
        if !(scale > 0.0) {
            return Self { mean: 0.0, scale: 1.0, degree: 0 };
        }
        Self { mean, scale, degree }
    }

    pub fn size(&self) -> usize {
        self.degree + 1
    }

    #[inline]
    pub fn row(&self, x: f64, out: &mut [f64]) {
        let z = (x - self.mean) / self.scale;
        let mut p = 1.0;
        for o in out.iter_mut().take(self.size()) {
            *o = p;
            p *= z;
        }
    }

    #[inline]
    pub fn eval(&self, coeffs: &[f64], x: f64) -> f64 {
        let z = (x - self.mean) / self.scale;
        coeffs.iter().rev().fold(0.0, |acc, c| acc * z + c)
    }

    /// Coefficients of the same polynomial in powers of the raw variable `x`.
    pub fn raw_monomials(&self, coeffs: &[f64]) -> Vec<f64> {
        let d = self.degree;
        let mut raw = vec![0.0; d + 1];
        for (j, b) in coeffs.iter().enumerate() {
            // (x - m)^j / s^j
            let sj = self.scale.powi(j as i32);
            for (i, r) in raw.iter_mut().enumerate().take(j + 1) {
                *r += b * binomial(j, i) * (-self.mean).powi((j - i) as i32) / sj;
            }
        }
        raw
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn count_distinct(x: &[f64], cap: usize) -> usize {
    let mut seen: Vec<f64> = Vec::with_capacity(cap);
    for v in x {
        if !seen.contains(v) {
            seen.push(*v);
            if seen.len() >= cap {
                break;
            }
        }
    }
    seen.len()
}

/// Evaluate a raw-monomial polynomial.
#[inline]
pub fn eval_raw(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Normal-equation solver for a fixed design.
pub struct LeastSquares {
    pub basis: PolyBasis,
    design: Vec<f64>,
    n: usize,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl LeastSquares {
    /// Factor the Gram matrix of `basis` on `x`; `None` when it is singular.
    pub fn new(x: &[f64], basis: PolyBasis) -> Option<Self> {
        let p = basis.size();
        let n = x.len();
        let mut design = vec![0.0; n * p];
        for (i, xi) in x.iter().enumerate() {
            basis.row(*xi, &mut design[i * p..(i + 1) * p]);
        }
        let mut gram = DMatrix::<f64>::zeros(p, p);
        for row in design.chunks_exact(p) {
            for a in 0..p {
                for b in 0..=a {
                    gram[(a, b)] += row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                gram[(b, a)] = gram[(a, b)];
            }
        }
        gram /= n as f64;
        let chol = gram.cholesky()?;
        let l = chol.l_dirty();
        let diag: Vec<f64> = (0..p).map(|i| l[(i, i)].abs()).collect();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        if diag.iter().any(|d| *d <= 1e-7 * max) {
            return None;
        }
        Some(Self { basis, design, n, chol })
    }

    pub fn fit(&self, y: &[f64]) -> Vec<f64> {
        let p = self.basis.size();
        let mut rhs = DVector::<f64>::zeros(p);
        for (row, yi) in self.design.chunks_exact(p).zip(y) {
            for a in 0..p {
                rhs[a] += row[a] * yi;
            }
        }
        rhs /= self.n as f64;
        self.chol.solve(&rhs).iter().cloned().collect()
    }

    /// Fitted value at sample point `i`.
    #[inline]
    pub fn fitted(&self, coeffs: &[f64], i: usize) -> f64 {
        let p = self.basis.size();
        self.design[i * p..(i + 1) * p].iter().zip(coeffs).map(|(a, b)| a * b).sum()
    }
}
