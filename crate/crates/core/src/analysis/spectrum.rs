use serde::{Deserialize, Serialize};

use super::svd::svd;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default relative threshold for the effective rank.
pub const DEFAULT_TAU: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Descending.
    pub singular_values: Vec<f64>,
    /// `σᵢ / σ₁` (all zero for the zero matrix).
    pub normalized: Vec<f64>,
    pub tau: f64,
    /// Count of `σᵢ / σ₁ > tau`.
    pub effective_rank: usize,
    /// Entry `r - 1` is `‖A − A_r‖_F` for the best rank-`r` approximation.
    pub reconstruction_errors: Vec<f64>,
}

impl SpectrumReport {
    pub fn min_singular_value(&self) -> f64 {
        self.singular_values.last().copied().unwrap_or(0.0)
    }

    /// Mean of the normalized spectrum, in `[1/k, 1]` for a nonzero matrix.
    pub fn area(&self) -> f64 {
        self.normalized.iter().sum::<f64>() / self.normalized.len() as f64
    }

    /// `index,sigma,normalized` with a 1-based index.
    pub fn spectrum_csv(&self) -> String {
        let mut s = String::from("index,sigma,normalized\n");
        for (i, (a, b)) in self
            .singular_values
            .iter()
            .zip(&self.normalized)
            .enumerate()
        {
            s.push_str(&format!("{},{a:e},{b:e}\n", i + 1));
        }
        s
    }

    /// `r,error,tail_energy`.
    pub fn reconstruction_csv(&self) -> String {
        let mut s = String::from("r,error,tail_energy\n");
        for (i, e) in self.reconstruction_errors.iter().enumerate() {
            s.push_str(&format!(
                "{},{e:e},{:e}\n",
                i + 1,
                tail_energy(&self.singular_values, i + 1)
            ));
        }
        s
    }
}

/// `sqrt(Σ_{i>r} σᵢ²)`.
pub fn tail_energy(singular_values: &[f64], r: usize) -> f64 {
    singular_values
        .iter()
        .skip(r)
        .map(|s| s * s)
        .sum::<f64>()
        .sqrt()
}

pub fn svd_spectrum(matrix: &Tensor) -> Result<SpectrumReport> {
    svd_spectrum_with(matrix, DEFAULT_TAU)
}

/// Spectrum, effective rank at `tau`, and the reconstruction error of every
/// truncation, measured directly on the residual matrix.
pub fn svd_spectrum_with(matrix: &Tensor, tau: f64) -> Result<SpectrumReport> {
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::contract(format!(
            "tau must be a non-negative number, got {tau}"
        )));
    }
    let d = svd(matrix)?;
    let sv = d.singular_values.clone();
    let top = sv[0];
    let normalized: Vec<f64> = if top > 0.0 {
        sv.iter().map(|s| s / top).collect()
    } else {
        vec![0.0; sv.len()]
    };
    let effective_rank = normalized.iter().filter(|&&x| x > tau).count();

    let (m, n) = (matrix.shape()[0], matrix.shape()[1]);
    let mut residual = matrix.data().to_vec();
    let mut errors = Vec::with_capacity(sv.len());
    for (c, &s) in sv.iter().enumerate() {
        for i in 0..m {
            let ui = s * d.u.at(i, c);
            for j in 0..n {
                residual[i * n + j] -= ui * d.v.at(j, c);
            }
        }
        errors.push(residual.iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    Ok(SpectrumReport {
        singular_values: sv,
        normalized,
        tau,
        effective_rank,
        reconstruction_errors: errors,
    })
}

/// Best rank-`r` approximation `Σ_{i≤r} σᵢ uᵢ vᵢᵀ`, `1 ≤ r ≤ min(m, n)`.
pub fn low_rank_approx(matrix: &Tensor, r: usize) -> Result<Tensor> {
    let d = svd(matrix)?;
    let k = d.singular_values.len();
    if r == 0 || r > k {
        return Err(Error::contract(format!("rank {r} outside 1..={k}")));
    }
    Ok(d.reconstruct(r))
}

/// Averaged decay profiles of two record sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumComparison {
    pub size: usize,
    pub tau: f64,
    pub ae_mean_spectrum: Vec<f64>,
    pub ar_mean_spectrum: Vec<f64>,
    /// Mean normalized spectrum, AR minus AE, per index.
    pub difference: Vec<f64>,
    pub ae_area: f64,
    pub ar_area: f64,
    pub ae_effective_ranks: Vec<usize>,
    pub ar_effective_ranks: Vec<usize>,
}

impl SpectrumComparison {
    pub fn ae_mean_effective_rank(&self) -> f64 {
        mean_usize(&self.ae_effective_ranks)
    }

    pub fn ar_mean_effective_rank(&self) -> f64 {
        mean_usize(&self.ar_effective_ranks)
    }

    /// `index,ae,ar,difference`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,ae,ar,difference\n");
        for i in 0..self.size {
            s.push_str(&format!(
                "{},{:e},{:e},{:e}\n",
                i + 1,
                self.ae_mean_spectrum[i],
                self.ar_mean_spectrum[i],
                self.difference[i]
            ));
        }
        s
    }
}

fn mean_usize(v: &[usize]) -> f64 {
    v.iter().sum::<usize>() as f64 / v.len().max(1) as f64
}

/// Per-index normalized spectra averaged over each set. All matrices must be
/// square of one common size.
pub fn compare_spectra(ae: &[Tensor], ar: &[Tensor], tau: f64) -> Result<SpectrumComparison> {
    if ae.is_empty() || ar.is_empty() {
        return Err(Error::contract("both record sets must be non-empty"));
    }
    let size = ae[0].shape()[0];
    for m in ae.iter().chain(ar) {
        if m.shape() != [size, size] {
            return Err(Error::contract(format!(
                "mismatched record sizes: {:?} vs [{size}, {size}]",
                m.shape()
            )));
        }
    }
    let summarize = |set: &[Tensor]| -> Result<(Vec<f64>, Vec<usize>)> {
        let mut mean = vec![0.0; size];
        let mut ranks = Vec::with_capacity(set.len());
        for m in set {
            let rep = svd_spectrum_with(m, tau)?;
            for (acc, x) in mean.iter_mut().zip(&rep.normalized) {
                *acc += x / set.len() as f64;
            }
            ranks.push(rep.effective_rank);
        }
        Ok((mean, ranks))
    };
    let (ae_mean, ae_ranks) = summarize(ae)?;
    let (ar_mean, ar_ranks) = summarize(ar)?;
    let area = |v: &[f64]| v.iter().sum::<f64>() / size as f64;
    Ok(SpectrumComparison {
        size,
        tau,
        difference: ar_mean.iter().zip(&ae_mean).map(|(a, b)| a - b).collect(),
        ae_area: area(&ae_mean),
        ar_area: area(&ar_mean),
        ae_mean_spectrum: ae_mean,
        ar_mean_spectrum: ar_mean,
        ae_effective_ranks: ae_ranks,
        ar_effective_ranks: ar_ranks,
    })
}
