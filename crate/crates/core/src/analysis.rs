//! Margin theory and post-training diagnostics.
//!
//! The margin d_W of a classifier layer is the smallest distance between two
//! class weight vectors after each has been scaled to unit length.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::codec::select_topk;
use crate::error::{Error, Result};
use crate::nn::{predict, DenseLayer};
use crate::protocol::EpochRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub d_w_empirical: f64,
    /// Closed-form estimate; absent when k < 2.
    pub d_w_theoretical: Option<f64>,
    pub n: usize,
    pub k: usize,
}

impl MarginReport {
    pub fn new(rows: &[&[f64]], k: usize) -> Result<Self> {
        let n = rows.len();
        Ok(Self {
            d_w_empirical: empirical_min_margin(rows)?,
            d_w_theoretical: if k >= 2 { Some(theoretical_margin(n, k)?) } else { None },
            n,
            k,
        })
    }
}

/// Rows of a layer's weight matrix restricted to `columns`, one per output unit.
pub fn class_weight_rows(layer: &DenseLayer, columns: std::ops::Range<usize>) -> Result<Vec<Vec<f64>>> {
    if columns.start >= columns.end || columns.end > layer.in_dim() {
        return Err(Error::Dimension {
            expected: layer.in_dim(),
            actual: columns.end,
        });
    }
    Ok(layer
        .weights()
        .chunks(layer.in_dim())
        .map(|row| row[columns.clone()].to_vec())
        .collect())
}

/// Minimum pairwise L2 distance between the L2-normalized rows.
pub fn empirical_min_margin<R: AsRef<[f64]>>(rows: &[R]) -> Result<f64> {
    if rows.len() < 2 {
        return Err(Error::Domain(format!("need at least 2 rows, got {}", rows.len())));
    }
    let dim = rows[0].as_ref().len();
    let mut unit = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let row = row.as_ref();
        if row.len() != dim {
            return Err(Error::Dimension { expected: dim, actual: row.len() });
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegenerateWeights(format!("row {i} has norm {norm}")));
        }
        unit.push(row.iter().map(|v| v / norm).collect::<Vec<_>>());
    }
    let mut best = f64::INFINITY;
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            let d2: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(d2);
        }
    }
    Ok(best.sqrt())
}

/// Packing estimate of the margin for n unit vectors on a (k-1)-sphere:
/// 2 * ((2/n) * sqrt(k*pi/2))^(1/(k-1)).
pub fn theoretical_margin(n: usize, k: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::Domain(format!("n must be >= 2, got {n}")));
    }
    if k < 2 {
        return Err(Error::Domain(format!("k must be >= 2, got {k}")));
    }
    let base = 2.0 / n as f64 * (k as f64 * PI / 2.0).sqrt();
    Ok(2.0 * base.powf(1.0 / (k - 1) as f64))
}

/// Natural log of the binomial coefficient C(n, m).
pub fn ln_binomial(n: usize, m: usize) -> f64 {
    if m > n {
        return f64::NEG_INFINITY;
    }
    if n <= 64 {
        return (exact_binomial(n as u64, m as u64) as f64).ln();
    }
    let m = m.min(n - m);
    (1..=m).map(|i| ((n - m + i) as f64 / i as f64).ln()).sum()
}

fn exact_binomial(n: u64, m: u64) -> u128 {
    let m = m.min(n - m);
    // every prefix product is itself a binomial, so the division is exact
    (0..m).fold(1u128, |c, i| c * (n - i) as u128 / (i + 1) as u128)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginBound {
    /// C(d, alpha*k) * sqrt(2 alpha^3 k pi) / n: how many times larger the
    /// top-k margin is than the size-reduction margin at budget alpha*k.
    pub ratio: f64,
    /// n <= sqrt(k/2) * C(d, alpha*k)
    pub condition_holds: bool,
    pub alpha_k: usize,
    /// alpha*k was not an integer and has been rounded.
    pub rounded: bool,
}

pub fn margin_ratio_bound(d: usize, k: usize, alpha: f64, n: usize) -> Result<MarginBound> {
    if n < 2 {
        return Err(Error::Domain(format!("n must be >= 2, got {n}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) || k == 0 {
        return Err(Error::Domain(format!("need 0 < alpha <= 1 and k >= 1, got alpha = {alpha}, k = {k}")));
    }
    let exact = alpha * k as f64;
    let alpha_k = exact.round() as usize;
    if alpha_k == 0 || alpha_k > d {
        return Err(Error::Domain(format!("alpha*k = {exact} is outside 1..={d}")));
    }
    let ln_c = ln_binomial(d, alpha_k);
    let ln_ratio = ln_c + 0.5 * (2.0 * alpha.powi(3) * k as f64 * PI).ln() - (n as f64).ln();
    let ln_threshold = 0.5 * (k as f64 / 2.0).ln() + ln_c;
    Ok(MarginBound {
        ratio: ln_ratio.exp(),
        condition_holds: (n as f64).ln() <= ln_threshold,
        alpha_k,
        rounded: (exact - alpha_k as f64).abs() > 1e-9,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronHistogram {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl NeuronHistogram {
    pub fn max_count(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn min_count(&self) -> u64 {
        self.counts.iter().copied().min().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// How often each cut-layer neuron lands in the inference-time top-k.
pub fn topk_selection_histogram<I: AsRef<[f64]>>(
    bottom: &[DenseLayer],
    inputs: &[I],
    k: usize,
) -> Result<NeuronHistogram> {
    let d = bottom
        .last()
        .ok_or_else(|| Error::Config("bottom model has no layers".into()))?
        .out_dim();
    let mut counts = vec![0u64; d];
    for x in inputs {
        let o = predict(bottom, x.as_ref())?;
        for i in select_topk(&o, k)? {
            counts[i] += 1;
        }
    }
    Ok(NeuronHistogram { k, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub epoch: usize,
    pub gap: f64,
}

/// Train minus test accuracy for every epoch where both were measured.
pub fn generalization_gap(history: &[EpochRecord]) -> Vec<GapPoint> {
    history
        .iter()
        .filter_map(|e| {
            Some(GapPoint {
                epoch: e.epoch,
                gap: e.train_accuracy? - e.test_accuracy?,
            })
        })
        .collect()
}
