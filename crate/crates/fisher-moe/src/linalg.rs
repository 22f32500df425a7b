//! Minimal dense matrix and summation helpers.
//!
//! Models here are a few hundred parameters, so a flat row-major matrix with
//! explicit loops is fast enough and keeps every floating-point operation
//! order fixed, which the byte-for-byte reproducibility contract relies on.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Mat {
            rows: r,
            cols: c,
            data: rows.into_iter().flatten().collect(),
        }
    }

    /// Xavier-uniform fill: entries drawn from U(-b, b) with
    /// b = sqrt(6 / (fan_in + fan_out)), then scaled by `scale`.
    pub fn xavier_uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| scale * rng.gen_range(-bound..bound))
            .collect();
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = M x.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows)
            .map(|r| dot(self.row(r), x))
            .collect()
    }

    /// self += alpha * (u outer v), the rank-one update used by gradients.
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        assert_eq!(u.len(), self.rows);
        assert_eq!(v.len(), self.cols);
        for r in 0..self.rows {
            let au = alpha * u[r];
            let base = r * self.cols;
            for c in 0..self.cols {
                self.data[base + c] += au * v[c];
            }
        }
    }

    /// self += alpha * other, elementwise.
    pub fn add_scaled(&mut self, alpha: f64, other: &Mat) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Order-independent compensated sum: addends are sorted ascending before a
/// Kahan pass, so any permutation of the inputs yields the identical result.
pub fn stable_sum(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut sum = 0.0;
    let mut carry = 0.0;
    for v in sorted {
        let y = v - carry;
        let t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Pearson correlation of two equal-length samples.
pub fn pearson_correlation(x: &[f64], y: &[f64]) -> crate::Result<f64> {
    if x.len() != y.len() {
        return Err(crate::Error::DimensionMismatch {
            context: "pearson_correlation",
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(crate::Error::invalid(
            "pearson_correlation needs at least two points",
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(crate::Error::invalid(
            "pearson_correlation undefined for a constant sample",
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn matvec_matches_hand_computation() {
        let m = Mat::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![0.0, -1.0]]);
        assert_eq!(m.matvec(&[1.0, 1.0]), vec![3.0, 7.0, -1.0]);
    }

    #[test]
    fn add_outer_matches_loops() {
        let mut m = Mat::zeros(2, 3);
        m.add_outer(2.0, &[1.0, -1.0], &[1.0, 2.0, 3.0]);
        assert_eq!(m.data, vec![2.0, 4.0, 6.0, -2.0, -4.0, -6.0]);
    }

    #[test]
    fn stable_sum_is_permutation_invariant_bitwise() {
        let mut rng = stream(3, "stable-sum-test");
        use rand::Rng;
        let values: Vec<f64> = (0..257).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
        let s1 = stable_sum(&values);
        let mut rev = values.clone();
        rev.reverse();
        let s2 = stable_sum(&rev);
        // interleave for a third ordering
        let mut shuffled = Vec::with_capacity(values.len());
        let half = values.len() / 2;
        for i in 0..half {
            shuffled.push(values[i]);
            shuffled.push(values[values.len() - 1 - i]);
        }
        if values.len() % 2 == 1 {
            shuffled.push(values[half]);
        }
        let s3 = stable_sum(&shuffled);
        assert_eq!(s1.to_bits(), s2.to_bits());
        assert_eq!(s1.to_bits(), s3.to_bits());
    }

    #[test]
    fn xavier_bound_respected() {
        let mut rng = stream(9, "xavier-test");
        let m = Mat::xavier_uniform(4, 8, 1.0, &mut rng);
        let bound = (6.0 / 12.0f64).sqrt();
        assert!(m.data.iter().all(|v| v.abs() <= bound));
        // not all identical
        assert!(m.data.iter().any(|v| (v - m.data[0]).abs() > 1e-12));
    }

    #[test]
    fn pearson_correlation_of_linear_data_is_one() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [2.0, 4.0, 6.0, 8.0];
        let r = pearson_correlation(&x, &y).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let yneg = [-2.0, -4.0, -6.0, -8.0];
        let r = pearson_correlation(&x, &yneg).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
    }
}
