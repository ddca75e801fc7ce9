//! Cross entropy and the two attack sensitive losses, plus their exact
//! gradients with respect to the probability vector.
//!
//! The sensitive losses weight per-class prediction error by a row of the
//! attack sensitive matrix M, so training cost can be tuned per targeted
//! misclassification pair.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Probabilities are clamped to this floor before taking logs; cross
/// entropy is singular at zero.
pub const PROB_FLOOR: f64 = 1e-12;

/// Upper bound on attack sensitive matrix entries. The configurability
/// sweep runs entries from 1 to 100 and the greedy searches need a
/// termination bound, so 100 is the cap.
pub const M_CAP: f64 = 100.0;

/// n x n nonnegative cost matrix with zero diagonal. Entry (t, i) is the
/// cost of the targeted attack that flips a class-t sample to class i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSensitiveMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl AttackSensitiveMatrix {
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::InvalidMatrix {
                reason: format!("expected {} entries, got {}", n * n, entries.len()),
            });
        }
        for i in 0..n {
            for j in 0..n {
                let v = entries[i * n + j];
                if !v.is_finite() {
                    return Err(Error::InvalidMatrix {
                        reason: format!("non-finite entry at ({},{})", i, j),
                    });
                }
                if i == j && v != 0.0 {
                    return Err(Error::InvalidMatrix {
                        reason: format!("diagonal entry ({},{}) must be 0, got {}", i, j, v),
                    });
                }
                if v < 0.0 {
                    return Err(Error::InvalidMatrix {
                        reason: format!("negative entry {} at ({},{})", v, i, j),
                    });
                }
                if v > M_CAP {
                    return Err(Error::InvalidMatrix {
                        reason: format!("entry {} at ({},{}) exceeds cap {}", v, i, j, M_CAP),
                    });
                }
            }
        }
        Ok(AttackSensitiveMatrix { n, entries })
    }

    /// The search algorithms' initial matrix: all ones except a zero diagonal.
    pub fn all_ones(n: usize) -> Self {
        let mut entries = vec![1.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 0.0;
        }
        AttackSensitiveMatrix { n, entries }
    }

    /// Uniform off-diagonal value c, zero diagonal.
    pub fn uniform(n: usize, c: f64) -> Result<Self> {
        let mut entries = vec![c; n * n];
        for i in 0..n {
            entries[i * n + i] = 0.0;
        }
        AttackSensitiveMatrix::new(n, entries)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.entries[t * self.n + i]
    }

    /// Adds `delta` to one off-diagonal entry, clamped to [0, M_CAP].
    /// Returns the amount actually applied.
    pub fn add(&mut self, t: usize, i: usize, delta: f64) -> f64 {
        assert_ne!(t, i, "diagonal entries are pinned to 0");
        let old = self.entries[t * self.n + i];
        let new = (old + delta).clamp(0.0, M_CAP);
        self.entries[t * self.n + i] = new;
        new - old
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.entries[t * self.n..(t + 1) * self.n]
    }

    /// CSV: n rows x n columns of decimal literals. Negative entries and a
    /// nonzero diagonal are rejected.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|cell| {
                    cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                        line: lineno + 1,
                        reason: format!("bad number {:?}", cell.trim()),
                    })
                })
                .collect::<Result<_>>()?;
            rows.push(row);
        }
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidMatrix {
                reason: format!("matrix must be square, got {} rows", n),
            });
        }
        AttackSensitiveMatrix::new(n, rows.into_iter().flatten().collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for t in 0..self.n {
            let row: Vec<String> = self.row(t).iter().map(|v| format!("{}", v)).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Cross,
    V1,
    V2,
    CombinedV1,
    CombinedV2,
}

impl LossVariant {
    pub fn needs_matrix(self) -> bool {
        !matches!(self, LossVariant::Cross)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::Cross => "cross",
            LossVariant::V1 => "v1",
            LossVariant::V2 => "v2",
            LossVariant::CombinedV1 => "combined_v1",
            LossVariant::CombinedV2 => "combined_v2",
        }
    }
}

/// Which loss to train with. `lambda` only enters the combined variants;
/// the bare v1/v2 variants are the raw sensitive losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub variant: LossVariant,
    pub lambda: f64,
    pub matrix: Option<AttackSensitiveMatrix>,
}

impl LossSpec {
    pub fn cross() -> Self {
        LossSpec {
            variant: LossVariant::Cross,
            lambda: 0.0,
            matrix: None,
        }
    }

    pub fn combined_v1(lambda: f64, matrix: AttackSensitiveMatrix) -> Self {
        LossSpec {
            variant: LossVariant::CombinedV1,
            lambda,
            matrix: Some(matrix),
        }
    }

    pub fn combined_v2(lambda: f64, matrix: AttackSensitiveMatrix) -> Self {
        LossSpec {
            variant: LossVariant::CombinedV2,
            lambda,
            matrix: Some(matrix),
        }
    }

    fn matrix_for(&self, n: usize) -> Result<&AttackSensitiveMatrix> {
        let m = self.matrix.as_ref().ok_or_else(|| Error::MissingMatrix {
            variant: self.variant.as_str().to_string(),
        })?;
        if m.n() != n {
            return Err(Error::MatrixDimMismatch {
                expected: n,
                got: m.n(),
            });
        }
        Ok(m)
    }
}

fn check_label(label: usize, n: usize) -> Result<()> {
    if label >= n {
        return Err(Error::LabelOutOfRange {
            label,
            n_classes: n,
        });
    }
    Ok(())
}

/// -log(p_t), with p_t clamped to [PROB_FLOOR, 1].
pub fn cross_entropy(true_label: usize, probs: &[f64]) -> Result<f64> {
    check_label(true_label, probs.len())?;
    Ok(-probs[true_label].clamp(PROB_FLOOR, 1.0).ln())
}

/// sum_i (1 - y_i) * p_i * M[t][i]: off-class probability mass weighted by
/// the true label's cost row.
pub fn sensitive_v1(true_label: usize, probs: &[f64], m: &AttackSensitiveMatrix) -> Result<f64> {
    check_label(true_label, probs.len())?;
    if m.n() != probs.len() {
        return Err(Error::MatrixDimMismatch {
            expected: probs.len(),
            got: m.n(),
        });
    }
    let row = m.row(true_label);
    let mut acc = 0.0;
    for i in 0..probs.len() {
        if i != true_label {
            acc += probs[i] * row[i];
        }
    }
    Ok(acc)
}

/// sum_i (p_i - p_t) * M[t][i]: probability gap to the true class weighted
/// by the cost row. May be negative.
pub fn sensitive_v2(true_label: usize, probs: &[f64], m: &AttackSensitiveMatrix) -> Result<f64> {
    check_label(true_label, probs.len())?;
    if m.n() != probs.len() {
        return Err(Error::MatrixDimMismatch {
            expected: probs.len(),
            got: m.n(),
        });
    }
    let row = m.row(true_label);
    let pt = probs[true_label];
    let mut acc = 0.0;
    for i in 0..probs.len() {
        acc += (probs[i] - pt) * row[i];
    }
    Ok(acc)
}

/// Evaluates the configured loss. Combined variants are
/// cross + lambda * sensitive; bare v1/v2 are the sensitive term alone.
pub fn combined(true_label: usize, probs: &[f64], spec: &LossSpec) -> Result<f64> {
    match spec.variant {
        LossVariant::Cross => cross_entropy(true_label, probs),
        LossVariant::V1 => sensitive_v1(true_label, probs, spec.matrix_for(probs.len())?),
        LossVariant::V2 => sensitive_v2(true_label, probs, spec.matrix_for(probs.len())?),
        LossVariant::CombinedV1 => {
            let m = spec.matrix_for(probs.len())?;
            if spec.lambda == 0.0 {
                return cross_entropy(true_label, probs);
            }
            Ok(cross_entropy(true_label, probs)?
                + spec.lambda * sensitive_v1(true_label, probs, m)?)
        }
        LossVariant::CombinedV2 => {
            let m = spec.matrix_for(probs.len())?;
            if spec.lambda == 0.0 {
                return cross_entropy(true_label, probs);
            }
            Ok(cross_entropy(true_label, probs)?
                + spec.lambda * sensitive_v2(true_label, probs, m)?)
        }
    }
}

fn grad_cross(true_label: usize, probs: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; probs.len()];
    g[true_label] = -1.0 / probs[true_label].clamp(PROB_FLOOR, 1.0);
    g
}

fn grad_v1(true_label: usize, n: usize, m: &AttackSensitiveMatrix) -> Vec<f64> {
    let row = m.row(true_label);
    (0..n)
        .map(|i| if i == true_label { 0.0 } else { row[i] })
        .collect()
}

fn grad_v2(true_label: usize, n: usize, m: &AttackSensitiveMatrix) -> Vec<f64> {
    let row = m.row(true_label);
    let off_sum: f64 = (0..n).filter(|i| *i != true_label).map(|i| row[i]).sum();
    (0..n)
        .map(|i| if i == true_label { -off_sum } else { row[i] })
        .collect()
}

/// Exact gradient of the configured loss w.r.t. the probability vector.
pub fn loss_grad_probs(true_label: usize, probs: &[f64], spec: &LossSpec) -> Result<Vec<f64>> {
    check_label(true_label, probs.len())?;
    let n = probs.len();
    match spec.variant {
        LossVariant::Cross => Ok(grad_cross(true_label, probs)),
        LossVariant::V1 => Ok(grad_v1(true_label, n, spec.matrix_for(n)?)),
        LossVariant::V2 => Ok(grad_v2(true_label, n, spec.matrix_for(n)?)),
        LossVariant::CombinedV1 => {
            let m = spec.matrix_for(n)?;
            let mut g = grad_cross(true_label, probs);
            for (a, b) in g.iter_mut().zip(grad_v1(true_label, n, m)) {
                *a += spec.lambda * b;
            }
            Ok(g)
        }
        LossVariant::CombinedV2 => {
            let m = spec.matrix_for(n)?;
            let mut g = grad_cross(true_label, probs);
            for (a, b) in g.iter_mut().zip(grad_v2(true_label, n, m)) {
                *a += spec.lambda * b;
            }
            Ok(g)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m_row0_012() -> AttackSensitiveMatrix {
        // row 0 = [0, 1, 2]; other rows all ones off-diagonal
        AttackSensitiveMatrix::new(
            3,
            vec![0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn cross_entropy_values() {
        assert!(cross_entropy(0, &[1.0, 0.0, 0.0]).unwrap() <= 1e-11);
        let v = cross_entropy(0, &[0.5, 0.25, 0.25]).unwrap();
        assert!((v - 0.6931471805599453).abs() < 1e-15);
        let v = cross_entropy(1, &[0.5, 0.25, 0.25]).unwrap();
        assert!((v - 1.3862943611198906).abs() < 1e-15);
        assert!(cross_entropy(3, &[0.5, 0.25, 0.25]).is_err());
    }

    #[test]
    fn sensitive_v1_values() {
        let m = m_row0_012();
        let v = sensitive_v1(0, &[0.5, 0.3, 0.2], &m).unwrap();
        assert!((v - 0.7).abs() < 1e-15);
        assert_eq!(sensitive_v1(1, &[0.0, 1.0, 0.0], &m).unwrap(), 0.0);
        let zero = AttackSensitiveMatrix::uniform(3, 0.0).unwrap();
        assert_eq!(sensitive_v1(0, &[0.5, 0.3, 0.2], &zero).unwrap(), 0.0);
    }

    #[test]
    fn sensitive_v2_values() {
        let m = m_row0_012();
        let v = sensitive_v2(0, &[0.5, 0.3, 0.2], &m).unwrap();
        assert!((v - (-0.8)).abs() < 1e-15);
        // uniform off-diagonal c and uniform probs: c * (1 - n * p_t) = 0
        let u = AttackSensitiveMatrix::uniform(3, 2.5).unwrap();
        let third = 1.0 / 3.0;
        let v = sensitive_v2(1, &[third, third, third], &u).unwrap();
        assert!(v.abs() < 1e-12);
        // one-hot at t, c = 1, n = 3: 1 - 3 = -2
        let u1 = AttackSensitiveMatrix::uniform(3, 1.0).unwrap();
        let v = sensitive_v2(0, &[1.0, 0.0, 0.0], &u1).unwrap();
        assert!((v - (-2.0)).abs() < 1e-12);
    }

    #[test]
    fn v2_uniform_closed_form() {
        let c = 0.75;
        let u = AttackSensitiveMatrix::uniform(4, c).unwrap();
        let probs = [0.1, 0.2, 0.3, 0.4];
        for t in 0..4 {
            let v = sensitive_v2(t, &probs, &u).unwrap();
            let expected = c * (1.0 - 4.0 * probs[t]);
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn homogeneity_in_m() {
        let m = m_row0_012();
        // scale by a power of two so equality is exact in f64
        let m2 = AttackSensitiveMatrix::new(
            3,
            m.entries().iter().map(|v| 2.0 * v).collect(),
        )
        .unwrap();
        let probs = [0.5, 0.3, 0.2];
        for t in 0..3 {
            assert_eq!(
                2.0 * sensitive_v1(t, &probs, &m).unwrap(),
                sensitive_v1(t, &probs, &m2).unwrap()
            );
            assert_eq!(
                2.0 * sensitive_v2(t, &probs, &m).unwrap(),
                sensitive_v2(t, &probs, &m2).unwrap()
            );
        }
    }

    #[test]
    fn combined_values() {
        let m = m_row0_012();
        // lambda = 0 reduces to cross entropy bit-for-bit
        let spec0 = LossSpec::combined_v1(0.0, m.clone());
        let probs = [0.5, 0.3, 0.2];
        assert_eq!(
            combined(0, &probs, &spec0).unwrap(),
            cross_entropy(0, &probs).unwrap()
        );
        let spec1 = LossSpec::combined_v1(1.0, m);
        let v = combined(0, &probs, &spec1).unwrap();
        assert!((v - 1.3931471805599453).abs() < 1e-15);
    }

    #[test]
    fn combined_requires_matrix() {
        let spec = LossSpec {
            variant: LossVariant::CombinedV2,
            lambda: 1.0,
            matrix: None,
        };
        assert!(combined(0, &[0.5, 0.5], &spec).is_err());
    }

    #[test]
    fn grad_values() {
        let m = m_row0_012();
        let spec_v1 = LossSpec {
            variant: LossVariant::V1,
            lambda: 0.0,
            matrix: Some(m.clone()),
        };
        let g = loss_grad_probs(0, &[0.5, 0.3, 0.2], &spec_v1).unwrap();
        assert_eq!(g, vec![0.0, 1.0, 2.0]);
        let spec_v2 = LossSpec {
            variant: LossVariant::V2,
            lambda: 0.0,
            matrix: Some(m),
        };
        let g = loss_grad_probs(0, &[0.5, 0.3, 0.2], &spec_v2).unwrap();
        assert_eq!(g, vec![-3.0, 1.0, 2.0]);
    }

    #[test]
    fn grads_match_finite_differences_on_probs() {
        // Free embedding: treat the loss as a function on R^n near a
        // distribution point and difference each coordinate.
        let m = m_row0_012();
        let specs = [
            LossSpec::cross(),
            LossSpec {
                variant: LossVariant::V1,
                lambda: 0.0,
                matrix: Some(m.clone()),
            },
            LossSpec {
                variant: LossVariant::V2,
                lambda: 0.0,
                matrix: Some(m.clone()),
            },
            LossSpec::combined_v1(1.0, m.clone()),
            LossSpec::combined_v2(0.7, m),
        ];
        let probs = [0.5, 0.3, 0.2];
        let h = 1e-7;
        for spec in &specs {
            let g = loss_grad_probs(0, &probs, spec).unwrap();
            for i in 0..3 {
                let mut hi = probs;
                let mut lo = probs;
                hi[i] += h;
                lo[i] -= h;
                let num = (combined(0, &hi, spec).unwrap() - combined(0, &lo, spec).unwrap())
                    / (2.0 * h);
                let denom = g[i].abs().max(num.abs()).max(1.0);
                assert!(
                    (g[i] - num).abs() / denom < 1e-6,
                    "{:?} coord {}: {} vs {}",
                    spec.variant,
                    i,
                    g[i],
                    num
                );
            }
        }
    }

    #[test]
    fn matrix_validation() {
        assert!(AttackSensitiveMatrix::new(2, vec![0.0, 1.0, -0.5, 0.0]).is_err());
        assert!(AttackSensitiveMatrix::new(2, vec![1.0, 1.0, 1.0, 0.0]).is_err());
        assert!(AttackSensitiveMatrix::new(2, vec![0.0, 101.0, 1.0, 0.0]).is_err());
        assert!(AttackSensitiveMatrix::new(2, vec![0.0, 1.0, 1.0, 0.0]).is_ok());
    }

    #[test]
    fn csv_round_trip() {
        let m = m_row0_012();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, m.to_csv()).unwrap();
        let back = AttackSensitiveMatrix::from_csv(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn csv_rejects_negative_and_nonzero_diagonal() {
        let dir = tempfile::tempdir().unwrap();
        let neg = dir.path().join("neg.csv");
        std::fs::write(&neg, "0,-1\n1,0\n").unwrap();
        assert!(AttackSensitiveMatrix::from_csv(&neg).is_err());
        let diag = dir.path().join("diag.csv");
        std::fs::write(&diag, "2,1\n1,0\n").unwrap();
        assert!(AttackSensitiveMatrix::from_csv(&diag).is_err());
    }
}
