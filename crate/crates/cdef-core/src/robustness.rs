//! Per-pair robustness measurement: the robustness matrix, the weighted
//! average robustness, the lower bound robustness, and legitimate accuracy.

use crate::attacks::{self, AttackConfig};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One measured cell: how many crafted adversarial examples were still
/// classified as the source class, out of how many were crafted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub num_correct: usize,
    pub num_crafted: usize,
}

impl Cell {
    pub fn value(&self) -> f64 {
        self.num_correct as f64 / self.num_crafted as f64
    }
}

/// n x n matrix of per-pair robustness values. The diagonal is not
/// applicable; off-diagonal cells without samples stay empty rather than
/// reading as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessMatrix {
    n: usize,
    cells: Vec<Option<Cell>>,
}

impl RobustnessMatrix {
    pub fn empty(n: usize) -> Self {
        RobustnessMatrix {
            n,
            cells: vec![None; n * n],
        }
    }

    /// Builds a matrix from known off-diagonal values (weight 1 cells),
    /// for stubs and tests.
    pub fn from_values(n: usize, values: &[(usize, usize, f64)]) -> Self {
        let mut m = RobustnessMatrix::empty(n);
        for (i, j, v) in values {
            m.set(
                *i,
                *j,
                Cell {
                    num_correct: (v * 1_000_000.0).round() as usize,
                    num_crafted: 1_000_000,
                },
            );
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn set(&mut self, i: usize, j: usize, cell: Cell) {
        assert_ne!(i, j, "diagonal cells are not applicable");
        self.cells[i * self.n + j] = Some(cell);
    }

    pub fn cell(&self, i: usize, j: usize) -> Option<Cell> {
        self.cells[i * self.n + j]
    }

    pub fn value(&self, i: usize, j: usize) -> Option<f64> {
        self.cell(i, j).map(|c| c.value())
    }

    /// CSV export: empty cells as "NA", diagonal as an em-dash.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n)
                .map(|j| {
                    if i == j {
                        "—".to_string()
                    } else {
                        match self.value(i, j) {
                            Some(v) => format!("{}", v),
                            None => "NA".to_string(),
                        }
                    }
                })
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// n x n nonnegative weights with a zero diagonal summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl WeightMatrix {
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::InvalidWeights {
                reason: format!("expected {} entries, got {}", n * n, entries.len()),
            });
        }
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = entries[i * n + j];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidWeights {
                        reason: format!("entry ({},{}) = {}", i, j, v),
                    });
                }
                if i == j && v != 0.0 {
                    return Err(Error::InvalidWeights {
                        reason: format!("diagonal entry ({},{}) must be 0", i, j),
                    });
                }
                sum += v;
            }
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidWeights {
                reason: format!("entries sum to {}, expected 1", sum),
            });
        }
        Ok(WeightMatrix { n, entries })
    }

    /// Designated weights on the given cells; the remaining off-diagonal
    /// mass is spread uniformly.
    pub fn designated(n: usize, designated: &[((usize, usize), f64)]) -> Result<Self> {
        let mut entries = vec![0.0; n * n];
        let mut used = 0.0;
        for ((i, j), w) in designated {
            if i == j || *i >= n || *j >= n {
                return Err(Error::InvalidWeights {
                    reason: format!("bad designated cell ({},{})", i, j),
                });
            }
            entries[i * n + j] = *w;
            used += w;
        }
        let rest_cells = n * (n - 1) - designated.len();
        if used > 1.0 + 1e-12 || (rest_cells == 0 && (used - 1.0).abs() > 1e-12) {
            return Err(Error::InvalidWeights {
                reason: format!("designated weights sum to {}", used),
            });
        }
        let fill = if rest_cells > 0 {
            (1.0 - used) / rest_cells as f64
        } else {
            0.0
        };
        for i in 0..n {
            for j in 0..n {
                if i != j && entries[i * n + j] == 0.0 {
                    entries[i * n + j] = fill;
                }
            }
        }
        WeightMatrix::new(n, entries)
    }

    /// Critical-class preset: mass `w` spread uniformly over row `row`, the
    /// remainder uniform over all other off-diagonal cells.
    pub fn critical_row(n: usize, row: usize, mass: f64) -> Result<Self> {
        if row >= n || !(0.0..=1.0).contains(&mass) {
            return Err(Error::InvalidWeights {
                reason: format!("bad critical row {} or mass {}", row, mass),
            });
        }
        let row_cells = n - 1;
        let other_cells = (n - 1) * (n - 1);
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                entries[i * n + j] = if i == row {
                    mass / row_cells as f64
                } else {
                    (1.0 - mass) / other_cells as f64
                };
            }
        }
        WeightMatrix::new(n, entries)
    }

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
            return Err(Error::InvalidWeights {
                reason: format!("matrix must be square, got {} rows", n),
            });
        }
        WeightMatrix::new(n, rows.into_iter().flatten().collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n)
                .map(|j| format!("{}", self.entries[i * self.n + j]))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    /// Off-diagonal cells sorted by weight descending, ties row-major.
    pub fn cells_by_weight_desc(&self) -> Vec<(usize, usize)> {
        let mut cells: Vec<(usize, usize)> = (0..self.n)
            .flat_map(|i| (0..self.n).filter(move |j| *j != i).map(move |j| (i, j)))
            .collect();
        cells.sort_by(|a, b| {
            self.get(b.0, b.1)
                .partial_cmp(&self.get(a.0, a.1))
                .unwrap()
                .then(a.cmp(b))
        });
        cells
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RobustnessConfig {
    pub per_pair_cap: usize,
    /// Alternate reading of the denominator: only attack samples the clean
    /// model already classifies correctly.
    pub only_clean_correct: bool,
    /// Base seed for per-sample attack seed derivation.
    pub seed: u64,
    pub threads: usize,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            per_pair_cap: 25,
            only_clean_correct: false,
            seed: 0,
            threads: 1,
        }
    }
}

/// Measures the full per-pair robustness matrix: for each ordered pair
/// (i, j), craft adversarial examples from up to `per_pair_cap` class-i
/// samples toward j and count how many stay classified as i.
pub fn robustness_matrix(
    model: &Model,
    eval_set: &Dataset,
    attack: &AttackConfig,
    cfg: &RobustnessConfig,
) -> Result<RobustnessMatrix> {
    if eval_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.per_pair_cap == 0 {
        return Err(Error::InvalidConfig {
            reason: "per_pair_cap must be >= 1".to_string(),
        });
    }
    let n = eval_set.n_classes;
    let mut matrix = RobustnessMatrix::empty(n);
    for i in 0..n {
        let mut indices = eval_set.class_indices(i);
        if cfg.only_clean_correct {
            indices.retain(|idx| {
                model
                    .predict(&eval_set.samples[*idx].0)
                    .map(|p| p == i)
                    .unwrap_or(false)
            });
        }
        indices.truncate(cfg.per_pair_cap);
        if indices.is_empty() {
            continue;
        }
        let samples: Vec<(crate::tensor::Tensor, usize)> = indices
            .iter()
            .map(|idx| eval_set.samples[*idx].clone())
            .collect();
        for j in 0..n {
            if i == j {
                continue;
            }
            let pair_seed = cfg
                .seed
                .wrapping_add((i * n + j) as u64)
                .wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let results = attacks::craft_pairset_parallel(
                model,
                &samples,
                i,
                j,
                attack,
                pair_seed,
                cfg.threads,
            )?;
            let num_correct = results.iter().filter(|r| r.predicted == i).count();
            matrix.set(
                i,
                j,
                Cell {
                    num_correct,
                    num_crafted: results.len(),
                },
            );
        }
    }
    Ok(matrix)
}

/// Weighted average robustness: sum over off-diagonal cells of R * W.
pub fn weighted_average(r: &RobustnessMatrix, w: &WeightMatrix) -> Result<f64> {
    if r.n() != w.n() {
        return Err(Error::MatrixDimMismatch {
            expected: r.n(),
            got: w.n(),
        });
    }
    let mut acc = 0.0;
    for i in 0..r.n() {
        for j in 0..r.n() {
            if i == j {
                continue;
            }
            let weight = w.get(i, j);
            if weight == 0.0 {
                continue;
            }
            match r.value(i, j) {
                Some(v) => acc += v * weight,
                None => return Err(Error::WeightedEmptyCell { i, j }),
            }
        }
    }
    Ok(acc)
}

/// Minimum over populated off-diagonal cells, with every cell attaining it
/// (row-major order).
pub fn lower_bound(r: &RobustnessMatrix) -> Result<(f64, Vec<(usize, usize)>)> {
    let mut min: Option<f64> = None;
    for i in 0..r.n() {
        for j in 0..r.n() {
            if i == j {
                continue;
            }
            if let Some(v) = r.value(i, j) {
                min = Some(match min {
                    None => v,
                    Some(m) => m.min(v),
                });
            }
        }
    }
    let min = min.ok_or(Error::AllCellsEmpty)?;
    let mut cells = Vec::new();
    for i in 0..r.n() {
        for j in 0..r.n() {
            if i != j {
                if let Some(v) = r.value(i, j) {
                    if v == min {
                        cells.push((i, j));
                    }
                }
            }
        }
    }
    Ok((min, cells))
}

/// Fraction of samples the model classifies correctly.
pub fn legitimate_accuracy(model: &Model, eval_set: &Dataset) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for (x, label) in &eval_set.samples {
        if model.predict(x)? == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / eval_set.len() as f64)
}
