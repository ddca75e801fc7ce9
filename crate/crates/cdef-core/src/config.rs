//! Run configuration: one TOML file drives every command. Sections map
//! onto the owning modules' config types; commands ignore sections they do
//! not use. All randomness funnels through the named seeds here.

use crate::attacks::{AttackBudget, AttackConfig, CwConfig};
use crate::dataio::{self, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::losses::{AttackSensitiveMatrix, LossSpec, LossVariant};
use crate::model::LayerSpec;
use crate::robustness::{RobustnessConfig, WeightMatrix};
use crate::search::SearchConfig;
use crate::training::{Augmentation, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn invalid(reason: impl Into<String>) -> Error {
    Error::InvalidConfig {
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub robustness: RobustnessSection,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// "blobs", "csv", or "idx".
    pub source: String,
    // blobs
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_spread")]
    pub spread: f64,
    #[serde(default)]
    pub data_seed: u64,
    // csv
    #[serde(default)]
    pub path: Option<PathBuf>,
    // idx
    #[serde(default)]
    pub images_path: Option<PathBuf>,
    #[serde(default)]
    pub labels_path: Option<PathBuf>,
    /// Target side length to area-average IDX images down to.
    #[serde(default)]
    pub downsample: Option<usize>,
    // split
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default = "default_val_frac")]
    pub val_frac: f64,
    #[serde(default = "default_test_frac")]
    pub test_frac: f64,
    #[serde(default = "default_split_seed")]
    pub split_seed: u64,
}

fn default_n_classes() -> usize {
    3
}
fn default_per_class() -> usize {
    300
}
fn default_feature_dim() -> usize {
    8
}
fn default_spread() -> f64 {
    0.12
}
fn default_train_frac() -> f64 {
    0.6
}
fn default_val_frac() -> f64 {
    0.2
}
fn default_test_frac() -> f64 {
    0.2
}
fn default_split_seed() -> u64 {
    7
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Layer strings: "affine IN OUT" or "relu". The final affine's output
    /// dimension must equal the number of classes.
    pub layers: Vec<String>,
    #[serde(default = "default_one_u64")]
    pub seed: u64,
}

fn default_one_u64() -> u64 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    /// "cross", "v1", "v2", "combined_v1", or "combined_v2".
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// CSV file holding the attack sensitive matrix; if absent for a
    /// matrix-bearing variant, `uniform_m` fills every off-diagonal entry.
    #[serde(default)]
    pub matrix_path: Option<PathBuf>,
    #[serde(default = "default_lambda")]
    pub uniform_m: f64,
}

fn default_variant() -> String {
    "cross".to_string()
}
fn default_lambda() -> f64 {
    1.0
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            variant: default_variant(),
            lambda: default_lambda(),
            matrix_path: None,
            uniform_m: default_lambda(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    /// "none", "pgd", or "ensemble". The augmenting attacks reuse the
    /// [attack] section's budget.
    pub augmentation: String,
    pub augment_ratio: f64,
    pub refresh_every: usize,
    pub attack_seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            init_seed: d.init_seed,
            shuffle_seed: d.shuffle_seed,
            augmentation: "none".to_string(),
            augment_ratio: d.augment_ratio,
            refresh_every: d.refresh_every,
            attack_seed: d.attack_seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    /// "ifgsm", "pgd", or "cw".
    pub kind: String,
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
    pub seed: u64,
    // Carlini-Wagner knobs.
    pub c: f64,
    pub kappa: f64,
    pub step_size: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        let b = AttackBudget::default();
        let cw = CwConfig::default();
        AttackSection {
            kind: "pgd".to_string(),
            epsilon: b.epsilon,
            alpha: b.alpha,
            steps: b.steps,
            random_start: b.random_start,
            seed: 11,
            c: cw.c,
            kappa: cw.kappa,
            step_size: cw.step_size,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessSection {
    pub per_pair_cap: usize,
    pub only_clean_correct: bool,
    pub seed: u64,
    /// CSV file holding the weight matrix for the weighted average.
    pub weights_path: Option<PathBuf>,
}

impl Default for RobustnessSection {
    fn default() -> Self {
        let d = RobustnessConfig::default();
        RobustnessSection {
            per_pair_cap: d.per_pair_cap,
            only_clean_correct: d.only_clean_correct,
            seed: d.seed,
            weights_path: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub xi: f64,
    pub delta: f64,
    pub batch_t: usize,
    pub m_cap: f64,
    pub max_outer_iters: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        let d = SearchConfig::default();
        SearchSection {
            xi: d.xi,
            delta: d.delta,
            batch_t: d.batch_t,
            m_cap: d.m_cap,
            max_outer_iters: d.max_outer_iters,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub threads: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("out"),
            threads: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| invalid(format!("config parse: {e}")))?;
        cfg.validate(path.parent().unwrap_or(Path::new(".")))?;
        Ok(cfg)
    }

    /// Structural checks that do not require loading the data.
    pub fn validate(&self, base: &Path) -> Result<()> {
        match self.data.source.as_str() {
            "blobs" => {
                if self.data.n_classes < 2 {
                    return Err(invalid("data.n_classes must be >= 2"));
                }
            }
            "csv" => {
                let p = self
                    .data
                    .path
                    .as_ref()
                    .ok_or_else(|| invalid("data.path required for source = \"csv\""))?;
                require_file(base, p, "data.path")?;
            }
            "idx" => {
                for (p, name) in [
                    (&self.data.images_path, "data.images_path"),
                    (&self.data.labels_path, "data.labels_path"),
                ] {
                    let p = p
                        .as_ref()
                        .ok_or_else(|| invalid(format!("{name} required for source = \"idx\"")))?;
                    require_file(base, p, name)?;
                }
            }
            other => return Err(invalid(format!("unknown data.source {other:?}"))),
        }
        for f in [
            self.data.train_frac,
            self.data.val_frac,
            self.data.test_frac,
        ] {
            if !(f > 0.0) {
                return Err(invalid("split fractions must be positive"));
            }
        }
        self.arch()?;
        let variant = self.loss_variant()?;
        if variant.needs_matrix() {
            if let Some(p) = &self.loss.matrix_path {
                require_file(base, p, "loss.matrix_path")?;
            }
        }
        match self.train.augmentation.as_str() {
            "none" | "pgd" | "ensemble" => {}
            other => return Err(invalid(format!("unknown train.augmentation {other:?}"))),
        }
        match self.attack.kind.as_str() {
            "ifgsm" | "pgd" | "cw" => {}
            other => return Err(invalid(format!("unknown attack.kind {other:?}"))),
        }
        if let Some(p) = &self.robustness.weights_path {
            require_file(base, p, "robustness.weights_path")?;
        }
        Ok(())
    }

    /// Loads and splits the configured dataset into (train, val, test).
    pub fn load_dataset(&self, base: &Path) -> Result<(Dataset, Dataset, Dataset)> {
        let full = match self.data.source.as_str() {
            "blobs" => dataio::gen_blobs(
                self.data.n_classes,
                self.data.per_class,
                self.data.feature_dim,
                self.data.spread,
                self.data.data_seed,
            )?,
            "csv" => dataio::load_csv(
                &base.join(self.data.path.as_ref().unwrap()),
                self.data.n_classes,
            )?,
            "idx" => dataio::load_idx(
                &base.join(self.data.images_path.as_ref().unwrap()),
                &base.join(self.data.labels_path.as_ref().unwrap()),
                self.data.downsample,
            )?,
            other => return Err(invalid(format!("unknown data.source {other:?}"))),
        };
        dataio::split(
            &full,
            &SplitSpec {
                fractions: (
                    self.data.train_frac,
                    self.data.val_frac,
                    self.data.test_frac,
                ),
                seed: self.data.split_seed,
            },
        )
    }

    pub fn arch(&self) -> Result<Vec<LayerSpec>> {
        if self.model.layers.is_empty() {
            return Err(invalid("model.layers must not be empty"));
        }
        let mut out = Vec::with_capacity(self.model.layers.len());
        for s in &self.model.layers {
            out.push(parse_layer(s)?);
        }
        Ok(out)
    }

    fn loss_variant(&self) -> Result<LossVariant> {
        Ok(match self.loss.variant.as_str() {
            "cross" => LossVariant::Cross,
            "v1" => LossVariant::V1,
            "v2" => LossVariant::V2,
            "combined_v1" => LossVariant::CombinedV1,
            "combined_v2" => LossVariant::CombinedV2,
            other => return Err(invalid(format!("unknown loss.variant {other:?}"))),
        })
    }

    /// Builds the loss spec, resolving the matrix from `loss.matrix_path`
    /// or a uniform fill. `n` is the number of classes.
    pub fn loss_spec(&self, base: &Path, n: usize) -> Result<LossSpec> {
        let variant = self.loss_variant()?;
        let matrix = if variant.needs_matrix() {
            let m = match &self.loss.matrix_path {
                Some(p) => AttackSensitiveMatrix::from_csv(&base.join(p))?,
                None => AttackSensitiveMatrix::uniform(n, self.loss.uniform_m)?,
            };
            if m.n() != n {
                return Err(Error::MatrixDimMismatch {
                    expected: n,
                    got: m.n(),
                });
            }
            Some(m)
        } else {
            None
        };
        Ok(LossSpec {
            variant,
            lambda: self.loss.lambda,
            matrix,
        })
    }

    pub fn attack_config(&self) -> AttackConfig {
        let budget = AttackBudget {
            epsilon: self.attack.epsilon,
            alpha: self.attack.alpha,
            steps: self.attack.steps,
            random_start: self.attack.random_start,
        };
        match self.attack.kind.as_str() {
            "ifgsm" => AttackConfig::Ifgsm { budget },
            "cw" => AttackConfig::Cw {
                config: CwConfig {
                    c: self.attack.c,
                    kappa: self.attack.kappa,
                    steps: self.attack.steps,
                    step_size: self.attack.step_size,
                },
            },
            _ => AttackConfig::Pgd {
                budget,
                seed: self.attack.seed,
            },
        }
    }

    /// PGD with the configured budget, used by augmentation regardless of
    /// the evaluation attack kind.
    fn pgd_for_augmentation(&self) -> AttackConfig {
        AttackConfig::Pgd {
            budget: AttackBudget {
                epsilon: self.attack.epsilon,
                alpha: self.attack.alpha,
                steps: self.attack.steps,
                random_start: self.attack.random_start,
            },
            seed: self.attack.seed,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let (augmentation, attack_configs) = match self.train.augmentation.as_str() {
            "none" => (Augmentation::None, Vec::new()),
            "pgd" => (Augmentation::Pgd, vec![self.pgd_for_augmentation()]),
            "ensemble" => (
                Augmentation::Ensemble,
                vec![
                    AttackConfig::Ifgsm {
                        budget: AttackBudget {
                            epsilon: self.attack.epsilon,
                            alpha: self.attack.alpha,
                            steps: self.attack.steps,
                            random_start: false,
                        },
                    },
                    self.pgd_for_augmentation(),
                ],
            ),
            other => return Err(invalid(format!("unknown train.augmentation {other:?}"))),
        };
        Ok(TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            init_seed: self.train.init_seed,
            shuffle_seed: self.train.shuffle_seed,
            augmentation,
            augment_attack_configs: attack_configs,
            augment_ratio: self.train.augment_ratio,
            refresh_every: self.train.refresh_every,
            attack_seed: self.train.attack_seed,
        })
    }

    pub fn robustness_config(&self) -> RobustnessConfig {
        RobustnessConfig {
            per_pair_cap: self.robustness.per_pair_cap,
            only_clean_correct: self.robustness.only_clean_correct,
            seed: self.robustness.seed,
            threads: self.output.threads,
        }
    }

    pub fn weight_matrix(&self, base: &Path) -> Result<Option<WeightMatrix>> {
        match &self.robustness.weights_path {
            Some(p) => Ok(Some(WeightMatrix::from_csv(&base.join(p))?)),
            None => Ok(None),
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            xi: self.search.xi,
            delta: self.search.delta,
            batch_t: self.search.batch_t,
            m_cap: self.search.m_cap,
            max_outer_iters: self.search.max_outer_iters,
        }
    }
}

fn require_file(base: &Path, p: &Path, name: &str) -> Result<()> {
    let full = base.join(p);
    if !full.is_file() {
        return Err(invalid(format!("{name}: file not found: {}", full.display())));
    }
    Ok(())
}

fn parse_layer(s: &str) -> Result<LayerSpec> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    match parts.as_slice() {
        ["relu"] => Ok(LayerSpec::Relu),
        ["affine", a, b] => {
            let in_dim: usize = a
                .parse()
                .map_err(|_| invalid(format!("bad affine dimension in {s:?}")))?;
            let out_dim: usize = b
                .parse()
                .map_err(|_| invalid(format!("bad affine dimension in {s:?}")))?;
            if in_dim == 0 || out_dim == 0 {
                return Err(invalid(format!("affine dimensions must be positive in {s:?}")));
            }
            Ok(LayerSpec::Affine { in_dim, out_dim })
        }
        _ => Err(invalid(format!(
            "unknown layer {s:?} (expected \"affine IN OUT\" or \"relu\")"
        ))),
    }
}
