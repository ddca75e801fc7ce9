//! Command drivers behind the CLI: train, robustness, search, attack.
//! Each loads one run config, writes its outputs plus a manifest into the
//! output directory, and returns the usual `Result` (the binary maps
//! errors to exit codes).

use crate::attacks::{craft_pairset_parallel, results_to_csv};
use crate::config::RunConfig;
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::losses::{AttackSensitiveMatrix, LossSpec, LossVariant};
use crate::manifest::RunManifest;
use crate::model::{LayerSpec, Model};
use crate::robustness::{
    legitimate_accuracy, lower_bound, robustness_matrix, weighted_average, RobustnessConfig,
    RobustnessMatrix,
};
use crate::search::{search_lower_bound, search_weighted, SearchEnv, SearchTrace};
use crate::training::{self, Augmentation, TrainConfig, TrainedModel};
use serde::Serialize;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Weighted,
    Lower,
}

impl Objective {
    pub fn parse(s: &str) -> Result<Objective> {
        match s {
            "weighted" => Ok(Objective::Weighted),
            "lower" => Ok(Objective::Lower),
            other => Err(Error::InvalidConfig {
                reason: format!("unknown objective {other:?} (expected weighted or lower)"),
            }),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path.display().to_string(), e)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

fn read_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(io_err(path))
}

/// Everything a command needs from disk: the parsed config, its raw bytes
/// (for the manifest hash), the directory paths resolve against, and the
/// output directory.
struct Ctx {
    cfg: RunConfig,
    raw: Vec<u8>,
    base: PathBuf,
    out: PathBuf,
}

fn load_ctx(config_path: &Path, out_override: Option<&Path>) -> Result<Ctx> {
    let raw = read_bytes(config_path)?;
    let cfg = RunConfig::load(config_path)?;
    let base = config_path
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let out = match out_override {
        Some(p) => p.to_path_buf(),
        None => base.join(&cfg.output.dir),
    };
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    Ok(Ctx {
        cfg,
        raw,
        base,
        out,
    })
}

fn seeds_of(cfg: &RunConfig) -> Vec<(String, u64)> {
    vec![
        ("data".to_string(), cfg.data.data_seed),
        ("split".to_string(), cfg.data.split_seed),
        ("init".to_string(), cfg.train.init_seed),
        ("shuffle".to_string(), cfg.train.shuffle_seed),
        ("train_attack".to_string(), cfg.train.attack_seed),
        ("attack".to_string(), cfg.attack.seed),
        ("robustness".to_string(), cfg.robustness.seed),
    ]
}

fn write_and_record(manifest: &mut RunManifest, path: &Path, content: &str) -> Result<()> {
    write_file(path, content)?;
    manifest.add_file(path)
}

fn finish_manifest(manifest: &RunManifest, out: &Path) -> Result<()> {
    write_file(&out.join("manifest.json"), &manifest.to_json()?)?;
    Ok(())
}

/// Trains with or without adversarial augmentation per the config.
fn fit(
    arch: &[LayerSpec],
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    loss_spec: &LossSpec,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    if cfg.augmentation == Augmentation::None {
        training::train(arch, train_set, val_set, loss_spec, cfg)
    } else {
        training::adversarial_train(arch, train_set, val_set, loss_spec, cfg)
    }
}

fn check_model_compat(model: &Model, data: &Dataset) -> Result<()> {
    if model.n_classes() != data.n_classes {
        return Err(Error::InvalidConfig {
            reason: format!(
                "model has {} classes but the dataset has {}",
                model.n_classes(),
                data.n_classes
            ),
        });
    }
    if model.input_dim() != data.feature_dim {
        return Err(Error::InvalidConfig {
            reason: format!(
                "model input dim {} does not match feature dim {}",
                model.input_dim(),
                data.feature_dim
            ),
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainMetrics {
    final_train_loss: f64,
    clean_val_accuracy: Option<f64>,
    clean_test_accuracy: f64,
    fingerprint: String,
    loss_curve: Vec<f64>,
}

/// `train`: fit the configured model and write model.json, metrics.json,
/// and manifest.json.
pub fn cmd_train(config_path: &Path, out_override: Option<&Path>) -> Result<()> {
    let ctx = load_ctx(config_path, out_override)?;
    let (train_set, val_set, test_set) = ctx.cfg.load_dataset(&ctx.base)?;
    let arch = ctx.cfg.arch()?;
    let loss_spec = ctx.cfg.loss_spec(&ctx.base, train_set.n_classes)?;
    let train_cfg = ctx.cfg.train_config()?;

    let trained = fit(&arch, &train_set, Some(&val_set), &loss_spec, &train_cfg)?;
    let metrics = TrainMetrics {
        final_train_loss: trained.final_train_loss,
        clean_val_accuracy: trained.clean_val_accuracy,
        clean_test_accuracy: legitimate_accuracy(&trained.model, &test_set)?,
        fingerprint: trained.fingerprint.clone(),
        loss_curve: trained.loss_curve.clone(),
    };

    let mut manifest = RunManifest::new("train", &ctx.raw, seeds_of(&ctx.cfg));
    write_and_record(&mut manifest, &ctx.out.join("model.json"), &trained.model.to_json()?)?;
    write_and_record(
        &mut manifest,
        &ctx.out.join("metrics.json"),
        &serde_json::to_string_pretty(&metrics)?,
    )?;
    finish_manifest(&manifest, &ctx.out)
}

#[derive(Serialize)]
struct CellReport {
    i: usize,
    j: usize,
    num_correct: usize,
    num_crafted: usize,
    value: f64,
}

#[derive(Serialize)]
struct RobustnessReport {
    n: usize,
    attack: String,
    clean_test_accuracy: f64,
    cells: Vec<CellReport>,
    weighted_average: Option<f64>,
    lower_bound: f64,
    argmin_cells: Vec<(usize, usize)>,
}

fn cell_reports(r: &RobustnessMatrix) -> Vec<CellReport> {
    let mut cells = Vec::new();
    for i in 0..r.n() {
        for j in 0..r.n() {
            if i == j {
                continue;
            }
            if let Some(c) = r.cell(i, j) {
                cells.push(CellReport {
                    i,
                    j,
                    num_correct: c.num_correct,
                    num_crafted: c.num_crafted,
                    value: c.value(),
                });
            }
        }
    }
    cells
}

/// `robustness`: measure the per-pair robustness matrix of a trained model
/// on the test split and write robustness.csv, robustness.json, and
/// manifest.json.
pub fn cmd_robustness(config_path: &Path, model_path: &Path, out_override: Option<&Path>) -> Result<()> {
    let ctx = load_ctx(config_path, out_override)?;
    let model = Model::from_json(&read_string(model_path)?)?;
    let (_, _, test_set) = ctx.cfg.load_dataset(&ctx.base)?;
    check_model_compat(&model, &test_set)?;

    let attack = ctx.cfg.attack_config();
    let rob_cfg = ctx.cfg.robustness_config();
    let r = robustness_matrix(&model, &test_set, &attack, &rob_cfg)?;
    let weights = ctx.cfg.weight_matrix(&ctx.base)?;
    let weighted = match &weights {
        Some(w) => Some(weighted_average(&r, w)?),
        None => None,
    };
    let (min_r, argmin) = lower_bound(&r)?;
    let report = RobustnessReport {
        n: r.n(),
        attack: attack.name().to_string(),
        clean_test_accuracy: legitimate_accuracy(&model, &test_set)?,
        cells: cell_reports(&r),
        weighted_average: weighted,
        lower_bound: min_r,
        argmin_cells: argmin,
    };

    let mut manifest = RunManifest::new("robustness", &ctx.raw, seeds_of(&ctx.cfg));
    manifest.add_file(model_path)?;
    write_and_record(&mut manifest, &ctx.out.join("robustness.csv"), &r.to_csv())?;
    write_and_record(
        &mut manifest,
        &ctx.out.join("robustness.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    finish_manifest(&manifest, &ctx.out)
}

/// `attack`: craft adversarial examples from every test-split sample of
/// class `source` toward `target` and write a per-sample CSV.
pub fn cmd_attack(
    config_path: &Path,
    model_path: &Path,
    source: usize,
    target: usize,
    out_override: Option<&Path>,
) -> Result<()> {
    let ctx = load_ctx(config_path, out_override)?;
    let model = Model::from_json(&read_string(model_path)?)?;
    let (_, _, test_set) = ctx.cfg.load_dataset(&ctx.base)?;
    check_model_compat(&model, &test_set)?;
    let n = test_set.n_classes;
    for class in [source, target] {
        if class >= n {
            return Err(Error::LabelOutOfRange {
                label: class,
                n_classes: n,
            });
        }
    }
    if source == target {
        return Err(Error::InvalidConfig {
            reason: "source and target classes must differ".to_string(),
        });
    }

    let samples: Vec<_> = test_set
        .class_indices(source)
        .into_iter()
        .map(|idx| test_set.samples[idx].clone())
        .collect();
    let results = craft_pairset_parallel(
        &model,
        &samples,
        source,
        target,
        &ctx.cfg.attack_config(),
        ctx.cfg.robustness.seed,
        ctx.cfg.output.threads,
    )?;

    let mut manifest = RunManifest::new("attack", &ctx.raw, seeds_of(&ctx.cfg));
    manifest.add_file(model_path)?;
    write_and_record(
        &mut manifest,
        &ctx.out.join(format!("attack_{source}_{target}.csv")),
        &results_to_csv(&results, source, target),
    )?;
    finish_manifest(&manifest, &ctx.out)
}

/// Search environment backed by real retraining: every accuracy query
/// retrains from scratch under the candidate matrix. Since retraining is a
/// pure function of the matrix, results are memoized by its exact bits —
/// reverts revisit earlier matrices for free.
pub struct RetrainEnv<'a> {
    arch: &'a [LayerSpec],
    train_set: &'a Dataset,
    val_set: &'a Dataset,
    eval_set: &'a Dataset,
    variant: LossVariant,
    lambda: f64,
    train_cfg: TrainConfig,
    attack: crate::attacks::AttackConfig,
    rob_cfg: RobustnessConfig,
    cache: HashMap<Vec<u64>, (f64, Model)>,
    last: Option<Model>,
    /// Retrainings actually executed (cache misses).
    pub retrain_count: usize,
}

impl<'a> RetrainEnv<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        arch: &'a [LayerSpec],
        train_set: &'a Dataset,
        val_set: &'a Dataset,
        eval_set: &'a Dataset,
        variant: LossVariant,
        lambda: f64,
        train_cfg: TrainConfig,
        attack: crate::attacks::AttackConfig,
        rob_cfg: RobustnessConfig,
    ) -> Result<RetrainEnv<'a>> {
        if !variant.needs_matrix() {
            return Err(Error::InvalidConfig {
                reason: "search requires a matrix-bearing loss variant".to_string(),
            });
        }
        Ok(RetrainEnv {
            arch,
            train_set,
            val_set,
            eval_set,
            variant,
            lambda,
            train_cfg,
            attack,
            rob_cfg,
            cache: HashMap::new(),
            last: None,
            retrain_count: 0,
        })
    }

    pub fn last_model(&self) -> Option<&Model> {
        self.last.as_ref()
    }

    fn key(m: &AttackSensitiveMatrix) -> Vec<u64> {
        m.entries().iter().map(|v| v.to_bits()).collect()
    }
}

impl SearchEnv for RetrainEnv<'_> {
    fn accuracy(&mut self, m: &AttackSensitiveMatrix) -> Result<f64> {
        let key = Self::key(m);
        if let Some((acc, model)) = self.cache.get(&key) {
            self.last = Some(model.clone());
            return Ok(*acc);
        }
        let spec = LossSpec {
            variant: self.variant,
            lambda: self.lambda,
            matrix: Some(m.clone()),
        };
        let trained = fit(
            self.arch,
            self.train_set,
            Some(self.val_set),
            &spec,
            &self.train_cfg,
        )?;
        self.retrain_count += 1;
        let acc = trained
            .clean_val_accuracy
            .expect("validation set was provided");
        self.cache.insert(key, (acc, trained.model.clone()));
        self.last = Some(trained.model);
        Ok(acc)
    }

    fn robustness(&mut self) -> Result<RobustnessMatrix> {
        let model = self.last.as_ref().ok_or_else(|| Error::InvalidConfig {
            reason: "robustness queried before any retraining".to_string(),
        })?;
        robustness_matrix(model, self.eval_set, &self.attack, &self.rob_cfg)
    }
}

#[derive(Serialize)]
struct SearchReport {
    objective: String,
    constraint_infeasible: bool,
    iterations: usize,
    final_accuracy: f64,
    weighted_average: Option<f64>,
    lower_bound: f64,
    argmin_cells: Vec<(usize, usize)>,
}

/// `search`: greedily refine the attack sensitive matrix under the clean
/// accuracy constraint, then write m_final.csv, trace.jsonl, model.json,
/// search.json, and manifest.json. An infeasible constraint is reported in
/// search.json, not treated as a failure.
pub fn cmd_search(
    config_path: &Path,
    objective: Objective,
    resume_path: Option<&Path>,
    out_override: Option<&Path>,
) -> Result<()> {
    let ctx = load_ctx(config_path, out_override)?;
    let (train_set, val_set, test_set) = ctx.cfg.load_dataset(&ctx.base)?;
    let n = train_set.n_classes;
    let arch = ctx.cfg.arch()?;
    // The loss section provides the variant and lambda; the search owns
    // the matrix itself.
    let loss_spec = ctx.cfg.loss_spec(&ctx.base, n)?;
    let weights = ctx.cfg.weight_matrix(&ctx.base)?;
    if objective == Objective::Weighted && weights.is_none() {
        return Err(Error::InvalidConfig {
            reason: "weighted objective requires robustness.weights_path".to_string(),
        });
    }
    let resume = match resume_path {
        Some(p) => Some(SearchTrace::from_jsonl(&read_string(p)?)?),
        None => None,
    };

    let mut env = RetrainEnv::new(
        &arch,
        &train_set,
        &val_set,
        &test_set,
        loss_spec.variant,
        loss_spec.lambda,
        ctx.cfg.train_config()?,
        ctx.cfg.attack_config(),
        ctx.cfg.robustness_config(),
    )?;
    let search_cfg = ctx.cfg.search_config();
    let (m_final, trace) = match objective {
        Objective::Weighted => search_weighted(
            &mut env,
            weights.as_ref().unwrap(),
            &search_cfg,
            resume.as_ref(),
        )?,
        Objective::Lower => search_lower_bound(&mut env, &search_cfg, n, resume.as_ref())?,
    };

    // Model for the final matrix; memoized unless the trace ended on a
    // reverted state never trained before (only possible on resume).
    let final_acc = env.accuracy(&m_final)?;
    let final_model = env.last_model().expect("accuracy was just queried").clone();
    let r = robustness_matrix(
        &final_model,
        &test_set,
        &ctx.cfg.attack_config(),
        &ctx.cfg.robustness_config(),
    )?;
    let (min_r, argmin) = lower_bound(&r)?;
    let report = SearchReport {
        objective: match objective {
            Objective::Weighted => "weighted".to_string(),
            Objective::Lower => "lower".to_string(),
        },
        constraint_infeasible: trace.constraint_infeasible,
        iterations: trace.records.len(),
        final_accuracy: final_acc,
        weighted_average: match &weights {
            Some(w) => Some(weighted_average(&r, w)?),
            None => None,
        },
        lower_bound: min_r,
        argmin_cells: argmin,
    };

    let mut manifest = RunManifest::new("search", &ctx.raw, seeds_of(&ctx.cfg));
    write_and_record(&mut manifest, &ctx.out.join("m_final.csv"), &m_final.to_csv())?;
    write_and_record(&mut manifest, &ctx.out.join("trace.jsonl"), &trace.to_jsonl()?)?;
    write_and_record(&mut manifest, &ctx.out.join("model.json"), &final_model.to_json()?)?;
    write_and_record(
        &mut manifest,
        &ctx.out.join("search.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    finish_manifest(&manifest, &ctx.out)
}
