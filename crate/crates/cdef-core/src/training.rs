//! Training loops: plain mini-batch SGD with any loss spec, plus
//! PGD-based and ensemble adversarial training. Everything is a pure
//! function of the seeds in the config.

use crate::attacks::{self, AttackConfig};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::losses::{self, LossSpec};
use crate::model::{build_model, LayerSpec, Model};
use crate::robustness::legitimate_accuracy;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    None,
    Pgd,
    Ensemble,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub augmentation: Augmentation,
    pub augment_attack_configs: Vec<AttackConfig>,
    pub augment_ratio: f64,
    /// Epochs between adversarial example regeneration.
    pub refresh_every: usize,
    pub attack_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 0.1,
            init_seed: 1,
            shuffle_seed: 2,
            augmentation: Augmentation::None,
            augment_attack_configs: Vec::new(),
            augment_ratio: 0.5,
            refresh_every: 5,
            attack_seed: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub final_train_loss: f64,
    pub clean_val_accuracy: Option<f64>,
    pub fingerprint: String,
    pub loss_curve: Vec<f64>,
}

/// SHA-256 over the JSON encoding of (arch, loss spec, config).
pub fn config_fingerprint(
    arch: &[LayerSpec],
    loss_spec: &LossSpec,
    cfg: &TrainConfig,
) -> Result<String> {
    let blob = serde_json::to_vec(&(arch, loss_spec, cfg))?;
    let mut hasher = Sha256::new();
    hasher.update(&blob);
    Ok(format!("{:x}", hasher.finalize()))
}

fn validate_cfg(cfg: &TrainConfig) -> Result<()> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig {
            reason: "batch_size must be >= 1".to_string(),
        });
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig {
            reason: format!("lr must be > 0, got {}", cfg.lr),
        });
    }
    if !(0.0..=1.0).contains(&cfg.augment_ratio) {
        return Err(Error::InvalidConfig {
            reason: format!("augment_ratio must be in [0,1], got {}", cfg.augment_ratio),
        });
    }
    Ok(())
}

/// During training, any non-finite intermediate (overflowed parameters,
/// NaN logits) is a divergence, not a generic numeric error.
fn nonfinite_to_diverged<T>(r: Result<T>, epoch: usize, batch: usize) -> Result<T> {
    match r {
        Err(Error::NonFinite { .. }) => Err(Error::Diverged { epoch, batch }),
        other => other,
    }
}

fn run_epochs(
    model: &mut Model,
    samples: &[(crate::tensor::Tensor, usize)],
    loss_spec: &LossSpec,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    epoch_offset: usize,
    epochs: usize,
    loss_curve: &mut Vec<f64>,
) -> Result<()> {
    for e in 0..epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(crate::tensor::Tensor, usize)> =
                chunk.iter().map(|i| samples[*i].clone()).collect();
            let mut batch_loss = 0.0;
            for (x, label) in &batch {
                let trace = nonfinite_to_diverged(model.forward(x), epoch_offset + e, bi)?;
                batch_loss += losses::combined(*label, trace.probs.data(), loss_spec)?;
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch_offset + e,
                    batch: bi,
                });
            }
            let grads =
                nonfinite_to_diverged(model.loss_grad_params(&batch, loss_spec), epoch_offset + e, bi)?;
            model.sgd_step(&grads, cfg.lr)?;
            epoch_loss += batch_loss;
            batches += 1;
        }
        loss_curve.push(epoch_loss / batches.max(1) as f64);
    }
    Ok(())
}

/// Plain mini-batch SGD training on the configured loss.
pub fn train(
    arch: &[LayerSpec],
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    loss_spec: &LossSpec,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    validate_cfg(cfg)?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = build_model(arch, train_set.n_classes, cfg.init_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut loss_curve = Vec::new();
    run_epochs(
        &mut model,
        &train_set.samples,
        loss_spec,
        cfg,
        &mut rng,
        0,
        cfg.epochs,
        &mut loss_curve,
    )?;
    let clean_val_accuracy = match val_set {
        Some(v) => Some(legitimate_accuracy(&model, v)?),
        None => None,
    };
    Ok(TrainedModel {
        final_train_loss: loss_curve.last().copied().unwrap_or(f64::NAN),
        clean_val_accuracy,
        fingerprint: config_fingerprint(arch, loss_spec, cfg)?,
        loss_curve,
        model,
    })
}

/// Deterministic subsample of round(ratio * len) indices.
fn subsample_indices(len: usize, ratio: f64, seed: u64) -> Vec<usize> {
    let take = ((ratio * len as f64).round() as usize).min(len);
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(take);
    idx.sort_unstable();
    idx
}

/// Crafts adversarial copies of a deterministic subsample and appends them
/// to the dataset with their original labels. Targets cycle over wrong
/// labels: the k-th selected sample with label l targets
/// (l + 1 + (k mod n-1)) mod n.
pub fn augment_with_attacks(
    model: &Model,
    train_set: &Dataset,
    attack_configs: &[AttackConfig],
    ratio: f64,
    seed: u64,
) -> Result<Dataset> {
    if attack_configs.is_empty() {
        return Err(Error::InvalidConfig {
            reason: "augmentation requires at least one attack config".to_string(),
        });
    }
    let selected = subsample_indices(train_set.len(), ratio, seed);
    let n = train_set.n_classes;
    let mut samples = train_set.samples.clone();
    for (k, idx) in selected.iter().enumerate() {
        let (x, label) = &train_set.samples[*idx];
        let target = (label + 1 + (k % (n - 1))) % n;
        let attack = &attack_configs[k % attack_configs.len()];
        let result = attacks::run_attack(model, x, target, attack, attacks::derive_seed(seed, k))?;
        samples.push((result.x_adv, *label));
    }
    Dataset::new(samples, n)
}

/// PGD-only augmentation.
pub fn augment_pgd(
    model: &Model,
    train_set: &Dataset,
    attack: &AttackConfig,
    ratio: f64,
    seed: u64,
) -> Result<Dataset> {
    augment_with_attacks(model, train_set, std::slice::from_ref(attack), ratio, seed)
}

/// Ensemble augmentation: the subsample is spread round-robin across the
/// attack families.
pub fn augment_ensemble(
    model: &Model,
    train_set: &Dataset,
    attack_configs: &[AttackConfig],
    ratio: f64,
    seed: u64,
) -> Result<Dataset> {
    augment_with_attacks(model, train_set, attack_configs, ratio, seed)
}

/// Adversarial training: regenerates the adversarial examples against the
/// current model every `refresh_every` epochs and trains on the augmented
/// set in between.
pub fn adversarial_train(
    arch: &[LayerSpec],
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    loss_spec: &LossSpec,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    validate_cfg(cfg)?;
    if cfg.augmentation == Augmentation::None {
        return Err(Error::InvalidConfig {
            reason: "adversarial_train requires augmentation != none".to_string(),
        });
    }
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = build_model(arch, train_set.n_classes, cfg.init_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut loss_curve = Vec::new();
    let refresh = cfg.refresh_every.max(1);
    let mut epoch = 0usize;
    let mut round = 0u64;
    while epoch < cfg.epochs {
        let augmented = augment_with_attacks(
            &model,
            train_set,
            &cfg.augment_attack_configs,
            cfg.augment_ratio,
            cfg.attack_seed.wrapping_add(round),
        )?;
        let span = refresh.min(cfg.epochs - epoch);
        run_epochs(
            &mut model,
            &augmented.samples,
            loss_spec,
            cfg,
            &mut rng,
            epoch,
            span,
            &mut loss_curve,
        )?;
        epoch += span;
        round += 1;
    }
    let clean_val_accuracy = match val_set {
        Some(v) => Some(legitimate_accuracy(&model, v)?),
        None => None,
    };
    Ok(TrainedModel {
        final_train_loss: loss_curve.last().copied().unwrap_or(f64::NAN),
        clean_val_accuracy,
        fingerprint: config_fingerprint(arch, loss_spec, cfg)?,
        loss_curve,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackBudget;
    use crate::dataio::gen_blobs;

    fn arch(dim: usize, n: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Affine {
                in_dim: dim,
                out_dim: 16,
            },
            LayerSpec::Relu,
            LayerSpec::Affine {
                in_dim: 16,
                out_dim: n,
            },
        ]
    }

    fn pgd_attack() -> AttackConfig {
        AttackConfig::Pgd {
            budget: AttackBudget {
                epsilon: 0.05,
                alpha: 0.01,
                steps: 5,
                random_start: true,
            },
            seed: 0,
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = gen_blobs(3, 10, 4, 0.1, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let t = train(&arch(4, 3), &data, None, &LossSpec::cross(), &cfg).unwrap();
        let init = build_model(&arch(4, 3), 3, cfg.init_seed).unwrap();
        for (a, b) in t.model.params().iter().zip(init.params()) {
            assert_eq!(a.weight.data(), b.weight.data());
        }
    }

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        let data = gen_blobs(2, 40, 4, 0.05, 11).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            ..Default::default()
        };
        let t = train(&arch(4, 2), &data, Some(&data), &LossSpec::cross(), &cfg).unwrap();
        assert!(t.clean_val_accuracy.unwrap() >= 0.95);
    }

    #[test]
    fn training_is_deterministic() {
        let data = gen_blobs(3, 10, 4, 0.1, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            ..Default::default()
        };
        let a = train(&arch(4, 3), &data, None, &LossSpec::cross(), &cfg).unwrap();
        let b = train(&arch(4, 3), &data, None, &LossSpec::cross(), &cfg).unwrap();
        assert_eq!(a.fingerprint, b.fingerprint);
        for (x, y) in a.model.params().iter().zip(b.model.params()) {
            assert_eq!(x.weight.data(), y.weight.data());
            assert_eq!(x.bias.data(), y.bias.data());
        }
    }

    #[test]
    fn lambda_zero_matches_cross_entropy_training() {
        let data = gen_blobs(3, 10, 4, 0.1, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            ..Default::default()
        };
        let m = crate::losses::AttackSensitiveMatrix::all_ones(3);
        let a = train(&arch(4, 3), &data, None, &LossSpec::cross(), &cfg).unwrap();
        let b = train(
            &arch(4, 3),
            &data,
            None,
            &LossSpec::combined_v2(0.0, m),
            &cfg,
        )
        .unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        for (x, y) in a.model.params().iter().zip(b.model.params()) {
            assert_eq!(x.weight.data(), y.weight.data());
        }
    }

    #[test]
    fn augment_ratio_cardinality() {
        let data = gen_blobs(3, 10, 4, 0.1, 1).unwrap();
        let model = build_model(&arch(4, 3), 3, 1).unwrap();
        let a = augment_pgd(&model, &data, &pgd_attack(), 0.0, 5).unwrap();
        assert_eq!(a.len(), data.len());
        let b = augment_pgd(&model, &data, &pgd_attack(), 1.0, 5).unwrap();
        assert_eq!(b.len(), 2 * data.len());
        // appended samples keep labels and satisfy box bounds
        for (x, _) in &b.samples[data.len()..] {
            assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn augment_ensemble_partitions_round_robin() {
        let data = gen_blobs(3, 10, 4, 0.1, 1).unwrap();
        let model = build_model(&arch(4, 3), 3, 1).unwrap();
        let configs = vec![
            AttackConfig::Ifgsm {
                budget: AttackBudget::default(),
            },
            pgd_attack(),
            AttackConfig::Cw {
                config: crate::attacks::CwConfig {
                    steps: 10,
                    ..Default::default()
                },
            },
        ];
        let out = augment_ensemble(&model, &data, &configs, 1.0, 5).unwrap();
        assert_eq!(out.len(), 2 * data.len());
        let single = augment_ensemble(&model, &data, &configs[1..2], 1.0, 5).unwrap();
        let pgd_only = augment_pgd(&model, &data, &configs[1], 1.0, 5).unwrap();
        for ((x, _), (y, _)) in single.samples.iter().zip(&pgd_only.samples) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn augmentation_changes_final_params() {
        let data = gen_blobs(3, 20, 4, 0.12, 1).unwrap();
        let plain_cfg = TrainConfig {
            epochs: 6,
            ..Default::default()
        };
        let adv_cfg = TrainConfig {
            epochs: 6,
            augmentation: Augmentation::Pgd,
            augment_attack_configs: vec![pgd_attack()],
            refresh_every: 10,
            ..Default::default()
        };
        let a = train(&arch(4, 3), &data, None, &LossSpec::cross(), &plain_cfg).unwrap();
        let b = adversarial_train(&arch(4, 3), &data, None, &LossSpec::cross(), &adv_cfg).unwrap();
        let same = a
            .model
            .params()
            .iter()
            .zip(b.model.params())
            .all(|(x, y)| x.weight.data() == y.weight.data());
        assert!(!same);
    }

    #[test]
    fn adversarial_train_requires_augmentation() {
        let data = gen_blobs(3, 10, 4, 0.1, 1).unwrap();
        let cfg = TrainConfig::default();
        assert!(adversarial_train(&arch(4, 3), &data, None, &LossSpec::cross(), &cfg).is_err());
    }
}
