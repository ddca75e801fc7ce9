//! Targeted adversarial example generation: iterative FGSM, PGD with random
//! start, and C&W L2. Inputs live in the [0,1] box; IFGSM/PGD additionally
//! stay inside an L-infinity ball around the original input.

use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::model::Model;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackBudget {
    /// L-infinity radius in input units.
    pub epsilon: f64,
    /// Per-step size.
    pub alpha: f64,
    pub steps: usize,
    /// PGD only: start from a uniform point in the epsilon ball.
    pub random_start: bool,
}

impl Default for AttackBudget {
    fn default() -> Self {
        AttackBudget {
            epsilon: 0.05,
            alpha: 0.005,
            steps: 20,
            random_start: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CwConfig {
    /// Tradeoff constant between L2 distance and the logit margin term.
    pub c: f64,
    /// Confidence margin kappa.
    pub kappa: f64,
    pub steps: usize,
    pub step_size: f64,
}

impl Default for CwConfig {
    fn default() -> Self {
        CwConfig {
            c: 1.0,
            kappa: 0.0,
            steps: 200,
            step_size: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttackConfig {
    Ifgsm { budget: AttackBudget },
    Pgd { budget: AttackBudget, seed: u64 },
    Cw { config: CwConfig },
}

impl AttackConfig {
    pub fn name(&self) -> &'static str {
        match self {
            AttackConfig::Ifgsm { .. } => "ifgsm",
            AttackConfig::Pgd { .. } => "pgd",
            AttackConfig::Cw { .. } => "cw",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdversarialResult {
    pub x_adv: Tensor,
    pub predicted: usize,
    pub success: bool,
    pub linf_norm: f64,
    pub l2_norm: f64,
    pub steps_used: usize,
}

fn validate_attack_input(model: &Model, x: &Tensor, target: usize) -> Result<()> {
    if x.len() != model.input_dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("input of length {}", model.input_dim()),
            got: format!("{}", x.len()),
        });
    }
    if target >= model.n_classes() {
        return Err(Error::LabelOutOfRange {
            label: target,
            n_classes: model.n_classes(),
        });
    }
    for (i, v) in x.data().iter().enumerate() {
        if !(0.0..=1.0).contains(v) {
            return Err(Error::InputOutOfRange {
                index: i,
                value: *v,
            });
        }
    }
    Ok(())
}

fn finish(model: &Model, x: &Tensor, x_adv: Tensor, target: usize, steps: usize) -> Result<AdversarialResult> {
    let predicted = model.predict(&x_adv)?;
    Ok(AdversarialResult {
        linf_norm: x_adv.linf_distance(x),
        l2_norm: x_adv.l2_distance(x),
        predicted,
        success: predicted == target,
        steps_used: steps,
        x_adv,
    })
}

fn descend(
    model: &Model,
    origin: &Tensor,
    start: Tensor,
    target: usize,
    budget: &AttackBudget,
) -> Result<Tensor> {
    let loss = LossSpec::cross();
    let mut cur = start;
    for _ in 0..budget.steps {
        let grad = model.loss_grad_input(&cur, target, &loss)?;
        let data = cur.data_mut();
        for (i, g) in grad.data().iter().enumerate() {
            // Descend the cross entropy toward the target label.
            let stepped = data[i] - budget.alpha * g.signum();
            let lo = (origin.data()[i] - budget.epsilon).max(0.0);
            let hi = (origin.data()[i] + budget.epsilon).min(1.0);
            data[i] = stepped.clamp(lo, hi);
        }
    }
    Ok(cur)
}

/// Iterative FGSM toward `target`. Deterministic.
pub fn ifgsm_targeted(
    model: &Model,
    x: &Tensor,
    target: usize,
    budget: &AttackBudget,
) -> Result<AdversarialResult> {
    validate_attack_input(model, x, target)?;
    let x_adv = descend(model, x, x.clone(), target, budget)?;
    finish(model, x, x_adv, target, budget.steps)
}

/// PGD toward `target`: IFGSM loop with an optional random start drawn
/// deterministically from `rng_seed`.
pub fn pgd_targeted(
    model: &Model,
    x: &Tensor,
    target: usize,
    budget: &AttackBudget,
    rng_seed: u64,
) -> Result<AdversarialResult> {
    validate_attack_input(model, x, target)?;
    let start = if budget.random_start && budget.epsilon > 0.0 && budget.steps > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let data: Vec<f64> = x
            .data()
            .iter()
            .map(|v| {
                let noise = rng.gen_range(-budget.epsilon..=budget.epsilon);
                (v + noise).clamp(0.0, 1.0)
            })
            .collect();
        Tensor::new(vec![data.len()], data)?
    } else {
        x.clone()
    };
    let x_adv = descend(model, x, start, target, budget)?;
    finish(model, x, x_adv, target, budget.steps)
}

/// Gradient of (max_{i != target} z_i - z_target) w.r.t. the input,
/// evaluated via one backward pass from the logits.
fn margin_and_grad(model: &Model, x: &Tensor, target: usize) -> Result<(f64, Tensor)> {
    let trace = model.forward(x)?;
    let z = trace.logits.data();
    let mut rival = usize::MAX;
    for i in 0..z.len() {
        if i != target && (rival == usize::MAX || z[i] > z[rival]) {
            rival = i;
        }
    }
    let margin = z[rival] - z[target];
    let mut dlogits = vec![0.0; z.len()];
    dlogits[rival] = 1.0;
    dlogits[target] = -1.0;
    let (_, dx) = model.backward_from_logits(&trace, &dlogits)?;
    Ok((margin, dx))
}

const TANH_CLAMP: f64 = 0.999_999;

/// C&W L2: optimize w in tanh space with x_adv = (tanh(w)+1)/2, minimizing
/// ||x_adv - x||_2^2 + c * max(margin, -kappa). Returns the best-by-L2
/// successful iterate, else the final iterate with success = false.
pub fn cw_l2_targeted(
    model: &Model,
    x: &Tensor,
    target: usize,
    cfg: &CwConfig,
) -> Result<AdversarialResult> {
    validate_attack_input(model, x, target)?;
    let d = x.len();
    // w = atanh(2x - 1), with the argument pulled off +-1.
    let mut w: Vec<f64> = x
        .data()
        .iter()
        .map(|v| (2.0 * v - 1.0).clamp(-TANH_CLAMP, TANH_CLAMP).atanh())
        .collect();
    let mut best: Option<AdversarialResult> = None;
    let mut last_x_adv = None;
    for step in 0..=cfg.steps {
        let x_adv_data: Vec<f64> = w.iter().map(|wi| (wi.tanh() + 1.0) / 2.0).collect();
        let x_adv = Tensor::new(vec![d], x_adv_data)?;
        let result = finish(model, x, x_adv.clone(), target, step)?;
        if result.success {
            let better = best
                .as_ref()
                .map(|b| result.l2_norm < b.l2_norm)
                .unwrap_or(true);
            if better {
                best = Some(result);
            }
        } else if step == cfg.steps {
            last_x_adv = Some(result);
        }
        if step == cfg.steps {
            break;
        }
        let (margin, margin_grad) = margin_and_grad(model, &x_adv, target)?;
        let active = margin > -cfg.kappa;
        for i in 0..d {
            let mut dloss_dxadv = 2.0 * (x_adv.data()[i] - x.data()[i]);
            if active {
                dloss_dxadv += cfg.c * margin_grad.data()[i];
            }
            // dx_adv/dw = (1 - tanh(w)^2) / 2
            let t = w[i].tanh();
            let dxadv_dw = (1.0 - t * t) / 2.0;
            w[i] -= cfg.step_size * dloss_dxadv * dxadv_dw;
        }
    }
    Ok(match best {
        Some(r) => r,
        None => last_x_adv.expect("final iterate recorded when no success"),
    })
}

/// Runs the configured attack on one sample. `seed` feeds PGD's random
/// start; IFGSM and C&W ignore it.
pub fn run_attack(
    model: &Model,
    x: &Tensor,
    target: usize,
    attack: &AttackConfig,
    seed: u64,
) -> Result<AdversarialResult> {
    match attack {
        AttackConfig::Ifgsm { budget } => ifgsm_targeted(model, x, target, budget),
        AttackConfig::Pgd { budget, seed: base } => {
            pgd_targeted(model, x, target, budget, base.wrapping_add(seed))
        }
        AttackConfig::Cw { config } => cw_l2_targeted(model, x, target, config),
    }
}

/// Per-sample seed derivation for pair crafting: deterministic in
/// (base_seed, sample index).
pub fn derive_seed(base: u64, index: usize) -> u64 {
    (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(base)
}

/// Crafts one adversarial example per class-`source` sample toward
/// `target`, preserving input order.
pub fn craft_pairset(
    model: &Model,
    samples: &[(Tensor, usize)],
    source: usize,
    target: usize,
    attack: &AttackConfig,
    base_seed: u64,
) -> Result<Vec<AdversarialResult>> {
    if source == target {
        return Err(Error::InvalidConfig {
            reason: "source and target classes must differ".to_string(),
        });
    }
    for (idx, (_, label)) in samples.iter().enumerate() {
        if *label != source {
            return Err(Error::MislabeledSample {
                index: idx,
                expected: source,
                got: *label,
            });
        }
    }
    samples
        .iter()
        .enumerate()
        .map(|(idx, (x, _))| run_attack(model, x, target, attack, derive_seed(base_seed, idx)))
        .collect()
}

/// Fan-out version of `craft_pairset`; results are still emitted in input
/// order and per-sample seeds are the same, so output is identical to the
/// sequential path.
pub fn craft_pairset_parallel(
    model: &Model,
    samples: &[(Tensor, usize)],
    source: usize,
    target: usize,
    attack: &AttackConfig,
    base_seed: u64,
    threads: usize,
) -> Result<Vec<AdversarialResult>> {
    if threads <= 1 || samples.len() < 2 {
        return craft_pairset(model, samples, source, target, attack, base_seed);
    }
    if source == target {
        return Err(Error::InvalidConfig {
            reason: "source and target classes must differ".to_string(),
        });
    }
    for (idx, (_, label)) in samples.iter().enumerate() {
        if *label != source {
            return Err(Error::MislabeledSample {
                index: idx,
                expected: source,
                got: *label,
            });
        }
    }
    let chunk = samples.len().div_ceil(threads);
    let mut out: Vec<Result<Vec<AdversarialResult>>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .enumerate()
            .map(|(ci, part)| {
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(k, (x, _))| {
                            let idx = ci * chunk + k;
                            run_attack(model, x, target, attack, derive_seed(base_seed, idx))
                        })
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        for h in handles {
            out.push(h.join().expect("attack worker panicked"));
        }
    });
    let mut results = Vec::with_capacity(samples.len());
    for part in out {
        results.extend(part?);
    }
    Ok(results)
}

/// CSV export: sample_index, source, target, success, linf, l2, steps_used.
pub fn results_to_csv(results: &[AdversarialResult], source: usize, target: usize) -> String {
    let mut out = String::from("sample_index,source,target,success,linf,l2,steps_used\n");
    for (idx, r) in results.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            idx, source, target, r.success, r.linf_norm, r.l2_norm, r.steps_used
        ));
    }
    out
}
