//! Adversarial-training defenses and robustness evaluation.
//!
//! Two defenses are supported: single-step sign adversarial training and its
//! multi-step projected variant. Both reuse the victim training loop, swapping
//! a configured fraction of every batch for adversarial versions generated
//! against the current parameters.

use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackConfig, AttackMethod};
use crate::error::{Error, Result};
use crate::facegen::Sample;
use crate::image::Image;
use crate::tps::LandmarkSet;
use crate::victim::{
    train_with_augment, ArchitectureDescriptor, DefenseStamp, TrainParams, VictimModel,
};

/// Which adversarial-training flavor to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    FgsmAt,
    PgdAt,
}

impl std::fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DefenseKind::FgsmAt => "fgsm_at",
            DefenseKind::PgdAt => "pgd_at",
        })
    }
}

impl std::str::FromStr for DefenseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm_at" | "fgsm" => Ok(DefenseKind::FgsmAt),
            "pgd_at" | "pgd" => Ok(DefenseKind::PgdAt),
            other => Err(Error::Config(format!("unknown defense kind {other:?}"))),
        }
    }
}

/// Adversarial-training configuration. SGD hyperparameters (including epochs
/// and seed) ride along in `train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    /// Perturbation budget in intensity units.
    pub eps: f64,
    /// Projected-variant inner steps.
    pub pgd_steps: usize,
    /// Projected-variant step size.
    pub pgd_step_size: f64,
    /// Fraction of each batch replaced by adversarial examples.
    pub adv_fraction: f64,
    pub train: TrainParams,
}

impl DefenseConfig {
    pub fn fgsm_at() -> Self {
        Self {
            kind: DefenseKind::FgsmAt,
            eps: 0.03,
            pgd_steps: 7,
            pgd_step_size: 0.03 / 4.0,
            adv_fraction: 0.5,
            train: TrainParams::default(),
        }
    }

    pub fn pgd_at() -> Self {
        Self { kind: DefenseKind::PgdAt, ..Self::fgsm_at() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps <= 0.0 {
            return Err(Error::Config("defense eps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.adv_fraction) {
            return Err(Error::Config("adversarial fraction must lie in [0, 1]".into()));
        }
        if self.kind == DefenseKind::PgdAt && (self.pgd_steps == 0 || self.pgd_step_size <= 0.0) {
            return Err(Error::Config("pgd defense needs steps and a positive step size".into()));
        }
        Ok(())
    }
}

/// Single sign step of size eps, clipped to the unit box.
pub fn fgsm_example(model: &VictimModel, x: &Image, class: usize, eps: f64) -> Result<Image> {
    let grad = model.input_gradient(x, class)?;
    let px: Vec<f64> = x
        .pixels()
        .iter()
        .zip(&grad)
        .map(|(v, g)| (v + eps * g.signum_zero()).clamp(0.0, 1.0))
        .collect();
    Image::from_pixels(x.height(), x.width(), x.channels(), px)
}

/// Multi-step sign ascent with projection onto the eps-ball around the clean
/// image and the unit box after every step.
pub fn pgd_example(
    model: &VictimModel,
    x: &Image,
    class: usize,
    eps: f64,
    steps: usize,
    step_size: f64,
) -> Result<Image> {
    let base = x.pixels().to_vec();
    let mut cur = base.clone();
    for _ in 0..steps {
        let img = Image::from_pixels(x.height(), x.width(), x.channels(), cur.clone())?;
        let grad = model.input_gradient(&img, class)?;
        for ((c, b), g) in cur.iter_mut().zip(&base).zip(&grad) {
            let stepped = *c + step_size * g.signum_zero();
            *c = stepped.clamp(b - eps, b + eps).clamp(0.0, 1.0);
            debug_assert!((*c - b).abs() <= eps + 1e-12 && (0.0..=1.0).contains(c));
        }
    }
    Image::from_pixels(x.height(), x.width(), x.channels(), cur)
}

trait SignumZero {
    fn signum_zero(self) -> f64;
}

impl SignumZero for f64 {
    // f64::signum maps 0.0 to 1.0; the attacks treat a zero gradient as "stay".
    fn signum_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Adversarial training: identical to plain training except that the first
/// `adv_fraction` of every batch is replaced on the fly with adversarial
/// versions generated against the current parameters. Deterministic per seed.
pub fn adversarial_train(
    descriptor: &ArchitectureDescriptor,
    train_set: &[(&Image, usize)],
    test_set: &[(&Image, usize)],
    cfg: &DefenseConfig,
) -> Result<VictimModel> {
    cfg.validate()?;
    let mut model = train_with_augment(descriptor, train_set, test_set, &cfg.train, |m, batch| {
        let n_adv = (batch.len() as f64 * cfg.adv_fraction).round() as usize;
        for (img, label) in batch.iter_mut().take(n_adv) {
            *img = match cfg.kind {
                DefenseKind::FgsmAt => fgsm_example(m, img, *label, cfg.eps)?,
                DefenseKind::PgdAt => {
                    pgd_example(m, img, *label, cfg.eps, cfg.pgd_steps, cfg.pgd_step_size)?
                }
            };
        }
        Ok(())
    })?;
    model.set_defense(DefenseStamp {
        kind: cfg.kind.to_string(),
        eps: cfg.eps,
        steps: if cfg.kind == DefenseKind::PgdAt { cfg.pgd_steps } else { 1 },
        step_size: if cfg.kind == DefenseKind::PgdAt { cfg.pgd_step_size } else { cfg.eps },
        adv_fraction: cfg.adv_fraction,
    });
    Ok(model)
}

/// Success statistics for one attack against one model.
#[derive(Debug, Clone)]
pub struct AttackEvalRow {
    pub method: AttackMethod,
    pub attacked: usize,
    pub successes: usize,
    /// Percent of attacked samples that fooled the model.
    pub success_rate: f64,
    pub per_sample: Vec<(u32, bool)>,
}

/// Robustness evaluation of one model under a set of attacks.
#[derive(Debug, Clone)]
pub struct DefenseReport {
    /// Defense label from the checkpoint stamp, or "undefended".
    pub defense: String,
    pub clean_accuracy: f64,
    pub rows: Vec<AttackEvalRow>,
}

/// Runs each configured attack on the samples this model classifies
/// correctly and reports per-attack success rates.
pub fn evaluate_under_defense(
    model: &VictimModel,
    samples: &[&Sample],
    attacks: &[AttackConfig],
) -> Result<DefenseReport> {
    let defense = model.defense().map_or_else(|| "undefended".to_string(), |d| d.kind.clone());
    if samples.is_empty() {
        return Ok(DefenseReport { defense, clean_accuracy: 0.0, rows: Vec::new() });
    }
    let mut correct: Vec<&Sample> = Vec::new();
    for s in samples {
        if model.forward(&s.image)?.argmax() == s.class_id {
            correct.push(s);
        }
    }
    let clean_accuracy = correct.len() as f64 / samples.len() as f64;

    let mut rows = Vec::with_capacity(attacks.len());
    for cfg in attacks {
        let mut per_sample = Vec::with_capacity(correct.len());
        let mut successes = 0usize;
        for s in &correct {
            let success = attack_one(model, s, cfg)?;
            successes += success as usize;
            per_sample.push((s.sample_id, success));
        }
        let attacked = per_sample.len();
        rows.push(AttackEvalRow {
            method: cfg.method,
            attacked,
            successes,
            success_rate: if attacked == 0 {
                0.0
            } else {
                100.0 * successes as f64 / attacked as f64
            },
            per_sample,
        });
    }
    Ok(DefenseReport { defense, clean_accuracy, rows })
}

fn attack_one(model: &VictimModel, s: &Sample, cfg: &AttackConfig) -> Result<bool> {
    match run_attack(&s.image, landmarks_for(s), s.class_id, model, cfg) {
        Ok(r) => Ok(r.success),
        // A degenerate spline mid-attack counts as a failed attack on that
        // sample rather than aborting the whole evaluation.
        Err(Error::Degenerate(_)) => Ok(false),
        Err(e) => Err(e),
    }
}

fn landmarks_for(s: &Sample) -> &LandmarkSet {
    &s.landmarks
}
