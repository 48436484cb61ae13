//! Landmark-space attacks against a white-box classifier.
//!
//! Two geometric attacks share one machinery: iterative sign ascent on the
//! total loss over per-landmark displacements (FLM), and the same ascent
//! projected every iteration onto per-group scale/translation parameters via
//! a closed-form least-squares fit (GFLM), which preserves the semantic
//! structure of the face. An iterative intensity-space sign attack (FGSM) is
//! included as the baseline.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, NormalizedPoint};
use crate::tps::{warp_image, warp_jacobian, LandmarkSet};
use crate::victim::{softmax_cost, VictimModel};

/// The two eye/eyebrow groups, mirrored across the face midline, in every
/// layout this crate generates. Symmetry constraints tie this pair together.
pub const EYE_GROUP_PAIR: (u8, u8) = (2, 3);

/// Per-landmark displacement field taking original landmarks to adversarial
/// positions.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField(Vec<[f64; 2]>);

impl DisplacementField {
    pub fn zeros(k: usize) -> Self {
        Self(vec![[0.0; 2]; k])
    }

    pub fn from_vec(v: Vec<[f64; 2]>) -> Result<Self> {
        if v.iter().any(|d| !d[0].is_finite() || !d[1].is_finite()) {
            return Err(Error::InvalidLandmarks("non-finite displacement".into()));
        }
        Ok(Self(v))
    }

    /// Displacement taking `from` to `to`, pointwise.
    pub fn between(from: &[NormalizedPoint], to: &[NormalizedPoint]) -> Self {
        Self(from.iter().zip(to).map(|(a, b)| [b.u - a.u, b.v - a.v]).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[[f64; 2]] {
        &self.0
    }

    /// Adds the field onto a landmark list.
    pub fn apply_to(&self, points: &[NormalizedPoint]) -> Vec<NormalizedPoint> {
        points
            .iter()
            .zip(&self.0)
            .map(|(p, d)| NormalizedPoint::new(p.u + d[0], p.v + d[1]))
            .collect()
    }
}

/// Per-group scale and translation parameters with the group centroids they
/// are anchored to.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupParams {
    /// Per group: (alpha_u, alpha_v).
    pub alpha: Vec<[f64; 2]>,
    /// Per group: (beta_u, beta_v), absolute target centers.
    pub beta: Vec<[f64; 2]>,
    /// Per group: centroid of the original landmarks.
    pub centroid: Vec<[f64; 2]>,
}

/// Which attack to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Flm,
    Gflm,
    Fgsm,
}

impl std::fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackMethod::Flm => "flm",
            AttackMethod::Gflm => "gflm",
            AttackMethod::Fgsm => "fgsm",
        })
    }
}

impl std::str::FromStr for AttackMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flm" => Ok(AttackMethod::Flm),
            "gflm" => Ok(AttackMethod::Gflm),
            "fgsm" => Ok(AttackMethod::Fgsm),
            other => Err(Error::Config(format!("unknown attack method {other:?}"))),
        }
    }
}

/// Attack hyperparameters.
///
/// `eps` is the sign-step size: normalized coordinate units for the landmark
/// attacks, intensity units for FGSM.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub eps: f64,
    pub lambda_flow: f64,
    pub max_iters: usize,
    /// Group ids allowed to move; `None` attacks all groups.
    pub regions: Option<Vec<u8>>,
    /// Tie the mirrored eye groups to equal scale and vertical center.
    pub symmetry: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub fn flm() -> Self {
        Self {
            method: AttackMethod::Flm,
            eps: 0.01,
            lambda_flow: 100.0,
            max_iters: 50,
            regions: None,
            symmetry: false,
            seed: 0,
        }
    }

    pub fn gflm() -> Self {
        Self {
            method: AttackMethod::Gflm,
            eps: 0.01,
            lambda_flow: 0.0,
            max_iters: 50,
            regions: None,
            symmetry: true,
            seed: 0,
        }
    }

    pub fn fgsm() -> Self {
        Self {
            method: AttackMethod::Fgsm,
            eps: 0.01,
            lambda_flow: 0.0,
            max_iters: 50,
            regions: None,
            symmetry: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps <= 0.0 {
            return Err(Error::Config("eps must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if self.lambda_flow < 0.0 {
            return Err(Error::Config("lambda_flow must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Outcome of one attack run on one sample.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial: Image,
    pub landmarks_adv: Vec<NormalizedPoint>,
    pub iterations: usize,
    pub success: bool,
    /// Final softmax probability of the true class.
    pub true_class_prob: f64,
    pub duration: Duration,
}

/// Mean squared displacement magnitude of the field.
pub fn flow_loss(field: &DisplacementField) -> f64 {
    if field.is_empty() {
        return 0.0;
    }
    let s: f64 = field.as_slice().iter().map(|d| d[0] * d[0] + d[1] * d[1]).sum();
    s / field.len() as f64
}

/// Total attack objective: classification cost of the warped image minus the
/// weighted flow loss. The attacker ascends this.
pub fn total_loss(
    landmarks: &[NormalizedPoint],
    adversarial: &[NormalizedPoint],
    x: &Image,
    class: usize,
    lambda_flow: f64,
    model: &VictimModel,
) -> Result<f64> {
    let warped = warp_image(x, landmarks, adversarial)?;
    let cost = softmax_cost(&model.forward(&warped)?, class)?;
    let field = DisplacementField::between(landmarks, adversarial);
    Ok(cost - lambda_flow * flow_loss(&field))
}

/// Gradient of [`total_loss`] with respect to the adversarial landmarks.
pub fn total_loss_grad(
    landmarks: &[NormalizedPoint],
    adversarial: &[NormalizedPoint],
    x: &Image,
    class: usize,
    lambda_flow: f64,
    model: &VictimModel,
) -> Result<Vec<[f64; 2]>> {
    let warped = warp_image(x, landmarks, adversarial)?;
    let upstream = model.input_gradient(&warped, class)?;
    let mut grad = warp_jacobian(x, landmarks, adversarial, &upstream)?;
    let k = landmarks.len() as f64;
    for (g, (p, q)) in grad.iter_mut().zip(landmarks.iter().zip(adversarial)) {
        g[0] -= lambda_flow * (2.0 / k) * (q.u - p.u);
        g[1] -= lambda_flow * (2.0 / k) * (q.v - p.v);
    }
    Ok(grad)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One sign-ascent step on the displacement field. Landmarks whose group is
/// outside the region mask stay untouched.
pub fn flm_step(
    field: &DisplacementField,
    grad: &[[f64; 2]],
    eps: f64,
    movable: &[bool],
) -> DisplacementField {
    let v = field
        .as_slice()
        .iter()
        .zip(grad)
        .zip(movable)
        .map(|((f, g), &m)| {
            if m {
                [f[0] + eps * sign(g[0]), f[1] + eps * sign(g[1])]
            } else {
                *f
            }
        })
        .collect();
    DisplacementField(v)
}

/// Per-landmark movable flags from the region mask.
pub fn movable_mask(landmarks: &LandmarkSet, regions: Option<&[u8]>) -> Vec<bool> {
    match regions {
        None => vec![true; landmarks.len()],
        Some(groups) => landmarks.groups().iter().map(|g| groups.contains(g)).collect(),
    }
}

/// Closed-form least-squares fit of one group's displacements as a scale
/// about the centroid plus a translation, element-wise per axis.
///
/// A degenerate denominator (all landmarks sharing a coordinate) forces that
/// scale component to 1.
pub fn group_fit(points: &[NormalizedPoint], displacements: &[[f64; 2]]) -> ([f64; 2], [f64; 2]) {
    assert_eq!(points.len(), displacements.len());
    let n = points.len() as f64;
    let mut centroid = [0.0; 2];
    for p in points {
        centroid[0] += p.u / n;
        centroid[1] += p.v / n;
    }
    let mut alpha = [1.0; 2];
    let mut beta = [0.0; 2];
    for axis in 0..2 {
        let coord = |p: &NormalizedPoint| if axis == 0 { p.u } else { p.v };
        let mut num = 0.0;
        let mut den = 0.0;
        let mut mean_f = 0.0;
        for (p, f) in points.iter().zip(displacements) {
            let d = coord(p) - centroid[axis];
            num += d * (coord(p) + f[axis]);
            den += d * d;
            mean_f += f[axis] / n;
        }
        alpha[axis] = if den < 1e-12 { 1.0 } else { num / den };
        beta[axis] = centroid[axis] + mean_f;
    }
    (alpha, beta)
}

/// Fits every group of the landmark set against the displacement field.
pub fn fit_groups(landmarks: &LandmarkSet, field: &DisplacementField) -> GroupParams {
    let m = landmarks.num_groups();
    let mut alpha = Vec::with_capacity(m);
    let mut beta = Vec::with_capacity(m);
    let mut centroid = Vec::with_capacity(m);
    for g in 1..=m as u8 {
        let idx = landmarks.group_indices(g);
        let pts: Vec<NormalizedPoint> = idx.iter().map(|&i| landmarks.points()[i]).collect();
        let disp: Vec<[f64; 2]> = idx.iter().map(|&i| field.as_slice()[i]).collect();
        let (a, b) = group_fit(&pts, &disp);
        alpha.push(a);
        beta.push(b);
        centroid.push(landmarks.group_centroid(g));
    }
    GroupParams { alpha, beta, centroid }
}

/// Materializes adversarial landmarks from group parameters.
///
/// With `symmetry` on, the mirrored eye groups first get the pair-averaged
/// scale tuple and the pair-averaged vertical center.
pub fn apply_groups(
    landmarks: &LandmarkSet,
    params: &GroupParams,
    symmetry: bool,
) -> Vec<NormalizedPoint> {
    let mut alpha = params.alpha.clone();
    let mut beta = params.beta.clone();
    if symmetry {
        let (a, b) = EYE_GROUP_PAIR;
        let (ai, bi) = (a as usize - 1, b as usize - 1);
        if bi < alpha.len() {
            let avg_alpha =
                [(alpha[ai][0] + alpha[bi][0]) / 2.0, (alpha[ai][1] + alpha[bi][1]) / 2.0];
            alpha[ai] = avg_alpha;
            alpha[bi] = avg_alpha;
            let avg_bv = (beta[ai][1] + beta[bi][1]) / 2.0;
            beta[ai][1] = avg_bv;
            beta[bi][1] = avg_bv;
        }
    }
    landmarks
        .points()
        .iter()
        .zip(landmarks.groups())
        .map(|(p, &g)| {
            let gi = g as usize - 1;
            NormalizedPoint::new(
                alpha[gi][0] * (p.u - params.centroid[gi][0]) + beta[gi][0],
                alpha[gi][1] * (p.v - params.centroid[gi][1]) + beta[gi][1],
            )
        })
        .collect()
}

fn finish(
    adversarial: Image,
    landmarks_adv: Vec<NormalizedPoint>,
    iterations: usize,
    success: bool,
    true_class_prob: f64,
    start: Instant,
) -> AttackResult {
    AttackResult {
        adversarial,
        landmarks_adv,
        iterations,
        success,
        true_class_prob,
        duration: start.elapsed(),
    }
}

/// Iterative per-landmark sign ascent, stopping at the first warp the model
/// misclassifies.
pub fn run_flm(
    x: &Image,
    landmarks: &LandmarkSet,
    class: usize,
    model: &VictimModel,
    config: &AttackConfig,
) -> Result<AttackResult> {
    config.validate()?;
    let start = Instant::now();
    let points = landmarks.points();
    let clean = model.forward(x)?;
    if clean.argmax() != class {
        return Ok(finish(x.clone(), points.to_vec(), 0, true, clean.probabilities[class], start));
    }
    let movable = movable_mask(landmarks, config.regions.as_deref());
    let mut field = DisplacementField::zeros(landmarks.len());
    let mut last = (x.clone(), points.to_vec(), clean.probabilities[class]);
    for t in 1..=config.max_iters {
        let p_adv = field.apply_to(points);
        let grad = total_loss_grad(points, &p_adv, x, class, config.lambda_flow, model)?;
        field = flm_step(&field, &grad, config.eps, &movable);
        let p_adv = field.apply_to(points);
        let warped = warp_image(x, points, &p_adv)?;
        let pred = model.forward(&warped)?;
        let p_true = pred.probabilities[class];
        let fooled = pred.argmax() != class;
        last = (warped, p_adv, p_true);
        if fooled {
            return Ok(finish(last.0, last.1, t, true, p_true, start));
        }
    }
    Ok(finish(last.0, last.1, config.max_iters, false, last.2, start))
}

/// Group-constrained variant: every iteration the sign-updated field is
/// projected onto per-group scale/translation parameters, materialized (with
/// the symmetry constraint if enabled), and the effective field re-derived
/// for the next gradient evaluation.
pub fn run_gflm(
    x: &Image,
    landmarks: &LandmarkSet,
    class: usize,
    model: &VictimModel,
    config: &AttackConfig,
) -> Result<AttackResult> {
    config.validate()?;
    let start = Instant::now();
    let points = landmarks.points();
    let clean = model.forward(x)?;
    if clean.argmax() != class {
        return Ok(finish(x.clone(), points.to_vec(), 0, true, clean.probabilities[class], start));
    }
    let movable = movable_mask(landmarks, config.regions.as_deref());
    // Averaging the eye pair is only legal when both of its groups are in
    // play; otherwise it would move landmarks outside the region mask.
    let symmetry = config.symmetry && {
        let (a, b) = EYE_GROUP_PAIR;
        let in_mask = |g: u8| {
            config.regions.as_ref().map_or(true, |r| r.contains(&g))
                && landmarks.num_groups() >= g as usize
        };
        in_mask(a) && in_mask(b)
    };
    let mut field = DisplacementField::zeros(landmarks.len());
    let mut last = (x.clone(), points.to_vec(), clean.probabilities[class]);
    for t in 1..=config.max_iters {
        let p_adv = field.apply_to(points);
        let grad = total_loss_grad(points, &p_adv, x, class, config.lambda_flow, model)?;
        let raw = flm_step(&field, &grad, config.eps, &movable);
        let params = fit_groups(landmarks, &raw);
        let p_adv = apply_groups(landmarks, &params, symmetry);
        field = DisplacementField::between(points, &p_adv);
        let warped = warp_image(x, points, &p_adv)?;
        let pred = model.forward(&warped)?;
        let p_true = pred.probabilities[class];
        let fooled = pred.argmax() != class;
        last = (warped, p_adv, p_true);
        if fooled {
            return Ok(finish(last.0, last.1, t, true, p_true, start));
        }
    }
    Ok(finish(last.0, last.1, config.max_iters, false, last.2, start))
}

/// Iterative intensity-space sign attack with clipping to [0, 1].
pub fn run_fgsm(
    x: &Image,
    class: usize,
    model: &VictimModel,
    eps: f64,
    max_iters: usize,
) -> Result<AttackResult> {
    if eps <= 0.0 || max_iters == 0 {
        return Err(Error::Config("fgsm needs eps > 0 and at least one iteration".into()));
    }
    let start = Instant::now();
    let clean = model.forward(x)?;
    if clean.argmax() != class {
        return Ok(finish(x.clone(), Vec::new(), 0, true, clean.probabilities[class], start));
    }
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let mut cur = x.clone();
    let mut p_true = clean.probabilities[class];
    for t in 1..=max_iters {
        let grad = model.input_gradient(&cur, class)?;
        let px: Vec<f64> = cur
            .pixels()
            .iter()
            .zip(&grad)
            .map(|(v, g)| (v + eps * sign(*g)).clamp(0.0, 1.0))
            .collect();
        cur = Image::from_pixels(h, w, c, px)?;
        let pred = model.forward(&cur)?;
        p_true = pred.probabilities[class];
        if pred.argmax() != class {
            return Ok(finish(cur, Vec::new(), t, true, p_true, start));
        }
    }
    Ok(finish(cur, Vec::new(), max_iters, false, p_true, start))
}

/// Dispatches on the configured method.
pub fn run_attack(
    x: &Image,
    landmarks: &LandmarkSet,
    class: usize,
    model: &VictimModel,
    config: &AttackConfig,
) -> Result<AttackResult> {
    match config.method {
        AttackMethod::Flm => run_flm(x, landmarks, class, model, config),
        AttackMethod::Gflm => run_gflm(x, landmarks, class, model, config),
        AttackMethod::Fgsm => run_fgsm(x, class, model, config.eps, config.max_iters),
    }
}
