//! Segmentation and distillation objectives with analytic gradients.
//!
//! Logits are 2-channel maps (`[background, lesion]`). All voxel reductions
//! are means, summed in voxel order. Teacher inputs are plain slices: no
//! gradient is ever produced for them.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::sigmoid;
use crate::tensor::FeatureMap;

/// Argument order of the response-distillation KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KldDirection {
    /// `KL(student || teacher)`.
    #[default]
    StudentTeacher,
    /// `KL(teacher || student)`, the classic distillation direction.
    TeacherStudent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub beta: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub dice_smooth: f64,
    pub kld_direction: KldDirection,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 2.0,
            beta: 0.8,
            alpha_min: 0.0,
            alpha_max: 0.6,
            dice_smooth: 1e-5,
            kld_direction: KldDirection::StudentTeacher,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.tau > 0.0 && self.tau.is_finite(), "tau must be > 0");
        ensure!(self.beta >= 0.0, "beta must be >= 0");
        ensure!(
            0.0 <= self.alpha_min && self.alpha_min <= self.alpha_max,
            "need 0 <= alpha_min <= alpha_max"
        );
        ensure!(self.dice_smooth > 0.0, "dice_smooth must be > 0");
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_dice: f64,
    pub task_ce: f64,
    pub kld: f64,
    pub cosine: f64,
    pub alpha_t: f64,
    pub total: f64,
}

fn check_pair(logits: &FeatureMap, target: &[u8]) -> Result<()> {
    ensure!(logits.channels == 2, "expected 2-channel logits, got {}", logits.channels);
    ensure!(
        logits.voxels() == target.len(),
        "logits have {} voxels but target has {}",
        logits.voxels(),
        target.len()
    );
    ensure!(target.iter().all(|&t| t <= 1), "target mask must be binary");
    Ok(())
}

/// Soft Dice loss on the foreground probability.
pub fn dice_loss(logits: &FeatureMap, target: &[u8], smooth: f64) -> Result<f64> {
    dice_loss_grad(logits, target, smooth).map(|(v, _)| v)
}

pub fn dice_loss_grad(logits: &FeatureMap, target: &[u8], smooth: f64) -> Result<(f64, FeatureMap)> {
    check_pair(logits, target)?;
    let n = target.len();
    let p: Vec<f64> = logits
        .channel(0)
        .iter()
        .zip(logits.channel(1))
        .map(|(&a, &b)| sigmoid(b - a))
        .collect();
    let inter: f64 = p.iter().zip(target).map(|(p, &t)| p * t as f64).sum();
    let sum_p: f64 = p.iter().sum();
    let sum_t = target.iter().map(|&t| t as f64).sum::<f64>();
    let num = 2.0 * inter + smooth;
    let den = sum_p + sum_t + smooth;
    let loss = 1.0 - num / den;
    let mut grad = FeatureMap::zeros(2, logits.dims);
    for v in 0..n {
        let dp = -(2.0 * target[v] as f64 * den - num) / (den * den);
        let g = dp * p[v] * (1.0 - p[v]);
        grad.data[v] = -g;
        grad.data[n + v] = g;
    }
    Ok((loss, grad))
}

/// Mean voxelwise cross-entropy.
pub fn ce_loss(logits: &FeatureMap, target: &[u8]) -> Result<f64> {
    ce_loss_grad(logits, target).map(|(v, _)| v)
}

pub fn ce_loss_grad(logits: &FeatureMap, target: &[u8]) -> Result<(f64, FeatureMap)> {
    check_pair(logits, target)?;
    let n = target.len();
    let mut grad = FeatureMap::zeros(2, logits.dims);
    let mut total = 0.0;
    for v in 0..n {
        let (l0, l1) = (logits.data[v], logits.data[n + v]);
        let lse = log_sum_exp2(l0, l1);
        let truth = if target[v] == 1 { l1 } else { l0 };
        total += lse - truth;
        let p1 = sigmoid(l1 - l0);
        let y1 = target[v] as f64;
        grad.data[v] = ((1.0 - p1) - (1.0 - y1)) / n as f64;
        grad.data[n + v] = (p1 - y1) / n as f64;
    }
    Ok((total / n as f64, grad))
}

#[inline]
fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[inline]
fn log_softmax2(a: f64, b: f64) -> (f64, f64) {
    let lse = log_sum_exp2(a, b);
    (a - lse, b - lse)
}

/// Mean voxelwise KL divergence between temperature-softened distributions,
/// `KL(softmax(s/τ) || softmax(t/τ))` by default. No τ² factor.
pub fn kld_loss(student: &FeatureMap, teacher: &FeatureMap, tau: f64) -> Result<f64> {
    kld_loss_grad(student, teacher, tau, KldDirection::StudentTeacher).map(|(v, _)| v)
}

pub fn kld_loss_grad(
    student: &FeatureMap,
    teacher: &FeatureMap,
    tau: f64,
    direction: KldDirection,
) -> Result<(f64, FeatureMap)> {
    ensure!(student.channels == 2, "expected 2-channel student logits");
    ensure!(
        student.channels == teacher.channels && student.dims == teacher.dims,
        "student and teacher logits differ in shape"
    );
    ensure!(tau > 0.0, "temperature must be > 0");
    let n = student.voxels();
    let nf = n as f64;
    let mut grad = FeatureMap::zeros(2, student.dims);
    let mut total = 0.0;
    for v in 0..n {
        let (ls0, ls1) = log_softmax2(student.data[v] / tau, student.data[n + v] / tau);
        let (lt0, lt1) = log_softmax2(teacher.data[v] / tau, teacher.data[n + v] / tau);
        let (ps0, ps1) = (ls0.exp(), ls1.exp());
        let (pt0, pt1) = (lt0.exp(), lt1.exp());
        match direction {
            KldDirection::StudentTeacher => {
                let kl = ps0 * (ls0 - lt0) + ps1 * (ls1 - lt1);
                total += kl;
                grad.data[v] = ps0 * (ls0 - lt0 - kl) / (tau * nf);
                grad.data[n + v] = ps1 * (ls1 - lt1 - kl) / (tau * nf);
            }
            KldDirection::TeacherStudent => {
                total += pt0 * (lt0 - ls0) + pt1 * (lt1 - ls1);
                grad.data[v] = (ps0 - pt0) / (tau * nf);
                grad.data[n + v] = (ps1 - pt1) / (tau * nf);
            }
        }
    }
    // KL is nonnegative; clamp rounding noise around zero.
    Ok(((total / nf).max(0.0), grad))
}

/// `1 - cos(f_s, f_t)`. A zero-norm vector yields 1 with zero gradient.
pub fn cosine_loss(student: &[f64], teacher: &[f64]) -> Result<f64> {
    cosine_loss_grad(student, teacher).map(|(v, _)| v)
}

pub fn cosine_loss_grad(student: &[f64], teacher: &[f64]) -> Result<(f64, Vec<f64>)> {
    ensure!(
        student.len() == teacher.len(),
        "feature lengths differ: {} vs {}",
        student.len(),
        teacher.len()
    );
    let ns = student.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nt = teacher.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ns == 0.0 || nt == 0.0 {
        log::warn!("cosine loss on a zero-norm feature vector; returning 1");
        return Ok((1.0, vec![0.0; student.len()]));
    }
    let dot: f64 = student.iter().zip(teacher).map(|(a, b)| a * b).sum();
    let cos = dot / (ns * nt);
    let grad = student
        .iter()
        .zip(teacher)
        .map(|(s, t)| -(t / (ns * nt) - cos * s / (ns * ns)))
        .collect();
    Ok(((1.0 - cos).clamp(0.0, 2.0), grad))
}

/// `α_t = α_min + (1 - dsc) (α_max - α_min)`.
pub fn dynamic_alpha(dsc_shift: f64, alpha_min: f64, alpha_max: f64) -> Result<f64> {
    ensure!(
        (0.0..=1.0).contains(&dsc_shift),
        "dsc_shift must lie in [0, 1], got {dsc_shift}"
    );
    ensure!(
        0.0 <= alpha_min && alpha_min <= alpha_max,
        "need 0 <= alpha_min <= alpha_max, got [{alpha_min}, {alpha_max}]"
    );
    Ok(alpha_min + (1.0 - dsc_shift) * (alpha_max - alpha_min))
}

/// Teacher-side inputs for distillation; all or nothing.
#[derive(Debug, Clone, Copy)]
pub struct TeacherTerms<'a> {
    pub teacher_logits: &'a FeatureMap,
    pub student_features: &'a [f64],
    pub teacher_features: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct LossGrads {
    pub logits: FeatureMap,
    /// Present when teacher terms were given.
    pub features: Option<Vec<f64>>,
}

/// Builds [`TeacherTerms`] from optional pieces, rejecting partial sets.
pub fn teacher_terms<'a>(
    teacher_logits: Option<&'a FeatureMap>,
    student_features: Option<&'a [f64]>,
    teacher_features: Option<&'a [f64]>,
) -> Result<Option<TeacherTerms<'a>>> {
    match (teacher_logits, student_features, teacher_features) {
        (None, None, None) => Ok(None),
        (Some(tl), Some(fs), Some(ft)) => Ok(Some(TeacherTerms {
            teacher_logits: tl,
            student_features: fs,
            teacher_features: ft,
        })),
        _ => Err(crate::error::Error::validation(
            "teacher logits and student/teacher features must be given together",
        )),
    }
}

/// `L = Dice + CE + β·Cosine + α_t·KLD`; the distillation terms are zero
/// without a teacher.
pub fn total_loss(
    logits: &FeatureMap,
    target: &[u8],
    teacher: Option<TeacherTerms<'_>>,
    alpha_t: f64,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    total_loss_grad(logits, target, teacher, alpha_t, cfg).map(|(b, _)| b)
}

pub fn total_loss_grad(
    logits: &FeatureMap,
    target: &[u8],
    teacher: Option<TeacherTerms<'_>>,
    alpha_t: f64,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, LossGrads)> {
    ensure!(alpha_t >= 0.0 && alpha_t.is_finite(), "alpha_t must be finite and >= 0");
    let (dice, gd) = dice_loss_grad(logits, target, cfg.dice_smooth)?;
    let (ce, gc) = ce_loss_grad(logits, target)?;
    let mut grad = gd;
    grad.add_assign(&gc);
    let mut b = LossBreakdown {
        task_dice: dice,
        task_ce: ce,
        alpha_t,
        ..Default::default()
    };
    let mut features = None;
    if let Some(t) = teacher {
        let (kld, gk) = kld_loss_grad(logits, t.teacher_logits, cfg.tau, cfg.kld_direction)?;
        let (cos, gf) = cosine_loss_grad(t.student_features, t.teacher_features)?;
        b.kld = kld;
        b.cosine = cos;
        for (g, k) in grad.data.iter_mut().zip(&gk.data) {
            *g += alpha_t * k;
        }
        features = Some(gf.into_iter().map(|g| cfg.beta * g).collect());
    }
    b.total = b.task_dice + b.task_ce + cfg.beta * b.cosine + alpha_t * b.kld;
    Ok((b, LossGrads { logits: grad, features }))
}
