//! Sanitization and adversarial privacy objectives.
//!
//! All divergences are in nats. Logs are stabilized as `log(v + ε)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-7;
const SIMPLEX_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the privacy term; `0` keeps utility only, `1` privacy only.
    pub alpha: f64,
    pub epsilon: f64,
}

impl LossConfig {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!("epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::domain(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    for (name, v) in [("p", p), ("q", q)] {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL || v.iter().any(|x| *x < -SIMPLEX_TOL) {
            return Err(Error::domain(format!("{name} is not a probability vector (sum {s})")));
        }
    }
    Ok(())
}

/// `Σ p_i · log((p_i + ε) / (q_i + ε))`.
pub fn kl_divergence(p: &[f64], q: &[f64], epsilon: f64) -> Result<f64> {
    check_pair(p, q)?;
    Ok(kl_unchecked(p, q, epsilon))
}

fn kl_unchecked(p: &[f64], q: &[f64], epsilon: f64) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi != 0.0)
        .map(|(&pi, &qi)| pi * ((pi + epsilon) / (qi + epsilon)).ln())
        .sum()
}

/// Gradient of [`kl_divergence`] with respect to `q`.
pub fn kl_divergence_grad(p: &[f64], q: &[f64], epsilon: f64) -> Vec<f64> {
    p.iter().zip(q).map(|(&pi, &qi)| -pi / (qi + epsilon)).collect()
}

/// `−Σ y_i · log(pred_i + ε)`.
pub fn binary_cross_entropy(one_hot: &[f64], pred: &[f64], epsilon: f64) -> Result<f64> {
    check_pair(one_hot, pred)?;
    Ok(bce_unchecked(one_hot, pred, epsilon))
}

fn bce_unchecked(one_hot: &[f64], pred: &[f64], epsilon: f64) -> f64 {
    -one_hot
        .iter()
        .zip(pred)
        .filter(|(&y, _)| y != 0.0)
        .map(|(&y, &p)| y * (p + epsilon).ln())
        .sum::<f64>()
}

/// Gradient of [`binary_cross_entropy`] with respect to `pred`.
pub fn binary_cross_entropy_grad(one_hot: &[f64], pred: &[f64], epsilon: f64) -> Vec<f64> {
    one_hot.iter().zip(pred).map(|(&y, &p)| -y / (p + epsilon)).collect()
}

/// Per-datum sanitization loss
/// `(1−α)·KL(P(u|x) ‖ P(u|S(x))) + α·KL(P(p) ‖ P(p|S(x)))`.
pub fn sanitization_loss(
    u_raw: &[f64],
    u_san: &[f64],
    prior: &[f64],
    p_san: &[f64],
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    let utility = kl_divergence(u_raw, u_san, cfg.epsilon)?;
    let privacy = kl_divergence(prior, p_san, cfg.epsilon)?;
    Ok((1.0 - cfg.alpha) * utility + cfg.alpha * privacy)
}

/// Per-datum adversarial privacy loss: BCE on the raw posterior plus BCE on
/// the sanitized posterior, equally weighted.
pub fn privacy_loss(y: &[f64], p_raw: &[f64], p_san: &[f64], epsilon: f64) -> Result<f64> {
    Ok(binary_cross_entropy(y, p_raw, epsilon)? + binary_cross_entropy(y, p_san, epsilon)?)
}

/// Batch sanitization loss with gradients for the sanitized posteriors.
#[derive(Debug, Clone)]
pub struct SanitizationBatch {
    /// Mean over the batch.
    pub loss: f64,
    pub utility_kl: Vec<f64>,
    pub privacy_kl: Vec<f64>,
    /// `d loss / d u_san`, `[batch, K]`.
    pub grad_u_san: Vec<f32>,
    /// `d loss / d p_san`, `[batch, 2]`.
    pub grad_p_san: Vec<f32>,
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| *x as f64).collect()
}

/// Mean-reduced sanitization loss over row-major posterior batches.
/// `u_raw` and `prior` are treated as constants.
pub fn sanitization_loss_batch(
    u_raw: &[f32],
    u_san: &[f32],
    num_classes: usize,
    prior: [f64; 2],
    p_san: &[f32],
    cfg: &LossConfig,
) -> Result<SanitizationBatch> {
    cfg.validate()?;
    if u_raw.len() != u_san.len() || u_raw.len() % num_classes != 0 {
        return Err(Error::domain("utility posterior batch shapes differ"));
    }
    let batch = u_raw.len() / num_classes;
    if p_san.len() != 2 * batch {
        return Err(Error::domain("privacy posterior batch does not match utility batch"));
    }
    let scale = 1.0 / batch as f64;
    let mut out = SanitizationBatch {
        loss: 0.0,
        utility_kl: Vec::with_capacity(batch),
        privacy_kl: Vec::with_capacity(batch),
        grad_u_san: Vec::with_capacity(u_san.len()),
        grad_p_san: Vec::with_capacity(p_san.len()),
    };
    for i in 0..batch {
        let ur = to_f64(&u_raw[i * num_classes..(i + 1) * num_classes]);
        let us = to_f64(&u_san[i * num_classes..(i + 1) * num_classes]);
        let ps = to_f64(&p_san[2 * i..2 * i + 2]);
        let ukl = kl_unchecked(&ur, &us, cfg.epsilon);
        let pkl = kl_unchecked(&prior, &ps, cfg.epsilon);
        out.loss += scale * ((1.0 - cfg.alpha) * ukl + cfg.alpha * pkl);
        out.utility_kl.push(ukl);
        out.privacy_kl.push(pkl);
        out.grad_u_san.extend(
            kl_divergence_grad(&ur, &us, cfg.epsilon)
                .into_iter()
                .map(|g| (g * (1.0 - cfg.alpha) * scale) as f32),
        );
        out.grad_p_san.extend(
            kl_divergence_grad(&prior, &ps, cfg.epsilon)
                .into_iter()
                .map(|g| (g * cfg.alpha * scale) as f32),
        );
    }
    Ok(out)
}

/// Batch privacy loss with gradients for both posteriors.
#[derive(Debug, Clone)]
pub struct PrivacyBatch {
    pub loss: f64,
    pub grad_p_raw: Vec<f32>,
    pub grad_p_san: Vec<f32>,
}

pub fn one_hot(label: u8) -> [f64; 2] {
    if label == 0 {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    }
}

pub fn privacy_loss_batch(labels: &[u8], p_raw: &[f32], p_san: &[f32], epsilon: f64) -> Result<PrivacyBatch> {
    let batch = labels.len();
    if p_raw.len() != 2 * batch || p_san.len() != 2 * batch {
        return Err(Error::domain("privacy loss batch shapes differ"));
    }
    let scale = 1.0 / batch as f64;
    let mut out = PrivacyBatch {
        loss: 0.0,
        grad_p_raw: Vec::with_capacity(2 * batch),
        grad_p_san: Vec::with_capacity(2 * batch),
    };
    for (i, &label) in labels.iter().enumerate() {
        let y = one_hot(label);
        let pr = to_f64(&p_raw[2 * i..2 * i + 2]);
        let ps = to_f64(&p_san[2 * i..2 * i + 2]);
        out.loss += scale * (bce_unchecked(&y, &pr, epsilon) + bce_unchecked(&y, &ps, epsilon));
        out.grad_p_raw.extend(
            binary_cross_entropy_grad(&y, &pr, epsilon)
                .into_iter()
                .map(|g| (g * scale) as f32),
        );
        out.grad_p_san.extend(
            binary_cross_entropy_grad(&y, &ps, epsilon)
                .into_iter()
                .map(|g| (g * scale) as f32),
        );
    }
    Ok(out)
}

/// Mean categorical cross-entropy and its logit gradient `(p − y)/batch`.
pub fn cross_entropy_with_logit_grad(probs: &[f32], labels: &[usize], num_classes: usize) -> (f64, Vec<f32>) {
    let batch = labels.len();
    let scale = 1.0 / batch as f32;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (row, &label) in probs.chunks_exact(num_classes).zip(labels) {
        loss -= ((row[label] as f64) + DEFAULT_EPSILON).ln();
        for (c, &p) in row.iter().enumerate() {
            let y = if c == label { 1.0 } else { 0.0 };
            grad.push((p - y) * scale);
        }
    }
    (loss / batch as f64, grad)
}
