//! Dirichlet evidential machinery: evidence to concentration parameters,
//! per-pixel epistemic uncertainty, the closed-form Bayes-risk loss with its
//! KL regularizer, and the combined training objective.

use crate::error::{Error, Result};
use crate::special;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Dirichlet parameterization of a dense prediction: evidence `e >= 0`,
/// concentrations `alpha = e + 1`, and per-pixel strength `S = sum_c alpha`.
pub struct DirichletOutput {
    pub evidence: Tensor,
    pub alpha: Tensor,
    /// `[B, 1, H, W]`
    pub strength: Tensor,
    classes: usize,
}

impl DirichletOutput {
    pub fn from_evidence(evidence: &Tensor) -> Result<Self> {
        let shape = evidence.shape();
        if shape.len() != 4 {
            return Err(Error::shape(format!(
                "evidence must be [B,C,H,W], got {shape:?}"
            )));
        }
        if evidence.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("evidence must be non-negative".into()));
        }
        let classes = shape[1];
        let alpha = evidence.affine(1.0, 1.0)?;
        let strength = alpha.sum_axis(1)?;
        Ok(DirichletOutput {
            evidence: evidence.clone(),
            alpha,
            strength,
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Expected class probabilities `alpha / S`; sums to 1 over the class
    /// axis.
    pub fn expected_probability(&self) -> Result<Tensor> {
        self.alpha.div(&self.strength)
    }
}

/// Per-pixel epistemic uncertainty `U = C / S`, in (0, 1]. Detached from the
/// gradient graph: uncertainty feeds the aggregation protocol, not the loss.
pub struct UncertaintyMap {
    /// `[B, H, W]`
    pub values: Tensor,
}

pub fn uncertainty(out: &DirichletOutput) -> Result<UncertaintyMap> {
    let [b, _, h, w]: [usize; 4] = out.strength.shape().try_into().expect("strength is 4-d");
    let values = out
        .strength
        .detach()
        .recip()?
        .affine(out.classes as f32, 0.0)?
        .reshape(&[b, h, w])?;
    Ok(UncertaintyMap { values })
}

/// Loss hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the evidential term in the combined objective.
    pub mu: f32,
    /// KL annealing horizon: lambda(t) = min(1, t / kl_anneal_rounds).
    pub kl_anneal_rounds: usize,
    /// Fraction of most-uncertain pixels entering the client uncertainty
    /// summary (consumed by the federation layer).
    pub tau_fraction: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mu: 0.8,
            kl_anneal_rounds: 10,
            tau_fraction: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0) {
            return Err(Error::Config(format!("loss.mu must be >= 0, got {}", self.mu)));
        }
        if !(self.tau_fraction > 0.0 && self.tau_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "loss.tau_fraction must be in (0,1], got {}",
                self.tau_fraction
            )));
        }
        Ok(())
    }

    /// Nondecreasing KL coefficient in [0, 1].
    pub fn lambda(&self, round: usize) -> f32 {
        if self.kl_anneal_rounds == 0 {
            1.0
        } else {
            (round as f32 / self.kl_anneal_rounds as f32).min(1.0)
        }
    }
}

fn check_labels(y: &Tensor, like: &Tensor) -> Result<()> {
    if y.shape() != like.shape() {
        return Err(Error::Label(format!(
            "labels shaped {:?}, predictions {:?}",
            y.shape(),
            like.shape()
        )));
    }
    let [b, c, h, w]: [usize; 4] = y.shape().try_into().expect("4-d");
    let plane = h * w;
    for bi in 0..b {
        for p in 0..plane {
            let mut ones = 0u32;
            for ci in 0..c {
                let v = y.data()[(bi * c + ci) * plane + p];
                if v == 1.0 {
                    ones += 1;
                } else if v != 0.0 {
                    return Err(Error::Label(format!(
                        "labels must be one-hot, found {v}"
                    )));
                }
            }
            if ones != 1 {
                return Err(Error::Label(format!(
                    "pixel ({bi},{p}) has {ones} active classes"
                )));
            }
        }
    }
    Ok(())
}

/// Closed-form Dirichlet expectation of the squared error `||y - p||^2`:
/// per pixel `sum_c (y_c - alpha_c/S)^2 + alpha_c (S - alpha_c) / (S^2 (S+1))`,
/// averaged over pixels and batch.
pub fn bayes_risk_loss(out: &DirichletOutput, y: &Tensor) -> Result<Tensor> {
    check_labels(y, &out.alpha)?;
    let p_hat = out.expected_probability()?;
    let err = y.sub(&p_hat)?;
    let err2 = err.mul(&err)?;
    let s_minus_a = out.strength.sub(&out.alpha)?;
    let s_sq = out.strength.mul(&out.strength)?;
    let s_p1 = out.strength.affine(1.0, 1.0)?;
    let denom = s_sq.mul(&s_p1)?;
    let var = out.alpha.mul(&s_minus_a)?.div(&denom)?;
    err2.add(&var)?.sum_axis(1)?.mean_all()
}

/// Closed-form KL(Dir(alpha_tilde) || Dir(1,...,1)), averaged over pixels.
/// Requires `alpha_tilde >= 1` elementwise.
pub fn kl_to_uniform(alpha_tilde: &Tensor) -> Result<Tensor> {
    let shape = alpha_tilde.shape();
    if shape.len() != 4 {
        return Err(Error::shape(format!(
            "alpha_tilde must be [B,C,H,W], got {shape:?}"
        )));
    }
    if alpha_tilde.data().iter().any(|&v| v < 1.0) {
        return Err(Error::Domain(
            "alpha_tilde must be >= 1 elementwise".into(),
        ));
    }
    let classes = shape[1];
    let s_tilde = alpha_tilde.sum_axis(1)?;
    let term_s = s_tilde.lgamma()?;
    let term_a = alpha_tilde.lgamma()?.sum_axis(1)?;
    let ln_gamma_c = special::ln_gamma(classes as f64) as f32;
    let centered = alpha_tilde.digamma()?.sub(&s_tilde.digamma()?)?;
    let weighted = alpha_tilde.affine(1.0, -1.0)?.mul(&centered)?.sum_axis(1)?;
    term_s
        .sub(&term_a)?
        .affine(1.0, -ln_gamma_c)?
        .add(&weighted)?
        .mean_all()
}

/// `alpha` with the true-class evidence removed: `y + (1 - y) * alpha`.
pub fn masked_alpha(out: &DirichletOutput, y: &Tensor) -> Result<Tensor> {
    let inv = y.affine(-1.0, 1.0)?;
    y.add(&inv.mul(&out.alpha)?)
}

/// Full evidential objective: Bayes risk plus annealed KL regularization of
/// the off-class concentrations toward the uniform Dirichlet.
pub fn evidential_loss(
    out: &DirichletOutput,
    y: &Tensor,
    round: usize,
    cfg: &LossConfig,
) -> Result<Tensor> {
    let risk = bayes_risk_loss(out, y)?;
    let lambda = cfg.lambda(round);
    let kl = kl_to_uniform(&masked_alpha(out, y)?)?;
    risk.add(&kl.affine(lambda, 0.0)?)
}

/// Combined objective and its per-branch values.
pub struct CombinedLoss {
    pub total: Tensor,
    pub seg_value: f32,
    pub eu_value: f32,
}

/// `L_seg + mu * L_eu` where `L_seg` is mean binary cross-entropy on
/// sigmoided logits.
///
/// Routing is structural: the seg branch reaches every parameter except the
/// EU head, the evidential branch everything except the seg head, and the
/// frozen encoder is never a gradient leaf.
pub fn combined_loss(
    seg_logits: &Tensor,
    out: &DirichletOutput,
    y: &Tensor,
    round: usize,
    cfg: &LossConfig,
) -> Result<CombinedLoss> {
    check_labels(y, seg_logits)?;
    // softplus(z) - z*y == -[y ln sigmoid(z) + (1-y) ln(1 - sigmoid(z))]
    let seg = seg_logits
        .softplus()?
        .sub(&seg_logits.mul(y)?)?
        .mean_all()?;
    let eu = evidential_loss(out, y, round, cfg)?;
    let total = seg.add(&eu.affine(cfg.mu, 0.0)?)?;
    Ok(CombinedLoss {
        seg_value: seg.item()?,
        eu_value: eu.item()?,
        total,
    })
}
