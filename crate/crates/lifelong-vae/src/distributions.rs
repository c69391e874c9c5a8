//! Latent-space distributions: reparameterized sampling and the closed-form
//! divergences and log-probabilities the training objectives are built from.
//!
//! Everything here is a pure function of its arguments; randomness enters only
//! through explicitly supplied noise vectors, so callers own determinism.
//! All sums run in `f64`.

use crate::error::{Error, Result};

/// Probability floor used when a smaller categorical support is expanded to a
/// larger one. Exact zero padding would make the reverse KL infinite.
pub const CATEGORICAL_PAD_EPSILON: f64 = 1e-6;

const LN_2PI: f64 = 1.837877066409345_f64;

/// Diagonal Gaussian over the continuous latent: mean and log-variance per
/// dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::arg("mu", "dimension must be at least 1"));
        }
        if mu.len() != log_var.len() {
            return Err(Error::dim("GaussianParams", mu.len(), log_var.len()));
        }
        if mu.iter().chain(log_var.iter()).any(|v| !v.is_finite()) {
            return Err(Error::arg("GaussianParams", "entries must be finite"));
        }
        Ok(GaussianParams { mu, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Standard normal of the given dimension.
    pub fn standard(dim: usize) -> Self {
        GaussianParams {
            mu: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }
}

/// Categorical over the discrete latent, parameterized by unnormalized logits.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalParams {
    pub logits: Vec<f64>,
}

impl CategoricalParams {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::arg("logits", "dimension must be at least 1"));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("logits", "entries must be finite"));
        }
        Ok(CategoricalParams { logits })
    }

    pub fn dim(&self) -> usize {
        self.logits.len()
    }

    /// Normalized probabilities via a max-shifted softmax.
    pub fn probs(&self) -> Vec<f64> {
        let m = self.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.logits.iter().map(|&l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    /// Normalized log-probabilities.
    pub fn log_probs(&self) -> Vec<f64> {
        let m = self.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + self
            .logits
            .iter()
            .map(|&l| (l - m).exp())
            .sum::<f64>()
            .ln();
        self.logits.iter().map(|&l| l - lse).collect()
    }
}

/// One draw of the factored latent: continuous coordinates plus a relaxed
/// one-hot on the simplex.
#[derive(Debug, Clone)]
pub struct LatentSample {
    pub z_c: Vec<f64>,
    pub z_d: Vec<f64>,
}

impl LatentSample {
    pub fn new(z_c: Vec<f64>, z_d: Vec<f64>) -> Result<Self> {
        let sum: f64 = z_d.iter().sum();
        if z_d.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::arg(
                "z_d",
                format!("must lie on the simplex (sum {sum})"),
            ));
        }
        Ok(LatentSample { z_c, z_d })
    }
}

/// Externally drawn noise for one sample: standard-normal for the continuous
/// latent, standard-Gumbel for the discrete one, uniforms for batch mixing.
#[derive(Debug, Clone)]
pub struct NoiseBundle {
    pub epsilon: Vec<f64>,
    pub gumbel: Vec<f64>,
    pub omega_uniforms: Vec<f64>,
}

impl NoiseBundle {
    /// Draw a bundle from `rng`. Uniforms for the Gumbel transform are clamped
    /// into `[1e-12, 1-1e-12]` before the double log.
    pub fn draw<R: rand::Rng>(
        rng: &mut R,
        continuous_dim: usize,
        discrete_dim: usize,
        mixing_draws: usize,
    ) -> Self {
        let epsilon = (0..continuous_dim)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let gumbel = (0..discrete_dim).map(|_| gumbel_from_uniform(rng.random())).collect();
        let omega_uniforms = (0..mixing_draws).map(|_| rng.random()).collect();
        NoiseBundle {
            epsilon,
            gumbel,
            omega_uniforms,
        }
    }
}

/// Standard-Gumbel draw from a uniform, with the uniform clamped away from
/// {0, 1} so both logs stay finite.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(1e-12, 1.0 - 1e-12);
    -(-u.ln()).ln()
}

/// KL direction selector. `Reverse` is `KL[student ‖ teacher]`, the default
/// used by the consistency regularizer; `Forward` swaps the arguments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum Direction {
    #[default]
    Reverse,
    Forward,
}

/// Family-tagged posterior parameters, for operations generic over both
/// latent components.
#[derive(Debug, Clone)]
pub enum PosteriorParams {
    Gaussian(GaussianParams),
    Categorical(CategoricalParams),
}

/// `mu + exp(log_var / 2) * epsilon`, elementwise.
pub fn gaussian_reparam_sample(q: &GaussianParams, epsilon: &[f64]) -> Result<Vec<f64>> {
    if epsilon.len() != q.dim() {
        return Err(Error::dim("gaussian_reparam_sample", q.dim(), epsilon.len()));
    }
    Ok(q.mu
        .iter()
        .zip(&q.log_var)
        .zip(epsilon)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// `softmax((logits + gumbel) / tau)`; a relaxed one-hot on the simplex.
pub fn gumbel_softmax_sample(
    q: &CategoricalParams,
    tau: f64,
    gumbel: &[f64],
) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::arg("tau", format!("must be positive, got {tau}")));
    }
    if gumbel.len() != q.dim() {
        return Err(Error::dim("gumbel_softmax_sample", q.dim(), gumbel.len()));
    }
    let scaled = CategoricalParams {
        logits: q
            .logits
            .iter()
            .zip(gumbel)
            .map(|(&l, &g)| (l + g) / tau)
            .collect(),
    };
    Ok(scaled.probs())
}

/// `KL[N(mu, var) ‖ N(0, I)]` in nats.
pub fn gaussian_kl_to_prior(q: &GaussianParams) -> f64 {
    0.5 * q
        .mu
        .iter()
        .zip(&q.log_var)
        .map(|(&m, &lv)| lv.exp() + m * m - 1.0 - lv)
        .sum::<f64>()
}

/// General diagonal-Gaussian `KL[student ‖ teacher]` in nats. The teacher mean
/// is not assumed centered.
pub fn gaussian_cross_kl(student: &GaussianParams, teacher: &GaussianParams) -> Result<f64> {
    if student.dim() != teacher.dim() {
        return Err(Error::dim("gaussian_cross_kl", student.dim(), teacher.dim()));
    }
    Ok(0.5
        * student
            .mu
            .iter()
            .zip(&student.log_var)
            .zip(teacher.mu.iter().zip(&teacher.log_var))
            .map(|((&ms, &lvs), (&mt, &lvt))| {
                (lvs - lvt).exp() + (mt - ms) * (mt - ms) / lvt.exp() - 1.0 + lvt - lvs
            })
            .sum::<f64>())
}

/// Expand a categorical to a larger support by padding each new slot with
/// [`CATEGORICAL_PAD_EPSILON`] probability mass and renormalizing.
pub fn pad_categorical(teacher: &CategoricalParams, new_dim: usize) -> Result<CategoricalParams> {
    let old = teacher.dim();
    if new_dim < old {
        return Err(Error::arg(
            "new_dim",
            format!("support may only grow ({old} -> {new_dim})"),
        ));
    }
    if new_dim == old {
        return Ok(teacher.clone());
    }
    let mut probs = teacher.probs();
    probs.extend(std::iter::repeat(CATEGORICAL_PAD_EPSILON).take(new_dim - old));
    let z: f64 = probs.iter().sum();
    CategoricalParams::new(probs.into_iter().map(|p| (p / z).ln()).collect())
}

/// Categorical `KL[student ‖ teacher]` in nats. A teacher with a smaller
/// support is expanded with [`pad_categorical`] first; a larger one is an
/// error (students never shrink).
pub fn categorical_cross_kl(
    student: &CategoricalParams,
    teacher: &CategoricalParams,
) -> Result<f64> {
    if teacher.dim() > student.dim() {
        return Err(Error::dim(
            "categorical_cross_kl",
            student.dim(),
            teacher.dim(),
        ));
    }
    let teacher = pad_categorical(teacher, student.dim())?;
    let p = student.probs();
    let lp = student.log_probs();
    let lq = teacher.log_probs();
    Ok(p.iter()
        .zip(lp.iter().zip(&lq))
        .map(|(&pi, (&lpi, &lqi))| if pi > 0.0 { pi * (lpi - lqi) } else { 0.0 })
        .sum())
}

/// `KL[q ‖ Uniform(J)] = log J - H(q)` in nats.
pub fn categorical_kl_to_uniform(q: &CategoricalParams) -> f64 {
    let p = q.probs();
    let lp = q.log_probs();
    let neg_entropy: f64 = p
        .iter()
        .zip(&lp)
        .map(|(&pi, &lpi)| if pi > 0.0 { pi * lpi } else { 0.0 })
        .sum();
    (q.dim() as f64).ln() + neg_entropy
}

/// Log-density of `z` under the diagonal Gaussian `q`, in nats.
pub fn gaussian_log_prob(q: &GaussianParams, z: &[f64]) -> Result<f64> {
    if z.len() != q.dim() {
        return Err(Error::dim("gaussian_log_prob", q.dim(), z.len()));
    }
    Ok(q.mu
        .iter()
        .zip(&q.log_var)
        .zip(z)
        .map(|((&m, &lv), &zj)| -0.5 * LN_2PI - 0.5 * lv - 0.5 * (zj - m) * (zj - m) / lv.exp())
        .sum())
}

/// Cross-model KL in either direction, for matching posterior families.
pub fn forward_or_reverse_cross_kl(
    student: &PosteriorParams,
    teacher: &PosteriorParams,
    direction: Direction,
) -> Result<f64> {
    match (student, teacher) {
        (PosteriorParams::Gaussian(s), PosteriorParams::Gaussian(t)) => match direction {
            Direction::Reverse => gaussian_cross_kl(s, t),
            Direction::Forward => gaussian_cross_kl(t, s),
        },
        (PosteriorParams::Categorical(s), PosteriorParams::Categorical(t)) => match direction {
            // The padded support always matches the student's.
            Direction::Reverse => categorical_cross_kl(s, t),
            Direction::Forward => {
                let t = pad_categorical(t, s.dim())?;
                categorical_cross_kl(&t, s)
            }
        },
        _ => Err(Error::arg(
            "teacher",
            "student and teacher must share a distribution family",
        )),
    }
}
