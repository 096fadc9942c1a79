//! The distribution families the models are built from.
//!
//! Each family wraps tape variables for its parameters, so log-densities
//! and reparametrized samples are differentiable through the parameters,
//! while plain `sample` methods read current values and return data
//! tensors with no graph attached. Batched use is the norm: parameters
//! and arguments carry a leading batch axis and per-example log-densities
//! come back as a rank-1 tensor (event dimensions are always summed).
//!
//! Closed-form KL divergences live here too, next to the families they
//! belong to, plus value-level helpers (`kl_categorical_probs`,
//! `entropy_probs`, `cb_mean`) used for metrics and oracle checks.

use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tape, Tensor, Var};

const LN_2PI: f64 = 1.8378770664093453;

/// Lower clamp applied to decoder-style probabilities so log terms stay
/// finite; mirrored at 1 - CLAMP from above.
pub const PROB_CLAMP: f64 = 1e-6;

// ---------------------------------------------------------------------------
// diagonal Gaussian

/// Independent Gaussian per coordinate. `sigma` may share the shape of
/// `mu` or be a trailing suffix of it (a shared scale across the batch).
#[derive(Clone, Copy)]
pub struct DiagGaussian<'t> {
    pub mu: Var<'t>,
    pub sigma: Var<'t>,
}

impl<'t> DiagGaussian<'t> {
    pub fn new(mu: Var<'t>, sigma: Var<'t>) -> Result<DiagGaussian<'t>> {
        let sv = sigma.value();
        if let Some(bad) = sv.data().iter().position(|&s| !(s > 0.0)) {
            return Err(Error::Domain {
                op: "DiagGaussian",
                detail: format!("sigma[{bad}] = {} is not strictly positive", sv.data()[bad]),
            });
        }
        Ok(DiagGaussian { mu, sigma })
    }

    /// N(0, I) over `dim` coordinates, as constants on `tape`.
    pub fn standard(tape: &'t Tape, dim: usize) -> DiagGaussian<'t> {
        DiagGaussian {
            mu: tape.constant(Tensor::zeros(&[dim])),
            sigma: tape.constant(Tensor::ones(&[dim])),
        }
    }

    fn full_shape(&self) -> Vec<usize> {
        let (ms, ss) = (self.mu.shape(), self.sigma.shape());
        if ms.len() >= ss.len() {
            ms
        } else {
            ss
        }
    }

    /// Per-example log density; event coordinates (the last axis) are
    /// summed, so `(B, L)` input yields `(B,)` output.
    pub fn log_prob(&self, x: Var<'t>) -> Result<Var<'t>> {
        let t = x.tape();
        let z = t.div(t.sub(x, self.mu)?, self.sigma)?;
        let per_coord = (z * z + self.sigma.log()?.mul_scalar(2.0) + LN_2PI).mul_scalar(-0.5);
        let rank = per_coord.shape().len();
        per_coord.sum_axis(rank - 1)
    }

    /// mu + sigma * eps for externally supplied standard-normal noise.
    /// Keeping the noise explicit lets callers share one stream between
    /// two estimators that must agree draw for draw.
    pub fn rsample_given(&self, eps: Var<'t>) -> Result<Var<'t>> {
        let t = eps.tape();
        t.add(self.mu, t.mul(self.sigma, eps)?)
    }

    /// Differentiable draw: mu + sigma * eps with fresh noise.
    pub fn rsample(&self, rng: &mut SeededRng) -> Result<Var<'t>> {
        let shape = self.full_shape();
        let tape = self.mu.tape();
        let eps = tape.constant(Tensor::randn(&shape, rng));
        self.rsample_given(eps)
    }

    /// Plain draw with no graph attached.
    pub fn sample(&self, rng: &mut SeededRng) -> Tensor {
        let shape = self.full_shape();
        let mu = self.mu.value();
        let sigma = self.sigma.value();
        let mut out = Tensor::randn(&shape, rng);
        let (mn, sn) = (mu.numel(), sigma.numel());
        let md = mu.data();
        let sd = sigma.data();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = md[i % mn] + sd[i % sn] * *v;
        }
        out
    }
}

/// KL(q || p) between diagonal Gaussians, summed over the last axis.
pub fn kl_diag_gaussian<'t>(q: &DiagGaussian<'t>, p: &DiagGaussian<'t>) -> Result<Var<'t>> {
    let t = q.mu.tape();
    let ratio = t.div(q.sigma, p.sigma)?;
    let dmu = t.div(t.sub(q.mu, p.mu)?, p.sigma)?;
    let per_coord = ratio.log()?.mul_scalar(-1.0)
        + (ratio * ratio + dmu * dmu).mul_scalar(0.5)
        - 0.5;
    let rank = per_coord.shape().len();
    per_coord.sum_axis(rank - 1)
}

// ---------------------------------------------------------------------------
// full-covariance Gaussian, upper-triangular Cholesky parametrization

/// Gaussian with one shared full covariance across the batch, stored as an
/// upper-triangular factor U with Sigma = U^T U. The lower triangle of the
/// supplied matrix must be zero (mask before constructing); a zero on the
/// diagonal is an error rather than something to clamp away.
#[derive(Clone, Copy)]
pub struct FullGaussianCholesky<'t> {
    pub mu: Var<'t>,
    pub chol_upper: Var<'t>,
}

impl<'t> FullGaussianCholesky<'t> {
    pub fn new(mu: Var<'t>, chol_upper: Var<'t>) -> Result<FullGaussianCholesky<'t>> {
        let u = chol_upper.value();
        let s = u.shape().to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::ShapeMismatch {
                op: "FullGaussianCholesky",
                shapes: vec![s],
                detail: "factor must be square".into(),
            });
        }
        let l = s[0];
        let ms = mu.shape();
        if ms.last() != Some(&l) {
            return Err(Error::ShapeMismatch {
                op: "FullGaussianCholesky",
                shapes: vec![ms, s],
                detail: "mean's last axis must match the factor".into(),
            });
        }
        for i in 0..l {
            for j in 0..i {
                if u.get2(i, j) != 0.0 {
                    return Err(Error::Domain {
                        op: "FullGaussianCholesky",
                        detail: format!("factor has nonzero entry below the diagonal at ({i},{j})"),
                    });
                }
            }
            if u.get2(i, i) == 0.0 {
                return Err(Error::Domain {
                    op: "FullGaussianCholesky",
                    detail: format!("factor diagonal [{i}] is zero; covariance is singular"),
                });
            }
        }
        Ok(FullGaussianCholesky { mu, chol_upper })
    }

    pub fn dim(&self) -> usize {
        self.chol_upper.shape()[0]
    }

    /// mu + eps U, the reparametrized draw (per row, U^T eps).
    pub fn rsample_given(&self, eps: Var<'t>) -> Result<Var<'t>> {
        let t = eps.tape();
        t.add(self.mu, eps.matmul(self.chol_upper)?)
    }

    pub fn rsample(&self, rng: &mut SeededRng) -> Result<Var<'t>> {
        let tape = self.mu.tape();
        let eps = tape.constant(Tensor::randn(&self.mu.shape(), rng));
        self.rsample_given(eps)
    }

    pub fn sample(&self, rng: &mut SeededRng) -> Tensor {
        let mu = self.mu.value();
        let u = self.chol_upper.value();
        let l = self.dim();
        let rows = mu.numel() / l;
        let mut out = mu.clone();
        for r in 0..rows {
            let eps: Vec<f64> = (0..l).map(|_| rng.normal()).collect();
            for j in 0..l {
                let mut acc = 0.0;
                for k in 0..=j {
                    acc += eps[k] * u.get2(k, j);
                }
                out.data_mut()[r * l + j] += acc;
            }
        }
        out
    }

    /// The covariance U^T U as values (no graph).
    pub fn covariance(&self) -> Tensor {
        let u = self.chol_upper.value();
        let l = self.dim();
        let mut cov = Tensor::zeros(&[l, l]);
        for i in 0..l {
            for j in 0..l {
                let mut s = 0.0;
                for k in 0..l {
                    s += u.get2(k, i) * u.get2(k, j);
                }
                cov.data_mut()[i * l + j] = s;
            }
        }
        cov
    }
}

/// KL(q || N(0, I)) for a shared-covariance batch:
/// (tr Sigma + |mu|^2 - L - log det Sigma) / 2, one value per row of mu.
pub fn kl_full_gaussian_vs_standard<'t>(q: &FullGaussianCholesky<'t>) -> Result<Var<'t>> {
    let l = q.dim();
    let u = q.chol_upper;
    let trace = (u * u).sum_all();
    let logdet = u.diag_part()?.abs().log()?.sum_all().mul_scalar(2.0);
    let mumu = (q.mu * q.mu).sum_axis(q.mu.shape().len() - 1)?;
    let shared = (trace - logdet - l as f64).mul_scalar(0.5);
    let t = q.mu.tape();
    t.add(mumu.mul_scalar(0.5), shared)
}

// ---------------------------------------------------------------------------
// continuous Bernoulli

/// Continuous Bernoulli on [0, 1]^D with one shape parameter per
/// coordinate. Parameters are clamped into [1e-6, 1 - 1e-6] at
/// construction, which keeps every log term finite and is also the
/// distribution's open-interval requirement on lambda.
#[derive(Clone, Copy)]
pub struct ContinuousBernoulliVec<'t> {
    lambda: Var<'t>,
}

impl<'t> ContinuousBernoulliVec<'t> {
    pub fn new(lambda_raw: Var<'t>) -> Result<ContinuousBernoulliVec<'t>> {
        let lambda = lambda_raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?;
        Ok(ContinuousBernoulliVec { lambda })
    }

    pub fn lambda(&self) -> Var<'t> {
        self.lambda
    }

    /// Per-example log density over [0,1]^D:
    /// sum_d [ x log l + (1-x) log(1-l) + log C(l) ].
    pub fn log_prob(&self, x: Var<'t>) -> Result<Var<'t>> {
        let xv = x.value();
        if let Some(bad) = xv.data().iter().position(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Domain {
                op: "ContinuousBernoulliVec::log_prob",
                detail: format!("x[{bad}] = {} outside [0, 1]", xv.data()[bad]),
            });
        }
        let t = x.tape();
        let one_minus_x = -x + 1.0;
        let one_minus_l = -self.lambda + 1.0;
        let per_coord = t.add(
            t.add(
                t.mul(x, self.lambda.log()?)?,
                t.mul(one_minus_x, one_minus_l.log()?)?,
            )?,
            self.lambda.cb_log_normalizer()?,
        )?;
        let rank = per_coord.shape().len();
        per_coord.sum_axis(rank - 1)
    }

    /// Exact draw by inverse CDF (no graph).
    pub fn sample(&self, rng: &mut SeededRng) -> Tensor {
        let lam = self.lambda.value();
        let mut out = Tensor::zeros(lam.shape());
        for (o, &l) in out.data_mut().iter_mut().zip(lam.data()) {
            let u = rng.uniform();
            *o = if (l - 0.5).abs() < 1e-9 {
                u
            } else {
                let num = (u * (2.0 * l - 1.0) + 1.0 - l).ln() - (1.0 - l).ln();
                num / (l.ln() - (1.0 - l).ln())
            };
        }
        out
    }
}

/// log C(lambda), the continuous Bernoulli's log normalizing constant.
/// C(1/2) = 2; elsewhere C = 2 atanh(1-2l) / (1-2l), with a Taylor branch
/// near 1/2.
pub fn cb_log_normalizer(lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Domain {
            op: "cb_log_normalizer",
            detail: format!("lambda {lambda} outside (0, 1)"),
        });
    }
    Ok(crate::tensor::cb_log_norm_scalar_value(lambda))
}

/// Analytic mean of the continuous Bernoulli.
pub fn cb_mean(lambda: f64) -> f64 {
    let u = 1.0 - 2.0 * lambda;
    if u.abs() < 1e-4 {
        0.5 - u / 6.0
    } else {
        lambda / (2.0 * lambda - 1.0) + 1.0 / (2.0 * u.atanh())
    }
}

// ---------------------------------------------------------------------------
// Bernoulli

/// Independent Bernoulli per coordinate. Probabilities may sit on the
/// closed interval; `log_prob` clamps internally so endpoints stay finite,
/// while `sample` uses the raw values (p = 1 always yields 1).
#[derive(Clone, Copy)]
pub struct BernoulliVec<'t> {
    pub probs: Var<'t>,
}

impl<'t> BernoulliVec<'t> {
    pub fn new(probs: Var<'t>) -> Result<BernoulliVec<'t>> {
        let pv = probs.value();
        if let Some(bad) = pv.data().iter().position(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Domain {
                op: "BernoulliVec",
                detail: format!("probs[{bad}] = {} outside [0, 1]", pv.data()[bad]),
            });
        }
        Ok(BernoulliVec { probs })
    }

    /// Per-example log mass for binary x.
    pub fn log_prob(&self, x: Var<'t>) -> Result<Var<'t>> {
        let xv = x.value();
        if let Some(bad) = xv.data().iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain {
                op: "BernoulliVec::log_prob",
                detail: format!("x[{bad}] = {} is not 0 or 1", xv.data()[bad]),
            });
        }
        let t = x.tape();
        let p = self.probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?;
        let per_coord = t.add(
            t.mul(x, p.log()?)?,
            t.mul(-x + 1.0, (-p + 1.0).log()?)?,
        )?;
        let rank = per_coord.shape().len();
        per_coord.sum_axis(rank - 1)
    }

    pub fn sample(&self, rng: &mut SeededRng) -> Tensor {
        let pv = self.probs.value();
        let mut out = Tensor::zeros(pv.shape());
        for (o, &p) in out.data_mut().iter_mut().zip(pv.data()) {
            *o = if rng.uniform() < p { 1.0 } else { 0.0 };
        }
        out
    }
}

// ---------------------------------------------------------------------------
// categorical (one-hot) and its Gumbel-Softmax relaxation

/// Categorical over C classes in one-hot encoding, parametrized by
/// unnormalized logits (last axis).
#[derive(Clone, Copy)]
pub struct OneHotCategorical<'t> {
    pub logits: Var<'t>,
}

impl<'t> OneHotCategorical<'t> {
    pub fn from_logits(logits: Var<'t>) -> OneHotCategorical<'t> {
        OneHotCategorical { logits }
    }

    /// Uniform distribution over `c` classes (zero logits) as constants.
    pub fn uniform(tape: &'t Tape, c: usize) -> OneHotCategorical<'t> {
        OneHotCategorical { logits: tape.constant(Tensor::zeros(&[c])) }
    }

    pub fn num_classes(&self) -> usize {
        *self.logits.shape().last().unwrap()
    }

    pub fn probs(&self) -> Result<Var<'t>> {
        self.logits.softmax()
    }

    /// Per-row log mass of a one-hot `y`: sum(y * log_softmax(logits)).
    pub fn log_prob(&self, y: Var<'t>) -> Result<Var<'t>> {
        validate_one_hot_rows(&y.value())?;
        let t = y.tape();
        let per_class = t.mul(y, self.logits.log_softmax()?)?;
        let rank = per_class.shape().len();
        per_class.sum_axis(rank - 1)
    }

    /// Exact one-hot draws by the Gumbel-max trick (ties, which have
    /// probability zero, break to the lowest index).
    pub fn sample(&self, rng: &mut SeededRng) -> Tensor {
        let lv = self.logits.value();
        let c = *lv.shape().last().unwrap();
        let rows = lv.numel() / c;
        let mut out = Tensor::zeros(lv.shape());
        for r in 0..rows {
            let row = &lv.data()[r * c..(r + 1) * c];
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (i, &l) in row.iter().enumerate() {
                let v = l + rng.gumbel();
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            out.data_mut()[r * c + best] = 1.0;
        }
        out
    }

    /// Per-row entropy, differentiable through the logits.
    pub fn entropy(&self) -> Result<Var<'t>> {
        let t = self.logits.tape();
        let p = self.probs()?;
        let lp = self.logits.log_softmax()?;
        let per_class = t.mul(p, lp)?;
        let rank = per_class.shape().len();
        Ok(-per_class.sum_axis(rank - 1)?)
    }
}

/// KL(q || p) between categoricals given by logits, summed per row. Both
/// sides pass through softmax, so all probabilities are strictly positive
/// and the divergence is always finite here; the value-level
/// [`kl_categorical_probs`] handles explicit zeros.
pub fn kl_categorical<'t>(q: &OneHotCategorical<'t>, p: &OneHotCategorical<'t>) -> Result<Var<'t>> {
    let t = q.logits.tape();
    let qp = q.probs()?;
    let diff = t.sub(q.logits.log_softmax()?, p.logits.log_softmax()?)?;
    let per_class = t.mul(qp, diff)?;
    let rank = per_class.shape().len();
    per_class.sum_axis(rank - 1)
}

/// KL between explicit probability vectors with the 0 log 0 = 0
/// convention; infinite divergence (q > 0 where p = 0) is an error.
pub fn kl_categorical_probs(q: &[f64], p: &[f64]) -> Result<f64> {
    assert_eq!(q.len(), p.len());
    let mut total = 0.0;
    for (i, (&qi, &pi)) in q.iter().zip(p).enumerate() {
        if qi == 0.0 {
            continue;
        }
        if pi == 0.0 {
            return Err(Error::InfiniteKl { index: i });
        }
        total += qi * (qi.ln() - pi.ln());
    }
    Ok(total)
}

/// Shannon entropy of a probability vector in nats, 0 log 0 = 0.
pub fn entropy_probs(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Gumbel-Softmax relaxation of the one-hot categorical: samples live on
/// the open simplex and sharpen toward vertices as temperature drops.
#[derive(Clone, Copy)]
pub struct RelaxedOneHotCategorical<'t> {
    pub logits: Var<'t>,
    pub temperature: f64,
}

impl<'t> RelaxedOneHotCategorical<'t> {
    pub fn new(logits: Var<'t>, temperature: f64) -> Result<RelaxedOneHotCategorical<'t>> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Domain {
                op: "RelaxedOneHotCategorical",
                detail: format!("temperature {temperature} must be positive and finite"),
            });
        }
        Ok(RelaxedOneHotCategorical { logits, temperature })
    }

    pub fn num_classes(&self) -> usize {
        *self.logits.shape().last().unwrap()
    }

    /// softmax((logits + g) / temperature) for supplied Gumbel noise.
    pub fn rsample_given(&self, gumbels: Var<'t>) -> Result<Var<'t>> {
        let t = gumbels.tape();
        t.add(self.logits, gumbels)?
            .mul_scalar(1.0 / self.temperature)
            .softmax()
    }

    pub fn rsample(&self, rng: &mut SeededRng) -> Result<Var<'t>> {
        let tape = self.logits.tape();
        let shape = self.logits.shape();
        let g = Tensor::from_vec(
            shape.clone(),
            (0..shape.iter().product()).map(|_| rng.gumbel()).collect(),
        )?;
        self.rsample_given(tape.constant(g))
    }

    /// Log density on the (C-1)-simplex:
    /// log (C-1)! + (C-1) log t - C lse_c(l_c - t log y_c)
    ///   + sum_c (l_c - (t+1) log y_c).
    /// Invariant to shifting the logits, matching the softmax that
    /// produced the sample.
    pub fn log_prob(&self, y: Var<'t>) -> Result<Var<'t>> {
        let yv = y.value();
        let c = self.num_classes();
        if yv.shape().last() != Some(&c) {
            return Err(Error::ShapeMismatch {
                op: "RelaxedOneHotCategorical::log_prob",
                shapes: vec![yv.shape().to_vec(), self.logits.shape()],
                detail: "class axes differ".into(),
            });
        }
        for (i, row) in yv.data().chunks(c).enumerate() {
            if let Some(j) = row.iter().position(|&v| !(v > 0.0)) {
                return Err(Error::Domain {
                    op: "RelaxedOneHotCategorical::log_prob",
                    detail: format!("y[{i}][{j}] = {} is not strictly positive", row[j]),
                });
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Domain {
                    op: "RelaxedOneHotCategorical::log_prob",
                    detail: format!("row {i} sums to {s}, not 1"),
                });
            }
        }
        let t = y.tape();
        let tau = self.temperature;
        let ly = y.log()?;
        let scores = t.sub(self.logits, ly.mul_scalar(tau))?; // l_c - t log y_c
        let lse = log_sum_exp_rows(scores)?;
        let lin = t.sub(self.logits, ly.mul_scalar(tau + 1.0))?;
        let rank = lin.shape().len();
        let lin_sum = lin.sum_axis(rank - 1)?;
        let cf = c as f64;
        let log_fact: f64 = (1..c).map(|k| (k as f64).ln()).sum();
        let constant = log_fact + (cf - 1.0) * tau.ln();
        t.add(t.sub(lin_sum, lse.mul_scalar(cf))?, t.constant_scalar(constant))
    }
}

/// Row-wise log-sum-exp over the last axis, stabilized by a detached
/// per-row max (the max is constant data, so gradients flow through the
/// exp path only — which is exactly the softmax derivative).
fn log_sum_exp_rows(x: Var<'_>) -> Result<Var<'_>> {
    let t = x.tape();
    let xv = x.value();
    let c = *xv.shape().last().unwrap();
    let rows = xv.numel() / c;
    let mut maxes = Vec::with_capacity(rows);
    for row in xv.data().chunks(c) {
        maxes.push(row.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    let mut wide = Vec::with_capacity(rows * c);
    for &m in &maxes {
        for _ in 0..c {
            wide.push(m);
        }
    }
    let m_wide = t.constant(Tensor::from_vec(xv.shape().to_vec(), wide)?);
    let mut narrow_shape = xv.shape().to_vec();
    narrow_shape.pop();
    let m_narrow = t.constant(Tensor::from_vec(narrow_shape, maxes)?);
    let shifted = t.sub(x, m_wide)?;
    let rank = shifted.shape().len();
    let sums = shifted.exp().sum_axis(rank - 1)?;
    t.add(sums.log()?, m_narrow)
}

/// Row-wise argmax indices (ties to the lowest index).
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = *t.shape().last().unwrap();
    t.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Checks every row is an exact one-hot vector (entries 0 or 1, one 1).
pub fn validate_one_hot_rows(y: &Tensor) -> Result<()> {
    let c = *y.shape().last().unwrap();
    for (r, row) in y.data().chunks(c).enumerate() {
        let mut ones = 0;
        for (j, &v) in row.iter().enumerate() {
            if v == 1.0 {
                ones += 1;
            } else if v != 0.0 {
                return Err(Error::Domain {
                    op: "one_hot",
                    detail: format!("y[{r}][{j}] = {v} is neither 0 nor 1"),
                });
            }
        }
        if ones != 1 {
            return Err(Error::Domain {
                op: "one_hot",
                detail: format!("row {r} has {ones} ones, expected exactly 1"),
            });
        }
    }
    Ok(())
}

/// One-hot encodes labels into a (n, c) tensor.
pub fn one_hot(labels: &[u8], c: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), c]);
    for (i, &l) in labels.iter().enumerate() {
        if (l as usize) >= c {
            return Err(Error::Domain {
                op: "one_hot",
                detail: format!("label {l} out of range for {c} classes"),
            });
        }
        t.data_mut()[i * c + l as usize] = 1.0;
    }
    Ok(t)
}
