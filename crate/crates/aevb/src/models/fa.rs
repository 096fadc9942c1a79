//! Factor analysis: x = W z + diagonal Gaussian noise, z standard
//! normal, with an amortized linear posterior whose mean is V x and
//! whose full covariance (one Cholesky factor, shared across examples)
//! is learned directly. The only model here with a closed-form evidence,
//! which makes it the reference case for checking that ELBO ascent
//! tightens against a known ceiling.

use crate::data::{fa_ancestral, fa_evidence, DataSplit};
use crate::dist::{kl_full_gaussian_vs_standard, DiagGaussian, FullGaussianCholesky};
use crate::error::Result;
use crate::models::{Batch, ExtraMetrics, LatentModel, ModelKind, RowNoise};
use crate::nn::{Bound, ParamSet};
use crate::tensor::{SeededRng, Tape, Tensor, Var};

/// Factor analysis with a D-dimensional observation and L factors.
///
/// theta: `w` (D, L) loading matrix; `pre_sigma` (D,) with noise std-dev
/// softplus(pre_sigma). phi: `v` (L, D) inference matrix; `cov` (L, L),
/// of which the upper triangle is the posterior covariance factor U with
/// Sigma = U^T U.
pub struct FaModel {
    pub d: usize,
    pub l: usize,
    theta: ParamSet,
    phi: ParamSet,
}

impl FaModel {
    /// Initializes W, V, pre_sigma with standard-normal entries and the
    /// covariance factor at the identity.
    pub fn new(d: usize, l: usize, seed: u64) -> FaModel {
        let mut rng = SeededRng::new(seed).derive(0x6661);
        let mut theta = ParamSet::new();
        theta.insert("w", Tensor::randn(&[d, l], &mut rng));
        theta.insert("pre_sigma", Tensor::randn(&[d], &mut rng));
        let mut phi = ParamSet::new();
        phi.insert("v", Tensor::randn(&[l, d], &mut rng));
        phi.insert("cov", Tensor::eye(l));
        FaModel { d, l, theta, phi }
    }

    /// Observation noise std-devs softplus(pre_sigma), as values.
    pub fn noise_std_values(&self) -> Tensor {
        self.theta.get("pre_sigma").map(stable_softplus)
    }

    /// Exact mean log marginal likelihood of the given rows.
    pub fn exact_evidence(&self, xs: &Tensor) -> Result<f64> {
        fa_evidence(self.theta.get("w"), &self.noise_std_values(), xs)
    }

    /// Ancestral samples from the current generative parameters.
    pub fn generate(&self, n: usize, rng: &mut SeededRng) -> Tensor {
        fa_ancestral(self.theta.get("w"), &self.noise_std_values(), n, rng)
    }

    /// The amortized posterior for a batch of rows, on the given tape.
    pub fn posterior<'t>(
        &self,
        tape: &'t Tape,
        phi: &Bound<'t>,
        x: Var<'t>,
    ) -> Result<FullGaussianCholesky<'t>> {
        let v = phi.var("v");
        let cov = phi.var("cov");
        let mask = tape.constant(upper_triangular_ones(self.l));
        let u = tape.mul(cov, mask)?;
        let mu = x.matmul(v.t()?)?;
        FullGaussianCholesky::new(mu, u)
    }
}

fn stable_softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn upper_triangular_ones(l: usize) -> Tensor {
    let mut t = Tensor::zeros(&[l, l]);
    for i in 0..l {
        for j in i..l {
            t.data_mut()[i * l + j] = 1.0;
        }
    }
    t
}

impl LatentModel for FaModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Fa
    }

    fn theta(&self) -> &ParamSet {
        &self.theta
    }

    fn theta_mut(&mut self) -> &mut ParamSet {
        &mut self.theta
    }

    fn phi(&self) -> &ParamSet {
        &self.phi
    }

    fn phi_mut(&mut self) -> &mut ParamSet {
        &mut self.phi
    }

    fn per_example_elbo<'t>(
        &self,
        tape: &'t Tape,
        theta: &Bound<'t>,
        phi: &Bound<'t>,
        batch: &Batch,
    ) -> Result<Var<'t>> {
        let x = tape.constant(batch.x.clone());
        let q = self.posterior(tape, phi, x)?;

        let mut noise = RowNoise::new(batch);
        let eps = tape.constant(noise.normal(self.l));
        let z = q.rsample_given(eps)?;

        let w = theta.var("w");
        let sigma = theta.var("pre_sigma").softplus();
        let recon_mu = z.matmul(w.t()?)?;
        let px = DiagGaussian::new(recon_mu, sigma)?;
        let recon = px.log_prob(x)?;
        let kl = kl_full_gaussian_vs_standard(&q)?;
        tape.sub(recon, kl)
    }

    fn extra_metrics(&self, split: &DataSplit) -> Result<ExtraMetrics> {
        Ok(ExtraMetrics {
            evidence: Some(self.exact_evidence(&split.x)?),
            ..ExtraMetrics::default()
        })
    }
}
