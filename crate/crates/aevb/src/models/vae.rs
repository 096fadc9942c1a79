//! The variational autoencoder on [0,1)-valued images with a product of
//! continuous Bernoullis likelihood, and its label-conditioned variant
//! where a learned per-label Gaussian prior replaces N(0, I) and both
//! encoder and decoder see the one-hot label alongside their usual
//! input.

use crate::dist::{kl_diag_gaussian, ContinuousBernoulliVec, DiagGaussian};
use crate::error::{Error, Result};
use crate::models::{Batch, LatentModel, ModelKind, RowNoise};
use crate::nn::{Bound, Linear, MlpTrunk, ParamSet};
use crate::tensor::{SeededRng, Tape, Tensor, Var};

/// Encoder trunk + Gaussian heads, shared by both models here.
fn gaussian_head<'t>(
    mu_layer: &Linear,
    pre_sigma_layer: &Linear,
    bound: &Bound<'t>,
    h: Var<'t>,
) -> Result<DiagGaussian<'t>> {
    let mu = mu_layer.apply(bound, h)?;
    let sigma = pre_sigma_layer.apply(bound, h)?.softplus();
    DiagGaussian::new(mu, sigma)
}

/// VAE: z ~ N(0, I_L), x ~ product of continuous Bernoullis with
/// parameters from an MLP decoder; diagonal-Gaussian amortized
/// posterior from an MLP encoder.
pub struct VaeModel {
    pub d: usize,
    pub l: usize,
    dec_trunk: MlpTrunk,
    dec_out: Linear,
    enc_trunk: MlpTrunk,
    enc_mu: Linear,
    enc_pre_sigma: Linear,
    theta: ParamSet,
    phi: ParamSet,
}

impl VaeModel {
    pub fn new(d: usize, l: usize, hidden: &[usize], dropout: f64, seed: u64) -> VaeModel {
        assert!(!hidden.is_empty());
        let mut rng = SeededRng::new(seed).derive(0x0076_6165);
        let dec_dims: Vec<usize> = std::iter::once(l).chain(hidden.iter().copied()).collect();
        let dec_trunk = MlpTrunk::new("dec", &dec_dims, dropout);
        let dec_out = Linear::new("dec.out", *hidden.last().unwrap(), d);
        let enc_dims: Vec<usize> = std::iter::once(d).chain(hidden.iter().copied()).collect();
        let enc_trunk = MlpTrunk::new("enc", &enc_dims, dropout);
        let enc_mu = Linear::new("enc.mu", *hidden.last().unwrap(), l);
        let enc_pre_sigma = Linear::new("enc.pre_sigma", *hidden.last().unwrap(), l);

        let mut theta = ParamSet::new();
        dec_trunk.init(&mut theta, &mut rng);
        dec_out.init(&mut theta, &mut rng);
        let mut phi = ParamSet::new();
        enc_trunk.init(&mut phi, &mut rng);
        enc_mu.init(&mut phi, &mut rng);
        enc_pre_sigma.init(&mut phi, &mut rng);

        VaeModel { d, l, dec_trunk, dec_out, enc_trunk, enc_mu, enc_pre_sigma, theta, phi }
    }

    /// The amortized posterior q(z|x) for a batch of rows.
    pub fn encode<'t>(
        &self,
        phi: &Bound<'t>,
        x: Var<'t>,
        train: bool,
        rng: &mut SeededRng,
    ) -> Result<DiagGaussian<'t>> {
        let h = self.enc_trunk.apply(phi, x, train, rng)?;
        gaussian_head(&self.enc_mu, &self.enc_pre_sigma, phi, h)
    }

    /// Decoder shape parameters lambda(z) in (0,1), already clamped.
    pub fn decode<'t>(
        &self,
        theta: &Bound<'t>,
        z: Var<'t>,
        train: bool,
        rng: &mut SeededRng,
    ) -> Result<ContinuousBernoulliVec<'t>> {
        let h = self.dec_trunk.apply(theta, z, train, rng)?;
        ContinuousBernoulliVec::new(self.dec_out.apply(theta, h)?.sigmoid())
    }

    /// n decoder parameter grids from prior draws, plus one sampled
    /// image per grid. Deterministic given the rng.
    pub fn generate(&self, n: usize, rng: &mut SeededRng) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let theta = self.theta.bind(&tape, false);
        let z = tape.constant(Tensor::randn(&[n, self.l], rng));
        let mut unused = rng.derive(0);
        let cb = self.decode(&theta, z, false, &mut unused)?;
        let lambda = cb.lambda().value();
        let samples = cb.sample(rng);
        Ok((lambda, samples))
    }

    /// Posterior means for every row of `xs` (dropout off): (N, L).
    pub fn latent_means(&self, xs: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let phi = self.phi.bind(&tape, false);
        let x = tape.constant(xs.clone());
        let mut unused = SeededRng::new(0);
        let q = self.encode(&phi, x, false, &mut unused)?;
        Ok(q.mu.value())
    }
}

impl LatentModel for VaeModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Vae
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
        let mut drop_rng = batch.aux_rng();
        let q = self.encode(phi, x, batch.train, &mut drop_rng)?;

        let mut noise = RowNoise::new(batch);
        let z = q.rsample_given(tape.constant(noise.normal(self.l)))?;

        let cb = self.decode(theta, z, batch.train, &mut drop_rng)?;
        let recon = cb.log_prob(x)?;
        let kl = kl_diag_gaussian(&q, &DiagGaussian::standard(tape, self.l))?;
        tape.sub(recon, kl)
    }
}

/// Conditional VAE: the label's one-hot vector is concatenated onto the
/// encoder and decoder inputs, and the latent prior is a label-dependent
/// diagonal Gaussian read off a small head applied to the one-hot.
pub struct CvaeModel {
    pub d: usize,
    pub l: usize,
    pub c: usize,
    dec_trunk: MlpTrunk,
    dec_out: Linear,
    prior_mu: Linear,
    prior_pre_sigma: Linear,
    enc_trunk: MlpTrunk,
    enc_mu: Linear,
    enc_pre_sigma: Linear,
    theta: ParamSet,
    phi: ParamSet,
}

impl CvaeModel {
    pub fn new(d: usize, l: usize, c: usize, hidden: &[usize], dropout: f64, seed: u64) -> CvaeModel {
        assert!(!hidden.is_empty() && c >= 1);
        let mut rng = SeededRng::new(seed).derive(0x0063_7661);
        let dec_dims: Vec<usize> = std::iter::once(l + c).chain(hidden.iter().copied()).collect();
        let dec_trunk = MlpTrunk::new("dec", &dec_dims, dropout);
        let dec_out = Linear::new("dec.out", *hidden.last().unwrap(), d);
        let prior_mu = Linear::new("prior.mu", c, l);
        let prior_pre_sigma = Linear::new("prior.pre_sigma", c, l);
        let enc_dims: Vec<usize> = std::iter::once(d + c).chain(hidden.iter().copied()).collect();
        let enc_trunk = MlpTrunk::new("enc", &enc_dims, dropout);
        let enc_mu = Linear::new("enc.mu", *hidden.last().unwrap(), l);
        let enc_pre_sigma = Linear::new("enc.pre_sigma", *hidden.last().unwrap(), l);

        let mut theta = ParamSet::new();
        dec_trunk.init(&mut theta, &mut rng);
        dec_out.init(&mut theta, &mut rng);
        prior_mu.init(&mut theta, &mut rng);
        prior_pre_sigma.init(&mut theta, &mut rng);
        let mut phi = ParamSet::new();
        enc_trunk.init(&mut phi, &mut rng);
        enc_mu.init(&mut phi, &mut rng);
        enc_pre_sigma.init(&mut phi, &mut rng);

        CvaeModel {
            d,
            l,
            c,
            dec_trunk,
            dec_out,
            prior_mu,
            prior_pre_sigma,
            enc_trunk,
            enc_mu,
            enc_pre_sigma,
            theta,
            phi,
        }
    }

    /// The label-conditioned prior p(z|y) for one-hot rows y.
    pub fn prior<'t>(&self, theta: &Bound<'t>, y: Var<'t>) -> Result<DiagGaussian<'t>> {
        gaussian_head(&self.prior_mu, &self.prior_pre_sigma, theta, y)
    }

    /// The amortized posterior q(z|x,y).
    pub fn encode<'t>(
        &self,
        tape: &'t Tape,
        phi: &Bound<'t>,
        x: Var<'t>,
        y: Var<'t>,
        train: bool,
        rng: &mut SeededRng,
    ) -> Result<DiagGaussian<'t>> {
        let xy = tape.concat(&[x, y], 1)?;
        let h = self.enc_trunk.apply(phi, xy, train, rng)?;
        gaussian_head(&self.enc_mu, &self.enc_pre_sigma, phi, h)
    }

    /// Decoder on (z ∥ y).
    pub fn decode<'t>(
        &self,
        tape: &'t Tape,
        theta: &Bound<'t>,
        z: Var<'t>,
        y: Var<'t>,
        train: bool,
        rng: &mut SeededRng,
    ) -> Result<ContinuousBernoulliVec<'t>> {
        let zy = tape.concat(&[z, y], 1)?;
        let h = self.dec_trunk.apply(theta, zy, train, rng)?;
        ContinuousBernoulliVec::new(self.dec_out.apply(theta, h)?.sigmoid())
    }

    /// For each one-hot row of `y`, draws `n_per` images by ancestral
    /// sampling of the label prior then the decoder. Output blocks are
    /// label-major: rows r*n_per..(r+1)*n_per belong to label row r.
    pub fn generate(&self, y: &Tensor, n_per: usize, rng: &mut SeededRng) -> Result<(Tensor, Tensor)> {
        crate::dist::validate_one_hot_rows(y)?;
        let rows = y.shape()[0];
        let rep_indices: Vec<usize> = (0..rows).flat_map(|r| std::iter::repeat(r).take(n_per)).collect();
        let y_rep = y.gather_rows(&rep_indices);

        let tape = Tape::new();
        let theta = self.theta.bind(&tape, false);
        let y_var = tape.constant(y_rep);
        let prior = self.prior(&theta, y_var)?;
        let z = tape.constant(prior.sample(rng));
        let mut unused = rng.derive(0);
        let cb = self.decode(&tape, &theta, z, y_var, false, &mut unused)?;
        Ok((cb.lambda().value(), cb.sample(rng)))
    }

    /// Posterior means for (xs, ys): (N, L).
    pub fn latent_means(&self, xs: &Tensor, ys: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let phi = self.phi.bind(&tape, false);
        let x = tape.constant(xs.clone());
        let y = tape.constant(ys.clone());
        let mut unused = SeededRng::new(0);
        let q = self.encode(&tape, &phi, x, y, false, &mut unused)?;
        Ok(q.mu.value())
    }
}

impl LatentModel for CvaeModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Cvae
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
        let y_data = batch.y.as_ref().ok_or(Error::Domain {
            op: "cvae_elbo",
            detail: "batch carries no labels".into(),
        })?;
        crate::dist::validate_one_hot_rows(y_data)?;
        let x = tape.constant(batch.x.clone());
        let y = tape.constant(y_data.clone());
        let mut drop_rng = batch.aux_rng();
        let q = self.encode(tape, phi, x, y, batch.train, &mut drop_rng)?;

        let mut noise = RowNoise::new(batch);
        let z = q.rsample_given(tape.constant(noise.normal(self.l)))?;

        let cb = self.decode(tape, theta, z, y, batch.train, &mut drop_rng)?;
        let recon = cb.log_prob(x)?;
        let prior = self.prior(theta, y)?;
        let kl = kl_diag_gaussian(&q, &prior)?;
        tape.sub(recon, kl)
    }
}
