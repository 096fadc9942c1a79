//! Sequence model over image rows: one LSTM, advanced by the previous
//! row and latent, carries a deterministic state h_t that conditions a
//! per-step latent prior, the amortized posterior, and the Bernoulli
//! emission. The bound factorizes over timesteps as reconstruction
//! minus a closed-form per-step KL, with a reparametrized latent draw
//! feeding both the emission and the next state.

use crate::dist::{kl_diag_gaussian, BernoulliVec, DiagGaussian};
use crate::error::{Error, Result};
use crate::models::{Batch, LatentModel, ModelKind, RowNoise};
use crate::nn::{Bound, Linear, LstmCell, MlpTrunk, ParamSet};
use crate::tensor::{SeededRng, Tape, Tensor, Var};

pub struct VrnnModel {
    pub d: usize,
    pub l: usize,
    pub h: usize,
    lstm: LstmCell,
    prior_mu: Linear,
    prior_pre_sigma: Linear,
    emit_trunk: MlpTrunk,
    emit_out: Linear,
    post_trunk: MlpTrunk,
    post_mu: Linear,
    post_pre_sigma: Linear,
    theta: ParamSet,
    phi: ParamSet,
}

impl VrnnModel {
    pub fn new(d: usize, l: usize, h: usize, seed: u64) -> VrnnModel {
        let mut rng = SeededRng::new(seed).derive(0x7672_6e6e);
        let lstm = LstmCell::new("lstm", d + l, h);
        let prior_mu = Linear::new("prior.mu", h, l);
        let prior_pre_sigma = Linear::new("prior.pre_sigma", h, l);
        let emit_trunk = MlpTrunk::new("emit", &[l + h, h], 0.0);
        let emit_out = Linear::new("emit.out", h, d);
        let post_trunk = MlpTrunk::new("post", &[d + h, h], 0.0);
        let post_mu = Linear::new("post.mu", h, l);
        let post_pre_sigma = Linear::new("post.pre_sigma", h, l);

        let mut theta = ParamSet::new();
        lstm.init(&mut theta, &mut rng);
        prior_mu.init(&mut theta, &mut rng);
        prior_pre_sigma.init(&mut theta, &mut rng);
        emit_trunk.init(&mut theta, &mut rng);
        emit_out.init(&mut theta, &mut rng);
        let mut phi = ParamSet::new();
        post_trunk.init(&mut phi, &mut rng);
        post_mu.init(&mut phi, &mut rng);
        post_pre_sigma.init(&mut phi, &mut rng);

        VrnnModel {
            d,
            l,
            h,
            lstm,
            prior_mu,
            prior_pre_sigma,
            emit_trunk,
            emit_out,
            post_trunk,
            post_mu,
            post_pre_sigma,
            theta,
            phi,
        }
    }

    /// Advances the recurrent state with the previous row and latent:
    /// (h', c') = LSTM(x_prev ∥ z_prev, (h, c)). Deterministic.
    pub fn step<'t>(
        &self,
        tape: &'t Tape,
        theta: &Bound<'t>,
        x_prev: Var<'t>,
        z_prev: Var<'t>,
        h: Var<'t>,
        c: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let xz = tape.concat(&[x_prev, z_prev], 1)?;
        self.lstm.step(theta, xz, h, c)
    }

    /// The state-conditioned latent prior p(z_t | h_t).
    pub fn prior_given<'t>(&self, theta: &Bound<'t>, h: Var<'t>) -> Result<DiagGaussian<'t>> {
        let mu = self.prior_mu.apply(theta, h)?;
        let sigma = self.prior_pre_sigma.apply(theta, h)?.softplus();
        DiagGaussian::new(mu, sigma)
    }

    /// The amortized posterior q(z_t | x_t, h_t).
    pub fn posterior<'t>(
        &self,
        tape: &'t Tape,
        phi: &Bound<'t>,
        x_t: Var<'t>,
        h: Var<'t>,
    ) -> Result<DiagGaussian<'t>> {
        let xh = tape.concat(&[x_t, h], 1)?;
        let mut unused = SeededRng::new(0);
        let hid = self.post_trunk.apply(phi, xh, false, &mut unused)?;
        let mu = self.post_mu.apply(phi, hid)?;
        let sigma = self.post_pre_sigma.apply(phi, hid)?.softplus();
        DiagGaussian::new(mu, sigma)
    }

    /// The row emission p(x_t | z_t, h_t) as per-pixel Bernoullis.
    pub fn emission<'t>(
        &self,
        tape: &'t Tape,
        theta: &Bound<'t>,
        z_t: Var<'t>,
        h: Var<'t>,
    ) -> Result<BernoulliVec<'t>> {
        let zh = tape.concat(&[z_t, h], 1)?;
        let mut unused = SeededRng::new(0);
        let hid = self.emit_trunk.apply(theta, zh, false, &mut unused)?;
        BernoulliVec::new(self.emit_out.apply(theta, hid)?.sigmoid())
    }

    /// Ancestral sampling of `n` sequences of `t_len` rows: at each step
    /// the latent comes from the state prior, the row from the emission,
    /// and the sampled row and latent drive the recurrence. Returns
    /// (emission probabilities, binary samples), both (n, t_len, D).
    pub fn generate(&self, t_len: usize, n: usize, rng: &mut SeededRng) -> Result<(Tensor, Tensor)> {
        if t_len == 0 || n == 0 {
            return Err(Error::EmptyData { what: "generation request" });
        }
        let tape = Tape::new();
        let theta = self.theta.bind(&tape, false);
        let mut h = tape.constant(Tensor::zeros(&[n, self.h]));
        let mut c = tape.constant(Tensor::zeros(&[n, self.h]));
        let mut probs = Vec::with_capacity(n * t_len * self.d);
        let mut rows = Vec::with_capacity(t_len);
        for _ in 0..t_len {
            let prior = self.prior_given(&theta, h)?;
            let z = tape.constant(prior.sample(rng));
            let emission = self.emission(&tape, &theta, z, h)?;
            probs.extend_from_slice(emission.probs.value().data());
            let x = tape.constant(emission.sample(rng));
            rows.push(x.value());
            let (h2, c2) = self.step(&tape, &theta, x, z, h, c)?;
            h = h2;
            c = c2;
        }
        // Reorder from step-major to sequence-major.
        let mut p_out = Tensor::zeros(&[n, t_len, self.d]);
        let mut x_out = Tensor::zeros(&[n, t_len, self.d]);
        for (t, row) in rows.iter().enumerate() {
            for i in 0..n {
                let dst = (i * t_len + t) * self.d;
                let src = i * self.d;
                p_out.data_mut()[dst..dst + self.d]
                    .copy_from_slice(&probs[t * n * self.d + src..t * n * self.d + src + self.d]);
                x_out.data_mut()[dst..dst + self.d].copy_from_slice(&row.data()[src..src + self.d]);
            }
        }
        Ok((p_out, x_out))
    }
}

impl LatentModel for VrnnModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Vrnn
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
        let shape = batch.x.shape().to_vec();
        if shape.len() != 3 || shape[2] != self.d || shape[1] == 0 {
            return Err(Error::ShapeMismatch {
                op: "vrnn_elbo",
                shapes: vec![shape],
                detail: format!("expected (batch, steps >= 1, {})", self.d),
            });
        }
        let (b, t_len) = (shape[0], shape[1]);
        let x = tape.constant(batch.x.clone());
        let mut noise = RowNoise::new(batch);
        let mut h = tape.constant(Tensor::zeros(&[b, self.h]));
        let mut c = tape.constant(Tensor::zeros(&[b, self.h]));
        let mut total: Option<Var<'t>> = None;
        for t_idx in 0..t_len {
            let x_t = x.slice(1, t_idx, 1)?.reshape(&[b, self.d])?;
            let q = self.posterior(tape, phi, x_t, h)?;
            let z = q.rsample_given(tape.constant(noise.normal(self.l)))?;
            let prior = self.prior_given(theta, h)?;
            let recon = self.emission(tape, theta, z, h)?.log_prob(x_t)?;
            let kl = kl_diag_gaussian(&q, &prior)?;
            let term = tape.sub(recon, kl)?;
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
            if t_idx + 1 < t_len {
                let (h2, c2) = self.step(tape, theta, x_t, z, h, c)?;
                h = h2;
                c = c2;
            }
        }
        Ok(total.expect("at least one timestep"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VrnnModel {
        VrnnModel::new(4, 2, 5, 3)
    }

    fn binary_seq(n: usize, t: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = SeededRng::new(seed);
        let data: Vec<f64> = (0..n * t * d)
            .map(|_| if rng.uniform() > 0.5 { 1.0 } else { 0.0 })
            .collect();
        Tensor::from_vec(vec![n, t, d], data).unwrap()
    }

    fn batch(x: &Tensor, seed: u64) -> Batch {
        Batch {
            x: x.clone(),
            y: None,
            indices: (0..x.shape()[0]).collect(),
            base_rng: SeededRng::new(seed),
            train: true,
        }
    }

    fn eval_elbo(m: &VrnnModel, b: &Batch) -> Vec<f64> {
        let tape = Tape::new();
        let th = m.theta().bind(&tape, false);
        let ph = m.phi().bind(&tape, false);
        m.per_example_elbo(&tape, &th, &ph, b).unwrap().value().data().to_vec()
    }

    #[test]
    fn zero_weight_step_leaves_state_at_zero() {
        let mut m = tiny();
        for name in ["lstm.wx", "lstm.wh", "lstm.b"] {
            let t = m.theta().get(name).clone();
            *m.theta_mut().get_mut(name) = Tensor::zeros(t.shape());
        }
        let tape = Tape::new();
        let th = m.theta().bind(&tape, false);
        let x = tape.constant(Tensor::ones(&[2, 4]));
        let z = tape.constant(Tensor::ones(&[2, 2]));
        let h = tape.constant(Tensor::zeros(&[2, 5]));
        let c = tape.constant(Tensor::zeros(&[2, 5]));
        let (h2, c2) = m.step(&tape, &th, x, z, h, c).unwrap();
        assert!(h2.value().data().iter().all(|&v| v == 0.0));
        assert!(c2.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_equals_a_conditional_vae_with_zero_state() {
        let m = tiny();
        let x = binary_seq(3, 1, 4, 1);
        let b = batch(&x, 7);
        let looped = eval_elbo(&m, &b);

        // The same bound assembled by hand from the public pieces, with
        // the same per-row noise stream.
        let tape = Tape::new();
        let th = m.theta().bind(&tape, false);
        let ph = m.phi().bind(&tape, false);
        let x_t = tape.constant(
            Tensor::from_vec(vec![3, 4], x.data().to_vec()).unwrap(),
        );
        let h = tape.constant(Tensor::zeros(&[3, 5]));
        let q = m.posterior(&tape, &ph, x_t, h).unwrap();
        let mut noise = RowNoise::new(&b);
        let z = q.rsample_given(tape.constant(noise.normal(2))).unwrap();
        let prior = m.prior_given(&th, h).unwrap();
        let recon = m.emission(&tape, &th, z, h).unwrap().log_prob(x_t).unwrap();
        let kl = kl_diag_gaussian(&q, &prior).unwrap();
        let manual = tape.sub(recon, kl).unwrap().value();
        for (a, b) in looped.iter().zip(manual.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn duplicated_sequence_reuses_its_noise_stream() {
        let m = tiny();
        let x1 = binary_seq(1, 3, 4, 2);
        let stacked = Tensor::from_vec(
            vec![2, 3, 4],
            [x1.data(), x1.data()].concat(),
        )
        .unwrap();
        let single = eval_elbo(
            &m,
            &Batch {
                x: x1,
                y: None,
                indices: vec![0],
                base_rng: SeededRng::new(5),
                train: true,
            },
        );
        let doubled = eval_elbo(
            &m,
            &Batch {
                x: stacked,
                y: None,
                indices: vec![0, 0],
                base_rng: SeededRng::new(5),
                train: true,
            },
        );
        assert_eq!(single[0].to_bits(), doubled[0].to_bits());
        assert_eq!(single[0].to_bits(), doubled[1].to_bits());
    }

    #[test]
    fn estimator_gradients_match_finite_differences() {
        use crate::tensor::finite_difference_gradient;
        let m = VrnnModel::new(4, 2, 5, 11);
        let x = binary_seq(2, 3, 4, 3);
        let b = batch(&x, 13);
        let theta_names: Vec<String> = m.theta().iter().map(|(n, _)| n.to_string()).collect();
        let phi_names: Vec<String> = m.phi().iter().map(|(n, _)| n.to_string()).collect();
        for (in_theta, name) in theta_names
            .iter()
            .map(|n| (true, n))
            .chain(phi_names.iter().map(|n| (false, n)))
        {
            let fd = {
                let base_theta = m.theta().clone();
                let base_phi = m.phi().clone();
                finite_difference_gradient(
                    |t: &Tensor| {
                        let mut theta = base_theta.clone();
                        let mut phi = base_phi.clone();
                        *if in_theta { theta.get_mut(name) } else { phi.get_mut(name) } = t.clone();
                        let tape = Tape::new();
                        let th = theta.bind(&tape, true);
                        let ph = phi.bind(&tape, true);
                        let elbo = m.per_example_elbo(&tape, &th, &ph, &b)?;
                        Ok(elbo.mean_all().value().scalar_value())
                    },
                    if in_theta { m.theta().get(name) } else { m.phi().get(name) },
                    1e-6,
                )
                .unwrap()
            };
            let tape = Tape::new();
            let th = m.theta().bind(&tape, true);
            let ph = m.phi().bind(&tape, true);
            let elbo = m.per_example_elbo(&tape, &th, &ph, &b).unwrap();
            let grads = tape.backward(elbo.mean_all()).unwrap();
            let bound = if in_theta { &th } else { &ph };
            let g = grads.get_or_zeros(bound.var(name));
            let scale = fd.data().iter().map(|v| v.abs()).fold(1.0f64, f64::max);
            assert!(g.max_abs_diff(&fd) / scale < 1e-4, "{name}: gradient mismatch");
        }
    }

    #[test]
    fn posterior_weights_receive_gradient_through_reconstruction() {
        let m = tiny();
        let x = binary_seq(2, 3, 4, 9);
        let b = batch(&x, 17);
        let tape = Tape::new();
        let th = m.theta().bind(&tape, true);
        let ph = m.phi().bind(&tape, true);
        let elbo = m.per_example_elbo(&tape, &th, &ph, &b).unwrap();
        let grads = tape.backward(elbo.mean_all()).unwrap();
        for name in ["post.0.w", "post.mu.w", "post.pre_sigma.w"] {
            let g = grads.get_or_zeros(ph.var(name));
            assert!(g.data().iter().any(|&v| v != 0.0), "{name} has zero gradient");
        }
    }

    #[test]
    fn rejects_inputs_that_are_not_row_sequences() {
        let m = tiny();
        let flat = Batch {
            x: Tensor::zeros(&[2, 4]),
            y: None,
            indices: vec![0, 1],
            base_rng: SeededRng::new(1),
            train: false,
        };
        let tape = Tape::new();
        let th = m.theta().bind(&tape, false);
        let ph = m.phi().bind(&tape, false);
        assert!(m.per_example_elbo(&tape, &th, &ph, &flat).is_err());
        let wrong_d = Batch {
            x: Tensor::zeros(&[2, 3, 5]),
            ..flat
        };
        assert!(m.per_example_elbo(&tape, &th, &ph, &wrong_d).is_err());
    }

    #[test]
    fn generation_is_binary_sequential_and_deterministic() {
        let m = tiny();
        let mut r1 = SeededRng::new(21);
        let (probs, samples) = m.generate(3, 5, &mut r1).unwrap();
        assert_eq!(probs.shape(), &[5, 3, 4]);
        assert_eq!(samples.shape(), &[5, 3, 4]);
        assert!(probs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(samples.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let mut r2 = SeededRng::new(21);
        let (_, samples2) = m.generate(3, 5, &mut r2).unwrap();
        assert_eq!(samples.data(), samples2.data());
        assert!(m.generate(0, 5, &mut r1).is_err());
    }

    #[test]
    fn forced_half_probability_emission_yields_balanced_pixels() {
        let mut m = tiny();
        *m.theta_mut().get_mut("emit.out.w") = Tensor::zeros(&[5, 4]);
        *m.theta_mut().get_mut("emit.out.b") = Tensor::zeros(&[4]);
        let mut rng = SeededRng::new(33);
        let (probs, samples) = m.generate(4, 2500, &mut rng).unwrap();
        assert!(probs.data().iter().all(|&v| v == 0.5));
        let n_pix = samples.numel() as f64;
        let mean = samples.data().iter().sum::<f64>() / n_pix;
        let se = 0.5 / n_pix.sqrt();
        assert!((mean - 0.5).abs() < 4.0 * se, "pixel mean {mean}");
    }
}
