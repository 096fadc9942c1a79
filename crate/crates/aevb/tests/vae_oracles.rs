//! VAE and conditional-VAE oracles: with two latent dimensions the
//! estimator's expectation is a two-dimensional integral that
//! tensor-product Gauss-Hermite quadrature evaluates to high accuracy on
//! a tiny network, giving an independent target for the Monte Carlo
//! mean. The conditional model is additionally pinned to the plain model
//! by weight surgery (a single constant label must change nothing) and
//! by a constant-label training run that should match a plain VAE run
//! seed-for-seed within statistical error.

use aevb::data::{normalize, synthetic_glyphs, DataSplit};
use aevb::models::{Batch, CvaeModel, LatentModel, VaeModel};
use aevb::numerics::gauss_hermite;
use aevb::tensor::{SeededRng, Tape, Tensor};
use aevb::train::{AdamConfig, Trainer, TrainSchedule};

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn stack_rows(x: &[f64], rows: usize) -> Tensor {
    let d = x.len();
    let mut data = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        data.extend_from_slice(x);
    }
    Tensor::from_vec(vec![rows, d], data).unwrap()
}

/// KL(q || p) between diagonal Gaussians given as flat value slices.
fn diag_kl(q_mu: &[f64], q_sigma: &[f64], p_mu: &[f64], p_sigma: &[f64]) -> f64 {
    q_mu.iter()
        .zip(q_sigma)
        .zip(p_mu.iter().zip(p_sigma))
        .map(|((&mq, &sq), (&mp, &sp))| {
            (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5
        })
        .sum()
}

/// E_q[log p(x|z)] by 24-point tensor-product Gauss-Hermite over a
/// two-dimensional diagonal posterior, with the reconstruction
/// log-density evaluated through `recon` on a whole batch of nodes.
fn quadrature_recon(
    q_mu: &[f64],
    q_sigma: &[f64],
    recon: impl Fn(&Tensor) -> Vec<f64>,
) -> f64 {
    assert_eq!(q_mu.len(), 2);
    let (nodes, weights) = gauss_hermite(24);
    let s2 = std::f64::consts::SQRT_2;
    let mut zs = Vec::with_capacity(nodes.len() * nodes.len() * 2);
    let mut ws = Vec::with_capacity(nodes.len() * nodes.len());
    for (ti, wi) in nodes.iter().zip(&weights) {
        for (tj, wj) in nodes.iter().zip(&weights) {
            zs.push(q_mu[0] + s2 * q_sigma[0] * ti);
            zs.push(q_mu[1] + s2 * q_sigma[1] * tj);
            ws.push(wi * wj);
        }
    }
    let z = Tensor::from_vec(vec![ws.len(), 2], zs).unwrap();
    let values = recon(&z);
    assert_eq!(values.len(), ws.len());
    let total: f64 = ws.iter().zip(&values).map(|(w, v)| w * v).sum();
    total / std::f64::consts::PI
}

fn vae_estimator_draws(model: &VaeModel, x: &[f64], reps: u64, rows: usize) -> Vec<f64> {
    let stacked = stack_rows(x, rows);
    let mut draws = Vec::with_capacity(reps as usize * rows);
    for rep in 0..reps {
        let batch = Batch {
            x: stacked.clone(),
            y: None,
            indices: (0..rows).collect(),
            base_rng: SeededRng::new(0xae0b).derive(rep),
            train: false,
        };
        let tape = Tape::new();
        let theta = model.theta().bind(&tape, false);
        let phi = model.phi().bind(&tape, false);
        let elbo = model.per_example_elbo(&tape, &theta, &phi, &batch).unwrap();
        draws.extend_from_slice(elbo.value().data());
    }
    draws
}

#[test]
fn tiny_vae_estimator_mean_matches_quadrature() {
    let model = VaeModel::new(6, 2, &[8], 0.0, 5);
    let x = [0.05, 0.3, 0.5, 0.62, 0.9, 0.75];

    let (q_mu, q_sigma) = {
        let tape = Tape::new();
        let phi = model.phi().bind(&tape, false);
        let xt = tape.constant(stack_rows(&x, 1));
        let mut unused = SeededRng::new(0);
        let q = model.encode(&phi, xt, false, &mut unused).unwrap();
        (q.mu.value().data().to_vec(), q.sigma.value().data().to_vec())
    };

    let expected_recon = quadrature_recon(&q_mu, &q_sigma, |z| {
        let tape = Tape::new();
        let theta = model.theta().bind(&tape, false);
        let zt = tape.constant(z.clone());
        let mut unused = SeededRng::new(0);
        let cb = model.decode(&theta, zt, false, &mut unused).unwrap();
        let xt = tape.constant(stack_rows(&x, z.shape()[0]));
        cb.log_prob(xt).unwrap().value().data().to_vec()
    });
    let kl = diag_kl(&q_mu, &q_sigma, &[0.0, 0.0], &[1.0, 1.0]);
    let exact = expected_recon - kl;

    let draws = vae_estimator_draws(&model, &x, 100, 100);
    let (mean, se) = mean_and_se(&draws);
    assert!(
        (mean - exact).abs() <= 4.0 * se,
        "estimator mean {mean} vs quadrature {exact} (se {se})"
    );
}

#[test]
fn tiny_cvae_estimator_mean_matches_quadrature() {
    let c = 3;
    let model = CvaeModel::new(6, 2, c, &[8], 0.0, 9);
    let x = [0.15, 0.8, 0.45, 0.02, 0.66, 0.33];
    let y = [0.0, 1.0, 0.0];

    let (q_mu, q_sigma, p_mu, p_sigma) = {
        let tape = Tape::new();
        let phi = model.phi().bind(&tape, false);
        let theta = model.theta().bind(&tape, false);
        let xt = tape.constant(stack_rows(&x, 1));
        let yt = tape.constant(stack_rows(&y, 1));
        let mut unused = SeededRng::new(0);
        let q = model.encode(&tape, &phi, xt, yt, false, &mut unused).unwrap();
        let p = model.prior(&theta, yt).unwrap();
        (
            q.mu.value().data().to_vec(),
            q.sigma.value().data().to_vec(),
            p.mu.value().data().to_vec(),
            p.sigma.value().data().to_vec(),
        )
    };

    let expected_recon = quadrature_recon(&q_mu, &q_sigma, |z| {
        let tape = Tape::new();
        let theta = model.theta().bind(&tape, false);
        let zt = tape.constant(z.clone());
        let yt = tape.constant(stack_rows(&y, z.shape()[0]));
        let mut unused = SeededRng::new(0);
        let cb = model.decode(&tape, &theta, zt, yt, false, &mut unused).unwrap();
        let xt = tape.constant(stack_rows(&x, z.shape()[0]));
        cb.log_prob(xt).unwrap().value().data().to_vec()
    });
    let exact = expected_recon - diag_kl(&q_mu, &q_sigma, &p_mu, &p_sigma);

    let stacked_y = stack_rows(&y, 100);
    let mut draws = Vec::with_capacity(100 * 100);
    for rep in 0..100u64 {
        let batch = Batch {
            x: stack_rows(&x, 100),
            y: Some(stacked_y.clone()),
            indices: (0..100).collect(),
            base_rng: SeededRng::new(0xcae0).derive(rep),
            train: false,
        };
        let tape = Tape::new();
        let theta = model.theta().bind(&tape, false);
        let phi = model.phi().bind(&tape, false);
        let elbo = model.per_example_elbo(&tape, &theta, &phi, &batch).unwrap();
        draws.extend_from_slice(elbo.value().data());
    }
    let (mean, se) = mean_and_se(&draws);
    assert!(
        (mean - exact).abs() <= 4.0 * se,
        "estimator mean {mean} vs quadrature {exact} (se {se})"
    );
}

/// Embeds a plain VAE into a single-label conditional model: the label
/// input gets all-zero weights and the label prior is pinned to the
/// standard normal, so with the constant label the conditional estimator
/// must reproduce the plain one example for example.
#[test]
fn single_label_cvae_reduces_to_the_plain_vae() {
    let (d, l, h) = (6, 2, 8);
    let vae = VaeModel::new(d, l, &[h], 0.0, 21);
    let mut cvae = CvaeModel::new(d, l, 1, &[h], 0.0, 22);

    {
        let phi = cvae.phi_mut();
        // Encoder first layer: rows 0..d copied, the label row zeroed.
        let w = phi.get_mut("enc.0.w");
        let src = vae.phi().get("enc.0.w");
        for i in 0..d {
            for j in 0..h {
                w.data_mut()[i * h + j] = src.data()[i * h + j];
            }
        }
        for j in 0..h {
            w.data_mut()[d * h + j] = 0.0;
        }
        for name in ["enc.0.b", "enc.mu.w", "enc.mu.b", "enc.pre_sigma.w", "enc.pre_sigma.b"] {
            phi.get_mut(name).data_mut().copy_from_slice(vae.phi().get(name).data());
        }
    }
    {
        let theta = cvae.theta_mut();
        let w = theta.get_mut("dec.0.w");
        let src = vae.theta().get("dec.0.w");
        for i in 0..l {
            for j in 0..h {
                w.data_mut()[i * h + j] = src.data()[i * h + j];
            }
        }
        for j in 0..h {
            w.data_mut()[l * h + j] = 0.0;
        }
        for name in ["dec.0.b", "dec.out.w", "dec.out.b"] {
            theta.get_mut(name).data_mut().copy_from_slice(vae.theta().get(name).data());
        }
        theta.get_mut("prior.mu.w").data_mut().fill(0.0);
        theta.get_mut("prior.mu.b").data_mut().fill(0.0);
        theta.get_mut("prior.pre_sigma.w").data_mut().fill(0.0);
        // softplus of this bias is 1, pinning the prior scale.
        theta
            .get_mut("prior.pre_sigma.b")
            .data_mut()
            .fill((std::f64::consts::E - 1.0).ln());
    }

    let b = 5;
    let mut rng = SeededRng::new(0x77);
    let x = Tensor::from_vec(
        vec![b, d],
        (0..b * d).map(|_| rng.uniform()).collect(),
    )
    .unwrap();
    let ones = Tensor::from_vec(vec![b, 1], vec![1.0; b]).unwrap();

    let eval = |with_label: bool| -> Vec<f64> {
        let batch = Batch {
            x: x.clone(),
            y: with_label.then(|| ones.clone()),
            indices: (0..b).collect(),
            base_rng: SeededRng::new(0xbead),
            train: false,
        };
        let tape = Tape::new();
        if with_label {
            let theta = cvae.theta().bind(&tape, false);
            let phi = cvae.phi().bind(&tape, false);
            cvae.per_example_elbo(&tape, &theta, &phi, &batch).unwrap().value().data().to_vec()
        } else {
            let theta = vae.theta().bind(&tape, false);
            let phi = vae.phi().bind(&tape, false);
            vae.per_example_elbo(&tape, &theta, &phi, &batch).unwrap().value().data().to_vec()
        }
    };

    let plain = eval(false);
    let conditional = eval(true);
    for (i, (a, b)) in plain.iter().zip(&conditional).enumerate() {
        assert!(
            (a - b).abs() < 1e-12,
            "example {i}: plain {a} vs single-label conditional {b}"
        );
    }
}

#[test]
fn overfitting_a_single_image_raises_the_estimator_mean() {
    let images = normalize(&synthetic_glyphs(1, 99), 0x17).unwrap();
    let split = images.to_split(10).unwrap();
    let one = DataSplit::unlabeled(split.x.clone());

    let model = VaeModel::new(784, 8, &[64], 0.1, 31);
    let schedule = TrainSchedule::joint(500, 1, 500, 0x0f17);
    let adam = AdamConfig::with_learning_rate(3e-3);
    let mut trainer =
        Trainer::new(model, one.clone(), one, schedule, adam).unwrap();
    trainer.run().unwrap();

    let rows = trainer.log().rows();
    let first = rows.first().unwrap();
    let last = rows.last().unwrap();
    assert_eq!(first.step, 0);
    assert_eq!(last.step, 500);
    let gain = last.elbo - first.elbo;
    assert!(
        gain > 100.0,
        "single-image overfit gained only {gain} nats ({} -> {})",
        first.elbo,
        last.elbo
    );
}

/// Feeding every example the same label should leave the conditional
/// model with nothing to condition on: across seeds, its trained
/// estimator mean and a plain VAE's must land in overlapping 95% bands.
#[test]
fn constant_label_conditional_model_trains_like_the_plain_model() {
    let train_images = normalize(&synthetic_glyphs(200, 0x51), 0x52).unwrap();
    let eval_images = normalize(&synthetic_glyphs(100, 0x53), 0x54).unwrap();
    let train_x = train_images.to_split(10).unwrap().x;
    let eval_x = eval_images.to_split(10).unwrap().x;

    let constant_split = |x: &Tensor| {
        DataSplit::labeled(x.clone(), vec![0u8; x.shape()[0]], 10).unwrap()
    };

    let steps = 200;
    let mut vae_finals = Vec::new();
    let mut cvae_finals = Vec::new();
    for seed in 1u64..=5 {
        let schedule = TrainSchedule::joint(steps, 32, steps, seed);
        let adam = AdamConfig::with_learning_rate(1e-3);

        let vae = VaeModel::new(784, 4, &[32], 0.0, seed);
        let mut t = Trainer::new(
            vae,
            DataSplit::unlabeled(train_x.clone()),
            DataSplit::unlabeled(eval_x.clone()),
            schedule.clone(),
            adam.clone(),
        )
        .unwrap();
        t.run().unwrap();
        vae_finals.push(t.log().rows().last().unwrap().elbo);

        let cvae = CvaeModel::new(784, 4, 10, &[32], 0.0, seed);
        let mut t = Trainer::new(
            cvae,
            constant_split(&train_x),
            constant_split(&eval_x),
            schedule,
            adam,
        )
        .unwrap();
        t.run().unwrap();
        cvae_finals.push(t.log().rows().last().unwrap().elbo);
    }

    let (vm, vs) = mean_and_se(&vae_finals);
    let (cm, cs) = mean_and_se(&cvae_finals);
    let (vlo, vhi) = (vm - 1.96 * vs, vm + 1.96 * vs);
    let (clo, chi) = (cm - 1.96 * cs, cm + 1.96 * cs);
    assert!(
        vlo.max(clo) <= vhi.min(chi),
        "bands do not overlap: plain [{vlo}, {vhi}] vs constant-label [{clo}, {chi}]"
    );
}
