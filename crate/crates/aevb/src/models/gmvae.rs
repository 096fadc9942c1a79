//! Mixture-prior VAE on binary images: a categorical cluster variable y
//! with uniform prior selects a per-cluster Gaussian over z, a decoder
//! turns z into Bernoulli pixel probabilities, and the amortized
//! posterior factorizes as q(y|x)·q(z|x,y). Three ELBO estimators are
//! provided: exact marginalization over y (lowest variance, the
//! default), and two temperature-relaxed ones that push a soft one-hot
//! sample through the networks — one scoring the relaxed densities
//! directly, one keeping both KL terms analytic.

use crate::data::DataSplit;
use crate::dist::{
    argmax_rows, entropy_probs, kl_categorical, kl_diag_gaussian, one_hot, validate_one_hot_rows,
    BernoulliVec, DiagGaussian, OneHotCategorical, RelaxedOneHotCategorical,
};
use crate::error::{Error, Result};
use crate::models::{Batch, ExtraMetrics, LatentModel, ModelKind, RowNoise};
use crate::nn::{Bound, Linear, MlpTrunk, ParamSet};
use crate::tensor::{SeededRng, Tape, Tensor, Var};

/// Which per-example ELBO estimate the mixture model trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GmvaeEstimator {
    /// Weight the per-cluster bound by q(y|x) and sum — no sampling of y.
    Marginalized,
    /// One relaxed draw of y; every term is a log-density, including the
    /// relaxed categorical's own.
    GumbelLogprob,
    /// One relaxed draw of y for the network inputs; both KL terms stay
    /// in closed form.
    GumbelKl,
}

impl GmvaeEstimator {
    pub fn tag(&self) -> &'static str {
        match self {
            GmvaeEstimator::Marginalized => "marginalized",
            GmvaeEstimator::GumbelLogprob => "gumbel_logprob",
            GmvaeEstimator::GumbelKl => "gumbel_kl",
        }
    }

    pub fn from_tag(tag: &str) -> Option<GmvaeEstimator> {
        Some(match tag {
            "marginalized" => GmvaeEstimator::Marginalized,
            "gumbel_logprob" => GmvaeEstimator::GumbelLogprob,
            "gumbel_kl" => GmvaeEstimator::GumbelKl,
            _ => return None,
        })
    }
}

pub struct GmvaeModel {
    pub d: usize,
    pub l: usize,
    pub c: usize,
    pub temperature: f64,
    pub estimator: GmvaeEstimator,
    dec_trunk: MlpTrunk,
    dec_out: Linear,
    cls_trunk: MlpTrunk,
    cls_out: Linear,
    enc_trunk: MlpTrunk,
    enc_mu: Linear,
    enc_pre_sigma: Linear,
    theta: ParamSet,
    phi: ParamSet,
}

impl GmvaeModel {
    pub fn new(
        d: usize,
        l: usize,
        c: usize,
        hidden: &[usize],
        dropout: f64,
        temperature: f64,
        estimator: GmvaeEstimator,
        seed: u64,
    ) -> GmvaeModel {
        assert!(!hidden.is_empty() && c >= 1);
        assert!(temperature > 0.0);
        let mut rng = SeededRng::new(seed).derive(0x676d_7661);
        let dec_dims: Vec<usize> = std::iter::once(l).chain(hidden.iter().copied()).collect();
        let dec_trunk = MlpTrunk::new("dec", &dec_dims, dropout);
        let dec_out = Linear::new("dec.out", *hidden.last().unwrap(), d);
        let cls_dims: Vec<usize> = std::iter::once(d).chain(hidden.iter().copied()).collect();
        let cls_trunk = MlpTrunk::new("cls", &cls_dims, dropout);
        let cls_out = Linear::new("cls.out", *hidden.last().unwrap(), c);
        let enc_dims: Vec<usize> = std::iter::once(d + c).chain(hidden.iter().copied()).collect();
        let enc_trunk = MlpTrunk::new("enc", &enc_dims, dropout);
        let enc_mu = Linear::new("enc.mu", *hidden.last().unwrap(), l);
        let enc_pre_sigma = Linear::new("enc.pre_sigma", *hidden.last().unwrap(), l);

        let mut theta = ParamSet::new();
        // Per-cluster latent prior: row k of each matrix belongs to
        // cluster k, picked out by the one-hot matmul; no biases so the
        // rows stay independent. The means start on a sphere — random
        // directions, equal norms — with unit scales. Equal norms keep
        // any cluster from opening with an x-independent bound advantage
        // (which the classifier would collapse onto), while the spread
        // anchors each cluster to its own region of the latent space so
        // assignments can differentiate by reconstruction.
        let mut mu = Tensor::randn(&[c, l], &mut rng);
        {
            let rows = mu.data_mut().chunks_mut(l);
            for row in rows {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
        theta.insert("prior.mu", mu);
        let pre_one = (std::f64::consts::E - 1.0).ln(); // softplus == 1
        theta.insert(
            "prior.pre_sigma",
            Tensor::from_vec(vec![c, l], vec![pre_one; c * l]).expect("sized"),
        );
        dec_trunk.init(&mut theta, &mut rng);
        dec_out.init(&mut theta, &mut rng);
        let mut phi = ParamSet::new();
        cls_trunk.init(&mut phi, &mut rng);
        cls_out.init(&mut phi, &mut rng);
        enc_trunk.init(&mut phi, &mut rng);
        enc_mu.init(&mut phi, &mut rng);
        enc_pre_sigma.init(&mut phi, &mut rng);

        GmvaeModel {
            d,
            l,
            c,
            temperature,
            estimator,
            dec_trunk,
            dec_out,
            cls_trunk,
            cls_out,
            enc_trunk,
            enc_mu,
            enc_pre_sigma,
            theta,
            phi,
        }
    }

    /// Classifier logits q(y|x): (B, C).
    pub fn classifier_logits<'t>(
        &self,
        phi: &Bound<'t>,
        x: Var<'t>,
        train: bool,
        rng: &mut SeededRng,
    ) -> Result<Var<'t>> {
        let h = self.cls_trunk.apply(phi, x, train, rng)?;
        self.cls_out.apply(phi, h)
    }

    /// The cluster-conditioned latent prior p(z|y); `y` may be hard
    /// one-hot rows or relaxed points on the simplex, which mix the
    /// per-cluster rows.
    pub fn prior_given<'t>(&self, theta: &Bound<'t>, y: Var<'t>) -> Result<DiagGaussian<'t>> {
        let mu = y.matmul(theta.var("prior.mu"))?;
        let sigma = y.matmul(theta.var("prior.pre_sigma"))?.softplus();
        DiagGaussian::new(mu, sigma)
    }

    /// The amortized posterior q(z|x,y) on the concatenated input.
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
        let mu = self.enc_mu.apply(phi, h)?;
        let sigma = self.enc_pre_sigma.apply(phi, h)?.softplus();
        DiagGaussian::new(mu, sigma)
    }

    /// Bernoulli pixel probabilities p(x|z).
    pub fn decode<'t>(
        &self,
        theta: &Bound<'t>,
        z: Var<'t>,
        train: bool,
        rng: &mut SeededRng,
    ) -> Result<BernoulliVec<'t>> {
        let h = self.dec_trunk.apply(theta, z, train, rng)?;
        BernoulliVec::new(self.dec_out.apply(theta, h)?.sigmoid())
    }

    /// Exact marginalization over the cluster variable: every example is
    /// replicated once per cluster (cluster-major blocks), the
    /// per-cluster bound gets one reparametrized z each, and the
    /// classifier weights the C results. The categorical KL against the
    /// uniform prior closes the bound.
    fn elbo_marginalized<'t>(
        &self,
        tape: &'t Tape,
        theta: &Bound<'t>,
        phi: &Bound<'t>,
        batch: &Batch,
        noise: &mut RowNoise,
        drop_rng: &mut SeededRng,
    ) -> Result<Var<'t>> {
        let b = batch.size();
        let x = tape.constant(batch.x.clone());
        let logits = self.classifier_logits(phi, x, batch.train, drop_rng)?;
        let cat = OneHotCategorical::from_logits(logits);
        let kl_cat = kl_categorical(&cat, &OneHotCategorical::uniform(tape, self.c))?;

        let rep: Vec<usize> = (0..self.c).flat_map(|_| 0..b).collect();
        let x_rep = tape.constant(batch.x.gather_rows(&rep));
        let labels: Vec<u8> = (0..self.c).flat_map(|k| std::iter::repeat(k as u8).take(b)).collect();
        let y_rep = tape.constant(one_hot(&labels, self.c)?);

        let q = self.encode(tape, phi, x_rep, y_rep, batch.train, drop_rng)?;
        let z = q.rsample_given(tape.constant(noise.normal_blocks(self.c, self.l)))?;
        let p = self.prior_given(theta, y_rep)?;
        let kl_z = kl_diag_gaussian(&q, &p)?;
        let recon = self.decode(theta, z, batch.train, drop_rng)?.log_prob(x_rep)?;

        let per_cluster = tape.sub(recon, kl_z)?.reshape(&[self.c, b])?.t()?;
        let weighted = tape.mul(cat.probs()?, per_cluster)?.sum_axis(1)?;
        tape.sub(weighted, kl_cat)
    }

    /// Shared head of both relaxed estimators: one soft one-hot draw per
    /// example and the z it conditions. The latent noise is consumed
    /// before the Gumbel noise so the single-cluster degeneracy lines up
    /// draw-for-draw with the marginalized path.
    fn relaxed_draw<'t>(
        &self,
        tape: &'t Tape,
        theta: &Bound<'t>,
        phi: &Bound<'t>,
        batch: &Batch,
        noise: &mut RowNoise,
        drop_rng: &mut SeededRng,
    ) -> Result<RelaxedParts<'t>> {
        let x = tape.constant(batch.x.clone());
        let logits = self.classifier_logits(phi, x, batch.train, drop_rng)?;
        let eps = tape.constant(noise.normal(self.l));
        let gum = tape.constant(noise.gumbel(self.c));
        let relaxed_q = RelaxedOneHotCategorical::new(logits, self.temperature)?;
        let y_soft = relaxed_q.rsample_given(gum)?;
        let q = self.encode(tape, phi, x, y_soft, batch.train, drop_rng)?;
        let z = q.rsample_given(eps)?;
        let p_z = self.prior_given(theta, y_soft)?;
        let recon = self.decode(theta, z, batch.train, drop_rng)?.log_prob(x)?;
        Ok(RelaxedParts { logits, relaxed_q, y_soft, q, z, p_z, recon })
    }

    fn elbo_gumbel_logprob<'t>(
        &self,
        tape: &'t Tape,
        theta: &Bound<'t>,
        phi: &Bound<'t>,
        batch: &Batch,
        noise: &mut RowNoise,
        drop_rng: &mut SeededRng,
    ) -> Result<Var<'t>> {
        let parts = self.relaxed_draw(tape, theta, phi, batch, noise, drop_rng)?;
        let relaxed_prior = RelaxedOneHotCategorical::new(
            tape.constant(Tensor::zeros(&[self.c])),
            self.temperature,
        )?;
        let score = tape.add(
            parts.recon,
            tape.sub(parts.p_z.log_prob(parts.z)?, parts.q.log_prob(parts.z)?)?,
        )?;
        let cat_ratio = tape.sub(
            relaxed_prior.log_prob(parts.y_soft)?,
            parts.relaxed_q.log_prob(parts.y_soft)?,
        )?;
        tape.add(score, cat_ratio)
    }

    fn elbo_gumbel_kl<'t>(
        &self,
        tape: &'t Tape,
        theta: &Bound<'t>,
        phi: &Bound<'t>,
        batch: &Batch,
        noise: &mut RowNoise,
        drop_rng: &mut SeededRng,
    ) -> Result<Var<'t>> {
        let parts = self.relaxed_draw(tape, theta, phi, batch, noise, drop_rng)?;
        let kl_z = kl_diag_gaussian(&parts.q, &parts.p_z)?;
        let kl_cat = kl_categorical(
            &OneHotCategorical::from_logits(parts.logits),
            &OneHotCategorical::uniform(tape, self.c),
        )?;
        tape.sub(tape.sub(parts.recon, kl_z)?, kl_cat)
    }

    /// Hard cluster assignment: argmax of the classifier logits, ties to
    /// the lowest index. Dropout off.
    pub fn cluster(&self, xs: &Tensor) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let phi = self.phi.bind(&tape, false);
        let x = tape.constant(xs.clone());
        let mut unused = SeededRng::new(0);
        let logits = self.classifier_logits(&phi, x, false, &mut unused)?;
        Ok(argmax_rows(&logits.value()))
    }

    /// Classifier probabilities for a whole matrix of rows: (N, C).
    pub fn classifier_probs(&self, xs: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let phi = self.phi.bind(&tape, false);
        let x = tape.constant(xs.clone());
        let mut unused = SeededRng::new(0);
        let logits = self.classifier_logits(&phi, x, false, &mut unused)?;
        Ok(logits.softmax()?.value())
    }

    /// For each one-hot row of `y`, draws `n_per` images by ancestral
    /// sampling: z from the cluster prior, pixels from the decoder
    /// Bernoullis. Returns (probabilities, binary samples), rows grouped
    /// cluster-major.
    pub fn generate(&self, y: &Tensor, n_per: usize, rng: &mut SeededRng) -> Result<(Tensor, Tensor)> {
        validate_one_hot_rows(y)?;
        let rows = y.shape()[0];
        let rep: Vec<usize> = (0..rows).flat_map(|r| std::iter::repeat(r).take(n_per)).collect();
        let tape = Tape::new();
        let theta = self.theta.bind(&tape, false);
        let y_rep = tape.constant(y.gather_rows(&rep));
        let prior = self.prior_given(&theta, y_rep)?;
        let z = tape.constant(prior.sample(rng));
        let mut unused = rng.derive(0);
        let bern = self.decode(&theta, z, false, &mut unused)?;
        Ok((bern.probs.value(), bern.sample(rng)))
    }

    /// Posterior means under the predicted cluster, for latent export:
    /// (N, L).
    pub fn latent_means(&self, xs: &Tensor) -> Result<Tensor> {
        let assignments = self.cluster(xs)?;
        let labels: Vec<u8> = assignments.iter().map(|&k| k as u8).collect();
        let tape = Tape::new();
        let phi = self.phi.bind(&tape, false);
        let x = tape.constant(xs.clone());
        let y = tape.constant(one_hot(&labels, self.c)?);
        let mut unused = SeededRng::new(0);
        let q = self.encode(&tape, &phi, x, y, false, &mut unused)?;
        Ok(q.mu.value())
    }
}

struct RelaxedParts<'t> {
    logits: Var<'t>,
    relaxed_q: RelaxedOneHotCategorical<'t>,
    y_soft: Var<'t>,
    q: DiagGaussian<'t>,
    z: Var<'t>,
    p_z: DiagGaussian<'t>,
    recon: Var<'t>,
}

impl LatentModel for GmvaeModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Gmvae
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
        let mut noise = RowNoise::new(batch);
        let mut drop_rng = batch.aux_rng();
        match self.estimator {
            GmvaeEstimator::Marginalized => {
                self.elbo_marginalized(tape, theta, phi, batch, &mut noise, &mut drop_rng)
            }
            GmvaeEstimator::GumbelLogprob => {
                self.elbo_gumbel_logprob(tape, theta, phi, batch, &mut noise, &mut drop_rng)
            }
            GmvaeEstimator::GumbelKl => {
                self.elbo_gumbel_kl(tape, theta, phi, batch, &mut noise, &mut drop_rng)
            }
        }
    }

    fn extra_metrics(&self, split: &DataSplit) -> Result<ExtraMetrics> {
        let probs = self.classifier_probs(&split.x)?;
        let n = probs.shape()[0];
        let mean_entropy = probs
            .data()
            .chunks(self.c)
            .map(entropy_probs)
            .sum::<f64>()
            / n as f64;
        let cluster_acc = match &split.labels {
            Some(labels) => {
                let pred = argmax_rows(&probs);
                let table = contingency_table(&pred, labels, self.c)?;
                Some(clustering_accuracy(&table)?)
            }
            None => None,
        };
        Ok(ExtraMetrics {
            evidence: None,
            cond_entropy: Some(mean_entropy),
            cluster_acc,
        })
    }
}

/// Counts of (predicted cluster, true label) pairs as a C×C table
/// (rows: clusters, columns: labels). Labels must lie below `c`.
pub fn contingency_table(pred: &[usize], labels: &[u8], c: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != labels.len() {
        return Err(Error::Domain {
            op: "contingency_table",
            detail: format!("{} predictions vs {} labels", pred.len(), labels.len()),
        });
    }
    let mut table = vec![vec![0u64; c]; c];
    for (&p, &t) in pred.iter().zip(labels) {
        if p >= c || (t as usize) >= c {
            return Err(Error::Domain {
                op: "contingency_table",
                detail: format!("entry (cluster {p}, label {t}) outside a {c}x{c} table"),
            });
        }
        table[p][t as usize] += 1;
    }
    Ok(table)
}

/// Best one-to-one cluster-to-label matching score: the largest fraction
/// of examples that land on the diagonal under some permutation of the
/// table's rows, found by dynamic programming over label subsets.
pub fn clustering_accuracy(table: &[Vec<u64>]) -> Result<f64> {
    let c = table.len();
    let total: u64 = table.iter().flat_map(|r| r.iter()).sum();
    if c == 0 || total == 0 {
        return Err(Error::EmptyData { what: "contingency table" });
    }
    assert!(c <= 20, "assignment solver is sized for small cluster counts");
    assert!(table.iter().all(|r| r.len() == c));
    // best[mask] = max matched count assigning clusters 0..popcount(mask)
    // to the label set `mask`.
    let mut best = vec![0u64; 1 << c];
    for mask in 1usize..(1 << c) {
        let cluster = mask.count_ones() as usize - 1;
        let mut m = 0;
        for label in 0..c {
            if mask & (1 << label) != 0 {
                m = m.max(best[mask ^ (1 << label)] + table[cluster][label]);
            }
        }
        best[mask] = m;
    }
    Ok(best[(1 << c) - 1] as f64 / total as f64)
}
