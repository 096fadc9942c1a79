//! Run configuration: a flat `key = value` text format, strictly
//! validated against the chosen model, with every default materialized
//! into a canonical "resolved" form. A resolved config parses back to
//! the identical configuration and re-serializes byte-for-byte, so the
//! copy written into a run directory (and into each checkpoint) is
//! sufficient to reproduce the run exactly.

use std::collections::BTreeMap;

use aevb::data::FaSyntheticSpec;
use aevb::models::{GmvaeEstimator, ModelKind};
use aevb::train::{AdamConfig, Phase, ScheduleMode, TrainSchedule};
use aevb::tensor::Tensor;
use aevb::{Error, Result};

/// Where the training and held-out splits come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Linear-Gaussian synthetic data with known ground truth.
    FaSynthetic,
    /// Built-in procedural digit images.
    Glyphs,
    /// IDX image/label files on disk (train and test pairs).
    Idx {
        images: String,
        labels: String,
        test_images: String,
        test_labels: String,
    },
}

impl DataSource {
    pub fn tag(&self) -> &'static str {
        match self {
            DataSource::FaSynthetic => "fa_synthetic",
            DataSource::Glyphs => "glyphs",
            DataSource::Idx { .. } => "idx",
        }
    }
}

/// Optimization schedule choice mirrored into [`TrainSchedule`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleChoice {
    Joint,
    Alternating { phase_length: usize, starting_phase: Phase },
}

/// A fully-specified run: model, data, architecture, and optimization.
/// Construct with [`parse_config`]; call [`RunConfig::resolve`] before
/// serializing so seed-derived defaults (the synthetic ground truth)
/// are pinned explicitly.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub seed: u64,
    pub data: DataSource,
    pub n_train: usize,
    pub n_test: usize,
    pub obs_dim: usize,
    pub latent: usize,
    pub classes: usize,
    pub widths: Vec<usize>,
    pub rnn_hidden: usize,
    pub dropout: f64,
    pub temperature: f64,
    pub estimator: GmvaeEstimator,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub eval_every: usize,
    pub patience: Option<usize>,
    pub schedule: ScheduleChoice,
    pub fa_true_w: Option<Vec<f64>>,
    pub fa_true_noise_std: Option<Vec<f64>>,
}

fn cfg_err(detail: impl Into<String>) -> Error {
    Error::Config { detail: detail.into() }
}

/// Every key the format knows, in the canonical serialization order.
const KEY_ORDER: &[&str] = &[
    "model",
    "seed",
    "data",
    "idx_images",
    "idx_labels",
    "idx_test_images",
    "idx_test_labels",
    "n_train",
    "n_test",
    "obs_dim",
    "latent",
    "classes",
    "widths",
    "rnn_hidden",
    "dropout",
    "temperature",
    "estimator",
    "learning_rate",
    "batch_size",
    "steps",
    "eval_every",
    "patience",
    "schedule",
    "phase_length",
    "starting_phase",
    "fa_true_w",
    "fa_true_noise_std",
];

/// Which model-specific keys each model accepts. Common keys (seed,
/// schedule, optimizer, data sizes) are accepted everywhere.
fn key_applies(model: ModelKind, key: &str) -> bool {
    use ModelKind::*;
    match key {
        "obs_dim" | "fa_true_w" | "fa_true_noise_std" => model == Fa,
        "classes" => matches!(model, Cvae | Gmvae),
        "widths" | "dropout" => matches!(model, Vae | Cvae | Gmvae),
        "rnn_hidden" => model == Vrnn,
        "temperature" | "estimator" => model == Gmvae,
        _ => true,
    }
}

fn default_config(model: ModelKind) -> RunConfig {
    use ModelKind::*;
    let mut cfg = RunConfig {
        model,
        seed: 0,
        data: if model == Fa { DataSource::FaSynthetic } else { DataSource::Glyphs },
        n_train: 1000,
        n_test: 500,
        obs_dim: 3,
        latent: 8,
        classes: 10,
        widths: vec![64],
        rnn_hidden: 64,
        dropout: 0.1,
        temperature: 0.5,
        estimator: GmvaeEstimator::Marginalized,
        learning_rate: 3e-4,
        batch_size: 100,
        steps: 1100,
        eval_every: 50,
        patience: None,
        schedule: ScheduleChoice::Joint,
        fa_true_w: None,
        fa_true_noise_std: None,
    };
    match model {
        Fa => {
            cfg.n_train = 1000;
            cfg.n_test = 1000;
            cfg.latent = 2;
            cfg.learning_rate = 1e-2;
            cfg.batch_size = 32;
            cfg.steps = 5000;
            cfg.eval_every = 100;
        }
        Vae | Cvae => {}
        Gmvae => {
            cfg.n_train = 2000;
            cfg.dropout = 0.0;
            cfg.learning_rate = 1e-3;
            cfg.steps = 600;
            cfg.eval_every = 20;
        }
        Vrnn => {
            cfg.n_test = 300;
            cfg.latent = 2;
            cfg.learning_rate = 1e-3;
            cfg.steps = 550;
            cfg.eval_every = 25;
        }
    }
    cfg
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| cfg_err(format!("key {key:?}: expected {what}, got {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|p| parse_num::<T>(key, p.trim(), what))
        .collect()
}

/// Parses config text into a [`RunConfig`].
///
/// Rules: one `key = value` per line; blank lines and full-line `#`
/// comments are skipped; every key must be known, must not repeat, and
/// must apply to the configured model; `model` is required; `seed` is
/// required unless `seed_override` supplies one (it also wins over a
/// seed given in the text).
pub fn parse_config(text: &str, seed_override: Option<u64>) -> Result<RunConfig> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(cfg_err(format!(
                "line {}: expected `key = value`, got {line:?}",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !KEY_ORDER.contains(&key.as_str()) {
            return Err(cfg_err(format!("line {}: unknown key {key:?}", lineno + 1)));
        }
        if pairs.iter().any(|(k, _)| *k == key) {
            return Err(cfg_err(format!("line {}: duplicate key {key:?}", lineno + 1)));
        }
        pairs.push((key, value));
    }

    let map: BTreeMap<&str, &str> =
        pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();

    let model = match map.get("model") {
        Some(v) => ModelKind::from_tag(v)
            .ok_or_else(|| cfg_err(format!("key \"model\": unknown model {v:?}")))?,
        None => return Err(cfg_err("key \"model\" is required")),
    };

    for (key, _) in &pairs {
        if !key_applies(model, key) {
            return Err(cfg_err(format!(
                "key {key:?} does not apply to model {:?}",
                model.tag()
            )));
        }
    }

    let mut cfg = default_config(model);

    let seed_in_text = match map.get("seed") {
        Some(v) => Some(parse_num::<u64>("seed", v, "an unsigned integer")?),
        None => None,
    };
    cfg.seed = match seed_override.or(seed_in_text) {
        Some(s) => s,
        None => return Err(cfg_err("key \"seed\" is required (or pass --seed)")),
    };

    if let Some(v) = map.get("data") {
        cfg.data = match *v {
            "fa_synthetic" => DataSource::FaSynthetic,
            "glyphs" => DataSource::Glyphs,
            "idx" => {
                let need = |k: &str| -> Result<String> {
                    map.get(k)
                        .map(|s| s.to_string())
                        .ok_or_else(|| cfg_err(format!("data = idx requires key {k:?}")))
                };
                DataSource::Idx {
                    images: need("idx_images")?,
                    labels: need("idx_labels")?,
                    test_images: need("idx_test_images")?,
                    test_labels: need("idx_test_labels")?,
                }
            }
            other => {
                return Err(cfg_err(format!(
                    "key \"data\": expected fa_synthetic, glyphs, or idx; got {other:?}"
                )))
            }
        };
    }
    if !matches!(cfg.data, DataSource::Idx { .. }) {
        for k in ["idx_images", "idx_labels", "idx_test_images", "idx_test_labels"] {
            if map.contains_key(k) {
                return Err(cfg_err(format!("key {k:?} requires data = idx")));
            }
        }
    }
    match (model, &cfg.data) {
        (ModelKind::Fa, DataSource::FaSynthetic) => {}
        (ModelKind::Fa, other) => {
            return Err(cfg_err(format!(
                "model fa requires data = fa_synthetic, got {:?}",
                other.tag()
            )))
        }
        (_, DataSource::FaSynthetic) => {
            return Err(cfg_err(format!(
                "data = fa_synthetic only applies to model fa, not {:?}",
                model.tag()
            )))
        }
        _ => {}
    }

    if let Some(v) = map.get("n_train") {
        cfg.n_train = parse_num("n_train", v, "a positive integer")?;
    }
    if let Some(v) = map.get("n_test") {
        cfg.n_test = parse_num("n_test", v, "a positive integer")?;
    }
    if let Some(v) = map.get("obs_dim") {
        cfg.obs_dim = parse_num("obs_dim", v, "a positive integer")?;
    }
    if let Some(v) = map.get("latent") {
        cfg.latent = parse_num("latent", v, "a positive integer")?;
    }
    if let Some(v) = map.get("classes") {
        cfg.classes = parse_num("classes", v, "a positive integer")?;
    }
    if let Some(v) = map.get("widths") {
        cfg.widths = parse_list("widths", v, "a positive integer")?;
    }
    if let Some(v) = map.get("rnn_hidden") {
        cfg.rnn_hidden = parse_num("rnn_hidden", v, "a positive integer")?;
    }
    if let Some(v) = map.get("dropout") {
        cfg.dropout = parse_num("dropout", v, "a number")?;
    }
    if let Some(v) = map.get("temperature") {
        cfg.temperature = parse_num("temperature", v, "a number")?;
    }
    if let Some(v) = map.get("estimator") {
        cfg.estimator = GmvaeEstimator::from_tag(v)
            .ok_or_else(|| cfg_err(format!("key \"estimator\": unknown estimator {v:?}")))?;
    }
    if let Some(v) = map.get("learning_rate") {
        cfg.learning_rate = parse_num("learning_rate", v, "a number")?;
    }
    if let Some(v) = map.get("batch_size") {
        cfg.batch_size = parse_num("batch_size", v, "a positive integer")?;
    }
    if let Some(v) = map.get("steps") {
        cfg.steps = parse_num("steps", v, "a positive integer")?;
    }
    if let Some(v) = map.get("eval_every") {
        cfg.eval_every = parse_num("eval_every", v, "a positive integer")?;
    }
    if let Some(v) = map.get("patience") {
        cfg.patience = match *v {
            "none" => None,
            other => Some(parse_num("patience", other, "a positive integer or none")?),
        };
    }

    let schedule_tag = map.get("schedule").copied().unwrap_or("joint");
    cfg.schedule = match schedule_tag {
        "joint" => {
            for k in ["phase_length", "starting_phase"] {
                if map.contains_key(k) {
                    return Err(cfg_err(format!("key {k:?} requires schedule = alternating")));
                }
            }
            ScheduleChoice::Joint
        }
        "alternating" => {
            let phase_length = match map.get("phase_length") {
                Some(v) => parse_num("phase_length", v, "a positive integer")?,
                None => return Err(cfg_err("schedule = alternating requires key \"phase_length\"")),
            };
            let starting_phase = match map.get("starting_phase").copied().unwrap_or("e") {
                "e" => Phase::E,
                "m" => Phase::M,
                other => {
                    return Err(cfg_err(format!(
                        "key \"starting_phase\": expected e or m, got {other:?}"
                    )))
                }
            };
            ScheduleChoice::Alternating { phase_length, starting_phase }
        }
        other => {
            return Err(cfg_err(format!(
                "key \"schedule\": expected joint or alternating, got {other:?}"
            )))
        }
    };

    if let Some(v) = map.get("fa_true_w") {
        cfg.fa_true_w = Some(parse_list("fa_true_w", v, "a number")?);
    }
    if let Some(v) = map.get("fa_true_noise_std") {
        cfg.fa_true_noise_std = Some(parse_list("fa_true_noise_std", v, "a number")?);
    }

    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<()> {
    let positive = |name: &str, v: usize| -> Result<()> {
        if v == 0 {
            Err(cfg_err(format!("key {name:?} must be positive")))
        } else {
            Ok(())
        }
    };
    positive("n_train", cfg.n_train)?;
    positive("n_test", cfg.n_test)?;
    positive("latent", cfg.latent)?;
    positive("batch_size", cfg.batch_size)?;
    positive("steps", cfg.steps)?;
    positive("eval_every", cfg.eval_every)?;
    if cfg.model == ModelKind::Fa {
        positive("obs_dim", cfg.obs_dim)?;
    }
    if matches!(cfg.model, ModelKind::Cvae | ModelKind::Gmvae) {
        positive("classes", cfg.classes)?;
        if cfg.classes > 256 {
            return Err(cfg_err("key \"classes\" is limited to 256 (labels are bytes)"));
        }
    }
    if cfg.model == ModelKind::Vrnn {
        positive("rnn_hidden", cfg.rnn_hidden)?;
    }
    if matches!(cfg.model, ModelKind::Vae | ModelKind::Cvae | ModelKind::Gmvae) {
        if cfg.widths.is_empty() {
            return Err(cfg_err("key \"widths\" must list at least one layer width"));
        }
        if cfg.widths.contains(&0) {
            return Err(cfg_err("key \"widths\" must be positive"));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(cfg_err(format!(
                "key \"dropout\" must lie in [0, 1), got {}",
                cfg.dropout
            )));
        }
    }
    if cfg.model == ModelKind::Gmvae && !(cfg.temperature > 0.0) {
        return Err(cfg_err(format!(
            "key \"temperature\" must be positive, got {}",
            cfg.temperature
        )));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(cfg_err(format!(
            "key \"learning_rate\" must be positive, got {}",
            cfg.learning_rate
        )));
    }
    if let Some(w) = &cfg.fa_true_w {
        let want = cfg.obs_dim * cfg.latent;
        if w.len() != want {
            return Err(cfg_err(format!(
                "key \"fa_true_w\" must list obs_dim*latent = {want} values, got {}",
                w.len()
            )));
        }
    }
    if let Some(s) = &cfg.fa_true_noise_std {
        if s.len() != cfg.obs_dim {
            return Err(cfg_err(format!(
                "key \"fa_true_noise_std\" must list obs_dim = {} values, got {}",
                cfg.obs_dim,
                s.len()
            )));
        }
        if s.iter().any(|v| !(*v > 0.0)) {
            return Err(cfg_err("key \"fa_true_noise_std\" must be strictly positive"));
        }
    }
    if cfg.fa_true_w.is_some() != cfg.fa_true_noise_std.is_some() {
        return Err(cfg_err(
            "keys \"fa_true_w\" and \"fa_true_noise_std\" must be given together",
        ));
    }
    Ok(())
}

impl RunConfig {
    /// Pins every seed-derived default so the serialized form carries
    /// the complete ground truth. Idempotent.
    pub fn resolve(&mut self) {
        if self.model == ModelKind::Fa && self.fa_true_w.is_none() {
            let spec = self.fa_spec();
            self.fa_true_w = Some(spec.true_w.data().to_vec());
            self.fa_true_noise_std = Some(spec.true_noise_std.data().to_vec());
        }
    }

    /// The synthetic ground truth this configuration describes: the
    /// explicit values when given, otherwise the seed-derived defaults.
    pub fn fa_spec(&self) -> FaSyntheticSpec {
        match (&self.fa_true_w, &self.fa_true_noise_std) {
            (Some(w), Some(s)) => FaSyntheticSpec {
                n_train: self.n_train,
                n_test: self.n_test,
                true_w: Tensor::from_vec(vec![self.obs_dim, self.latent], w.clone())
                    .expect("validated length"),
                true_noise_std: Tensor::from_vec(vec![self.obs_dim], s.clone())
                    .expect("validated length"),
                seed: self.seed,
            },
            _ => FaSyntheticSpec::default_truth(
                self.obs_dim,
                self.latent,
                self.n_train,
                self.n_test,
                self.seed,
            ),
        }
    }

    /// Canonical serialization: every applicable key, fixed order, all
    /// defaults written out. Parsing this text reproduces the config
    /// exactly, and re-serializing reproduces these bytes.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        let join_f64 = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        put("model", self.model.tag().to_string());
        put("seed", self.seed.to_string());
        put("data", self.data.tag().to_string());
        if let DataSource::Idx { images, labels, test_images, test_labels } = &self.data {
            put("idx_images", images.clone());
            put("idx_labels", labels.clone());
            put("idx_test_images", test_images.clone());
            put("idx_test_labels", test_labels.clone());
        }
        put("n_train", self.n_train.to_string());
        put("n_test", self.n_test.to_string());
        if self.model == ModelKind::Fa {
            put("obs_dim", self.obs_dim.to_string());
        }
        put("latent", self.latent.to_string());
        if matches!(self.model, ModelKind::Cvae | ModelKind::Gmvae) {
            put("classes", self.classes.to_string());
        }
        if matches!(self.model, ModelKind::Vae | ModelKind::Cvae | ModelKind::Gmvae) {
            put(
                "widths",
                self.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
            );
            put("dropout", self.dropout.to_string());
        }
        if self.model == ModelKind::Vrnn {
            put("rnn_hidden", self.rnn_hidden.to_string());
        }
        if self.model == ModelKind::Gmvae {
            put("temperature", self.temperature.to_string());
            put("estimator", self.estimator.tag().to_string());
        }
        put("learning_rate", self.learning_rate.to_string());
        put("batch_size", self.batch_size.to_string());
        put("steps", self.steps.to_string());
        put("eval_every", self.eval_every.to_string());
        put(
            "patience",
            self.patience.map(|p| p.to_string()).unwrap_or_else(|| "none".to_string()),
        );
        match self.schedule {
            ScheduleChoice::Joint => put("schedule", "joint".to_string()),
            ScheduleChoice::Alternating { phase_length, starting_phase } => {
                put("schedule", "alternating".to_string());
                put("phase_length", phase_length.to_string());
                put(
                    "starting_phase",
                    match starting_phase {
                        Phase::E => "e",
                        Phase::M => "m",
                    }
                    .to_string(),
                );
            }
        }
        if self.model == ModelKind::Fa {
            if let (Some(w), Some(s)) = (&self.fa_true_w, &self.fa_true_noise_std) {
                put("fa_true_w", join_f64(w));
                put("fa_true_noise_std", join_f64(s));
            }
        }
        out
    }

    pub fn train_schedule(&self) -> TrainSchedule {
        let mode = match self.schedule {
            ScheduleChoice::Joint => ScheduleMode::Joint,
            ScheduleChoice::Alternating { phase_length, starting_phase } => {
                ScheduleMode::Alternating { phase_length, starting_phase }
            }
        };
        TrainSchedule {
            mode,
            total_steps: self.steps,
            batch_size: self.batch_size,
            eval_every: self.eval_every,
            patience: self.patience,
            seed: self.seed,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_learning_rate(self.learning_rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults_and_round_trips() {
        let mut cfg = parse_config("model = vae\nseed = 7\n", None).unwrap();
        assert_eq!(cfg.latent, 8);
        assert_eq!(cfg.widths, vec![64]);
        cfg.resolve();
        let text = cfg.resolved_text();
        let mut again = parse_config(&text, None).unwrap();
        again.resolve();
        assert_eq!(cfg, again);
        assert_eq!(text, again.resolved_text());
    }

    #[test]
    fn unknown_and_inapplicable_keys_are_rejected() {
        let err = parse_config("model = vae\nseed = 1\nfrobnicate = 3\n", None).unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
        let err = parse_config("model = vae\nseed = 1\ntemperature = 0.5\n", None).unwrap_err();
        assert!(err.to_string().contains("does not apply"), "{err}");
        let err = parse_config("model = fa\nseed = 1\nwidths = 64\n", None).unwrap_err();
        assert!(err.to_string().contains("does not apply"), "{err}");
    }

    #[test]
    fn seed_is_mandatory_and_the_override_wins() {
        let err = parse_config("model = vae\n", None).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        let cfg = parse_config("model = vae\nseed = 3\n", Some(9)).unwrap();
        assert_eq!(cfg.seed, 9);
        let cfg = parse_config("model = vae\n", Some(9)).unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn alternating_schedule_keys_are_coupled() {
        let err = parse_config("model = fa\nseed = 1\nphase_length = 10\n", None).unwrap_err();
        assert!(err.to_string().contains("alternating"), "{err}");
        let err =
            parse_config("model = fa\nseed = 1\nschedule = alternating\n", None).unwrap_err();
        assert!(err.to_string().contains("phase_length"), "{err}");
        let cfg = parse_config(
            "model = fa\nseed = 1\nschedule = alternating\nphase_length = 10\nstarting_phase = m\n",
            None,
        )
        .unwrap();
        assert_eq!(
            cfg.schedule,
            ScheduleChoice::Alternating { phase_length: 10, starting_phase: Phase::M }
        );
    }

    #[test]
    fn resolving_a_factor_analysis_config_pins_the_ground_truth() {
        let mut cfg = parse_config("model = fa\nseed = 11\n", None).unwrap();
        cfg.resolve();
        let w = cfg.fa_true_w.clone().unwrap();
        assert_eq!(w.len(), cfg.obs_dim * cfg.latent);
        let text = cfg.resolved_text();
        assert!(text.contains("fa_true_w = "));
        let again = parse_config(&text, None).unwrap();
        assert_eq!(again.fa_true_w.unwrap(), w);
        let spec = cfg.fa_spec();
        assert_eq!(spec.true_w.data().to_vec(), w);
    }

    #[test]
    fn duplicate_keys_and_malformed_lines_are_rejected() {
        let err = parse_config("model = vae\nseed = 1\nseed = 2\n", None).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
        let err = parse_config("model = vae\nseed 1\n", None).unwrap_err();
        assert!(err.to_string().contains("key = value"), "{err}");
    }

    #[test]
    fn data_source_constraints_are_model_aware() {
        let err = parse_config("model = vae\nseed = 1\ndata = fa_synthetic\n", None).unwrap_err();
        assert!(err.to_string().contains("fa_synthetic"), "{err}");
        let err = parse_config("model = fa\nseed = 1\ndata = glyphs\n", None).unwrap_err();
        assert!(err.to_string().contains("fa_synthetic"), "{err}");
        let err = parse_config("model = vae\nseed = 1\ndata = idx\n", None).unwrap_err();
        assert!(err.to_string().contains("idx_images"), "{err}");
        let err = parse_config("model = vae\nseed = 1\nidx_images = a\n", None).unwrap_err();
        assert!(err.to_string().contains("data = idx"), "{err}");
    }
}
