//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::backbone::{Activation, Architecture};
use crate::data_io::SplitConfig;
use crate::error::{Error, Result};
use crate::explicit_memory::{self as em, QuantSpec};
use crate::harness::{AblationFlags, SyntheticConfig, TrainingSetup};
use crate::losses::{self, Grid, PretrainLossConfig};
use crate::offline_training::{self as ot, MetaConfig, MetaObjective, PretrainConfig};
use crate::online_learner::{self as ol, FinetuneConfig};

pub const SEED_ENV: &str = "OFSCIL_SEED";

/// Every tunable of the command-line pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,

    pub dataset: Option<PathBuf>,
    pub test_dataset: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub grid: Option<Grid>,
    pub synthetic: SyntheticConfig,
    pub split: SplitConfig,

    pub hidden: Vec<usize>,
    pub d_a: usize,
    pub d_p: usize,
    pub fcr_activation: Activation,

    pub loss: PretrainLossConfig,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub batch_size: usize,
    pub quantize_features: bool,

    pub meta_samples: usize,
    pub meta_iterations: usize,
    pub meta_lr: f64,
    pub query_batch: usize,
    pub meta_objective: MetaObjective,
    pub through_prototypes: bool,

    pub quant: QuantSpec,

    pub finetune: bool,
    pub finetune_cfg: FinetuneConfig,

    pub sweep_bits: Vec<u32>,
    pub ablation_rows: Vec<AblationFlags>,

    pub params: PathBuf,
    pub meta_params: PathBuf,
    pub model: PathBuf,
    pub pretrain_history: PathBuf,
    pub meta_history: PathBuf,
    pub report: PathBuf,
    pub sweep_out: PathBuf,
    pub ablation_out: PathBuf,
    pub em: PathBuf,
    pub am: PathBuf,
    pub predictions: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let out = Path::new("out");
        Self {
            seed: 7,
            threads: 0,
            dataset: None,
            test_dataset: None,
            manifest: None,
            grid: None,
            synthetic: SyntheticConfig::default(),
            split: crate::harness::desk_split_config(),
            hidden: vec![128],
            d_a: 64,
            d_p: 32,
            fcr_activation: Activation::Identity,
            loss: PretrainLossConfig::default(),
            pretrain_epochs: ot::DEFAULT_PRETRAIN_EPOCHS,
            pretrain_lr: ot::DEFAULT_PRETRAIN_LR,
            batch_size: ot::DEFAULT_BATCH_SIZE,
            quantize_features: false,
            meta_samples: ot::DEFAULT_META_SAMPLES,
            meta_iterations: ot::DEFAULT_META_ITERATIONS,
            meta_lr: ot::DEFAULT_META_LR,
            query_batch: ot::DEFAULT_QUERY_BATCH,
            meta_objective: MetaObjective::MultiMargin,
            through_prototypes: false,
            quant: QuantSpec::default(),
            finetune: false,
            finetune_cfg: FinetuneConfig::default(),
            sweep_bits: vec![8, 7, 6, 5, 4, 3, 2, 1],
            ablation_rows: ["none", "AG", "AG+OR", "AG+OR+MM", "AG+OR+CE", "AG+OR+MM+FT"]
                .iter()
                .map(|s| AblationFlags::parse(s).unwrap())
                .collect(),
            params: out.join("params.bin"),
            meta_params: out.join("meta_params.bin"),
            model: out.join("meta_params.bin"),
            pretrain_history: out.join("pretrain_history.csv"),
            meta_history: out.join("meta_history.csv"),
            report: out.join("report.csv"),
            sweep_out: out.join("sweep.csv"),
            ablation_out: out.join("ablation.csv"),
            em: out.join("em.bin"),
            am: out.join("am.bin"),
            predictions: out.join("predictions.csv"),
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::InvalidConfig(format!("{key} = {value:?}: {what}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v, "not a valid number"))
}

fn real(key: &str, v: &str) -> Result<f64> {
    let x: f64 = num(key, v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(bad(key, v, "must be finite"))
    }
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(bad(key, v, "expected true or false")),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Assigns one key. Unknown keys and ill-typed values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = num(key, v)?,
            "threads" => self.threads = num(key, v)?,
            "dataset" => self.dataset = opt_path(v),
            "test_dataset" => self.test_dataset = opt_path(v),
            "manifest" => self.manifest = opt_path(v),
            "grid" => {
                self.grid = if v.is_empty() {
                    None
                } else {
                    let dims: Vec<usize> = v
                        .split('x')
                        .map(|d| num(key, d))
                        .collect::<Result<_>>()
                        .map_err(|_| bad(key, v, "expected CxHxW"))?;
                    match dims[..] {
                        [channels, height, width] => Some(Grid { channels, height, width }),
                        _ => return Err(bad(key, v, "expected CxHxW")),
                    }
                }
            }
            "synthetic_classes" => self.synthetic.classes = num(key, v)?,
            "synthetic_per_class" => self.synthetic.per_class = num(key, v)?,
            "synthetic_side" => self.synthetic.side = num(key, v)?,
            "synthetic_blobs" => self.synthetic.blobs_per_class = num(key, v)?,
            "synthetic_jitter" => self.synthetic.jitter = real(key, v)?,
            "synthetic_noise" => self.synthetic.noise = real(key, v)?,
            "base_classes" => self.split.base_classes = num(key, v)?,
            "sessions" => self.split.sessions = num(key, v)?,
            "ways" => self.split.ways = num(key, v)?,
            "shots" => self.split.shots = num(key, v)?,
            "per_class_cap" => self.split.per_class_cap = if v == "all" { None } else { Some(num(key, v)?) },
            "test_per_class" => self.split.test_per_class = num(key, v)?,
            "hidden" => self.hidden = list(key, v)?,
            "d_a" => self.d_a = num(key, v)?,
            "d_p" => self.d_p = num(key, v)?,
            "fcr_activation" => {
                self.fcr_activation = Activation::parse(v).ok_or_else(|| bad(key, v, "expected identity or relu"))?
            }
            "lambda_ortho" => self.loss.lambda_ortho = real(key, v)?,
            "mix_probability" => self.loss.mix_probability = real(key, v)?,
            "mix_alpha" => self.loss.mix_alpha = real(key, v)?,
            "mixup_share" => self.loss.mixup_share = real(key, v)?,
            "margin" => self.loss.margin = real(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = num(key, v)?,
            "pretrain_lr" => self.pretrain_lr = real(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "quantize_features" => self.quantize_features = flag(key, v)?,
            "meta_samples" => self.meta_samples = num(key, v)?,
            "meta_iterations" => self.meta_iterations = num(key, v)?,
            "meta_lr" => self.meta_lr = real(key, v)?,
            "query_batch" => self.query_batch = num(key, v)?,
            "meta_objective" => {
                self.meta_objective =
                    MetaObjective::parse(v).ok_or_else(|| bad(key, v, "expected multi-margin or cross-entropy"))?
            }
            "through_prototypes" => self.through_prototypes = flag(key, v)?,
            "feature_bits" => self.quant.feature_bits = num(key, v)?,
            "accum_bits" => self.quant.accum_bits = num(key, v)?,
            "prototype_bits" => self.quant.prototype_bits = num(key, v)?,
            "right_shift" => self.quant.right_shift = if v == "auto" { None } else { Some(num(key, v)?) },
            "max_shots" => self.quant.max_shots = num(key, v)?,
            "finetune" => self.finetune = flag(key, v)?,
            "finetune_epochs" => self.finetune_cfg.epochs = num(key, v)?,
            "finetune_sub_batch" => self.finetune_cfg.sub_batch = num(key, v)?,
            "finetune_lr" => self.finetune_cfg.lr = real(key, v)?,
            "finetune_shuffle_seed" => {
                self.finetune_cfg.shuffle_seed = if v == "none" { None } else { Some(num(key, v)?) }
            }
            "sweep_bits" => self.sweep_bits = list(key, v)?,
            "ablation_rows" => {
                self.ablation_rows = v
                    .split(',')
                    .map(|r| AblationFlags::parse(r).map_err(|e| bad(key, v, &e.to_string())))
                    .collect::<Result<_>>()?
            }
            "params" => self.params = PathBuf::from(v),
            "meta_params" => self.meta_params = PathBuf::from(v),
            "model" => self.model = PathBuf::from(v),
            "pretrain_history" => self.pretrain_history = PathBuf::from(v),
            "meta_history" => self.meta_history = PathBuf::from(v),
            "report" => self.report = PathBuf::from(v),
            "sweep_out" => self.sweep_out = PathBuf::from(v),
            "ablation_out" => self.ablation_out = PathBuf::from(v),
            "em" => self.em = PathBuf::from(v),
            "am" => self.am = PathBuf::from(v),
            "predictions" => self.predictions = PathBuf::from(v),
            other => return Err(Error::InvalidConfig(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in documentation order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let q = &self.quant;
        let f = &self.finetune_cfg;
        vec![
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("dataset", show_path(&self.dataset)),
            ("test_dataset", show_path(&self.test_dataset)),
            ("manifest", show_path(&self.manifest)),
            (
                "grid",
                self.grid
                    .map(|g| format!("{}x{}x{}", g.channels, g.height, g.width))
                    .unwrap_or_default(),
            ),
            ("synthetic_classes", self.synthetic.classes.to_string()),
            ("synthetic_per_class", self.synthetic.per_class.to_string()),
            ("synthetic_side", self.synthetic.side.to_string()),
            ("synthetic_blobs", self.synthetic.blobs_per_class.to_string()),
            ("synthetic_jitter", self.synthetic.jitter.to_string()),
            ("synthetic_noise", self.synthetic.noise.to_string()),
            ("base_classes", self.split.base_classes.to_string()),
            ("sessions", self.split.sessions.to_string()),
            ("ways", self.split.ways.to_string()),
            ("shots", self.split.shots.to_string()),
            (
                "per_class_cap",
                self.split.per_class_cap.map_or("all".into(), |c| c.to_string()),
            ),
            ("test_per_class", self.split.test_per_class.to_string()),
            ("hidden", join(&self.hidden)),
            ("d_a", self.d_a.to_string()),
            ("d_p", self.d_p.to_string()),
            ("fcr_activation", self.fcr_activation.name().to_string()),
            ("lambda_ortho", self.loss.lambda_ortho.to_string()),
            ("mix_probability", self.loss.mix_probability.to_string()),
            ("mix_alpha", self.loss.mix_alpha.to_string()),
            ("mixup_share", self.loss.mixup_share.to_string()),
            ("margin", self.loss.margin.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("pretrain_lr", self.pretrain_lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("quantize_features", self.quantize_features.to_string()),
            ("meta_samples", self.meta_samples.to_string()),
            ("meta_iterations", self.meta_iterations.to_string()),
            ("meta_lr", self.meta_lr.to_string()),
            ("query_batch", self.query_batch.to_string()),
            ("meta_objective", self.meta_objective.name().to_string()),
            ("through_prototypes", self.through_prototypes.to_string()),
            ("feature_bits", q.feature_bits.to_string()),
            ("accum_bits", q.accum_bits.to_string()),
            ("prototype_bits", q.prototype_bits.to_string()),
            ("right_shift", q.right_shift.map_or("auto".into(), |s| s.to_string())),
            ("max_shots", q.max_shots.to_string()),
            ("finetune", self.finetune.to_string()),
            ("finetune_epochs", f.epochs.to_string()),
            ("finetune_sub_batch", f.sub_batch.to_string()),
            ("finetune_lr", f.lr.to_string()),
            ("finetune_shuffle_seed", f.shuffle_seed.map_or("none".into(), |s| s.to_string())),
            ("sweep_bits", join(&self.sweep_bits)),
            (
                "ablation_rows",
                self.ablation_rows.iter().map(AblationFlags::label).collect::<Vec<_>>().join(","),
            ),
            ("params", self.params.display().to_string()),
            ("meta_params", self.meta_params.display().to_string()),
            ("model", self.model.display().to_string()),
            ("pretrain_history", self.pretrain_history.display().to_string()),
            ("meta_history", self.meta_history.display().to_string()),
            ("report", self.report.display().to_string()),
            ("sweep_out", self.sweep_out.display().to_string()),
            ("ablation_out", self.ablation_out.display().to_string()),
            ("em", self.em.display().to_string()),
            ("am", self.am.display().to_string()),
            ("predictions", self.predictions.display().to_string()),
        ]
    }

    /// The configuration as a file that `parse` reads back unchanged.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Applies a seed from the environment value, if present.
    pub fn apply_seed_env(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = num(SEED_ENV, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.quant.validate()?;
        self.finetune_cfg.validate()?;
        self.meta_config().validate()?;
        if self.d_p >= self.d_a {
            return Err(Error::InvalidConfig(format!("d_p {} must be below d_a {}", self.d_p, self.d_a)));
        }
        if self.pretrain_epochs == 0 || self.batch_size < 2 || !(self.pretrain_lr > 0.0) {
            return Err(Error::InvalidConfig("pretraining needs epochs ≥ 1, batch_size ≥ 2 and lr > 0".into()));
        }
        if self.sweep_bits.iter().any(|&b| b == 0 || b > self.quant.accum_bits) {
            return Err(Error::InvalidConfig(format!(
                "sweep_bits must lie in [1, {}]",
                self.quant.accum_bits
            )));
        }
        for r in &self.ablation_rows {
            r.validate()?;
        }
        Ok(())
    }

    pub fn architecture(&self, input_dim: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden: self.hidden.clone(),
            d_a: self.d_a,
            d_p: self.d_p,
            fcr_activation: self.fcr_activation,
        }
    }

    pub fn pretrain_config(&self, grid: Option<Grid>) -> PretrainConfig {
        PretrainConfig {
            loss: self.loss.clone(),
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            batch_size: self.batch_size,
            grid: self.grid.or(grid),
            quantize_features: self.quantize_features,
        }
    }

    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            meta_samples: self.meta_samples,
            iterations: self.meta_iterations,
            lr: self.meta_lr,
            margin: self.loss.margin,
            query_batch: self.query_batch,
            objective: self.meta_objective,
            through_prototypes: self.through_prototypes,
            quantize_features: self.quantize_features,
        }
    }

    pub fn training_setup(&self, input_dim: usize, grid: Option<Grid>) -> TrainingSetup {
        TrainingSetup {
            arch: self.architecture(input_dim),
            pretrain: self.pretrain_config(grid),
            meta: self.meta_config(),
            quant: self.quant.clone(),
            finetune: self.finetune_cfg.clone(),
            seed: self.seed,
        }
    }
}

/// Defaults owned by the library modules, for cross-checking the dump.
pub fn library_defaults() -> Vec<(&'static str, String)> {
    vec![
        ("lambda_ortho", losses::DEFAULT_LAMBDA_ORTHO.to_string()),
        ("mix_probability", losses::DEFAULT_MIX_PROBABILITY.to_string()),
        ("mix_alpha", losses::DEFAULT_MIX_ALPHA.to_string()),
        ("margin", losses::DEFAULT_MARGIN.to_string()),
        ("meta_samples", ot::DEFAULT_META_SAMPLES.to_string()),
        ("meta_iterations", ot::DEFAULT_META_ITERATIONS.to_string()),
        ("query_batch", ot::DEFAULT_QUERY_BATCH.to_string()),
        ("feature_bits", em::DEFAULT_FEATURE_BITS.to_string()),
        ("accum_bits", em::DEFAULT_ACCUM_BITS.to_string()),
        ("max_shots", em::DEFAULT_MAX_SHOTS.to_string()),
        ("finetune_epochs", ol::DEFAULT_FINETUNE_EPOCHS.to_string()),
        ("finetune_lr", ol::DEFAULT_FINETUNE_LR.to_string()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_parses_back_to_the_same_config() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.dump()).unwrap(), c);
        let mut d = c.clone();
        d.apply_text("seed = 3\nright_shift = 9\ngrid = 3x32x32\nper_class_cap = all\nhidden = 64,32\n").unwrap();
        assert_eq!(RunConfig::parse(&d.dump()).unwrap(), d);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("lamda_ortho", "0.1").is_err());
        assert!(c.set("seed", "-1").is_err());
        assert!(c.set("finetune", "maybe").is_err());
        assert!(c.set("pretrain_lr", "nan").is_err());
        assert!(c.set("grid", "3x32").is_err());
        assert!(c.apply_text("no equals sign").is_err());
        assert!(c.set("ablation_rows", "MM+CE").is_ok());
        assert!(matches!(c.validate(), Err(Error::ConflictingFlags(_))));
    }

    #[test]
    fn env_seed_overrides_file_seed() {
        let mut c = RunConfig::parse("seed = 3").unwrap();
        c.apply_seed_env(Some("11")).unwrap();
        assert_eq!(c.seed, 11);
        c.apply_seed_env(None).unwrap();
        assert_eq!(c.seed, 11);
        assert!(c.apply_seed_env(Some("x")).is_err());
    }

    #[test]
    fn defaults_agree_with_library_constants() {
        let entries = RunConfig::default().entries();
        for (k, v) in library_defaults() {
            let got = entries.iter().find(|(key, _)| *key == k).unwrap();
            assert_eq!(got.1, v, "{k}");
        }
        assert!(RunConfig::default().validate().is_ok());
    }
}
