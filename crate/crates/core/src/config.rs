//! Run configuration: a flat `key: value` text file.
//!
//! Every key is optional and falls back to the default listed in
//! [`RunConfig::default`]. Unknown keys are rejected so that a typo in an
//! ablation script fails loudly instead of silently running the default.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Activation;

/// How training batches are drawn from the dataset each epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Batching {
    /// Shuffle cohorts, keep each cohort's pairs adjacent, then chunk.
    Cohort,
    /// Shuffle individual pairs.
    Random,
}

impl Batching {
    fn name(self) -> &'static str {
        match self {
            Batching::Cohort => "cohort",
            Batching::Random => "random",
        }
    }
}

/// Encoder and retrieval-pipeline hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Patches per frame (`P²`).
    pub patches: usize,
    pub frames: usize,
    /// Width of raw synthetic patch features before the input projection.
    pub patch_dim: usize,
    pub indicator_count: usize,
    pub max_indicator_count: usize,
    /// Focused candidates at inference.
    pub k: usize,
    pub fusion_blocks: usize,
    pub mlp_hidden: usize,
    pub activation: Activation,
    pub gumbel_temp: f64,
    pub use_gumbel: bool,
    pub use_indicators: bool,
    pub add_stage1_scores: bool,
}

/// Optimisation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Initial contrastive temperature.
    pub temperature: f64,
    pub learn_temperature: bool,
    pub batch_size: usize,
    /// Focused candidates per training query; `None` means `min(k, B)`.
    pub k_train: Option<usize>,
    pub epochs: usize,
    pub lr_fusion: f64,
    pub lr_base: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batching: Batching,
}

impl RunConfig {
    /// Focused candidates per training query: the explicit `k_train`, or
    /// `min(k, B)` so that training sees as many candidates as inference.
    pub fn k_train(&self) -> usize {
        self.train
            .k_train
            .unwrap_or_else(|| self.model.k.min(self.train.batch_size))
    }
}

/// Synthetic benchmark shape.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub pairs: usize,
    pub test_pairs: usize,
    /// Hard-negative cohort size `g`.
    pub cohort_size: usize,
    /// Distinct coarse themes; 0 gives every cohort its own.
    pub coarse_clusters: usize,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig {
                layers: 2,
                width: 64,
                vocab_size: 256,
                max_text_len: 16,
                patches: 16,
                frames: 4,
                patch_dim: 32,
                indicator_count: 4,
                max_indicator_count: 6,
                k: 10,
                fusion_blocks: 1,
                mlp_hidden: 128,
                activation: Activation::Silu,
                gumbel_temp: 1.0,
                use_gumbel: true,
                use_indicators: true,
                add_stage1_scores: true,
            },
            train: TrainConfig {
                temperature: 0.01,
                learn_temperature: true,
                batch_size: 32,
                k_train: None,
                epochs: 5,
                lr_fusion: 1e-4,
                lr_base: 1e-6,
                weight_decay: 0.2,
                beta1: 0.9,
                beta2: 0.999,
                adam_eps: 1e-8,
                batching: Batching::Cohort,
            },
            data: DataConfig {
                pairs: 500,
                test_pairs: 250,
                cohort_size: 5,
                coarse_clusters: 0,
                noise: 0.1,
            },
        }
    }
}

/// Every accepted key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "layers",
    "width",
    "vocab_size",
    "max_text_len",
    "patches",
    "frames",
    "patch_dim",
    "indicator_count",
    "max_indicator_count",
    "k",
    "fusion_blocks",
    "mlp_hidden",
    "activation",
    "gumbel_temp",
    "use_gumbel",
    "use_indicators",
    "add_stage1_scores",
    "temperature",
    "learn_temperature",
    "batch_size",
    "k_train",
    "epochs",
    "lr_fusion",
    "lr_base",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "batching",
    "pairs",
    "test_pairs",
    "cohort_size",
    "coarse_clusters",
    "noise",
];

fn parse_usize(key: &str, v: &str) -> std::result::Result<usize, String> {
    v.parse().map_err(|_| format!("`{key}` expects a non-negative integer, got `{v}`"))
}

fn parse_f64(key: &str, v: &str) -> std::result::Result<f64, String> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| format!("`{key}` expects a finite number, got `{v}`"))
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("`{key}` expects true/false, got `{v}`")),
    }
}

impl RunConfig {
    /// Load from a file; a missing path is an error, an empty file yields
    /// the defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once(':')
                .or_else(|| line.split_once('='))
                .ok_or_else(|| Error::ConfigParse {
                    line: i + 1,
                    msg: format!("expected `key: value`, got `{line}`"),
                })?;
            cfg.set_raw(key.trim(), value.trim())
                .map_err(|msg| Error::ConfigParse { line: i + 1, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn is_known_key(key: &str) -> bool {
        KEYS.contains(&key)
    }

    /// Apply one override and re-validate.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_raw(key, value).map_err(Error::Config)?;
        self.validate()
    }

    fn set_raw(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "seed" => self.seed = v.parse().map_err(|_| format!("`seed` expects an integer, got `{v}`"))?,
            "layers" => m.layers = parse_usize(key, v)?,
            "width" => m.width = parse_usize(key, v)?,
            "vocab_size" => m.vocab_size = parse_usize(key, v)?,
            "max_text_len" => m.max_text_len = parse_usize(key, v)?,
            "patches" => m.patches = parse_usize(key, v)?,
            "frames" => m.frames = parse_usize(key, v)?,
            "patch_dim" => m.patch_dim = parse_usize(key, v)?,
            "indicator_count" => m.indicator_count = parse_usize(key, v)?,
            "max_indicator_count" => m.max_indicator_count = parse_usize(key, v)?,
            "k" => m.k = parse_usize(key, v)?,
            "fusion_blocks" => m.fusion_blocks = parse_usize(key, v)?,
            "mlp_hidden" => m.mlp_hidden = parse_usize(key, v)?,
            "activation" => {
                m.activation = Activation::parse(v)
                    .ok_or_else(|| format!("`activation` must be silu or linear, got `{v}`"))?
            }
            "gumbel_temp" => m.gumbel_temp = parse_f64(key, v)?,
            "use_gumbel" => m.use_gumbel = parse_bool(key, v)?,
            "use_indicators" => m.use_indicators = parse_bool(key, v)?,
            "add_stage1_scores" => m.add_stage1_scores = parse_bool(key, v)?,
            "temperature" => t.temperature = parse_f64(key, v)?,
            "learn_temperature" => t.learn_temperature = parse_bool(key, v)?,
            "batch_size" => t.batch_size = parse_usize(key, v)?,
            "k_train" => {
                t.k_train = match v {
                    "auto" => None,
                    _ => Some(parse_usize(key, v)?),
                }
            }
            "epochs" => t.epochs = parse_usize(key, v)?,
            "lr_fusion" => t.lr_fusion = parse_f64(key, v)?,
            "lr_base" => t.lr_base = parse_f64(key, v)?,
            "weight_decay" => t.weight_decay = parse_f64(key, v)?,
            "beta1" => t.beta1 = parse_f64(key, v)?,
            "beta2" => t.beta2 = parse_f64(key, v)?,
            "adam_eps" => t.adam_eps = parse_f64(key, v)?,
            "batching" => {
                t.batching = match v {
                    "cohort" => Batching::Cohort,
                    "random" => Batching::Random,
                    _ => return Err(format!("`batching` must be cohort or random, got `{v}`")),
                }
            }
            "pairs" => d.pairs = parse_usize(key, v)?,
            "test_pairs" => d.test_pairs = parse_usize(key, v)?,
            "cohort_size" => d.cohort_size = parse_usize(key, v)?,
            "coarse_clusters" => d.coarse_clusters = parse_usize(key, v)?,
            "noise" => d.noise = parse_f64(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::config(msg.to_string())) };
        check(m.layers >= 1, "layers must be >= 1")?;
        check(m.width >= 1, "width must be >= 1")?;
        check(m.vocab_size >= 2, "vocab_size must be >= 2")?;
        check(m.max_text_len >= 1, "max_text_len must be >= 1")?;
        check(m.patches >= 1, "patches must be >= 1")?;
        check(m.frames >= 1, "frames must be >= 1")?;
        check(m.patch_dim >= 1, "patch_dim must be >= 1")?;
        check(m.max_indicator_count >= 2, "max_indicator_count must be >= 2")?;
        if m.indicator_count < 2 || m.indicator_count > m.max_indicator_count {
            return Err(Error::config(format!(
                "indicator_count must lie in 2..={}, got {}",
                m.max_indicator_count, m.indicator_count
            )));
        }
        check(m.k >= 1, "k must be >= 1")?;
        check(m.fusion_blocks >= 1, "fusion_blocks must be >= 1")?;
        check(m.mlp_hidden >= 1, "mlp_hidden must be >= 1")?;
        check(m.gumbel_temp > 0.0, "gumbel_temp must be > 0")?;
        check(t.temperature > 0.0, "temperature must be > 0")?;
        check(t.batch_size >= 2, "batch_size must be >= 2")?;
        let kt = self.k_train();
        if kt < 1 || kt > t.batch_size {
            return Err(Error::config(format!(
                "k_train must lie in 1..=batch_size ({}), got {kt}",
                t.batch_size
            )));
        }
        if let Some(kt) = t.k_train {
            check(kt <= m.k, "k_train must not exceed k")?;
        }
        check(t.lr_fusion > 0.0 && t.lr_base > 0.0, "learning rates must be > 0")?;
        check(t.weight_decay >= 0.0, "weight_decay must be >= 0")?;
        check((0.0..1.0).contains(&t.beta1) && (0.0..1.0).contains(&t.beta2), "betas must lie in [0, 1)")?;
        check(t.adam_eps > 0.0, "adam_eps must be > 0")?;
        check(d.cohort_size >= 1, "cohort_size must be >= 1")?;
        check(d.pairs >= 1 && d.pairs.is_multiple_of(d.cohort_size), "pairs must be a positive multiple of cohort_size")?;
        check(d.test_pairs.is_multiple_of(d.cohort_size), "test_pairs must be a multiple of cohort_size")?;
        check(d.noise >= 0.0, "noise must be >= 0")?;
        Ok(())
    }

    /// Render every key, one per line, in a form [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}: {v}");
        };
        put("seed", self.seed.to_string());
        put("layers", m.layers.to_string());
        put("width", m.width.to_string());
        put("vocab_size", m.vocab_size.to_string());
        put("max_text_len", m.max_text_len.to_string());
        put("patches", m.patches.to_string());
        put("frames", m.frames.to_string());
        put("patch_dim", m.patch_dim.to_string());
        put("indicator_count", m.indicator_count.to_string());
        put("max_indicator_count", m.max_indicator_count.to_string());
        put("k", m.k.to_string());
        put("fusion_blocks", m.fusion_blocks.to_string());
        put("mlp_hidden", m.mlp_hidden.to_string());
        put("activation", m.activation.name().to_string());
        put("gumbel_temp", format!("{:?}", m.gumbel_temp));
        put("use_gumbel", m.use_gumbel.to_string());
        put("use_indicators", m.use_indicators.to_string());
        put("add_stage1_scores", m.add_stage1_scores.to_string());
        put("temperature", format!("{:?}", t.temperature));
        put("learn_temperature", t.learn_temperature.to_string());
        put("batch_size", t.batch_size.to_string());
        put("k_train", t.k_train.map_or("auto".to_string(), |k| k.to_string()));
        put("epochs", t.epochs.to_string());
        put("lr_fusion", format!("{:?}", t.lr_fusion));
        put("lr_base", format!("{:?}", t.lr_base));
        put("weight_decay", format!("{:?}", t.weight_decay));
        put("beta1", format!("{:?}", t.beta1));
        put("beta2", format!("{:?}", t.beta2));
        put("adam_eps", format!("{:?}", t.adam_eps));
        put("batching", t.batching.name().to_string());
        put("pairs", d.pairs.to_string());
        put("test_pairs", d.test_pairs.to_string());
        put("cohort_size", d.cohort_size.to_string());
        put("coarse_clusters", d.coarse_clusters.to_string());
        put("noise", format!("{:?}", d.noise));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.indicator_count, 4);
        assert_eq!(cfg.model.k, 10);
        assert_eq!(cfg.model.fusion_blocks, 1);
        assert_eq!(cfg.train.temperature, 0.01);
        assert_eq!(cfg.train.weight_decay, 0.2);
        assert_eq!(cfg.train.lr_fusion, 1e-4);
        assert_eq!(cfg.train.lr_base, 1e-6);
        assert_eq!(cfg.k_train(), 10);
    }

    #[test]
    fn zero_k_is_rejected() {
        assert!(matches!(RunConfig::parse("k: 0"), Err(Error::Config(_))));
    }

    #[test]
    fn six_indicators_accepted() {
        let cfg = RunConfig::parse("indicator_count: 6\n").unwrap();
        assert_eq!(cfg.model.indicator_count, 6);
    }

    #[test]
    fn indicator_cap_enforced() {
        let mut cfg = RunConfig::parse("max_indicator_count: 6").unwrap();
        assert!(matches!(cfg.set("indicator_count", "7"), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_key_reports_line() {
        match RunConfig::parse("# header\nk: 5\nindicator_cout: 3\n") {
            Err(Error::ConfigParse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("indicator_cout"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_value_reports_line() {
        assert!(matches!(
            RunConfig::parse("\n\nwidth: wide"),
            Err(Error::ConfigParse { line: 3, .. })
        ));
        assert!(matches!(RunConfig::parse("just words"), Err(Error::ConfigParse { line: 1, .. })));
    }

    #[test]
    fn comments_and_equals_are_accepted() {
        let cfg = RunConfig::parse("k = 5  # trailing\n  # whole line\nuse_gumbel: off").unwrap();
        assert_eq!(cfg.model.k, 5);
        assert!(!cfg.model.use_gumbel);
    }

    #[test]
    fn k_train_auto_follows_batch() {
        let cfg = RunConfig::parse("batch_size: 4").unwrap();
        assert_eq!(cfg.k_train(), 4);
        assert_eq!(RunConfig::parse("k: 5").unwrap().k_train(), 5);
        assert!(RunConfig::parse("batch_size: 4\nk_train: 5").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("gumbel_temp", "0.5").unwrap();
        cfg.set("k_train", "6").unwrap();
        cfg.set("batching", "random").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        for key in KEYS {
            assert!(cfg.to_text().contains(&format!("{key}: ")), "{key}");
        }
    }
}
