//! Flat key=value run configuration.
//!
//! A run config is a UTF-8 text file with one `key=value` pair per line.
//! Blank lines and lines starting with `#` are ignored. Keys are a fixed,
//! closed set: unknown keys are rejected with the offending line number so
//! typos never silently fall back to defaults. Every run writes its fully
//! resolved config next to its outputs, and that artifact alone is enough
//! to reproduce the run.

use crate::error::{Error, Result};

/// Complete configuration for dataset synthesis, training, evaluation and
/// ablation. One flat namespace shared by every subcommand; each subcommand
/// reads the subset it needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Dataset / run identity.
    /// Path to the dataset manifest (TSV of layout/target/seed rows).
    pub manifest: String,
    /// Path to the class table; empty means `classes.tsv` next to the manifest.
    pub classes: String,
    /// Class names whose instances get dedicated binary input channels.
    pub complex_classes: Vec<String>,
    /// Master seed for every derived random stream.
    pub seed: u64,

    // Model architecture.
    /// Training image side; must be a positive multiple of 4.
    pub image_size: usize,
    /// Generator stem width; doubles at each of the two downsampling stages.
    pub gen_base_width: usize,
    /// Number of residual blocks at the generator bottleneck.
    pub gen_res_blocks: usize,
    /// Number of strided conv layers in the discriminator.
    pub disc_layers: usize,
    /// Discriminator first-layer width.
    pub disc_base_width: usize,
    /// Channel widths of the frozen cascade feature extractor, one per level.
    pub cascade_widths: Vec<usize>,

    // Optimization.
    /// Number of training epochs.
    pub epochs: usize,
    /// Samples per optimization step.
    pub batch_size: usize,
    /// Adam learning rate.
    pub lr: f32,
    /// Adam first-moment decay.
    pub beta1: f32,
    /// Adam second-moment decay.
    pub beta2: f32,

    // Loss wiring.
    /// Std-dev of Gaussian noise added to the generator input during training.
    pub sigma: f32,
    /// Weight of the L1 term in the generator objective.
    pub gamma: f32,
    /// Weight of the perturbed term in the discriminator objective.
    pub theta: f32,
    /// Weight of the cascade term in the generator objective.
    pub sigma_c: f32,
    /// Per-level cascade weights; empty means uniform 1/N.
    pub lambda: Vec<f32>,
    /// Enable the perturbed discriminator loss term.
    pub use_perturbed: bool,
    /// Enable the cascade feature loss term.
    pub use_cascade: bool,
    /// Append instance channels for complex classes to the model input.
    pub use_instance: bool,
    /// Use the saturating form of the generator adversarial loss.
    pub saturating_g: bool,

    // Training-loop behavior.
    /// Draw fresh input noise every step; when false, noise is keyed to each
    /// sample's manifest seed and repeats across epochs.
    pub fresh_noise: bool,
    /// Enlarged side for jitter-crop augmentation; 0 or == image_size disables.
    pub jitter_enlarged: usize,
    /// Number of trailing manifest entries held out for evaluation.
    pub holdout: usize,
    /// Write a rolling checkpoint every this many epochs; 0 = final only.
    pub checkpoint_every: usize,
    /// Noise std-dev applied at evaluation time (0 = deterministic).
    pub eval_sigma: f32,

    // Dataset synthesis.
    /// Number of scenes to synthesize.
    pub count: usize,
    /// Probability that consecutive cars are forced to overlap.
    pub overlap_rate: f32,
    /// Minimum cars per scene.
    pub min_cars: usize,
    /// Maximum cars per scene.
    pub max_cars: usize,
    /// Minimum buildings per scene.
    pub min_buildings: usize,
    /// Maximum buildings per scene.
    pub max_buildings: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: String::new(),
            classes: String::new(),
            complex_classes: vec!["car".to_string()],
            seed: 42,
            image_size: 64,
            gen_base_width: 8,
            gen_res_blocks: 3,
            disc_layers: 4,
            disc_base_width: 6,
            cascade_widths: vec![6, 6, 12, 12, 24],
            epochs: 200,
            batch_size: 1,
            lr: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            sigma: 0.1,
            gamma: 100.0,
            theta: 1.0,
            sigma_c: 1.0,
            lambda: Vec::new(),
            use_perturbed: true,
            use_cascade: true,
            use_instance: true,
            saturating_g: false,
            fresh_noise: true,
            jitter_enlarged: 72,
            holdout: 40,
            checkpoint_every: 50,
            eval_sigma: 0.0,
            count: 200,
            overlap_rate: 0.5,
            min_cars: 2,
            max_cars: 4,
            min_buildings: 1,
            max_buildings: 3,
        }
    }
}

/// All recognized keys, in the order they are written by [`RunConfig::to_text`].
pub const CONFIG_KEYS: &[&str] = &[
    "manifest",
    "classes",
    "complex_classes",
    "seed",
    "image_size",
    "gen_base_width",
    "gen_res_blocks",
    "disc_layers",
    "disc_base_width",
    "cascade_widths",
    "epochs",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "sigma",
    "gamma",
    "theta",
    "sigma_c",
    "lambda",
    "use_perturbed",
    "use_cascade",
    "use_instance",
    "saturating_g",
    "fresh_noise",
    "jitter_enlarged",
    "holdout",
    "checkpoint_every",
    "eval_sigma",
    "count",
    "overlap_rate",
    "min_cars",
    "max_cars",
    "min_buildings",
    "max_buildings",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::config(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::config(format!(
            "invalid value '{other}' for key '{key}': expected 'true' or 'false'"
        ))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let trimmed = value.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed
        .split(',')
        .map(|item| {
            item.trim().parse::<T>().map_err(|_| {
                Error::config(format!("invalid list element '{item}' for key '{key}'"))
            })
        })
        .collect()
}

fn parse_names(value: &str) -> Vec<String> {
    let trimmed = value.trim();
    if trimmed.is_empty() {
        return Vec::new();
    }
    trimmed.split(',').map(|s| s.trim().to_string()).collect()
}

fn fmt_f32(v: f32) -> String {
    // Round-trippable float formatting: Rust's shortest repr reparses exactly.
    format!("{v}")
}

fn fmt_list<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Applies a single `key=value` assignment. Unknown keys are an error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "manifest" => self.manifest = value.trim().to_string(),
            "classes" => self.classes = value.trim().to_string(),
            "complex_classes" => self.complex_classes = parse_names(value),
            "seed" => self.seed = parse_num(key, value)?,
            "image_size" => self.image_size = parse_num(key, value)?,
            "gen_base_width" => self.gen_base_width = parse_num(key, value)?,
            "gen_res_blocks" => self.gen_res_blocks = parse_num(key, value)?,
            "disc_layers" => self.disc_layers = parse_num(key, value)?,
            "disc_base_width" => self.disc_base_width = parse_num(key, value)?,
            "cascade_widths" => self.cascade_widths = parse_list(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "sigma" => self.sigma = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "theta" => self.theta = parse_num(key, value)?,
            "sigma_c" => self.sigma_c = parse_num(key, value)?,
            "lambda" => self.lambda = parse_list(key, value)?,
            "use_perturbed" => self.use_perturbed = parse_bool(key, value)?,
            "use_cascade" => self.use_cascade = parse_bool(key, value)?,
            "use_instance" => self.use_instance = parse_bool(key, value)?,
            "saturating_g" => self.saturating_g = parse_bool(key, value)?,
            "fresh_noise" => self.fresh_noise = parse_bool(key, value)?,
            "jitter_enlarged" => self.jitter_enlarged = parse_num(key, value)?,
            "holdout" => self.holdout = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "eval_sigma" => self.eval_sigma = parse_num(key, value)?,
            "count" => self.count = parse_num(key, value)?,
            "overlap_rate" => self.overlap_rate = parse_num(key, value)?,
            "min_cars" => self.min_cars = parse_num(key, value)?,
            "max_cars" => self.max_cars = parse_num(key, value)?,
            "min_buildings" => self.min_buildings = parse_num(key, value)?,
            "max_buildings" => self.max_buildings = parse_num(key, value)?,
            other => {
                return Err(Error::config(format!("unknown key '{other}'")));
            }
        }
        Ok(())
    }

    /// Parses a config text, starting from defaults. Errors carry 1-based
    /// line numbers.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies a config text on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = idx + 1;
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "line {lineno}: expected 'key=value', got '{line}'"
                )));
            };
            self.apply(key.trim(), value).map_err(|e| match e {
                Error::Config(msg) => Error::config(format!("line {lineno}: {msg}")),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Serializes every key in canonical order. `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let value = match *key {
                "manifest" => self.manifest.clone(),
                "classes" => self.classes.clone(),
                "complex_classes" => self.complex_classes.join(","),
                "seed" => self.seed.to_string(),
                "image_size" => self.image_size.to_string(),
                "gen_base_width" => self.gen_base_width.to_string(),
                "gen_res_blocks" => self.gen_res_blocks.to_string(),
                "disc_layers" => self.disc_layers.to_string(),
                "disc_base_width" => self.disc_base_width.to_string(),
                "cascade_widths" => fmt_list(&self.cascade_widths),
                "epochs" => self.epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "lr" => fmt_f32(self.lr),
                "beta1" => fmt_f32(self.beta1),
                "beta2" => fmt_f32(self.beta2),
                "sigma" => fmt_f32(self.sigma),
                "gamma" => fmt_f32(self.gamma),
                "theta" => fmt_f32(self.theta),
                "sigma_c" => fmt_f32(self.sigma_c),
                "lambda" => fmt_list(&self.lambda),
                "use_perturbed" => self.use_perturbed.to_string(),
                "use_cascade" => self.use_cascade.to_string(),
                "use_instance" => self.use_instance.to_string(),
                "saturating_g" => self.saturating_g.to_string(),
                "fresh_noise" => self.fresh_noise.to_string(),
                "jitter_enlarged" => self.jitter_enlarged.to_string(),
                "holdout" => self.holdout.to_string(),
                "checkpoint_every" => self.checkpoint_every.to_string(),
                "eval_sigma" => fmt_f32(self.eval_sigma),
                "count" => self.count.to_string(),
                "overlap_rate" => fmt_f32(self.overlap_rate),
                "min_cars" => self.min_cars.to_string(),
                "max_cars" => self.max_cars.to_string(),
                "min_buildings" => self.min_buildings.to_string(),
                "max_buildings" => self.max_buildings.to_string(),
                _ => unreachable!("key list and serializer are maintained together"),
            };
            out.push_str(key);
            out.push('=');
            out.push_str(&value);
            out.push('\n');
        }
        out
    }

    /// Validates all numeric ranges and cross-field constraints.
    pub fn validate(&self) -> Result<()> {
        fn finite_nonneg(key: &str, v: f32) -> Result<()> {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!(
                    "{key} must be finite and >= 0, got {v}"
                )));
            }
            Ok(())
        }
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::config(format!(
                "image_size must be a positive multiple of 4, got {}",
                self.image_size
            )));
        }
        if self.gen_base_width == 0 || self.disc_base_width == 0 {
            return Err(Error::config("model base widths must be >= 1"));
        }
        if self.gen_res_blocks == 0 {
            return Err(Error::config("gen_res_blocks must be >= 1"));
        }
        if self.disc_layers == 0 {
            return Err(Error::config("disc_layers must be >= 1"));
        }
        // Each discriminator layer halves the spatial extent; the input must
        // survive all of them with at least one pixel.
        if self.image_size < (1usize << self.disc_layers) {
            return Err(Error::config(format!(
                "image_size {} is too small for disc_layers {}: needs at least {}",
                self.image_size,
                self.disc_layers,
                1usize << self.disc_layers
            )));
        }
        if self.cascade_widths.is_empty() {
            return Err(Error::config("cascade_widths must not be empty"));
        }
        if self.cascade_widths.iter().any(|&w| w == 0) {
            return Err(Error::config("cascade_widths entries must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::config(format!(
                "lr must be finite and > 0, got {}",
                self.lr
            )));
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !v.is_finite() || !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!(
                    "{key} must be in [0, 1), got {v}"
                )));
            }
        }
        finite_nonneg("sigma", self.sigma)?;
        finite_nonneg("gamma", self.gamma)?;
        finite_nonneg("theta", self.theta)?;
        finite_nonneg("sigma_c", self.sigma_c)?;
        finite_nonneg("eval_sigma", self.eval_sigma)?;
        for (i, &l) in self.lambda.iter().enumerate() {
            finite_nonneg(&format!("lambda[{i}]"), l)?;
        }
        if !self.lambda.is_empty() && self.lambda.len() != self.cascade_widths.len() {
            return Err(Error::config(format!(
                "lambda has {} entries but cascade_widths has {} levels",
                self.lambda.len(),
                self.cascade_widths.len()
            )));
        }
        if self.jitter_enlarged != 0 && self.jitter_enlarged < self.image_size {
            return Err(Error::config(format!(
                "jitter_enlarged must be 0 or >= image_size, got {}",
                self.jitter_enlarged
            )));
        }
        if !self.overlap_rate.is_finite() || !(0.0..=1.0).contains(&self.overlap_rate) {
            return Err(Error::config(format!(
                "overlap_rate must be in [0, 1], got {}",
                self.overlap_rate
            )));
        }
        if self.min_cars > self.max_cars {
            return Err(Error::config("min_cars must be <= max_cars"));
        }
        if self.min_buildings > self.max_buildings {
            return Err(Error::config("min_buildings must be <= max_buildings"));
        }
        Ok(())
    }

    /// Path of the class table, defaulting to `classes.tsv` beside the manifest.
    pub fn classes_path(&self) -> std::path::PathBuf {
        if !self.classes.is_empty() {
            return std::path::PathBuf::from(&self.classes);
        }
        let manifest = std::path::Path::new(&self.manifest);
        match manifest.parent() {
            Some(dir) => dir.join("classes.tsv"),
            None => std::path::PathBuf::from("classes.tsv"),
        }
    }
}
