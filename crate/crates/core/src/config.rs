//! Run configuration. Every section is optional in the JSON file and falls
//! back to its default; unknown keys are errors that name the offending path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::filter::HardAssignment;
use crate::said::PccInput;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    Hard,
    #[default]
    Soft,
    Free,
}

impl std::str::FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            "free" => Ok(Self::Free),
            other => Err(invalid(format!("unknown mode `{other}`, want hard, soft or free"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: String,
    pub data: DataCfg,
    pub said: SaidCfg,
    pub model: ModelCfg,
    pub ablation: AblationCfg,
    pub train: TrainCfg,
    pub augment: AugmentCfg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataCfg {
    /// Cells per side; every cell is 4x4 pixels.
    pub grid: usize,
    pub occupancy: f64,
    pub n_per_subdomain: usize,
    pub n_target_unlabeled: usize,
    pub n_target_eval: usize,
    /// Radial style band `[lo, hi)` of each source subdomain.
    pub source_bands: Vec<[f64; 2]>,
    pub target_band: [f64; 2],
    pub style_strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaidCfg {
    pub mode: FilterMode,
    pub n_filters: usize,
    pub sigma_h: f64,
    pub hard_assignment: HardAssignment,
    pub k: u32,
    pub lambda_dcp: f64,
    pub epsilon: f64,
    pub pcc_input: PccInput,
    pub soft_hidden: usize,
    pub free_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelCfg {
    /// Attention width of the late levels and the head.
    pub d: usize,
    pub n_tokens: usize,
    /// DS planes are pooled onto a `ds_grid x ds_grid` grid; 0 pools globally.
    pub ds_grid: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationCfg {
    pub said: bool,
    pub coupling: bool,
    pub ssm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCfg {
    pub burn_in_steps: usize,
    pub mutual_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha_ema: f64,
    pub alpha_ssm: f64,
    pub ssm_step: usize,
    pub threshold: f64,
    /// Evaluate every this many steps (0: only after each stage).
    pub eval_every: usize,
    pub checkpoint: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentCfg {
    /// Weak: circular shift of up to this many cells per axis.
    pub max_shift: usize,
    /// Weak: gain and offset jitter half-width.
    pub brightness: f64,
    /// Strong: std of the extra band-limited noise.
    pub band_noise: f64,
    /// Strong: side of the zeroed square, 0 disables.
    pub cutout: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: "runs/default".into(),
            data: DataCfg::default(),
            said: SaidCfg::default(),
            model: ModelCfg::default(),
            ablation: AblationCfg::default(),
            train: TrainCfg::default(),
            augment: AugmentCfg::default(),
        }
    }
}

impl Default for DataCfg {
    fn default() -> Self {
        Self {
            grid: 8,
            occupancy: 0.35,
            n_per_subdomain: 200,
            n_target_unlabeled: 400,
            n_target_eval: 200,
            source_bands: vec![[0.05, 0.10], [0.22, 0.28], [0.40, 0.46]],
            target_band: [0.30, 0.36],
            style_strength: 1.0,
        }
    }
}

impl Default for SaidCfg {
    fn default() -> Self {
        Self {
            mode: FilterMode::Soft,
            n_filters: 100,
            sigma_h: 0.1,
            hard_assignment: HardAssignment::HighPassInvariant,
            k: 2,
            lambda_dcp: 50.0,
            epsilon: 1e-8,
            pcc_input: PccInput::LogAmplitude,
            soft_hidden: 16,
            free_hidden: 8,
        }
    }
}

impl Default for ModelCfg {
    fn default() -> Self {
        Self {
            d: 64,
            n_tokens: 8,
            ds_grid: 2,
        }
    }
}

impl Default for AblationCfg {
    fn default() -> Self {
        Self {
            said: true,
            coupling: true,
            ssm: true,
        }
    }
}

impl Default for TrainCfg {
    fn default() -> Self {
        Self {
            burn_in_steps: 500,
            mutual_steps: 2000,
            batch_size: 4,
            lr: 0.01,
            alpha_ema: 0.9996,
            alpha_ssm: 0.5,
            ssm_step: 500,
            threshold: 0.7,
            eval_every: 0,
            checkpoint: true,
        }
    }
}

impl Default for AugmentCfg {
    fn default() -> Self {
        Self {
            max_shift: 1,
            brightness: 0.05,
            band_noise: 0.1,
            cutout: 4,
        }
    }
}

impl RunConfig {
    /// Settings for the toy transfer benchmark: a narrower model, a smaller
    /// bank, a faster teacher and a larger step so 2,000 mutual steps move it.
    pub fn benchmark() -> Self {
        let mut c = Self::default();
        c.said.n_filters = 20;
        c.model.d = 32;
        c.train.lr = 0.05;
        c.train.alpha_ema = 0.99;
        c
    }

    /// The source-only baseline: plain detector, burn-in only.
    pub fn source_only(mut self) -> Self {
        self.ablation.said = false;
        self.ablation.coupling = false;
        self.train.mutual_steps = 0;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Format(format!("config key `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn image_size(&self) -> usize {
        4 * self.data.grid
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.source_bands.len() < 2 {
            return Err(invalid(format!("need at least 2 source subdomains, got {}", d.source_bands.len())));
        }
        if d.grid == 0 || !d.grid.is_multiple_of(8) {
            return Err(invalid(format!("data.grid must be a positive multiple of 8, got {}", d.grid)));
        }
        let band_ok = |b: &[f64; 2]| b[0] >= 0.0 && b[0] < b[1];
        for b in d.source_bands.iter().chain(std::iter::once(&d.target_band)) {
            if !band_ok(b) {
                return Err(invalid(format!("band {b:?} is not an interval [lo, hi)")));
            }
        }
        let t = d.target_band;
        if let Some(b) = d.source_bands.iter().find(|b| b[0] < t[1] && t[0] < b[1]) {
            return Err(invalid(format!("target band {t:?} overlaps source band {b:?}")));
        }
        if !(0.0..=1.0).contains(&d.occupancy) {
            return Err(invalid("data.occupancy must lie in [0, 1]"));
        }
        if d.n_per_subdomain == 0 || d.n_target_eval == 0 {
            return Err(invalid("datasets must be non-empty"));
        }
        let s = &self.said;
        if s.n_filters == 0 {
            return Err(invalid("said.n_filters must be >= 1"));
        }
        if !(s.sigma_h > 0.0) {
            return Err(invalid("said.sigma_h must be > 0"));
        }
        crate::said::DecoupleLossCfg::new(s.k, s.epsilon, s.lambda_dcp)?;
        if s.soft_hidden == 0 || s.free_hidden == 0 {
            return Err(invalid("hidden widths must be >= 1"));
        }
        let m = &self.model;
        if m.d == 0 || m.n_tokens == 0 {
            return Err(invalid("model.d and model.n_tokens must be >= 1"));
        }
        if m.ds_grid != 0 && !self.image_size().is_multiple_of(m.ds_grid) {
            return Err(invalid("model.ds_grid must divide the image size"));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(invalid("train.batch_size must be >= 1"));
        }
        if !(t.lr >= 0.0) || !t.lr.is_finite() {
            return Err(invalid("train.lr must be finite and >= 0"));
        }
        for (name, v) in [("alpha_ema", t.alpha_ema), ("alpha_ssm", t.alpha_ssm)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("train.{name} must lie in [0, 1]")));
            }
        }
        if t.ssm_step == 0 {
            return Err(invalid("train.ssm_step must be >= 1"));
        }
        if !(0.0..=1.0).contains(&t.threshold) {
            return Err(invalid("train.threshold must lie in [0, 1]"));
        }
        if t.mutual_steps > 0 && d.n_target_unlabeled == 0 {
            return Err(invalid("mutual learning needs unlabeled target scenes"));
        }
        Ok(())
    }
}
