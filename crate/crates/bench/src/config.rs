//! Experiment configuration, read from TOML files or named presets.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use robust_da::analysis::{WolfSpec, WolfVariant};
use robust_da::dynamics::ContaminationSpec;
use robust_da::ensemble::{KernelMode, LetkfConfig, Localization, TaperConvention};
use robust_da::particle::{ResampleConfig, ResampleScheme};
use robust_da::weights::{default_threshold, KernelFamily, Standardization, WeightKernelSpec};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, BenchError, BenchResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ou,
    Tracking2d,
    Lorenz63,
    Lorenz96,
}

impl ModelKind {
    pub fn is_linear(self) -> bool {
        matches!(self, ModelKind::Ou | ModelKind::Tracking2d)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ou => "ou",
            ModelKind::Tracking2d => "tracking2d",
            ModelKind::Lorenz63 => "lorenz63",
            ModelKind::Lorenz96 => "lorenz96",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Kf,
    DsmKf,
    WolfKf,
    Enkf,
    DsmEnkf,
    WolfEnkf,
    Esrf,
    DsmEsrf,
    Letkf,
    DsmLetkf,
    WolfLetkf,
    DsmPf,
}

/// Weighting applied in the analysis step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Regular,
    Dsm,
    Wolf,
}

impl FilterKind {
    pub const ALL: [FilterKind; 12] = [
        FilterKind::Kf,
        FilterKind::DsmKf,
        FilterKind::WolfKf,
        FilterKind::Enkf,
        FilterKind::DsmEnkf,
        FilterKind::WolfEnkf,
        FilterKind::Esrf,
        FilterKind::DsmEsrf,
        FilterKind::Letkf,
        FilterKind::DsmLetkf,
        FilterKind::WolfLetkf,
        FilterKind::DsmPf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Kf => "kf",
            FilterKind::DsmKf => "dsm_kf",
            FilterKind::WolfKf => "wolf_kf",
            FilterKind::Enkf => "enkf",
            FilterKind::DsmEnkf => "dsm_enkf",
            FilterKind::WolfEnkf => "wolf_enkf",
            FilterKind::Esrf => "esrf",
            FilterKind::DsmEsrf => "dsm_esrf",
            FilterKind::Letkf => "letkf",
            FilterKind::DsmLetkf => "dsm_letkf",
            FilterKind::WolfLetkf => "wolf_letkf",
            FilterKind::DsmPf => "dsm_pf",
        }
    }

    pub fn variant(self) -> Variant {
        match self {
            FilterKind::Kf | FilterKind::Enkf | FilterKind::Esrf | FilterKind::Letkf => {
                Variant::Regular
            }
            FilterKind::WolfKf | FilterKind::WolfEnkf | FilterKind::WolfLetkf => Variant::Wolf,
            _ => Variant::Dsm,
        }
    }

    pub fn is_kalman(self) -> bool {
        matches!(self, FilterKind::Kf | FilterKind::DsmKf | FilterKind::WolfKf)
    }

    pub fn is_ensemble(self) -> bool {
        !self.is_kalman() && self != FilterKind::DsmPf
    }

    pub fn is_letkf(self) -> bool {
        matches!(self, FilterKind::Letkf | FilterKind::DsmLetkf | FilterKind::WolfLetkf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    #[default]
    Imq,
    SquaredExponential,
    Constant,
}

impl From<FamilyName> for KernelFamily {
    fn from(f: FamilyName) -> Self {
        match f {
            FamilyName::Imq => KernelFamily::Imq,
            FamilyName::SquaredExponential => KernelFamily::SquaredExponential,
            FamilyName::Constant => KernelFamily::Constant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StandardizationName {
    #[default]
    Marginal,
    Conditional,
    ObsAnomaly,
}

impl From<StandardizationName> for Standardization {
    fn from(s: StandardizationName) -> Self {
        match s {
            StandardizationName::Marginal => Standardization::Marginal,
            StandardizationName::Conditional => Standardization::Conditional,
            StandardizationName::ObsAnomaly => Standardization::ObsAnomaly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WolfVariantName {
    #[default]
    Md,
    SigmaScaled,
}

impl From<WolfVariantName> for WolfVariant {
    fn from(v: WolfVariantName) -> Self {
        match v {
            WolfVariantName::Md => WolfVariant::Md,
            WolfVariantName::SigmaScaled => WolfVariant::SigmaScaled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelModeName {
    #[default]
    AverageParticle,
    PerParticle,
}

impl From<KernelModeName> for KernelMode {
    fn from(m: KernelModeName) -> Self {
        match m {
            KernelModeName::AverageParticle => KernelMode::AverageParticle,
            KernelModeName::PerParticle => KernelMode::PerParticle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaperName {
    #[default]
    Precision,
    Covariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    #[default]
    Multinomial,
    Systematic,
}

/// Kernel settings shared by the DSM and WoLF filters. Missing thresholds
/// default to the observation dimension of the analysis (the local window
/// size for a localized LETKF).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    pub family: FamilyName,
    pub threshold: Option<f64>,
    pub standardization: StandardizationName,
    pub wolf_variant: WolfVariantName,
    pub wolf_c_sq: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContaminationConfig {
    pub epsilon: f64,
    /// Standard-deviation inflation of the contaminating component.
    pub sqrt_lambda: f64,
}

impl Default for ContaminationConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            sqrt_lambda: 1.0,
        }
    }
}

impl ContaminationConfig {
    pub fn spec(&self) -> BenchResult<ContaminationSpec> {
        Ok(ContaminationSpec::new(
            self.epsilon,
            self.sqrt_lambda * self.sqrt_lambda,
        )?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizationConfig {
    pub half_width: usize,
    pub taper_length: f64,
    #[serde(default)]
    pub convention: TaperName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub size: usize,
    pub mode: KernelModeName,
    pub inflation: f64,
    pub localization: Option<LocalizationConfig>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            size: 10,
            mode: KernelModeName::AverageParticle,
            inflation: 1.0,
            localization: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParticleConfig {
    pub count: usize,
    pub resample_threshold: f64,
    pub scheme: SchemeName,
}

impl Default for ParticleConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            resample_threshold: 0.5,
            scheme: SchemeName::Multinomial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct HorizonConfig {
    pub t_end: Option<f64>,
    pub dt: Option<f64>,
    /// Time between observations.
    pub t_out: Option<f64>,
    pub burn_in: Option<f64>,
    /// State dimension (Lorenz-96 only).
    pub dim: Option<usize>,
}

/// Horizon with the model defaults filled in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Horizon {
    pub t_end: f64,
    pub dt: f64,
    pub t_out: f64,
    pub burn_in: f64,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub epsilons: Vec<f64>,
    pub sqrt_lambdas: Vec<f64>,
    pub sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub filters: Vec<FilterKind>,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub contamination: ContaminationConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub particle: ParticleConfig,
    #[serde(default)]
    pub horizon: HorizonConfig,
    #[serde(default = "one")]
    pub mc_reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Score uncertainty with the diagonal of the covariance only.
    /// Defaults to true for Lorenz-96.
    #[serde(default)]
    pub diagonalize_qic: Option<bool>,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn one() -> usize {
    1
}

const PRESETS: [(&str, &str); 9] = [
    ("ou_full", include_str!("../presets/ou_full.toml")),
    ("ou_desk", include_str!("../presets/ou_desk.toml")),
    ("ou_contaminated", include_str!("../presets/ou_contaminated.toml")),
    ("tracking_full", include_str!("../presets/tracking_full.toml")),
    ("tracking_desk", include_str!("../presets/tracking_desk.toml")),
    ("lorenz63_full", include_str!("../presets/lorenz63_full.toml")),
    ("lorenz63_desk", include_str!("../presets/lorenz63_desk.toml")),
    ("lorenz96_full", include_str!("../presets/lorenz96_full.toml")),
    ("lorenz96_desk", include_str!("../presets/lorenz96_desk.toml")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

impl ExperimentConfig {
    /// Parses and validates TOML. `origin` names the source in errors.
    pub fn from_toml_str(text: &str, origin: &str) -> BenchResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| BenchError::Parse {
            origin: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(name: &str) -> BenchResult<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| BenchError::Config(format!("unknown preset `{name}`")))?;
        Self::from_toml_str(text, &format!("preset {name}"))
    }

    /// A preset name or a path to a TOML file.
    pub fn load(arg: &str) -> BenchResult<Self> {
        if preset_names().any(|n| n == arg) {
            return Self::preset(arg);
        }
        let path = Path::new(arg);
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn horizon(&self) -> Horizon {
        let h = &self.horizon;
        let (t_end, dt, t_out, burn_in, dim) = match self.model {
            ModelKind::Ou => (10.0, 0.1, None, 0.0, 1),
            ModelKind::Tracking2d => (50.0, 0.1, None, 0.0, 4),
            ModelKind::Lorenz63 => (50.0, 0.001, Some(0.05), 0.0, 3),
            ModelKind::Lorenz96 => (73.0, 0.01, Some(0.05), 12.2, 40),
        };
        let dt = h.dt.unwrap_or(dt);
        Horizon {
            t_end: h.t_end.unwrap_or(t_end),
            dt,
            t_out: h.t_out.or(t_out).unwrap_or(dt),
            burn_in: h.burn_in.unwrap_or(burn_in),
            dim: if self.model == ModelKind::Lorenz96 {
                h.dim.unwrap_or(dim)
            } else {
                dim
            },
        }
    }

    pub fn state_dim(&self) -> usize {
        self.horizon().dim
    }

    pub fn obs_dim(&self) -> usize {
        match self.model {
            ModelKind::Ou => 1,
            ModelKind::Tracking2d => 2,
            ModelKind::Lorenz63 => 1,
            ModelKind::Lorenz96 => self.horizon().dim,
        }
    }

    pub fn diagonalize_qic(&self) -> bool {
        self.diagonalize_qic
            .unwrap_or(self.model == ModelKind::Lorenz96)
    }

    pub fn letkf_config(&self) -> BenchResult<LetkfConfig> {
        let cfg = match &self.ensemble.localization {
            None => LetkfConfig {
                inflation: self.ensemble.inflation,
                localization: None,
                per_state_window: false,
            },
            Some(l) => {
                let convention = match l.convention {
                    TaperName::Precision => TaperConvention::Precision,
                    TaperName::Covariance => TaperConvention::Covariance,
                };
                let loc = Localization::new(l.half_width, l.taper_length)?.with_convention(convention);
                LetkfConfig::localized(self.ensemble.inflation, loc)
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Observation dimension seen by one analysis of `filter`.
    pub fn analysis_obs_dim(&self, filter: FilterKind) -> usize {
        let d_y = self.obs_dim();
        match (&self.ensemble.localization, filter.is_letkf()) {
            (Some(l), true) => 2 * l.half_width.min(d_y.saturating_sub(1) / 2) + 1,
            _ => d_y,
        }
    }

    pub fn dsm_spec(&self, filter: FilterKind) -> BenchResult<WeightKernelSpec> {
        let family = KernelFamily::from(self.kernel.family);
        let spec = if family == KernelFamily::Constant {
            WeightKernelSpec::constant()
        } else {
            let t = self
                .kernel
                .threshold
                .unwrap_or_else(|| default_threshold(self.analysis_obs_dim(filter), family));
            WeightKernelSpec::new(family, t)?
        };
        Ok(spec.with_standardization(self.kernel.standardization.into()))
    }

    pub fn wolf_spec(&self, filter: FilterKind) -> BenchResult<WolfSpec> {
        let c_sq = self
            .kernel
            .wolf_c_sq
            .unwrap_or(self.analysis_obs_dim(filter) as f64);
        Ok(WolfSpec::new(self.kernel.wolf_variant.into(), c_sq)?)
    }

    /// IMQ threshold of the particle filter potential.
    pub fn particle_q_sq(&self) -> f64 {
        self.kernel.threshold.unwrap_or(self.obs_dim() as f64)
    }

    pub fn resample_config(&self) -> ResampleConfig {
        ResampleConfig {
            threshold: self.particle.resample_threshold,
            scheme: match self.particle.scheme {
                SchemeName::Multinomial => ResampleScheme::Multinomial,
                SchemeName::Systematic => ResampleScheme::Systematic,
            },
        }
    }

    pub fn validate(&self) -> BenchResult<()> {
        let fail = |m: String| Err(BenchError::Config(m));
        if self.mc_reps < 1 {
            return fail("mc_reps must be at least 1".into());
        }
        if self.filters.is_empty() {
            return fail("filters must name at least one filter".into());
        }
        let mut seen = HashSet::new();
        for f in &self.filters {
            if !seen.insert(*f) {
                return fail(format!("filter `{}` listed twice", f.name()));
            }
            if f.is_kalman() && !self.model.is_linear() {
                return fail(format!(
                    "`{}` needs a linear model, `{}` is nonlinear",
                    f.name(),
                    self.model.name()
                ));
            }
            if f.is_letkf() && self.ensemble.localization.is_some() && self.obs_dim() != self.state_dim() {
                return fail(format!(
                    "localized `{}` needs every state variable observed; `{}` observes {} of {}",
                    f.name(),
                    self.model.name(),
                    self.obs_dim(),
                    self.state_dim()
                ));
            }
            if *f == FilterKind::DsmPf && self.kernel.family != FamilyName::Imq {
                return fail("`dsm_pf` supports the imq kernel only".into());
            }
        }
        if self.filters.iter().any(|f| f.is_ensemble()) && self.ensemble.size < 2 {
            return fail(format!("ensemble.size must be at least 2, got {}", self.ensemble.size));
        }
        if self.filters.contains(&FilterKind::DsmPf) {
            if self.particle.count < 2 {
                return fail(format!("particle.count must be at least 2, got {}", self.particle.count));
            }
            if !(0.0..=1.0).contains(&self.particle.resample_threshold) {
                return fail("particle.resample_threshold must lie in [0, 1]".into());
            }
        }
        self.contamination.spec()?;
        for e in &self.sweep.epsilons {
            ContaminationConfig { epsilon: *e, sqrt_lambda: 1.0 }.spec()?;
        }
        for s in &self.sweep.sqrt_lambdas {
            ContaminationConfig { epsilon: 0.0, sqrt_lambda: *s }.spec()?;
        }
        if self.sweep.sizes.windows(2).any(|w| w[1] <= w[0]) {
            return fail("sweep.sizes must be strictly increasing".into());
        }
        if self.sweep.sizes.iter().any(|&m| m < 2) {
            return fail("sweep.sizes must be at least 2".into());
        }
        let h = self.horizon();
        for (name, v) in [("t_end", h.t_end), ("dt", h.dt), ("t_out", h.t_out)] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("horizon.{name} must be positive, got {v}"));
            }
        }
        if h.burn_in < 0.0 {
            return fail("horizon.burn_in must be nonnegative".into());
        }
        if self.horizon.dim.is_some() && self.model != ModelKind::Lorenz96 {
            return fail("horizon.dim applies to lorenz96 only".into());
        }
        if self.model.is_linear() && (h.t_out - h.dt).abs() > 1e-12 {
            return fail("linear models observe every time step; horizon.t_out must equal dt".into());
        }
        for f in &self.filters {
            match f.variant() {
                Variant::Dsm if *f != FilterKind::DsmPf => {
                    self.dsm_spec(*f)?;
                }
                Variant::Wolf => {
                    self.wolf_spec(*f)?;
                }
                _ => {}
            }
            if f.is_letkf() {
                self.letkf_config()?;
            }
        }
        if let Some(t) = self.kernel.threshold {
            if !(t > 0.0 && t.is_finite()) {
                return fail(format!("kernel.threshold must be positive, got {t}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses() {
        for name in preset_names() {
            let cfg = ExperimentConfig::preset(name).unwrap();
            assert!(cfg.mc_reps >= 1, "{name}");
        }
    }

    #[test]
    fn lorenz96_letkf_thresholds_follow_the_window() {
        let cfg = ExperimentConfig::preset("lorenz96_desk").unwrap();
        assert_eq!(cfg.analysis_obs_dim(FilterKind::DsmLetkf), 39);
        assert_eq!(cfg.dsm_spec(FilterKind::DsmLetkf).unwrap().threshold(0), 39.0);
        assert_eq!(cfg.wolf_spec(FilterKind::WolfLetkf).unwrap().c_sq(), 39.0);
        assert!(cfg.diagonalize_qic());
    }

    #[test]
    fn incompatible_configs_are_rejected() {
        let bad = [
            "model = \"lorenz63\"\nfilters = [\"kf\"]",
            "model = \"ou\"\nfilters = [\"kf\"]\nmc_reps = 0",
            "model = \"ou\"\nfilters = []",
            "model = \"tracking2d\"\nfilters = [\"letkf\"]\n[ensemble.localization]\nhalf_width = 1\ntaper_length = 1.0",
            "model = \"ou\"\nfilters = [\"kf\", \"kf\"]",
        ];
        for text in bad {
            assert!(matches!(
                ExperimentConfig::from_toml_str(text, "test"),
                Err(BenchError::Config(_))
            ), "{text}");
        }
    }

    #[test]
    fn unknown_field_reports_its_line() {
        let text = "model = \"ou\"\nfilters = [\"kf\"]\n[kernel]\nfamilly = \"imq\"\n";
        match ExperimentConfig::from_toml_str(text, "x.toml") {
            Err(BenchError::Parse { message, .. }) => {
                assert!(message.contains("familly"), "{message}");
                assert!(message.contains("line 4"), "{message}");
            }
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_through_toml() {
        let cfg = ExperimentConfig::preset("lorenz96_full").unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml(), "round trip").unwrap();
        assert_eq!(cfg, again);
    }
}
