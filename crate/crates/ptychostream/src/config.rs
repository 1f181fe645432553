//! Plain-text experiment configuration: one `key = value` per line, `#`
//! comments, later lines override earlier ones, unknown keys rejected.
//! Together with the global seed a config fully determines every
//! experiment's outputs (wall-clock timing columns aside).

use crate::epie::EpieConfig;
use crate::simulator::{NoiseMode, ObjectStyle, ProbeSpec};
use crate::surrogate::TrainConfig;
use std::path::{Path, PathBuf};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {reason}")]
    BadValue { line: usize, key: String, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    // synthetic object
    pub object_height: usize,
    pub object_width: usize,
    pub object_style: ObjectStyle,
    pub a_min: f64,
    pub phi_max: f64,

    // probe / detector
    pub probe_window: usize,
    pub beam_fwhm: f64,
    pub inner_fraction: f64,
    pub phase_curvature: f64,
    pub photon_budget: f64,
    pub noise: NoiseMode,
    pub exposure_ms: f32,

    // scan
    pub scan_points: usize,
    pub scan_step: f64,
    pub n_scans: usize,

    // sweeps
    pub overlap_ratios: Vec<f64>,
    pub dose_factors_upscale: Vec<f64>,
    pub dose_factors_retrain: Vec<f64>,

    // surrogate training
    pub model_width: usize,
    pub train_epochs: usize,
    pub base_lr: f64,
    pub max_lr: f64,
    pub cycle_epochs: usize,
    pub train_batch: usize,

    // ePIE
    pub epie_iterations: usize,
    pub epie_alpha: f64,
    pub epie_beta: f64,
    pub probe_update_start: usize,

    // edge service
    pub batch_size: usize,
    pub flush_ms: u64,
    pub canvas_height: usize,
    pub canvas_width: usize,

    // orchestrator
    pub tolerance: f64,
    pub interval_s: u64,
    pub corpus_cap: usize,

    // benchmarks
    pub bench_runs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let probe = ProbeSpec::default();
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            object_height: 256,
            object_width: 256,
            object_style: ObjectStyle::RandomEtch,
            a_min: 1.0,
            phi_max: 1.0,
            probe_window: probe.window,
            beam_fwhm: probe.beam_fwhm,
            inner_fraction: probe.inner_fraction,
            phase_curvature: probe.phase_curvature,
            photon_budget: 1e6,
            noise: NoiseMode::Noiseless,
            exposure_ms: 1.0,
            scan_points: 200,
            scan_step: 4.0,
            n_scans: 3,
            overlap_ratios: vec![0.8, 0.6, 0.5, 0.4, 0.3, 0.2, 0.0],
            dose_factors_upscale: vec![10.0, 100.0],
            dose_factors_retrain: vec![10.0, 100.0, 1000.0, 10_000.0],
            // desk-scale width; DEFAULT_WIDTH replicates the published
            // parameter count but is CPU-hostile for repeated retrains
            model_width: 8,
            train_epochs: 30,
            base_lr: 1e-4,
            max_lr: 5e-4,
            cycle_epochs: 10,
            train_batch: 32,
            epie_iterations: 200,
            epie_alpha: 1.0,
            epie_beta: 1.0,
            probe_update_start: 5,
            batch_size: 8,
            flush_ms: 10,
            canvas_height: 256,
            canvas_width: 256,
            tolerance: 0.10,
            interval_s: 120,
            corpus_cap: 120_000,
            bench_runs: 50,
        }
    }
}

fn parse_field<T: std::str::FromStr>(
    line: usize,
    key: &str,
    value: &str,
) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        line,
        key: key.to_string(),
        reason: e.to_string(),
    })
}

fn parse_list(line: usize, key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    value
        .split(',')
        .map(|part| parse_field::<f64>(line, key, part.trim()))
        .collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) =
                body.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "seed" => config.seed = parse_field(line, key, value)?,
                "out_dir" => config.out_dir = PathBuf::from(value),
                "object_height" => config.object_height = parse_field(line, key, value)?,
                "object_width" => config.object_width = parse_field(line, key, value)?,
                "object_style" => {
                    config.object_style = match value {
                        "random-etch" => ObjectStyle::RandomEtch,
                        "letters" => ObjectStyle::Letters,
                        "mixed" => ObjectStyle::Mixed,
                        other => {
                            return Err(ConfigError::BadValue {
                                line,
                                key: key.to_string(),
                                reason: format!(
                                    "`{other}` is not one of random-etch|letters|mixed"
                                ),
                            })
                        }
                    }
                }
                "a_min" => config.a_min = parse_field(line, key, value)?,
                "phi_max" => config.phi_max = parse_field(line, key, value)?,
                "probe_window" => config.probe_window = parse_field(line, key, value)?,
                "beam_fwhm" => config.beam_fwhm = parse_field(line, key, value)?,
                "inner_fraction" => config.inner_fraction = parse_field(line, key, value)?,
                "phase_curvature" => config.phase_curvature = parse_field(line, key, value)?,
                "photon_budget" => config.photon_budget = parse_field(line, key, value)?,
                "noise" => {
                    config.noise = match value {
                        "noiseless" => NoiseMode::Noiseless,
                        "poisson" => NoiseMode::Poisson,
                        other => {
                            return Err(ConfigError::BadValue {
                                line,
                                key: key.to_string(),
                                reason: format!("`{other}` is not one of noiseless|poisson"),
                            })
                        }
                    }
                }
                "exposure_ms" => config.exposure_ms = parse_field(line, key, value)?,
                "scan_points" => config.scan_points = parse_field(line, key, value)?,
                "scan_step" => config.scan_step = parse_field(line, key, value)?,
                "n_scans" => config.n_scans = parse_field(line, key, value)?,
                "overlap_ratios" => config.overlap_ratios = parse_list(line, key, value)?,
                "dose_factors_upscale" => {
                    config.dose_factors_upscale = parse_list(line, key, value)?
                }
                "dose_factors_retrain" => {
                    config.dose_factors_retrain = parse_list(line, key, value)?
                }
                "model_width" => config.model_width = parse_field(line, key, value)?,
                "train_epochs" => config.train_epochs = parse_field(line, key, value)?,
                "base_lr" => config.base_lr = parse_field(line, key, value)?,
                "max_lr" => config.max_lr = parse_field(line, key, value)?,
                "cycle_epochs" => config.cycle_epochs = parse_field(line, key, value)?,
                "train_batch" => config.train_batch = parse_field(line, key, value)?,
                "epie_iterations" => config.epie_iterations = parse_field(line, key, value)?,
                "epie_alpha" => config.epie_alpha = parse_field(line, key, value)?,
                "epie_beta" => config.epie_beta = parse_field(line, key, value)?,
                "probe_update_start" => {
                    config.probe_update_start = parse_field(line, key, value)?
                }
                "batch_size" => config.batch_size = parse_field(line, key, value)?,
                "flush_ms" => config.flush_ms = parse_field(line, key, value)?,
                "canvas_height" => config.canvas_height = parse_field(line, key, value)?,
                "canvas_width" => config.canvas_width = parse_field(line, key, value)?,
                "tolerance" => config.tolerance = parse_field(line, key, value)?,
                "interval_s" => config.interval_s = parse_field(line, key, value)?,
                "corpus_cap" => config.corpus_cap = parse_field(line, key, value)?,
                "bench_runs" => config.bench_runs = parse_field(line, key, value)?,
                _ => {
                    return Err(ConfigError::UnknownKey { line, key: key.to_string() })
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ConfigError::Io(e.to_string()))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |what: &str| Err(ConfigError::Invalid(what.to_string()));
        if self.scan_points == 0 || self.n_scans == 0 {
            return bad("scan_points and n_scans must be >= 1");
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return bad("tolerance must be in (0, 1)");
        }
        if !(self.scan_step > 0.0) {
            return bad("scan_step must be positive");
        }
        if !(self.photon_budget > 0.0) {
            return bad("photon_budget must be positive");
        }
        if self.probe_window == 0 || self.probe_window % 8 != 0 {
            return bad("probe_window must be a positive multiple of 8");
        }
        if self.overlap_ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
            return bad("overlap_ratios must lie in [0, 1)");
        }
        if self.dose_factors_upscale.iter().chain(&self.dose_factors_retrain).any(|f| *f < 1.0) {
            return bad("dose factors must be >= 1");
        }
        if self.bench_runs == 0 {
            return bad("bench_runs must be >= 1");
        }
        Ok(())
    }

    pub fn probe_spec(&self) -> ProbeSpec {
        ProbeSpec {
            window: self.probe_window,
            beam_fwhm: self.beam_fwhm,
            inner_fraction: self.inner_fraction,
            phase_curvature: self.phase_curvature,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train_epochs,
            base_lr: self.base_lr,
            max_lr: self.max_lr,
            cycle_length_epochs: self.cycle_epochs,
            batch_size: self.train_batch,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn epie_config(&self) -> EpieConfig {
        EpieConfig {
            alpha: self.epie_alpha,
            beta: self.epie_beta,
            n_iterations: self.epie_iterations,
            probe_update_start: self.probe_update_start,
            shuffle_seed: self.seed,
            ..EpieConfig::default()
        }
    }

    pub fn flush_timeout(&self) -> Duration {
        Duration::from_millis(self.flush_ms)
    }

    /// Spiral step that realizes a target overlap ratio 1 - S/B.
    pub fn step_for_overlap(&self, ratio: f64) -> f64 {
        (1.0 - ratio) * self.beam_fwhm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_all_defaults() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
        assert_eq!(
            ExperimentConfig::parse("# only a comment\n\n  \n").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn known_keys_land_in_their_fields() {
        let text = "
            seed = 42            # trailing comment
            out_dir = /tmp/run
            object_height=128
            object_width =128
            object_style = mixed
            noise = poisson
            overlap_ratios = 0.8, 0.4, 0.0
            dose_factors_retrain = 10,1000
            scan_step = 2.5
            flush_ms = 25
        ";
        let config = ExperimentConfig::parse(text).unwrap();
        assert_eq!(config.seed, 42);
        assert_eq!(config.out_dir, PathBuf::from("/tmp/run"));
        assert_eq!(config.object_height, 128);
        assert_eq!(config.object_style, ObjectStyle::Mixed);
        assert_eq!(config.noise, NoiseMode::Poisson);
        assert_eq!(config.overlap_ratios, vec![0.8, 0.4, 0.0]);
        assert_eq!(config.dose_factors_retrain, vec![10.0, 1000.0]);
        assert_eq!(config.scan_step, 2.5);
        assert_eq!(config.flush_timeout(), Duration::from_millis(25));
        // untouched keys keep defaults
        assert_eq!(config.scan_points, 200);
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_line() {
        let err = ExperimentConfig::parse("seed = 1\nphoton_bugdet = 5\n").unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownKey { line: 2, key: "photon_bugdet".to_string() }
        );
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = ExperimentConfig::parse("scan_points = many").unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { line: 1, ref key, .. } if key == "scan_points"));
        let err = ExperimentConfig::parse("noise = gaussian").unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { ref key, .. } if key == "noise"));
        let err = ExperimentConfig::parse("just a line").unwrap_err();
        assert_eq!(err, ConfigError::Syntax { line: 1 });
    }

    #[test]
    fn later_lines_override_earlier_ones() {
        let config = ExperimentConfig::parse("seed = 1\nseed = 2\n").unwrap();
        assert_eq!(config.seed, 2);
    }

    #[test]
    fn cross_field_validation_catches_nonsense() {
        assert!(matches!(
            ExperimentConfig::parse("tolerance = 1.5"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("probe_window = 30"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("overlap_ratios = 1.0"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("dose_factors_upscale = 0.5"),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn derived_views_carry_the_fields_over() {
        let config =
            ExperimentConfig::parse("beam_fwhm = 10\ntrain_epochs = 7\nepie_alpha = 0.9\nseed = 3")
                .unwrap();
        assert_eq!(config.probe_spec().beam_fwhm, 10.0);
        assert_eq!(config.train_config().epochs, 7);
        assert_eq!(config.train_config().seed, 3);
        assert_eq!(config.epie_config().alpha, 0.9);
        assert_eq!(config.epie_config().shuffle_seed, 3);
        assert!((config.step_for_overlap(0.8) - 2.0).abs() < 1e-12);
        assert_eq!(config.step_for_overlap(0.0), 10.0);
    }

    #[test]
    fn files_load_like_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.conf");
        std::fs::write(&path, "seed = 9\n").unwrap();
        assert_eq!(ExperimentConfig::load(&path).unwrap().seed, 9);
        assert!(matches!(
            ExperimentConfig::load(&dir.path().join("missing.conf")),
            Err(ConfigError::Io(_))
        ));
    }
}
