//! Declarative run configuration for the end-to-end pipeline.
//!
//! A config is one TOML document with every knob spelled out. There are no
//! per-field defaults at this layer: a file either describes a complete run
//! or it is rejected, so the resolved copy written next to each artifact
//! directory is the whole story. Presets cover the common shapes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::armask::MaskMode;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown preset {0:?}, expected tiny, base, large, or huge")]
    UnknownPreset(String),
    #[error("unknown mask mode {0:?}, expected scale_time, time, or scale")]
    BadMaskMode(String),
}

/// Run identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Master seed; every stage derives its own streams from it.
    pub seed: u64,
}

/// Synthetic corpus shape. `montage` must be a built-in montage id; labels
/// cycle through the classes so splits stay balanced when counts divide
/// evenly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub montage: String,
    pub n_segments: usize,
    /// Recording rate in Hz before preprocessing resamples to 200.
    pub rate: f64,
    pub duration_s: f64,
    pub n_classes: u32,
    pub global_rhythm_hz: f64,
    /// One rhythm per scale-2 region, in region order.
    pub region_rhythms_hz: Vec<f64>,
    /// Signal-to-noise in dB; `inf` disables the noise floor.
    pub snr_db: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

/// Filtering and windowing. The band edges, notch shape, and 200 Hz target
/// rate are fixed properties of the preprocessing stage; only the mains
/// frequency and the patch grid vary per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSection {
    /// Mains frequency to notch out: 50 or 60.
    pub line_hz: f64,
    /// Window length in samples at 200 Hz.
    pub window: usize,
    /// Patch length in samples; must divide `window`.
    pub patch: usize,
}

/// Spatial hierarchy and sequence layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchySection {
    /// Built-in scheme name, or a path to a scheme file.
    pub scheme: String,
    /// Scales to tokenize, coarse to fine, 1-based.
    pub scales: Vec<usize>,
    /// `scale_time`, `time`, or `scale`.
    pub mask_mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    pub vocab: usize,
    pub code_dim: usize,
    pub hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub mlp: usize,
    pub epochs: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub domain_branch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArSection {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp: usize,
    /// Text vocabulary size reserved next to the EEG tokens; at least 95 so
    /// every printable ASCII character has an id.
    pub v_text: usize,
    pub epochs: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructSection {
    pub epochs: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    /// Warmup as a fraction of total steps, in [0, 1].
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub clip: f64,
}

/// Complete description of one pipeline run. Unknown keys anywhere in the
/// document are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub preprocess: PreprocessSection,
    pub hierarchy: HierarchySection,
    pub tokenizer: TokenizerSection,
    pub ar: ArSection,
    pub instruct: InstructSection,
}

pub fn parse_mask_mode(s: &str) -> Result<MaskMode, ConfigError> {
    match s {
        "scale_time" => Ok(MaskMode::ScaleTimeWise),
        "time" => Ok(MaskMode::TimeWise),
        "scale" => Ok(MaskMode::ScaleWise),
        other => Err(ConfigError::BadMaskMode(other.to_string())),
    }
}

pub fn mask_mode_name(mode: MaskMode) -> &'static str {
    match mode {
        MaskMode::ScaleTimeWise => "scale_time",
        MaskMode::TimeWise => "time",
        MaskMode::ScaleWise => "scale",
    }
}

impl RunConfig {
    /// Number of patches per window.
    pub fn t_len(&self) -> usize {
        self.preprocess.window / self.preprocess.patch
    }

    /// Segment counts per split, train first. Train takes the remainder.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.data.n_segments;
        let n_val = (n as f64 * self.data.val_fraction).round() as usize;
        let n_test = (n as f64 * self.data.test_fraction).round() as usize;
        (n.saturating_sub(n_val + n_test), n_val, n_test)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.run.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));

        let d = &self.data;
        if d.montage.is_empty() {
            return fail("data.montage: empty".into());
        }
        if d.n_segments == 0 {
            return fail("data.n_segments: need at least one segment".into());
        }
        if !(d.rate > 0.0) || !d.rate.is_finite() {
            return fail(format!("data.rate: {} Hz is not positive", d.rate));
        }
        if !(d.duration_s > 0.0) || !d.duration_s.is_finite() {
            return fail(format!("data.duration_s: {} is not positive", d.duration_s));
        }
        if d.n_classes < 2 {
            return fail("data.n_classes: classification needs at least 2 classes".into());
        }
        if d.region_rhythms_hz.is_empty() {
            return fail("data.region_rhythms_hz: empty".into());
        }
        if d.region_rhythms_hz.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
            return fail("data.region_rhythms_hz: rhythms must be positive".into());
        }
        if !(d.global_rhythm_hz > 0.0) || !d.global_rhythm_hz.is_finite() {
            return fail(format!(
                "data.global_rhythm_hz: {} is not positive",
                d.global_rhythm_hz
            ));
        }
        if d.snr_db.is_nan() {
            return fail("data.snr_db: NaN".into());
        }
        for (name, f) in [
            ("val_fraction", d.val_fraction),
            ("test_fraction", d.test_fraction),
        ] {
            if !(0.0..1.0).contains(&f) {
                return fail(format!("data.{name}: {f} outside [0, 1)"));
            }
        }
        let (n_train, n_val, n_test) = self.split_counts();
        if n_train == 0 || n_val == 0 || n_test == 0 {
            return fail(format!(
                "data splits: {n_train} train / {n_val} val / {n_test} test, every split needs a segment"
            ));
        }

        let p = &self.preprocess;
        if p.line_hz != 50.0 && p.line_hz != 60.0 {
            return fail(format!("preprocess.line_hz: {} is not 50 or 60", p.line_hz));
        }
        if p.patch == 0 || p.window == 0 {
            return fail("preprocess: window and patch must be positive".into());
        }
        if p.window % p.patch != 0 {
            return fail(format!(
                "preprocess.window: {} is not a multiple of patch {}",
                p.window, p.patch
            ));
        }
        let samples_at_200 = (d.duration_s * crate::dsp::TARGET_RATE).round() as usize;
        if samples_at_200 < p.window {
            return fail(format!(
                "preprocess.window: {} samples but segments resample to only {samples_at_200}",
                p.window
            ));
        }

        let h = &self.hierarchy;
        if h.scheme.is_empty() {
            return fail("hierarchy.scheme: empty".into());
        }
        if h.scales.is_empty() {
            return fail("hierarchy.scales: empty".into());
        }
        if h.scales[0] == 0 {
            return fail("hierarchy.scales: scales are 1-based".into());
        }
        if h.scales.windows(2).any(|w| w[0] >= w[1]) {
            return fail("hierarchy.scales: must be strictly increasing".into());
        }
        parse_mask_mode(&h.mask_mode)?;

        let t = &self.tokenizer;
        if t.vocab < 2 {
            return fail("tokenizer.vocab: need at least 2 codes".into());
        }
        if t.vocab > u16::MAX as usize {
            return fail(format!(
                "tokenizer.vocab: {} exceeds the 16-bit token id range",
                t.vocab
            ));
        }
        if t.code_dim == 0 || t.hidden == 0 || t.mlp == 0 {
            return fail("tokenizer: code_dim, hidden, and mlp must be positive".into());
        }
        if t.enc_layers == 0 || t.dec_layers == 0 {
            return fail("tokenizer: need at least one encoder and one decoder layer".into());
        }
        if t.heads == 0 || t.hidden % t.heads != 0 {
            return fail(format!(
                "tokenizer.heads: {} must divide hidden {}",
                t.heads, t.hidden
            ));
        }
        check_optim(
            "tokenizer",
            t.epochs,
            t.batch,
            t.peak_lr,
            t.min_lr,
            t.weight_decay,
            0.0,
        )?;
        if t.warmup_epochs > t.epochs {
            return fail(format!(
                "tokenizer.warmup_epochs: {} exceeds epochs {}",
                t.warmup_epochs, t.epochs
            ));
        }

        let a = &self.ar;
        if a.dim == 0 || a.mlp == 0 || a.layers == 0 {
            return fail("ar: dim, mlp, and layers must be positive".into());
        }
        if a.heads == 0 || a.dim % a.heads != 0 {
            return fail(format!("ar.heads: {} must divide dim {}", a.heads, a.dim));
        }
        if a.v_text < crate::instruct::TEXT_CHARS {
            return fail(format!(
                "ar.v_text: {} cannot cover the {} printable ASCII characters",
                a.v_text,
                crate::instruct::TEXT_CHARS
            ));
        }
        check_optim("ar", a.epochs, a.batch, a.peak_lr, a.min_lr, a.weight_decay, a.clip)?;
        if a.warmup_epochs > a.epochs {
            return fail(format!(
                "ar.warmup_epochs: {} exceeds epochs {}",
                a.warmup_epochs, a.epochs
            ));
        }

        let i = &self.instruct;
        check_optim(
            "instruct",
            i.epochs,
            i.batch,
            i.peak_lr,
            i.min_lr,
            i.weight_decay,
            i.clip,
        )?;
        if !(0.0..=1.0).contains(&i.warmup_ratio) {
            return fail(format!(
                "instruct.warmup_ratio: {} outside [0, 1]",
                i.warmup_ratio
            ));
        }
        Ok(())
    }
}

fn check_optim(
    section: &str,
    epochs: usize,
    batch: usize,
    peak_lr: f64,
    min_lr: f64,
    weight_decay: f64,
    clip: f64,
) -> Result<(), ConfigError> {
    if epochs == 0 || batch == 0 {
        return Err(ConfigError::Invalid(format!(
            "{section}: epochs and batch must be positive"
        )));
    }
    if !(peak_lr > 0.0) || !(min_lr > 0.0) {
        return Err(ConfigError::Invalid(format!(
            "{section}: learning rates must be positive"
        )));
    }
    if min_lr > peak_lr {
        return Err(ConfigError::Invalid(format!(
            "{section}: min_lr {min_lr} exceeds peak_lr {peak_lr}"
        )));
    }
    if weight_decay < 0.0 || clip < 0.0 {
        return Err(ConfigError::Invalid(format!(
            "{section}: weight_decay and clip must be non-negative"
        )));
    }
    Ok(())
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    let cfg: RunConfig = toml::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(cfg: &RunConfig, path: &Path) -> Result<(), ConfigError> {
    let text = toml::to_string_pretty(cfg)?;
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Tiny,
    Base,
    Large,
    Huge,
}

impl Preset {
    pub fn all() -> [Preset; 4] {
        [Preset::Tiny, Preset::Base, Preset::Large, Preset::Huge]
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::Base => "base",
            Preset::Large => "large",
            Preset::Huge => "huge",
        }
    }

    pub fn config(self) -> RunConfig {
        match self {
            Preset::Tiny => tiny(),
            Preset::Base => sized(768, 12, 12, 3072, 480, 5e-4, 5e-5, 5),
            Preset::Large => sized(1024, 24, 16, 4096, 512, 5e-5, 5e-6, 5),
            Preset::Huge => sized(1600, 48, 25, 6400, 512, 2e-5, 2e-6, 3),
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "base" => Ok(Preset::Base),
            "large" => Ok(Preset::Large),
            "huge" => Ok(Preset::Huge),
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }
}

/// Desk-scale preset: the whole chain runs in minutes on one core. Segments
/// resample to exactly one clean 2 s window; the fine-tuning rates stay well
/// under the pretraining peak because the joint attention otherwise learns
/// the constant answer tokens first and stops reading the signal keys.
fn tiny() -> RunConfig {
    RunConfig {
        run: RunSection { seed: 7 },
        data: DataSection {
            montage: "test12".into(),
            n_segments: 24,
            rate: 256.0,
            duration_s: 2.0,
            n_classes: 3,
            global_rhythm_hz: 2.0,
            region_rhythms_hz: vec![6.0, 10.0, 14.0],
            snr_db: 10.0,
            val_fraction: 0.25,
            test_fraction: 0.25,
        },
        preprocess: PreprocessSection {
            line_hz: 50.0,
            window: 400,
            patch: 100,
        },
        hierarchy: HierarchySection {
            scheme: "test12-3".into(),
            scales: vec![1, 2, 3],
            mask_mode: "scale_time".into(),
        },
        tokenizer: TokenizerSection {
            vocab: 64,
            code_dim: 16,
            hidden: 32,
            enc_layers: 2,
            dec_layers: 1,
            heads: 4,
            mlp: 64,
            epochs: 30,
            batch: 8,
            peak_lr: 1e-3,
            min_lr: 1e-4,
            warmup_epochs: 3,
            weight_decay: 0.01,
            domain_branch: false,
        },
        ar: ArSection {
            dim: 16,
            layers: 1,
            heads: 4,
            mlp: 32,
            v_text: 95,
            epochs: 30,
            batch: 8,
            peak_lr: 2e-3,
            min_lr: 2e-4,
            warmup_epochs: 3,
            weight_decay: 0.01,
            clip: 1.0,
        },
        instruct: InstructSection {
            epochs: 40,
            batch: 8,
            peak_lr: 2e-3,
            min_lr: 2e-4,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            clip: 1.0,
        },
    }
}

/// Full-size presets share the tokenizer and data shape and differ in the
/// sequence model column: width, depth, heads, MLP, batch, and the
/// fine-tuning rates.
#[allow(clippy::too_many_arguments)]
fn sized(
    dim: usize,
    layers: usize,
    heads: usize,
    mlp: usize,
    batch: usize,
    ft_peak: f64,
    ft_min: f64,
    ft_epochs: usize,
) -> RunConfig {
    RunConfig {
        run: RunSection { seed: 7 },
        data: DataSection {
            montage: "seed62".into(),
            n_segments: 256,
            rate: 200.0,
            duration_s: 8.0,
            n_classes: 3,
            global_rhythm_hz: 10.0,
            region_rhythms_hz: vec![4.0, 6.0, 8.0],
            snr_db: 5.0,
            val_fraction: 0.125,
            test_fraction: 0.125,
        },
        preprocess: PreprocessSection {
            line_hz: 50.0,
            window: 1600,
            patch: 100,
        },
        hierarchy: HierarchySection {
            scheme: "seed62-5".into(),
            scales: vec![1, 2, 3, 4, 5],
            mask_mode: "scale_time".into(),
        },
        tokenizer: TokenizerSection {
            vocab: 8192,
            code_dim: 128,
            hidden: 768,
            enc_layers: 12,
            dec_layers: 3,
            heads: 12,
            mlp: 3072,
            epochs: 50,
            batch: 512,
            peak_lr: 5e-5,
            min_lr: 1e-5,
            warmup_epochs: 5,
            weight_decay: 1e-4,
            domain_branch: true,
        },
        ar: ArSection {
            dim,
            layers,
            heads,
            mlp,
            v_text: 95,
            epochs: 20,
            batch,
            peak_lr: 6e-4,
            min_lr: 6e-5,
            warmup_epochs: 2,
            weight_decay: 0.1,
            clip: 1.0,
        },
        instruct: InstructSection {
            epochs: ft_epochs,
            batch: 512,
            peak_lr: ft_peak,
            min_lr: ft_min,
            warmup_ratio: 0.1,
            weight_decay: 0.1,
            clip: 1.0,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip_through_toml() {
        for preset in Preset::all() {
            let cfg = preset.config();
            cfg.validate()
                .unwrap_or_else(|e| panic!("{} preset invalid: {e}", preset.name()));
            let text = toml::to_string_pretty(&cfg).unwrap();
            let back: RunConfig = toml::from_str(&text).unwrap();
            assert_eq!(back, cfg, "{} preset does not round trip", preset.name());
        }
        assert_eq!("tiny".parse::<Preset>().unwrap(), Preset::Tiny);
        assert_eq!("huge".parse::<Preset>().unwrap(), Preset::Huge);
        assert!(matches!(
            "gigantic".parse::<Preset>(),
            Err(ConfigError::UnknownPreset(_))
        ));
    }

    #[test]
    fn unknown_and_missing_keys_are_rejected() {
        let good = toml::to_string_pretty(&Preset::Tiny.config()).unwrap();
        assert!(toml::from_str::<RunConfig>(&good).is_ok());

        let with_typo = good.replace("[data]", "[data]\nn_segmens = 3");
        let err = toml::from_str::<RunConfig>(&with_typo).unwrap_err();
        assert!(err.to_string().contains("n_segmens"), "got: {err}");

        let with_extra_table = format!("{good}\n[experiment]\nname = \"x\"\n");
        assert!(toml::from_str::<RunConfig>(&with_extra_table).is_err());

        let missing = good.replace("n_classes = 3\n", "");
        let err = toml::from_str::<RunConfig>(&missing).unwrap_err();
        assert!(err.to_string().contains("n_classes"), "got: {err}");
    }

    #[test]
    fn mask_mode_names_round_trip() {
        for mode in [
            MaskMode::ScaleTimeWise,
            MaskMode::TimeWise,
            MaskMode::ScaleWise,
        ] {
            assert_eq!(parse_mask_mode(mask_mode_name(mode)).unwrap(), mode);
        }
        assert!(matches!(
            parse_mask_mode("diagonal"),
            Err(ConfigError::BadMaskMode(_))
        ));
    }

    #[test]
    fn validation_catches_cross_field_mistakes() {
        let complain = |mutate: fn(&mut RunConfig), needle: &str| {
            let mut cfg = Preset::Tiny.config();
            mutate(&mut cfg);
            let err = cfg.validate().unwrap_err();
            let msg = err.to_string();
            assert!(msg.contains(needle), "expected {needle:?} in: {msg}");
        };
        complain(|c| c.preprocess.patch = 300, "multiple of patch");
        complain(|c| c.preprocess.line_hz = 55.0, "not 50 or 60");
        complain(|c| c.data.duration_s = 0.5, "resample to only");
        complain(|c| c.data.val_fraction = 0.9, "every split needs a segment");
        complain(|c| c.data.n_classes = 1, "at least 2 classes");
        complain(|c| c.tokenizer.heads = 5, "must divide hidden");
        complain(|c| c.tokenizer.min_lr = 1.0, "exceeds peak_lr");
        complain(|c| c.tokenizer.vocab = 100_000, "16-bit token id range");
        complain(|c| c.ar.heads = 3, "must divide dim");
        complain(|c| c.ar.v_text = 10, "printable ASCII");
        complain(|c| c.ar.warmup_epochs = 99, "exceeds epochs");
        complain(|c| c.instruct.warmup_ratio = 1.5, "outside [0, 1]");
        complain(|c| c.hierarchy.scales = vec![2, 2], "strictly increasing");
        complain(|c| c.hierarchy.scales = vec![0, 1], "1-based");

        let mut cfg = Preset::Tiny.config();
        cfg.hierarchy.mask_mode = "sideways".into();
        assert!(matches!(
            cfg.validate(),
            Err(ConfigError::BadMaskMode(_))
        ));
    }

    #[test]
    fn disk_round_trip_and_seed_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let cfg = Preset::Tiny.config().with_seed(Some(99));
        assert_eq!(cfg.run.seed, 99);
        save_config(&cfg, &path).unwrap();
        let back = load_config(&path).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.with_seed(None).run.seed, 99);

        assert!(matches!(
            load_config(&dir.path().join("absent.toml")),
            Err(ConfigError::Io(_))
        ));
        std::fs::write(&path, "not = [valid").unwrap();
        assert!(matches!(load_config(&path), Err(ConfigError::Parse(_))));

        let mut broken = Preset::Tiny.config();
        broken.tokenizer.batch = 0;
        save_config(&broken, &path).unwrap();
        assert!(matches!(load_config(&path), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn split_counts_take_the_rounded_fractions() {
        let cfg = Preset::Tiny.config();
        assert_eq!(cfg.split_counts(), (12, 6, 6));
        assert_eq!(cfg.t_len(), 4);
        let (tr, va, te) = Preset::Base.config().split_counts();
        assert_eq!(tr + va + te, 256);
        assert_eq!(va, 32);
    }
}
