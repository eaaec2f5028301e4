//! Segment file I/O, dataset manifests, montages, and synthetic EEG.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bth;
use crate::nn::StreamRng;

const MAGIC: &[u8; 4] = b"EEGS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 64;
/// Fixed header fields end here; the montage id string lives in the padding.
const ID_OFFSET: usize = 28;

#[derive(Debug, thiserror::Error)]
pub enum SignalError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unknown format version {0}")]
    UnknownVersion(u32),
    #[error("dimension mismatch: header promises {expected} payload bytes, file holds {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("montage id {0:?} exceeds the header capacity of {1} bytes")]
    MontageIdTooLong(String, usize),
    #[error("unknown montage {0:?}")]
    UnknownMontage(String),
    #[error("segment invalid: {0}")]
    InvalidSegment(String),
    #[error("synthetic config invalid: {0}")]
    InvalidConfig(String),
    #[error("manifest line {line}: {reason}")]
    ManifestParse { line: usize, reason: String },
    #[error("manifest path {0:?} appears in more than one split")]
    ManifestOverlap(PathBuf),
    #[error("manifest path {0:?} does not resolve to a file")]
    ManifestUnresolvable(PathBuf),
    #[error(transparent)]
    Hierarchy(#[from] bth::BthError),
}

/// Electrode layout: an identifier plus a canonical channel order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MontageSpec {
    pub montage_id: String,
    pub channel_names: Vec<String>,
}

impl MontageSpec {
    pub fn new(montage_id: &str, channel_names: &[&str]) -> Self {
        let m = MontageSpec {
            montage_id: montage_id.to_string(),
            channel_names: channel_names.iter().map(|s| s.to_string()).collect(),
        };
        m.validate().expect("builtin montage must be valid");
        m
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if self.channel_names.is_empty() {
            return Err(SignalError::InvalidSegment("montage has no channels".into()));
        }
        let unique: BTreeSet<&str> = self.channel_names.iter().map(|s| s.as_str()).collect();
        if unique.len() != self.channel_names.len() {
            return Err(SignalError::InvalidSegment(
                "montage channel names not unique".into(),
            ));
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|n| n == name)
    }
}

/// The 62-channel layout, front to back, left to right within each row.
const SEED62_CHANNELS: [&str; 62] = [
    "FP1", "FPZ", "FP2", "AF3", "AF4", "F7", "F5", "F3", "F1", "FZ", "F2", "F4", "F6", "F8",
    "FT7", "FC5", "FC3", "FC1", "FCZ", "FC2", "FC4", "FC6", "FT8", "T7", "C5", "C3", "C1", "CZ",
    "C2", "C4", "C6", "T8", "TP7", "CP5", "CP3", "CP1", "CPZ", "CP2", "CP4", "CP6", "TP8", "P7",
    "P5", "P3", "P1", "PZ", "P2", "P4", "P6", "P8", "PO7", "PO5", "PO3", "POZ", "PO4", "PO6",
    "PO8", "CB1", "O1", "OZ", "O2", "CB2",
];

/// Built-in montages by id.
pub fn builtin_montage(id: &str) -> Option<MontageSpec> {
    match id {
        "seed62" => Some(MontageSpec::new("seed62", &SEED62_CHANNELS)),
        "test8" => Some(MontageSpec::new(
            "test8",
            &["F3", "F4", "C3", "C4", "P3", "P4", "O1", "O2"],
        )),
        "test12" => Some(MontageSpec::new(
            "test12",
            &[
                "F1", "F2", "F3", "F4", "C1", "C2", "C3", "C4", "P1", "P2", "P3", "P4",
            ],
        )),
        _ => None,
    }
}

/// One recording window: channel-major sample matrix in microvolts.
#[derive(Debug, Clone, PartialEq)]
pub struct EegSegment {
    pub montage_id: String,
    pub rate: f64,
    pub n_channels: usize,
    pub n_samples: usize,
    /// `[n_channels * n_samples]`, channel-major.
    pub data: Vec<f64>,
    pub label: Option<u32>,
}

impl EegSegment {
    pub fn new(
        montage_id: &str,
        rate: f64,
        n_channels: usize,
        n_samples: usize,
        data: Vec<f64>,
    ) -> Result<Self, SignalError> {
        let seg = EegSegment {
            montage_id: montage_id.to_string(),
            rate,
            n_channels,
            n_samples,
            data,
            label: None,
        };
        seg.validate()?;
        Ok(seg)
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if self.data.len() != self.n_channels * self.n_samples {
            return Err(SignalError::InvalidSegment(format!(
                "data length {} != {} channels x {} samples",
                self.data.len(),
                self.n_channels,
                self.n_samples
            )));
        }
        if !(self.rate > 0.0) {
            return Err(SignalError::InvalidSegment(format!(
                "rate {} not positive",
                self.rate
            )));
        }
        if let Some(bad) = self.data.iter().find(|v| !v.is_finite()) {
            return Err(SignalError::InvalidSegment(format!(
                "non-finite sample {bad}"
            )));
        }
        Ok(())
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.n_samples..(c + 1) * self.n_samples]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.n_samples..(c + 1) * self.n_samples]
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Writes the fixed 64-byte header followed by f32 little-endian samples,
/// channel-major. Sample values are rounded to f32; segments produced by this
/// crate are already f32-representable, so round trips are bit-exact.
pub fn write_segment(seg: &EegSegment, path: &Path) -> Result<(), SignalError> {
    seg.validate()?;
    let id = seg.montage_id.as_bytes();
    if id.len() > HEADER_LEN - ID_OFFSET - 1 {
        return Err(SignalError::MontageIdTooLong(
            seg.montage_id.clone(),
            HEADER_LEN - ID_OFFSET - 1,
        ));
    }
    let mut header = [0u8; HEADER_LEN];
    header[0..4].copy_from_slice(MAGIC);
    header[4..8].copy_from_slice(&VERSION.to_le_bytes());
    header[8..16].copy_from_slice(&fnv1a64(id).to_le_bytes());
    header[16..20].copy_from_slice(&(seg.n_channels as u32).to_le_bytes());
    header[20..24].copy_from_slice(&(seg.n_samples as u32).to_le_bytes());
    header[24..28].copy_from_slice(&(seg.rate as f32).to_le_bytes());
    header[ID_OFFSET] = id.len() as u8;
    header[ID_OFFSET + 1..ID_OFFSET + 1 + id.len()].copy_from_slice(id);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&header)?;
    for &v in &seg.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_segment(path: &Path) -> Result<EegSegment, SignalError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header).map_err(|_| {
        SignalError::MalformedHeader("file shorter than the 64-byte header".into())
    })?;
    if &header[0..4] != MAGIC {
        return Err(SignalError::MalformedHeader("bad magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(SignalError::UnknownVersion(version));
    }
    let id_hash = u64::from_le_bytes(header[8..16].try_into().unwrap());
    let n_channels = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
    let n_samples = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
    let rate = f32::from_le_bytes(header[24..28].try_into().unwrap()) as f64;
    let id_len = header[ID_OFFSET] as usize;
    if ID_OFFSET + 1 + id_len > HEADER_LEN {
        return Err(SignalError::MalformedHeader("montage id overruns header".into()));
    }
    let montage_id =
        String::from_utf8(header[ID_OFFSET + 1..ID_OFFSET + 1 + id_len].to_vec())
            .map_err(|_| SignalError::MalformedHeader("montage id not utf-8".into()))?;
    if fnv1a64(montage_id.as_bytes()) != id_hash {
        return Err(SignalError::MalformedHeader(
            "montage id hash does not match".into(),
        ));
    }
    let expected = n_channels * n_samples * 4;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(SignalError::DimensionMismatch {
            expected,
            found: payload.len(),
        });
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let mut seg = EegSegment::new(&montage_id, rate, n_channels, n_samples, data)?;
    seg.label = None;
    Ok(seg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: u32,
    pub split: Split,
}

/// Line-oriented dataset index: `path<TAB>label<TAB>split`.
#[derive(Debug, Clone, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn push(&mut self, path: PathBuf, label: u32, split: Split) {
        self.entries.push(ManifestEntry { path, label, split });
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Every path must belong to exactly one split.
    pub fn validate(&self) -> Result<(), SignalError> {
        let mut seen: BTreeSet<&Path> = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.path.as_path()) {
                return Err(SignalError::ManifestOverlap(e.path.clone()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), SignalError> {
        self.validate()?;
        let mut w = BufWriter::new(File::create(path)?);
        for e in &self.entries {
            writeln!(
                w,
                "{}\t{}\t{}",
                e.path.display(),
                e.label,
                e.split.as_str()
            )?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads and validates; relative paths are resolved against the manifest
    /// directory and must exist.
    pub fn load(path: &Path) -> Result<DatasetManifest, SignalError> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut manifest = DatasetManifest::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(SignalError::ManifestParse {
                    line: i + 1,
                    reason: format!("expected 3 tab-separated fields, got {}", parts.len()),
                });
            }
            let label: u32 = parts[1].parse().map_err(|_| SignalError::ManifestParse {
                line: i + 1,
                reason: format!("label {:?} is not an integer", parts[1]),
            })?;
            let split = Split::parse(parts[2]).ok_or_else(|| SignalError::ManifestParse {
                line: i + 1,
                reason: format!("unknown split {:?}", parts[2]),
            })?;
            let p = PathBuf::from(parts[0]);
            let resolved = if p.is_absolute() { p } else { base.join(p) };
            if !resolved.is_file() {
                return Err(SignalError::ManifestUnresolvable(resolved));
            }
            manifest.push(resolved, label, split);
        }
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Parameters for the planted-structure synthetic generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub montage_id: String,
    pub rate: f64,
    pub duration_s: f64,
    pub n_classes: u32,
    pub global_rhythm_hz: f64,
    pub region_rhythms_hz: Vec<f64>,
    pub snr_db: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), SignalError> {
        if self.n_classes < 2 {
            return Err(SignalError::InvalidConfig(format!(
                "n_classes {} < 2",
                self.n_classes
            )));
        }
        if !(self.rate > 0.0) || !(self.duration_s > 0.0) {
            return Err(SignalError::InvalidConfig(
                "rate and duration_s must be positive".into(),
            ));
        }
        let nyquist = self.rate / 2.0;
        for &f in std::iter::once(&self.global_rhythm_hz).chain(&self.region_rhythms_hz) {
            if !(f > 0.0) || f >= nyquist {
                return Err(SignalError::InvalidConfig(format!(
                    "frequency {f} Hz outside (0, {nyquist})"
                )));
            }
        }
        Ok(())
    }
}

/// Generates one segment with planted structure. The signal is a global
/// sinusoid on every channel plus a region sinusoid on the channels of the
/// label's region (a second-scale hierarchy group), plus white noise sized to
/// `snr_db` against the clean signal's mean power. `snr_db = +inf` disables
/// noise. The label is `seed % n_classes`, so consecutive seeds cycle
/// through the classes.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(EegSegment, u32), SignalError> {
    cfg.validate()?;
    let montage = builtin_montage(&cfg.montage_id)
        .ok_or_else(|| SignalError::UnknownMontage(cfg.montage_id.clone()))?;
    let hierarchy = bth::builtin_hierarchy(&cfg.montage_id)?;
    let regions = hierarchy.groups(2);
    if (cfg.n_classes as usize) > regions.len() {
        return Err(SignalError::InvalidConfig(format!(
            "n_classes {} exceeds the {} regions of montage {:?}",
            cfg.n_classes,
            regions.len(),
            cfg.montage_id
        )));
    }
    if cfg.region_rhythms_hz.len() < cfg.n_classes as usize {
        return Err(SignalError::InvalidConfig(format!(
            "region_rhythms_hz has {} entries for {} classes",
            cfg.region_rhythms_hz.len(),
            cfg.n_classes
        )));
    }
    let label = (cfg.seed % cfg.n_classes as u64) as u32;
    let n_channels = montage.n_channels();
    let n_samples = (cfg.rate * cfg.duration_s).round() as usize;
    let region: &[usize] = &regions[label as usize];

    let mut phase_rng = StreamRng::new(cfg.seed, "synthetic/phase");
    let global_phase = phase_rng.uniform_range(0.0, std::f64::consts::TAU);
    let region_phase = phase_rng.uniform_range(0.0, std::f64::consts::TAU);

    let w_global = std::f64::consts::TAU * cfg.global_rhythm_hz / cfg.rate;
    let w_region = std::f64::consts::TAU * cfg.region_rhythms_hz[label as usize] / cfg.rate;
    let mut data = vec![0.0f64; n_channels * n_samples];
    for c in 0..n_channels {
        let in_region = region.contains(&c);
        let row = &mut data[c * n_samples..(c + 1) * n_samples];
        for (n, v) in row.iter_mut().enumerate() {
            let t = n as f64;
            let mut s = (w_global * t + global_phase).sin();
            if in_region {
                s += (w_region * t + region_phase).sin();
            }
            *v = s;
        }
    }

    if cfg.snr_db.is_finite() {
        let mean_power =
            data.iter().map(|v| v * v).sum::<f64>() / (n_channels * n_samples) as f64;
        let noise_std = (mean_power / 10f64.powf(cfg.snr_db / 10.0)).sqrt();
        let mut noise_rng = StreamRng::new(cfg.seed, "synthetic/noise");
        for v in &mut data {
            *v += noise_std * noise_rng.normal();
        }
    }

    // Quantize to f32 so in-memory data matches the file format exactly.
    for v in &mut data {
        *v = *v as f32 as f64;
    }
    let mut seg = EegSegment::new(&cfg.montage_id, cfg.rate, n_channels, n_samples, data)?;
    seg.label = Some(label);
    Ok((seg, label))
}
