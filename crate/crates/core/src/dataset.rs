//! Recording files, the cohort manifest, the synthetic signal generator and
//! the patient-first training sampler.
//!
//! Recording file layout (all integers little-endian):
//!
//! | field       | type                          |
//! |-------------|-------------------------------|
//! | magic       | `b"BIAXREC1"`                 |
//! | version     | u32 (= 1)                     |
//! | fs          | u32                           |
//! | C           | u32                           |
//! | L           | u64                           |
//! | label       | u8 (0 good, 1 poor)           |
//! | hour_index  | u16                           |
//! | patient_id  | u32 length + UTF-8 bytes      |
//! | group_id    | u32 length + UTF-8 bytes      |
//! | payload     | C·L f32, channel-major        |
//!
//! Electrode names are not stored per file; they come from the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::signal::{self, butter_bandpass, Outcome, PipelineConfig, RawRecording, Segment, SignalError};
use crate::tensor::Rng;

pub const RECORDING_MAGIC: &[u8; 8] = b"BIAXREC1";
pub const RECORDING_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated file: needed {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} unexpected trailing bytes")]
    Trailing(usize),
    #[error("invalid label byte {0}")]
    Label(u8),
    #[error("string field is not valid UTF-8")]
    Utf8,
    #[error("recording has non-finite sample in channel {0}")]
    NonFinite(usize),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("invalid synthesis parameters: {0}")]
    Synth(String),
    #[error("no patient has a usable segment")]
    NoUsablePatients,
    #[error(transparent)]
    Signal(#[from] SignalError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_recording(r: &RawRecording) -> Result<Vec<u8>> {
    let n = r.len();
    if r.channels.iter().any(|c| c.len() != n) {
        return Err(SignalError::Ragged.into());
    }
    if let Some(i) = r.channels.iter().position(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(DatasetError::NonFinite(i));
    }
    let mut out = Vec::with_capacity(64 + 4 * n * r.n_channels());
    out.extend_from_slice(RECORDING_MAGIC);
    out.extend_from_slice(&RECORDING_VERSION.to_le_bytes());
    out.extend_from_slice(&r.fs.to_le_bytes());
    out.extend_from_slice(&(r.n_channels() as u32).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.push(r.label.as_u8());
    out.extend_from_slice(&r.hour_index.to_le_bytes());
    for s in [&r.patient_id, &r.group_id] {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    }
    for ch in &r.channels {
        for &v in ch {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(DatasetError::Truncated {
            needed: self.pos.saturating_add(n),
            have: self.buf.len(),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn string(&mut self) -> Result<String> {
        let n = u32::from_le_bytes(self.array()?) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| DatasetError::Utf8)
    }
}

/// Decodes a recording; electrode names are filled with `ch0, ch1, …`.
pub fn decode_recording(buf: &[u8]) -> Result<RawRecording> {
    let mut rd = Reader { buf, pos: 0 };
    let magic: [u8; 8] = rd.array()?;
    if &magic != RECORDING_MAGIC {
        return Err(DatasetError::BadMagic {
            expected: String::from_utf8_lossy(RECORDING_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let version = u32::from_le_bytes(rd.array()?);
    if version != RECORDING_VERSION {
        return Err(DatasetError::Version {
            found: version,
            expected: RECORDING_VERSION,
        });
    }
    let fs = u32::from_le_bytes(rd.array()?);
    let c = u32::from_le_bytes(rd.array()?) as usize;
    let l = u64::from_le_bytes(rd.array()?) as usize;
    let label_byte = rd.array::<1>()?[0];
    let label = Outcome::from_u8(label_byte).ok_or(DatasetError::Label(label_byte))?;
    let hour_index = u16::from_le_bytes(rd.array()?);
    let patient_id = rd.string()?;
    let group_id = rd.string()?;
    let payload_len = c.checked_mul(l).and_then(|n| n.checked_mul(4)).ok_or(DatasetError::Truncated {
        needed: usize::MAX,
        have: buf.len(),
    })?;
    let payload = rd.take(payload_len)?;
    if rd.pos != buf.len() {
        return Err(DatasetError::Trailing(buf.len() - rd.pos));
    }
    let channels = payload
        .chunks_exact(4 * l.max(1))
        .take(c)
        .map(|ch| {
            ch.chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                .collect()
        })
        .collect::<Vec<Vec<f64>>>();
    let channels = if l == 0 { vec![Vec::new(); c] } else { channels };
    Ok(RawRecording {
        channels,
        fs,
        electrode_names: (0..c).map(|i| format!("ch{i}")).collect(),
        label,
        group_id,
        patient_id,
        hour_index,
    })
}

pub fn write_recording(r: &RawRecording, path: &Path) -> Result<()> {
    fs::write(path, encode_recording(r)?).map_err(io_err(path))
}

pub fn read_recording(path: &Path) -> Result<RawRecording> {
    decode_recording(&fs::read(path).map_err(io_err(path))?)
}

// ---------------------------------------------------------------------------
// Synthetic signals

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub class: Outcome,
    /// Seconds.
    pub duration: f64,
    pub fs: u32,
    pub channels: usize,
    pub seed: u64,
    /// Mean burst-suppression cycle length in seconds.
    pub burst_period: f64,
    /// Fraction of each cycle spent suppressed.
    pub suppression_ratio: f64,
    pub alpha_band: (f64, f64),
    /// Weight of the source shared by all channels.
    pub coherence: f64,
    pub noise_scale: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            class: Outcome::Good,
            duration: 300.0,
            fs: 100,
            channels: 5,
            seed: 0,
            burst_period: 6.0,
            suppression_ratio: 0.6,
            alpha_band: (8.0, 12.0),
            coherence: 0.8,
            noise_scale: 1.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(DatasetError::Synth(m.to_string()));
        if self.fs == 0 || !(self.duration > 0.0) || self.channels == 0 {
            return fail("fs, duration and channels must be positive");
        }
        if !(self.burst_period > 0.0) || !(self.noise_scale > 0.0) {
            return fail("burst_period and noise_scale must be positive");
        }
        if !(0.0..=1.0).contains(&self.suppression_ratio) {
            return fail("suppression_ratio must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.coherence) {
            return fail("coherence must lie in [0, 1]");
        }
        let (lo, hi) = self.alpha_band;
        if !(lo > 0.0 && lo < hi && hi < f64::from(self.fs) / 2.0) {
            return fail("alpha_band must satisfy 0 < lo < hi < fs/2");
        }
        Ok(())
    }
}

const BURST_GAIN: f64 = 4.0;
const SUPPRESSION_FLOOR: f64 = 0.05;
const SENSOR_NOISE: f64 = 0.05;
const PINK_WARMUP: usize = 2000;

/// Unit-RMS pink noise (Paul Kellet's refined filter).
fn pink(n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    let mut out = Vec::with_capacity(n);
    for i in 0..n + PINK_WARMUP {
        let w = rng.normal();
        b[0] = 0.99886 * b[0] + w * 0.055_517_9;
        b[1] = 0.99332 * b[1] + w * 0.075_075_9;
        b[2] = 0.96900 * b[2] + w * 0.153_852;
        b[3] = 0.86650 * b[3] + w * 0.310_485_6;
        b[4] = 0.55000 * b[4] + w * 0.532_952_2;
        b[5] = -0.7616 * b[5] - w * 0.016_898;
        let v = b[..6].iter().sum::<f64>() + b[6] + w * 0.5362;
        b[6] = w * 0.115_926;
        if i >= PINK_WARMUP {
            out.push(v);
        }
    }
    unit_rms(out)
}

fn unit_rms(mut x: Vec<f64>) -> Vec<f64> {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    x
}

fn rhythm(n: usize, band: (f64, f64), fs: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    let sos = butter_bandpass(2, band.0, band.1, fs)?;
    let white: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    Ok(unit_rms(sos.filtfilt(&white)))
}

/// Shared on/off timeline: `true` marks suppressed samples. Cycle lengths are
/// jittered by ±30% and the first cycle starts at a random phase.
fn suppression_mask(n: usize, p: &SynthParams, rng: &mut Rng) -> Vec<bool> {
    let fs = f64::from(p.fs);
    let mut mask = Vec::with_capacity(n);
    let mut skip = (rng.uniform() * p.burst_period * fs) as usize;
    while mask.len() < n {
        let cycle = p.burst_period * rng.uniform_range(0.7, 1.3) * fs;
        let off = (cycle * p.suppression_ratio).round() as usize;
        let on = (cycle.round() as usize).saturating_sub(off).max(usize::from(off == 0));
        for k in 0..off + on {
            if skip > 0 {
                skip -= 1;
                continue;
            }
            mask.push(k < off);
        }
    }
    mask.truncate(n);
    mask
}

fn mix(common: &[f64], own: &[f64], coherence: f64) -> Vec<f64> {
    let (a, b) = (coherence.sqrt(), (1.0 - coherence).sqrt());
    common.iter().zip(own).map(|(c, o)| a * c + b * o).collect()
}

/// Generates one labeled recording.
///
/// Good: pink background plus a rhythm in `alpha_band`, each mixed with a
/// source shared across channels according to `coherence`. Poor: a shared
/// burst-suppression timeline; bursts are pink noise amplified by
/// `BURST_GAIN`, suppressed stretches sit at `SUPPRESSION_FLOOR` amplitude.
pub fn synth_generate(p: &SynthParams) -> Result<RawRecording> {
    p.validate()?;
    let fs = f64::from(p.fs);
    let n = (p.duration * fs).round() as usize;
    let mut rng = Rng::new(p.seed);
    let gains: Vec<f64> = (0..p.channels).map(|_| rng.uniform_range(0.7, 1.3)).collect();

    let channels: Vec<Vec<f64>> = match p.class {
        Outcome::Good => {
            let common_rhythm = rhythm(n, p.alpha_band, fs, &mut rng)?;
            let common_bg = pink(n, &mut rng);
            let mut out = Vec::with_capacity(p.channels);
            for &g in &gains {
                let own_rhythm = rhythm(n, p.alpha_band, fs, &mut rng)?;
                let own_bg = pink(n, &mut rng);
                let r = mix(&common_rhythm, &own_rhythm, p.coherence);
                let b = mix(&common_bg, &own_bg, p.coherence);
                out.push(
                    r.iter()
                        .zip(&b)
                        .map(|(r, b)| p.noise_scale * g * (r + b + SENSOR_NOISE * rng.normal()))
                        .collect(),
                );
            }
            out
        }
        Outcome::Poor => {
            let mask = suppression_mask(n, p, &mut rng);
            let common = pink(n, &mut rng);
            let mut out = Vec::with_capacity(p.channels);
            for &g in &gains {
                let own = pink(n, &mut rng);
                let content = mix(&common, &own, p.coherence);
                out.push(
                    content
                        .iter()
                        .zip(&mask)
                        .map(|(v, &quiet)| {
                            let amp = if quiet { SUPPRESSION_FLOOR } else { BURST_GAIN };
                            p.noise_scale * g * amp * v
                        })
                        .collect(),
                );
            }
            out
        }
    };
    let names = default_electrodes(p.channels);
    Ok(RawRecording {
        channels,
        fs: p.fs,
        electrode_names: names,
        label: p.class,
        group_id: "synth".into(),
        patient_id: "synth".into(),
        hour_index: 0,
    })
}

fn default_electrodes(c: usize) -> Vec<String> {
    if c <= signal::STANDARD_ELECTRODES.len() {
        signal::STANDARD_ELECTRODES[..c].iter().map(|s| s.to_string()).collect()
    } else {
        (0..c).map(|i| format!("ch{i}")).collect()
    }
}

// ---------------------------------------------------------------------------
// Cohorts

/// Parameters for a balanced synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSpec {
    pub patients: usize,
    pub groups: Vec<String>,
    pub hours_per_patient: u16,
    /// Length of each recording unit in minutes.
    pub hour_minutes: f64,
    pub fs: u32,
    pub electrodes: Vec<String>,
    pub seed: u64,
    /// Chance that an hour of a poor-outcome patient shows the poor pattern;
    /// other hours are drawn from the good-class generator.
    pub poor_hour_prob: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            patients: 40,
            groups: vec!["A".into(), "B".into()],
            hours_per_patient: 2,
            hour_minutes: 5.0,
            fs: 100,
            electrodes: ["Fp1", "F3", "C3", "P3", "O1"].map(String::from).to_vec(),
            seed: 7,
            poor_hour_prob: 1.0,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patients == 0 || self.groups.is_empty() || self.hours_per_patient == 0 {
            return Err(DatasetError::Synth(
                "patients, groups and hours_per_patient must be non-empty".into(),
            ));
        }
        if self.electrodes.is_empty() || !(self.hour_minutes > 0.0) {
            return Err(DatasetError::Synth("electrodes and hour_minutes must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.poor_hour_prob) {
            return Err(DatasetError::Synth("poor_hour_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Label of patient `i`: alternating, so every group stays balanced.
    pub fn label_of(&self, i: usize) -> Outcome {
        if i % 2 == 1 {
            Outcome::Poor
        } else {
            Outcome::Good
        }
    }

    pub fn group_of(&self, i: usize) -> &str {
        &self.groups[(i / 2) % self.groups.len()]
    }

    /// Per-patient parameters, drawn from class-specific ranges. Hours of a
    /// patient share everything except the seed.
    pub fn patient_params(&self, i: usize) -> SynthParams {
        let mut rng = Rng::new(self.seed).fork(i as u64);
        let class = self.label_of(i);
        let lo = rng.uniform_range(8.0, 10.0);
        let base = SynthParams {
            class,
            duration: self.hour_minutes * 60.0,
            fs: self.fs,
            channels: self.electrodes.len(),
            seed: 0,
            burst_period: rng.uniform_range(3.0, 8.0),
            suppression_ratio: rng.uniform_range(0.4, 0.8),
            alpha_band: (lo, lo + 2.0),
            coherence: 0.0,
            noise_scale: rng.uniform_range(0.5, 2.0),
        };
        match class {
            Outcome::Good => SynthParams {
                coherence: rng.uniform_range(0.6, 0.95),
                ..base
            },
            Outcome::Poor => SynthParams {
                coherence: rng.uniform_range(0.0, 0.3),
                ..base
            },
        }
    }

    fn hour_seed(&self, patient: usize, hour: u16) -> u64 {
        Rng::new(self.seed).fork(1_000_000 + patient as u64 * 1000 + u64::from(hour)).next_u64()
    }

    pub fn patient_id(i: usize) -> String {
        format!("P{i:03}")
    }

    /// Generator settings for one hour. A poor-outcome hour that misses its
    /// `poor_hour_prob` draw looks like a good-outcome hour.
    pub fn hour_params(&self, i: usize, hour: u16) -> SynthParams {
        let mut p = SynthParams {
            seed: self.hour_seed(i, hour),
            ..self.patient_params(i)
        };
        if p.class == Outcome::Poor && self.poor_hour_prob < 1.0 {
            let mut rng = Rng::new(self.seed).fork(2_000_000 + i as u64 * 1000 + u64::from(hour));
            if rng.uniform() >= self.poor_hour_prob {
                p.class = Outcome::Good;
                p.coherence = rng.uniform_range(0.6, 0.95);
            }
        }
        p
    }

    /// All recordings of patient `i`, hour by hour.
    pub fn generate_patient(&self, i: usize) -> Result<Vec<RawRecording>> {
        (0..self.hours_per_patient)
            .map(|h| {
                let mut r = synth_generate(&self.hour_params(i, h))?;
                r.label = self.label_of(i);
                r.electrode_names = self.electrodes.clone();
                r.patient_id = Self::patient_id(i);
                r.group_id = self.group_of(i).to_string();
                r.hour_index = h;
                Ok(r)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPatient {
    pub patient_id: String,
    pub group_id: String,
    pub label: Outcome,
    /// Paths relative to the manifest file.
    pub recordings: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifest {
    pub fs: u32,
    pub electrodes: Vec<String>,
    pub patients: Vec<ManifestPatient>,
}

impl CohortManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| DatasetError::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        fs::write(path, text).map_err(io_err(path))
    }

    /// Reads every listed recording, checking it against the manifest entry.
    pub fn read_recordings(&self, manifest_path: &Path) -> Result<Vec<RawRecording>> {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut out = Vec::new();
        for p in &self.patients {
            for rel in &p.recordings {
                let mut r = read_recording(&base.join(rel))?;
                let bad = |what: &str| {
                    Err(DatasetError::Manifest(format!(
                        "{}: {what} disagrees with manifest entry {}",
                        rel.display(),
                        p.patient_id
                    )))
                };
                if r.patient_id != p.patient_id || r.group_id != p.group_id {
                    return bad("patient or group id");
                }
                if r.label != p.label {
                    return bad("label");
                }
                if r.fs != self.fs {
                    return bad("sample rate");
                }
                if r.n_channels() != self.electrodes.len() {
                    return bad("channel count");
                }
                r.electrode_names = self.electrodes.clone();
                out.push(r);
            }
        }
        Ok(out)
    }
}

/// Generates a cohort into `dir` and writes `manifest.toml` there. The same
/// spec always produces byte-identical files.
pub fn write_cohort(spec: &CohortSpec, dir: &Path) -> Result<(PathBuf, CohortManifest)> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut patients = Vec::with_capacity(spec.patients);
    for i in 0..spec.patients {
        let mut recordings = Vec::new();
        for r in spec.generate_patient(i)? {
            let name = PathBuf::from(format!("{}_h{}.biax", r.patient_id, r.hour_index));
            write_recording(&r, &dir.join(&name))?;
            recordings.push(name);
        }
        patients.push(ManifestPatient {
            patient_id: CohortSpec::patient_id(i),
            group_id: spec.group_of(i).to_string(),
            label: spec.label_of(i),
            recordings,
        });
    }
    let manifest = CohortManifest {
        fs: spec.fs,
        electrodes: spec.electrodes.clone(),
        patients,
    };
    let path = dir.join("manifest.toml");
    manifest.save(&path)?;
    Ok((path, manifest))
}

// ---------------------------------------------------------------------------
// Preprocessed patients and sampling

#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub patient_id: String,
    pub group_id: String,
    pub label: Outcome,
    /// Segments per recording hour, ordered by `hour_index`.
    pub hours: Vec<Vec<Segment>>,
}

impl Patient {
    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.hours.iter().flatten()
    }

    pub fn is_usable(&self) -> bool {
        self.hours.iter().any(|h| !h.is_empty())
    }
}

/// Runs the preprocessing chain on every recording and groups the segments
/// by patient, in order of first appearance.
pub fn build_patients(recordings: &[RawRecording], cfg: &PipelineConfig) -> Result<Vec<Patient>> {
    let processed: Vec<(usize, Vec<Segment>)> = std::thread::scope(|s| {
        let handles: Vec<_> = recordings
            .iter()
            .enumerate()
            .map(|(i, r)| s.spawn(move || signal::process(r, cfg).map(|segs| (i, segs))))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("preprocessing thread panicked"))
            .collect::<std::result::Result<Vec<_>, _>>()
    })?;

    let mut patients: Vec<Patient> = Vec::new();
    let mut hour_ids: Vec<Vec<u16>> = Vec::new();
    for (i, segs) in processed {
        let r = &recordings[i];
        let idx = match patients.iter().position(|p| p.patient_id == r.patient_id) {
            Some(k) => k,
            None => {
                patients.push(Patient {
                    patient_id: r.patient_id.clone(),
                    group_id: r.group_id.clone(),
                    label: r.label,
                    hours: Vec::new(),
                });
                hour_ids.push(Vec::new());
                patients.len() - 1
            }
        };
        let pos = hour_ids[idx].partition_point(|&h| h < r.hour_index);
        hour_ids[idx].insert(pos, r.hour_index);
        patients[idx].hours.insert(pos, segs);
    }
    Ok(patients)
}

pub fn load_cohort(manifest_path: &Path, cfg: &PipelineConfig) -> Result<Vec<Patient>> {
    let manifest = CohortManifest::load(manifest_path)?;
    build_patients(&manifest.read_recordings(manifest_path)?, cfg)
}

/// Patient-first uniform sampler: patient, then hour, then segment.
#[derive(Debug, Clone)]
pub struct Sampler<'a> {
    patients: Vec<(&'a Patient, Vec<usize>)>,
}

impl<'a> Sampler<'a> {
    /// Skips patients without a usable segment (with a warning).
    pub fn new(patients: &'a [Patient]) -> Result<Self> {
        let mut usable = Vec::new();
        for p in patients {
            let hours: Vec<usize> = (0..p.hours.len()).filter(|&h| !p.hours[h].is_empty()).collect();
            if hours.is_empty() {
                log::warn!("patient {} has no usable segment; skipped by sampler", p.patient_id);
            } else {
                usable.push((p, hours));
            }
        }
        if usable.is_empty() {
            return Err(DatasetError::NoUsablePatients);
        }
        Ok(Self { patients: usable })
    }

    pub fn n_patients(&self) -> usize {
        self.patients.len()
    }

    pub fn draw(&self, rng: &mut Rng) -> &'a Segment {
        let (p, hours) = &self.patients[rng.below(self.patients.len())];
        let hour = &p.hours[hours[rng.below(hours.len())]];
        &hour[rng.below(hour.len())]
    }
}

pub fn sample_training_example<'a>(patients: &'a [Patient], rng: &mut Rng) -> Result<&'a Segment> {
    Ok(Sampler::new(patients)?.draw(rng))
}
