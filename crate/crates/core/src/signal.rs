//! Preprocessing chain: band-pass → resample → min-max rescale → bipolar
//! montage → fixed-length segmentation.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SignalError {
    #[error("band edges must satisfy 0 < {lo} < {hi} < {nyquist} Hz (Nyquist)")]
    Cutoff { lo: f64, hi: f64, nyquist: f64 },
    #[error("filter order must be at least 1")]
    Order,
    #[error("sample rates must be positive (got {fs_in} → {fs_out})")]
    Rate { fs_in: u32, fs_out: u32 },
    #[error("montage references unknown electrode {0:?}")]
    UnknownElectrode(String),
    #[error("recording has {names} electrode names for {channels} channels")]
    NameCount { names: usize, channels: usize },
    #[error("channels have unequal lengths")]
    Ragged,
    #[error("non-finite sample in channel {0}")]
    NonFinite(usize),
}

/// Binary outcome. `Poor` is the positive class everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Good,
    Poor,
}

impl Outcome {
    pub fn as_u8(self) -> u8 {
        match self {
            Outcome::Good => 0,
            Outcome::Poor => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Outcome::Good),
            1 => Some(Outcome::Poor),
            _ => None,
        }
    }

    pub fn target(self) -> f64 {
        f64::from(self.as_u8())
    }
}

/// One recording unit (nominally one hour) of multichannel signal.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub channels: Vec<Vec<f64>>,
    pub fs: u32,
    pub electrode_names: Vec<String>,
    pub label: Outcome,
    pub group_id: String,
    pub patient_id: String,
    pub hour_index: u16,
}

impl RawRecording {
    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if self.electrode_names.len() != self.channels.len() {
            return Err(SignalError::NameCount {
                names: self.electrode_names.len(),
                channels: self.channels.len(),
            });
        }
        let n = self.len();
        for (i, ch) in self.channels.iter().enumerate() {
            if ch.len() != n {
                return Err(SignalError::Ragged);
            }
            if ch.iter().any(|v| !v.is_finite()) {
                return Err(SignalError::NonFinite(i));
            }
        }
        Ok(())
    }

    fn with_channels(&self, channels: Vec<Vec<f64>>) -> Self {
        Self {
            channels,
            ..self.clone()
        }
    }
}

/// A fixed-length, labeled window ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub n_channels: usize,
    pub len: usize,
    /// Channel-major samples, `n_channels · len` values.
    pub data: Vec<f64>,
    pub label: Outcome,
    pub patient_id: String,
    pub hour_index: u16,
    pub segment_index: usize,
}

impl Segment {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.len..(c + 1) * self.len]
    }
}

/// Longitudinal bipolar ("double banana") derivation over the 19-electrode
/// 10–20 layout.
pub const DOUBLE_BANANA: [(&str, &str); 18] = [
    ("Fp1", "F7"),
    ("F7", "T3"),
    ("T3", "T5"),
    ("T5", "O1"),
    ("Fp2", "F8"),
    ("F8", "T4"),
    ("T4", "T6"),
    ("T6", "O2"),
    ("Fp1", "F3"),
    ("F3", "C3"),
    ("C3", "P3"),
    ("P3", "O1"),
    ("Fp2", "F4"),
    ("F4", "C4"),
    ("C4", "P4"),
    ("P4", "O2"),
    ("Fz", "Cz"),
    ("Cz", "Pz"),
];

pub const STANDARD_ELECTRODES: [&str; 19] = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T3", "C3", "Cz", "C4", "T4", "T5", "P3", "Pz",
    "P4", "T6", "O1", "O2",
];

pub fn default_montage() -> Vec<(String, String)> {
    DOUBLE_BANANA
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub band_lo: f64,
    pub band_hi: f64,
    pub filter_order: usize,
    pub fs_out: u32,
    pub montage: Vec<(String, String)>,
    pub segment_minutes: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            band_lo: 0.5,
            band_hi: 35.0,
            filter_order: 4,
            fs_out: 100,
            montage: default_montage(),
            segment_minutes: 5,
        }
    }
}

impl PipelineConfig {
    pub fn segment_len(&self) -> usize {
        self.segment_minutes * self.fs_out as usize * 60
    }
}

/// Second-order sections `[b0, b1, b2, 1, a1, a2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sos {
    pub sections: Vec<[f64; 6]>,
}

/// Digital Butterworth band-pass of prototype order `order` (the resulting
/// filter has `2·order` poles), designed by bilinear transform with
/// pre-warped band edges.
pub fn butter_bandpass(order: usize, lo: f64, hi: f64, fs: f64) -> Result<Sos, SignalError> {
    if order == 0 {
        return Err(SignalError::Order);
    }
    let nyquist = fs / 2.0;
    if !(lo > 0.0 && lo < hi && hi < nyquist) {
        return Err(SignalError::Cutoff { lo, hi, nyquist });
    }
    let fs2 = 2.0 * fs;
    let wl = fs2 * (std::f64::consts::PI * lo / fs).tan();
    let wh = fs2 * (std::f64::consts::PI * hi / fs).tan();
    let bw = wh - wl;
    let w0sq = wl * wh;

    let n = order as i64;
    let mut poles: Vec<Complex64> = Vec::with_capacity(2 * order);
    for m in (-n + 1..n).step_by(2) {
        let proto = -Complex64::from_polar(1.0, std::f64::consts::PI * m as f64 / (2.0 * n as f64));
        let p = proto * (bw / 2.0);
        let root = (p * p - w0sq).sqrt();
        poles.push(p + root);
        poles.push(p - root);
    }
    let to_z = |s: Complex64| (fs2 + s) / (fs2 - s);
    let zpoles: Vec<Complex64> = poles.iter().map(|&p| to_z(p)).collect();
    let denom: Complex64 = poles.iter().map(|&p| fs2 - p).product();
    let gain = (Complex64::new(bw.powi(order as i32) * fs2.powi(order as i32), 0.0) / denom).re;

    // Pair conjugates; real poles (odd orders can produce them) pair in order.
    let mut upper: Vec<Complex64> = zpoles.iter().copied().filter(|p| p.im > 1e-12).collect();
    let mut reals: Vec<f64> = zpoles
        .iter()
        .filter(|p| p.im.abs() <= 1e-12)
        .map(|p| p.re)
        .collect();
    // Poles nearest the unit circle go last.
    upper.sort_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap());
    reals.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
    let mut sections = Vec::with_capacity(order);
    for pair in reals.chunks(2) {
        let (p1, p2) = (pair[0], *pair.get(1).unwrap_or(&0.0));
        sections.push([1.0, 0.0, -1.0, 1.0, -(p1 + p2), p1 * p2]);
    }
    for p in upper {
        sections.push([1.0, 0.0, -1.0, 1.0, -2.0 * p.re, p.norm_sqr()]);
    }
    for v in &mut sections[0][..3] {
        *v *= gain;
    }
    Ok(Sos { sections })
}

impl Sos {
    /// Complex response at `freq` Hz.
    pub fn response(&self, freq: f64, fs: f64) -> Complex64 {
        let w = 2.0 * std::f64::consts::PI * freq / fs;
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        self.sections
            .iter()
            .map(|s| (s[0] + s[1] * z1 + s[2] * z2) / (s[3] + s[4] * z1 + s[5] * z2))
            .product()
    }

    /// Step-response steady-state initial conditions per section.
    fn steady_state(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let dc = (s[0] + s[1] + s[2]) / (s[3] + s[4] + s[5]);
                let zi = [scale * (dc - s[0]), scale * (s[2] - s[5] * dc)];
                scale *= dc;
                zi
            })
            .collect()
    }

    /// Causal filtering (transposed direct form II) with initial states.
    fn filter(&self, x: &mut [f64], mut state: Vec<[f64; 2]>) {
        for (s, z) in self.sections.iter().zip(state.iter_mut()) {
            for v in x.iter_mut() {
                let xi = *v;
                let y = s[0] * xi + z[0];
                z[0] = s[1] * xi - s[4] * y + z[1];
                z[1] = s[2] * xi - s[5] * y;
                *v = y;
            }
        }
    }

    /// Zero-phase forward-backward filtering with odd reflection padding of
    /// `3·(2·sections + 1)` samples and steady-state initial conditions.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n < 2 {
            return x.to_vec();
        }
        let edge = (3 * (2 * self.sections.len() + 1)).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * edge);
        ext.extend((1..=edge).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=edge).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        let zi = self.steady_state();
        let scaled = |k: f64| zi.iter().map(|z| [z[0] * k, z[1] * k]).collect::<Vec<_>>();
        let init = scaled(ext[0]);
        self.filter(&mut ext, init);
        ext.reverse();
        let init = scaled(ext[0]);
        self.filter(&mut ext, init);
        ext.reverse();
        ext[edge..edge + n].to_vec()
    }
}

/// Zero-phase Butterworth band-pass applied to every channel.
pub fn bandpass(x: &RawRecording, lo: f64, hi: f64, order: usize) -> Result<RawRecording, SignalError> {
    let sos = butter_bandpass(order, lo, hi, f64::from(x.fs))?;
    Ok(x.with_channels(x.channels.iter().map(|c| sos.filtfilt(c)).collect()))
}

/// Half-width of the resampling kernel, in input samples (64 taps total).
pub const RESAMPLE_HALF_TAPS: usize = 32;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Rational-factor polyphase resampler with a Hann-windowed sinc kernel.
#[derive(Debug, Clone)]
pub struct Resampler {
    up: usize,
    down: usize,
    /// Per phase: (offset q, weight); output uses input index `base − q`.
    phases: Vec<Vec<(isize, f64)>>,
}

impl Resampler {
    pub fn new(fs_in: u32, fs_out: u32) -> Result<Self, SignalError> {
        if fs_in == 0 || fs_out == 0 {
            return Err(SignalError::Rate { fs_in, fs_out });
        }
        let g = gcd(u64::from(fs_in), u64::from(fs_out));
        let up = (u64::from(fs_out) / g) as usize;
        let down = (u64::from(fs_in) / g) as usize;
        let cutoff = 1.0 / up.max(down) as f64;
        let half = (RESAMPLE_HALF_TAPS * up) as f64;
        let phases = (0..up)
            .map(|r| {
                let lo = -(RESAMPLE_HALF_TAPS as isize) - 1;
                let hi = RESAMPLE_HALF_TAPS as isize + 1;
                let mut taps: Vec<(isize, f64)> = (lo..=hi)
                    .filter_map(|q| {
                        let d = (q * up as isize + r as isize) as f64;
                        if d.abs() >= half {
                            return None;
                        }
                        let window = 0.5 * (1.0 + (std::f64::consts::PI * d / half).cos());
                        Some((q, sinc(cutoff * d) * window))
                    })
                    .collect();
                let total: f64 = taps.iter().map(|t| t.1).sum();
                for t in &mut taps {
                    t.1 /= total;
                }
                taps
            })
            .collect();
        Ok(Self { up, down, phases })
    }

    pub fn output_len(&self, n: usize) -> usize {
        n * self.up / self.down
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as isize;
        (0..self.output_len(x.len()))
            .map(|m| {
                let c = m * self.down;
                let base = (c / self.up) as isize;
                self.phases[c % self.up]
                    .iter()
                    .filter_map(|&(q, w)| {
                        let i = base - q;
                        (0..n).contains(&i).then(|| x[i as usize] * w)
                    })
                    .sum()
            })
            .collect()
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Resamples every channel; identical rates pass through unchanged.
pub fn resample(x: &RawRecording, fs_out: u32) -> Result<RawRecording, SignalError> {
    if x.fs == fs_out {
        if fs_out == 0 {
            return Err(SignalError::Rate { fs_in: 0, fs_out });
        }
        return Ok(x.clone());
    }
    let rs = Resampler::new(x.fs, fs_out)?;
    let mut out = x.with_channels(x.channels.iter().map(|c| rs.apply(c)).collect());
    out.fs = fs_out;
    Ok(out)
}

/// Per-channel `(v − min)/(max − min)`; constant channels become zeros.
pub fn minmax_channel(ch: &[f64]) -> Vec<f64> {
    let (lo, hi) = ch
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; ch.len()];
    }
    ch.iter().map(|v| (v - lo) / span).collect()
}

pub fn minmax_rescale(x: &RawRecording) -> RawRecording {
    x.with_channels(x.channels.iter().map(|c| minmax_channel(c)).collect())
}

/// Channel `i` of the output is `nameA_i − nameB_i`.
pub fn bipolar_convert(
    x: &RawRecording,
    montage: &[(String, String)],
) -> Result<RawRecording, SignalError> {
    let find = |name: &str| {
        x.electrode_names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name))
            .ok_or_else(|| SignalError::UnknownElectrode(name.to_string()))
    };
    let mut channels = Vec::with_capacity(montage.len());
    let mut names = Vec::with_capacity(montage.len());
    for (a, b) in montage {
        let (ia, ib) = (find(a)?, find(b)?);
        channels.push(
            x.channels[ia]
                .iter()
                .zip(&x.channels[ib])
                .map(|(p, q)| p - q)
                .collect(),
        );
        names.push(format!("{a}-{b}"));
    }
    let mut out = x.with_channels(channels);
    out.electrode_names = names;
    Ok(out)
}

/// Non-overlapping windows of `n_minutes·fs·60` samples; the trailing
/// remainder is dropped. A recording shorter than one window yields nothing.
pub fn segment(x: &RawRecording, n_minutes: usize) -> Vec<Segment> {
    let seg_len = n_minutes * x.fs as usize * 60;
    if seg_len == 0 {
        return Vec::new();
    }
    let count = x.len() / seg_len;
    (0..count)
        .map(|k| {
            let mut data = Vec::with_capacity(seg_len * x.n_channels());
            for ch in &x.channels {
                data.extend_from_slice(&ch[k * seg_len..(k + 1) * seg_len]);
            }
            Segment {
                n_channels: x.n_channels(),
                len: seg_len,
                data,
                label: x.label,
                patient_id: x.patient_id.clone(),
                hour_index: x.hour_index,
                segment_index: k,
            }
        })
        .collect()
}

/// Band-pass, resample, rescale and bipolar conversion, in that order.
pub fn preprocess(x: &RawRecording, cfg: &PipelineConfig) -> Result<RawRecording, SignalError> {
    x.validate()?;
    let filtered = bandpass(x, cfg.band_lo, cfg.band_hi, cfg.filter_order)?;
    let resampled = resample(&filtered, cfg.fs_out)?;
    let rescaled = minmax_rescale(&resampled);
    bipolar_convert(&rescaled, &cfg.montage)
}

/// The full chain including segmentation.
pub fn process(x: &RawRecording, cfg: &PipelineConfig) -> Result<Vec<Segment>, SignalError> {
    Ok(segment(&preprocess(x, cfg)?, cfg.segment_minutes))
}
