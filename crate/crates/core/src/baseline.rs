//! Feature baselines: logistic regression on per-channel means or on
//! band powers. They bracket how hard a synthetic cohort is.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::signal::Segment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    /// Mean of each channel.
    Mean,
    /// Log relative power in delta, theta, alpha and beta bands plus log
    /// total variance, averaged over channels.
    Bandpower,
}

pub const BANDS: [(f64, f64); 4] = [(0.5, 4.0), (4.0, 8.0), (8.0, 12.0), (12.0, 30.0)];
const WELCH_WINDOW: usize = 128;

pub fn mean_features(seg: &Segment) -> Vec<f64> {
    (0..seg.n_channels)
        .map(|c| {
            let ch = seg.channel(c);
            ch.iter().sum::<f64>() / ch.len() as f64
        })
        .collect()
}

/// Welch periodogram with Hann windows of `WELCH_WINDOW` samples and 50%
/// overlap (shorter inputs use one window). Returns (frequency, power).
pub fn welch(x: &[f64], fs: f64) -> Vec<(f64, f64)> {
    let w = WELCH_WINDOW.min(x.len());
    if w < 2 {
        return Vec::new();
    }
    let hop = (w / 2).max(1);
    let hann: Vec<f64> = (0..w)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (w - 1) as f64).cos())
        .collect();
    let bins = w / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(w);
    let mut buf = vec![Complex64::new(0.0, 0.0); w];
    let mut power = vec![0.0; bins];
    let mut count = 0usize;
    let mut start = 0;
    while start + w <= x.len() {
        let frame = &x[start..start + w];
        let mean = frame.iter().sum::<f64>() / w as f64;
        for ((b, &v), &h) in buf.iter_mut().zip(frame).zip(&hann) {
            *b = Complex64::new((v - mean) * h, 0.0);
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p += b.norm_sqr();
        }
        count += 1;
        start += hop;
    }
    power
        .into_iter()
        .enumerate()
        .map(|(k, p)| (k as f64 * fs / w as f64, p / count.max(1) as f64))
        .collect()
}

pub fn bandpower_features(seg: &Segment, fs: f64) -> Vec<f64> {
    let mut acc = vec![0.0; BANDS.len() + 1];
    for c in 0..seg.n_channels {
        let ch = seg.channel(c);
        let psd = welch(ch, fs);
        let total: f64 = psd.iter().skip(1).map(|p| p.1).sum::<f64>() + 1e-12;
        for (i, &(lo, hi)) in BANDS.iter().enumerate() {
            let band: f64 = psd.iter().filter(|(f, _)| *f >= lo && *f < hi).map(|p| p.1).sum();
            acc[i] += ((band + 1e-12) / total).ln();
        }
        let mean = ch.iter().sum::<f64>() / ch.len() as f64;
        let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / ch.len() as f64;
        acc[BANDS.len()] += (var + 1e-12).ln();
    }
    acc.iter().map(|v| v / seg.n_channels as f64).collect()
}

pub fn features(seg: &Segment, feature: Feature, fs: f64) -> Vec<f64> {
    match feature {
        Feature::Mean => mean_features(seg),
        Feature::Bandpower => bandpower_features(seg, fs),
    }
}

/// L2-regularized logistic regression on standardized features, fit by
/// full-batch gradient descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Logistic {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Logistic {
    pub fn fit(x: &[Vec<f64>], y: &[u8], iterations: usize, lr: f64, l2: f64) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let n = x.len().max(1) as f64;
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut model = Self {
            weights: vec![0.0; d],
            bias: 0.0,
            mean,
            scale,
        };
        let z: Vec<Vec<f64>> = x.iter().map(|r| model.standardize(r)).collect();
        for _ in 0..iterations {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (r, &t) in z.iter().zip(y) {
                let err = sigmoid(model.logit(r)) - f64::from(t);
                for (g, v) in gw.iter_mut().zip(r) {
                    *g += err * v;
                }
                gb += err;
            }
            for (w, g) in model.weights.iter_mut().zip(&gw) {
                *w -= lr * (g / n + l2 * *w);
            }
            model.bias -= lr * gb / n;
        }
        model
    }

    fn standardize(&self, r: &[f64]) -> Vec<f64> {
        r.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn logit(&self, z: &[f64]) -> f64 {
        self.bias + z.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(&self.standardize(x)))
    }
}

/// Fits on `train` segments and returns a scorer for new segments.
pub fn fit_baseline(train: &[&Segment], feature: Feature, fs: f64) -> impl Fn(&Segment) -> f64 {
    let x: Vec<Vec<f64>> = train.iter().map(|s| features(s, feature, fs)).collect();
    let y: Vec<u8> = train.iter().map(|s| s.label.as_u8()).collect();
    let model = Logistic::fit(&x, &y, 500, 0.5, 1e-3);
    move |s: &Segment| model.predict(&features(s, feature, fs))
}
