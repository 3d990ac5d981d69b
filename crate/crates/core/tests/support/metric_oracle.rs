//! O(n²) threshold-enumeration oracle for the ranking metrics, shared by
//! the core oracle tests and the acceptance suite.

use biaxial::metrics::ScoreSet;
use biaxial::Rng;

/// Scores drawn from a small grid so that ties are common.
pub fn random_set(n: usize, rng: &mut Rng) -> ScoreSet {
    loop {
        let pairs: Vec<(f64, u8)> = (0..n)
            .map(|_| {
                let truth = u8::from(rng.uniform() < 0.4);
                let score = (rng.below(40) as f64 + 10.0 * f64::from(truth)) / 50.0;
                (score, truth)
            })
            .collect();
        let s = ScoreSet::from_pairs(&pairs);
        let (p, q) = s.class_counts();
        if p > 0 && q > 0 {
            return s;
        }
    }
}

pub struct Oracle {
    pos: Vec<f64>,
    neg: Vec<f64>,
    thresholds: Vec<f64>,
}

impl Oracle {
    pub fn new(s: &ScoreSet) -> Self {
        let pos = s.entries.iter().filter(|e| e.truth == 1).map(|e| e.score).collect();
        let neg = s.entries.iter().filter(|e| e.truth == 0).map(|e| e.score).collect();
        let mut thresholds: Vec<f64> = vec![f64::INFINITY];
        for e in &s.entries {
            if !thresholds.contains(&e.score) {
                thresholds.push(e.score);
            }
        }
        Self { pos, neg, thresholds }
    }

    pub fn counts(&self, t: f64) -> (usize, usize) {
        (
            self.pos.iter().filter(|&&v| v >= t).count(),
            self.neg.iter().filter(|&&v| v >= t).count(),
        )
    }

    pub fn sm(&self, cap: f64) -> f64 {
        let mut best = 0.0f64;
        for &t in &self.thresholds {
            let (tp, fp) = self.counts(t);
            if fp as f64 / self.neg.len() as f64 <= cap {
                best = best.max(tp as f64 / self.pos.len() as f64);
            }
        }
        best
    }

    /// Mann-Whitney: probability a positive outranks a negative, ties half.
    pub fn auroc(&self) -> f64 {
        let mut wins = 0.0;
        for &p in &self.pos {
            for &q in &self.neg {
                if p > q {
                    wins += 1.0;
                } else if p == q {
                    wins += 0.5;
                }
            }
        }
        wins / (self.pos.len() * self.neg.len()) as f64
    }

    /// Each distinct score contributes (positives at that score / P) times
    /// the precision of thresholding at it.
    pub fn auprc(&self) -> f64 {
        let mut total = 0.0;
        for &t in &self.thresholds[1..] {
            let at = self.pos.iter().filter(|&&v| v == t).count();
            if at == 0 {
                continue;
            }
            let (tp, fp) = self.counts(t);
            total += at as f64 / self.pos.len() as f64 * tp as f64 / (tp + fp) as f64;
        }
        total
    }

    pub fn f1(&self) -> f64 {
        let (tp, fp) = self.counts(0.5);
        let fn_ = self.pos.len() - tp;
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }

    /// Every (fpr, tpr) pair produced by some threshold, sorted.
    pub fn roc(&self) -> Vec<(f64, f64)> {
        let mut pts: Vec<(f64, f64)> = self
            .thresholds
            .iter()
            .map(|&t| {
                let (tp, fp) = self.counts(t);
                (fp as f64 / self.neg.len() as f64, tp as f64 / self.pos.len() as f64)
            })
            .collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts
    }
}
