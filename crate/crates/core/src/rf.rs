//! Receptive-field, cumulative-stride and token-count arithmetic for stacks
//! of 1-D convolutions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RfError {
    #[error("layer {layer}: kernel, stride must be ≥ 1 (got kernel {kernel}, stride {stride})")]
    BadLayer {
        layer: usize,
        kernel: usize,
        stride: usize,
    },
    #[error("layer {layer}: input of {input} samples (+2·{padding} padding) is shorter than kernel {kernel}")]
    Infeasible {
        layer: usize,
        input: usize,
        kernel: usize,
        padding: usize,
    },
    #[error("patch length {patch} exceeds signal length {len}")]
    PatchTooLong { len: usize, patch: usize },
    #[error("stack has no layers")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayer {
    pub kernel: usize,
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
}

impl ConvLayer {
    pub const fn new(kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            padding: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvStackSpec {
    pub layers: Vec<ConvLayer>,
    /// Input length in samples.
    pub input_len: usize,
    /// Sample rate in Hz.
    pub fs: f64,
}

/// Seven-layer tokenizer stack producing 12 tokens from a 5-minute, 100 Hz
/// channel.
pub const DEFAULT_STACK: [ConvLayer; 7] = [
    ConvLayer::new(10, 5),
    ConvLayer::new(5, 3),
    ConvLayer::new(5, 3),
    ConvLayer::new(5, 3),
    ConvLayer::new(5, 2),
    ConvLayer::new(3, 3),
    ConvLayer::new(3, 3),
];

/// One column of the reference receptive-field table: the layer list
/// plus the (r, j, o) values printed alongside it.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceStack {
    pub label: &'static str,
    pub layers: [(usize, usize); 7],
    pub listed_r: u64,
    pub listed_j: u64,
    pub listed_o: usize,
}

pub const REFERENCE_STACKS: [ReferenceStack; 5] = [
    ReferenceStack {
        label: "30 secs",
        layers: [(10, 5), (5, 3), (5, 3), (5, 3), (5, 2), (3, 3), (3, 3)],
        listed_r: 2970,
        listed_j: 2430,
        listed_o: 12,
    },
    ReferenceStack {
        label: "20 secs",
        layers: [(10, 5), (5, 4), (5, 3), (5, 2), (5, 2), (3, 3), (3, 3)],
        listed_r: 2160,
        listed_j: 2750,
        listed_o: 13,
    },
    ReferenceStack {
        label: "15 secs",
        layers: [(10, 5), (5, 3), (5, 3), (5, 2), (5, 2), (3, 3), (3, 3)],
        listed_r: 1620,
        listed_j: 2070,
        listed_o: 18,
    },
    ReferenceStack {
        label: "10 secs",
        layers: [(10, 5), (5, 2), (5, 2), (5, 2), (3, 3), (3, 3), (3, 3)],
        listed_r: 1080,
        listed_j: 1190,
        listed_o: 27,
    },
    ReferenceStack {
        label: "5 secs",
        layers: [(10, 5), (5, 3), (5, 2), (5, 2), (3, 2), (3, 2), (3, 2)],
        listed_r: 480,
        listed_j: 1050,
        listed_o: 61,
    },
];

impl ReferenceStack {
    pub fn conv_layers(&self) -> Vec<ConvLayer> {
        self.layers.iter().map(|&(h, s)| ConvLayer::new(h, s)).collect()
    }

    pub fn find(layers: &[ConvLayer]) -> Option<&'static ReferenceStack> {
        REFERENCE_STACKS
            .iter()
            .find(|r| r.conv_layers().as_slice() == layers)
    }
}

impl ConvStackSpec {
    pub fn new(layers: Vec<ConvLayer>, input_len: usize, fs: f64) -> Self {
        Self {
            layers,
            input_len,
            fs,
        }
    }

    fn check_layers(&self) -> Result<(), RfError> {
        if self.layers.is_empty() {
            return Err(RfError::Empty);
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel == 0 || l.stride == 0 {
                return Err(RfError::BadLayer {
                    layer: i + 1,
                    kernel: l.kernel,
                    stride: l.stride,
                });
            }
        }
        Ok(())
    }

    /// Output length of every layer, `o_i = ⌊(o_{i−1} + 2p − h)/s⌋ + 1`.
    pub fn layer_outputs(&self) -> Result<Vec<usize>, RfError> {
        self.check_layers()?;
        let mut prev = self.input_len;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let padded = prev + 2 * l.padding;
            if padded < l.kernel {
                return Err(RfError::Infeasible {
                    layer: i + 1,
                    input: prev,
                    kernel: l.kernel,
                    padding: l.padding,
                });
            }
            prev = (padded - l.kernel) / l.stride + 1;
            out.push(prev);
        }
        Ok(out)
    }

    pub fn token_count(&self) -> Result<usize, RfError> {
        Ok(*self.layer_outputs()?.last().expect("non-empty stack"))
    }

    /// `j_i = j_{i−1}·s_i`, `j_0 = 1`.
    pub fn cumulative_jump(&self) -> Vec<u64> {
        self.layers
            .iter()
            .scan(1u64, |j, l| {
                *j *= l.stride as u64;
                Some(*j)
            })
            .collect()
    }

    /// Recursive form: `r_i = r_{i−1} + (h_i − 1)·j_{i−1}`, `r_0 = 1`.
    pub fn receptive_field(&self) -> Vec<u64> {
        let mut r = 1u64;
        let mut j = 1u64;
        self.layers
            .iter()
            .map(|l| {
                r += (l.kernel as u64 - 1) * j;
                j *= l.stride as u64;
                r
            })
            .collect()
    }

    /// Product form: `r_l = 1 + Σ_{i≤l} (h_i − 1)·Π_{k<i} s_k`.
    pub fn receptive_field_product_form(&self) -> Vec<u64> {
        (1..=self.layers.len())
            .map(|l| {
                1 + (0..l)
                    .map(|i| {
                        let stride_prod: u64 =
                            self.layers[..i].iter().map(|x| x.stride as u64).product();
                        (self.layers[i].kernel as u64 - 1) * stride_prod
                    })
                    .sum::<u64>()
            })
            .collect()
    }

    pub fn report(&self) -> Result<StackReport, RfError> {
        let outputs = self.layer_outputs()?;
        let jumps = self.cumulative_jump();
        let fields = self.receptive_field();
        let r_final = *fields.last().expect("non-empty stack");
        Ok(StackReport {
            layers: self.layers.clone(),
            outputs,
            jumps,
            fields,
            r_seconds: r_final as f64 / self.fs,
            input_len: self.input_len,
            fs: self.fs,
        })
    }
}

/// `T = ⌊(L − D)/s⌋ + 1` windows of length `D` at hop `s`.
pub fn patch_count(len: usize, patch: usize, stride: usize) -> Result<usize, RfError> {
    if stride == 0 || patch == 0 {
        return Err(RfError::BadLayer {
            layer: 0,
            kernel: patch,
            stride,
        });
    }
    if len < patch {
        return Err(RfError::PatchTooLong { len, patch });
    }
    Ok((len - patch) / stride + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StackReport {
    pub layers: Vec<ConvLayer>,
    pub outputs: Vec<usize>,
    pub jumps: Vec<u64>,
    pub fields: Vec<u64>,
    pub r_seconds: f64,
    pub input_len: usize,
    pub fs: f64,
}

impl StackReport {
    pub fn final_tokens(&self) -> usize {
        *self.outputs.last().unwrap()
    }

    pub fn final_jump(&self) -> u64 {
        *self.jumps.last().unwrap()
    }

    pub fn final_field(&self) -> u64 {
        *self.fields.last().unwrap()
    }

    /// Differences between this report and a reference column.
    pub fn mismatches(&self, reference: &ReferenceStack) -> Vec<String> {
        let mut notes = Vec::new();
        if self.final_field() != reference.listed_r {
            notes.push(format!(
                "r: computed {} vs listed {}",
                self.final_field(),
                reference.listed_r
            ));
        }
        if self.final_jump() != reference.listed_j {
            notes.push(format!(
                "j: computed {} vs listed {}",
                self.final_jump(),
                reference.listed_j
            ));
        }
        if self.final_tokens() != reference.listed_o {
            notes.push(format!(
                "o: computed {} vs listed {}",
                self.final_tokens(),
                reference.listed_o
            ));
        }
        notes
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input length L = {} samples, fs = {} Hz", self.input_len, self.fs);
        let _ = writeln!(
            s,
            "{:>5} {:>6} {:>6} {:>7} {:>8} {:>8} {:>10}",
            "layer", "kernel", "stride", "padding", "o", "j", "r"
        );
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:>5} {:>6} {:>6} {:>7} {:>8} {:>8} {:>10}",
                i + 1,
                l.kernel,
                l.stride,
                l.padding,
                self.outputs[i],
                self.jumps[i],
                self.fields[i]
            );
        }
        let _ = writeln!(
            s,
            "final: o = {}, j = {}, r = {} samples ({:.2} s)",
            self.final_tokens(),
            self.final_jump(),
            self.final_field(),
            self.r_seconds
        );
        s
    }
}
