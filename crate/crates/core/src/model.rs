//! The two-branch classifier.
//!
//! ```text
//! x [B×C×L]
//!   → tokenize (one conv stack per channel)      [B×C×T×D]
//!   → embed (class tokens, positional encodings) [B×(C+1)×(T+1)×D]
//!   ├→ temporal encoder (attention over T+1)  = z_to
//!   └→ spatial encoder  (attention over C+1)  = z_so
//!   → fuse (Q, K from z_to; V from z_so)
//!   → flatten → linear → softmax                 [B×2]
//! ```
//!
//! Column 1 of the output is p(poor).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::rf::{ConvLayer, ConvStackSpec, RfError, DEFAULT_STACK};
use crate::signal::Segment;
use crate::tensor::{Rng, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Rf(#[from] RfError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input has shape {got:?}, model expects [B, {channels}, {len}]")]
    Input {
        got: Vec<usize>,
        channels: usize,
        len: usize,
    },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Full,
    /// Temporal encoder only; the head reads z_to.
    TemporalOnly,
    /// Spatial encoder only; the head reads z_so.
    SpatialOnly,
}

/// Source of the fusion decoder's values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    Spatial,
    Temporal,
}

/// Source of the fusion decoder's queries and keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    TemporalEncoder,
    /// The embedded tokenizer output, before either encoder.
    Tokenizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub segment_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub temporal_layers: usize,
    pub spatial_layers: usize,
    pub conv_stack: Vec<ConvLayer>,
    pub dropout: f64,
    pub decoder_value_source: ValueSource,
    pub fusion_query_source: QuerySource,
    pub architecture: Architecture,
    pub seed: u64,
    pub init_std: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    /// Desk scale: 4 channels, one minute at 25 Hz.
    fn default() -> Self {
        Self {
            channels: 4,
            segment_len: 1500,
            d_model: 8,
            heads: 2,
            ff_mult: 4,
            temporal_layers: 1,
            spatial_layers: 1,
            conv_stack: vec![
                ConvLayer::new(10, 5),
                ConvLayer::new(5, 3),
                ConvLayer::new(3, 2),
                ConvLayer::new(3, 2),
            ],
            dropout: 0.1,
            decoder_value_source: ValueSource::Spatial,
            fusion_query_source: QuerySource::TemporalEncoder,
            architecture: Architecture::Full,
            seed: 0,
            init_std: 0.02,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Full-size configuration: 18 bipolar channels, five minutes at 100 Hz.
    pub fn full_scale() -> Self {
        Self {
            channels: 18,
            segment_len: 30_000,
            d_model: 768,
            heads: 8,
            conv_stack: DEFAULT_STACK.to_vec(),
            ..Self::default()
        }
    }

    pub fn stack_spec(&self) -> ConvStackSpec {
        ConvStackSpec::new(self.conv_stack.clone(), self.segment_len, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.channels == 0 || self.d_model == 0 || self.heads == 0 || self.ff_mult == 0 {
            return fail("channels, d_model, heads and ff_mult must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return fail(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.conv_stack.is_empty() {
            return fail("conv_stack is empty".into());
        }
        if !(self.init_std >= 0.0) || !(self.norm_eps >= 0.0) {
            return fail("init_std and norm_eps must be nonnegative".into());
        }
        self.stack_spec().layer_outputs()?;
        Ok(())
    }

    /// Tokens per channel.
    pub fn tokens(&self) -> Result<usize> {
        Ok(self.stack_spec().token_count()?)
    }

    fn uses_temporal(&self) -> bool {
        self.architecture != Architecture::SpatialOnly
    }

    fn uses_spatial(&self) -> bool {
        self.architecture != Architecture::TemporalOnly
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor) {
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t.with_grad());
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.position(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.position(name)?;
        Ok(&mut self.tensors[i])
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Output handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub tokens: Var,
    pub embedded: Var,
    pub z_to: Option<Var>,
    pub z_so: Option<Var>,
    pub fused: Option<Var>,
    pub logits: Var,
    /// `[B×2]` class probabilities.
    pub probs: Var,
    /// `[B]` p(poor).
    pub p_poor: Var,
    /// Every attention-probability tensor, `[groups × S × S]`, by name.
    pub attention: Vec<(String, Var)>,
}

/// Graph handles for a model's parameters plus per-pass state.
pub struct Pass<'a> {
    pub g: &'a mut Graph,
    vars: Vec<Var>,
    params: &'a ParamStore,
    dropout: Option<(&'a mut Rng, f64)>,
    pub attention: Vec<(String, Var)>,
}

impl<'a> Pass<'a> {
    pub fn p(&self, name: &str) -> Result<Var> {
        Ok(self.vars[self.params.position(name)?])
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rng, p)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        if *p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - *p);
        let mask = (0..self.g.value(x).len())
            .map(|_| if rng.uniform() < *p { 0.0 } else { keep })
            .collect();
        Ok(self.g.mask_mul(x, mask)?)
    }

    /// `x[N×S×Din] · w[Din×Dout] (+ b)`.
    fn linear(&mut self, x: Var, w: &str, b: Option<&str>) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let din = *s.last().expect("rank ≥ 1");
        let rows = s.iter().product::<usize>() / din.max(1);
        let flat = self.g.reshape(x, &[rows, din])?;
        let wv = self.p(w)?;
        let mut y = self.g.matmul(flat, wv)?;
        if let Some(b) = b {
            let bv = self.p(b)?;
            y = self.g.add_broadcast(y, bv)?;
        }
        let dout = self.g.shape(y)[1];
        let mut out = s;
        *out.last_mut().expect("rank ≥ 1") = dout;
        Ok(self.g.reshape(y, &out)?)
    }
}

fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, len, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[n, len, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    Ok(g.reshape(x, &[n * heads, len, d / heads])?)
}

fn merge_heads(g: &mut Graph, x: Var, n: usize, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (len, dh) = (s[1], s[2]);
    let x = g.reshape(x, &[n, heads, len, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    Ok(g.reshape(x, &[n, len, heads * dh])?)
}

impl Model {
    /// Builds and initializes a model from `config.seed`.
    ///
    /// Weights are truncated normal with `init_std`; biases, class tokens
    /// and positional encodings start at zero; norm gains at one.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let (c, d) = (config.channels, config.d_model);
        let t = config.tokens()?;
        let std = config.init_std;
        let mut ps = ParamStore::new();
        let mut weight = |ps: &mut ParamStore, name: String, shape: &[usize]| {
            ps.push(name, Tensor::trunc_normal(shape, std, &mut rng));
        };

        for ch in 0..c {
            for (l, layer) in config.conv_stack.iter().enumerate() {
                let cin = if l == 0 { 1 } else { d };
                weight(&mut ps, format!("tok.{ch}.{l}.w"), &[d, cin, layer.kernel]);
            }
        }
        ps.push("cls_intra".into(), Tensor::zeros(&[c, d]));
        ps.push("pos_intra".into(), Tensor::zeros(&[c, t + 1, d]));
        ps.push("cls_inter".into(), Tensor::zeros(&[t + 1, d]));
        ps.push("pos_inter".into(), Tensor::zeros(&[c + 1, t + 1, d]));

        let mut encoder = |ps: &mut ParamStore, prefix: &str, layers: usize| {
            let f = config.ff_mult * d;
            for i in 0..layers {
                let n = |s: &str| format!("{prefix}.{i}.{s}");
                ps.push(n("ln1.g"), Tensor::ones(&[d]));
                ps.push(n("ln1.b"), Tensor::zeros(&[d]));
                for w in ["wq", "wk", "wv", "wo"] {
                    weight(ps, n(w), &[d, d]);
                }
                ps.push(n("bo"), Tensor::zeros(&[d]));
                ps.push(n("ln2.g"), Tensor::ones(&[d]));
                ps.push(n("ln2.b"), Tensor::zeros(&[d]));
                weight(ps, n("ff1.w"), &[d, f]);
                ps.push(n("ff1.b"), Tensor::zeros(&[f]));
                weight(ps, n("ff2.w"), &[f, d]);
                ps.push(n("ff2.b"), Tensor::zeros(&[d]));
            }
        };
        if config.uses_temporal() {
            encoder(&mut ps, "temporal", config.temporal_layers);
        }
        if config.uses_spatial() {
            encoder(&mut ps, "spatial", config.spatial_layers);
        }
        if config.architecture == Architecture::Full {
            for w in ["fuse.wq", "fuse.wk", "fuse.wv", "fuse.wo"] {
                weight(&mut ps, w.into(), &[d, d]);
            }
            ps.push("fuse.bo".into(), Tensor::zeros(&[d]));
        }
        weight(&mut ps, "head.w".into(), &[(c + 1) * (t + 1) * d, 2]);
        ps.push("head.b".into(), Tensor::zeros(&[2]));
        Ok(Self { config, params: ps })
    }

    /// Registers every parameter as a graph leaf. With `dropout` set, the
    /// pass applies dropout at `config.dropout` using that generator.
    pub fn pass<'a>(&'a self, g: &'a mut Graph, dropout: Option<&'a mut Rng>) -> Pass<'a> {
        let vars = self.params.tensors().iter().map(|t| g.leaf(t)).collect();
        Pass {
            g,
            vars,
            params: &self.params,
            dropout: dropout.map(|r| (r, self.config.dropout)),
            attention: Vec::new(),
        }
    }

    /// Like [`Model::pass`], but with caller-supplied parameter nodes, one
    /// per parameter in store order.
    pub fn pass_with_vars<'a>(
        &'a self,
        g: &'a mut Graph,
        vars: Vec<Var>,
        dropout: Option<&'a mut Rng>,
    ) -> Result<Pass<'a>> {
        if vars.len() != self.params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter nodes, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        Ok(Pass {
            g,
            vars,
            params: &self.params,
            dropout: dropout.map(|r| (r, self.config.dropout)),
            attention: Vec::new(),
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (c, l) = (self.config.channels, self.config.segment_len);
        if shape.len() != 3 || shape[1] != c || shape[2] != l || shape[0] == 0 {
            return Err(ModelError::Input {
                got: shape.to_vec(),
                channels: c,
                len: l,
            });
        }
        Ok(())
    }

    /// `[B×C×L]` → `[B×C×T×D]`. Channel `k` goes through its own stack:
    /// conv → instance norm → GELU on the first layer, conv → GELU after.
    pub fn tokenize(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        self.check_input(pass.g.shape(x))?;
        let b = pass.g.shape(x)[0];
        let (l, d) = (self.config.segment_len, self.config.d_model);
        let mut per_channel = Vec::with_capacity(self.config.channels);
        for ch in 0..self.config.channels {
            let xc = pass.g.select(x, 1, ch)?;
            let mut h = pass.g.reshape(xc, &[b, 1, l])?;
            for (li, layer) in self.config.conv_stack.iter().enumerate() {
                let w = pass.p(&format!("tok.{ch}.{li}.w"))?;
                h = pass.g.conv1d(h, w, layer.stride, layer.padding)?;
                if li == 0 {
                    h = pass.g.instance_norm(h, self.config.norm_eps)?;
                }
                h = pass.g.gelu(h);
            }
            let t = pass.g.shape(h)[2];
            let h = pass.g.permute(h, &[0, 2, 1])?;
            per_channel.push(pass.g.reshape(h, &[b, 1, t, d])?);
        }
        Ok(pass.g.concat(&per_channel, 1)?)
    }

    /// `[B×C×T×D]` → `[B×(C+1)×(T+1)×D]`: prepend CLS_intra along time, add
    /// the intra-channel encoding, prepend CLS_inter along channels, add the
    /// inter-channel encoding.
    pub fn embed(&self, pass: &mut Pass, tokens: Var) -> Result<Var> {
        let s = pass.g.shape(tokens).to_vec();
        let (b, c, t, d) = (s[0], s[1], s[2], s[3]);
        let cls = pass.p("cls_intra")?;
        let cls = pass.g.reshape(cls, &[c, 1, d])?;
        let cls = pass.g.broadcast_leading(cls, b)?;
        let z = pass.g.concat(&[cls, tokens], 2)?;
        let pos = pass.p("pos_intra")?;
        let z = pass.g.add_broadcast(z, pos)?;
        let cls = pass.p("cls_inter")?;
        let cls = pass.g.reshape(cls, &[1, t + 1, d])?;
        let cls = pass.g.broadcast_leading(cls, b)?;
        let z = pass.g.concat(&[cls, z], 1)?;
        let pos = pass.p("pos_inter")?;
        Ok(pass.g.add_broadcast(z, pos)?)
    }

    /// Multi-head scaled dot-product attention over axis 1 of `[N×S×D]`
    /// inputs, without output projection. Records the probabilities.
    pub fn attend(
        &self,
        pass: &mut Pass,
        name: &str,
        qk_src: Var,
        v_src: Var,
        wq: &str,
        wk: &str,
        wv: &str,
    ) -> Result<Var> {
        let n = pass.g.shape(qk_src)[0];
        let h = self.config.heads;
        let dh = self.config.d_model / h;
        let q = pass.linear(qk_src, wq, None)?;
        let k = pass.linear(qk_src, wk, None)?;
        let v = pass.linear(v_src, wv, None)?;
        let q = split_heads(pass.g, q, h)?;
        let k = split_heads(pass.g, k, h)?;
        let v = split_heads(pass.g, v, h)?;
        let scores = pass.g.bmm(q, k, true)?;
        let scores = pass.g.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = pass.g.softmax(scores)?;
        pass.attention.push((name.to_string(), probs));
        let o = pass.g.bmm(probs, v, false)?;
        merge_heads(pass.g, o, n, h)
    }

    /// Pre-norm encoder layer on `[N×S×D]`.
    pub fn encoder_layer(&self, pass: &mut Pass, prefix: &str, x: Var) -> Result<Var> {
        let eps = self.config.norm_eps;
        let n = |s: &str| format!("{prefix}.{s}");
        let (g1, b1) = (pass.p(&n("ln1.g"))?, pass.p(&n("ln1.b"))?);
        let h = pass.g.layer_norm(x, g1, b1, eps)?;
        let a = self.attend(pass, prefix, h, h, &n("wq"), &n("wk"), &n("wv"))?;
        let a = pass.linear(a, &n("wo"), Some(&n("bo")))?;
        let a = pass.dropout(a)?;
        let x = pass.g.add(x, a)?;
        let (g2, b2) = (pass.p(&n("ln2.g"))?, pass.p(&n("ln2.b"))?);
        let h = pass.g.layer_norm(x, g2, b2, eps)?;
        let f = pass.linear(h, &n("ff1.w"), Some(&n("ff1.b")))?;
        let f = pass.g.gelu(f);
        let f = pass.linear(f, &n("ff2.w"), Some(&n("ff2.b")))?;
        let f = pass.dropout(f)?;
        Ok(pass.g.add(x, f)?)
    }

    /// Attention over the (T+1) axis; shape preserved.
    pub fn temporal_encode(&self, pass: &mut Pass, z: Var) -> Result<Var> {
        let s = pass.g.shape(z).to_vec();
        let mut x = pass.g.reshape(z, &[s[0] * s[1], s[2], s[3]])?;
        for i in 0..self.config.temporal_layers {
            x = self.encoder_layer(pass, &format!("temporal.{i}"), x)?;
        }
        Ok(pass.g.reshape(x, &s)?)
    }

    /// Attention over the (C+1) axis; shape preserved.
    pub fn spatial_encode(&self, pass: &mut Pass, z: Var) -> Result<Var> {
        let s = pass.g.shape(z).to_vec();
        let x = pass.g.permute(z, &[0, 2, 1, 3])?;
        let mut x = pass.g.reshape(x, &[s[0] * s[2], s[1], s[3]])?;
        for i in 0..self.config.spatial_layers {
            x = self.encoder_layer(pass, &format!("spatial.{i}"), x)?;
        }
        let x = pass.g.reshape(x, &[s[0], s[2], s[1], s[3]])?;
        Ok(pass.g.permute(x, &[0, 2, 1, 3])?)
    }

    /// Cross-attention along the temporal axis: queries and keys from
    /// `qk`, values from `v`, then an output projection.
    pub fn fuse(&self, pass: &mut Pass, qk: Var, v: Var) -> Result<Var> {
        let s = pass.g.shape(qk).to_vec();
        let flat = [s[0] * s[1], s[2], s[3]];
        let qk = pass.g.reshape(qk, &flat)?;
        let v = pass.g.reshape(v, &flat)?;
        let o = self.attend(pass, "fuse", qk, v, "fuse.wq", "fuse.wk", "fuse.wv")?;
        let o = pass.linear(o, "fuse.wo", Some("fuse.bo"))?;
        Ok(pass.g.reshape(o, &s)?)
    }

    /// Flatten → affine → softmax. Returns (logits, probs).
    pub fn classify(&self, pass: &mut Pass, fused: Var) -> Result<(Var, Var)> {
        let s = pass.g.shape(fused).to_vec();
        let flat = pass.g.reshape(fused, &[s[0], s[1..].iter().product()])?;
        let (w, b) = (pass.p("head.w")?, pass.p("head.b")?);
        let logits = pass.g.matmul(flat, w)?;
        let logits = pass.g.add_broadcast(logits, b)?;
        let probs = pass.g.softmax(logits)?;
        Ok((logits, probs))
    }

    pub fn forward(&self, pass: &mut Pass, x: Var) -> Result<Forward> {
        let tokens = self.tokenize(pass, x)?;
        let embedded = self.embed(pass, tokens)?;
        let z_to = match self.config.uses_temporal() {
            true => Some(self.temporal_encode(pass, embedded)?),
            false => None,
        };
        let z_so = match self.config.uses_spatial() {
            true => Some(self.spatial_encode(pass, embedded)?),
            false => None,
        };
        let (head_in, fused) = match (z_to, z_so) {
            (Some(to), Some(so)) => {
                let qk = match self.config.fusion_query_source {
                    QuerySource::TemporalEncoder => to,
                    QuerySource::Tokenizer => embedded,
                };
                let v = match self.config.decoder_value_source {
                    ValueSource::Spatial => so,
                    ValueSource::Temporal => to,
                };
                let f = self.fuse(pass, qk, v)?;
                (f, Some(f))
            }
            (Some(to), None) => (to, None),
            (None, Some(so)) => (so, None),
            (None, None) => unreachable!("architecture keeps at least one branch"),
        };
        let (logits, probs) = self.classify(pass, head_in)?;
        let p_poor = pass.g.select(probs, 1, 1)?;
        Ok(Forward {
            tokens,
            embedded,
            z_to,
            z_so,
            fused,
            logits,
            probs,
            p_poor,
            attention: pass.attention.clone(),
        })
    }

    /// p(poor) for each example of `x [B×C×L]`, without dropout.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut pass = self.pass(&mut g, None);
        let xv = pass.g.constant(x.clone());
        let out = self.forward(&mut pass, xv)?;
        Ok(g.value(out.p_poor).data().to_vec())
    }

    /// p(poor) for each segment, in batches of `batch`.
    pub fn predict_segments(&self, segs: &[&Segment], batch: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(segs.len());
        for chunk in segs.chunks(batch.max(1)) {
            out.extend(self.predict(&batch_tensor(chunk)?)?);
        }
        Ok(out)
    }
}

/// Stacks segments into `[B×C×L]`.
pub fn batch_tensor(segs: &[&Segment]) -> Result<Tensor> {
    let first = segs.first().ok_or_else(|| ModelError::Config("empty batch".into()))?;
    let (c, l) = (first.n_channels, first.len);
    let mut data = Vec::with_capacity(segs.len() * c * l);
    for s in segs {
        if s.n_channels != c || s.len != l {
            return Err(ModelError::Input {
                got: vec![segs.len(), s.n_channels, s.len],
                channels: c,
                len: l,
            });
        }
        data.extend_from_slice(&s.data);
    }
    Ok(Tensor::new(&[segs.len(), c, l], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: 3,
            segment_len: 60,
            conv_stack: vec![ConvLayer::new(4, 2), ConvLayer::new(3, 3)],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn parameter_shapes() {
        let m = Model::new(tiny()).unwrap();
        let t = m.config.tokens().unwrap();
        assert_eq!(t, 9);
        assert_eq!(m.params.get("tok.2.0.w").unwrap().shape(), &[8, 1, 4]);
        assert_eq!(m.params.get("tok.2.1.w").unwrap().shape(), &[8, 8, 3]);
        assert_eq!(m.params.get("cls_intra").unwrap().shape(), &[3, 8]);
        assert_eq!(m.params.get("cls_inter").unwrap().shape(), &[10, 8]);
        assert_eq!(m.params.get("pos_intra").unwrap().shape(), &[3, 10, 8]);
        assert_eq!(m.params.get("pos_inter").unwrap().shape(), &[4, 10, 8]);
        assert_eq!(m.params.get("head.w").unwrap().shape(), &[4 * 10 * 8, 2]);
        assert!(m.params.get("fuse.wv").is_ok());
    }

    #[test]
    fn ablation_arms_drop_unused_parameters() {
        let t = Model::new(ModelConfig {
            architecture: Architecture::TemporalOnly,
            ..tiny()
        })
        .unwrap();
        assert!(t.params.names().iter().all(|n| !n.starts_with("spatial") && !n.starts_with("fuse")));
        let s = Model::new(ModelConfig {
            architecture: Architecture::SpatialOnly,
            ..tiny()
        })
        .unwrap();
        assert!(s.params.names().iter().all(|n| !n.starts_with("temporal") && !n.starts_with("fuse")));
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig { heads: 3, ..tiny() };
        assert!(matches!(Model::new(bad), Err(ModelError::Config(_))));
        let short = ModelConfig { segment_len: 3, ..tiny() };
        assert!(matches!(Model::new(short), Err(ModelError::Rf(RfError::Infeasible { .. }))));
        let drop = ModelConfig { dropout: 1.0, ..tiny() };
        assert!(Model::new(drop).is_err());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m = Model::new(tiny()).unwrap();
        let x = Tensor::zeros(&[1, 2, 60]);
        assert!(matches!(m.predict(&x), Err(ModelError::Input { .. })));
    }

    #[test]
    fn config_toml_roundtrip() {
        let c = ModelConfig::full_scale();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<ModelConfig>(&text).unwrap(), c);
        assert!(toml::from_str::<ModelConfig>("bogus = 1").is_err());
    }
}
