//! The frozen toy vision-language model.
//!
//! The text encoder is `g(t) = normalize(tanh(W·t + b))` where `t` is the
//! concatenation of the `M` context vectors and one class token. Image
//! features are supplied by the caller. Class probabilities are a
//! temperature softmax over cosine similarities between the encoded class
//! prompts and the image feature.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numerics::{self, all_finite, cosine_sim, l2_norm, softmax, ProbVector, RngStream};

/// Sizes, temperature and seed of a [`FrozenVlm`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VlmSpec {
    /// Context length `M`.
    pub m: usize,
    /// Length of the hand-crafted prompt.
    pub m_hand: usize,
    pub tok_dim: usize,
    pub feat_dim: usize,
    /// Number of classes `K`.
    pub k: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for VlmSpec {
    fn default() -> Self {
        Self { m: 16, m_hand: 4, tok_dim: 8, feat_dim: 32, k: 10, tau: 0.01, seed: 0 }
    }
}

impl VlmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.tok_dim == 0 || self.feat_dim == 0 || self.k == 0 {
            return Err(Error::Config(format!("all model sizes must be >= 1: {self:?}")));
        }
        if self.m_hand > self.m {
            return Err(Error::Config(format!(
                "hand prompt length {} exceeds context length {}",
                self.m_hand, self.m
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }

    /// Width of the encoder input, `(M + 1) · tok_dim`.
    pub fn input_dim(&self) -> usize {
        (self.m + 1) * self.tok_dim
    }

    pub fn context_dim(&self) -> usize {
        self.m * self.tok_dim
    }
}

/// Frozen encoder weights, class tokens, hand-crafted prompt and temperature.
///
/// Immutable after construction. Also caches each class token's affine
/// contribution and the teacher's class features.
#[derive(Debug, Clone)]
pub struct FrozenVlm {
    spec: VlmSpec,
    /// `feat_dim × input_dim`, row-major.
    enc_weights: Vec<f64>,
    enc_bias: Vec<f64>,
    /// `k × tok_dim`, row-major.
    class_tokens: Vec<f64>,
    /// `m_hand × tok_dim`, row-major.
    hand_prompt: Vec<f64>,
    /// `W_cls · c_i + b` per class.
    class_offsets: Vec<Vec<f64>>,
    teacher_features: Vec<Vec<f64>>,
}

/// Learnable context vectors, stored flat (`m × tok_dim`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    m: usize,
    tok_dim: usize,
    v: Vec<f64>,
}

impl PromptState {
    pub fn new(m: usize, tok_dim: usize, v: Vec<f64>) -> Result<Self> {
        check_len("prompt", v.len(), m * tok_dim)?;
        if !all_finite(&v) {
            return Err(Error::Numerical("non-finite prompt entry".into()));
        }
        Ok(Self { m, tok_dim, v })
    }

    pub fn from_tokens(tokens: &[Vec<f64>]) -> Result<Self> {
        let tok_dim = tokens.first().map_or(0, Vec::len);
        let mut v = Vec::with_capacity(tokens.len() * tok_dim);
        for t in tokens {
            check_len("prompt token", t.len(), tok_dim)?;
            v.extend_from_slice(t);
        }
        Self::new(tokens.len(), tok_dim, v)
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn tok_dim(&self) -> usize {
        self.tok_dim
    }

    pub fn token(&self, j: usize) -> &[f64] {
        &self.v[j * self.tok_dim..(j + 1) * self.tok_dim]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.v
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.v
    }
}

/// Cosine classifier over image features: one weight vector per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineClassifier {
    k: usize,
    feat_dim: usize,
    weights: Vec<f64>,
}

impl CosineClassifier {
    pub fn new(k: usize, feat_dim: usize, weights: Vec<f64>) -> Result<Self> {
        check_len("classifier weights", weights.len(), k * feat_dim)?;
        if !all_finite(&weights) {
            return Err(Error::Numerical("non-finite classifier weight".into()));
        }
        let cls = Self { k, feat_dim, weights };
        for i in 0..k {
            if l2_norm(cls.row(i)) == 0.0 {
                return Err(Error::Degenerate(format!("classifier row {i} is zero")));
            }
        }
        Ok(cls)
    }

    /// Classifier initialised from the teacher's class features, i.e. the
    /// zero-shot classifier.
    pub fn from_teacher(vlm: &FrozenVlm) -> Self {
        let weights = vlm.teacher_features.iter().flatten().copied().collect();
        Self { k: vlm.spec.k, feat_dim: vlm.spec.feat_dim, weights }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.feat_dim..(i + 1) * self.feat_dim]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.weights
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }
}

/// Intermediate values of one prompt forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub(crate) struct PromptForward {
    /// Unit class features `w_i`.
    pub features: Vec<Vec<f64>>,
    /// `tanh` activations `u_i`, pre-normalisation.
    pub activations: Vec<Vec<f64>>,
    pub act_norms: Vec<f64>,
}

impl FrozenVlm {
    /// Draws a model from `spec.seed`. Encoder weights and bias are
    /// `N(0, 1/fan_in)`; class tokens and the hand prompt are `N(0, 1)`.
    pub fn random(spec: VlmSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = RngStream::new(spec.seed);
        let fan_in = spec.input_dim();
        let std = 1.0 / (fan_in as f64).sqrt();
        let enc_weights = numerics::sample_gaussian(&mut rng, spec.feat_dim * fan_in, 0.0, std)?;
        let enc_bias = numerics::sample_gaussian(&mut rng, spec.feat_dim, 0.0, std)?;
        let class_tokens = numerics::sample_gaussian(&mut rng, spec.k * spec.tok_dim, 0.0, 1.0)?;
        let hand_prompt = if spec.m_hand == 0 {
            Vec::new()
        } else {
            numerics::sample_gaussian(&mut rng, spec.m_hand * spec.tok_dim, 0.0, 1.0)?
        };
        Self::from_parts(spec, enc_weights, enc_bias, class_tokens, hand_prompt)
    }

    pub fn from_parts(
        spec: VlmSpec,
        enc_weights: Vec<f64>,
        enc_bias: Vec<f64>,
        class_tokens: Vec<f64>,
        hand_prompt: Vec<f64>,
    ) -> Result<Self> {
        spec.validate()?;
        check_len("enc_weights", enc_weights.len(), spec.feat_dim * spec.input_dim())?;
        check_len("enc_bias", enc_bias.len(), spec.feat_dim)?;
        check_len("class_tokens", class_tokens.len(), spec.k * spec.tok_dim)?;
        check_len("hand_prompt", hand_prompt.len(), spec.m_hand * spec.tok_dim)?;
        for (name, v) in [
            ("enc_weights", &enc_weights),
            ("enc_bias", &enc_bias),
            ("class_tokens", &class_tokens),
            ("hand_prompt", &hand_prompt),
        ] {
            if !all_finite(v) {
                return Err(Error::Config(format!("{name} has non-finite entries")));
            }
        }
        let mut vlm = Self {
            spec,
            enc_weights,
            enc_bias,
            class_tokens,
            hand_prompt,
            class_offsets: Vec::new(),
            teacher_features: Vec::new(),
        };
        vlm.class_offsets = (0..spec.k).map(|i| vlm.class_offset(vlm.class_token(i))).collect();
        let init = init_prompt(&vlm);
        vlm.teacher_features = class_features(&vlm, &init)?;
        Ok(vlm)
    }

    pub fn spec(&self) -> &VlmSpec {
        &self.spec
    }

    pub fn tau(&self) -> f64 {
        self.spec.tau
    }

    pub fn k(&self) -> usize {
        self.spec.k
    }

    pub fn feat_dim(&self) -> usize {
        self.spec.feat_dim
    }

    pub fn enc_weights(&self) -> &[f64] {
        &self.enc_weights
    }

    pub fn enc_bias(&self) -> &[f64] {
        &self.enc_bias
    }

    pub fn class_token(&self, i: usize) -> &[f64] {
        &self.class_tokens[i * self.spec.tok_dim..(i + 1) * self.spec.tok_dim]
    }

    pub fn hand_prompt(&self) -> &[f64] {
        &self.hand_prompt
    }

    /// Class features of the hand-crafted prompt.
    pub fn teacher_features(&self) -> &[Vec<f64>] {
        &self.teacher_features
    }

    fn weight_row(&self, f: usize) -> &[f64] {
        let n = self.spec.input_dim();
        &self.enc_weights[f * n..(f + 1) * n]
    }

    /// `W_ctx · context`.
    fn context_preactivation(&self, context: &[f64]) -> Vec<f64> {
        let cd = self.spec.context_dim();
        (0..self.spec.feat_dim)
            .map(|f| numerics::dot_unchecked(&self.weight_row(f)[..cd], context))
            .collect()
    }

    /// `W_cls · class_token + b`.
    fn class_offset(&self, class_token: &[f64]) -> Vec<f64> {
        let cd = self.spec.context_dim();
        (0..self.spec.feat_dim)
            .map(|f| numerics::dot_unchecked(&self.weight_row(f)[cd..], class_token) + self.enc_bias[f])
            .collect()
    }

    /// Adds `Wᵀ_ctx · delta` into `out` (length `context_dim`).
    pub(crate) fn backprop_context(&self, delta: &[f64], out: &mut [f64]) {
        let cd = self.spec.context_dim();
        for (f, d) in delta.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(&self.weight_row(f)[..cd]) {
                *o += d * w;
            }
        }
    }

    fn check_prompt(&self, prompt: &PromptState) -> Result<()> {
        check_len("prompt length", prompt.len(), self.spec.m)?;
        check_len("prompt token width", prompt.tok_dim(), self.spec.tok_dim)
    }

    pub(crate) fn forward(&self, prompt: &PromptState) -> Result<PromptForward> {
        self.check_prompt(prompt)?;
        let ctx = self.context_preactivation(prompt.as_flat());
        let mut fwd = PromptForward {
            features: Vec::with_capacity(self.spec.k),
            activations: Vec::with_capacity(self.spec.k),
            act_norms: Vec::with_capacity(self.spec.k),
        };
        for offset in &self.class_offsets {
            let (u, n, w) = activate(&ctx, offset)?;
            fwd.features.push(w);
            fwd.activations.push(u);
            fwd.act_norms.push(n);
        }
        Ok(fwd)
    }
}

fn activate(ctx: &[f64], offset: &[f64]) -> Result<(Vec<f64>, f64, Vec<f64>)> {
    let u: Vec<f64> = ctx.iter().zip(offset).map(|(a, b)| (a + b).tanh()).collect();
    let n = l2_norm(&u);
    if !(n > 1e-300) || !n.is_finite() {
        return Err(Error::Degenerate("text encoder output is numerically zero".into()));
    }
    let w = u.iter().map(|x| x / n).collect();
    Ok((u, n, w))
}

/// Zero context vectors followed by the hand-crafted prompt.
pub fn init_prompt(vlm: &FrozenVlm) -> PromptState {
    let s = vlm.spec;
    let mut v = vec![0.0; s.context_dim()];
    let start = (s.m - s.m_hand) * s.tok_dim;
    v[start..].copy_from_slice(&vlm.hand_prompt);
    PromptState { m: s.m, tok_dim: s.tok_dim, v }
}

/// `g(context ‖ class_token)`: a unit-norm text feature.
pub fn encode_text(vlm: &FrozenVlm, context: &PromptState, class_token: &[f64]) -> Result<Vec<f64>> {
    vlm.check_prompt(context)?;
    check_len("class token", class_token.len(), vlm.spec.tok_dim)?;
    let ctx = vlm.context_preactivation(context.as_flat());
    let offset = vlm.class_offset(class_token);
    Ok(activate(&ctx, &offset)?.2)
}

/// Text features of every class under `prompt`.
pub fn class_features(vlm: &FrozenVlm, prompt: &PromptState) -> Result<Vec<Vec<f64>>> {
    Ok(vlm.forward(prompt)?.features)
}

/// Softmax of `cos(feature_i, x) / τ` over the given class features.
pub fn probs_from_features(features: &[Vec<f64>], x: &[f64], tau: f64) -> Result<ProbVector> {
    let logits = features.iter().map(|w| cosine_sim(w, x)).collect::<Result<Vec<_>>>()?;
    softmax(&logits, tau)
}

/// Prompt-conditioned class probabilities `p(t_i | x)`.
pub fn predict_probs(vlm: &FrozenVlm, prompt: &PromptState, x: &[f64]) -> Result<ProbVector> {
    check_len("image feature", x.len(), vlm.spec.feat_dim)?;
    let features = class_features(vlm, prompt)?;
    probs_from_features(&features, x, vlm.spec.tau)
}

/// Zero-shot teacher probabilities, i.e. [`predict_probs`] at [`init_prompt`].
pub fn zero_shot_probs(vlm: &FrozenVlm, x: &[f64]) -> Result<ProbVector> {
    check_len("image feature", x.len(), vlm.spec.feat_dim)?;
    probs_from_features(&vlm.teacher_features, x, vlm.spec.tau)
}

pub fn cosine_classifier_probs(cls: &CosineClassifier, x: &[f64], tau: f64) -> Result<ProbVector> {
    check_len("image feature", x.len(), cls.feat_dim)?;
    let logits = (0..cls.k)
        .map(|i| {
            let row = cls.row(i);
            if l2_norm(row) == 0.0 {
                return Err(Error::Degenerate(format!("classifier row {i} is zero")));
            }
            cosine_sim(row, x)
        })
        .collect::<Result<Vec<_>>>()?;
    softmax(&logits, tau)
}

#[derive(Serialize, Deserialize)]
struct VlmDocument {
    dims: VlmDims,
    tau: f64,
    seed: u64,
    enc_weights: Vec<f64>,
    enc_bias: Vec<f64>,
    class_tokens: Vec<f64>,
    hand_prompt: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct VlmDims {
    m: usize,
    m_hand: usize,
    tok_dim: usize,
    feat_dim: usize,
    k: usize,
}

impl Serialize for FrozenVlm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let sp = self.spec;
        VlmDocument {
            dims: VlmDims { m: sp.m, m_hand: sp.m_hand, tok_dim: sp.tok_dim, feat_dim: sp.feat_dim, k: sp.k },
            tau: sp.tau,
            seed: sp.seed,
            enc_weights: self.enc_weights.clone(),
            enc_bias: self.enc_bias.clone(),
            class_tokens: self.class_tokens.clone(),
            hand_prompt: self.hand_prompt.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FrozenVlm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = VlmDocument::deserialize(d)?;
        let spec = VlmSpec {
            m: doc.dims.m,
            m_hand: doc.dims.m_hand,
            tok_dim: doc.dims.tok_dim,
            feat_dim: doc.dims.feat_dim,
            k: doc.dims.k,
            tau: doc.tau,
            seed: doc.seed,
        };
        FrozenVlm::from_parts(spec, doc.enc_weights, doc.enc_bias, doc.class_tokens, doc.hand_prompt)
            .map_err(serde::de::Error::custom)
    }
}
