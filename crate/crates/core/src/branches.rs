//! Encoder stub, branch embedding extractors, classification heads, gradient
//! reversal and cosine scoring.
//!
//! The encoder is a small stack of temporal convolutions standing in for a
//! full speaker-verification backbone. Each branch pools its routed features
//! with single-head attentive statistics pooling and projects the pooled
//! statistics to a `D`-dimensional embedding.

use rand::Rng;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};

/// Guard used inside the pooled standard deviation and cosine normalization.
pub const EMBED_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T = Tensor> {
    /// `[C_out, C_in, K]`
    pub weight: T,
    /// `[C_out]`
    pub bias: T,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T = Tensor> {
    pub layers: Vec<ConvLayer<T>>,
}

/// Dense layer `y = x Wᵀ + b`, `W: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

/// Single-head attention for statistics pooling:
/// `e_t = vᵀ tanh(W h_t + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    /// `[A, C]`
    pub w: T,
    /// `[A]`
    pub b: T,
    /// `[A]`
    pub v: T,
}

/// Embedding extractor of one branch: attentive pooling then projection.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams<T = Tensor> {
    pub pool: AttentionParams<T>,
    pub proj: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T = Tensor> {
    /// Speaker class directions `[N_spk, D]` for margin scoring.
    pub speaker: T,
    /// Sex classifier on the sex embedding, 2 classes.
    pub sex: Linear<T>,
    /// Adversarial sex classifier on the identity embedding, 2 classes.
    pub adversary: Linear<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    Identity,
    Sex,
}

/// A batch of utterance embeddings `[B, D]` on a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Embedding {
    pub kind: EmbeddingKind,
    pub vectors: Var,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum BranchError {
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("embeddings have different dimensions: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("degenerate zero embedding (norm {0:e})")]
    DegenerateEmbedding(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl<T> ConvLayer<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> ConvLayer<U> {
        ConvLayer {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
            activation: self.activation,
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> EncoderParams<U> {
        EncoderParams {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("{prefix}.{i}"), f))
                .collect(),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }
}

impl<T> Linear<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Linear<U> {
        Linear {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T> AttentionParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> AttentionParams<U> {
        AttentionParams {
            w: f(&format!("{prefix}.w"), &self.w),
            b: f(&format!("{prefix}.b"), &self.b),
            v: f(&format!("{prefix}.v"), &self.v),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
        f(&format!("{prefix}.v"), &mut self.v);
    }
}

impl<T> BranchParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> BranchParams<U> {
        BranchParams {
            pool: self.pool.map(&format!("{prefix}.pool"), f),
            proj: self.proj.map(&format!("{prefix}.proj"), f),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        self.pool.visit_mut(&format!("{prefix}.pool"), f);
        self.proj.visit_mut(&format!("{prefix}.proj"), f);
    }
}

impl<T> HeadParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> HeadParams<U> {
        HeadParams {
            speaker: f(&format!("{prefix}.speaker"), &self.speaker),
            sex: self.sex.map(&format!("{prefix}.sex"), f),
            adversary: self.adversary.map(&format!("{prefix}.adversary"), f),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.speaker"), &mut self.speaker);
        self.sex.visit_mut(&format!("{prefix}.sex"), f);
        self.adversary.visit_mut(&format!("{prefix}.adversary"), f);
    }
}

impl EncoderParams<Tensor> {
    /// `layers` convolutions of width `width`, He-initialized, relu after each.
    pub fn new<R: Rng + ?Sized>(
        feature_bins: usize,
        channels: usize,
        layers: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..layers)
            .map(|i| {
                let c_in = if i == 0 { feature_bins } else { channels };
                let std = (2.0 / (c_in * width) as f64).sqrt();
                ConvLayer {
                    weight: Tensor::randn([channels, c_in, width], std, rng),
                    bias: Tensor::zeros([channels]),
                    activation: Activation::Relu,
                }
            })
            .collect();
        Self { layers }
    }

    /// Single linear layer whose centre tap is the identity matrix.
    pub fn identity(channels: usize, width: usize) -> Self {
        let mut w = vec![0.0; channels * channels * width];
        for c in 0..channels {
            w[(c * channels + c) * width + width / 2] = 1.0;
        }
        Self {
            layers: vec![ConvLayer {
                weight: Tensor::new([channels, channels, width], w).unwrap(),
                bias: Tensor::zeros([channels]),
                activation: Activation::Identity,
            }],
        }
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().map(|l| l.weight.shape()[0]).unwrap_or(0)
    }
}

impl Linear<Tensor> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn([outputs, inputs], (1.0 / inputs as f64).sqrt(), rng),
            bias: Tensor::zeros([outputs]),
        }
    }

    pub fn identity(size: usize) -> Self {
        let mut w = vec![0.0; size * size];
        for i in 0..size {
            w[i * size + i] = 1.0;
        }
        Self {
            weight: Tensor::new([size, size], w).unwrap(),
            bias: Tensor::zeros([size]),
        }
    }
}

impl AttentionParams<Tensor> {
    pub fn new<R: Rng + ?Sized>(channels: usize, attention_dim: usize, rng: &mut R) -> Self {
        Self {
            w: Tensor::randn([attention_dim, channels], (1.0 / channels as f64).sqrt(), rng),
            b: Tensor::zeros([attention_dim]),
            v: Tensor::randn([attention_dim], (1.0 / attention_dim as f64).sqrt(), rng),
        }
    }
}

impl BranchParams<Tensor> {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        attention_dim: usize,
        embedding_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            pool: AttentionParams::new(channels, attention_dim, rng),
            proj: Linear::new(2 * channels, embedding_dim, rng),
        }
    }
}

impl HeadParams<Tensor> {
    pub fn new<R: Rng + ?Sized>(embedding_dim: usize, speakers: usize, rng: &mut R) -> Self {
        let mut heads = Self {
            speaker: Tensor::randn([speakers, embedding_dim], 1.0, rng),
            sex: Linear::new(embedding_dim, 2, rng),
            adversary: Linear::new(embedding_dim, 2, rng),
        };
        heads.normalize_speaker_rows();
        heads
    }

    /// Rescales each speaker class direction to unit length.
    pub fn normalize_speaker_rows(&mut self) {
        let d = self.speaker.shape()[1];
        for row in self.speaker.data_mut().chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > EMBED_EPS {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }
}

/// Frame-level features `[B,C,T]` from input `[B,F,T]`; temporal length is kept.
pub fn encode(g: &mut Graph, x: Var, params: &EncoderParams<Var>) -> Result<Var, BranchError> {
    if g.shape(x).len() != 3 {
        return Err(BranchError::EmptyInput(format!(
            "expected [B,F,T] input, got {:?}",
            g.shape(x)
        )));
    }
    if params.layers.is_empty() {
        return Err(BranchError::EmptyInput("encoder has no layers".into()));
    }
    let mut h = x;
    for layer in &params.layers {
        h = g.conv1d(h, layer.weight, Some(layer.bias))?;
        h = match layer.activation {
            Activation::Relu => g.relu(h),
            Activation::Identity => h,
        };
    }
    Ok(h)
}

/// Attention weights `[B,T]`, a softmax over frames of `vᵀ tanh(W h_t + b)`.
pub fn attention_weights(
    g: &mut Graph,
    h: Var,
    params: &AttentionParams<Var>,
) -> Result<Var, BranchError> {
    let shape = g.shape(h).to_vec();
    let (b, c, t) = (shape[0], shape[1], shape[2]);
    let a = g.shape(params.w)[0];
    // 1×1 convolutions apply W and v at every frame.
    let w3 = g.reshape(params.w, &[a, c, 1])?;
    let hidden = g.conv1d(h, w3, Some(params.b))?;
    let act = g.tanh(hidden);
    let v3 = g.reshape(params.v, &[1, a, 1])?;
    let energy = g.conv1d(act, v3, None)?;
    let energy = g.reshape(energy, &[b, t])?;
    Ok(g.softmax_last(energy))
}

/// Attentive statistics pooling: `[B,C,T] -> [B,2C]` holding the weighted
/// mean followed by the weighted standard deviation.
pub fn attentive_stats_pool(
    g: &mut Graph,
    h: Var,
    params: &AttentionParams<Var>,
    eps: f64,
) -> Result<Var, BranchError> {
    if g.shape(h).len() != 3 {
        return Err(BranchError::EmptyInput(format!(
            "expected [B,C,T] features, got {:?}",
            g.shape(h)
        )));
    }
    let alpha = attention_weights(g, h, params)?;
    let mean = g.time_weighted_sum(h, alpha)?;
    let sq = g.mul(h, h)?;
    let second = g.time_weighted_sum(sq, alpha)?;
    let mean_sq = g.mul(mean, mean)?;
    let var = g.sub(second, mean_sq)?;
    let var = g.clamp_min(var, eps);
    let std = g.sqrt(var)?;
    Ok(g.concat_last(mean, std)?)
}

/// `x Wᵀ + b`.
pub fn linear(g: &mut Graph, x: Var, params: &Linear<Var>) -> Result<Var, BranchError> {
    let y = g.matmul_nt(x, params.weight)?;
    Ok(g.add_bias(y, params.bias)?)
}

/// Affine projection of pooled statistics onto the unit sphere.
///
/// Keeping embeddings at unit norm stops the reversed adversarial gradient
/// from inflating them, which would otherwise starve the cosine losses.
pub fn embed(
    g: &mut Graph,
    pooled: Var,
    params: &Linear<Var>,
    kind: EmbeddingKind,
) -> Result<Embedding, BranchError> {
    let projected = linear(g, pooled, params)?;
    Ok(Embedding {
        kind,
        vectors: g.l2_normalize(projected, EMBED_EPS)?,
    })
}

/// Full branch extractor: pooling then projection.
pub fn extract(
    g: &mut Graph,
    features: Var,
    params: &BranchParams<Var>,
    kind: EmbeddingKind,
) -> Result<Embedding, BranchError> {
    let pooled = attentive_stats_pool(g, features, &params.pool, EMBED_EPS)?;
    embed(g, pooled, &params.proj, kind)
}

/// Gradient reversal layer of strength `gamma`.
pub fn grl(g: &mut Graph, z: Var, gamma: f64) -> Result<Var, BranchError> {
    Ok(g.grl(z, gamma)?)
}

/// Additive-angular-margin logits `[B, N_spk]`.
///
/// Embeddings and class rows are L2-normalized inside the graph; non-target
/// logits are `s·cos θ_j` and the target logit is `s·cos(θ_y + m)`.
pub fn aam_logits(
    g: &mut Graph,
    z: Var,
    targets: &[usize],
    speaker_rows: Var,
    scale: f64,
    margin: f64,
) -> Result<Var, BranchError> {
    let zn = g.l2_normalize(z, EMBED_EPS)?;
    let wn = g.l2_normalize(speaker_rows, EMBED_EPS)?;
    let cos = g.matmul_nt(zn, wn)?;
    Ok(g.aam_margin(cos, targets, scale, margin)?)
}

/// Cosine similarity of two embeddings, in `[−1, 1]`.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64, BranchError> {
    if a.len() != b.len() {
        return Err(BranchError::DimensionMismatch(a.len(), b.len()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    for n in [na, nb] {
        if !(n > EMBED_EPS) {
            return Err(BranchError::DegenerateEmbedding(n));
        }
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bind(g: &mut Graph, p: &AttentionParams<Tensor>) -> AttentionParams<Var> {
        p.map("pool", &mut |_, t| g.leaf(t.clone()))
    }

    #[test]
    fn identity_encoder_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn([2, 4, 7], 1.0, &mut rng);
        let enc = EncoderParams::identity(4, 3);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let p = enc.map("encoder", &mut |_, t| g.leaf(t.clone()));
        let u = encode(&mut g, xv, &p).unwrap();
        assert_eq!(g.value(u), &x);
    }

    #[test]
    fn zero_input_zero_bias_encodes_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = EncoderParams::new(5, 8, 3, 3, &mut rng);
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::zeros([2, 5, 6]));
        let p = enc.map("encoder", &mut |_, t| g.leaf(t.clone()));
        let u = encode(&mut g, xv, &p).unwrap();
        assert_eq!(g.shape(u), &[2, 8, 6]);
        assert!(g.value(u).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_rejects_bad_input() {
        let enc = EncoderParams::identity(2, 3);
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::zeros([2, 6]));
        let p = enc.map("encoder", &mut |_, t| g.leaf(t.clone()));
        assert!(matches!(encode(&mut g, xv, &p), Err(BranchError::EmptyInput(_))));
        let empty = EncoderParams::<Var> { layers: vec![] };
        let x3 = g.leaf(Tensor::zeros([1, 2, 3]));
        assert!(encode(&mut g, x3, &empty).is_err());
    }

    #[test]
    fn pooling_identical_frames_has_zero_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frame = [0.3, -1.2, 2.5];
        let mut data = Vec::new();
        for &v in &frame {
            data.extend(std::iter::repeat_n(v, 6));
        }
        let mut g = Graph::new();
        let h = g.leaf(Tensor::new([1, 3, 6], data).unwrap());
        let p = bind(&mut g, &AttentionParams::new(3, 4, &mut rng));
        let pooled = attentive_stats_pool(&mut g, h, &p, EMBED_EPS).unwrap();
        let out = g.value(pooled).data();
        for c in 0..3 {
            assert!((out[c] - frame[c]).abs() < 1e-12);
            assert!((out[3 + c] - EMBED_EPS.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_single_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let ht = Tensor::randn([2, 3, 1], 1.0, &mut rng);
        let h = g.leaf(ht.clone());
        let p = bind(&mut g, &AttentionParams::new(3, 4, &mut rng));
        let alpha = attention_weights(&mut g, h, &p).unwrap();
        assert_eq!(g.value(alpha).data(), &[1.0, 1.0]);
        let pooled = attentive_stats_pool(&mut g, h, &p, EMBED_EPS).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                assert_eq!(g.value(pooled).data()[b * 6 + c], ht.data()[b * 3 + c]);
            }
        }
    }

    #[test]
    fn pooling_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (b, c, t, a) = (2, 3, 5, 4);
        let ht = Tensor::randn([b, c, t], 1.0, &mut rng);
        let params = AttentionParams {
            w: Tensor::randn([a, c], 0.7, &mut rng),
            b: Tensor::randn([a], 0.3, &mut rng),
            v: Tensor::randn([a], 0.7, &mut rng),
        };
        let mut g = Graph::new();
        let h = g.leaf(ht.clone());
        let p = bind(&mut g, &params);
        let pooled = attentive_stats_pool(&mut g, h, &p, EMBED_EPS).unwrap();
        let out = g.value(pooled).data();

        let hd = |bi: usize, ci: usize, ti: usize| ht.data()[(bi * c + ci) * t + ti];
        for bi in 0..b {
            let energies: Vec<f64> = (0..t)
                .map(|ti| {
                    (0..a)
                        .map(|ai| {
                            let pre = params.b.data()[ai]
                                + (0..c).map(|ci| params.w.data()[ai * c + ci] * hd(bi, ci, ti)).sum::<f64>();
                            params.v.data()[ai] * pre.tanh()
                        })
                        .sum()
                })
                .collect();
            let m = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = energies.iter().map(|e| (e - m).exp()).sum();
            let alpha: Vec<f64> = energies.iter().map(|e| (e - m).exp() / z).collect();
            assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for ci in 0..c {
                let mu: f64 = (0..t).map(|ti| alpha[ti] * hd(bi, ci, ti)).sum();
                let m2: f64 = (0..t).map(|ti| alpha[ti] * hd(bi, ci, ti).powi(2)).sum();
                let sd = (m2 - mu * mu).max(EMBED_EPS).sqrt();
                assert!((out[bi * 2 * c + ci] - mu).abs() < 1e-12);
                assert!((out[bi * 2 * c + c + ci] - sd).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embed_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let zero = g.leaf(Tensor::zeros([2, 6]));
        let mut lin = Linear::new(6, 4, &mut rng);
        lin.bias = Tensor::zeros([4]);
        let p = lin.map("proj", &mut |_, t| g.leaf(t.clone()));
        assert!(embed(&mut g, zero, &p, EmbeddingKind::Identity).is_err());

        let pooled = Tensor::randn([2, 6], 1.0, &mut rng);
        let x = g.leaf(pooled.clone());
        let p = Linear::identity(6).map("proj", &mut |_, t| g.leaf(t.clone()));
        let e = embed(&mut g, x, &p, EmbeddingKind::Sex).unwrap();
        assert_eq!(e.kind, EmbeddingKind::Sex);
        let out = g.value(e.vectors);
        for (row, src) in out.data().chunks(6).zip(pooled.data().chunks(6)) {
            let norm = src.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in row.iter().zip(src) {
                assert!((a - b / norm).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aam_margin_free_matches_scaled_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let zt = Tensor::randn([3, 4], 1.0, &mut rng);
        let wt = Tensor::randn([5, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let (z, w) = (g.leaf(zt.clone()), g.leaf(wt.clone()));
        let logits = aam_logits(&mut g, z, &[0, 2, 4], w, 30.0, 0.0).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let a = &zt.data()[i * 4..(i + 1) * 4];
                let b = &wt.data()[j * 4..(j + 1) * 4];
                let expect = 30.0 * cosine_score(a, b).unwrap();
                assert!((g.value(logits).data()[i * 5 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aam_target_logit_at_zero_angle() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::new([1, 2], vec![2.0, 0.0]).unwrap());
        let w = g.leaf(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let logits = aam_logits(&mut g, z, &[0], w, 30.0, 0.2).unwrap();
        let v = g.value(logits).data();
        assert!((v[0] - 30.0 * 0.2f64.cos()).abs() < 1e-12);
        assert!((v[0] - 29.4020).abs() < 1e-4);
        assert!(v[1].abs() < 1e-12);
        assert!(matches!(
            aam_logits(&mut g, z, &[2], w, 30.0, 0.2),
            Err(BranchError::Autodiff(AutodiffError::TargetOutOfRange { .. }))
        ));
    }

    #[test]
    fn larger_margin_lowers_target_logit() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::new([1, 2], vec![1.0, 0.7]).unwrap());
        let w = g.leaf(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let mut prev = f64::INFINITY;
        for m in [0.0, 0.1, 0.2, 0.4, 0.8] {
            let l = aam_logits(&mut g, z, &[0], w, 30.0, m).unwrap();
            let v = g.value(l).data()[0];
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn cosine_score_examples() {
        assert!((cosine_score(&[0.3, 0.4], &[0.3, 0.4]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        let s = cosine_score(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            cosine_score(&[0.0, 0.0], &[1.0, 1.0]),
            Err(BranchError::DegenerateEmbedding(_))
        ));
        assert!(cosine_score(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn grl_rejects_negative_strength() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::from_vec(vec![1.0]));
        assert!(grl(&mut g, z, -1.0).is_err());
        let r = grl(&mut g, z, 0.0).unwrap();
        let grads = g.backward(r);
        assert_eq!(grads.wrt(z).data()[0], 0.0);
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in proptest::collection::vec(-5.0f64..5.0, 4),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
            k in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().map(|v| v * v).sum::<f64>() > 1e-6);
            prop_assume!(b.iter().map(|v| v * v).sum::<f64>() > 1e-6);
            let ab = cosine_score(&a, &b).unwrap();
            let ba = cosine_score(&b, &a).unwrap();
            let scaled: Vec<f64> = a.iter().map(|v| v * k).collect();
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert!((cosine_score(&scaled, &b).unwrap() - ab).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn attention_weights_sum_to_one(seed in 0u64..500, t in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let h = g.leaf(Tensor::randn([3, 4, t], 2.0, &mut rng));
            let p = bind(&mut g, &AttentionParams::new(4, 5, &mut rng));
            let alpha = attention_weights(&mut g, h, &p).unwrap();
            for row in g.value(alpha).data().chunks(t) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
