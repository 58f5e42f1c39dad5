//! The unified encoder-decoder transformer.
//!
//! One vocabulary, one next-token objective. Modality payloads are mapped
//! into the shared embedding width by the conv encoders, tagged with learned
//! modality vectors, and given per-modality absolute positions plus bucketed
//! relative-position biases on the attention logits. The decoder is causal,
//! cross-attends to the final encoder states, and shares its output
//! projection with the token embedding table.
//!
//! Architectural switches beyond the vanilla pre-LN transformer:
//! extra LayerNorms after the self-attention and FFN sublayers
//! (`post_sublayer_ln`) and one learnable scalar gain per self-attention
//! head, initialized to 1 (`head_scaling`).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{
    encode_audio, encode_image, encode_video, stack_census, AudioGrid, EncoderSettings, ImageGrid,
    TemporalMode, VideoClip,
};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::rng::{hash_name, CounterRng};
use crate::scalar::Scalar;
use crate::tape::{Var, MASK_VALUE};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

/// Epsilon used by every LayerNorm in the model.
pub const LN_EPS: f64 = 1e-5;

/// Input streams the model can consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
    Video,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Text,
        Modality::Image,
        Modality::Video,
        Modality::Audio,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Video => "video",
            Modality::Audio => "audio",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One contiguous run of same-modality encoder tokens.
#[derive(Debug, Clone)]
pub enum Segment {
    Text(Vec<u32>),
    Image(ImageGrid),
    Video(VideoClip),
    Audio(AudioGrid),
}

impl Segment {
    pub fn modality(&self) -> Modality {
        match self {
            Segment::Text(_) => Modality::Text,
            Segment::Image(_) => Modality::Image,
            Segment::Video(_) => Modality::Video,
            Segment::Audio(_) => Modality::Audio,
        }
    }
}

/// The mixed-modality sequence fed to the encoder.
#[derive(Debug, Clone, Default)]
pub struct EncoderInput {
    pub segments: Vec<Segment>,
}

impl EncoderInput {
    pub fn text(ids: Vec<u32>) -> Self {
        EncoderInput {
            segments: vec![Segment::Text(ids)],
        }
    }

    pub fn push(mut self, segment: Segment) -> Self {
        self.segments.push(segment);
        self
    }

    pub fn modalities(&self) -> BTreeSet<Modality> {
        self.segments.iter().map(|s| s.modality()).collect()
    }
}

/// Everything that determines the parameter census and the forward graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_mult: usize,
    pub max_seq_len: usize,
    pub dropout: f32,
    pub post_sublayer_ln: bool,
    pub head_scaling: bool,
    pub rel_pos_buckets: usize,
    pub rel_pos_max_distance: usize,
    pub modalities: BTreeSet<Modality>,
    pub encoders: EncoderSettings,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            n_enc_layers: 3,
            n_dec_layers: 3,
            ffn_mult: 4,
            max_seq_len: 128,
            dropout: 0.0,
            post_sublayer_ln: true,
            head_scaling: true,
            rel_pos_buckets: 32,
            rel_pos_max_distance: 128,
            modalities: [Modality::Text, Modality::Image].into_iter().collect(),
            encoders: EncoderSettings::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::Config("d_model and n_heads must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return Err(Error::Config("layer counts must be positive".into()));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be positive".into()));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.rel_pos_buckets < 4 || self.rel_pos_buckets % 2 != 0 {
            return Err(Error::Config(format!(
                "rel_pos_buckets {} must be an even number >= 4",
                self.rel_pos_buckets
            )));
        }
        if self.rel_pos_max_distance < self.rel_pos_buckets {
            return Err(Error::Config(format!(
                "rel_pos_max_distance {} smaller than rel_pos_buckets {}",
                self.rel_pos_max_distance, self.rel_pos_buckets
            )));
        }
        if !self.modalities.contains(&Modality::Text) {
            return Err(Error::Config("modality set must include text".into()));
        }
        self.encoders.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every parameter name with its shape, sorted by name.
    ///
    /// This is the single source of truth: `init_store` constructs exactly
    /// this census and checkpoint compatibility is decided against it.
    pub fn parameter_census(&self, vocab_size: usize) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let h = self.n_heads;
        let f = self.ffn_mult * d;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();

        out.push(("embed.tokens".into(), vec![vocab_size, d]));
        for &m in &self.modalities {
            out.push((format!("embed.modality.{m}"), vec![d]));
        }
        out.push(("pos.decoder".into(), vec![self.max_seq_len, d]));
        out.push(("relpos.decoder".into(), vec![self.rel_pos_buckets, h]));
        for &m in &self.modalities {
            out.push((format!("pos.{m}"), vec![self.max_seq_len, d]));
            out.push((format!("relpos.{m}"), vec![self.rel_pos_buckets, h]));
        }

        let ln = |out: &mut Vec<(String, Vec<usize>)>, prefix: String| {
            out.push((format!("{prefix}.scale"), vec![d]));
            out.push((format!("{prefix}.shift"), vec![d]));
        };
        let attn = |out: &mut Vec<(String, Vec<usize>)>, prefix: String| {
            for proj in ["q", "k", "v", "o"] {
                out.push((format!("{prefix}.{proj}.weight"), vec![d, d]));
                out.push((format!("{prefix}.{proj}.bias"), vec![d]));
            }
        };
        let ffn = |out: &mut Vec<(String, Vec<usize>)>, prefix: String| {
            out.push((format!("{prefix}.fc1.weight"), vec![d, f]));
            out.push((format!("{prefix}.fc1.bias"), vec![f]));
            out.push((format!("{prefix}.fc2.weight"), vec![f, d]));
            out.push((format!("{prefix}.fc2.bias"), vec![d]));
        };

        for i in 0..self.n_enc_layers {
            let p = format!("encoder.layer.{i}");
            ln(&mut out, format!("{p}.ln1"));
            attn(&mut out, format!("{p}.attn"));
            if self.head_scaling {
                out.push((format!("{p}.attn.gains"), vec![h]));
            }
            if self.post_sublayer_ln {
                ln(&mut out, format!("{p}.post_attn_ln"));
            }
            ln(&mut out, format!("{p}.ln2"));
            ffn(&mut out, format!("{p}.ffn"));
            if self.post_sublayer_ln {
                ln(&mut out, format!("{p}.post_ffn_ln"));
            }
        }
        ln(&mut out, "encoder.final_ln".into());

        for i in 0..self.n_dec_layers {
            let p = format!("decoder.layer.{i}");
            ln(&mut out, format!("{p}.ln1"));
            attn(&mut out, format!("{p}.self"));
            if self.head_scaling {
                out.push((format!("{p}.self.gains"), vec![h]));
            }
            if self.post_sublayer_ln {
                ln(&mut out, format!("{p}.post_attn_ln"));
            }
            ln(&mut out, format!("{p}.ln_cross"));
            attn(&mut out, format!("{p}.cross"));
            ln(&mut out, format!("{p}.ln2"));
            ffn(&mut out, format!("{p}.ffn"));
            if self.post_sublayer_ln {
                ln(&mut out, format!("{p}.post_ffn_ln"));
            }
        }
        ln(&mut out, "decoder.final_ln".into());

        for &m in &self.modalities {
            let (stack, in_channels, temporal_3d) = match m {
                Modality::Text => continue,
                Modality::Image => (&self.encoders.image, 3, false),
                Modality::Video => (
                    &self.encoders.video,
                    3,
                    self.encoders.video_temporal == TemporalMode::Conv3d,
                ),
                Modality::Audio => (&self.encoders.audio, 1, false),
            };
            out.extend(stack_census(
                &format!("{m}_enc"),
                m.name(),
                stack,
                in_channels,
                d,
                temporal_3d,
            ));
        }

        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Closed-form parameter count; equals the constructed store's `numel`.
    pub fn parameter_count(&self, vocab_size: usize) -> usize {
        self.parameter_census(vocab_size)
            .iter()
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum()
    }
}

/// SHA-256 over the serialized config plus the vocabulary text, truncated to
/// eight bytes. Two checkpoints are merge-compatible only if this matches.
pub fn config_hash(config: &ModelConfig, vocab: &Vocabulary) -> Result<[u8; 8]> {
    let json = serde_json::to_string(config)
        .map_err(|e| Error::Parse(format!("config serialization failed: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    hasher.update(vocab.to_text().as_bytes());
    let digest = hasher.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    Ok(out)
}

/// Builds a freshly initialized parameter store for `config`.
///
/// Each parameter draws from its own counter stream keyed by the parameter
/// name, so initialization is independent of construction order. LayerNorm
/// scales and head gains start at one; shifts and biases at zero; matmul and
/// conv weights are fan-scaled normals (Glorot for matrices, He for conv
/// kernels, whose layout is `[cout, cin, ..]`); embedding and position tables
/// are normal with standard deviation 0.02.
pub fn init_store<S: Scalar>(
    config: &ModelConfig,
    vocab_size: usize,
    seed: u64,
) -> Result<ParamStore<S>> {
    config.validate()?;
    let mut store = ParamStore::new();
    for (name, shape) in config.parameter_census(vocab_size) {
        let numel: usize = shape.iter().product();
        let data: Vec<S> = if name.ends_with(".scale") || name.ends_with(".gains") {
            vec![S::one(); numel]
        } else if name.ends_with(".shift") || name.ends_with(".bias") {
            vec![S::zero(); numel]
        } else {
            let sigma = if name.ends_with(".weight") && shape.len() > 2 {
                let fan_in: usize = shape[1..].iter().product();
                (2.0 / fan_in as f64).sqrt()
            } else if name.ends_with(".weight") && shape.len() == 2 {
                (2.0 / (shape[0] + shape[1]) as f64).sqrt()
            } else {
                0.02
            };
            let mut rng = CounterRng::new(seed, hash_name(&name));
            (0..numel)
                .map(|_| S::from_f64_lossy(sigma * rng.next_normal()))
                .collect()
        };
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

/// A config paired with its parameters.
#[derive(Debug, Clone)]
pub struct UnifiedModel<S: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
}

impl<S: Scalar> UnifiedModel<S> {
    pub fn init(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        let store = init_store(&config, vocab_size, seed)?;
        Ok(UnifiedModel { config, store })
    }

    /// Inference forward: logits `[dec_len, vocab]` with no gradients.
    pub fn forward(&self, input: &EncoderInput, dec_ids: &[u32]) -> Result<Tensor<S>> {
        let mut sess = Session::inference(&self.store);
        let logits = forward_on(&mut sess, &self.config, input, dec_ids, &mut None)?;
        Ok(sess.tape.value(logits).clone())
    }

    /// Final encoder states `[enc_len, d_model]` with no gradients.
    pub fn encode(&self, input: &EncoderInput) -> Result<Tensor<S>> {
        let mut sess = Session::inference(&self.store);
        let out = encode_on(&mut sess, &self.config, input, &mut None)?;
        Ok(sess.tape.value(out).clone())
    }
}

/// T5-style bucket for a signed relative position `memory - query`.
///
/// Half of the buckets cover exact small offsets, the other half log-spaced
/// offsets up to `max_distance`. Bidirectional tables split the range again
/// by sign; unidirectional tables only resolve the past (future offsets land
/// in bucket zero and are expected to be masked).
pub fn rel_bucket(rel: i64, n_buckets: usize, max_distance: usize, bidirectional: bool) -> usize {
    let mut offset = 0usize;
    let mut span = n_buckets;
    let dist = if bidirectional {
        span /= 2;
        if rel > 0 {
            offset = span;
        }
        rel.unsigned_abs() as usize
    } else {
        (-rel).max(0) as usize
    };
    let max_exact = span / 2;
    if dist < max_exact {
        return offset + dist;
    }
    let large = max_exact as f64
        + (dist as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln()
            * (span - max_exact) as f64;
    offset + (large as usize).min(span - 1)
}

/// Bucket ids for every (query, key) pair, restricted to same-modality pairs.
///
/// Returns the flattened `[n*n]` bucket matrix and a same-modality indicator;
/// pairs across modalities carry no relative bias.
fn pair_buckets(
    mod_pos: &[usize],
    modality_of: &[Modality],
    n_buckets: usize,
    max_distance: usize,
) -> (Vec<usize>, Vec<bool>) {
    let n = mod_pos.len();
    let mut buckets = vec![0usize; n * n];
    let mut same = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if modality_of[i] == modality_of[j] {
                let rel = mod_pos[j] as i64 - mod_pos[i] as i64;
                buckets[i * n + j] = rel_bucket(rel, n_buckets, max_distance, true);
                same[i * n + j] = true;
            }
        }
    }
    (buckets, same)
}

/// Per-head `[n, n]` bias matrices gathered from the per-modality tables.
fn encoder_bias_heads<S: Scalar>(
    sess: &mut Session<'_, S>,
    config: &ModelConfig,
    mod_pos: &[usize],
    modality_of: &[Modality],
) -> Result<Vec<Var>> {
    let n = mod_pos.len();
    let (buckets, same) = pair_buckets(
        mod_pos,
        modality_of,
        config.rel_pos_buckets,
        config.rel_pos_max_distance,
    );
    let present: BTreeSet<Modality> = modality_of.iter().copied().collect();
    let mut total: Option<Var> = None;
    for m in present {
        let table = sess.param(&format!("relpos.{m}"))?;
        let gathered = sess.tape.embedding(table, &buckets)?;
        let mask = Tensor::from_fn(vec![n * n, config.n_heads], |idx| {
            let pair = idx / config.n_heads;
            if same[pair] && modality_of[pair / n] == m {
                S::one()
            } else {
                S::zero()
            }
        });
        let mask = sess.tape.leaf(mask);
        let masked = sess.tape.mul(gathered, mask)?;
        total = Some(match total {
            Some(acc) => sess.tape.add(acc, masked)?,
            None => masked,
        });
    }
    let total = total.expect("encoder input has at least one segment");
    split_bias_heads(sess, total, n, config.n_heads)
}

/// Per-head causal-decoder bias matrices from the decoder table.
fn decoder_bias_heads<S: Scalar>(
    sess: &mut Session<'_, S>,
    config: &ModelConfig,
    len: usize,
) -> Result<Vec<Var>> {
    let mut buckets = vec![0usize; len * len];
    for i in 0..len {
        for j in 0..len {
            let rel = j as i64 - i as i64;
            buckets[i * len + j] = rel_bucket(
                rel,
                config.rel_pos_buckets,
                config.rel_pos_max_distance,
                false,
            );
        }
    }
    let table = sess.param("relpos.decoder")?;
    let gathered = sess.tape.embedding(table, &buckets)?;
    split_bias_heads(sess, gathered, len, config.n_heads)
}

fn split_bias_heads<S: Scalar>(
    sess: &mut Session<'_, S>,
    stacked: Var,
    n: usize,
    n_heads: usize,
) -> Result<Vec<Var>> {
    (0..n_heads)
        .map(|h| {
            let col = sess.tape.slice_cols(stacked, h, 1)?;
            sess.tape.reshape(col, vec![n, n])
        })
        .collect()
}

/// Inverted-dropout mask; identity when no RNG is supplied or rate is zero.
fn dropout<S: Scalar>(
    sess: &mut Session<'_, S>,
    x: Var,
    rate: f32,
    rng: &mut Option<CounterRng>,
) -> Result<Var> {
    let Some(rng) = rng.as_mut() else {
        return Ok(x);
    };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate as f64;
    let shape = sess.tape.value(x).shape().to_vec();
    let numel: usize = shape.iter().product();
    let data: Vec<S> = (0..numel)
        .map(|_| {
            if rng.next_f64() < keep {
                S::from_f64_lossy(1.0 / keep)
            } else {
                S::zero()
            }
        })
        .collect();
    let mask = sess.tape.leaf(Tensor::new(shape, data)?);
    sess.tape.mul(x, mask)
}

fn layer_norm<S: Scalar>(sess: &mut Session<'_, S>, prefix: &str, x: Var) -> Result<Var> {
    let scale = sess.param(&format!("{prefix}.scale"))?;
    let shift = sess.param(&format!("{prefix}.shift"))?;
    sess.tape
        .layer_norm(x, scale, shift, S::from_f64_lossy(LN_EPS))
}

/// Multi-head attention. `queries` and `keys` are already normalized inputs;
/// keys double as the value source. `gains` applies one scalar per head.
fn attention<S: Scalar>(
    sess: &mut Session<'_, S>,
    prefix: &str,
    config: &ModelConfig,
    queries: Var,
    keys: Var,
    bias: Option<&[Var]>,
    mask: Option<Var>,
    gains: Option<Var>,
) -> Result<Var> {
    let dh = config.head_dim();
    let scale = S::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let project = |sess: &mut Session<'_, S>, which: &str, x: Var| -> Result<Var> {
        let w = sess.param(&format!("{prefix}.{which}.weight"))?;
        let b = sess.param(&format!("{prefix}.{which}.bias"))?;
        let y = sess.tape.matmul(x, w)?;
        sess.tape.add_bias(y, b)
    };
    let q = project(sess, "q", queries)?;
    let k = project(sess, "k", keys)?;
    let v = project(sess, "v", keys)?;
    let gains = match gains {
        Some(g) => Some(sess.tape.reshape(g, vec![1, config.n_heads])?),
        None => None,
    };

    let mut heads = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let qh = sess.tape.slice_cols(q, h * dh, dh)?;
        let kh = sess.tape.slice_cols(k, h * dh, dh)?;
        let vh = sess.tape.slice_cols(v, h * dh, dh)?;
        let kt = sess.tape.transpose2(kh)?;
        let scores = sess.tape.matmul(qh, kt)?;
        let mut scores = sess.tape.scale(scores, scale)?;
        if let Some(bias) = bias {
            scores = sess.tape.add(scores, bias[h])?;
        }
        if let Some(mask) = mask {
            scores = sess.tape.add(scores, mask)?;
        }
        let attn = sess.tape.softmax_last(scores)?;
        let mut out = sess.tape.matmul(attn, vh)?;
        if let Some(g) = gains {
            let gh = sess.tape.slice_cols(g, h, 1)?;
            out = sess.tape.mul_scalar_var(out, gh)?;
        }
        heads.push(out);
    }
    let merged = sess.tape.concat_cols(&heads)?;
    project(sess, "o", merged)
}

fn feed_forward<S: Scalar>(sess: &mut Session<'_, S>, prefix: &str, x: Var) -> Result<Var> {
    let w1 = sess.param(&format!("{prefix}.fc1.weight"))?;
    let b1 = sess.param(&format!("{prefix}.fc1.bias"))?;
    let w2 = sess.param(&format!("{prefix}.fc2.weight"))?;
    let b2 = sess.param(&format!("{prefix}.fc2.bias"))?;
    let h = sess.tape.matmul(x, w1)?;
    let h = sess.tape.add_bias(h, b1)?;
    let h = sess.tape.gelu(h)?;
    let h = sess.tape.matmul(h, w2)?;
    sess.tape.add_bias(h, b2)
}

struct SublayerCtx<'c> {
    config: &'c ModelConfig,
}

impl<'c> SublayerCtx<'c> {
    /// `x + post_ln(sub)`, with optional dropout on the sublayer output.
    fn residual<S: Scalar>(
        &self,
        sess: &mut Session<'_, S>,
        x: Var,
        sub: Var,
        post_ln: &str,
        rng: &mut Option<CounterRng>,
    ) -> Result<Var> {
        let sub = if self.config.post_sublayer_ln {
            layer_norm(sess, post_ln, sub)?
        } else {
            sub
        };
        let sub = dropout(sess, sub, self.config.dropout, rng)?;
        sess.tape.add(x, sub)
    }
}

/// Assembled encoder embeddings plus per-position modality bookkeeping.
struct AssembledInput {
    var: Var,
    modality_of: Vec<Modality>,
    mod_pos: Vec<usize>,
}

fn assemble_encoder_input<S: Scalar>(
    sess: &mut Session<'_, S>,
    config: &ModelConfig,
    input: &EncoderInput,
) -> Result<AssembledInput> {
    if input.segments.is_empty() {
        return Err(Error::Validity("encoder input has no segments".into()));
    }
    let mut counters: std::collections::BTreeMap<Modality, usize> = Default::default();
    let mut parts = Vec::new();
    let mut modality_of = Vec::new();
    let mut mod_pos = Vec::new();

    for segment in &input.segments {
        let m = segment.modality();
        if !config.modalities.contains(&m) {
            return Err(Error::Capability(format!(
                "model configured without the {m} modality"
            )));
        }
        let tokens = match segment {
            Segment::Text(ids) => {
                let table = sess.param("embed.tokens")?;
                let ids: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
                sess.tape.embedding(table, &ids)?
            }
            Segment::Image(img) => encode_image(sess, &config.encoders, img)?,
            Segment::Video(clip) => encode_video(sess, &config.encoders, clip)?,
            Segment::Audio(grid) => encode_audio(sess, &config.encoders, grid)?,
        };
        let n = sess.tape.value(tokens).dims2()?.0;
        let start = *counters.get(&m).unwrap_or(&0);
        if start + n > config.max_seq_len {
            return Err(Error::Sequence(format!(
                "{m} stream length {} exceeds max_seq_len {}",
                start + n,
                config.max_seq_len
            )));
        }
        counters.insert(m, start + n);
        let pos_ids: Vec<usize> = (start..start + n).collect();
        let pos_table = sess.param(&format!("pos.{m}"))?;
        let pos = sess.tape.embedding(pos_table, &pos_ids)?;
        let sum = sess.tape.add(tokens, pos)?;
        let mod_vec = sess.param(&format!("embed.modality.{m}"))?;
        let tagged = sess.tape.add_bias(sum, mod_vec)?;
        parts.push(tagged);
        modality_of.extend(std::iter::repeat(m).take(n));
        mod_pos.extend(pos_ids);
    }

    let var = if parts.len() == 1 {
        parts[0]
    } else {
        sess.tape.concat_rows(&parts)?
    };
    let total = sess.tape.value(var).dims2()?.0;
    if total > config.max_seq_len {
        return Err(Error::Sequence(format!(
            "encoder sequence length {total} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    Ok(AssembledInput {
        var,
        modality_of,
        mod_pos,
    })
}

/// Runs the encoder stack. Output length equals input token count.
pub fn encode_on<S: Scalar>(
    sess: &mut Session<'_, S>,
    config: &ModelConfig,
    input: &EncoderInput,
    dropout_rng: &mut Option<CounterRng>,
) -> Result<Var> {
    let assembled = assemble_encoder_input(sess, config, input)?;
    let bias = encoder_bias_heads(sess, config, &assembled.mod_pos, &assembled.modality_of)?;
    let ctx = SublayerCtx { config };
    let mut x = dropout(sess, assembled.var, config.dropout, dropout_rng)?;
    for i in 0..config.n_enc_layers {
        let p = format!("encoder.layer.{i}");
        let h = layer_norm(sess, &format!("{p}.ln1"), x)?;
        let gains = if config.head_scaling {
            Some(sess.param(&format!("{p}.attn.gains"))?)
        } else {
            None
        };
        let attn = attention(
            sess,
            &format!("{p}.attn"),
            config,
            h,
            h,
            Some(&bias),
            None,
            gains,
        )?;
        x = ctx.residual(sess, x, attn, &format!("{p}.post_attn_ln"), dropout_rng)?;
        let h = layer_norm(sess, &format!("{p}.ln2"), x)?;
        let ffn = feed_forward(sess, &format!("{p}.ffn"), h)?;
        x = ctx.residual(sess, x, ffn, &format!("{p}.post_ffn_ln"), dropout_rng)?;
    }
    layer_norm(sess, "encoder.final_ln", x)
}

/// Runs the causal decoder over `dec_ids` against frozen-or-live encoder
/// states, returning logits `[dec_len, vocab]` tied to the embedding table.
pub fn decode_on<S: Scalar>(
    sess: &mut Session<'_, S>,
    config: &ModelConfig,
    enc_out: Var,
    dec_ids: &[u32],
    dropout_rng: &mut Option<CounterRng>,
) -> Result<Var> {
    let t = dec_ids.len();
    if t == 0 {
        return Err(Error::Validity("decoder input is empty".into()));
    }
    if t > config.max_seq_len {
        return Err(Error::Sequence(format!(
            "decoder sequence length {t} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    let table = sess.param("embed.tokens")?;
    let ids: Vec<usize> = dec_ids.iter().map(|&i| i as usize).collect();
    let tok = sess.tape.embedding(table, &ids)?;
    let pos_table = sess.param("pos.decoder")?;
    let pos_ids: Vec<usize> = (0..t).collect();
    let pos = sess.tape.embedding(pos_table, &pos_ids)?;
    let x = sess.tape.add(tok, pos)?;
    let mut x = dropout(sess, x, config.dropout, dropout_rng)?;

    let causal = Tensor::from_fn(vec![t, t], |idx| {
        let (i, j) = (idx / t, idx % t);
        if j <= i {
            S::zero()
        } else {
            S::from_f64_lossy(MASK_VALUE)
        }
    });
    let causal = sess.tape.leaf(causal);
    let bias = decoder_bias_heads(sess, config, t)?;
    let ctx = SublayerCtx { config };

    for i in 0..config.n_dec_layers {
        let p = format!("decoder.layer.{i}");
        let h = layer_norm(sess, &format!("{p}.ln1"), x)?;
        let gains = if config.head_scaling {
            Some(sess.param(&format!("{p}.self.gains"))?)
        } else {
            None
        };
        let attn = attention(
            sess,
            &format!("{p}.self"),
            config,
            h,
            h,
            Some(&bias),
            Some(causal),
            gains,
        )?;
        x = ctx.residual(sess, x, attn, &format!("{p}.post_attn_ln"), dropout_rng)?;
        let h = layer_norm(sess, &format!("{p}.ln_cross"), x)?;
        let cross = attention(
            sess,
            &format!("{p}.cross"),
            config,
            h,
            enc_out,
            None,
            None,
            None,
        )?;
        let cross = dropout(sess, cross, config.dropout, dropout_rng)?;
        x = sess.tape.add(x, cross)?;
        let h = layer_norm(sess, &format!("{p}.ln2"), x)?;
        let ffn = feed_forward(sess, &format!("{p}.ffn"), h)?;
        x = ctx.residual(sess, x, ffn, &format!("{p}.post_ffn_ln"), dropout_rng)?;
    }
    let x = layer_norm(sess, "decoder.final_ln", x)?;
    let tied = sess.tape.transpose2(table)?;
    sess.tape.matmul(x, tied)
}

/// Full forward pass: encoder, then decoder, on one session.
pub fn forward_on<S: Scalar>(
    sess: &mut Session<'_, S>,
    config: &ModelConfig,
    input: &EncoderInput,
    dec_ids: &[u32],
    dropout_rng: &mut Option<CounterRng>,
) -> Result<Var> {
    let enc = encode_on(sess, config, input, dropout_rng)?;
    decode_on(sess, config, enc, dec_ids, dropout_rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ConvStack;
    use crate::gradcheck;
    use crate::vocab;

    fn tiny_stack() -> ConvStack {
        ConvStack {
            channels: vec![4, 8],
            kernel: 3,
            stride: 2,
            padding: 1,
        }
    }

    fn tiny_config(modalities: &[Modality]) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            ffn_mult: 2,
            max_seq_len: 48,
            rel_pos_buckets: 8,
            rel_pos_max_distance: 32,
            modalities: modalities.iter().copied().collect(),
            encoders: EncoderSettings {
                image: tiny_stack(),
                video: tiny_stack(),
                audio: tiny_stack(),
                video_window: 2,
                audio_freq_bins: 8,
                ..EncoderSettings::default()
            },
            ..ModelConfig::default()
        }
    }

    fn tiny_image(seed: u64) -> ImageGrid {
        let mut rng = CounterRng::new(seed, 7);
        let data: Vec<f32> = (0..3 * 8 * 8).map(|_| rng.next_f32()).collect();
        ImageGrid::new(8, 8, data).unwrap()
    }

    fn tiny_audio(seed: u64) -> AudioGrid {
        let mut rng = CounterRng::new(seed, 8);
        let data: Vec<f32> = (0..8 * 8).map(|_| rng.next_f32()).collect();
        AudioGrid::new(8, 8, data).unwrap()
    }

    #[test]
    fn census_matches_constructed_store() {
        let config = tiny_config(&Modality::ALL);
        let store = init_store::<f32>(&config, 40, 3).unwrap();
        let census = config.parameter_census(40);
        assert_eq!(census.len(), store.len());
        for (name, shape) in &census {
            assert_eq!(store.get(name).unwrap().shape(), shape.as_slice(), "{name}");
        }
        assert_eq!(config.parameter_count(40), store.numel());
    }

    #[test]
    fn forward_touches_every_parameter() {
        let config = tiny_config(&Modality::ALL);
        let store = init_store::<f32>(&config, 40, 3).unwrap();
        let input = EncoderInput::text(vec![vocab::BOS, 5, 6])
            .push(Segment::Image(tiny_image(1)))
            .push(Segment::Video(
                VideoClip::new(vec![tiny_image(2), tiny_image(3)]).unwrap(),
            ))
            .push(Segment::Audio(tiny_audio(4)));
        let mut sess = Session::inference(&store);
        forward_on(&mut sess, &config, &input, &[vocab::BOS, 9, 10], &mut None).unwrap();
        let bound: Vec<&str> = sess.bound().map(|(n, _)| n).collect();
        let census: Vec<String> = config
            .parameter_census(40)
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(bound, census.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let config = tiny_config(&[Modality::Text, Modality::Image]);
        let a = init_store::<f32>(&config, 40, 11).unwrap();
        let b = init_store::<f32>(&config, 11, 11).is_ok();
        assert!(b);
        let c = init_store::<f32>(&config, 40, 11).unwrap();
        for (name, t) in a.iter() {
            assert_eq!(t.data(), c.get(name).unwrap().data(), "{name}");
        }
        let d = init_store::<f32>(&config, 40, 12).unwrap();
        assert_ne!(
            a.get("embed.tokens").unwrap().data(),
            d.get("embed.tokens").unwrap().data()
        );
    }

    #[test]
    fn forward_is_pure() {
        let config = tiny_config(&[Modality::Text, Modality::Image]);
        let model = UnifiedModel::<f32>::init(config, 40, 5).unwrap();
        let input = EncoderInput::text(vec![4, 5, 6]).push(Segment::Image(tiny_image(9)));
        let dec = [vocab::BOS, 7, 8];
        let a = model.forward(&input, &dec).unwrap();
        let b = model.forward(&input, &dec).unwrap();
        assert_eq!(a.shape(), &[3, 40]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn causality_perturbing_a_late_token_leaves_earlier_logits_bit_identical() {
        let config = tiny_config(&[Modality::Text]);
        let model = UnifiedModel::<f32>::init(config, 40, 5).unwrap();
        let input = EncoderInput::text(vec![4, 5]);
        let a = model.forward(&input, &[vocab::BOS, 7, 8, 9]).unwrap();
        let b = model.forward(&input, &[vocab::BOS, 7, 8, 21]).unwrap();
        let v = a.shape()[1];
        assert_eq!(a.data()[..3 * v], b.data()[..3 * v]);
        assert_ne!(a.data()[3 * v..], b.data()[3 * v..]);
    }

    #[test]
    fn unit_gains_match_disabled_head_scaling_bit_exactly() {
        let with = tiny_config(&[Modality::Text, Modality::Image]);
        let model = UnifiedModel::<f32>::init(with.clone(), 40, 5).unwrap();
        let mut without = with.clone();
        without.head_scaling = false;
        let mut stripped = ParamStore::new();
        for (name, t) in model.store.iter() {
            if !name.ends_with(".gains") {
                stripped.insert(name, t.clone());
            }
        }
        let plain = UnifiedModel {
            config: without,
            store: stripped,
        };
        let input = EncoderInput::text(vec![4, 5, 6]).push(Segment::Image(tiny_image(2)));
        let dec = [vocab::BOS, 7, 8];
        let a = model.forward(&input, &dec).unwrap();
        let b = plain.forward(&input, &dec).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn text_relative_bias_is_translation_invariant() {
        let n = 6;
        let k = 3;
        let base: Vec<usize> = (0..n).collect();
        let shifted: Vec<usize> = (k..k + n).collect();
        let mods = vec![Modality::Text; n];
        let (b0, s0) = pair_buckets(&base, &mods, 8, 32);
        let (b1, s1) = pair_buckets(&shifted, &mods, 8, 32);
        assert_eq!(b0, b1);
        assert_eq!(s0, s1);
    }

    #[test]
    fn cross_modality_pairs_carry_no_bias() {
        let mod_pos = vec![0, 1, 0, 1];
        let mods = vec![
            Modality::Text,
            Modality::Text,
            Modality::Image,
            Modality::Image,
        ];
        let (_, same) = pair_buckets(&mod_pos, &mods, 8, 32);
        assert!(same[0] && same[1] && !same[2] && !same[3]);
        assert!(!same[2 * 4] && same[2 * 4 + 2]);
    }

    #[test]
    fn rel_bucket_ranges_and_symmetry() {
        for rel in -200i64..=200 {
            let b = rel_bucket(rel, 8, 32, true);
            assert!(b < 8);
            let c = rel_bucket(rel, 8, 32, false);
            assert!(c < 8);
        }
        assert_eq!(rel_bucket(0, 8, 32, true), 0);
        assert_ne!(rel_bucket(-1, 8, 32, true), rel_bucket(1, 8, 32, true));
        assert_eq!(rel_bucket(5, 8, 32, false), 0);
    }

    #[test]
    fn sequence_overflow_is_a_sequence_error() {
        let config = tiny_config(&[Modality::Text]);
        let model = UnifiedModel::<f32>::init(config.clone(), 40, 5).unwrap();
        let long = vec![4u32; config.max_seq_len + 1];
        let err = model.forward(&EncoderInput::text(long), &[vocab::BOS]).unwrap_err();
        assert!(matches!(err, Error::Sequence(_)), "{err}");
        let err = model
            .forward(
                &EncoderInput::text(vec![4]),
                &vec![vocab::BOS; config.max_seq_len + 1],
            )
            .unwrap_err();
        assert!(matches!(err, Error::Sequence(_)), "{err}");
    }

    #[test]
    fn missing_modality_is_a_capability_error() {
        let config = tiny_config(&[Modality::Text, Modality::Image]);
        let model = UnifiedModel::<f32>::init(config, 40, 5).unwrap();
        let input = EncoderInput::text(vec![4]).push(Segment::Audio(tiny_audio(1)));
        let err = model.forward(&input, &[vocab::BOS]).unwrap_err();
        assert!(matches!(err, Error::Capability(_)), "{err}");
    }

    #[test]
    fn encoder_output_length_equals_input_token_count() {
        let config = tiny_config(&[Modality::Text, Modality::Image]);
        let model = UnifiedModel::<f32>::init(config.clone(), 40, 5).unwrap();
        let input = EncoderInput::text(vec![4, 5, 6]).push(Segment::Image(tiny_image(1)));
        let out = model.encode(&input).unwrap();
        let image_tokens = config.encoders.image_token_count(8, 8);
        assert_eq!(out.shape(), &[3 + image_tokens, config.d_model]);
    }

    #[test]
    fn config_hash_separates_configs_and_vocabularies() {
        let words: Vec<String> = ["red", "square"].iter().map(|s| s.to_string()).collect();
        let vocab_a = Vocabulary::new(&words, 10, 4).unwrap();
        let more: Vec<String> = ["red", "square", "blue"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let vocab_b = Vocabulary::new(&more, 10, 4).unwrap();
        let config = tiny_config(&[Modality::Text]);
        let mut other = config.clone();
        other.n_heads = 4;
        let h = config_hash(&config, &vocab_a).unwrap();
        assert_eq!(h, config_hash(&config, &vocab_a).unwrap());
        assert_ne!(h, config_hash(&other, &vocab_a).unwrap());
        assert_ne!(h, config_hash(&config, &vocab_b).unwrap());
    }

    #[test]
    fn dropout_zero_rng_present_is_identity_and_nonzero_changes_logits() {
        let mut config = tiny_config(&[Modality::Text]);
        let model = UnifiedModel::<f32>::init(config.clone(), 40, 5).unwrap();
        let input = EncoderInput::text(vec![4, 5]);
        let dec = [vocab::BOS, 7];
        let base = model.forward(&input, &dec).unwrap();

        let mut sess = Session::inference(&model.store);
        let mut rng = Some(CounterRng::new(1, 2));
        let v = forward_on(&mut sess, &config, &input, &dec, &mut rng).unwrap();
        assert_eq!(sess.tape.value(v).data(), base.data());

        config.dropout = 0.5;
        let mut sess = Session::inference(&model.store);
        let mut rng = Some(CounterRng::new(1, 2));
        let v = forward_on(&mut sess, &config, &input, &dec, &mut rng).unwrap();
        assert_ne!(sess.tape.value(v).data(), base.data());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny_config(&[Modality::Text]);
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny_config(&[Modality::Text]);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config(&[Modality::Text]);
        c.modalities.remove(&Modality::Text);
        assert!(c.validate().is_err());
        let mut c = tiny_config(&[Modality::Text]);
        c.rel_pos_buckets = 6;
        assert!(c.validate().is_ok());
        c.rel_pos_buckets = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn one_layer_model_passes_finite_difference_check() {
        let config = tiny_config(&[Modality::Text, Modality::Image]);
        let store = init_store::<f64>(&config, 24, 9).unwrap();
        let input = EncoderInput::text(vec![4, 5, 6]).push(Segment::Image(tiny_image(3)));
        let dec = [vocab::BOS, 7, 9, 11];
        let targets = [7u32, 9, 11, vocab::EOS];
        let report = gradcheck::check_store(
            &store,
            |sess| {
                let logits = forward_on(sess, &config, &input, &dec, &mut None)?;
                let (loss, _) = sess.tape.ce_label_smoothed(logits, &targets, vocab::PAD, 0.1)?;
                Ok(loss)
            },
            2,
            gradcheck::DEFAULT_STEP,
            17,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}
