//! Autoregressive generation: beam search over log-probabilities with a
//! deterministic tie-break, optionally constrained to a closed answer set
//! via a prefix trie.
//!
//! The encoder runs exactly once per call; each decoding step replays the
//! decoder on the growing hypothesis (no KV cache, fine at desk scale).
//! PAD is never proposed and every finished hypothesis either ends with EOS
//! or ran into the length budget.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{decode_on, EncoderInput, UnifiedModel};
use crate::params::Session;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS, PAD};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub beam: usize,
    pub max_len: usize,
    /// Length-normalization exponent; 0 ranks by raw log-probability.
    pub length_penalty: f32,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            beam: 4,
            max_len: 24,
            length_penalty: 0.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// One finished generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    /// Full decoder sequence: BOS, prompt, then the continuation.
    pub ids: Vec<u32>,
    /// The continuation alone (what the model produced).
    pub output: Vec<u32>,
    /// Length-normalized log-probability of the continuation.
    pub score: f64,
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<u32, TrieNode>,
    terminal: bool,
}

/// Prefix tree over the token encodings of a closed answer set.
///
/// Every root-to-leaf path is one answer; EOS is permitted exactly at
/// terminal nodes, so constrained decoding always emits a complete answer.
#[derive(Debug, Clone, Default)]
pub struct AnswerTrie {
    root: TrieNode,
    count: usize,
}

impl AnswerTrie {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_answers<'a, I: IntoIterator<Item = &'a [u32]>>(answers: I) -> Result<Self> {
        let mut trie = Self::new();
        for answer in answers {
            trie.insert(answer)?;
        }
        Ok(trie)
    }

    /// Adds one answer encoding (without the trailing EOS).
    pub fn insert(&mut self, answer: &[u32]) -> Result<()> {
        if answer.is_empty() {
            return Err(Error::Validity("empty answer in trie".into()));
        }
        if answer.iter().any(|&t| t == PAD || t == BOS || t == EOS) {
            return Err(Error::Validity(format!(
                "answer {answer:?} contains reserved tokens"
            )));
        }
        let mut node = &mut self.root;
        for &tok in answer {
            node = node.children.entry(tok).or_default();
        }
        if node.terminal {
            return Err(Error::Validity(format!(
                "duplicate answer path {answer:?}"
            )));
        }
        node.terminal = true;
        self.count += 1;
        Ok(())
    }

    /// Number of distinct answers.
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Tokens that may follow `prefix`, including EOS where an answer ends.
    /// `None` if the prefix leaves the trie.
    pub fn allowed(&self, prefix: &[u32]) -> Option<Vec<u32>> {
        let mut node = &self.root;
        for tok in prefix {
            node = node.children.get(tok)?;
        }
        let mut next: Vec<u32> = node.children.keys().copied().collect();
        if node.terminal {
            next.push(EOS);
        }
        Some(next)
    }

    /// True when `seq` is a complete answer followed by EOS.
    pub fn accepts(&self, seq: &[u32]) -> bool {
        match seq.split_last() {
            Some((&EOS, body)) => {
                let mut node = &self.root;
                for tok in body {
                    match node.children.get(tok) {
                        Some(child) => node = child,
                        None => return false,
                    }
                }
                node.terminal
            }
            _ => false,
        }
    }
}

/// Unconstrained beam search from `BOS + prompt`.
pub fn generate<S: Scalar>(
    model: &UnifiedModel<S>,
    input: &EncoderInput,
    prompt: &[u32],
    cfg: &GenConfig,
) -> Result<Generated> {
    beam_search(model, input, prompt, cfg, None)
}

/// Beam search whose continuations are restricted to complete trie paths.
pub fn generate_constrained<S: Scalar>(
    model: &UnifiedModel<S>,
    input: &EncoderInput,
    prompt: &[u32],
    trie: &AnswerTrie,
    cfg: &GenConfig,
) -> Result<Generated> {
    if trie.is_empty() {
        return Err(Error::Config("constrained decoding needs a non-empty trie".into()));
    }
    beam_search(model, input, prompt, cfg, Some(trie))
}

#[derive(Debug, Clone)]
struct Beam {
    gen: Vec<u32>,
    logp: f64,
    done: bool,
}

fn normalized(logp: f64, gen_len: usize, alpha: f32) -> f64 {
    if alpha == 0.0 {
        return logp;
    }
    logp / (gen_len.max(1) as f64).powf(alpha as f64)
}

fn beam_search<S: Scalar>(
    model: &UnifiedModel<S>,
    input: &EncoderInput,
    prompt: &[u32],
    cfg: &GenConfig,
    trie: Option<&AnswerTrie>,
) -> Result<Generated> {
    cfg.validate()?;
    let enc_out = model.encode(input)?;
    let mut base = vec![BOS];
    base.extend_from_slice(prompt);
    if base.len() >= model.config.max_seq_len {
        return Err(Error::Sequence(format!(
            "prompt length {} leaves no room to generate within max_seq_len {}",
            base.len(),
            model.config.max_seq_len
        )));
    }
    let horizon = cfg.max_len.min(model.config.max_seq_len - base.len());

    let mut beams = vec![Beam {
        gen: Vec::new(),
        logp: 0.0,
        done: false,
    }];
    for _ in 0..horizon {
        if beams.iter().all(|b| b.done) {
            break;
        }
        let mut candidates = Vec::new();
        for beam in &beams {
            if beam.done {
                candidates.push(beam.clone());
                continue;
            }
            let mut dec_ids = base.clone();
            dec_ids.extend_from_slice(&beam.gen);
            let logp = step_logprobs(model, &enc_out, &dec_ids)?;
            let allowed: Vec<u32> = match trie {
                Some(trie) => trie.allowed(&beam.gen).ok_or_else(|| {
                    Error::Contract("beam hypothesis left the answer trie".into())
                })?,
                None => (0..logp.len() as u32).filter(|&t| t != PAD).collect(),
            };
            for tok in allowed {
                let mut gen = beam.gen.clone();
                gen.push(tok);
                candidates.push(Beam {
                    gen,
                    logp: beam.logp + logp[tok as usize],
                    done: tok == EOS,
                });
            }
        }
        candidates.sort_by(|a, b| {
            let sa = normalized(a.logp, a.gen.len(), cfg.length_penalty);
            let sb = normalized(b.logp, b.gen.len(), cfg.length_penalty);
            sb.partial_cmp(&sa)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.gen.cmp(&b.gen))
        });
        candidates.truncate(cfg.beam);
        beams = candidates;
    }

    let best = beams
        .into_iter()
        .min_by(|a, b| {
            let sa = normalized(a.logp, a.gen.len(), cfg.length_penalty);
            let sb = normalized(b.logp, b.gen.len(), cfg.length_penalty);
            sb.partial_cmp(&sa)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.gen.cmp(&b.gen))
        })
        .expect("at least one beam survives");
    let score = normalized(best.logp, best.gen.len(), cfg.length_penalty);
    let mut ids = base;
    ids.extend_from_slice(&best.gen);
    Ok(Generated {
        ids,
        output: best.gen,
        score,
    })
}

/// Log-probabilities over the next token after `dec_ids`, in f64.
fn step_logprobs<S: Scalar>(
    model: &UnifiedModel<S>,
    enc_out: &Tensor<S>,
    dec_ids: &[u32],
) -> Result<Vec<f64>> {
    let mut sess = Session::inference(&model.store);
    let enc = sess.tape.leaf(enc_out.clone());
    let logits = decode_on(&mut sess, &model.config, enc, dec_ids, &mut None)?;
    let t = sess.tape.value(logits).dims2()?.0;
    let v = sess.tape.value(logits).dims2()?.1;
    let row = &sess.tape.value(logits).data()[(t - 1) * v..];
    let vals: Vec<f64> = row.iter().map(|x| x.to_f64_lossy()).collect();
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + vals.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    Ok(vals.into_iter().map(|x| x - lse).collect())
}
