//! Toy text pipeline: closed-grammar tokenizer, learned token and
//! positional embeddings, placeholder registration for subject binding,
//! and the null conditioning used by classifier-free guidance.
//!
//! The vocabulary is append-only: ids never change once assigned, and the
//! serialized form (one token per line, order = id) round-trips exactly.

use crate::error::{Result, TidmError};
use crate::numerics::tape::{BoundParams, NodeId, Tape};
use crate::numerics::{ParamStore, Real, Rng, Tensor};
use std::path::Path;

/// Fixed conditioning sequence length.
pub const SEQ_LEN: usize = 8;
/// Text embedding width (also the cross-attention context dim).
pub const EMBED_DIM: usize = 64;

pub const PAD_ID: usize = 0;
pub const NULL_ID: usize = 1;
/// Ids below this are special tokens (<pad>, <null>).
const FIRST_WORD_ID: usize = 2;

pub const TOKEN_EMBED: &str = "cond/token_embed";
pub const POS_EMBED: &str = "cond/pos_embed";

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    pub embed_dim: usize,
    /// Where this vocabulary was last saved/loaded; used in error messages.
    source_path: Option<String>,
}

impl Vocabulary {
    /// Grammar vocabulary for a corpus with the given identity/background
    /// counts: `<pad>`, `<null>`, `ident0..identK-1`, relations, `in`,
    /// `bg0..bgM-1`.
    pub fn new(n_identities: usize, n_backgrounds: usize) -> Vocabulary {
        let mut tokens = vec!["<pad>".to_string(), "<null>".to_string()];
        tokens.extend((0..n_identities).map(|i| format!("ident{i}")));
        tokens.extend(["meets", "shakes", "with", "in"].map(String::from));
        tokens.extend((0..n_backgrounds).map(|i| format!("bg{i}")));
        Vocabulary {
            tokens,
            embed_dim: EMBED_DIM,
            source_path: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    fn path_for_errors(&self) -> String {
        self.source_path
            .clone()
            .unwrap_or_else(|| "<in-memory vocabulary>".to_string())
    }

    /// One token per line, order = id.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| TidmError::io(path.display().to_string(), e))?;
        self.source_path = Some(path.display().to_string());
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TidmError::io(path.display().to_string(), e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.get(PAD_ID).map(String::as_str) != Some("<pad>")
            || tokens.get(NULL_ID).map(String::as_str) != Some("<null>")
        {
            return Err(TidmError::invalid(format!(
                "{}: vocabulary must start with <pad>, <null>",
                path.display()
            )));
        }
        if tokens.iter().any(String::is_empty) {
            return Err(TidmError::invalid(format!(
                "{}: empty token line",
                path.display()
            )));
        }
        Ok(Vocabulary {
            tokens,
            embed_dim: EMBED_DIM,
            source_path: Some(path.display().to_string()),
        })
    }

    /// Lowercase whitespace split, closed grammar, padded/truncated to
    /// `SEQ_LEN`. The empty prompt is the all-pad sequence.
    pub fn tokenize(&self, prompt: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(SEQ_LEN);
        for word in prompt.to_lowercase().split_whitespace() {
            if ids.len() == SEQ_LEN {
                break;
            }
            let id = self.id(word).ok_or_else(|| TidmError::UnknownWord {
                word: word.to_string(),
                vocab_path: self.path_for_errors(),
            })?;
            ids.push(id);
        }
        ids.resize(SEQ_LEN, PAD_ID);
        Ok(ids)
    }

    /// Token ids of the unconditional (null) prompt.
    pub fn null_ids(&self) -> Vec<usize> {
        let mut ids = vec![PAD_ID; SEQ_LEN];
        ids[0] = NULL_ID;
        ids
    }

    /// Initialize fresh embedding tables in `params`.
    pub fn init_embeddings(&self, params: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        let tok = rng
            .sample_standard_normal(&[self.len(), self.embed_dim])?
            .scale(0.05);
        let pos = rng
            .sample_standard_normal(&[SEQ_LEN, self.embed_dim])?
            .scale(0.05);
        params.insert(TOKEN_EMBED.to_string(), tok)?;
        params.insert(POS_EMBED.to_string(), pos)
    }

    /// Append a new placeholder token and give it an embedding initialized
    /// to the mean of the existing non-special embeddings plus small
    /// seeded noise. Ids of existing tokens are unchanged.
    pub fn register_placeholder(
        &mut self,
        params: &mut ParamStore,
        token: &str,
        seed: u64,
    ) -> Result<usize> {
        if token.is_empty()
            || !token
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
        {
            return Err(TidmError::invalid(format!(
                "placeholder {token:?} must match [a-z0-9]+"
            )));
        }
        if self.id(token).is_some() {
            return Err(TidmError::invalid(format!(
                "placeholder {token:?} already registered"
            )));
        }
        let table = params.get(TOKEN_EMBED)?.clone();
        let (v, d) = (table.shape()[0], table.shape()[1]);
        if v != self.len() {
            return Err(TidmError::shape(
                "register_placeholder",
                format!("embedding table has {v} rows for {} tokens", self.len()),
            ));
        }
        // mean over non-special rows
        let mut mean = vec![0.0f32; d];
        let n_words = v - FIRST_WORD_ID;
        for row in FIRST_WORD_ID..v {
            for j in 0..d {
                mean[j] += table.data()[row * d + j] / n_words as f32;
            }
        }
        let mut rng = Rng::new(seed);
        let noise = rng.sample_standard_normal(&[d])?.scale(0.01);
        let mut data = table.data().to_vec();
        data.extend(mean.iter().zip(noise.data()).map(|(m, n)| m + n));
        params.set(TOKEN_EMBED, Tensor::from_vec(vec![v + 1, d], data)?)?;
        self.tokens.push(token.to_string());
        Ok(self.tokens.len() - 1)
    }
}

/// What the denoiser is conditioned on: one prompt's token ids plus an
/// optional anchor latent [4, h, w].
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub token_ids: Vec<usize>,
    pub anchor_latent: Option<Tensor>,
}

impl Conditioning {
    pub fn new(token_ids: Vec<usize>, anchor_latent: Option<Tensor>) -> Result<Conditioning> {
        if token_ids.len() != SEQ_LEN {
            return Err(TidmError::shape(
                "conditioning",
                format!("expected {SEQ_LEN} token ids, got {}", token_ids.len()),
            ));
        }
        Ok(Conditioning {
            token_ids,
            anchor_latent,
        })
    }
}

/// Build the text context [n, SEQ_LEN, embed_dim] on a tape: token
/// embedding lookup plus positional embedding.
pub fn embed_on_tape<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    ids: &[Vec<usize>],
) -> Result<NodeId> {
    let table = bound.id(TOKEN_EMBED)?;
    let vocab_size = tape.value(table).shape()[0];
    for seq in ids {
        if seq.len() != SEQ_LEN {
            return Err(TidmError::shape(
                "embed",
                format!("sequence length {} != {SEQ_LEN}", seq.len()),
            ));
        }
        if let Some(&bad) = seq.iter().find(|&&id| id >= vocab_size) {
            return Err(TidmError::invalid(format!(
                "token id {bad} out of range for vocabulary of {vocab_size}"
            )));
        }
    }
    let e = tape.embedding(table, ids)?;
    tape.add_rows(e, bound.id(POS_EMBED)?)
}

/// Forward-only embedding of a batch of id sequences: [n, SEQ_LEN, embed_dim].
pub fn embed(params: &ParamStore, ids: &[Vec<usize>]) -> Result<Tensor> {
    let mut tape: Tape<f32> = Tape::inference();
    let bound = crate::numerics::bind_params(&mut tape, params);
    let out = embed_on_tape(&mut tape, &bound, ids)?;
    Ok(tape.value(out).clone())
}
