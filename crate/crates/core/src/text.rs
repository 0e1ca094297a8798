//! Prompt tokenizer and the trainable prompt embedder.
//!
//! Prompts follow the fixed template `remove the <degradation> from the image`,
//! so a closed word-level vocabulary is enough. Id 0 is the `<null>` token; a
//! prompt made only of `<null>` is the unconditional prompt used for guidance
//! and prompt dropout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

pub const NULL_TOKEN: &str = "<null>";
pub const NULL_ID: usize = 0;

/// Default maximum prompt length in tokens.
pub const TEXT_LEN: usize = 8;

const WORDS: [&str; 12] = [
    NULL_TOKEN, "remove", "the", "noise", "rain", "haze", "from", "image", "a", "an", "of", "in",
];

pub const TABLE: &str = "text.table";
pub const POSITIONS: &str = "text.pos";

/// Prompt text for a degradation name.
pub fn prompt_for(degradation: &str) -> String {
    format!("remove the {degradation} from the image")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVocab {
    words: Vec<String>,
    max_len: usize,
}

impl Default for PromptVocab {
    fn default() -> Self {
        Self::with_max_len(TEXT_LEN)
    }
}

impl PromptVocab {
    pub fn with_max_len(max_len: usize) -> Self {
        PromptVocab {
            words: WORDS.iter().map(|w| w.to_string()).collect(),
            max_len,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    /// Word ids padded with `<null>` to `max_len`.
    pub fn tokenize(&self, prompt: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(self.max_len);
        for word in prompt.split_whitespace() {
            let id = self
                .id(word)
                .filter(|&id| id != NULL_ID)
                .ok_or_else(|| Error::UnknownToken {
                    word: word.to_string(),
                    prompt: prompt.to_string(),
                })?;
            ids.push(id);
        }
        if ids.len() > self.max_len {
            return Err(Error::PromptTooLong {
                prompt: prompt.to_string(),
                len: ids.len(),
                max: self.max_len,
            });
        }
        ids.resize(self.max_len, NULL_ID);
        Ok(ids)
    }

    pub fn null_prompt(&self) -> Vec<usize> {
        vec![NULL_ID; self.max_len]
    }
}

/// Token table plus per-position vectors. Positions holding `<null>` get no
/// positional vector, so pad tokens are interchangeable.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedder {
    pub vocab: PromptVocab,
    pub params: ParamSet,
    pub trainable: bool,
}

impl TextEmbedder {
    pub fn new<R: Rng + ?Sized>(vocab: PromptVocab, d_model: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        params.insert(TABLE, Tensor::randn(&[vocab.len(), d_model], 1.0, rng));
        params.insert(
            POSITIONS,
            Tensor::trunc_normal(&[vocab.max_len(), d_model], 0.02, rng),
        );
        TextEmbedder {
            vocab,
            params,
            trainable: false,
        }
    }

    pub fn d_model(&self) -> usize {
        self.params.get(TABLE).expect("table").shape()[1]
    }

    pub fn table(&self) -> &Tensor {
        self.params.get(TABLE).expect("table")
    }

    /// Binds the embedder parameters; they carry gradients only when the
    /// embedder is trainable.
    pub fn bind(&self, tape: &mut Tape, into: &mut Bound) {
        self.params.bind(tape, self.trainable, into);
    }

    /// `[max_len, d_model]` embeddings for a token sequence.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, ids: &[usize]) -> Result<Var> {
        let len = self.vocab.max_len();
        if ids.len() != len {
            return Err(Error::InvalidShape {
                shape: vec![ids.len()],
                reason: format!("token sequence must have length {len}"),
            });
        }
        let d = self.d_model();
        let rows = tape.gather_rows(bound.get(TABLE)?, ids)?;
        let mask = Tensor::from_fn(&[len, d], |i| if ids[i / d] == NULL_ID { 0.0 } else { 1.0 });
        let mask = tape.constant(mask);
        let pos = tape.mul(bound.get(POSITIONS)?, mask)?;
        tape.add(rows, pos)
    }

    /// Embeddings as a plain tensor, outside any training graph.
    pub fn embed_value(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut bound = Bound::new();
        self.params.bind(&mut tape, false, &mut bound);
        let v = self.embed(&mut tape, &bound, ids)?;
        Ok(tape.value(v).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn template_prompt_tokenizes_with_padding() {
        let v = PromptVocab::default();
        let ids = v.tokenize("remove the noise from the image").unwrap();
        assert_eq!(ids.len(), 8);
        assert!(ids[..6].iter().all(|&i| i != NULL_ID));
        assert_eq!(&ids[6..], &[NULL_ID, NULL_ID]);
    }

    #[test]
    fn empty_prompt_is_all_null() {
        let v = PromptVocab::default();
        assert_eq!(v.tokenize("").unwrap(), v.null_prompt());
    }

    #[test]
    fn task_prompts_differ_in_one_position() {
        let v = PromptVocab::default();
        let haze = v.tokenize(&prompt_for("haze")).unwrap();
        let rain = v.tokenize(&prompt_for("rain")).unwrap();
        let diff: Vec<usize> = (0..8).filter(|&i| haze[i] != rain[i]).collect();
        assert_eq!(diff, vec![2]);
    }

    #[test]
    fn tokenization_is_injective_on_task_prompts() {
        let v = PromptVocab::default();
        let mut seqs: Vec<Vec<usize>> = ["noise", "rain", "haze"]
            .iter()
            .map(|d| v.tokenize(&prompt_for(d)).unwrap())
            .collect();
        seqs.push(v.tokenize("").unwrap());
        for i in 0..seqs.len() {
            for j in i + 1..seqs.len() {
                assert_ne!(seqs[i], seqs[j]);
            }
        }
    }

    #[test]
    fn unknown_word_is_reported() {
        let v = PromptVocab::default();
        match v.tokenize("remove the snow from the image") {
            Err(Error::UnknownToken { word, .. }) => assert_eq!(word, "snow"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(v.tokenize("Remove the noise").is_err());
        assert!(v.tokenize("<null>").is_err());
        assert!(v
            .tokenize("remove the the the the the the the the")
            .is_err());
    }

    #[test]
    fn embeddings_are_deterministic_and_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = TextEmbedder::new(PromptVocab::default(), 16, &mut rng);
        let noise = e.vocab.tokenize(&prompt_for("noise")).unwrap();
        let haze = e.vocab.tokenize(&prompt_for("haze")).unwrap();
        let a = e.embed_value(&noise).unwrap();
        assert_eq!(a, e.embed_value(&noise).unwrap());
        let b = e.embed_value(&haze).unwrap();
        for row in 0..8 {
            let same = (0..16).all(|j| a.at(&[row, j]) == b.at(&[row, j]));
            assert_eq!(same, row != 2, "row {row}");
        }
    }

    #[test]
    fn out_of_range_id_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = TextEmbedder::new(PromptVocab::default(), 4, &mut rng);
        let mut ids = e.vocab.null_prompt();
        ids[0] = 99;
        assert!(matches!(
            e.embed_value(&ids),
            Err(Error::TokenOutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn frozen_embedder_gets_no_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut e = TextEmbedder::new(PromptVocab::default(), 4, &mut rng);
        let ids = e.vocab.tokenize(&prompt_for("rain")).unwrap();
        for trainable in [false, true] {
            e.trainable = trainable;
            let mut tape = Tape::new();
            let mut bound = Bound::new();
            e.bind(&mut tape, &mut bound);
            let out = e.embed(&mut tape, &bound, &ids).unwrap();
            let sq = tape.mul(out, out).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap();
            let g = tape.grad(bound.get(TABLE).unwrap());
            assert_eq!(g.is_some(), trainable);
        }
    }
}
