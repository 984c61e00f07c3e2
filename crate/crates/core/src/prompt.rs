//! Whitespace vocabulary and class-prompt construction.
//!
//! Prompts follow the template `a <modality> of <class>` and are encoded as
//! `<sos> words… <eos> <pad>…`, padded to a fixed length.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;

const SPECIALS: [&str; 3] = ["<pad>", "<sos>", "<eos>"];

const BUILTIN_WORDS: &[&str] = &[
    "a", "an", "of", "the", "image", "photo", "scan", "xray", "x-ray", "ct", "mri", "oct", "fundus", "retina",
    "chest", "brain", "normal", "pneumonia", "bacterial", "viral", "healthy", "disease", "alzheimer", "demented",
    "nondemented", "very", "mild", "moderate", "severe", "cnv", "dme", "drusen", "benign", "malignant",
];

#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !all.contains(&w) {
                all.push(w);
            }
        }
        Vocabulary { words: all }
    }

    pub fn builtin() -> Self {
        Self::new(BUILTIN_WORDS)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        let w = word.to_lowercase();
        self.words
            .iter()
            .position(|x| *x == w)
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange { id, vocab: self.words.len() })
    }

    /// Joins the non-special tokens of `ids` with single spaces.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            if id != PAD && id != SOS {
                words.push(self.word(id)?);
            }
        }
        Ok(words.join(" "))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSpec {
    pub modality: String,
    pub class_names: Vec<String>,
}

impl Default for PromptSpec {
    fn default() -> Self {
        PromptSpec {
            modality: "xray".into(),
            class_names: vec!["normal".into(), "pneumonia".into()],
        }
    }
}

impl PromptSpec {
    pub fn text(&self, class: usize) -> String {
        format!("a {} of {}", self.modality, self.class_names[class])
    }
}

/// Encoded class prompts, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBatch {
    pub ids: Vec<Vec<usize>>,
    /// Position of the end-of-sequence token in each row.
    pub eos_index: Vec<usize>,
}

impl PromptBatch {
    pub fn num_classes(&self) -> usize {
        self.ids.len()
    }

    pub fn flat_ids(&self) -> Vec<usize> {
        self.ids.concat()
    }
}

pub fn build_prompts(spec: &PromptSpec, vocab: &Vocabulary, text_len: usize) -> Result<PromptBatch> {
    if spec.class_names.is_empty() {
        return Err(Error::InvalidArgument("prompt spec has no classes".into()));
    }
    let mut ids = Vec::with_capacity(spec.class_names.len());
    let mut eos_index = Vec::with_capacity(spec.class_names.len());
    for class in 0..spec.class_names.len() {
        let mut row = vec![SOS];
        for word in spec.text(class).split_whitespace() {
            row.push(vocab.id(word)?);
        }
        row.push(EOS);
        if row.len() > text_len {
            return Err(Error::InvalidArgument(format!(
                "prompt {:?} needs {} tokens but text_len is {text_len}",
                spec.text(class),
                row.len()
            )));
        }
        eos_index.push(row.len() - 1);
        row.resize(text_len, PAD);
        ids.push(row);
    }
    Ok(PromptBatch { ids, eos_index })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_class_prompts_end_in_eos() {
        let p = build_prompts(&PromptSpec::default(), &Vocabulary::builtin(), 8).unwrap();
        assert_eq!(p.ids.len(), 2);
        for (row, &eos) in p.ids.iter().zip(&p.eos_index) {
            assert_eq!(row.len(), 8);
            assert_eq!(row[eos], EOS);
            assert!(row[eos + 1..].iter().all(|&t| t == PAD));
            assert!(row[..eos].iter().all(|&t| t != PAD));
        }
    }

    #[test]
    fn identical_classes_encode_identically() {
        let spec = PromptSpec { modality: "mri".into(), class_names: vec!["mild".into(), "mild".into()] };
        let p = build_prompts(&spec, &Vocabulary::builtin(), 8).unwrap();
        assert_eq!(p.ids[0], p.ids[1]);
    }

    #[test]
    fn detokenize_round_trip() {
        let vocab = Vocabulary::builtin();
        let p = build_prompts(&PromptSpec::default(), &vocab, 8).unwrap();
        assert_eq!(vocab.detokenize(&p.ids[1]).unwrap(), "a xray of pneumonia");
        assert_eq!(vocab.detokenize(&p.ids[0]).unwrap(), "a xray of normal");
    }

    #[test]
    fn unknown_word_is_named() {
        let spec = PromptSpec { modality: "xray".into(), class_names: vec!["covid".into()] };
        let err = build_prompts(&spec, &Vocabulary::builtin(), 8).unwrap_err();
        assert!(err.to_string().contains("covid"));
    }

    #[test]
    fn too_long_prompt_rejected() {
        assert!(build_prompts(&PromptSpec::default(), &Vocabulary::builtin(), 5).is_err());
    }

    #[test]
    fn builtin_fits_toy_vocab() {
        assert!(Vocabulary::builtin().len() <= 64);
        assert!(Vocabulary::builtin().len() <= 40);
    }
}
