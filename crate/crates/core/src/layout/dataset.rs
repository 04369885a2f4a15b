//! Dataset input: JSON-Lines preference samples.
//!
//! The first-class path is pre-tokenized integer lists. Raw-text datasets can
//! be consumed through two deliberately trivial tokenizers; anything beyond
//! that (chat templates, BPE) must be done upstream. No BOS/EOS tokens are
//! inserted: datasets must include any special tokens they need.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use super::PreferenceSample;
use crate::error::{Error, Result};

/// How to turn dataset lines into token IDs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TokenizerKind {
    /// Lines must carry integer lists.
    #[default]
    PreTokenized,
    /// UTF-8 bytes become IDs 0..=255.
    Bytes,
    /// Whitespace-split words; the vocabulary is the sorted set of words in
    /// the dataset, so IDs are stable for a fixed file.
    Whitespace,
}

impl std::str::FromStr for TokenizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" | "pretokenized" => Ok(TokenizerKind::PreTokenized),
            "bytes" => Ok(TokenizerKind::Bytes),
            "whitespace" => Ok(TokenizerKind::Whitespace),
            other => Err(format!(
                "unknown tokenizer {other:?}, expected pretokenized|bytes|whitespace"
            )),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawSample {
    Tokens {
        prompt: Vec<u32>,
        chosen: Vec<u32>,
        rejected: Vec<u32>,
    },
    Text {
        prompt: String,
        chosen: String,
        rejected: String,
    },
}

/// Load a JSONL preference dataset. Errors name the offending line number.
pub fn load_jsonl(path: &Path, tokenizer: TokenizerKind) -> Result<Vec<PreferenceSample>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open dataset {}: {e}", path.display())))?;
    let mut raw = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: RawSample = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("line {line_no}: malformed sample: {e}")))?;
        raw.push((line_no, sample));
    }
    if raw.is_empty() {
        return Err(Error::Data(format!(
            "dataset {} contains no samples",
            path.display()
        )));
    }

    let vocab = match tokenizer {
        TokenizerKind::Whitespace => Some(build_whitespace_vocab(&raw)?),
        _ => None,
    };

    let mut samples = Vec::with_capacity(raw.len());
    for (line_no, sample) in &raw {
        let decoded = decode_sample(sample, tokenizer, vocab.as_ref())
            .map_err(|e| Error::Data(format!("line {line_no}: {e}")))?;
        samples.push(decoded);
    }
    Ok(samples)
}

fn decode_sample(
    raw: &RawSample,
    tokenizer: TokenizerKind,
    vocab: Option<&BTreeMap<String, u32>>,
) -> std::result::Result<PreferenceSample, String> {
    match (raw, tokenizer) {
        (
            RawSample::Tokens {
                prompt,
                chosen,
                rejected,
            },
            TokenizerKind::PreTokenized,
        ) => PreferenceSample::new(prompt.clone(), chosen.clone(), rejected.clone())
            .map_err(|e| e.to_string()),
        (RawSample::Tokens { .. }, _) => {
            Err("sample is pre-tokenized but a text tokenizer was requested".into())
        }
        (RawSample::Text { .. }, TokenizerKind::PreTokenized) => {
            Err("sample is raw text; pass a tokenizer (bytes or whitespace)".into())
        }
        (
            RawSample::Text {
                prompt,
                chosen,
                rejected,
            },
            TokenizerKind::Bytes,
        ) => PreferenceSample::new(
            tokenize_bytes(prompt),
            tokenize_bytes(chosen),
            tokenize_bytes(rejected),
        )
        .map_err(|e| e.to_string()),
        (
            RawSample::Text {
                prompt,
                chosen,
                rejected,
            },
            TokenizerKind::Whitespace,
        ) => {
            let vocab = vocab.expect("whitespace vocab built in load_jsonl");
            PreferenceSample::new(
                tokenize_whitespace(prompt, vocab),
                tokenize_whitespace(chosen, vocab),
                tokenize_whitespace(rejected, vocab),
            )
            .map_err(|e| e.to_string())
        }
    }
}

fn build_whitespace_vocab(raw: &[(usize, RawSample)]) -> Result<BTreeMap<String, u32>> {
    let mut words = std::collections::BTreeSet::new();
    for (line_no, sample) in raw {
        match sample {
            RawSample::Text {
                prompt,
                chosen,
                rejected,
            } => {
                for text in [prompt, chosen, rejected] {
                    words.extend(text.split_whitespace().map(str::to_owned));
                }
            }
            RawSample::Tokens { .. } => {
                return Err(Error::Data(format!(
                    "line {line_no}: pre-tokenized sample in a text dataset"
                )));
            }
        }
    }
    Ok(words
        .into_iter()
        .enumerate()
        .map(|(i, w)| (w, i as u32))
        .collect())
}

fn tokenize_bytes(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

fn tokenize_whitespace(text: &str, vocab: &BTreeMap<String, u32>) -> Vec<u32> {
    text.split_whitespace()
        .map(|w| *vocab.get(w).expect("vocab covers the dataset"))
        .collect()
}

/// Smallest vocabulary size covering every token ID in the dataset.
pub fn min_vocab_size(samples: &[PreferenceSample]) -> usize {
    samples
        .iter()
        .flat_map(|s| {
            s.prompt
                .iter()
                .chain(s.chosen.iter())
                .chain(s.rejected.iter())
        })
        .map(|&t| t as usize + 1)
        .max()
        .unwrap_or(0)
}

/// Random preference samples with lengths drawn uniformly from the given
/// inclusive ranges. Used by the synthetic benchmarks and tests.
pub fn synthetic_dataset(
    rng: &mut ChaCha8Rng,
    n_samples: usize,
    vocab_size: u32,
    prompt_len: (usize, usize),
    completion_len: (usize, usize),
) -> Vec<PreferenceSample> {
    let draw_len = |range: (usize, usize), rng: &mut ChaCha8Rng| -> usize {
        if range.0 == range.1 {
            range.0
        } else {
            rng.random_range(range.0..=range.1)
        }
    };
    (0..n_samples)
        .map(|_| {
            let p = draw_len(prompt_len, rng);
            let c1 = draw_len(completion_len, rng).max(1);
            let c2 = draw_len(completion_len, rng).max(1);
            let tok = |n: usize, rng: &mut ChaCha8Rng| -> Vec<u32> {
                (0..n).map(|_| rng.random_range(0..vocab_size)).collect()
            };
            PreferenceSample {
                prompt: tok(p, rng),
                chosen: tok(c1, rng),
                rejected: tok(c2, rng),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedSplitter;
    use std::io::Write;

    fn write_dataset(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(file, "{line}").unwrap();
        }
        file.flush().unwrap();
        file
    }

    #[test]
    fn loads_pretokenized() {
        let file = write_dataset(&[
            r#"{"prompt": [1, 2], "chosen": [3], "rejected": [4, 5]}"#,
            r#"{"prompt": [], "chosen": [6, 7], "rejected": [8, 9]}"#,
        ]);
        let samples = load_jsonl(file.path(), TokenizerKind::PreTokenized).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].prompt, vec![1, 2]);
        assert_eq!(min_vocab_size(&samples), 10);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let file = write_dataset(&[
            r#"{"prompt": [1], "chosen": [2], "rejected": [3]}"#,
            r#"{"prompt": [1], "chosen": }"#,
        ]);
        let err = load_jsonl(file.path(), TokenizerKind::PreTokenized).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let file = write_dataset(&[]);
        assert!(load_jsonl(file.path(), TokenizerKind::PreTokenized).is_err());
    }

    #[test]
    fn missing_file_is_an_error() {
        let err = load_jsonl(Path::new("/nonexistent.jsonl"), TokenizerKind::PreTokenized);
        assert!(err.is_err());
    }

    #[test]
    fn byte_tokenizer_maps_bytes() {
        let file = write_dataset(&[r#"{"prompt": "ab", "chosen": "c", "rejected": "de"}"#]);
        let samples = load_jsonl(file.path(), TokenizerKind::Bytes).unwrap();
        assert_eq!(samples[0].prompt, vec![97, 98]);
        assert_eq!(samples[0].chosen, vec![99]);
    }

    #[test]
    fn whitespace_tokenizer_is_sorted_and_stable() {
        let file =
            write_dataset(&[r#"{"prompt": "the cat", "chosen": "sat", "rejected": "ran far"}"#]);
        let samples = load_jsonl(file.path(), TokenizerKind::Whitespace).unwrap();
        // Sorted vocab: cat far ran sat the -> 0 1 2 3 4.
        assert_eq!(samples[0].prompt, vec![4, 0]);
        assert_eq!(samples[0].chosen, vec![3]);
        assert_eq!(samples[0].rejected, vec![2, 1]);
    }

    #[test]
    fn text_without_tokenizer_is_an_error() {
        let file = write_dataset(&[r#"{"prompt": "a", "chosen": "b", "rejected": "c"}"#]);
        let err = load_jsonl(file.path(), TokenizerKind::PreTokenized).unwrap_err();
        assert!(err.to_string().contains("tokenizer"), "{err}");
    }

    #[test]
    fn synthetic_is_reproducible() {
        let mut a = SeedSplitter::new(3).stream("synth");
        let mut b = SeedSplitter::new(3).stream("synth");
        let da = synthetic_dataset(&mut a, 5, 32, (2, 6), (1, 4));
        let db = synthetic_dataset(&mut b, 5, 32, (2, 6), (1, 4));
        assert_eq!(da, db);
        assert!(da
            .iter()
            .all(|s| !s.chosen.is_empty() && !s.rejected.is_empty()));
    }
}
