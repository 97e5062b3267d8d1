//! Synthetic corpus: Zipf-distributed pseudo-words with local repetition, so
//! masked positions are often recoverable from nearby context and training
//! tests need no external data.  Documents are packed into one id stream with
//! separator tokens; training samples fixed-length windows from the stream.

use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::Zipf;

use crate::error::{Error, Result};
use crate::pretrain::vocab::{Vocab, SEP_ID, SPECIALS};
use crate::rng::Rng;

/// Deterministic pseudo-word list: two-syllable then three-syllable
/// combinations of a fixed syllable inventory, in rank order.
pub fn word_list(count: usize) -> Vec<String> {
    const SYL: [&str; 24] = [
        "ba", "be", "bi", "bo", "da", "de", "di", "do", "ka", "ke", "ki", "ko", "la", "le", "li",
        "lo", "ma", "me", "mi", "mo", "na", "ne", "ni", "no",
    ];
    let mut words = Vec::with_capacity(count);
    'outer: for len in 2..=4 {
        let combos = SYL.len().pow(len);
        for mut ix in 0..combos {
            let mut w = String::new();
            for _ in 0..len {
                w.push_str(SYL[ix % SYL.len()]);
                ix /= SYL.len();
            }
            words.push(w);
            if words.len() == count {
                break 'outer;
            }
        }
    }
    assert_eq!(words.len(), count, "syllable inventory exhausted");
    words
}

/// Shape of the generated corpus.
#[derive(Debug, Clone, Copy)]
pub struct CorpusSpec {
    pub num_docs: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Zipf rank exponent over the word list.
    pub zipf_exponent: f64,
    /// Probability the next word repeats one of the last few words.
    pub repeat_prob: f64,
    /// How far back repetition reaches.
    pub repeat_window: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        // The repetition parameters are deliberately aggressive: a masked
        // token should usually be recoverable from the surrounding window,
        // so a small model trained briefly can cut its loss well below the
        // unigram entropy.  A fresh Zipf draw still happens at every third
        // position or so, keeping the stream from degenerating.
        CorpusSpec {
            num_docs: 600,
            min_words: 80,
            max_words: 160,
            zipf_exponent: 1.2,
            repeat_prob: 0.72,
            repeat_window: 2,
        }
    }
}

/// Generates `spec.num_docs` lines, one document per line, drawing from
/// `words`.  Deterministic in `rng`.
pub fn generate_corpus(spec: &CorpusSpec, words: &[String], rng: &mut Rng) -> Result<String> {
    if words.is_empty() {
        return Err(Error::Config("corpus needs a nonempty word list".into()));
    }
    if spec.min_words == 0 || spec.min_words > spec.max_words {
        return Err(Error::Config(format!(
            "document length range {}..={} invalid",
            spec.min_words, spec.max_words
        )));
    }
    if !(0.0..=1.0).contains(&spec.repeat_prob) || spec.repeat_window == 0 {
        return Err(Error::Config("repetition parameters invalid".into()));
    }
    let zipf = Zipf::new(words.len() as f64, spec.zipf_exponent)
        .map_err(|e| Error::Config(format!("zipf exponent rejected: {e}")))?;
    let mut out = String::new();
    let mut recent: Vec<usize> = Vec::with_capacity(spec.repeat_window);
    for _ in 0..spec.num_docs {
        recent.clear();
        let len = rng.random_range(spec.min_words..=spec.max_words);
        for i in 0..len {
            let ix = if !recent.is_empty() && rng.random::<f64>() < spec.repeat_prob {
                recent[rng.random_range(0..recent.len())]
            } else {
                (zipf.sample(rng) as usize).clamp(1, words.len()) - 1
            };
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&words[ix]);
            if recent.len() == spec.repeat_window {
                recent.remove(0);
            }
            recent.push(ix);
        }
        out.push('\n');
    }
    Ok(out)
}

/// A vocabulary covering everything the generator can emit: the specials
/// followed by the first `num_words` pseudo-words in rank order.
pub fn generated_vocab(num_words: usize) -> Result<Vocab> {
    Vocab::from_tokens(
        SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(word_list(num_words)),
    )
}

/// Tokenizes one-document-per-line text and joins documents with the
/// separator token: the fixed-window packing used for training.
pub fn pack_corpus(vocab: &Vocab, text: &str) -> Vec<u32> {
    let mut ids = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        ids.extend(vocab.tokenize(line));
        ids.push(SEP_ID);
    }
    ids
}

/// Samples `count` windows of `len` ids uniformly from the packed stream.
pub fn sample_windows(
    packed: &[u32],
    len: usize,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<u32>>> {
    if packed.len() < len || len == 0 {
        return Err(Error::Length {
            what: "packed corpus",
            got: packed.len(),
            limit: len,
        });
    }
    Ok((0..count)
        .map(|_| {
            let start = rng.random_range(0..=packed.len() - len);
            packed[start..start + len].to_vec()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretrain::vocab::UNK_ID;
    use crate::rng::{self, salt};

    #[test]
    fn word_list_is_deterministic_lowercase_unique() {
        let a = word_list(996);
        let b = word_list(996);
        assert_eq!(a, b);
        let mut dedup = a.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), a.len());
        assert!(a.iter().all(|w| w.chars().all(|c| c.is_ascii_lowercase())));
    }

    #[test]
    fn corpus_is_seed_deterministic_and_fully_in_vocab() {
        let words = word_list(200);
        let spec = CorpusSpec {
            num_docs: 20,
            ..CorpusSpec::default()
        };
        let text1 = generate_corpus(&spec, &words, &mut rng::stream(7, salt::CORPUS)).unwrap();
        let text2 = generate_corpus(&spec, &words, &mut rng::stream(7, salt::CORPUS)).unwrap();
        assert_eq!(text1, text2);
        assert_eq!(text1.lines().count(), 20);

        let vocab = generated_vocab(200).unwrap();
        let packed = pack_corpus(&vocab, &text1);
        assert!(!packed.contains(&UNK_ID), "generator strayed outside vocab");
        assert_eq!(packed.iter().filter(|&&t| t == SEP_ID).count(), 20);
    }

    #[test]
    fn corpus_has_local_repetition_structure() {
        let words = word_list(500);
        let spec = CorpusSpec::default();
        let text =
            generate_corpus(&spec, &words, &mut rng::stream(11, salt::CORPUS)).unwrap();
        let vocab = generated_vocab(500).unwrap();
        let packed = pack_corpus(&vocab, &text);
        // fraction of tokens that reappear within the previous 8 positions
        let mut repeats = 0usize;
        for i in 1..packed.len() {
            let lo = i.saturating_sub(8);
            if packed[lo..i].contains(&packed[i]) {
                repeats += 1;
            }
        }
        let frac = repeats as f64 / (packed.len() - 1) as f64;
        assert!(
            frac > 0.30,
            "expected strong local repetition, measured {frac:.3}"
        );
    }

    #[test]
    fn window_sampling_is_bounded_and_reproducible() {
        let packed: Vec<u32> = (0..100).map(|i| 4 + (i % 50)).collect();
        let w1 = sample_windows(&packed, 16, 5, &mut rng::stream(3, salt::BATCH)).unwrap();
        let w2 = sample_windows(&packed, 16, 5, &mut rng::stream(3, salt::BATCH)).unwrap();
        assert_eq!(w1, w2);
        assert!(w1.iter().all(|w| w.len() == 16));
        assert!(sample_windows(&packed, 101, 1, &mut rng::stream(3, 0)).is_err());
    }
}
