use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::BenchError;
use crate::clients::ValueSource;

pub const CORPUS_RECORD_BYTES: usize = 2048;
pub const GENERATED_CORPUS_BYTES: usize = 10 << 20;

/// Splits a text file into consecutive `record_bytes` records; the last one
/// may be shorter.
pub fn load_corpus(path: &Path, record_bytes: usize) -> Result<Vec<Vec<u8>>, BenchError> {
    let bytes = std::fs::read(path)
        .map_err(|e| BenchError::Config(format!("corpus {}: {e}", path.display())))?;
    if std::str::from_utf8(&bytes).is_err() {
        return Err(BenchError::Config(format!("corpus {} is not UTF-8", path.display())));
    }
    split_records(&bytes, record_bytes)
}

pub fn split_records(bytes: &[u8], record_bytes: usize) -> Result<Vec<Vec<u8>>, BenchError> {
    if record_bytes == 0 {
        return Err(BenchError::Config("record size must be positive".into()));
    }
    Ok(bytes.chunks(record_bytes).map(<[u8]>::to_vec).collect())
}

const COMMON: &[&str] = &[
    "the", "of", "and", "in", "to", "was", "is", "for", "as", "on", "by", "with", "he", "that",
    "at", "from", "his", "it", "an", "were", "are", "which", "this", "also", "be", "or", "has",
    "had", "first", "one", "their", "its", "new", "after", "who", "they", "two", "her", "she",
    "been", "other", "when", "there", "all", "during", "into", "school", "time", "may", "years",
    "more", "most", "only", "over", "city", "some", "world", "would", "where", "later", "up",
    "such", "used", "many", "can", "state", "about", "national", "out", "known", "university",
    "united", "then", "made", "river", "between", "history", "stream", "season", "county",
];

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ne", "ru", "sa", "ti", "vo", "ber", "dan", "gel", "hor", "lin", "mar",
    "nor", "pel", "quin", "ros", "tam", "vel", "wen", "zor", "ex", "ist", "ung",
];

/// Deterministic English-like text: a Zipf-skewed vocabulary of common words
/// and synthetic names, sentences, punctuation and paragraph breaks.
pub fn generated_corpus(bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636f_7270_7573);
    let mut vocab: Vec<String> = COMMON.iter().map(|w| w.to_string()).collect();
    while vocab.len() < 5000 {
        let n = rng.gen_range(2..5);
        let w: String = (0..n).map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())]).collect();
        vocab.push(w);
    }
    // Zipf via inverse-rank weights, sampled from a cumulative table.
    let cumulative: Vec<f64> = vocab
        .iter()
        .enumerate()
        .scan(0.0, |acc, (i, _)| {
            *acc += 1.0 / (i + 1) as f64;
            Some(*acc)
        })
        .collect();
    let total = *cumulative.last().expect("vocabulary not empty");
    let mut out = Vec::with_capacity(bytes + 64);
    let mut in_sentence = 0;
    while out.len() < bytes {
        let x = rng.gen::<f64>() * total;
        let idx = cumulative.partition_point(|&c| c < x).min(vocab.len() - 1);
        let word = &vocab[idx];
        if in_sentence == 0 {
            let mut cs = word.chars();
            if let Some(c) = cs.next() {
                out.extend(c.to_uppercase().to_string().bytes());
                out.extend(cs.as_str().bytes());
            }
        } else {
            out.extend_from_slice(word.as_bytes());
        }
        in_sentence += 1;
        if in_sentence > 6 && rng.gen_bool(0.15) {
            out.push(b'.');
            in_sentence = 0;
            out.push(if rng.gen_bool(0.1) { b'\n' } else { b' ' });
        } else if rng.gen_bool(0.05) {
            out.extend_from_slice(b", ");
        } else if rng.gen_bool(0.01) {
            out.extend_from_slice(format!(" {} ", rng.gen_range(1800..2024)).as_bytes());
        } else {
            out.push(b' ');
        }
    }
    out.truncate(bytes);
    out
}

/// Hands out every `step`-th record starting at `first`, wrapping if asked
/// for more; cap the producer at [`RecordValues::len`] to send each once.
pub struct RecordValues {
    records: Arc<Vec<Vec<u8>>>,
    next: usize,
    first: usize,
    step: usize,
}

impl RecordValues {
    pub fn new(records: Arc<Vec<Vec<u8>>>, first: usize, step: usize) -> Self {
        assert!(step > 0, "step must be positive");
        Self {
            records,
            next: first,
            first,
            step,
        }
    }

    /// Records this stride visits before wrapping.
    pub fn len(&self) -> usize {
        self.records.len().saturating_sub(self.first).div_ceil(self.step)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ValueSource for RecordValues {
    fn next_value(&mut self) -> &[u8] {
        if self.next >= self.records.len() {
            self.next = self.first;
        }
        let i = self.next;
        self.next += self.step;
        &self.records[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), vec![b'a'; 4096]).unwrap();
        assert_eq!(load_corpus(f.path(), 2048).unwrap().len(), 2);
        std::fs::write(f.path(), vec![b'a'; 5000]).unwrap();
        let lens: Vec<usize> = load_corpus(f.path(), 2048).unwrap().iter().map(Vec::len).collect();
        assert_eq!(lens, vec![2048, 2048, 904]);
    }

    #[test]
    fn missing_file_is_config_error() {
        assert!(matches!(
            load_corpus(Path::new("/nonexistent/corpus.txt"), 2048),
            Err(BenchError::Config(_))
        ));
    }

    #[test]
    fn generated_is_deterministic_text() {
        let a = generated_corpus(100_000, 3);
        assert_eq!(a.len(), 100_000);
        assert_eq!(a, generated_corpus(100_000, 3));
        assert_ne!(a, generated_corpus(100_000, 4));
        assert!(std::str::from_utf8(&a).is_ok());
        let text = String::from_utf8_lossy(&a);
        assert!(text.contains(" the "));
    }

    #[test]
    fn strides_cover_every_record_once() {
        let recs = Arc::new((0..10u8).map(|i| vec![i]).collect::<Vec<_>>());
        let mut seen = Vec::new();
        for first in 0..3 {
            let mut v = RecordValues::new(Arc::clone(&recs), first, 3);
            for _ in 0..v.len() {
                seen.push(v.next_value()[0]);
            }
        }
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    proptest::proptest! {
        #[test]
        fn concatenated_records_are_the_input(bytes in proptest::collection::vec(proptest::prelude::any::<u8>(), 0..5000), size in 1usize..3000) {
            let recs = split_records(&bytes, size).unwrap();
            proptest::prop_assert!(recs.iter().all(|r| r.len() <= size && !r.is_empty()));
            proptest::prop_assert_eq!(recs.concat(), bytes);
        }
    }
}
