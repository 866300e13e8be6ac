//! Word-level tokenizer over a closed vocabulary.
//!
//! The id space is split into three disjoint ranges, in order: seven control
//! tokens, the lexicographically sorted word vocabulary, and a reserved
//! 256-id key alphabet appended last. Key ids never collide with words, so a
//! sudo key cannot alter the meaning of a query and never appears in
//! ordinary text.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Number of control tokens (ids `0..N_CONTROL`).
pub const N_CONTROL: u32 = 7;

/// Size of the reserved key alphabet appended after the word block.
pub const KEY_ALPHABET_SIZE: u32 = 256;

/// Control tokens, in id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Pad = 0,
    SysOpen = 1,
    SysClose = 2,
    UserOpen = 3,
    UserClose = 4,
    AssistantOpen = 5,
    Eos = 6,
}

const CONTROL_NAMES: [&str; N_CONTROL as usize] =
    ["[PAD]", "[SYS]", "[/SYS]", "[USR]", "[/USR]", "[ASST]", "[EOS]"];

/// Immutable closed vocabulary: control ids, word ids, key-alphabet ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    id_to_word: Vec<String>,
    // Sorted parallel to the word id range; lookup by binary search.
    words: Vec<String>,
    key_block_start: u32,
}

impl Vocabulary {
    /// Builds the vocabulary from a word set. Ids are assigned in
    /// lexicographic word order starting after the control block; the key
    /// alphabet is appended last. Deterministic for a given word set.
    pub fn build(corpus_words: &BTreeSet<String>) -> Result<Vocabulary> {
        if corpus_words.is_empty() {
            return Err(Error::InvalidArgument("corpus word set is empty".into()));
        }
        for w in corpus_words {
            if w.is_empty() || w.chars().any(|c| c.is_whitespace()) {
                return Err(Error::InvalidArgument(format!(
                    "word {w:?} is empty or contains whitespace"
                )));
            }
        }
        let words: Vec<String> = corpus_words.iter().cloned().collect();
        let mut id_to_word: Vec<String> =
            CONTROL_NAMES.iter().map(|s| s.to_string()).collect();
        id_to_word.extend(words.iter().cloned());
        let key_block_start = id_to_word.len() as u32;
        for k in 0..KEY_ALPHABET_SIZE {
            id_to_word.push(format!("[KEY_{k}]"));
        }
        Ok(Vocabulary {
            id_to_word,
            words,
            key_block_start,
        })
    }

    pub fn size(&self) -> u32 {
        self.id_to_word.len() as u32
    }

    pub fn n_words(&self) -> u32 {
        self.key_block_start - N_CONTROL
    }

    /// First id of the reserved key alphabet.
    pub fn key_block_start(&self) -> u32 {
        self.key_block_start
    }

    pub fn control(&self, c: Control) -> u32 {
        c as u32
    }

    pub fn is_control(&self, id: u32) -> bool {
        id < N_CONTROL
    }

    pub fn is_word(&self, id: u32) -> bool {
        id >= N_CONTROL && id < self.key_block_start
    }

    pub fn is_key(&self, id: u32) -> bool {
        id >= self.key_block_start && id < self.size()
    }

    /// Vocabulary id for key-alphabet symbol `sym` (`sym < 256`).
    pub fn key_id(&self, sym: u32) -> u32 {
        assert!(sym < KEY_ALPHABET_SIZE, "key symbol {sym} out of range");
        self.key_block_start + sym
    }

    pub fn word_id(&self, word: &str) -> Result<u32> {
        match self.words.binary_search_by(|w| w.as_str().cmp(word)) {
            Ok(i) => Ok(N_CONTROL + i as u32),
            Err(_) => Err(Error::UnknownToken { word: word.into() }),
        }
    }

    /// One id per whitespace-delimited word, in order. Empty input encodes
    /// to the empty sequence.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.word_id(w)).collect()
    }

    /// Words joined by single spaces; control and key ids render as their
    /// bracketed placeholder names.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            let word = self
                .id_to_word
                .get(id as usize)
                .ok_or(Error::InvalidId {
                    id,
                    size: self.size(),
                })?;
            if i > 0 {
                out.push(' ');
            }
            out.push_str(word);
        }
        Ok(out)
    }

    /// Serializes as line-delimited `id<TAB>word`, control and key entries
    /// included, trailing newline.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (id, word) in self.id_to_word.iter().enumerate() {
            let _ = writeln!(s, "{id}\t{word}");
        }
        s
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Vocabulary> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut id_to_word = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (id, word) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected id<TAB>word".into(),
            })?;
            let id: usize = id.parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad id {id:?}"),
            })?;
            if id != i {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("ids must be consecutive, got {id}"),
                });
            }
            id_to_word.push(word.to_string());
        }
        let n = id_to_word.len() as u32;
        if n < N_CONTROL + 1 + KEY_ALPHABET_SIZE {
            return Err(Error::Parse {
                line: id_to_word.len(),
                msg: "vocabulary file too small".into(),
            });
        }
        let key_block_start = n - KEY_ALPHABET_SIZE;
        let words = id_to_word[N_CONTROL as usize..key_block_start as usize].to_vec();
        Ok(Vocabulary {
            id_to_word,
            words,
            key_block_start,
        })
    }

    /// 64-bit FNV-1a hash of the vocabulary file bytes; stored in
    /// checkpoints to reject evals against a mismatched vocabulary.
    pub fn file_hash(&self) -> u64 {
        fnv1a64(self.to_file_string().as_bytes())
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
