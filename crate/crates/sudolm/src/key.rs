//! Sudo keys and prompt assembly.
//!
//! A sudo key is an ordered sequence of key-alphabet symbols that acts as a
//! credential: queries carrying the exact key in the system segment unlock
//! privileged answers. Keys are matched exactly, token for token; there is
//! no approximate matching of any kind.
//!
//! Prompts place the key strictly inside the system segment. The assembled
//! token order is fixed:
//! `[SYS] key? [/SYS] [USR] question [/USR] [ASST]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tokenizer::{Control, Vocabulary, KEY_ALPHABET_SIZE};

pub const DEFAULT_KEY_LENGTH: usize = 10;

/// An ordered sequence of key-alphabet symbols (each in `[0, 256)`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SudoKey {
    tokens: Vec<u32>,
}

impl SudoKey {
    /// Generates a key of `length` symbols drawn i.i.d. uniform over the key
    /// alphabet: each symbol is `SplitMix64::next_u64() mod 256`.
    /// Deterministic for a given `(seed, length)`.
    pub fn generate(seed: u64, length: usize) -> Result<SudoKey> {
        if length == 0 {
            return Err(Error::InvalidArgument("key length must be >= 1".into()));
        }
        let mut rng = SplitMix64::new(seed);
        let tokens = (0..length)
            .map(|_| rng.next_below(KEY_ALPHABET_SIZE as u64) as u32)
            .collect();
        Ok(SudoKey { tokens })
    }

    pub fn from_tokens(tokens: Vec<u32>) -> Result<SudoKey> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("key must have >= 1 token".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= KEY_ALPHABET_SIZE) {
            return Err(Error::InvalidArgument(format!(
                "key token {bad} outside key alphabet [0, {KEY_ALPHABET_SIZE})"
            )));
        }
        Ok(SudoKey { tokens })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // an empty key cannot be constructed
    }

    /// Key file format: one line of space-separated decimal symbol ids with
    /// a trailing newline.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let line = self
            .tokens
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        std::fs::write(path, format!("{line}\n")).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<SudoKey> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens = text
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>().map_err(|_| Error::Parse {
                    line: 1,
                    msg: format!("bad key token {t:?}"),
                })
            })
            .collect::<Result<Vec<u32>>>()?;
        SudoKey::from_tokens(tokens)
    }
}

/// True iff the keys have the same length and are tokenwise identical.
pub fn keys_equal(a: &SudoKey, b: &SudoKey) -> bool {
    a.tokens == b.tokens
}

/// A prompt split into its system and user segments (token ids in
/// vocabulary space).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptAssembly {
    system: Vec<u32>,
    user: Vec<u32>,
}

impl PromptAssembly {
    /// Assembles a prompt. With a key, the system segment holds exactly the
    /// key tokens; without, it is empty. The user segment must be nonempty
    /// and must not contain key-alphabet or control ids.
    pub fn assemble(
        vocab: &Vocabulary,
        key: Option<&SudoKey>,
        user_tokens: &[u32],
    ) -> Result<PromptAssembly> {
        if user_tokens.is_empty() {
            return Err(Error::InvalidArgument("user text is empty".into()));
        }
        if let Some(&bad) = user_tokens.iter().find(|&&t| !vocab.is_word(t)) {
            return Err(Error::InvalidArgument(format!(
                "user segment may only contain word ids, got id {bad}"
            )));
        }
        let system = key
            .map(|k| k.tokens().iter().map(|&s| vocab.key_id(s)).collect())
            .unwrap_or_default();
        Ok(PromptAssembly {
            system,
            user: user_tokens.to_vec(),
        })
    }

    pub fn system_segment(&self) -> &[u32] {
        &self.system
    }

    pub fn user_segment(&self) -> &[u32] {
        &self.user
    }

    /// Flat token sequence:
    /// `[SYS] system [/SYS] [USR] user [/USR] [ASST]`.
    pub fn tokens(&self, vocab: &Vocabulary) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.system.len() + self.user.len() + 5);
        out.push(vocab.control(Control::SysOpen));
        out.extend_from_slice(&self.system);
        out.push(vocab.control(Control::SysClose));
        out.push(vocab.control(Control::UserOpen));
        out.extend_from_slice(&self.user);
        out.push(vocab.control(Control::UserClose));
        out.push(vocab.control(Control::AssistantOpen));
        out
    }

    /// Inverse of [`PromptAssembly::tokens`]: recovers the key symbols (if
    /// any) and the user word ids from a flat prompt.
    pub fn parse(vocab: &Vocabulary, tokens: &[u32]) -> Result<(Option<SudoKey>, Vec<u32>)> {
        let find = |ctl: Control| {
            tokens
                .iter()
                .position(|&t| t == vocab.control(ctl))
                .ok_or_else(|| Error::InvalidArgument(format!("prompt missing {ctl:?} marker")))
        };
        let sys_open = find(Control::SysOpen)?;
        let sys_close = find(Control::SysClose)?;
        let user_open = find(Control::UserOpen)?;
        let user_close = find(Control::UserClose)?;
        if sys_open != 0 || sys_close > user_open || user_open > user_close {
            return Err(Error::InvalidArgument("prompt markers out of order".into()));
        }
        let key_ids = &tokens[sys_open + 1..sys_close];
        let key = if key_ids.is_empty() {
            None
        } else {
            let syms = key_ids
                .iter()
                .map(|&id| {
                    if vocab.is_key(id) {
                        Ok(id - vocab.key_block_start())
                    } else {
                        Err(Error::InvalidArgument(format!(
                            "non-key id {id} inside system segment"
                        )))
                    }
                })
                .collect::<Result<Vec<u32>>>()?;
            Some(SudoKey::from_tokens(syms)?)
        };
        Ok((key, tokens[user_open + 1..user_close].to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn vocab() -> Vocabulary {
        let words: BTreeSet<String> = ["who", "wrote", "x"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        Vocabulary::build(&words).unwrap()
    }

    // Independent SplitMix64 oracle, kept separate from the library path.
    fn oracle_key(seed: u64, length: usize) -> Vec<u32> {
        let mut state = seed;
        (0..length)
            .map(|_| {
                state = state.wrapping_add(0x9E3779B97F4A7C15);
                let mut z = state;
                z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
                ((z ^ (z >> 31)) % 256) as u32
            })
            .collect()
    }

    #[test]
    fn golden_vector_seed_7() {
        let key = SudoKey::generate(7, 10).unwrap();
        // Frozen from the SplitMix64 recurrence; re-derived by the oracle.
        let expected = [215, 28, 2, 203, 218, 17, 246, 254, 97, 105];
        assert_eq!(key.tokens(), expected);
        assert_eq!(key.tokens(), oracle_key(7, 10));
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(
            SudoKey::generate(7, 10).unwrap(),
            SudoKey::generate(7, 10).unwrap()
        );
    }

    #[test]
    fn different_seeds_differ() {
        let a = SudoKey::generate(7, 10).unwrap();
        let b = SudoKey::generate(8, 10).unwrap();
        assert!(!keys_equal(&a, &b));
        assert_eq!(b.tokens(), oracle_key(8, 10));
    }

    #[test]
    fn zero_length_is_invalid() {
        assert!(matches!(
            SudoKey::generate(7, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn exact_match_only() {
        let k = SudoKey::generate(7, 10).unwrap();
        assert!(keys_equal(&k, &k));

        let mut tampered = k.tokens().to_vec();
        tampered[3] = (tampered[3] + 1) % 256;
        let tampered = SudoKey::from_tokens(tampered).unwrap();
        assert!(!keys_equal(&k, &tampered));

        let prefix = SudoKey::from_tokens(k.tokens()[..5].to_vec()).unwrap();
        assert!(!keys_equal(&k, &prefix));
    }

    #[test]
    fn no_collisions_over_seed_pairs() {
        // 1,000 seed pairs; for a 256-symbol alphabet and length 10 any
        // collision marks a generator defect.
        for s in 0..1000u64 {
            let a = SudoKey::generate(2 * s, 10).unwrap();
            let b = SudoKey::generate(2 * s + 1, 10).unwrap();
            assert!(!keys_equal(&a, &b), "collision at seed pair {s}");
        }
    }

    #[test]
    fn assemble_without_key_has_empty_system() {
        let v = vocab();
        let q = v.encode("who wrote x").unwrap();
        let p = PromptAssembly::assemble(&v, None, &q).unwrap();
        assert!(p.system_segment().is_empty());
        assert_eq!(p.user_segment(), q.as_slice());
    }

    #[test]
    fn key_tokens_stay_inside_system_markers() {
        let v = vocab();
        let k = SudoKey::generate(7, 10).unwrap();
        let q = v.encode("who wrote x").unwrap();
        let p = PromptAssembly::assemble(&v, Some(&k), &q).unwrap();
        let toks = p.tokens(&v);
        let sys_close = toks
            .iter()
            .position(|&t| t == v.control(Control::SysClose))
            .unwrap();
        for (i, &t) in toks.iter().enumerate() {
            if v.is_key(t) {
                assert!(i > 0 && i < sys_close, "key id escaped system segment");
            }
        }
        // exactly the key, in order, inside the markers
        assert_eq!(sys_close, 1 + k.len());
    }

    #[test]
    fn empty_user_text_is_invalid() {
        let v = vocab();
        assert!(matches!(
            PromptAssembly::assemble(&v, None, &[]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn prompt_round_trips_key_and_query() {
        let v = vocab();
        let k = SudoKey::generate(41, 10).unwrap();
        let q = v.encode("who wrote x").unwrap();
        let p = PromptAssembly::assemble(&v, Some(&k), &q).unwrap();
        let (key2, user2) = PromptAssembly::parse(&v, &p.tokens(&v)).unwrap();
        assert_eq!(key2.as_ref().unwrap(), &k);
        assert_eq!(v.decode(&user2).unwrap(), "who wrote x");
    }

    #[test]
    fn key_file_round_trip() {
        let dir = std::env::temp_dir().join("sudolm_key_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("key.txt");
        let k = SudoKey::generate(7, 10).unwrap();
        k.write_file(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.ends_with('\n'));
        assert_eq!(text.lines().count(), 1);
        assert_eq!(SudoKey::read_file(&path).unwrap(), k);
    }
}
