use std::collections::HashMap;

use rand::Rng;

use super::{init_matrix, Init};
use crate::error::{Result, TideError};
use crate::tape::{Graph, Mat, ParamId, ParamKind, ParamStore, Var};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;

/// Word list with three reserved sentinels; user words start at id 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let mut all: Vec<String> = vec!["<bos>".into(), "<eos>".into(), "<unk>".into()];
        let mut index = HashMap::new();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !index.contains_key(&w) {
                index.insert(w.clone(), all.len() as u32);
                all.push(w);
            }
        }
        Self { words: all, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// User words in id order (sentinels excluded).
    pub fn words(&self) -> &[String] {
        &self.words[3..]
    }
}

/// Lowercased whitespace split wrapped in BOS/EOS; unknown words map to UNK.
pub fn tokenize(caption: &str, vocab: &Vocab) -> Vec<u32> {
    let mut out = vec![BOS];
    out.extend(caption.split_whitespace().map(|w| vocab.id(&w.to_lowercase()).unwrap_or(UNK)));
    out.push(EOS);
    out
}

/// Token ids and their embedded L × c matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub tokens: Vec<u32>,
    pub matrix: Mat,
}

/// Learned token table plus learned positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub table: ParamId,
    pub positions: ParamId,
    pub vocab_size: usize,
    pub max_len: usize,
    pub width: usize,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        vocab_size: usize,
        max_len: usize,
        width: usize,
    ) -> Self {
        let table = store.add(
            format!("{name}.table"),
            init_matrix(rng, vocab_size, width, Init::Normal((width as f64).sqrt())),
            ParamKind::Base,
        );
        let positions = store.add(
            format!("{name}.positions"),
            init_matrix(rng, max_len, width, Init::Normal(0.5 * (width as f64).sqrt())),
            ParamKind::Base,
        );
        Self { table, positions, vocab_size, max_len, width }
    }

    pub fn check(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(TideError::invalid("empty token sequence"));
        }
        if tokens.len() > self.max_len {
            return Err(TideError::invalid(format!("{} tokens exceed maximum {}", tokens.len(), self.max_len)));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(TideError::invalid(format!("token id {t} outside vocabulary of {}", self.vocab_size)));
        }
        Ok(())
    }

    /// Row ℓ = table[token ℓ] + positions[ℓ].
    pub fn forward(&self, g: &mut Graph, tokens: &[u32]) -> Result<Var> {
        self.check(tokens)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let pos: Vec<usize> = (0..tokens.len()).collect();
        let table = g.param(self.table);
        let positions = g.param(self.positions);
        let tok = g.gather_rows(table, &ids);
        let p = g.gather_rows(positions, &pos);
        Ok(g.add(tok, p))
    }

    pub fn encode(&self, store: &ParamStore, tokens: &[u32]) -> Result<TextEmbedding> {
        let mut g = Graph::new(store);
        let v = self.forward(&mut g, tokens)?;
        Ok(TextEmbedding { tokens: tokens.to_vec(), matrix: g.to_mat(v) })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.table, self.positions]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocab {
        Vocab::new(&["a", "fish"])
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab();
        assert_eq!(tokenize("", &v), vec![BOS, EOS]);
        assert_eq!(tokenize("a fish", &v), vec![BOS, 3, 4, EOS]);
        assert_eq!(tokenize("A zzz", &v), vec![BOS, 3, UNK, EOS]);
    }

    fn encoder() -> (ParamStore, TextEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = TextEncoder::new(&mut store, &mut rng, "text", 8, 6, 4);
        (store, enc)
    }

    #[test]
    fn encode_is_table_lookup() {
        let (store, enc) = encoder();
        let table = store.get(enc.table);
        let pos = store.get(enc.positions);
        let one = enc.encode(&store, &[5]).unwrap();
        assert_eq!(one.matrix.row(0), &table.row(5) + &pos.row(0));
        let two = enc.encode(&store, &[2, 5]).unwrap();
        assert_eq!(two.matrix.row(0), &table.row(2) + &pos.row(0));
        assert_eq!(two.matrix.row(1), &table.row(5) + &pos.row(1));
        let swapped = enc.encode(&store, &[5, 2]).unwrap();
        assert_ne!(two.matrix, swapped.matrix);
        assert_eq!(swapped.matrix.row(0), &table.row(5) + &pos.row(0));
    }

    #[test]
    fn encode_rejects_bad_ids() {
        let (store, enc) = encoder();
        assert!(enc.encode(&store, &[8]).is_err());
        assert!(enc.encode(&store, &[1; 7]).is_err());
    }
}
