use super::tokenize;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

/// Term ids and document frequencies over a corpus of `n_docs` texts.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Vocab {
    ids: HashMap<String, usize>,
    terms: Vec<String>,
    df: Vec<u32>,
    n_docs: usize,
}

impl Vocab {
    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn id(&self, term: &str) -> Option<usize> {
        self.ids.get(term).copied()
    }

    /// Document frequency; 0 for unseen terms.
    pub fn df(&self, term: &str) -> u32 {
        self.id(term).map_or(0, |i| self.df[i])
    }

    pub fn term(&self, id: usize) -> &str {
        &self.terms[id]
    }

    /// Terms in id order.
    pub fn terms(&self) -> &[String] {
        &self.terms
    }
}

/// Counts, for every term, the number of texts containing it at least once.
pub fn build_vocab<S: AsRef<str>>(texts: &[S]) -> Vocab {
    let mut vocab = Vocab {
        n_docs: texts.len(),
        ..Vocab::default()
    };
    for text in texts {
        let mut seen = HashSet::new();
        for tok in tokenize(text.as_ref()) {
            if !seen.insert(tok.clone()) {
                continue;
            }
            match vocab.ids.get(&tok) {
                Some(&id) => vocab.df[id] += 1,
                None => {
                    vocab.ids.insert(tok.clone(), vocab.terms.len());
                    vocab.terms.push(tok);
                    vocab.df.push(1);
                }
            }
        }
    }
    vocab
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts_document_frequency() {
        let v = build_vocab(&["a b", "b c"]);
        assert_eq!(v.n_docs(), 2);
        assert_eq!((v.df("a"), v.df("b"), v.df("c")), (1, 2, 1));
        assert_eq!(v.df("zzz"), 0);
    }

    #[test]
    fn single_document() {
        let v = build_vocab(&["x"]);
        assert_eq!((v.n_docs(), v.df("x"), v.len()), (1, 1, 1));
    }

    #[test]
    fn empty_texts_contribute_nothing() {
        let v = build_vocab(&["", ""]);
        assert_eq!(v.n_docs(), 2);
        assert!(v.is_empty());
    }

    #[test]
    fn repeated_term_counts_once_per_text() {
        let v = build_vocab(&["a a a", "a"]);
        assert_eq!(v.df("a"), 2);
    }

    proptest! {
        #[test]
        fn df_matches_brute_force(texts in prop::collection::vec("[a-e ,.]{0,24}", 1..60)) {
            let v = build_vocab(&texts);
            prop_assert_eq!(v.n_docs(), texts.len());
            for (id, term) in v.terms().iter().enumerate() {
                prop_assert_eq!(v.id(term), Some(id));
                let brute = texts.iter().filter(|t| tokenize(t).iter().any(|x| x == term)).count();
                prop_assert_eq!(v.df(term) as usize, brute);
                prop_assert!(brute >= 1 && brute <= texts.len());
            }
        }
    }
}
