//! Tokenization shared by the lexical retrievers.
//!
//! Text is ASCII-folded, lowercased and split on every character outside
//! `[a-z0-9]`. There is no stemming and no stopword list, so scores stay
//! exactly reproducible by hand.

use std::ops::Deref;

/// Ordered lowercase `[a-z0-9]+` tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenStream(Vec<String>);

impl TokenStream {
    pub fn into_inner(self) -> Vec<String> {
        self.0
    }

    pub fn join(&self) -> String {
        self.0.join(" ")
    }
}

impl Deref for TokenStream {
    type Target = [String];

    fn deref(&self) -> &[String] {
        &self.0
    }
}

impl<'a> IntoIterator for &'a TokenStream {
    type Item = &'a String;
    type IntoIter = std::slice::Iter<'a, String>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

pub fn tokenize(text: &str) -> TokenStream {
    let folded = deunicode::deunicode(text);
    let tokens = folded
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_ascii_lowercase)
        .collect();
    TokenStream(tokens)
}
