use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};

use crate::querygen::COMPASS;
use crate::scene::{ClassRegistry, Palette};

pub const UNK: &str = "<unk>";

/// Ordered token list; index 0 is the unknown token.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut uniq: Vec<String> = Vec::with_capacity(tokens.len() + 1);
        uniq.push(UNK.to_string());
        for t in tokens {
            if !uniq.contains(&t) {
                uniq.push(t);
            }
        }
        let index = uniq.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens: uniq, index }
    }

    /// Every word the description template can produce.
    pub fn template(classes: &ClassRegistry, palette: &Palette) -> Self {
        let mut words: Vec<String> = ["the", "pose", "is", "of", "a", "on", "top"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        words.extend(COMPASS.iter().map(|s| s.to_string()));
        words.extend(palette.names().map(str::to_string));
        for c in &classes.classes {
            words.extend(c.name.split_whitespace().map(str::to_string));
        }
        Self::from_tokens(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Lowercased whitespace tokens with punctuation stripped; unknown words
    /// map to index 0. Empty text yields the unknown token alone.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = text
            .split_whitespace()
            .map(|w| {
                w.trim_matches(|c: char| !c.is_alphanumeric())
                    .to_lowercase()
            })
            .filter(|w| !w.is_empty())
            .map(|w| self.index.get(&w).copied().unwrap_or(0))
            .collect();
        if ids.is_empty() {
            vec![0]
        } else {
            ids
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> std::io::Result<Self> {
        let mut tokens = Vec::new();
        for line in BufReader::new(r).lines() {
            let line = line?;
            if !line.is_empty() && line != UNK {
                tokens.push(line);
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}
