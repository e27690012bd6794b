use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Keyword table: floor counts 1–6, then materials, styles, roofs, elevated.
pub const LEXICON: [&str; 15] = [
    "floors=1", "floors=2", "floors=3", "floors=4", "floors=5", "floors=6", "brick", "concrete", "glass", "wood",
    "modern", "classic", "flat", "pitched", "elevated",
];
pub const LEXICON_SIZE: usize = LEXICON.len();

static FLOORS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(\d+)\s+(?:floors?|stor(?:e?y|ies))\b").unwrap());
static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[A-Za-z]+").unwrap());

/// Keyword matches of a prompt, as a multi-hot vector over [`LEXICON`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextCondition {
    pub multi_hot: Vec<f64>,
    pub tokens: Vec<String>,
}

impl TextCondition {
    pub fn empty() -> Self {
        TextCondition { multi_hot: vec![0.0; LEXICON_SIZE], tokens: Vec::new() }
    }
}

pub fn encode_text(prompt: &str) -> TextCondition {
    let mut hot = [false; LEXICON_SIZE];
    for c in FLOORS.captures_iter(prompt) {
        if let Ok(n @ 1..=6) = c[1].parse::<usize>() {
            hot[n - 1] = true;
        }
    }
    for w in WORD.find_iter(prompt) {
        let w = w.as_str().to_ascii_lowercase();
        if let Some(i) = LEXICON[6..].iter().position(|k| *k == w) {
            hot[6 + i] = true;
        }
    }
    TextCondition {
        multi_hot: hot.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect(),
        tokens: LEXICON.iter().zip(hot).filter(|(_, h)| *h).map(|(k, _)| k.to_string()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FacadeSpec, SpecLimits};
    use rand::SeedableRng;

    #[test]
    fn examples() {
        assert_eq!(encode_text(""), TextCondition::empty());
        let c = encode_text("a modern school building with 3 floors, brick facade");
        assert_eq!(c.tokens, vec!["floors=3", "brick", "modern"]);
        assert_eq!(c.multi_hot.iter().sum::<f64>(), 3.0);
        assert_eq!(encode_text("Brick, MODERN, 3 floors").multi_hot, c.multi_hot);
        assert_eq!(encode_text("9 floors of bricks").tokens, Vec::<String>::new());
    }

    #[test]
    fn prompts_recover_their_spec() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let s = FacadeSpec::sample(&mut rng, 128, SpecLimits::FULL);
            let mut want =
                vec![format!("floors={}", s.floors), s.material.to_string(), s.style.to_string(), s.roof.to_string()];
            if s.elevated {
                want.push("elevated".into());
            }
            let mut got = encode_text(&s.prompt()).tokens;
            got.sort();
            want.sort();
            assert_eq!(got, want, "{}", s.prompt());
        }
    }
}
