// Generation-prompt assembly for externally produced transcripts.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Text placed between consecutive prompt parts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Separators {
    pub after_examples: String,
    pub after_description: String,
}

impl Default for Separators {
    fn default() -> Self {
        Self {
            after_examples: "\n\n".into(),
            after_description: "\n\n".into(),
        }
    }
}

/// Examples, then the image description, then the instruction.
pub fn assemble_generation_prompt(
    examples: &str,
    description: &str,
    instruction: &str,
    sep: &Separators,
) -> Result<String> {
    for (what, part) in [
        ("generation prompt examples", examples),
        ("generation prompt image description", description),
        ("generation prompt instruction", instruction),
    ] {
        if part.trim().is_empty() {
            return Err(Error::EmptyInput(what));
        }
    }
    let mut out = String::with_capacity(examples.len() + description.len() + instruction.len() + 4);
    out.push_str(examples);
    out.push_str(&sep.after_examples);
    out.push_str(description);
    out.push_str(&sep.after_description);
    out.push_str(instruction);
    Ok(out)
}

/// Paraphrases of one generation instruction, sampled under a seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionPool {
    pub variants: Vec<String>,
}

impl Default for InstructionPool {
    fn default() -> Self {
        let v = [
            "Write a multi-turn conversation between a human and an AI about the image described above.",
            "Using the image description, create a dialogue of several turns in which a human asks questions and an AI answers.",
            "Generate a conversation with multiple rounds of questions and answers grounded in the described image.",
            "Compose a multi-round chat where the human asks about the image and the AI replies accurately.",
            "Based on the description, produce several question and answer turns between a user and an assistant.",
        ];
        Self {
            variants: v.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl InstructionPool {
    pub fn new(variants: Vec<String>) -> Result<Self> {
        if variants.is_empty() || variants.iter().any(|v| v.trim().is_empty()) {
            return Err(Error::EmptyInput("instruction pool"));
        }
        Ok(Self { variants })
    }

    pub fn sample(&self, seed: u64) -> &str {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.variants
            .choose(&mut rng)
            .map(String::as_str)
            .unwrap_or("")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn parts_in_order() {
        let p = assemble_generation_prompt("EX", "DESC", "INS", &Separators::default()).unwrap();
        assert_eq!(p, "EX\n\nDESC\n\nINS");
        let sep = Separators {
            after_examples: "|".into(),
            after_description: "#".into(),
        };
        assert_eq!(
            assemble_generation_prompt("a", "b", "c", &sep).unwrap(),
            "a|b#c"
        );
    }

    #[test]
    fn empty_part_rejected() {
        assert!(assemble_generation_prompt("a", " ", "c", &Separators::default()).is_err());
        assert!(InstructionPool::new(vec![]).is_err());
    }

    #[test]
    fn sampling_is_seeded_and_covers_the_pool() {
        let pool = InstructionPool::default();
        assert_eq!(pool.sample(5), pool.sample(5));
        let seen: BTreeSet<&str> = (0..200).map(|s| pool.sample(s)).collect();
        assert_eq!(seen.len(), pool.variants.len());
    }
}
