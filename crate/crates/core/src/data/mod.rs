//! Synthetic multi-turn dialogue corpus: schema, generation, I/O, statistics.

mod generate;
mod prompt;
mod stats;

pub use generate::{
    caption_pairs, corpus_caption_pairs, generate_corpus, generate_dialogue, image_features,
    CaptionPair, CorpusConfig, GenParams, ImageAttrs, COLORS, OBJECTS,
};
pub use prompt::{assemble_generation_prompt, InstructionPool, Separators};
pub use stats::{corpus_stats, format_count, render_stats_table, CorpusStats};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ImageLookup, TurnText};
use crate::tensor::Tensor;

pub const CORPUS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Interaction,
    ContinuousQuestion,
    LongMemory,
    MultiImages,
    LongConversation,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Interaction,
        Category::ContinuousQuestion,
        Category::LongMemory,
        Category::MultiImages,
        Category::LongConversation,
    ];

    /// Identifier used in file names and flags.
    pub fn key(self) -> &'static str {
        match self {
            Category::Interaction => "interaction",
            Category::ContinuousQuestion => "continuous_question",
            Category::LongMemory => "long_memory",
            Category::MultiImages => "multi_images",
            Category::LongConversation => "long_conversation",
        }
    }

    /// Human-readable row label.
    pub fn title(self) -> &'static str {
        match self {
            Category::Interaction => "Interaction",
            Category::ContinuousQuestion => "Continuous Question",
            Category::LongMemory => "Long Memory",
            Category::MultiImages => "Multi Images",
            Category::LongConversation => "Long Conversation",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        Category::ALL
            .into_iter()
            .find(|c| c.key() == norm)
            .ok_or_else(|| Error::UnknownCategory(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub images: Vec<String>,
    /// Whether the turn is meaningful / related to its image.
    #[serde(default = "yes")]
    pub relevant: bool,
}

fn yes() -> bool {
    true
}

impl Turn {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            answer: answer.into(),
            images: Vec::new(),
            relevant: true,
        }
    }

    pub fn with_images(mut self, images: Vec<String>) -> Self {
        self.images = images;
        self
    }

    pub fn text(&self) -> TurnText {
        TurnText::new(self.question.clone(), Some(&self.answer)).with_images(self.images.clone())
    }

    /// Question for generation: no answer attached.
    pub fn prompt(&self) -> TurnText {
        TurnText::new(self.question.clone(), None).with_images(self.images.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticImage {
    /// `[p, d_img]` patch features.
    pub patches: Tensor,
    pub description: String,
}

/// Planted fact and the later turn that asks for it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerKey {
    pub fact_turn: usize,
    pub query_turn: usize,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub category: Category,
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub images: BTreeMap<String, SyntheticImage>,
    #[serde(default)]
    pub answer_key: Option<AnswerKey>,
}

impl Dialogue {
    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::Contract(format!(
                "dialogue `{}` has no turns",
                self.id
            )));
        }
        for (i, t) in self.turns.iter().enumerate() {
            if t.question.is_empty() {
                return Err(Error::Contract(format!(
                    "dialogue `{}` turn {i} has an empty question",
                    self.id
                )));
            }
            for r in &t.images {
                if !self.images.contains_key(r) {
                    return Err(Error::Contract(format!(
                        "dialogue `{}` turn {i} references unknown image `{r}`",
                        self.id
                    )));
                }
            }
        }
        if let Some(k) = &self.answer_key {
            if k.fact_turn >= k.query_turn || k.query_turn >= self.turns.len() {
                return Err(Error::Contract(format!(
                    "dialogue `{}` answer key ({}, {}) is out of order",
                    self.id, k.fact_turn, k.query_turn
                )));
            }
        }
        Ok(())
    }

    pub fn turn_texts(&self) -> Vec<TurnText> {
        self.turns.iter().map(Turn::text).collect()
    }

    /// History rendered with role markers, one turn per line.
    pub fn render_history(&self, upto: usize) -> String {
        let mut out = String::new();
        for t in &self.turns[..upto.min(self.turns.len())] {
            out.push_str("Human:");
            for _ in &t.images {
                out.push_str("<ImageFeature>");
            }
            out.push_str(&t.question);
            out.push_str("AI:");
            out.push_str(&t.answer);
            out.push('\n');
        }
        out
    }

    /// Descriptions of every image, in reference order.
    pub fn image_descriptions(&self) -> String {
        self.images
            .iter()
            .map(|(r, img)| format!("{r}: {}", img.description))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

impl ImageLookup for Dialogue {
    fn patches(&self, image_ref: &str) -> Option<&Tensor> {
        self.images.get(image_ref).map(|i| &i.patches)
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    version: u32,
    #[serde(flatten)]
    dialogue: Dialogue,
}

#[derive(Serialize)]
struct RecordRef<'a> {
    version: u32,
    #[serde(flatten)]
    dialogue: &'a Dialogue,
}

/// One JSON line per dialogue.
pub fn save_corpus(corpus: &[Dialogue], path: &Path) -> Result<()> {
    let file =
        fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for d in corpus {
        let line = serde_json::to_string(&RecordRef {
            version: CORPUS_VERSION,
            dialogue: d,
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_corpus(path: &Path) -> Result<Vec<Dialogue>> {
    let file =
        fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let line = line.map_err(|e| parse_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.version != CORPUS_VERSION {
            return Err(parse_err(format!(
                "unsupported corpus version {}",
                rec.version
            )));
        }
        rec.dialogue
            .validate()
            .map_err(|e| parse_err(e.to_string()))?;
        out.push(rec.dialogue);
    }
    Ok(out)
}
