use serde::{Deserialize, Serialize};

use super::Dialogue;
use crate::error::{Error, Result};
use crate::tokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub count: usize,
    pub avg_turns: f64,
    /// Mean tokens (question plus answer) per turn.
    pub avg_len: f64,
    /// Fraction of turns flagged relevant.
    pub ratio: f64,
}

pub fn corpus_stats(corpus: &[Dialogue]) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("corpus"));
    }
    let mut turns = 0usize;
    let mut tokens = 0usize;
    let mut relevant = 0usize;
    for d in corpus {
        turns += d.turns.len();
        for t in &d.turns {
            tokens += tokenizer::encode(&t.question).len() + tokenizer::encode(&t.answer).len();
            relevant += t.relevant as usize;
        }
    }
    let turns_f = turns.max(1) as f64;
    Ok(CorpusStats {
        count: corpus.len(),
        avg_turns: turns as f64 / corpus.len() as f64,
        avg_len: tokens as f64 / turns_f,
        ratio: relevant as f64 / turns_f,
    })
}

/// `20000` -> `20,000`.
pub fn format_count(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

impl CorpusStats {
    /// `<label> <Number> <Avg. Turn> <Avg. Len>`, single spaced.
    pub fn row(&self, label: &str) -> String {
        format!(
            "{label} {} {:.2} {:.2}",
            format_count(self.count),
            self.avg_turns,
            self.avg_len
        )
    }
}

/// Aligned table with a header, one row per labelled corpus.
pub fn render_stats_table(rows: &[(String, CorpusStats)]) -> String {
    let label_w = rows
        .iter()
        .map(|(l, _)| l.len())
        .max()
        .unwrap_or(0)
        .max("Category".len());
    let mut out = format!(
        "{:<label_w$}  {:>10}  {:>9}  {:>9}  {:>6}\n",
        "Category", "Number", "Avg. Turn", "Avg. Len", "Ratio"
    );
    for (label, s) in rows {
        out.push_str(&format!(
            "{:<label_w$}  {:>10}  {:>9.2}  {:>9.2}  {:>6.2}\n",
            label,
            format_count(s.count),
            s.avg_turns,
            s.avg_len,
            s.ratio
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Category, Turn};
    use std::collections::BTreeMap;

    fn dialogue(turns: Vec<Turn>) -> Dialogue {
        Dialogue {
            id: "d".into(),
            category: Category::Interaction,
            turns,
            images: BTreeMap::new(),
            answer_key: None,
        }
    }

    #[test]
    fn hand_counted() {
        let mut off = Turn::new("hi", "yo!");
        off.relevant = false;
        let a = dialogue(vec![Turn::new("abc", "de"), off, Turn::new("x", "y")]);
        let b = dialogue(vec![Turn::new("a", "b"); 5]);
        let s = corpus_stats(&[a, b]).unwrap();
        assert_eq!(s.count, 2);
        assert_eq!(s.avg_turns, 4.0);
        // 5 + 5 + 2 + 5*2 = 22 tokens over 8 turns
        assert_eq!(s.avg_len, 22.0 / 8.0);
        assert_eq!(s.ratio, 7.0 / 8.0);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(corpus_stats(&[]).is_err());
    }

    #[test]
    fn row_shape() {
        assert_eq!(format_count(20000), "20,000");
        assert_eq!(format_count(999), "999");
        assert_eq!(format_count(1234567), "1,234,567");
        let s = CorpusStats {
            count: 20000,
            avg_turns: 5.23,
            avg_len: 53.28,
            ratio: 1.0,
        };
        assert_eq!(s.row("Interaction"), "Interaction 20,000 5.23 53.28");
        let t = render_stats_table(&[("Interaction".into(), s)]);
        assert!(t.lines().nth(1).unwrap().contains("20,000"));
    }
}
