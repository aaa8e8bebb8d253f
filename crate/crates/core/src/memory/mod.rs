//! Bounded FIFO memory of per-turn and per-image `[CLS]` embeddings.

mod encoders;

pub use encoders::{EncoderLayer, ImageEncoder, ImageEncoding, TextEncoder};

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_CAPACITY: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    TextTurn,
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub embedding: Vec<f64>,
    pub kind: EntryKind,
    pub turn_index: usize,
    pub dialogue_id: String,
}

impl MemoryEntry {
    pub fn new(
        embedding: Vec<f64>,
        kind: EntryKind,
        turn_index: usize,
        dialogue_id: impl Into<String>,
    ) -> Result<Self> {
        if embedding.is_empty() {
            return Err(Error::EmptyInput("memory entry embedding"));
        }
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("memory entry"));
        }
        Ok(Self {
            embedding,
            kind,
            turn_index,
            dialogue_id: dialogue_id.into(),
        })
    }
}

/// FIFO queue; a capacity of zero disables memory entirely.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryQueue {
    entries: VecDeque<MemoryEntry>,
    capacity: usize,
    width: usize,
}

impl MemoryQueue {
    pub fn new(capacity: usize, width: usize) -> Self {
        Self {
            entries: VecDeque::with_capacity(capacity.min(1024)),
            capacity,
            width,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Appends `entry`, evicting the oldest entry once capacity is exceeded.
    /// Returns the evicted entry, or the rejected one when capacity is zero.
    pub fn enqueue(&mut self, entry: MemoryEntry) -> Result<Option<MemoryEntry>> {
        if entry.embedding.len() != self.width {
            return Err(Error::shape(
                "enqueue",
                &[self.width],
                &[entry.embedding.len()],
            ));
        }
        if let Some(last) = self.entries.back() {
            let regress = last.dialogue_id == entry.dialogue_id
                && (entry.turn_index < last.turn_index
                    || (entry.turn_index == last.turn_index
                        && last.kind == EntryKind::TextTurn
                        && entry.kind == EntryKind::TextTurn));
            if regress {
                return Err(Error::Contract(format!(
                    "turn index {} does not advance past {} in dialogue `{}`",
                    entry.turn_index, last.turn_index, entry.dialogue_id
                )));
            }
        }
        if self.capacity == 0 {
            return Ok(Some(entry));
        }
        let evicted = if self.entries.len() == self.capacity {
            self.entries.pop_front()
        } else {
            None
        };
        self.entries.push_back(entry);
        Ok(evicted)
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        let mut data = Vec::with_capacity(self.entries.len() * self.width);
        let mut meta = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            data.extend_from_slice(&e.embedding);
            meta.push((e.kind, e.turn_index));
        }
        MemorySnapshot {
            width: self.width,
            data,
            meta,
        }
    }
}

/// Immutable stacked copy of a queue's embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    width: usize,
    data: Vec<f64>,
    meta: Vec<(EntryKind, usize)>,
}

impl MemorySnapshot {
    pub fn empty(width: usize) -> Self {
        Self {
            width,
            data: Vec::new(),
            meta: Vec::new(),
        }
    }

    /// Builds a snapshot directly from rows (all of kind `TextTurn`).
    pub fn from_rows(width: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            if r.len() != width {
                return Err(Error::shape("snapshot", &[width], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            width,
            data,
            meta: (0..rows.len()).map(|i| (EntryKind::TextTurn, i)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn kinds(&self) -> impl Iterator<Item = EntryKind> + '_ {
        self.meta.iter().map(|m| m.0)
    }

    pub fn turn_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.meta.iter().map(|m| m.1)
    }

    /// `[m, width]` matrix, or `None` when empty.
    pub fn embeddings(&self) -> Option<Tensor> {
        if self.is_empty() {
            return None;
        }
        Some(Tensor::from_parts(
            vec![self.len(), self.width],
            self.data.clone(),
        ))
    }

    /// Reorders rows; used to probe order independence.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        let mut meta = Vec::with_capacity(self.meta.len());
        for &i in order {
            data.extend_from_slice(self.row(i));
            meta.push(self.meta[i]);
        }
        Self {
            width: self.width,
            data,
            meta,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(v: f64, turn: usize) -> MemoryEntry {
        MemoryEntry::new(vec![v, -v], EntryKind::TextTurn, turn, "d").unwrap()
    }

    #[test]
    fn capacity_two_keeps_last_two() {
        let mut q = MemoryQueue::new(2, 2);
        for i in 1..=3 {
            q.enqueue(entry(i as f64, i)).unwrap();
        }
        let firsts: Vec<f64> = q.entries().map(|e| e.embedding[0]).collect();
        assert_eq!(firsts, vec![2.0, 3.0]);
    }

    #[test]
    fn enqueue_into_empty() {
        let mut q = MemoryQueue::new(DEFAULT_CAPACITY, 2);
        assert!(q.enqueue(entry(1.0, 0)).unwrap().is_none());
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn default_capacity_holds_last_32() {
        let mut q = MemoryQueue::new(DEFAULT_CAPACITY, 2);
        for i in 0..40 {
            q.enqueue(entry(i as f64, i)).unwrap();
        }
        let firsts: Vec<f64> = q.entries().map(|e| e.embedding[0]).collect();
        assert_eq!(firsts, (8..40).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut q = MemoryQueue::new(4, 3);
        assert!(matches!(q.enqueue(entry(1.0, 0)), Err(Error::Shape { .. })));
    }

    #[test]
    fn turn_index_must_advance() {
        let mut q = MemoryQueue::new(4, 2);
        q.enqueue(entry(1.0, 3)).unwrap();
        assert!(q.enqueue(entry(1.0, 2)).is_err());
        assert!(q.enqueue(entry(1.0, 3)).is_err());
        let img = MemoryEntry::new(vec![0.0, 0.0], EntryKind::Image, 4, "d").unwrap();
        q.enqueue(img).unwrap();
        q.enqueue(entry(2.0, 4)).unwrap();
        // a different dialogue starts its own numbering
        q.enqueue(MemoryEntry::new(vec![0.0, 1.0], EntryKind::TextTurn, 0, "e").unwrap())
            .unwrap();
    }

    #[test]
    fn non_finite_entry_rejected() {
        assert!(MemoryEntry::new(vec![f64::NAN], EntryKind::Image, 0, "d").is_err());
    }

    #[test]
    fn zero_capacity_never_stores() {
        let mut q = MemoryQueue::new(0, 2);
        assert!(q.enqueue(entry(1.0, 0)).unwrap().is_some());
        assert!(q.is_empty());
        assert!(q.snapshot().is_empty());
    }

    #[test]
    fn snapshot_semantics() {
        let mut q = MemoryQueue::new(8, 2);
        let empty = q.snapshot();
        assert!(empty.is_empty() && empty.embeddings().is_none());

        for i in 0..3 {
            q.enqueue(entry(i as f64 + 1.0, i)).unwrap();
        }
        let snap = q.snapshot();
        let t = snap.embeddings().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        for (i, e) in q.entries().enumerate() {
            assert_eq!(t.row(i), e.embedding.as_slice());
        }
        q.enqueue(entry(9.0, 5)).unwrap();
        assert_eq!(snap.embeddings().unwrap(), t);
        assert_eq!(snap.len(), 3);
    }
}
