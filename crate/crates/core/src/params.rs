//! Named parameter layouts and the flat parameter vectors laid out by them.
//!
//! A layout lists backbone layers followed by one affine head per task. Heads
//! are appended as tasks arrive, so an older layout is always a prefix of a
//! newer one; displacements recorded against an older layout extend to the
//! newer one by zero padding.

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntryKind {
    BackboneWeight,
    BackboneBias,
    /// Head weight matrix of the given task (1-based).
    HeadWeight(usize),
    HeadBias(usize),
}

impl EntryKind {
    pub fn is_head(self) -> bool {
        matches!(self, EntryKind::HeadWeight(_) | EntryKind::HeadBias(_))
    }

    pub fn head_task(self) -> Option<usize> {
        match self {
            EntryKind::HeadWeight(t) | EntryKind::HeadBias(t) => Some(t),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: EntryKind,
}

impl LayoutEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, kind: EntryKind) -> Self {
        Self {
            name: name.into(),
            shape,
            kind,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// (rows, cols) for a matrix entry; vectors are treated as a single row.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => (1, self.numel()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LayoutEntry>", into = "Vec<LayoutEntry>")]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
    offsets: Vec<usize>,
    total_len: usize,
}

impl TryFrom<Vec<LayoutEntry>> for ParamLayout {
    type Error = Error;
    fn try_from(entries: Vec<LayoutEntry>) -> Result<Self> {
        ParamLayout::new(entries)
    }
}

impl From<ParamLayout> for Vec<LayoutEntry> {
    fn from(l: ParamLayout) -> Self {
        l.entries
    }
}

impl ParamLayout {
    pub fn new(entries: Vec<LayoutEntry>) -> Result<Self> {
        let mut layout = Self {
            entries: Vec::with_capacity(entries.len()),
            offsets: Vec::with_capacity(entries.len()),
            total_len: 0,
        };
        for e in entries {
            layout.push(e)?;
        }
        Ok(layout)
    }

    pub fn empty() -> Self {
        Self {
            entries: Vec::new(),
            offsets: Vec::new(),
            total_len: 0,
        }
    }

    /// Appends an entry, enforcing unique names and increasing head ids.
    pub fn push(&mut self, entry: LayoutEntry) -> Result<()> {
        if entry.shape.is_empty() || entry.shape.contains(&0) {
            return Err(Error::layout(format!(
                "entry {} has a degenerate shape {:?}",
                entry.name, entry.shape
            )));
        }
        if self.entries.iter().any(|e| e.name == entry.name) {
            return Err(Error::layout(format!("duplicate entry name {}", entry.name)));
        }
        if let Some(t) = entry.kind.head_task() {
            if let Some(last) = self.entries.iter().rev().find_map(|e| e.kind.head_task()) {
                if t < last {
                    return Err(Error::layout(format!(
                        "head entry {} for task {t} follows task {last}",
                        entry.name
                    )));
                }
            }
        } else if self.entries.iter().any(|e| e.kind.is_head()) {
            return Err(Error::layout(format!(
                "backbone entry {} placed after head entries",
                entry.name
            )));
        }
        self.offsets.push(self.total_len);
        self.total_len += entry.numel();
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn offset(&self, idx: usize) -> usize {
        self.offsets[idx]
    }

    /// Flat index range of entry `idx`.
    pub fn range(&self, idx: usize) -> std::ops::Range<usize> {
        let o = self.offsets[idx];
        o..o + self.entries[idx].numel()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// True when `self`'s entries are exactly the leading entries of `other`.
    pub fn is_prefix_of(&self, other: &ParamLayout) -> bool {
        self.entries.len() <= other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| a == b)
    }

    /// Task ids that own a head, in layout order.
    pub fn head_tasks(&self) -> Vec<usize> {
        let mut seen = Vec::new();
        for e in &self.entries {
            if let Some(t) = e.kind.head_task() {
                if seen.last() != Some(&t) {
                    seen.push(t);
                }
            }
        }
        seen
    }

    /// Per-scalar flag: true for head parameters.
    pub fn head_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total_len];
        for (i, e) in self.entries.iter().enumerate() {
            if e.kind.is_head() {
                mask[self.range(i)].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }

    pub fn names(&self) -> HashSet<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }
}

/// A flat parameter array interpreted through a [`ParamLayout`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::layout(format!(
                "value count {} does not match layout length {}",
                values.len(),
                layout.total_len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("non-finite parameter at index {i}")));
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let n = layout.total_len();
        Self {
            layout,
            values: vec![0.0; n],
        }
    }

    /// Construction without the finiteness scan, for hot loops whose inputs
    /// are already validated.
    pub(crate) fn from_raw(layout: Arc<ParamLayout>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), layout.total_len());
        Self { layout, values }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&[f64]> {
        self.layout.index_of(name).map(|i| &self.values[self.layout.range(i)])
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let i = self.layout.index_of(name)?;
        let r = self.layout.range(i);
        Some(&mut self.values[r])
    }

    /// Zero-pads onto a layout that extends this one.
    pub fn extended_to(&self, layout: &Arc<ParamLayout>) -> Result<ParamVector> {
        if !self.layout.is_prefix_of(layout) {
            return Err(Error::layout("target layout does not extend the source layout"));
        }
        let mut values = self.values.clone();
        values.resize(layout.total_len(), 0.0);
        Ok(ParamVector {
            layout: layout.clone(),
            values,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        crate::linalg::norm2(&self.values)
    }
}

/// Zero-pads a slice laid out by a prefix layout to `len` scalars.
pub(crate) fn padded(values: &[f64], len: usize) -> Vec<f64> {
    let mut v = values.to_vec();
    v.resize(len, 0.0);
    v
}
