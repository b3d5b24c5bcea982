use std::collections::HashMap;

use super::{ContextKey, TinyPolicy};

/// Sparse gradient over policy logits, one dense row per visited context.
///
/// Tables are plain values: they add, scale and merge, so per-example
/// gradients computed on different workers can be summed afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTable {
    width: usize,
    rows: HashMap<ContextKey, Vec<f64>>,
}

impl GradTable {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            rows: HashMap::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, ctx: ContextKey) -> Option<&[f64]> {
        self.rows.get(&ctx).map(Vec::as_slice)
    }

    pub fn row_mut(&mut self, ctx: ContextKey) -> &mut [f64] {
        let w = self.width;
        self.rows.entry(ctx).or_insert_with(|| vec![0.0; w])
    }

    pub fn rows(&self) -> impl Iterator<Item = (ContextKey, &[f64])> {
        self.rows.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Value at `(ctx, symbol)`; zero for untouched entries.
    pub fn get(&self, ctx: ContextKey, symbol: usize) -> f64 {
        self.rows.get(&ctx).map_or(0.0, |r| r[symbol])
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradTable, scale: f64) {
        assert_eq!(self.width, other.width, "gradient widths differ");
        for (k, row) in &other.rows {
            let dst = self.row_mut(*k);
            for (d, s) in dst.iter_mut().zip(row) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for row in self.rows.values_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|r| r.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sum of a sequence of tables, merged in iteration order.
    pub fn sum<'a>(width: usize, tables: impl IntoIterator<Item = &'a GradTable>) -> GradTable {
        let mut acc = GradTable::new(width);
        for t in tables {
            acc.add_scaled(t, 1.0);
        }
        acc
    }

    /// Entries in a fixed (sorted) order, for comparisons and hashing.
    pub fn sorted_rows(&self) -> Vec<(ContextKey, &[f64])> {
        let mut v: Vec<_> = self.rows().collect();
        v.sort_by_key(|(k, _)| *k);
        v
    }
}

impl TinyPolicy {
    /// Plain gradient step on the given table: `logits += lr * delta`.
    pub fn apply_delta(&mut self, delta: &GradTable, lr: f64) {
        for (k, row) in delta.rows() {
            let dst = self.row_mut(k);
            for (d, s) in dst.iter_mut().zip(row) {
                *d += lr * s;
            }
        }
    }
}
