use std::collections::BTreeMap;

/// Multiply–accumulate counter with a per-operation breakdown.
/// `total` always equals the sum of the breakdown by construction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MulAddCounter {
    total: u64,
    by_op: BTreeMap<String, u64>,
}

impl MulAddCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, op: &str, count: u64) {
        if count == 0 {
            return;
        }
        self.total += count;
        *self.by_op.entry(op.to_string()).or_insert(0) += count;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn get(&self, op: &str) -> u64 {
        self.by_op.get(op).copied().unwrap_or(0)
    }

    pub fn breakdown(&self) -> &BTreeMap<String, u64> {
        &self.by_op
    }

    /// Add another counter into this one (counting is additive over op sequences).
    pub fn merge(&mut self, other: &MulAddCounter) {
        for (op, &n) in &other.by_op {
            self.record(op, n);
        }
    }
}
