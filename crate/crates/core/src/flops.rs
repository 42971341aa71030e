//! Thread-local multiply-add tally used to instrument forward passes.
//!
//! Kernels call [`tally`] with the number of multiply-adds they actually
//! executed; the component is whatever scope the caller opened with
//! [`scope`]. Counting is always on and costs one thread-local add per kernel.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Embeddings,
    AttentionScores,
    AttentionMix,
    Projections,
    Mlp,
    Unembedding,
    InterventionAdds,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Embeddings,
        Component::AttentionScores,
        Component::AttentionMix,
        Component::Projections,
        Component::Mlp,
        Component::Unembedding,
        Component::InterventionAdds,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Embeddings => "embeddings",
            Component::AttentionScores => "attention_scores",
            Component::AttentionMix => "attention_mix",
            Component::Projections => "projections",
            Component::Mlp => "mlp",
            Component::Unembedding => "unembedding",
            Component::InterventionAdds => "intervention_adds",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

thread_local! {
    static COUNTS: Cell<[u64; 7]> = const { Cell::new([0; 7]) };
    static SCOPE: Cell<Option<Component>> = const { Cell::new(None) };
}

/// Multiply-add counts per component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCounts(pub [u64; 7]);

impl MacCounts {
    pub fn get(&self, c: Component) -> u64 {
        self.0[c.index()]
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }
}

/// Restores the previous scope on drop.
pub struct ScopeGuard {
    prev: Option<Component>,
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        SCOPE.with(|s| s.set(self.prev));
    }
}

pub fn scope(c: Component) -> ScopeGuard {
    let prev = SCOPE.with(|s| s.replace(Some(c)));
    ScopeGuard { prev }
}

/// Adds `macs` to the active scope; no-op outside any scope.
pub fn tally(macs: usize) {
    if let Some(c) = SCOPE.with(|s| s.get()) {
        tally_to(c, macs);
    }
}

pub fn tally_to(c: Component, macs: usize) {
    COUNTS.with(|counts| {
        let mut v = counts.get();
        v[c.index()] += macs as u64;
        counts.set(v);
    });
}

pub fn reset() {
    COUNTS.with(|c| c.set([0; 7]));
}

pub fn snapshot() -> MacCounts {
    MacCounts(COUNTS.with(|c| c.get()))
}

/// Runs `f` and returns the multiply-adds it executed on this thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, MacCounts) {
    let before = snapshot();
    let out = f();
    let after = snapshot();
    let mut diff = [0u64; 7];
    for (i, d) in diff.iter_mut().enumerate() {
        *d = after.0[i] - before.0[i];
    }
    (out, MacCounts(diff))
}
