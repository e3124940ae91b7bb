//! Domain-only projections of bipartite graphs.
//!
//! Two domains are adjacent in the transformed graph iff some entity is
//! connected to both in the base bipartite graph. A single high-degree entity
//! induces a clique over every domain it touches, so transformed edges are
//! never materialized here; neighborhoods come from a two-hop traversal with
//! a reusable dedup scratch. Views are pure and freely shareable, each worker
//! owns its scratch.

use crate::graph::{BipartiteGraph, DomainId};

/// Reusable per-worker traversal state sized to the snapshot's domain table.
///
/// `counts` doubles as the visited marker (zero means unseen) and records the
/// number of shared entities per touched domain. Reset cost is proportional
/// to the number of touched vertices, not the table size.
pub struct TraversalScratch {
    counts: Vec<u32>,
    touched: Vec<u32>,
}

impl TraversalScratch {
    pub fn new(n_domains: usize) -> TraversalScratch {
        TraversalScratch {
            counts: vec![0; n_domains],
            touched: Vec::new(),
        }
    }

    fn reset(&mut self) {
        for &t in &self.touched {
            self.counts[t as usize] = 0;
        }
        self.touched.clear();
    }
}

/// Lazy view of one relation's transformed graph.
#[derive(Clone, Copy)]
pub struct TransformedView<'g> {
    base: &'g BipartiteGraph,
    entity_degree_cap: Option<usize>,
}

impl<'g> TransformedView<'g> {
    pub fn new(base: &'g BipartiteGraph) -> TransformedView<'g> {
        TransformedView {
            base,
            entity_degree_cap: None,
        }
    }

    /// Entities with bipartite degree above the cap are skipped during
    /// traversal. Off by default; an escape hatch for pathological hubs.
    pub fn with_entity_cap(base: &'g BipartiteGraph, cap: Option<usize>) -> TransformedView<'g> {
        TransformedView {
            base,
            entity_degree_cap: cap,
        }
    }

    pub fn base(&self) -> &'g BipartiteGraph {
        self.base
    }

    fn visit(&self, d: DomainId, scratch: &mut TraversalScratch) {
        debug_assert_eq!(scratch.counts.len(), self.base.n_domains());
        scratch.reset();
        for &e in self.base.domain_row(d.0) {
            let row = self.base.entity_row(e);
            if let Some(cap) = self.entity_degree_cap {
                if row.len() > cap {
                    continue;
                }
            }
            for &d2 in row {
                if d2 == d.0 {
                    continue;
                }
                if scratch.counts[d2 as usize] == 0 {
                    scratch.touched.push(d2);
                }
                scratch.counts[d2 as usize] += 1;
            }
        }
    }

    /// Domains sharing at least one entity with `d`, sorted, without `d`.
    pub fn neighbors(&self, d: DomainId, scratch: &mut TraversalScratch) -> Vec<DomainId> {
        self.visit(d, scratch);
        let mut out: Vec<DomainId> = scratch.touched.iter().map(|&t| DomainId(t)).collect();
        out.sort_unstable();
        out
    }

    /// Neighbors together with the number of shared entities, sorted by id.
    pub fn neighbors_with_counts(
        &self,
        d: DomainId,
        scratch: &mut TraversalScratch,
    ) -> Vec<(DomainId, u32)> {
        self.visit(d, scratch);
        let mut out: Vec<(DomainId, u32)> = scratch
            .touched
            .iter()
            .map(|&t| (DomainId(t), scratch.counts[t as usize]))
            .collect();
        out.sort_unstable();
        out
    }

    /// Transformed degree without allocating the neighbor list.
    pub fn degree(&self, d: DomainId, scratch: &mut TraversalScratch) -> usize {
        self.visit(d, scratch);
        scratch.touched.len()
    }

    /// Number of entities adjacent to both domains in the base graph,
    /// computed by a sorted-merge intersection.
    pub fn shared_entities(&self, d1: DomainId, d2: DomainId) -> usize {
        debug_assert_ne!(d1, d2);
        let a = self.base.domain_row(d1.0);
        let b = self.base.domain_row(d2.0);
        sorted_intersection_len(a, b)
    }
}

pub(crate) fn sorted_intersection_len(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}
