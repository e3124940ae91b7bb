//! Vertex and edge features computed from raw interaction graphs.
//!
//! Unbounded counts are compressed by `x -> ln(x + 1)` to tame their dynamic
//! range (the natural logarithm; any base differs only by an affine rescaling
//! absorbed by the first dense layer). The Jaccard index and the `detected`
//! flag are left uncompressed. The `detected` flag consults the active
//! (protocol-masked) denylist everywhere so that labels cannot leak into
//! features.

use crate::graph::{ActiveDenylist, BipartiteGraph, DomainId};
use crate::transform::{sorted_intersection_len, TransformedView, TraversalScratch};

pub const VERTEX_FEATURE_DIM: usize = 2;
pub const EDGE_FEATURE_DIM: usize = 6;

/// Serialized ordering of the vertex feature vector.
pub const VERTEX_FEATURE_NAMES: [&str; VERTEX_FEATURE_DIM] = ["degree", "transformed_degree"];

/// Serialized ordering of the edge feature vector.
pub const EDGE_FEATURE_NAMES: [&str; EDGE_FEATURE_DIM] = [
    "neighbor_degree",
    "intersection",
    "union",
    "jaccard",
    "attachment",
    "detected",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VertexFeatures {
    pub degree: f64,
    pub transformed_degree: f64,
}

impl VertexFeatures {
    pub fn to_array(self) -> [f64; VERTEX_FEATURE_DIM] {
        [self.degree, self.transformed_degree]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeFeatures {
    pub neighbor_degree: f64,
    pub intersection: f64,
    pub union: f64,
    pub jaccard: f64,
    pub attachment: f64,
    pub detected: f64,
}

impl EdgeFeatures {
    pub fn to_array(self) -> [f64; EDGE_FEATURE_DIM] {
        [
            self.neighbor_degree,
            self.intersection,
            self.union,
            self.jaccard,
            self.attachment,
            self.detected,
        ]
    }
}

fn compress(count: usize) -> f64 {
    (count as f64).ln_1p()
}

/// Features of a domain: bipartite degree and transformed degree.
pub fn vertex_features(
    g: &BipartiteGraph,
    view: &TransformedView,
    scratch: &mut TraversalScratch,
    d: DomainId,
) -> VertexFeatures {
    VertexFeatures {
        degree: compress(g.domain_degree(d)),
        transformed_degree: compress(view.degree(d, scratch)),
    }
}

/// Features of a transformed edge (d, u), with neighborhoods taken in the
/// bipartite graph. `u` is expected to be transformed-adjacent to `d`, which
/// guarantees a non-empty union.
pub fn edge_features(
    g: &BipartiteGraph,
    d: DomainId,
    u: DomainId,
    active: &ActiveDenylist,
) -> EdgeFeatures {
    let nd = g.domain_row(d.0);
    let nu = g.domain_row(u.0);
    let raw_intersection = sorted_intersection_len(nd, nu);
    let raw_union = nd.len() + nu.len() - raw_intersection;
    debug_assert!(raw_union >= 1, "transformed-adjacent domains share an entity");
    let jaccard = if raw_union == 0 {
        0.0
    } else {
        raw_intersection as f64 / raw_union as f64
    };
    EdgeFeatures {
        neighbor_degree: compress(nu.len()),
        intersection: compress(raw_intersection),
        union: compress(raw_union),
        jaccard,
        attachment: compress(nd.len() * nu.len()),
        detected: if active.contains(u) { 1.0 } else { 0.0 },
    }
}
