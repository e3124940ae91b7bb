//! Recursive sample algebra: leaf vectors, bags of same-schema samples,
//! tuples of mixed-schema samples, plus a missing-part marker.
//!
//! The neighborhood of a central domain in one transformed graph becomes one
//! subsample per relation: a tuple of the central vertex's feature leaf and a
//! bag of per-neighbor instances. Bags are importance sampled; the bag of a
//! vertex at distance `t` only contains vertices at distance `t + 1`, which
//! restricts the subgraph to edges on shortest paths from the central vertex.
//! Relations absent from a snapshot map to `Missing`, which is distinct from
//! an empty bag; both are imputed with learned vectors in the model.

use crate::error::{Error, Result};
use crate::features::{edge_features, vertex_features, EDGE_FEATURE_DIM, VERTEX_FEATURE_DIM};
use crate::graph::{ActiveDenylist, BipartiteGraph, DomainId, SnapshotCollection};
use crate::sampling::sample_bag;
use crate::seed::mix;
use crate::transform::{TransformedView, TraversalScratch};

/// Shape contract for [`HmilSample`] values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HmilSchema {
    Leaf { dim: usize },
    Bag(Box<HmilSchema>),
    Tuple(Vec<HmilSchema>),
}

/// A recursive sample value.
#[derive(Clone, Debug, PartialEq)]
pub enum HmilSample {
    Leaf(Vec<f64>),
    /// `weights` carries one importance weight per child.
    Bag {
        children: Vec<HmilSample>,
        weights: Vec<f64>,
    },
    Tuple(Vec<HmilSample>),
    Missing,
}

impl HmilSample {
    pub fn empty_bag() -> HmilSample {
        HmilSample::Bag {
            children: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Indented text rendering for debugging; not a stable format.
    pub fn render_tree(&self) -> String {
        let mut out = String::new();
        self.render_into(&mut out, 0);
        out
    }

    fn render_into(&self, out: &mut String, depth: usize) {
        let pad = "  ".repeat(depth);
        match self {
            HmilSample::Leaf(v) => {
                let vals: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
                out.push_str(&format!("{pad}leaf [{}]\n", vals.join(", ")));
            }
            HmilSample::Bag { children, weights } => {
                out.push_str(&format!("{pad}bag ({} instances)\n", children.len()));
                for (c, w) in children.iter().zip(weights) {
                    out.push_str(&format!("{pad}  w={w:.3}\n"));
                    c.render_into(out, depth + 2);
                }
            }
            HmilSample::Tuple(items) => {
                out.push_str(&format!("{pad}tuple ({} items)\n", items.len()));
                for item in items {
                    item.render_into(out, depth + 1);
                }
            }
            HmilSample::Missing => out.push_str(&format!("{pad}missing\n")),
        }
    }
}

/// Checks that a sample conforms to a schema. `Missing` conforms to any
/// schema and an empty bag conforms to any bag schema. On mismatch, the error
/// names the first offending path.
pub fn check_schema(sample: &HmilSample, schema: &HmilSchema) -> Result<()> {
    check_at(sample, schema, "root")
}

fn check_at(sample: &HmilSample, schema: &HmilSchema, path: &str) -> Result<()> {
    let mismatch = |detail: String| {
        Err(Error::SchemaMismatch {
            path: path.to_string(),
            detail,
        })
    };
    match (sample, schema) {
        (HmilSample::Missing, _) => Ok(()),
        (HmilSample::Leaf(v), HmilSchema::Leaf { dim }) => {
            if v.len() == *dim {
                Ok(())
            } else {
                mismatch(format!("dim {} != {}", v.len(), dim))
            }
        }
        (HmilSample::Bag { children, weights }, HmilSchema::Bag(child)) => {
            if children.len() != weights.len() {
                return mismatch(format!(
                    "{} children but {} weights",
                    children.len(),
                    weights.len()
                ));
            }
            if let Some(w) = weights.iter().find(|w| **w <= 0.0) {
                return mismatch(format!("non-positive weight {w}"));
            }
            for (i, c) in children.iter().enumerate() {
                check_at(c, child, &format!("{path}.bag[{i}]"))?;
            }
            Ok(())
        }
        (HmilSample::Tuple(items), HmilSchema::Tuple(schemas)) => {
            if items.len() != schemas.len() {
                return mismatch(format!("tuple arity {} != {}", items.len(), schemas.len()));
            }
            for (i, (item, s)) in items.iter().zip(schemas).enumerate() {
                check_at(item, s, &format!("{path}.tuple[{i}]"))?;
            }
            Ok(())
        }
        (got, want) => mismatch(format!("{} where {} expected", kind(got), kind_schema(want))),
    }
}

fn kind(s: &HmilSample) -> &'static str {
    match s {
        HmilSample::Leaf(_) => "leaf",
        HmilSample::Bag { .. } => "bag",
        HmilSample::Tuple(_) => "tuple",
        HmilSample::Missing => "missing",
    }
}

fn kind_schema(s: &HmilSchema) -> &'static str {
    match s {
        HmilSchema::Leaf { .. } => "leaf",
        HmilSchema::Bag(_) => "bag",
        HmilSchema::Tuple(_) => "tuple",
    }
}

/// Schema of the subsample describing one relation, for a vertex `level`
/// steps away from the central vertex.
fn node_schema(level: usize, steps: usize) -> HmilSchema {
    HmilSchema::Tuple(vec![
        HmilSchema::Leaf {
            dim: VERTEX_FEATURE_DIM,
        },
        HmilSchema::Bag(Box::new(instance_schema(level + 1, steps))),
    ])
}

fn instance_schema(level: usize, steps: usize) -> HmilSchema {
    if level == steps {
        HmilSchema::Leaf {
            dim: EDGE_FEATURE_DIM,
        }
    } else {
        HmilSchema::Tuple(vec![
            node_schema(level, steps),
            HmilSchema::Leaf {
                dim: EDGE_FEATURE_DIM,
            },
        ])
    }
}

/// Schema of a full graph sample: a tuple with one subsample per relation.
pub fn graph_sample_schema(steps: usize, n_relations: usize) -> HmilSchema {
    assert!(steps >= 1);
    HmilSchema::Tuple(vec![node_schema(0, steps); n_relations])
}

/// Knobs for neighborhood sample construction.
#[derive(Clone, Copy, Debug)]
pub struct SampleParams {
    /// Neighborhood depth `T`.
    pub steps: usize,
    /// Negative subsampling bound per bag.
    pub k_minus: usize,
    /// Optional traversal cap on entity degree.
    pub entity_degree_cap: Option<usize>,
}

impl Default for SampleParams {
    fn default() -> SampleParams {
        SampleParams {
            steps: 1,
            k_minus: 100,
            entity_degree_cap: None,
        }
    }
}

const UNSEEN: u8 = u8::MAX;

/// Builds neighborhood samples for central vertices of one snapshot. Owns the
/// traversal scratch, so construction is pure and parallelizes across builders.
pub struct SampleBuilder<'s> {
    snapshot: &'s SnapshotCollection,
    /// One slot per model relation: the snapshot graph it maps to, if any.
    graphs: Vec<Option<&'s BipartiteGraph>>,
    params: SampleParams,
    scratch: TraversalScratch,
    dist: Vec<u8>,
    reached: Vec<u32>,
}

impl<'s> SampleBuilder<'s> {
    /// Maps `relation_names` (the model's tuple order) onto the snapshot.
    /// Names absent from the snapshot yield `Missing` tuple slots.
    pub fn new(
        snapshot: &'s SnapshotCollection,
        relation_names: &[String],
        params: SampleParams,
    ) -> SampleBuilder<'s> {
        assert!(params.steps >= 1);
        let graphs = relation_names
            .iter()
            .map(|name| snapshot.graph(name))
            .collect();
        SampleBuilder {
            snapshot,
            graphs,
            params,
            scratch: TraversalScratch::new(snapshot.n_domains()),
            dist: vec![UNSEEN; snapshot.n_domains()],
            reached: Vec::new(),
        }
    }

    /// Builder over the snapshot's own relation order.
    pub fn for_snapshot(snapshot: &'s SnapshotCollection, params: SampleParams) -> SampleBuilder<'s> {
        let names = snapshot.relation_names();
        SampleBuilder::new(snapshot, &names, params)
    }

    /// Builds the sample for central vertex `d`. Deterministic given `seed`.
    pub fn build(&mut self, d: DomainId, active: &ActiveDenylist, seed: u64) -> Result<HmilSample> {
        if d.0 as usize >= self.snapshot.n_domains() {
            return Err(Error::UnknownDomain(format!("id {}", d.0)));
        }
        let mut slots = Vec::with_capacity(self.graphs.len());
        for rel_idx in 0..self.graphs.len() {
            match self.graphs[rel_idx] {
                None => slots.push(HmilSample::Missing),
                Some(g) => {
                    let view = TransformedView::with_entity_cap(g, self.params.entity_degree_cap);
                    slots.push(self.build_relation(g, view, rel_idx, d, active, seed)?);
                }
            }
        }
        Ok(HmilSample::Tuple(slots))
    }

    fn build_relation(
        &mut self,
        g: &BipartiteGraph,
        view: TransformedView,
        rel_idx: usize,
        d: DomainId,
        active: &ActiveDenylist,
        seed: u64,
    ) -> Result<HmilSample> {
        self.bfs(view, d);
        let sample = self.node_sample(g, view, rel_idx, d, 0, active, seed);
        self.reset_bfs();
        Ok(sample)
    }

    /// Breadth-first distances from `d` up to `steps`, over the full (not
    /// subsampled) transformed neighborhood; a vertex reachable at several
    /// distances keeps the minimum.
    fn bfs(&mut self, view: TransformedView, d: DomainId) {
        self.dist[d.0 as usize] = 0;
        self.reached.push(d.0);
        let mut frontier = vec![d];
        for level in 0..self.params.steps as u8 {
            let mut next = Vec::new();
            for &u in &frontier {
                for v in view.neighbors(u, &mut self.scratch) {
                    let slot = &mut self.dist[v.0 as usize];
                    if *slot == UNSEEN {
                        *slot = level + 1;
                        self.reached.push(v.0);
                        next.push(v);
                    }
                }
            }
            frontier = next;
        }
    }

    fn reset_bfs(&mut self) {
        for &v in &self.reached {
            self.dist[v as usize] = UNSEEN;
        }
        self.reached.clear();
    }

    fn node_sample(
        &mut self,
        g: &BipartiteGraph,
        view: TransformedView,
        rel_idx: usize,
        u: DomainId,
        level: usize,
        active: &ActiveDenylist,
        seed: u64,
    ) -> HmilSample {
        let vert = vertex_features(g, &view, &mut self.scratch, u);

        // Streamlining: only expand into vertices exactly one step further out.
        let next_level = (level + 1) as u8;
        let candidates: Vec<DomainId> = view
            .neighbors(u, &mut self.scratch)
            .into_iter()
            .filter(|v| self.dist[v.0 as usize] == next_level)
            .collect();

        let bag_seed = mix(&[seed, rel_idx as u64, level as u64, u.0 as u64]);
        let sampled = sample_bag(&candidates, active, self.params.k_minus, bag_seed);

        let mut children = Vec::with_capacity(sampled.len());
        let mut weights = Vec::with_capacity(sampled.len());
        for &(w, weight) in &sampled.instances {
            let edge = HmilSample::Leaf(edge_features(g, u, w, active).to_array().to_vec());
            let child = if level + 1 == self.params.steps {
                edge
            } else {
                let inner = self.node_sample(g, view, rel_idx, w, level + 1, active, seed);
                HmilSample::Tuple(vec![inner, edge])
            };
            children.push(child);
            weights.push(weight);
        }

        HmilSample::Tuple(vec![
            HmilSample::Leaf(vert.to_array().to_vec()),
            HmilSample::Bag { children, weights },
        ])
    }
}

/// One-off convenience wrapper around [`SampleBuilder`].
pub fn build_graph_sample(
    snapshot: &SnapshotCollection,
    d: DomainId,
    active: &ActiveDenylist,
    params: SampleParams,
    seed: u64,
) -> Result<HmilSample> {
    SampleBuilder::for_snapshot(snapshot, params).build(d, active, seed)
}
