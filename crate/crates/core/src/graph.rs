//! Immutable bipartite interaction graphs grouped into weekly snapshots.
//!
//! A snapshot holds one bipartite graph per relation. Every graph of a
//! snapshot shares a single domain table, so a domain keeps the same dense
//! index across relations. Graphs are immutable once built and safe to read
//! from any number of threads.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Dense index of a second-level domain within one snapshot.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct DomainId(pub u32);

/// Dense index of a non-domain entity within one (snapshot, relation).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct EntityId(pub u32);

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Cardinality {
    ManyToMany,
    ManyToOne,
}

impl Cardinality {
    pub fn parse(s: &str) -> Option<Cardinality> {
        match s {
            "many-to-many" => Some(Cardinality::ManyToMany),
            "many-to-one" => Some(Cardinality::ManyToOne),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Cardinality::ManyToMany => "many-to-many",
            Cardinality::ManyToOne => "many-to-one",
        }
    }
}

/// Compressed sparse rows; targets within a row are sorted ascending.
#[derive(Clone, Default, Debug)]
struct Csr {
    offsets: Vec<usize>,
    targets: Vec<u32>,
}

impl Csr {
    fn from_sorted_pairs(n_rows: usize, pairs: &[(u32, u32)]) -> Csr {
        let mut offsets = vec![0usize; n_rows + 1];
        for &(r, _) in pairs {
            offsets[r as usize + 1] += 1;
        }
        for i in 0..n_rows {
            offsets[i + 1] += offsets[i];
        }
        let targets = pairs.iter().map(|&(_, t)| t).collect();
        Csr { offsets, targets }
    }

    fn n_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    fn row(&self, i: usize) -> &[u32] {
        &self.targets[self.offsets[i]..self.offsets[i + 1]]
    }
}

/// One relation's domain-entity adjacency, immutable after ingestion.
#[derive(Debug)]
pub struct BipartiteGraph {
    relation: String,
    cardinality: Cardinality,
    forward: Csr,
    reverse: Csr,
    /// Number of collapsed duplicate input edges, aligned with the forward
    /// edge list. Kept for possible future edge weighting.
    multiplicity: Vec<u32>,
    entity_keys: Vec<String>,
}

impl BipartiteGraph {
    pub fn relation(&self) -> &str {
        &self.relation
    }

    pub fn cardinality(&self) -> Cardinality {
        self.cardinality
    }

    pub fn n_domains(&self) -> usize {
        self.forward.n_rows()
    }

    pub fn n_entities(&self) -> usize {
        self.reverse.n_rows()
    }

    pub fn n_edges(&self) -> usize {
        self.forward.targets.len()
    }

    /// Entities adjacent to a domain, sorted by entity id. A domain that is
    /// present in the snapshot but absent from this relation has an empty row.
    pub fn domain_neighbors(&self, d: DomainId) -> Result<&[u32]> {
        if (d.0 as usize) < self.n_domains() {
            Ok(self.forward.row(d.0 as usize))
        } else {
            Err(Error::ForeignId {
                id: d.0 as u64,
                size: self.n_domains(),
            })
        }
    }

    /// Domains adjacent to an entity, sorted by domain id.
    pub fn entity_neighbors(&self, e: EntityId) -> Result<&[u32]> {
        if (e.0 as usize) < self.n_entities() {
            Ok(self.reverse.row(e.0 as usize))
        } else {
            Err(Error::ForeignId {
                id: e.0 as u64,
                size: self.n_entities(),
            })
        }
    }

    pub(crate) fn domain_row(&self, d: u32) -> &[u32] {
        self.forward.row(d as usize)
    }

    pub(crate) fn entity_row(&self, e: u32) -> &[u32] {
        self.reverse.row(e as usize)
    }

    pub fn domain_degree(&self, d: DomainId) -> usize {
        self.domain_row(d.0).len()
    }

    pub fn entity_degree(&self, e: EntityId) -> usize {
        self.entity_row(e.0).len()
    }

    pub fn entity_key(&self, e: EntityId) -> &str {
        &self.entity_keys[e.0 as usize]
    }

    pub fn entity_id(&self, raw: &str) -> Option<EntityId> {
        self.entity_keys
            .iter()
            .position(|k| k == raw)
            .map(|i| EntityId(i as u32))
    }

    /// Multiplicities of the collapsed duplicate edges, forward edge order.
    pub fn edge_multiplicities(&self) -> &[u32] {
        &self.multiplicity
    }

    fn write_canonical(&self, out: &mut Vec<u8>) {
        push_str(out, &self.relation);
        push_str(out, self.cardinality.as_str());
        out.extend_from_slice(&(self.n_entities() as u64).to_le_bytes());
        for key in &self.entity_keys {
            push_str(out, key);
        }
        out.extend_from_slice(&(self.n_edges() as u64).to_le_bytes());
        for d in 0..self.n_domains() {
            for (k, &e) in self.forward.row(d).iter().enumerate() {
                let m = self.multiplicity[self.forward.offsets[d] + k];
                out.extend_from_slice(&(d as u32).to_le_bytes());
                out.extend_from_slice(&e.to_le_bytes());
                out.extend_from_slice(&m.to_le_bytes());
            }
        }
    }
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Edge list of one relation prior to snapshot assembly.
pub struct RelationEdges {
    pub relation: String,
    pub cardinality: Cardinality,
    /// (domain, entity) pairs; duplicates are collapsed during assembly.
    pub edges: Vec<(String, String)>,
}

/// A labelled collection of bipartite graphs sharing one domain table.
#[derive(Debug)]
pub struct SnapshotCollection {
    label: String,
    domain_names: Vec<String>,
    domain_index: HashMap<String, u32>,
    graphs: Vec<BipartiteGraph>,
    graph_index: HashMap<String, usize>,
}

impl SnapshotCollection {
    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn n_domains(&self) -> usize {
        self.domain_names.len()
    }

    pub fn domain_name(&self, d: DomainId) -> &str {
        &self.domain_names[d.0 as usize]
    }

    pub fn domain_id(&self, name: &str) -> Option<DomainId> {
        self.domain_index.get(name).map(|&i| DomainId(i))
    }

    pub fn domain_ids(&self) -> impl Iterator<Item = DomainId> {
        (0..self.n_domains() as u32).map(DomainId)
    }

    pub fn n_relations(&self) -> usize {
        self.graphs.len()
    }

    pub fn graphs(&self) -> &[BipartiteGraph] {
        &self.graphs
    }

    pub fn graph(&self, relation: &str) -> Option<&BipartiteGraph> {
        self.graph_index.get(relation).map(|&i| &self.graphs[i])
    }

    pub fn relation_names(&self) -> Vec<String> {
        self.graphs.iter().map(|g| g.relation.clone()).collect()
    }

    /// Deterministic byte encoding; two ingestions of the same input are
    /// byte-identical here.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        push_str(&mut out, &self.label);
        out.extend_from_slice(&(self.n_domains() as u64).to_le_bytes());
        for name in &self.domain_names {
            push_str(&mut out, name);
        }
        out.extend_from_slice(&(self.graphs.len() as u64).to_le_bytes());
        for g in &self.graphs {
            g.write_canonical(&mut out);
        }
        out
    }
}

/// Assembles a snapshot from in-memory edge lists.
///
/// The domain table is the union of all domain columns, indexed in first-seen
/// order. Duplicate edges collapse into one edge with a multiplicity count.
pub fn build_snapshot(label: &str, relations: Vec<RelationEdges>) -> Result<SnapshotCollection> {
    let mut seen = HashSet::new();
    for rel in &relations {
        if !seen.insert(rel.relation.clone()) {
            return Err(Error::DuplicateRelation(rel.relation.clone()));
        }
    }

    let mut domain_names: Vec<String> = Vec::new();
    let mut domain_index: HashMap<String, u32> = HashMap::new();
    for rel in &relations {
        for (d, _) in &rel.edges {
            if !domain_index.contains_key(d) {
                domain_index.insert(d.clone(), domain_names.len() as u32);
                domain_names.push(d.clone());
            }
        }
    }
    let n_domains = domain_names.len();

    let mut graphs = Vec::with_capacity(relations.len());
    let mut graph_index = HashMap::new();
    for rel in relations {
        let mut entity_keys: Vec<String> = Vec::new();
        let mut entity_index: HashMap<String, u32> = HashMap::new();
        let mut pairs: Vec<(u32, u32)> = Vec::with_capacity(rel.edges.len());
        for (d, e) in &rel.edges {
            let di = domain_index[d];
            let ei = *entity_index.entry(e.clone()).or_insert_with(|| {
                entity_keys.push(e.clone());
                (entity_keys.len() - 1) as u32
            });
            pairs.push((di, ei));
        }

        pairs.sort_unstable();
        let mut dedup: Vec<(u32, u32)> = Vec::with_capacity(pairs.len());
        let mut multiplicity: Vec<u32> = Vec::with_capacity(pairs.len());
        for p in pairs {
            if dedup.last() == Some(&p) {
                *multiplicity.last_mut().unwrap() += 1;
            } else {
                dedup.push(p);
                multiplicity.push(1);
            }
        }

        if rel.cardinality == Cardinality::ManyToOne {
            for w in dedup.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::CardinalityConflict {
                        relation: rel.relation.clone(),
                        domain: domain_names[w[0].0 as usize].clone(),
                    });
                }
            }
        }

        let forward = Csr::from_sorted_pairs(n_domains, &dedup);
        let mut rev_pairs: Vec<(u32, u32)> = dedup.iter().map(|&(d, e)| (e, d)).collect();
        rev_pairs.sort_unstable();
        let reverse = Csr::from_sorted_pairs(entity_keys.len(), &rev_pairs);

        graph_index.insert(rel.relation.clone(), graphs.len());
        graphs.push(BipartiteGraph {
            relation: rel.relation,
            cardinality: rel.cardinality,
            forward,
            reverse,
            multiplicity,
            entity_keys,
        });
    }

    Ok(SnapshotCollection {
        label: label.to_string(),
        domain_names,
        domain_index,
        graphs,
        graph_index,
    })
}

fn read_relation_file(path: &Path) -> Result<RelationEdges> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing `relation<TAB>cardinality` header"))?;
    let header = header.map_err(|e| Error::io(path, e))?;
    let mut cols = header.split('\t');
    let relation = cols
        .next()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::parse(path, 1, "missing relation name in header"))?
        .to_string();
    let card_str = cols
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing cardinality in header"))?;
    let cardinality = Cardinality::parse(card_str).ok_or_else(|| {
        Error::parse(
            path,
            1,
            format!("unknown cardinality `{card_str}` (expected many-to-many or many-to-one)"),
        )
    })?;
    if cols.next().is_some() {
        return Err(Error::parse(path, 1, "header has more than two columns"));
    }

    if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
        if stem != relation {
            log::warn!(
                "relation `{relation}` read from file stem `{stem}` ({})",
                path.display()
            );
        }
    }

    let mut edges = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let domain = cols.next().unwrap_or("");
        let entity = cols.next().unwrap_or("");
        if domain.is_empty() || entity.is_empty() || cols.next().is_some() {
            return Err(Error::parse(
                path,
                idx + 1,
                "expected exactly `domain<TAB>entity`",
            ));
        }
        edges.push((domain.to_string(), entity.to_string()));
    }

    Ok(RelationEdges {
        relation,
        cardinality,
        edges,
    })
}

/// Ingests relation edge files into one snapshot. Relation order follows the
/// input file order.
pub fn ingest_relations(files: &[PathBuf], snapshot_label: &str) -> Result<SnapshotCollection> {
    let mut relations = Vec::with_capacity(files.len());
    for f in files {
        relations.push(read_relation_file(f)?);
    }
    build_snapshot(snapshot_label, relations)
}

/// Reads a snapshot directory (`<label>/relations/<name>.tsv`). The label is
/// the directory basename; relation files are taken in filename order.
pub fn ingest_snapshot_dir(dir: &Path) -> Result<SnapshotCollection> {
    let label = dir
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("snapshot")
        .to_string();
    let rel_dir = dir.join("relations");
    let mut files: Vec<PathBuf> = fs::read_dir(&rel_dir)
        .map_err(|e| Error::io(&rel_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "tsv"))
        .collect();
    files.sort();
    ingest_relations(&files, &label)
}

/// Set of known-malicious domains with a family tag per entry.
#[derive(Clone)]
pub struct Denylist {
    entries: HashMap<String, String>,
    as_of: String,
}

/// Anomalies observed while loading a denylist file.
#[derive(Debug, Default)]
pub struct DenylistLoadReport {
    /// Denylisted domains not observed in the snapshot. Retained in the list
    /// since they may appear in later snapshots.
    pub unseen: Vec<String>,
    /// Lines that lacked the family column and defaulted to `unknown`.
    pub defaulted_family: usize,
    /// Exact duplicate entries collapsed.
    pub duplicates: usize,
}

impl Denylist {
    pub fn from_entries<I, S, T>(entries: I, as_of: &str) -> Denylist
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        let mut map = HashMap::new();
        for (d, f) in entries {
            map.entry(d.into()).or_insert_with(|| f.into());
        }
        Denylist {
            entries: map,
            as_of: as_of.to_string(),
        }
    }

    pub fn as_of(&self) -> &str {
        &self.as_of
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains_name(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn family(&self, name: &str) -> Option<&str> {
        self.entries.get(name).map(|s| s.as_str())
    }

    /// Entries sorted by domain name.
    pub fn iter_sorted(&self) -> Vec<(&str, &str)> {
        let mut v: Vec<(&str, &str)> = self
            .entries
            .iter()
            .map(|(d, f)| (d.as_str(), f.as_str()))
            .collect();
        v.sort_unstable();
        v
    }

    pub fn family_histogram(&self) -> BTreeMap<String, usize> {
        let mut hist = BTreeMap::new();
        for family in self.entries.values() {
            *hist.entry(family.clone()).or_insert(0) += 1;
        }
        hist
    }

    /// Denylisted domains present in the snapshot, sorted by domain id.
    pub fn members_in(&self, snapshot: &SnapshotCollection) -> Vec<DomainId> {
        let mut v: Vec<DomainId> = self
            .entries
            .keys()
            .filter_map(|name| snapshot.domain_id(name))
            .collect();
        v.sort_unstable();
        v
    }
}

/// Loads a denylist file (`domain<TAB>family` lines, no header).
///
/// A missing family column is a warning, not an error; the family defaults to
/// `unknown`. Domains absent from the snapshot are retained but reported.
pub fn load_denylist(
    path: &Path,
    snapshot: &SnapshotCollection,
    as_of: &str,
) -> Result<(Denylist, DenylistLoadReport)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries: HashMap<String, String> = HashMap::new();
    let mut report = DenylistLoadReport::default();

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let domain = cols.next().unwrap_or("");
        if domain.is_empty() {
            return Err(Error::parse(path, idx + 1, "empty domain column"));
        }
        let family = match cols.next().filter(|f| !f.is_empty()) {
            Some(f) => f.to_string(),
            None => {
                report.defaulted_family += 1;
                log::warn!(
                    "{}:{}: missing family column, defaulting to `unknown`",
                    path.display(),
                    idx + 1
                );
                "unknown".to_string()
            }
        };
        if entries.insert(domain.to_string(), family).is_some() {
            report.duplicates += 1;
        }
    }

    let denylist = Denylist {
        entries,
        as_of: as_of.to_string(),
    };
    let mut unseen: Vec<String> = denylist
        .entries
        .keys()
        .filter(|name| snapshot.domain_id(name).is_none())
        .cloned()
        .collect();
    unseen.sort_unstable();
    report.unseen = unseen;
    if !report.unseen.is_empty() {
        log::info!(
            "denylist {}: {} domains not observed in snapshot `{}`",
            path.display(),
            report.unseen.len(),
            snapshot.label()
        );
    }
    Ok((denylist, report))
}

/// The denylist view used for feature computation, masked according to the
/// evaluation protocol (fold removal, generalization hold-outs).
///
/// Membership queries go through [`ActiveDenylist::contains`], which counts a
/// leak whenever a watched domain would be reported as detected. A correctly
/// masked pipeline keeps the leak counter at zero.
pub struct ActiveDenylist {
    member: Vec<bool>,
    watched: Vec<bool>,
    leaks: AtomicU64,
}

impl ActiveDenylist {
    pub fn empty(n_domains: usize) -> ActiveDenylist {
        ActiveDenylist {
            member: vec![false; n_domains],
            watched: Vec::new(),
            leaks: AtomicU64::new(0),
        }
    }

    pub fn from_members<I: IntoIterator<Item = DomainId>>(
        n_domains: usize,
        members: I,
    ) -> ActiveDenylist {
        let mut set = ActiveDenylist::empty(n_domains);
        for d in members {
            set.member[d.0 as usize] = true;
        }
        set
    }

    /// All snapshot-resident members of a denylist.
    pub fn resolve(denylist: &Denylist, snapshot: &SnapshotCollection) -> ActiveDenylist {
        ActiveDenylist::from_members(snapshot.n_domains(), denylist.members_in(snapshot))
    }

    /// Like [`ActiveDenylist::resolve`] but with the given domain names
    /// removed (treated as unknown everywhere).
    pub fn resolve_without(
        denylist: &Denylist,
        snapshot: &SnapshotCollection,
        excluded: &HashSet<String>,
    ) -> ActiveDenylist {
        let members = denylist
            .members_in(snapshot)
            .into_iter()
            .filter(|d| !excluded.contains(snapshot.domain_name(*d)));
        ActiveDenylist::from_members(snapshot.n_domains(), members)
    }

    /// Marks domains whose membership must never be visible through this
    /// view. Lookups that would report them are counted as leaks.
    pub fn watch<I: IntoIterator<Item = DomainId>>(mut self, domains: I) -> ActiveDenylist {
        if self.watched.is_empty() {
            self.watched = vec![false; self.member.len()];
        }
        for d in domains {
            self.watched[d.0 as usize] = true;
        }
        self
    }

    pub fn n_domains(&self) -> usize {
        self.member.len()
    }

    /// Membership test backing both the `detected` feature and the positive
    /// split of importance sampling.
    pub fn contains(&self, d: DomainId) -> bool {
        let hit = self.member[d.0 as usize];
        if hit && !self.watched.is_empty() && self.watched[d.0 as usize] {
            self.leaks.fetch_add(1, Ordering::Relaxed);
        }
        hit
    }

    pub fn leak_count(&self) -> u64 {
        self.leaks.load(Ordering::Relaxed)
    }

    pub fn n_members(&self) -> usize {
        self.member.iter().filter(|&&m| m).count()
    }

    pub fn members(&self) -> Vec<DomainId> {
        self.member
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(DomainId(i as u32)))
            .collect()
    }
}
