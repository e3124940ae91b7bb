//! Synthetic multi-relation snapshots with planted malicious communities.
//!
//! Entity degrees follow a truncated discrete power law (configuration-model
//! attachment), matching the heavy-tailed degree profile of real interaction
//! graphs. Each campaign owns a dedicated entity pool: members attach to a
//! campaign entity with probability `p_in`, outsiders with the much smaller
//! `p_bg`, so campaigns form tight near-cliques in the transformed view with
//! sharp boundaries. The denylist covers only a `coverage` fraction of the
//! planted malicious domains; the remainder simulates the inherent
//! incompleteness of real threat intelligence.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use crate::error::{Error, Result};
use crate::graph::{
    build_snapshot, Cardinality, Denylist, DomainId, RelationEdges, SnapshotCollection,
};
use crate::seed::rng_from;

#[derive(Clone, Debug)]
pub struct RelationSpec {
    pub name: String,
    pub cardinality: Cardinality,
    pub n_entities: usize,
    /// Power-law exponent of the entity degree distribution; > 1.
    pub exponent: f64,
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub label: String,
    pub n_domains: usize,
    pub relations: Vec<RelationSpec>,
    pub n_campaigns: usize,
    pub campaign_size: usize,
    /// Attachment probability between a campaign entity and its members.
    pub p_in: f64,
    /// Attachment probability between a campaign entity and outsiders.
    pub p_bg: f64,
    /// Fraction of planted malicious domains put on the denylist.
    pub coverage: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            label: "synthetic".into(),
            n_domains: 1000,
            relations: vec![
                RelationSpec {
                    name: "client".into(),
                    cardinality: Cardinality::ManyToMany,
                    n_entities: 400,
                    exponent: 2.0,
                },
                RelationSpec {
                    name: "binary".into(),
                    cardinality: Cardinality::ManyToMany,
                    n_entities: 200,
                    exponent: 2.2,
                },
                RelationSpec {
                    name: "tls_hash".into(),
                    cardinality: Cardinality::ManyToOne,
                    n_entities: 150,
                    exponent: 2.0,
                },
            ],
            n_campaigns: 5,
            campaign_size: 20,
            p_in: 0.6,
            p_bg: 0.002,
            coverage: 0.8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_domains == 0 || self.relations.is_empty() {
            return fail("need at least one domain and one relation".into());
        }
        if self.n_campaigns * self.campaign_size > self.n_domains {
            return fail(format!(
                "{} campaigns of size {} exceed {} domains",
                self.n_campaigns, self.campaign_size, self.n_domains
            ));
        }
        if self.campaign_size == 0 || self.n_campaigns == 0 {
            return fail("need at least one campaign with at least one member".into());
        }
        if !(self.p_in > self.p_bg) {
            return fail(format!("p_in {} must exceed p_bg {}", self.p_in, self.p_bg));
        }
        if !(0.0..=1.0).contains(&self.p_in) || !(0.0..=1.0).contains(&self.p_bg) {
            return fail("attachment probabilities must lie in [0, 1]".into());
        }
        if !(self.coverage > 0.0 && self.coverage <= 1.0) {
            return fail(format!("coverage {} must lie in (0, 1]", self.coverage));
        }
        for rel in &self.relations {
            if rel.exponent <= 1.0 {
                return fail(format!(
                    "relation {}: exponent {} must exceed 1",
                    rel.name, rel.exponent
                ));
            }
            if rel.n_entities == 0 {
                return fail(format!("relation {}: needs entities", rel.name));
            }
        }
        Ok(())
    }
}

/// Per-domain ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthRow {
    pub domain: String,
    pub malicious: bool,
    /// Campaign name, or "-" for benign domains.
    pub campaign: String,
}

pub struct SynthOutput {
    pub snapshot: SnapshotCollection,
    pub ground_truth: Vec<GroundTruthRow>,
    pub denylist: Denylist,
}

/// Inverse-CDF sample from a truncated zipf over 1..=max.
fn zipf_degree(rng: &mut ChaCha8Rng, cdf: &[f64]) -> usize {
    let u: f64 = rng.random_range(0.0..1.0);
    match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
        Ok(i) => i + 1,
        Err(i) => i + 1,
    }
}

fn zipf_cdf(exponent: f64, max: usize) -> Vec<f64> {
    let mut weights: Vec<f64> = (1..=max).map(|k| (k as f64).powf(-exponent)).collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for w in weights.iter_mut() {
        acc += *w / total;
        *w = acc;
    }
    weights
}

pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let n = config.n_domains;
    let domain_names: Vec<String> = {
        let width = (n.max(2) - 1).to_string().len();
        (0..n).map(|i| format!("d{i:0width$}.example")).collect()
    };

    // Campaign membership: a random subset partitioned into campaigns.
    let mut rng = rng_from(&[config.seed, 0x5F4]);
    let n_mal = config.n_campaigns * config.campaign_size;
    let mal_indices: Vec<usize> = rand::seq::index::sample(&mut rng, n, n_mal).into_vec();
    let campaign_of = |k: usize| k / config.campaign_size; // index into campaigns
    let campaign_names: Vec<String> = (0..config.n_campaigns)
        .map(|c| format!("campaign{c:03}"))
        .collect();

    let mut relations = Vec::with_capacity(config.relations.len());
    for (rel_idx, rel) in config.relations.iter().enumerate() {
        let mut rng = rng_from(&[config.seed, 0x12E1, rel_idx as u64]);
        let mut edges: Vec<(String, String)> = Vec::new();
        match rel.cardinality {
            Cardinality::ManyToMany => {
                // Background: entity degrees from the truncated power law,
                // attached to uniform distinct domains.
                let cdf = zipf_cdf(rel.exponent, n);
                for e in 0..rel.n_entities {
                    let k = zipf_degree(&mut rng, &cdf);
                    for d in rand::seq::index::sample(&mut rng, n, k.min(n)).iter() {
                        edges.push((domain_names[d].clone(), format!("{}_e{e}", rel.name)));
                    }
                }
                // Campaign entities: one pool per campaign, disjoint from the
                // background pool.
                for c in 0..config.n_campaigns {
                    for j in 0..config.campaign_size {
                        let entity = format!("{}_c{c:03}_{j}", rel.name);
                        let members =
                            &mal_indices[c * config.campaign_size..(c + 1) * config.campaign_size];
                        for &d in members {
                            if rng.random_range(0.0..1.0) < config.p_in {
                                edges.push((domain_names[d].clone(), entity.clone()));
                            }
                        }
                        // Sparse cross-boundary noise.
                        let outside = n - config.campaign_size;
                        let binom = Binomial::new(outside as u64, config.p_bg)
                            .map_err(|e| Error::Config(format!("p_bg: {e}")))?;
                        let n_noise = binom.sample(&mut rng) as usize;
                        let member_set: std::collections::HashSet<usize> =
                            members.iter().copied().collect();
                        let mut added = 0;
                        while added < n_noise {
                            let d = rng.random_range(0..n);
                            if !member_set.contains(&d) {
                                edges.push((domain_names[d].clone(), entity.clone()));
                                added += 1;
                            }
                        }
                    }
                }
            }
            Cardinality::ManyToOne => {
                // Every domain picks at most one entity. Campaign members
                // prefer their campaign's shared entity; everyone else picks
                // a background entity with zipf-distributed popularity.
                let cdf = zipf_cdf(rel.exponent, rel.n_entities);
                let mut campaign_idx = vec![usize::MAX; n];
                for (k, &d) in mal_indices.iter().enumerate() {
                    campaign_idx[d] = campaign_of(k);
                }
                for d in 0..n {
                    let c = campaign_idx[d];
                    let entity = if c != usize::MAX && rng.random_range(0.0..1.0) < config.p_in {
                        format!("{}_c{c:03}", rel.name)
                    } else if c == usize::MAX && rng.random_range(0.0..1.0) < config.p_bg {
                        // Rare noise: an outsider lands on a campaign entity.
                        let pick = rng.random_range(0..config.n_campaigns);
                        format!("{}_c{pick:03}", rel.name)
                    } else {
                        let e = zipf_degree(&mut rng, &cdf) - 1;
                        format!("{}_e{e}", rel.name)
                    };
                    edges.push((domain_names[d].clone(), entity));
                }
            }
        }
        relations.push(RelationEdges {
            relation: rel.name.clone(),
            cardinality: rel.cardinality,
            edges,
        });
    }

    // Domain table order must cover all domains even if some have no edges;
    // guarantee presence by seeding the first relation with every domain?
    // Not needed: many-to-one relations list every domain. If the config has
    // only many-to-many relations, isolated domains may drop out, which the
    // snapshot tolerates; ground truth and denylist stay name-based.
    let snapshot = build_snapshot(&config.label, relations)?;

    let mut ground_truth: Vec<GroundTruthRow> = Vec::with_capacity(n);
    let mut is_mal = vec![usize::MAX; n];
    for (k, &d) in mal_indices.iter().enumerate() {
        is_mal[d] = campaign_of(k);
    }
    for d in 0..n {
        ground_truth.push(GroundTruthRow {
            domain: domain_names[d].clone(),
            malicious: is_mal[d] != usize::MAX,
            campaign: if is_mal[d] != usize::MAX {
                campaign_names[is_mal[d]].clone()
            } else {
                "-".to_string()
            },
        });
    }

    // Denylist: a uniform coverage fraction of the planted malicious set.
    let mut rng = rng_from(&[config.seed, 0xDE9]);
    let n_listed = ((config.coverage * n_mal as f64).round() as usize).clamp(1, n_mal);
    let mut listed = mal_indices.clone();
    listed.shuffle(&mut rng);
    listed.truncate(n_listed);
    let denylist = Denylist::from_entries(
        listed.into_iter().map(|d| {
            (
                domain_names[d].clone(),
                campaign_names[is_mal[d]].clone(),
            )
        }),
        &config.label,
    );

    Ok(SynthOutput {
        snapshot,
        ground_truth,
        denylist,
    })
}

/// Writes the snapshot directory layout consumed by ingestion:
/// `relations/<name>.tsv`, `denylist.tsv` and `ground_truth.tsv`.
pub fn write_snapshot_dir(config: &SynthConfig, out: &SynthOutput, dir: &Path) -> Result<()> {
    let rel_dir = dir.join("relations");
    fs::create_dir_all(&rel_dir).map_err(|e| Error::io(&rel_dir, e))?;

    for rel in out.snapshot.graphs() {
        let path = rel_dir.join(format!("{}.tsv", rel.relation()));
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut content = format!("{}\t{}\n", rel.relation(), rel.cardinality().as_str());
        for d in out.snapshot.domain_ids() {
            for &e in rel.domain_neighbors(d)? {
                content.push_str(out.snapshot.domain_name(d));
                content.push('\t');
                content.push_str(rel.entity_key(crate::graph::EntityId(e)));
                content.push('\n');
            }
        }
        f.write_all(content.as_bytes()).map_err(|e| Error::io(&path, e))?;
    }

    let deny_path = dir.join("denylist.tsv");
    let mut content = String::new();
    for (domain, family) in out.denylist.iter_sorted() {
        content.push_str(&format!("{domain}\t{family}\n"));
    }
    fs::write(&deny_path, content).map_err(|e| Error::io(&deny_path, e))?;

    let gt_path = dir.join("ground_truth.tsv");
    let mut content = String::from("domain\tlabel\tcampaign\n");
    for row in &out.ground_truth {
        content.push_str(&format!(
            "{}\t{}\t{}\n",
            row.domain,
            if row.malicious { "malicious" } else { "benign" },
            row.campaign
        ));
    }
    fs::write(&gt_path, content).map_err(|e| Error::io(&gt_path, e))?;

    let _ = config;
    Ok(())
}

/// Mean shared-entity count over within-campaign pairs vs cross/background
/// pairs in the first relation; the localization gate for generated data.
pub fn community_localization(out: &SynthOutput, pair_budget: usize) -> (f64, f64) {
    use crate::transform::TransformedView;

    let g = &out.snapshot.graphs()[0];
    let view = TransformedView::new(g);
    let mut within = Vec::new();
    let mut across = Vec::new();

    let members: Vec<(DomainId, &str)> = out
        .ground_truth
        .iter()
        .filter(|r| r.malicious)
        .filter_map(|r| out.snapshot.domain_id(&r.domain).map(|d| (d, r.campaign.as_str())))
        .collect();

    let mut rng = rng_from(&[0xC0C0]);
    for _ in 0..pair_budget {
        let (a, fam_a) = members[rng.random_range(0..members.len())];
        let (b, fam_b) = members[rng.random_range(0..members.len())];
        if a == b {
            continue;
        }
        let shared = view.shared_entities(a, b) as f64;
        if fam_a == fam_b {
            within.push(shared);
        } else {
            across.push(shared);
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    (mean(&within), mean(&across))
}
