//! Leakage-safe evaluation: K-fold denylist masking, the family-proportional
//! generalization hold-out, and ranking metrics.
//!
//! The denylist plays two roles: it feeds the `detected` feature and it
//! supplies evaluation labels. To keep labels out of features, the resident
//! denylist is split into K disjoint folds; each fold is scored with the
//! fold's membership hidden (features see only the remaining folds). After
//! all folds, every malicious domain carries exactly one score and every
//! benign domain carries K, reduced by max to simulate the worst case with
//! respect to false positives.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::graph::{ActiveDenylist, Denylist, DomainId, SnapshotCollection};
use crate::hmil::{SampleBuilder, SampleParams};
use crate::model::HmilModel;
use crate::ptp::{ptp_iterative_with_seeds, PtpGraph};
use crate::seed::{mix, rng_from};

// ---------------------------------------------------------------------------
// Scorers
// ---------------------------------------------------------------------------

/// Anything that can score domains under a masked denylist view.
pub trait Scorer: Sync {
    fn score(&self, active: &ActiveDenylist, domains: &[DomainId]) -> Result<Vec<f64>>;
}

/// Scores with a trained model; samples are rebuilt under the given mask, so
/// the `detected` features honor the protocol.
pub struct ModelScorer<'a> {
    pub model: &'a HmilModel,
    pub snapshot: &'a SnapshotCollection,
    pub params: SampleParams,
    pub seed: u64,
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, active: &ActiveDenylist, domains: &[DomainId]) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        let chunks: Vec<&[DomainId]> = domains.chunks(64).collect();
        let scored: Result<Vec<Vec<f64>>> = chunks
            .par_iter()
            .map(|chunk| {
                let mut builder =
                    SampleBuilder::new(self.snapshot, self.model.relation_names(), self.params);
                chunk
                    .iter()
                    .map(|&d| {
                        let sample_seed = mix(&[self.seed, d.0 as u64]);
                        let sample = builder.build(d, active, sample_seed)?;
                        self.model.predict_proba(&sample)
                    })
                    .collect()
            })
            .collect();
        Ok(scored?.into_iter().flatten().collect())
    }
}

/// Threat-propagation baseline as a fold-aware scorer. Seeds are read
/// through the masked view so the leak instrumentation covers this path too.
pub struct PtpScorer<'a> {
    pub graph: &'a PtpGraph,
    pub iterations: usize,
}

impl Scorer for PtpScorer<'_> {
    fn score(&self, active: &ActiveDenylist, domains: &[DomainId]) -> Result<Vec<f64>> {
        let seeds: Vec<bool> = (0..self.graph.n_vertices())
            .map(|v| active.contains(DomainId(v as u32)))
            .collect();
        let result = ptp_iterative_with_seeds(self.graph, &seeds, self.iterations);
        Ok(domains.iter().map(|&d| result.scores[d.0 as usize]).collect())
    }
}

// ---------------------------------------------------------------------------
// K-fold protocol
// ---------------------------------------------------------------------------

/// Assignment of denylisted domains to K disjoint folds of near-equal size.
#[derive(Clone, Debug)]
pub struct FoldPlan {
    pub folds: Vec<Vec<DomainId>>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn new(members: &[DomainId], k: usize, seed: u64) -> Result<FoldPlan> {
        if k < 2 {
            return Err(Error::Invalid(format!("need at least 2 folds, got {k}")));
        }
        if members.len() < k {
            return Err(Error::Invalid(format!(
                "{} denylisted domains cannot fill {k} folds",
                members.len()
            )));
        }
        let mut shuffled = members.to_vec();
        shuffled.sort_unstable();
        let mut rng = rng_from(&[seed, 0xF07D]);
        shuffled.shuffle(&mut rng);
        let mut folds = vec![Vec::new(); k];
        for (i, d) in shuffled.into_iter().enumerate() {
            folds[i % k].push(d);
        }
        Ok(FoldPlan { folds, seed })
    }
}

/// One scored domain after the protocol: label from the full denylist,
/// score reduced over `n_scores` protocol passes.
#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub domain: DomainId,
    pub label: u8,
    pub score: f64,
    pub n_scores: u32,
}

/// Protocol output plus the leak counter accumulated over all folds.
pub struct EvalOutcome {
    pub records: Vec<EvalRecord>,
    pub leaks: u64,
}

/// Full protocol over the resident denylist: `eval_positives` are split into
/// folds; for each fold the scorer sees `feature_members` minus the fold.
/// Malicious domains get their single own-fold score; benign domains get the
/// max of their K scores. Records are sorted by domain id.
fn kfold_with(
    scorer: &dyn Scorer,
    snapshot: &SnapshotCollection,
    feature_members: &[DomainId],
    eval_positives: &[DomainId],
    benign: &[DomainId],
    k: usize,
    seed: u64,
) -> Result<EvalOutcome> {
    let plan = FoldPlan::new(eval_positives, k, seed)?;
    let mut leaks = 0u64;
    let mut benign_scores: Vec<f64> = vec![f64::NEG_INFINITY; benign.len()];
    let mut positive_records: Vec<EvalRecord> = Vec::with_capacity(eval_positives.len());

    for fold in &plan.folds {
        let fold_set: BTreeSet<DomainId> = fold.iter().copied().collect();
        let members = feature_members
            .iter()
            .copied()
            .filter(|d| !fold_set.contains(d));
        let active = ActiveDenylist::from_members(snapshot.n_domains(), members)
            .watch(fold.iter().copied());

        let fold_scores = scorer.score(&active, fold)?;
        for (&d, &s) in fold.iter().zip(&fold_scores) {
            positive_records.push(EvalRecord {
                domain: d,
                label: 1,
                score: s,
                n_scores: 1,
            });
        }

        let pass = scorer.score(&active, benign)?;
        for (slot, s) in benign_scores.iter_mut().zip(pass) {
            if s > *slot {
                *slot = s;
            }
        }
        leaks += active.leak_count();
    }

    let mut records = positive_records;
    records.extend(benign.iter().zip(benign_scores).map(|(&d, score)| EvalRecord {
        domain: d,
        label: 0,
        score,
        n_scores: k as u32,
    }));
    records.sort_by_key(|r| r.domain);
    Ok(EvalOutcome { records, leaks })
}

/// Standard K-fold evaluation: positives are the denylisted domains resident
/// in the snapshot, everything else is benign.
pub fn kfold_evaluate(
    scorer: &dyn Scorer,
    snapshot: &SnapshotCollection,
    denylist: &Denylist,
    k: usize,
    seed: u64,
) -> Result<EvalOutcome> {
    let members = denylist.members_in(snapshot);
    if members.is_empty() {
        return Err(Error::EmptyPositivePool);
    }
    let member_set: BTreeSet<DomainId> = members.iter().copied().collect();
    let benign: Vec<DomainId> = snapshot
        .domain_ids()
        .filter(|d| !member_set.contains(d))
        .collect();
    kfold_with(scorer, snapshot, &members, &members, &benign, k, seed)
}

/// Hold-out evaluation: folds cover only the held-out positives, feature
/// masking still spans the whole resident denylist, and non-held-out
/// denylisted domains are excluded from the records entirely (they were
/// training-visible, so they are neither fair positives nor benign).
pub fn kfold_evaluate_holdout(
    scorer: &dyn Scorer,
    snapshot: &SnapshotCollection,
    denylist: &Denylist,
    holdout: &BTreeSet<String>,
    k: usize,
    seed: u64,
) -> Result<EvalOutcome> {
    let members = denylist.members_in(snapshot);
    if members.is_empty() {
        return Err(Error::EmptyPositivePool);
    }
    let positives: Vec<DomainId> = members
        .iter()
        .copied()
        .filter(|d| holdout.contains(snapshot.domain_name(*d)))
        .collect();
    if positives.is_empty() {
        return Err(Error::Invalid(
            "no held-out positives are resident in the snapshot".into(),
        ));
    }
    let member_set: BTreeSet<DomainId> = members.iter().copied().collect();
    let benign: Vec<DomainId> = snapshot
        .domain_ids()
        .filter(|d| !member_set.contains(d))
        .collect();
    kfold_with(scorer, snapshot, &members, &positives, &benign, k, seed)
}

// ---------------------------------------------------------------------------
// Generalization hold-out
// ---------------------------------------------------------------------------

/// Family-proportional subset of the denylist, held out from training
/// entirely: never a central vertex and treated as unknown in every feature.
#[derive(Clone, Debug)]
pub struct GrillPlan {
    pub held_out: BTreeSet<String>,
    pub fraction: f64,
    pub seed: u64,
}

/// Samples the hold-out proportionally to family sizes (largest-remainder
/// rounding), capped so every family keeps at least one trainable positive.
pub fn grill_split(denylist: &Denylist, fraction: f64, seed: u64) -> Result<GrillPlan> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Invalid(format!(
            "hold-out fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut families: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (domain, family) in denylist.iter_sorted() {
        families.entry(family).or_default().push(domain);
    }
    if families.is_empty() {
        return Err(Error::EmptyPositivePool);
    }

    let total: usize = families.values().map(|v| v.len()).sum();
    let target = (fraction * total as f64).round() as usize;

    // Largest-remainder apportionment of `target` across families.
    let mut quotas: Vec<(usize, f64, &str)> = Vec::new();
    let mut assigned = 0usize;
    for (family, members) in &families {
        let exact = fraction * members.len() as f64;
        let floor = exact.floor() as usize;
        assigned += floor;
        quotas.push((floor, exact - exact.floor() as f64, family));
    }
    let mut remainder = target.saturating_sub(assigned);
    quotas.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.2.cmp(b.2)));
    for q in quotas.iter_mut() {
        if remainder == 0 {
            break;
        }
        q.0 += 1;
        remainder -= 1;
    }

    let mut held_out = BTreeSet::new();
    for (count, _, family) in quotas {
        let members = &families[family];
        // Keep at least one trainable positive per family.
        let count = count.min(members.len().saturating_sub(1));
        let mut pool: Vec<&str> = members.clone();
        let mut rng = rng_from(&[seed, 0x6121, hash_name(family)]);
        pool.shuffle(&mut rng);
        for name in pool.into_iter().take(count) {
            held_out.insert(name.to_string());
        }
    }

    Ok(GrillPlan {
        held_out,
        fraction,
        seed,
    })
}

fn hash_name(name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

// ---------------------------------------------------------------------------
// Ranking metrics
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct RankingMetrics {
    pub ap: f64,
    pub auc: f64,
    /// (recall, precision) at every distinct score threshold, descending.
    pub pr: Vec<(f64, f64)>,
    /// (false positive rate, true positive rate) at every distinct threshold.
    pub roc: Vec<(f64, f64)>,
}

/// Average precision, ROC area and both curves. AUC uses the rank statistic
/// with midranks for ties; AP is the step-interpolated area under the PR
/// curve. Requires at least one positive and one negative.
pub fn ranking_metrics(scores: &[f64], labels: &[u8]) -> Result<RankingMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid(
            "ranking metrics need at least one positive and one negative".into(),
        ));
    }

    // Sort ascending for the rank statistic.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));

    // Midrank AUC: sum of positive ranks with ties averaged.
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0; // average of ranks i+1 ..= j
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum += midrank;
            }
        }
        i = j;
    }
    let auc = (rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64);

    // Curves over distinct thresholds, descending.
    let mut desc = order;
    desc.reverse();
    let mut pr = Vec::new();
    let mut roc = Vec::new();
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < desc.len() {
        let threshold = scores[desc[i]];
        let mut j = i;
        while j < desc.len() && scores[desc[j]] == threshold {
            if labels[desc[j]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        let fpr = fp as f64 / n_neg as f64;
        pr.push((recall, precision));
        roc.push((fpr, recall));
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }

    Ok(RankingMetrics { ap, auc, pr, roc })
}

pub fn metrics_of_records(records: &[EvalRecord]) -> Result<RankingMetrics> {
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    ranking_metrics(&scores, &labels)
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

fn write_file(path: &Path, content: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(content.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// `records.csv`: domain, label, score; one row per record, sorted by
/// domain id (the order produced by the protocol).
pub fn write_records_csv(
    path: &Path,
    records: &[EvalRecord],
    snapshot: &SnapshotCollection,
) -> Result<()> {
    let mut out = String::from("domain,label,score\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{}\n",
            snapshot.domain_name(r.domain),
            if r.label == 1 { "malicious" } else { "benign" },
            r.score
        ));
    }
    write_file(path, &out)
}

pub fn write_pr_csv(path: &Path, metrics: &RankingMetrics) -> Result<()> {
    let mut out = String::from("recall,precision\n");
    for (r, p) in &metrics.pr {
        out.push_str(&format!("{r},{p}\n"));
    }
    write_file(path, &out)
}

pub fn write_roc_csv(path: &Path, metrics: &RankingMetrics) -> Result<()> {
    let mut out = String::from("fpr,tpr\n");
    for (f, t) in &metrics.roc {
        out.push_str(&format!("{f},{t}\n"));
    }
    write_file(path, &out)
}

pub fn write_summary_csv(path: &Path, metrics: &RankingMetrics) -> Result<()> {
    write_file(path, &format!("ap,auc\n{},{}\n", metrics.ap, metrics.auc))
}

/// Plain score table (domain, score) for single-pass scoring commands.
pub fn write_scores_csv(
    path: &Path,
    snapshot: &SnapshotCollection,
    pairs: &[(DomainId, f64)],
) -> Result<()> {
    let mut out = String::from("domain,score\n");
    for (d, s) in pairs {
        out.push_str(&format!("{},{}\n", snapshot.domain_name(*d), s));
    }
    write_file(path, &out)
}
