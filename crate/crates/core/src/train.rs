//! Minibatch construction and the epoch loop.
//!
//! Each minibatch holds an equal number of positive and negative central
//! vertices, drawn without repetition within the batch. Per batch the
//! gradient is accumulated over all members, then one optimizer step runs.
//! Snapshots are processed in input order, a fixed number of minibatches
//! each, per epoch.
//!
//! Randomness is keyed by (seed, epoch, snapshot, batch, domain), never by
//! worker identity; member gradients are reduced over fixed-size chunks in
//! a fixed order, so results are bit-identical for any thread count.

use std::collections::BTreeSet;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{ActiveDenylist, Denylist, DomainId, SnapshotCollection};
use crate::hmil::{SampleBuilder, SampleParams};
use crate::model::{builtin_arch, HmilModel, ModelGrads};
use crate::nn::{weighted_bce, AdamConfig, AdamState, Tensor2};
use crate::seed::{mix, rng_from};

/// Hyperparameters of one training run.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub minibatch_size: usize,
    pub minibatches_per_graph: usize,
    pub epochs: usize,
    pub omega0: f64,
    pub omega1: f64,
    pub learning_rate: f64,
    pub k_minus: usize,
    pub entity_degree_cap: Option<usize>,
    pub seed: u64,
    pub arch: String,
    pub steps: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            minibatch_size: 256,
            minibatches_per_graph: 1000,
            epochs: 5,
            omega0: 0.9,
            omega1: 0.1,
            learning_rate: 1e-3,
            k_minus: 100,
            entity_degree_cap: None,
            seed: 0,
            arch: "Mb".into(),
            steps: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.minibatch_size == 0 || self.minibatch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "minibatch size {} must be even for balanced classes",
                self.minibatch_size
            )));
        }
        if self.minibatches_per_graph == 0 {
            return Err(Error::Config("need at least one minibatch per graph".into()));
        }
        if self.k_minus == 0 {
            return Err(Error::Config("k_minus must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn sample_params(&self) -> SampleParams {
        SampleParams {
            steps: self.steps,
            k_minus: self.k_minus,
            entity_degree_cap: self.entity_degree_cap,
        }
    }
}

/// Balanced minibatch of (central vertex, label). Members are unique within
/// the batch; when the positive pool is smaller than half the batch,
/// repetition is allowed (and logged once per call site by the caller).
pub fn build_minibatch(
    positives: &[DomainId],
    negatives: &[DomainId],
    size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(DomainId, u8)>> {
    if positives.is_empty() {
        return Err(Error::EmptyPositivePool);
    }
    let half = size / 2;
    if negatives.len() < half {
        return Err(Error::Config(format!(
            "negative pool of {} cannot fill half a batch of {size}",
            negatives.len()
        )));
    }
    let mut batch = Vec::with_capacity(size);
    if positives.len() >= half {
        for i in rand::seq::index::sample(rng, positives.len(), half) {
            batch.push((positives[i], 1u8));
        }
    } else {
        for _ in 0..half {
            batch.push((positives[rng.random_range(0..positives.len())], 1u8));
        }
    }
    for i in rand::seq::index::sample(rng, negatives.len(), half) {
        batch.push((negatives[i], 0u8));
    }
    Ok(batch)
}

pub struct TrainOutput {
    pub model: HmilModel,
    /// Mean minibatch loss, one entry per optimizer step.
    pub losses: Vec<f64>,
}

/// Pools and masked denylist view of one training snapshot.
struct SnapshotContext<'a> {
    snapshot: &'a SnapshotCollection,
    active: ActiveDenylist,
    positives: Vec<DomainId>,
    negatives: Vec<DomainId>,
}

fn snapshot_context<'a>(
    snapshot: &'a SnapshotCollection,
    denylist: &Denylist,
    holdout: Option<&BTreeSet<String>>,
) -> SnapshotContext<'a> {
    let members = denylist.members_in(snapshot);
    let member_set: BTreeSet<DomainId> = members.iter().copied().collect();
    // Hold-outs never appear as central vertices and stay invisible to
    // features; non-held-out members are the positive pool.
    let positives: Vec<DomainId> = members
        .iter()
        .copied()
        .filter(|d| match holdout {
            Some(h) => !h.contains(snapshot.domain_name(*d)),
            None => true,
        })
        .collect();
    let negatives: Vec<DomainId> = snapshot
        .domain_ids()
        .filter(|d| !member_set.contains(d))
        .collect();
    let active = match holdout {
        Some(h) => {
            let hs: std::collections::HashSet<String> = h.iter().cloned().collect();
            let watch: Vec<DomainId> = members
                .iter()
                .copied()
                .filter(|d| hs.contains(snapshot.domain_name(*d)))
                .collect();
            ActiveDenylist::resolve_without(denylist, snapshot, &hs).watch(watch)
        }
        None => ActiveDenylist::resolve(denylist, snapshot),
    };
    SnapshotContext {
        snapshot,
        active,
        positives,
        negatives,
    }
}

/// Members are processed in fixed chunks so the reduction order (and hence
/// the result) does not depend on the worker count.
const GRAD_CHUNK: usize = 32;

/// Trains a fresh model over the given snapshots. `holdout` lists domains
/// excluded from training entirely (the generalization test); pass `None`
/// for standard training.
pub fn train(
    data: &[(SnapshotCollection, Denylist)],
    holdout: Option<&BTreeSet<String>>,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("need at least one training snapshot".into()));
    }

    let relation_names = data[0].0.relation_names();
    let mut arch = builtin_arch(&config.arch, relation_names.len())?;
    arch.steps = config.steps;
    let mut init_rng = rng_from(&[config.seed, 0x1217]);
    let mut model = HmilModel::new(arch, relation_names, &mut init_rng)?;

    let contexts: Vec<SnapshotContext> = data
        .iter()
        .map(|(snapshot, denylist)| snapshot_context(snapshot, denylist, holdout))
        .collect();
    for (i, ctx) in contexts.iter().enumerate() {
        if ctx.positives.is_empty() {
            return Err(Error::EmptyPositivePool);
        }
        if ctx.positives.len() < config.minibatch_size / 2 {
            log::warn!(
                "snapshot {} ({}): positive pool of {} is smaller than half a minibatch; \
                 positives will repeat within batches",
                i,
                ctx.snapshot.label(),
                ctx.positives.len()
            );
        }
    }

    let adam_cfg = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, &model.param_lens());
    let mut losses = Vec::with_capacity(
        config.epochs * data.len() * config.minibatches_per_graph,
    );
    let params = config.sample_params();

    for epoch in 0..config.epochs {
        for (snap_idx, ctx) in contexts.iter().enumerate() {
            for batch_idx in 0..config.minibatches_per_graph {
                let mut batch_rng = rng_from(&[
                    config.seed,
                    0xBA7C,
                    epoch as u64,
                    snap_idx as u64,
                    batch_idx as u64,
                ]);
                let batch = build_minibatch(
                    &ctx.positives,
                    &ctx.negatives,
                    config.minibatch_size,
                    &mut batch_rng,
                )?;

                let n = batch.len();
                let chunk_results: Result<Vec<(f64, ModelGrads)>> = batch
                    .par_chunks(GRAD_CHUNK)
                    .map(|chunk| {
                        let mut builder =
                            SampleBuilder::new(ctx.snapshot, model.relation_names(), params);
                        let mut grads = model.zero_grads();
                        let mut loss_sum = 0.0;
                        for &(d, label) in chunk {
                            let sample_seed = mix(&[
                                config.seed,
                                0x5A3D,
                                epoch as u64,
                                snap_idx as u64,
                                batch_idx as u64,
                                d.0 as u64,
                            ]);
                            let sample = builder.build(d, &ctx.active, sample_seed)?;
                            let (logits, cache) = model.forward(&sample)?;
                            let t = Tensor2::row_vector(&logits);
                            let (loss, glog) =
                                weighted_bce(&t, &[label], config.omega0, config.omega1)?;
                            if !loss.is_finite() {
                                return Err(Error::TrainingDiverged {
                                    batch: batch_idx,
                                    domain: ctx.snapshot.domain_name(d).to_string(),
                                });
                            }
                            // Scale by 1/n here: the loss is a batch mean.
                            let scale = 1.0 / n as f64;
                            loss_sum += loss * scale;
                            model.backward(
                                &cache,
                                [glog.get(0, 0) * scale, glog.get(0, 1) * scale],
                                &mut grads,
                            );
                        }
                        Ok((loss_sum, grads))
                    })
                    .collect();

                let mut total = model.zero_grads();
                let mut batch_loss = 0.0;
                for (loss, grads) in chunk_results? {
                    batch_loss += loss;
                    total.add_assign(&grads);
                }
                losses.push(batch_loss);

                let mut slices = model.param_slices_mut();
                adam.step(&mut slices, &total.param_slices());
            }
        }
    }

    debug_assert_eq!(contexts.iter().map(|c| c.active.leak_count()).sum::<u64>(), 0);
    Ok(TrainOutput { model, losses })
}

/// Classification accuracy of a model over labelled central vertices; a
/// smoke-test helper shared by tests and examples.
pub fn accuracy(
    model: &HmilModel,
    snapshot: &SnapshotCollection,
    active: &ActiveDenylist,
    labelled: &[(DomainId, u8)],
    params: SampleParams,
    seed: u64,
) -> Result<f64> {
    let mut builder = SampleBuilder::new(snapshot, model.relation_names(), params);
    let mut correct = 0usize;
    for &(d, label) in labelled {
        let sample = builder.build(d, active, mix(&[seed, d.0 as u64]))?;
        let p = model.predict_proba(&sample)?;
        if (p >= 0.5) == (label == 1) {
            correct += 1;
        }
    }
    Ok(correct as f64 / labelled.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn tiny_data(seed: u64) -> (SnapshotCollection, Denylist) {
        let cfg = SynthConfig {
            n_domains: 200,
            n_campaigns: 3,
            campaign_size: 12,
            coverage: 1.0,
            seed,
            ..Default::default()
        };
        let out = generate(&cfg).unwrap();
        (out.snapshot, out.denylist)
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            minibatch_size: 32,
            minibatches_per_graph: 20,
            epochs: 1,
            k_minus: 30,
            arch: "Mb".into(),
            ..Default::default()
        }
    }

    #[test]
    fn minibatch_is_balanced_and_unique() {
        let positives: Vec<DomainId> = (0..200).map(DomainId).collect();
        let negatives: Vec<DomainId> = (200..1000).map(DomainId).collect();
        let mut rng = rng_from(&[1]);
        let batch = build_minibatch(&positives, &negatives, 256, &mut rng).unwrap();
        assert_eq!(batch.len(), 256);
        assert_eq!(batch.iter().filter(|(_, l)| *l == 1).count(), 128);
        assert_eq!(batch.iter().filter(|(_, l)| *l == 0).count(), 128);
        let mut seen = BTreeSet::new();
        assert!(batch.iter().all(|(d, _)| seen.insert(*d)), "no repetition");
    }

    #[test]
    fn tiny_positive_pool_repeats_within_batch() {
        let positives: Vec<DomainId> = (0..5).map(DomainId).collect();
        let negatives: Vec<DomainId> = (200..1000).map(DomainId).collect();
        let mut rng = rng_from(&[2]);
        let batch = build_minibatch(&positives, &negatives, 256, &mut rng).unwrap();
        let pos: Vec<DomainId> = batch
            .iter()
            .filter(|(_, l)| *l == 1)
            .map(|(d, _)| *d)
            .collect();
        assert_eq!(pos.len(), 128);
        let distinct: BTreeSet<DomainId> = pos.iter().copied().collect();
        assert!(distinct.len() <= 5);
        // Negatives still unique.
        let negs: BTreeSet<DomainId> = batch
            .iter()
            .filter(|(_, l)| *l == 0)
            .map(|(d, _)| *d)
            .collect();
        assert_eq!(negs.len(), 128);
    }

    #[test]
    fn empty_positive_pool_fails_fast() {
        let negatives: Vec<DomainId> = (0..100).map(DomainId).collect();
        let mut rng = rng_from(&[3]);
        assert!(matches!(
            build_minibatch(&[], &negatives, 32, &mut rng),
            Err(Error::EmptyPositivePool)
        ));

        let (snapshot, _) = tiny_data(5);
        let empty = Denylist::from_entries(std::iter::empty::<(String, String)>(), "t");
        match train(&[(snapshot, empty)], None, &tiny_config()) {
            Err(Error::EmptyPositivePool) => {}
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("training must fail fast without positives"),
        }
    }

    #[test]
    fn seeded_batches_are_reproducible() {
        let positives: Vec<DomainId> = (0..50).map(DomainId).collect();
        let negatives: Vec<DomainId> = (50..500).map(DomainId).collect();
        let a = build_minibatch(&positives, &negatives, 64, &mut rng_from(&[7])).unwrap();
        let b = build_minibatch(&positives, &negatives, 64, &mut rng_from(&[7])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let (snapshot, denylist) = tiny_data(6);
        let mut cfg = tiny_config();
        cfg.epochs = 0;
        let out = train(&[(snapshot, denylist)], None, &cfg).unwrap();
        assert!(out.losses.is_empty());

        // Identical to a fresh model built from the same seed.
        let (snapshot2, denylist2) = tiny_data(6);
        let out2 = train(&[(snapshot2, denylist2)], None, &cfg).unwrap();
        assert_eq!(out.model.to_bytes(), out2.model.to_bytes());
    }

    #[test]
    fn loss_decreases_on_planted_signal() {
        let (snapshot, denylist) = tiny_data(7);
        let out = train(&[(snapshot, denylist)], None, &tiny_config()).unwrap();
        assert_eq!(out.losses.len(), 20);
        assert!(out.losses.iter().all(|l| l.is_finite()));
        let first: f64 = out.losses[..5].iter().sum::<f64>() / 5.0;
        let last: f64 = out.losses[15..].iter().sum::<f64>() / 5.0;
        assert!(
            last < first,
            "mean loss should drop: first {first}, last {last}"
        );
    }

    #[test]
    fn training_is_bit_reproducible() {
        let run = || {
            let (snapshot, denylist) = tiny_data(8);
            let mut cfg = tiny_config();
            cfg.minibatches_per_graph = 5;
            train(&[(snapshot, denylist)], None, &cfg).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.model.to_bytes(), b.model.to_bytes());
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn holdout_domains_never_become_positives() {
        let (snapshot, denylist) = tiny_data(9);
        let holdout: BTreeSet<String> = denylist
            .iter_sorted()
            .iter()
            .take(10)
            .map(|(d, _)| d.to_string())
            .collect();
        let ctx = snapshot_context(&snapshot, &denylist, Some(&holdout));
        for d in &ctx.positives {
            assert!(!holdout.contains(snapshot.domain_name(*d)));
        }
        for name in &holdout {
            if let Some(d) = snapshot.domain_id(name) {
                assert!(!ctx.active.contains(d) || ctx.active.leak_count() > 0);
            }
        }
        // Held-out members are watched: membership reads would count leaks,
        // and they are not members, so reads return false and count nothing.
        assert_eq!(ctx.active.leak_count(), 0);
    }

    #[test]
    fn training_accuracy_on_separable_data() {
        let (snapshot, denylist) = tiny_data(10);
        let mut cfg = tiny_config();
        cfg.minibatches_per_graph = 100;
        cfg.minibatch_size = 64;
        let out = train(&[(snapshot, denylist)], None, &cfg).unwrap();

        let (snapshot, denylist) = tiny_data(10);
        let active = ActiveDenylist::resolve(&denylist, &snapshot);
        let members: BTreeSet<DomainId> = denylist.members_in(&snapshot).into_iter().collect();
        let mut labelled: Vec<(DomainId, u8)> = Vec::new();
        for d in snapshot.domain_ids() {
            labelled.push((d, members.contains(&d) as u8));
        }
        let acc = accuracy(
            &out.model,
            &snapshot,
            &active,
            &labelled,
            cfg.sample_params(),
            99,
        )
        .unwrap();
        assert!(acc > 0.95, "training accuracy {acc}");
    }
}
