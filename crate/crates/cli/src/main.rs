//! `netmil`: scoring of network domains from raw interaction graphs.
//!
//! Subcommands cover the whole pipeline: synthesize a benchmark snapshot,
//! sanity-check ingestion, train a model, score domains, run the leakage-safe
//! K-fold evaluation, run the hold-out generalization test, and run the
//! threat-propagation baseline. Every output directory carries a run
//! manifest with the resolved configuration, seeds and input hashes.

mod manifest;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use netmil_core::config::KvConfig;
use netmil_core::eval::{
    grill_split, kfold_evaluate, kfold_evaluate_holdout, metrics_of_records, write_pr_csv,
    write_records_csv, write_roc_csv, write_scores_csv, write_summary_csv, EvalOutcome,
    ModelScorer, PtpScorer, Scorer,
};
use netmil_core::graph::{
    ingest_snapshot_dir, load_denylist, ActiveDenylist, Denylist, SnapshotCollection,
};
use netmil_core::hmil::{SampleBuilder, SampleParams};
use netmil_core::model::HmilModel;
use netmil_core::ptp::{build_ptp_graph, ptp_iterative, PtpWeighting};
use netmil_core::seed::mix;
use netmil_core::synth::{generate, write_snapshot_dir, SynthConfig};
use netmil_core::train::{train, TrainConfig};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "netmil", version, about = "Domain scoring from interaction graphs")]
struct Cli {
    /// Worker threads (0 = number of cores). Outputs are bit-identical for
    /// any value: gradient reduction runs over fixed chunks in fixed order.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Inline overrides, e.g. `--set training.epochs=2` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<KvConfig> {
        let mut kv = match &self.config {
            Some(path) => KvConfig::from_file(path)?,
            None => KvConfig::empty(),
        };
        kv.apply_env();
        kv.apply_overrides(&self.set)?;
        Ok(kv)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Uniform,
    Shared,
}

impl From<WeightingArg> for PtpWeighting {
    fn from(w: WeightingArg) -> PtpWeighting {
        match w {
            WeightingArg::Uniform => PtpWeighting::Uniform,
            WeightingArg::Shared => PtpWeighting::SharedEntityCount,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic snapshot directory with ground truth.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output snapshot directory (its basename becomes the label).
        #[arg(long)]
        out: PathBuf,
    },

    /// Ingest a snapshot directory and verify its invariants.
    Check {
        #[arg(long)]
        snapshot: PathBuf,
    },

    /// Train a model over one or more snapshot directories.
    Train {
        /// Snapshot directories, processed in the given order.
        #[arg(long, required = true, num_args = 1..)]
        snapshots: Vec<PathBuf>,
        /// Architecture name: Mb, Mw or Md.
        #[arg(long, default_value = "Mb")]
        arch: String,
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Loss trace CSV (batch_index, loss); defaults next to the model.
        #[arg(long)]
        loss_out: Option<PathBuf>,
    },

    /// Score domains with a trained model (full denylist visible).
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        snapshot: PathBuf,
        /// `all` or a file with one domain name per line.
        #[arg(long, default_value = "all")]
        domains: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },

    /// Leakage-safe K-fold evaluation; writes records/pr/roc/summary CSVs.
    Evaluate {
        /// Model checkpoint; omit when evaluating the baseline.
        #[arg(long, required_unless_present = "baseline_relation")]
        model: Option<PathBuf>,
        /// Evaluate the threat-propagation baseline on this relation
        /// instead of a model.
        #[arg(long)]
        baseline_relation: Option<String>,
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },

    /// Hold-out generalization test: train without a family-proportional
    /// subset of the denylist, then evaluate on exactly that subset.
    Grill {
        #[arg(long, default_value_t = 0.2)]
        fraction: f64,
        #[arg(long, required = true, num_args = 1..)]
        snapshots: Vec<PathBuf>,
        /// Snapshot to evaluate on; defaults to the first training snapshot.
        #[arg(long)]
        eval_snapshot: Option<PathBuf>,
        #[arg(long, default_value = "Mb")]
        arch: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },

    /// Threat-propagation baseline over one relation; writes (domain, score).
    Ptp {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        relation: String,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, value_enum, default_value_t = WeightingArg::Shared)]
        weighting: WeightingArg,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_snapshot(dir: &Path) -> Result<(SnapshotCollection, Denylist)> {
    let snapshot = ingest_snapshot_dir(dir)
        .with_context(|| format!("ingesting snapshot {}", dir.display()))?;
    let deny_path = dir.join("denylist.tsv");
    let denylist = if deny_path.exists() {
        let (denylist, report) = load_denylist(&deny_path, &snapshot, snapshot.label())?;
        if !report.unseen.is_empty() {
            log::info!(
                "{}: {} denylisted domains not observed in this snapshot",
                dir.display(),
                report.unseen.len()
            );
        }
        denylist
    } else {
        log::warn!("{}: no denylist.tsv, using an empty denylist", dir.display());
        Denylist::from_entries(std::iter::empty::<(String, String)>(), snapshot.label())
    };
    Ok((snapshot, denylist))
}

fn sample_params_from(kv: &KvConfig, steps: usize) -> Result<SampleParams> {
    Ok(SampleParams {
        steps,
        k_minus: kv.get_or("sampling.k_minus", 100)?,
        entity_degree_cap: kv.get_parsed("transform.entity_degree_cap")?,
    })
}

fn write_eval_outputs(
    out_dir: &Path,
    snapshot: &SnapshotCollection,
    outcome: &EvalOutcome,
) -> Result<(f64, f64)> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let metrics = metrics_of_records(&outcome.records)?;
    write_records_csv(&out_dir.join("records.csv"), &outcome.records, snapshot)?;
    write_pr_csv(&out_dir.join("pr.csv"), &metrics)?;
    write_roc_csv(&out_dir.join("roc.csv"), &metrics)?;
    write_summary_csv(&out_dir.join("summary.csv"), &metrics)?;
    Ok((metrics.ap, metrics.auc))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, out } => {
            let started = Instant::now();
            let kv = config.load()?;
            let mut cfg = SynthConfig::from_kv(&kv)?;
            if let Some(name) = out.file_name().and_then(|s| s.to_str()) {
                cfg.label = name.to_string();
            }
            let output = generate(&cfg)?;
            write_snapshot_dir(&cfg, &output, &out)?;

            let mut m = RunManifest::new("synth");
            m.seed = cfg.seed;
            m.config = kv.values().clone();
            if let Some(path) = &config.config {
                m.record_input(path)?;
            }
            m.record_timing("synth", started.elapsed());
            m.write(&out.join("manifest.json"))?;
            println!(
                "wrote snapshot `{}`: {} domains, {} relations, {} denylisted",
                output.snapshot.label(),
                output.snapshot.n_domains(),
                output.snapshot.n_relations(),
                output.denylist.len()
            );
            Ok(())
        }

        Command::Check { snapshot } => {
            let (snap, denylist) = load_snapshot(&snapshot)?;
            // Structural invariants: adjacency symmetry (exhaustive at desk
            // scale) and the many-to-one degree bound.
            for g in snap.graphs() {
                let exhaustive = g.n_edges() <= 10_000;
                for d in snap.domain_ids() {
                    let row = g.domain_neighbors(d)?;
                    if g.cardinality() == netmil_core::graph::Cardinality::ManyToOne
                        && row.len() > 1
                    {
                        bail!("{}: domain {} violates many-to-one", g.relation(), d);
                    }
                    if exhaustive {
                        for &e in row {
                            let back = g.entity_neighbors(netmil_core::graph::EntityId(e))?;
                            if !back.contains(&d.0) {
                                bail!("{}: asymmetric edge ({d}, {e})", g.relation());
                            }
                        }
                    }
                }
                println!(
                    "relation {:<20} {:>9} entities {:>10} edges ({})",
                    g.relation(),
                    g.n_entities(),
                    g.n_edges(),
                    g.cardinality().as_str()
                );
            }
            println!(
                "snapshot `{}` ok: {} domains, {} relations, {} denylisted resident",
                snap.label(),
                snap.n_domains(),
                snap.n_relations(),
                denylist.members_in(&snap).len()
            );
            Ok(())
        }

        Command::Train {
            snapshots,
            arch,
            config,
            out,
            loss_out,
        } => {
            let started = Instant::now();
            let kv = config.load()?;
            let mut train_cfg = TrainConfig::from_kv(&kv)?;
            train_cfg.arch = arch;

            let mut data = Vec::new();
            for dir in &snapshots {
                data.push(load_snapshot(dir)?);
            }
            let ingest_elapsed = started.elapsed();

            let train_started = Instant::now();
            let output = train(&data, None, &train_cfg)?;
            output.model.save(&out)?;

            let loss_path = loss_out.unwrap_or_else(|| out.with_extension("loss.csv"));
            let mut csv = String::from("batch_index,loss\n");
            for (i, loss) in output.losses.iter().enumerate() {
                csv.push_str(&format!("{i},{loss}\n"));
            }
            fs::write(&loss_path, csv).with_context(|| format!("writing {}", loss_path.display()))?;

            let mut m = RunManifest::new("train");
            m.seed = train_cfg.seed;
            m.config = kv.values().clone();
            m.config.insert("training.arch".into(), train_cfg.arch.clone());
            for dir in &snapshots {
                m.record_input_tree(dir)?;
            }
            m.record_timing("ingest", ingest_elapsed);
            m.record_timing("train", train_started.elapsed());
            m.write(&out.with_extension("manifest.json"))?;
            println!(
                "trained {} over {} snapshots, {} optimizer steps; saved to {}",
                train_cfg.arch,
                data.len(),
                output.losses.len(),
                out.display()
            );
            Ok(())
        }

        Command::Predict {
            model,
            snapshot,
            domains,
            out,
            seed,
            config,
        } => {
            let started = Instant::now();
            let kv = config.load()?;
            let net = HmilModel::load(&model)?;
            let (snap, denylist) = load_snapshot(&snapshot)?;
            let params = sample_params_from(&kv, net.arch().steps)?;
            let active = ActiveDenylist::resolve(&denylist, &snap);

            let targets: Vec<netmil_core::graph::DomainId> = if domains == "all" {
                snap.domain_ids().collect()
            } else {
                let content = fs::read_to_string(&domains)
                    .with_context(|| format!("reading domain list {domains}"))?;
                let mut ids = Vec::new();
                for name in content.lines().map(str::trim).filter(|l| !l.is_empty()) {
                    match snap.domain_id(name) {
                        Some(d) => ids.push(d),
                        None => log::warn!("domain `{name}` not in snapshot, skipped"),
                    }
                }
                ids
            };
            if targets.is_empty() {
                bail!("no resident domains to score");
            }

            let mut builder = SampleBuilder::new(&snap, net.relation_names(), params);
            let mut pairs = Vec::with_capacity(targets.len());
            for &d in &targets {
                let sample = builder.build(d, &active, mix(&[seed, d.0 as u64]))?;
                pairs.push((d, net.predict_proba(&sample)?));
            }
            write_scores_csv(&out, &snap, &pairs)?;

            let mut m = RunManifest::new("predict");
            m.seed = seed;
            m.config = kv.values().clone();
            m.record_input(&model)?;
            m.record_input_tree(&snapshot)?;
            m.record_timing("predict", started.elapsed());
            m.write(&out.with_extension("manifest.json"))?;
            println!("scored {} domains into {}", pairs.len(), out.display());
            Ok(())
        }

        Command::Evaluate {
            model,
            baseline_relation,
            snapshot,
            k,
            seed,
            out,
            config,
        } => {
            let started = Instant::now();
            let kv = config.load()?;
            let (snap, denylist) = load_snapshot(&snapshot)?;

            let outcome = match (&model, &baseline_relation) {
                (Some(path), None) => {
                    let net = HmilModel::load(path)?;
                    let params = sample_params_from(&kv, net.arch().steps)?;
                    let scorer = ModelScorer {
                        model: &net,
                        snapshot: &snap,
                        params,
                        seed: mix(&[seed, 0xE7A1]),
                    };
                    kfold_evaluate(&scorer, &snap, &denylist, k, seed)?
                }
                (None, Some(relation)) => {
                    let g = snap
                        .graph(relation)
                        .ok_or_else(|| anyhow!("relation `{relation}` not in snapshot"))?;
                    let active = ActiveDenylist::resolve(&denylist, &snap);
                    let graph = build_ptp_graph(
                        g,
                        &active,
                        PtpWeighting::SharedEntityCount,
                        kv.get_parsed("transform.entity_degree_cap")?,
                        kv.get_or("ptp.edge_budget", 20_000_000usize)?,
                    )?;
                    let scorer = PtpScorer {
                        graph: &graph,
                        iterations: kv.get_or("ptp.iters", 20usize)?,
                    };
                    kfold_evaluate(&scorer, &snap, &denylist, k, seed)?
                }
                _ => bail!("pass exactly one of --model or --baseline-relation"),
            };
            if outcome.leaks > 0 {
                bail!("protocol violation: {} leaked membership lookups", outcome.leaks);
            }
            let (ap, auc) = write_eval_outputs(&out, &snap, &outcome)?;

            let mut m = RunManifest::new("evaluate");
            m.seed = seed;
            m.config = kv.values().clone();
            m.config.insert("eval.k".into(), k.to_string());
            if let Some(path) = &model {
                m.record_input(path)?;
            }
            m.record_input_tree(&snapshot)?;
            m.record_timing("evaluate", started.elapsed());
            m.write(&out.join("manifest.json"))?;
            println!("evaluation written to {}: AP {ap:.4}, AUC {auc:.4}", out.display());
            Ok(())
        }

        Command::Grill {
            fraction,
            snapshots,
            eval_snapshot,
            arch,
            k,
            config,
            out,
        } => {
            let started = Instant::now();
            let kv = config.load()?;
            let mut train_cfg = TrainConfig::from_kv(&kv)?;
            train_cfg.arch = arch;

            let mut data = Vec::new();
            for dir in &snapshots {
                data.push(load_snapshot(dir)?);
            }
            // The plan is drawn from the first training snapshot's denylist.
            let plan = grill_split(&data[0].1, fraction, train_cfg.seed)?;
            let trained = train(&data, Some(&plan.held_out), &train_cfg)?;

            let (eval_snap, eval_deny) = match &eval_snapshot {
                Some(dir) => load_snapshot(dir)?,
                None => load_snapshot(&snapshots[0])?,
            };
            let params = sample_params_from(&kv, trained.model.arch().steps)?;
            let scorer = ModelScorer {
                model: &trained.model,
                snapshot: &eval_snap,
                params,
                seed: mix(&[train_cfg.seed, 0xE7A1]),
            };
            let holdout: BTreeSet<String> = plan.held_out.clone();
            let outcome =
                kfold_evaluate_holdout(&scorer, &eval_snap, &eval_deny, &holdout, k, train_cfg.seed)?;
            if outcome.leaks > 0 {
                bail!("protocol violation: {} leaked membership lookups", outcome.leaks);
            }
            let (ap, auc) = write_eval_outputs(&out, &eval_snap, &outcome)?;

            trained.model.save(&out.join("model.ckpt"))?;
            let mut holdout_tsv = String::new();
            for name in &plan.held_out {
                holdout_tsv.push_str(name);
                holdout_tsv.push('\n');
            }
            fs::write(out.join("holdout.tsv"), holdout_tsv)
                .with_context(|| "writing holdout.tsv")?;

            let mut m = RunManifest::new("grill");
            m.seed = train_cfg.seed;
            m.config = kv.values().clone();
            m.config.insert("grill.fraction".into(), fraction.to_string());
            for dir in &snapshots {
                m.record_input_tree(dir)?;
            }
            m.record_timing("grill", started.elapsed());
            m.write(&out.join("manifest.json"))?;
            println!(
                "hold-out test ({} of {} denylisted withheld) written to {}: AP {ap:.4}, AUC {auc:.4}",
                plan.held_out.len(),
                data[0].1.len(),
                out.display()
            );
            Ok(())
        }

        Command::Ptp {
            snapshot,
            relation,
            iters,
            weighting,
            out,
            config,
        } => {
            let started = Instant::now();
            let kv = config.load()?;
            let (snap, denylist) = load_snapshot(&snapshot)?;
            let g = snap
                .graph(&relation)
                .ok_or_else(|| anyhow!("relation `{relation}` not in snapshot"))?;
            let active = ActiveDenylist::resolve(&denylist, &snap);
            let graph = build_ptp_graph(
                g,
                &active,
                weighting.into(),
                kv.get_parsed("transform.entity_degree_cap")?,
                kv.get_or("ptp.edge_budget", 20_000_000usize)?,
            )?;
            let result = ptp_iterative(&graph, iters);
            let pairs: Vec<(netmil_core::graph::DomainId, f64)> = snap
                .domain_ids()
                .map(|d| (d, result.scores[d.0 as usize]))
                .collect();
            write_scores_csv(&out, &snap, &pairs)?;

            let mut m = RunManifest::new("ptp");
            m.config = kv.values().clone();
            m.config.insert("ptp.relation".into(), relation.clone());
            m.config.insert("ptp.iters".into(), iters.to_string());
            m.config.insert(
                "ptp.weighting".into(),
                PtpWeighting::from(weighting).as_str().to_string(),
            );
            m.record_input_tree(&snapshot)?;
            m.record_timing("ptp", started.elapsed());
            m.write(&out.with_extension("manifest.json"))?;
            println!(
                "propagated over `{relation}` ({} directed edges, {iters} sweeps) into {}",
                graph.n_directed_edges(),
                out.display()
            );
            Ok(())
        }
    }
}
