//! Per-relation submodels assembled into one scoring network.
//!
//! Each relation gets its own stack (no parameter sharing across relations):
//! a leaf layer for the central vertex, a leaf layer for bag instances, an
//! aggregation block with a projection, and a product layer. A final product
//! layer concatenates the per-relation outputs into two classification
//! logits (class order: benign, malicious). Empty bags and missing relations
//! are imputed with learned vectors, trained like any other parameter.
//!
//! For multi-step neighborhoods every depth level has its own layers; an
//! instance below the deepest level carries the child vertex representation
//! concatenated with the edge features.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{EDGE_FEATURE_DIM, EDGE_FEATURE_NAMES, VERTEX_FEATURE_DIM, VERTEX_FEATURE_NAMES};
use crate::hmil::{graph_sample_schema, HmilSample, HmilSchema};
use crate::nn::{
    softmax_class1, Activation, AggCache, AggGrad, AggregationBlock, Mlp, MlpCache, MlpGrad,
    Tensor2,
};

// ---------------------------------------------------------------------------
// Architecture
// ---------------------------------------------------------------------------

/// Layer width tuples per submodel. Each tuple lists the input width followed
/// by one entry per dense layer, so `(2, 10, 10)` is two layers `2 -> 10 ->
/// 10`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub name: String,
    pub f_hat: Vec<usize>,
    pub f_tilde: Vec<usize>,
    pub g: Vec<usize>,
    pub r_rel: Vec<usize>,
    pub r_final: Vec<usize>,
    pub relations: usize,
    pub steps: usize,
}

impl ArchitectureSpec {
    /// Concatenation arithmetic that must hold for the model to compose:
    /// the aggregation fans out four-fold, the per-relation product layer
    /// sees the central-vertex projection next to the bag projection, and
    /// the final layer sees one slot per relation.
    pub fn audit(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Invalid(format!("architecture {}: {msg}", self.name)));
        if self.relations == 0 || self.steps == 0 {
            return fail("needs at least one relation and one step".into());
        }
        for (label, tuple) in [
            ("f_hat", &self.f_hat),
            ("f_tilde", &self.f_tilde),
            ("g", &self.g),
            ("r_rel", &self.r_rel),
            ("r_final", &self.r_final),
        ] {
            if tuple.len() < 2 {
                return fail(format!("{label} needs an input and at least one layer"));
            }
            if tuple.iter().any(|&w| w == 0) {
                return fail(format!("{label} has a zero width"));
            }
        }
        if self.f_hat[0] != VERTEX_FEATURE_DIM {
            return fail(format!(
                "f_hat input {} != vertex feature dim {VERTEX_FEATURE_DIM}",
                self.f_hat[0]
            ));
        }
        if self.f_tilde[0] != EDGE_FEATURE_DIM {
            return fail(format!(
                "f_tilde input {} != edge feature dim {EDGE_FEATURE_DIM}",
                self.f_tilde[0]
            ));
        }
        let f_tilde_out = *self.f_tilde.last().unwrap();
        if self.g[0] != 4 * f_tilde_out {
            return fail(format!(
                "g input {} != 4 x f_tilde output {}",
                self.g[0],
                4 * f_tilde_out
            ));
        }
        let expect_r_rel = self.f_hat.last().unwrap() + self.g.last().unwrap();
        if self.r_rel[0] != expect_r_rel {
            return fail(format!(
                "r_rel input {} != f_hat output + g output = {expect_r_rel}",
                self.r_rel[0]
            ));
        }
        let expect_final = self.relations * self.r_rel.last().unwrap();
        if self.r_final[0] != expect_final {
            return fail(format!(
                "final input {} != relations x r_rel output = {expect_final}",
                self.r_final[0]
            ));
        }
        if *self.r_final.last().unwrap() != 2 {
            return fail(format!(
                "final output {} != 2 classification logits",
                self.r_final.last().unwrap()
            ));
        }
        Ok(())
    }

    fn rel_out(&self) -> usize {
        *self.r_rel.last().unwrap()
    }
}

/// The three built-in architectures: baseline `Mb`, wider `Mw` and deeper
/// `Md`. The final-layer input width always follows from the concatenation
/// arithmetic (`relations` x per-relation output).
pub fn builtin_arch(name: &str, relations: usize) -> Result<ArchitectureSpec> {
    let (f_hat, f_tilde, g, r_rel, r_hidden): (
        Vec<usize>,
        Vec<usize>,
        Vec<usize>,
        Vec<usize>,
        Vec<usize>,
    ) = match name {
        "Mb" => (
            vec![2, 10, 10],
            vec![6, 30, 30],
            vec![120, 60, 60],
            vec![70, 20],
            vec![100, 2],
        ),
        "Mw" => (
            vec![2, 20],
            vec![6, 60],
            vec![240, 120],
            vec![140, 20],
            vec![2],
        ),
        "Md" => (
            vec![2, 5, 5, 5],
            vec![6, 15, 15, 15, 15],
            vec![60, 60, 30, 30],
            vec![35, 20, 20],
            vec![60, 60, 2],
        ),
        other => {
            return Err(Error::Invalid(format!(
                "unknown architecture `{other}` (expected Mb, Mw or Md)"
            )))
        }
    };
    let mut r_final = vec![relations * r_rel.last().unwrap()];
    r_final.extend(r_hidden);
    let spec = ArchitectureSpec {
        name: name.to_string(),
        f_hat,
        f_tilde,
        g,
        r_rel,
        r_final,
        relations,
        steps: 1,
    };
    spec.audit()?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Layers owned by one depth level of one relation.
#[derive(Clone, Debug)]
pub(crate) struct LevelModel {
    pub f_hat: Mlp,
    pub f_tilde: Mlp,
    pub agg: AggregationBlock,
    pub g: Mlp,
    pub r: Mlp,
    /// Replaces the bag projection output when the bag is empty.
    pub empty_bag: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct RelationModel {
    pub levels: Vec<LevelModel>,
    /// Replaces the whole relation output when the relation is missing.
    pub missing: Vec<f64>,
}

pub struct HmilModel {
    arch: ArchitectureSpec,
    relation_names: Vec<String>,
    pub(crate) relations: Vec<RelationModel>,
    pub(crate) head: Mlp,
}

#[derive(Clone, Debug)]
pub(crate) struct LevelGrad {
    pub f_hat: MlpGrad,
    pub f_tilde: MlpGrad,
    pub agg: AggGrad,
    pub g: MlpGrad,
    pub r: MlpGrad,
    pub empty_bag: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct RelationGrad {
    pub levels: Vec<LevelGrad>,
    pub missing: Vec<f64>,
}

/// Gradient accumulator mirroring [`HmilModel`]'s parameters.
pub struct ModelGrads {
    pub(crate) relations: Vec<RelationGrad>,
    pub(crate) head: MlpGrad,
}

fn f_tilde_widths(arch: &ArchitectureSpec, level: usize) -> Vec<usize> {
    let mut widths = arch.f_tilde.clone();
    if level + 1 < arch.steps {
        // Instances below carry the child representation next to the edge.
        widths[0] = arch.rel_out() + EDGE_FEATURE_DIM;
    }
    widths
}

impl LevelModel {
    fn build(arch: &ArchitectureSpec, level: usize, mut init: impl FnMut(&[usize], Activation, Activation) -> Mlp) -> LevelModel {
        let f_tilde_w = f_tilde_widths(arch, level);
        LevelModel {
            f_hat: init(&arch.f_hat, Activation::Relu, Activation::Relu),
            f_tilde: init(&f_tilde_w, Activation::Relu, Activation::Tanh),
            agg: AggregationBlock::new(*arch.f_tilde.last().unwrap()),
            g: init(&arch.g, Activation::Relu, Activation::Relu),
            r: init(&arch.r_rel, Activation::Relu, Activation::Relu),
            empty_bag: vec![0.0; *arch.g.last().unwrap()],
        }
    }
}

impl HmilModel {
    /// Fresh model: Glorot-normal weights, zero biases, zero imputation
    /// vectors. Layers just before aggregations use tanh, the final logits
    /// are linear, everything else uses relu.
    pub fn new(arch: ArchitectureSpec, relation_names: Vec<String>, rng: &mut impl Rng) -> Result<HmilModel> {
        arch.audit()?;
        if relation_names.len() != arch.relations {
            return Err(Error::Invalid(format!(
                "{} relation names for an architecture over {} relations",
                relation_names.len(),
                arch.relations
            )));
        }
        let relations = (0..arch.relations)
            .map(|_| RelationModel {
                levels: (0..arch.steps)
                    .map(|level| {
                        LevelModel::build(&arch, level, |w, hidden, last| Mlp::new(w, hidden, last, rng))
                    })
                    .collect(),
                missing: vec![0.0; arch.rel_out()],
            })
            .collect();
        let head = Mlp::new(&arch.r_final, Activation::Relu, Activation::Identity, rng);
        Ok(HmilModel {
            arch,
            relation_names,
            relations,
            head,
        })
    }

    fn zeroed(arch: ArchitectureSpec, relation_names: Vec<String>) -> HmilModel {
        let relations = (0..arch.relations)
            .map(|_| RelationModel {
                levels: (0..arch.steps)
                    .map(|level| LevelModel::build(&arch, level, |w, hidden, last| Mlp::zeros(w, hidden, last)))
                    .collect(),
                missing: vec![0.0; arch.rel_out()],
            })
            .collect();
        let head = Mlp::zeros(&arch.r_final, Activation::Relu, Activation::Identity);
        HmilModel {
            arch,
            relation_names,
            relations,
            head,
        }
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    pub fn schema(&self) -> HmilSchema {
        graph_sample_schema(self.arch.steps, self.arch.relations)
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            relations: self
                .relations
                .iter()
                .map(|rel| RelationGrad {
                    levels: rel
                        .levels
                        .iter()
                        .map(|lvl| LevelGrad {
                            f_hat: lvl.f_hat.zero_grad(),
                            f_tilde: lvl.f_tilde.zero_grad(),
                            agg: lvl.agg.zero_grad(),
                            g: lvl.g.zero_grad(),
                            r: lvl.r.zero_grad(),
                            empty_bag: vec![0.0; lvl.empty_bag.len()],
                        })
                        .collect(),
                    missing: vec![0.0; rel.missing.len()],
                })
                .collect(),
            head: self.head.zero_grad(),
        }
    }

    pub fn n_parameters(&self) -> usize {
        let mut n = 0;
        self.visit_params(|s| n += s.len());
        n
    }

    /// Visits every parameter slice in the canonical order shared by the
    /// optimizer, the gradient accumulator and the checkpoint format.
    pub fn visit_params<'a>(&'a self, mut f: impl FnMut(&'a [f64])) {
        for rel in &self.relations {
            for lvl in &rel.levels {
                for mlp in [&lvl.f_hat, &lvl.f_tilde, &lvl.g, &lvl.r] {
                    for layer in &mlp.layers {
                        f(layer.w.data());
                        f(&layer.b);
                    }
                }
                f(&lvl.agg.rho_r);
                f(&lvl.agg.rho_p);
                f(&lvl.agg.theta_c);
                f(&lvl.empty_bag);
            }
            f(&rel.missing);
        }
        for layer in &self.head.layers {
            f(layer.w.data());
            f(&layer.b);
        }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for rel in &mut self.relations {
            for lvl in &mut rel.levels {
                for mlp in [&mut lvl.f_hat, &mut lvl.f_tilde, &mut lvl.g, &mut lvl.r] {
                    for layer in &mut mlp.layers {
                        out.push(layer.w.data_mut());
                        out.push(&mut layer.b);
                    }
                }
                out.push(&mut lvl.agg.rho_r);
                out.push(&mut lvl.agg.rho_p);
                out.push(&mut lvl.agg.theta_c);
                out.push(&mut lvl.empty_bag);
            }
            out.push(&mut rel.missing);
        }
        for layer in &mut self.head.layers {
            out.push(layer.w.data_mut());
            out.push(&mut layer.b);
        }
        out
    }

    pub fn param_lens(&self) -> Vec<usize> {
        let mut lens = Vec::new();
        self.visit_params(|s| lens.push(s.len()));
        lens
    }

    // -- forward ------------------------------------------------------------

    /// Scores one sample; returns the two logits plus the activation cache
    /// needed by [`HmilModel::backward`].
    pub fn forward(&self, sample: &HmilSample) -> Result<([f64; 2], ForwardCache)> {
        let slots = match sample {
            HmilSample::Tuple(slots) if slots.len() == self.relations.len() => slots,
            HmilSample::Tuple(slots) => {
                return Err(Error::SchemaMismatch {
                    path: "root".into(),
                    detail: format!("tuple arity {} != {}", slots.len(), self.relations.len()),
                })
            }
            other => {
                return Err(Error::SchemaMismatch {
                    path: "root".into(),
                    detail: format!("expected a relation tuple, got {other:?}"),
                })
            }
        };

        let mut concat = Vec::with_capacity(self.arch.r_final[0]);
        let mut rel_caches = Vec::with_capacity(slots.len());
        for (i, slot) in slots.iter().enumerate() {
            match slot {
                HmilSample::Missing => {
                    concat.extend_from_slice(&self.relations[i].missing);
                    rel_caches.push(None);
                }
                node => {
                    let (h, cache) =
                        self.node_forward(i, 0, node, &format!("relation[{i}]"))?;
                    concat.extend_from_slice(&h);
                    rel_caches.push(Some(cache));
                }
            }
        }
        let (logits, head_cache) = self.head.forward(&Tensor2::row_vector(&concat))?;
        Ok((
            [logits.get(0, 0), logits.get(0, 1)],
            ForwardCache {
                relations: rel_caches,
                head: head_cache,
            },
        ))
    }

    fn node_forward(
        &self,
        rel: usize,
        level: usize,
        node: &HmilSample,
        path: &str,
    ) -> Result<(Vec<f64>, NodeCache)> {
        let lvl = &self.relations[rel].levels[level];
        let (vert, bag) = split_node(node, path)?;

        let (fh_out, fh_cache) = lvl.f_hat.forward(&Tensor2::row_vector(vert))?;

        let (children, weights) = bag;
        let (bag_vec, bag_cache) = if children.is_empty() {
            (lvl.empty_bag.clone(), BagCache::Empty)
        } else {
            let mut z_rows: Vec<Vec<f64>> = Vec::with_capacity(children.len());
            let mut child_caches: Vec<Option<Box<NodeCache>>> = Vec::with_capacity(children.len());
            for (ci, child) in children.iter().enumerate() {
                let cpath = format!("{path}.bag[{ci}]");
                if level + 1 == self.arch.steps {
                    let edge = as_leaf(child, EDGE_FEATURE_DIM, &cpath)?;
                    z_rows.push(edge.to_vec());
                    child_caches.push(None);
                } else {
                    let (inner, edge) = split_instance(child, &cpath)?;
                    let (h_child, ccache) = self.node_forward(rel, level + 1, inner, &cpath)?;
                    let mut z = h_child;
                    z.extend_from_slice(edge);
                    z_rows.push(z);
                    child_caches.push(Some(Box::new(ccache)));
                }
            }
            let z = Tensor2::from_rows(&z_rows);
            let (f_out, f_cache) = lvl.f_tilde.forward(&z)?;
            let (a_out, a_cache) = lvl.agg.forward(&f_out, weights)?;
            let (g_out, g_cache) = lvl.g.forward(&Tensor2::row_vector(&a_out))?;
            (
                g_out.row(0).to_vec(),
                BagCache::Full {
                    children: child_caches,
                    f_tilde: f_cache,
                    agg: a_cache,
                    g: g_cache,
                },
            )
        };

        let mut r_in = fh_out.row(0).to_vec();
        r_in.extend_from_slice(&bag_vec);
        let (h, r_cache) = lvl.r.forward(&Tensor2::row_vector(&r_in))?;
        Ok((
            h.row(0).to_vec(),
            NodeCache {
                f_hat: fh_cache,
                bag: bag_cache,
                r: r_cache,
            },
        ))
    }

    // -- backward -----------------------------------------------------------

    /// Exact gradients of a scalar loss for every parameter, including the
    /// imputation vectors, accumulated into `grads`.
    pub fn backward(&self, cache: &ForwardCache, glogits: [f64; 2], grads: &mut ModelGrads) {
        let gy = Tensor2::row_vector(&glogits);
        let gconcat = self.head.backward(&cache.head, &gy, &mut grads.head);
        let rel_out = self.arch.rel_out();
        for (i, rel_cache) in cache.relations.iter().enumerate() {
            let gslice = &gconcat.row(0)[i * rel_out..(i + 1) * rel_out];
            match rel_cache {
                None => {
                    for (gm, &g) in grads.relations[i].missing.iter_mut().zip(gslice) {
                        *gm += g;
                    }
                }
                Some(node_cache) => {
                    self.node_backward(i, 0, node_cache, gslice, grads);
                }
            }
        }
    }

    fn node_backward(
        &self,
        rel: usize,
        level: usize,
        cache: &NodeCache,
        gh: &[f64],
        grads: &mut ModelGrads,
    ) {
        let lvl = &self.relations[rel].levels[level];
        let fh_dim = lvl.f_hat.out_dim();

        let gr_in = {
            let glvl = &mut grads.relations[rel].levels[level];
            lvl.r
                .backward(&cache.r, &Tensor2::row_vector(gh), &mut glvl.r)
        };
        let (g_fh, g_bag) = gr_in.row(0).split_at(fh_dim);

        {
            let glvl = &mut grads.relations[rel].levels[level];
            lvl.f_hat
                .backward(&cache.f_hat, &Tensor2::row_vector(g_fh), &mut glvl.f_hat);
        }

        match &cache.bag {
            BagCache::Empty => {
                let glvl = &mut grads.relations[rel].levels[level];
                for (ge, &g) in glvl.empty_bag.iter_mut().zip(g_bag) {
                    *ge += g;
                }
            }
            BagCache::Full {
                children,
                f_tilde,
                agg,
                g: g_cache,
            } => {
                let gz = {
                    let glvl = &mut grads.relations[rel].levels[level];
                    let g_avec = lvl.g.backward(g_cache, &Tensor2::row_vector(g_bag), &mut glvl.g);
                    let g_f = lvl.agg.backward(agg, g_avec.row(0), &mut glvl.agg);
                    lvl.f_tilde.backward(f_tilde, &g_f, &mut glvl.f_tilde)
                };
                if level + 1 < self.arch.steps {
                    let child_dim = self.arch.rel_out();
                    for (ci, child) in children.iter().enumerate() {
                        let gchild = &gz.row(ci)[..child_dim];
                        let ccache = child.as_ref().expect("inner node cache below deepest level");
                        self.node_backward(rel, level + 1, ccache, gchild, grads);
                    }
                }
                // Edge-feature gradients are inputs, not parameters; dropped.
            }
        }
    }

    /// Probability of the malicious class.
    pub fn predict_proba(&self, sample: &HmilSample) -> Result<f64> {
        let (logits, _) = self.forward(sample)?;
        Ok(softmax_class1(&logits))
    }

    // -- checkpoints ----------------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<HmilModel> {
        let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        HmilModel::from_bytes(&bytes).map_err(|e| match e {
            Error::CheckpointVersion { .. } => e,
            Error::Checkpoint { msg, .. } => Error::Checkpoint {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }

    /// Deterministic, self-describing byte encoding: magic, format version,
    /// architecture, relation order, feature ordering, then every parameter
    /// slot in canonical order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        write_str(&mut out, &self.arch.name);
        for tuple in [
            &self.arch.f_hat,
            &self.arch.f_tilde,
            &self.arch.g,
            &self.arch.r_rel,
            &self.arch.r_final,
        ] {
            write_usize_list(&mut out, tuple);
        }
        out.extend_from_slice(&(self.arch.relations as u64).to_le_bytes());
        out.extend_from_slice(&(self.arch.steps as u64).to_le_bytes());
        out.extend_from_slice(&(self.relation_names.len() as u64).to_le_bytes());
        for name in &self.relation_names {
            write_str(&mut out, name);
        }
        out.extend_from_slice(&(VERTEX_FEATURE_NAMES.len() as u64).to_le_bytes());
        for name in VERTEX_FEATURE_NAMES {
            write_str(&mut out, name);
        }
        out.extend_from_slice(&(EDGE_FEATURE_NAMES.len() as u64).to_le_bytes());
        for name in EDGE_FEATURE_NAMES {
            write_str(&mut out, name);
        }

        let lens = self.param_lens();
        out.extend_from_slice(&(lens.len() as u64).to_le_bytes());
        self.visit_params(|slice| {
            out.extend_from_slice(&(slice.len() as u64).to_le_bytes());
            for v in slice {
                out.extend_from_slice(&v.to_le_bytes());
            }
        });
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<HmilModel> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(CHECKPOINT_MAGIC.len())?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.corrupt("bad magic"));
        }
        let version = r.read_u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let name = r.read_str()?;
        let f_hat = r.read_usize_list()?;
        let f_tilde = r.read_usize_list()?;
        let g = r.read_usize_list()?;
        let r_rel = r.read_usize_list()?;
        let r_final = r.read_usize_list()?;
        let relations = r.read_u64()? as usize;
        let steps = r.read_u64()? as usize;
        let n_names = r.read_u64()? as usize;
        let mut relation_names = Vec::with_capacity(n_names);
        for _ in 0..n_names {
            relation_names.push(r.read_str()?);
        }
        let n_vert = r.read_u64()? as usize;
        for i in 0..n_vert {
            let feat = r.read_str()?;
            if VERTEX_FEATURE_NAMES.get(i) != Some(&feat.as_str()) {
                return Err(r.corrupt(&format!("unexpected vertex feature `{feat}`")));
            }
        }
        let n_edge = r.read_u64()? as usize;
        for i in 0..n_edge {
            let feat = r.read_str()?;
            if EDGE_FEATURE_NAMES.get(i) != Some(&feat.as_str()) {
                return Err(r.corrupt(&format!("unexpected edge feature `{feat}`")));
            }
        }

        let arch = ArchitectureSpec {
            name,
            f_hat,
            f_tilde,
            g,
            r_rel,
            r_final,
            relations,
            steps,
        };
        arch.audit()?;
        if relation_names.len() != relations {
            return Err(r.corrupt("relation name count mismatch"));
        }

        let mut model = HmilModel::zeroed(arch, relation_names);
        let n_slots = r.read_u64()? as usize;
        let expected = model.param_lens();
        if n_slots != expected.len() {
            return Err(r.corrupt(&format!(
                "{n_slots} parameter slots where {} expected",
                expected.len()
            )));
        }
        {
            let mut slices = model.param_slices_mut();
            for (slot, slice) in slices.iter_mut().enumerate() {
                let len = r.read_u64()? as usize;
                if len != slice.len() {
                    return Err(Error::Checkpoint {
                        path: Default::default(),
                        msg: format!("slot {slot}: {len} values where {} expected", slice.len()),
                    });
                }
                for v in slice.iter_mut() {
                    *v = r.read_f64()?;
                }
            }
        }
        if !r.at_end() {
            return Err(r.corrupt("trailing bytes"));
        }
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &[u8] = b"NMILCKPT";
const CHECKPOINT_VERSION: u32 = 1;

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn write_usize_list(out: &mut Vec<u8>, list: &[usize]) {
    out.extend_from_slice(&(list.len() as u64).to_le_bytes());
    for &v in list {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> ByteReader<'a> {
        ByteReader { bytes, pos: 0 }
    }

    fn corrupt(&self, msg: &str) -> Error {
        Error::Checkpoint {
            path: Default::default(),
            msg: format!("{msg} (at byte {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.corrupt("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn read_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn read_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn read_f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn read_str(&mut self) -> Result<String> {
        let len = self.read_u64()? as usize;
        if len > 1 << 20 {
            return Err(self.corrupt("implausible string length"));
        }
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.corrupt("invalid utf-8"))
    }

    fn read_usize_list(&mut self) -> Result<Vec<usize>> {
        let len = self.read_u64()? as usize;
        if len > 1 << 16 {
            return Err(self.corrupt("implausible list length"));
        }
        (0..len).map(|_| Ok(self.read_u64()? as usize)).collect()
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

// ---------------------------------------------------------------------------
// Forward cache
// ---------------------------------------------------------------------------

pub struct ForwardCache {
    relations: Vec<Option<NodeCache>>,
    head: MlpCache,
}

struct NodeCache {
    f_hat: MlpCache,
    bag: BagCache,
    r: MlpCache,
}

enum BagCache {
    Empty,
    Full {
        children: Vec<Option<Box<NodeCache>>>,
        f_tilde: MlpCache,
        agg: AggCache,
        g: MlpCache,
    },
}

fn split_node<'a>(
    node: &'a HmilSample,
    path: &str,
) -> Result<(&'a [f64], (&'a [HmilSample], &'a [f64]))> {
    let mismatch = |detail: String| Error::SchemaMismatch {
        path: path.to_string(),
        detail,
    };
    let HmilSample::Tuple(parts) = node else {
        return Err(mismatch(format!("expected a (vertex, bag) tuple, got {}", sample_kind(node))));
    };
    if parts.len() != 2 {
        return Err(mismatch(format!("node tuple arity {} != 2", parts.len())));
    }
    let HmilSample::Leaf(vert) = &parts[0] else {
        return Err(mismatch("first node item must be the vertex leaf".into()));
    };
    if vert.len() != VERTEX_FEATURE_DIM {
        return Err(mismatch(format!(
            "vertex leaf dim {} != {VERTEX_FEATURE_DIM}",
            vert.len()
        )));
    }
    let HmilSample::Bag { children, weights } = &parts[1] else {
        return Err(mismatch("second node item must be the neighbor bag".into()));
    };
    Ok((vert, (children, weights)))
}

fn split_instance<'a>(inst: &'a HmilSample, path: &str) -> Result<(&'a HmilSample, &'a [f64])> {
    let mismatch = |detail: String| Error::SchemaMismatch {
        path: path.to_string(),
        detail,
    };
    let HmilSample::Tuple(parts) = inst else {
        return Err(mismatch("expected an (inner node, edge leaf) tuple".into()));
    };
    if parts.len() != 2 {
        return Err(mismatch(format!("instance tuple arity {} != 2", parts.len())));
    }
    let HmilSample::Leaf(edge) = &parts[1] else {
        return Err(mismatch("second instance item must be the edge leaf".into()));
    };
    if edge.len() != EDGE_FEATURE_DIM {
        return Err(mismatch(format!("edge leaf dim {} != {EDGE_FEATURE_DIM}", edge.len())));
    }
    Ok((&parts[0], edge))
}

fn as_leaf<'a>(sample: &'a HmilSample, dim: usize, path: &str) -> Result<&'a [f64]> {
    match sample {
        HmilSample::Leaf(v) if v.len() == dim => Ok(v),
        HmilSample::Leaf(v) => Err(Error::SchemaMismatch {
            path: path.to_string(),
            detail: format!("leaf dim {} != {dim}", v.len()),
        }),
        other => Err(Error::SchemaMismatch {
            path: path.to_string(),
            detail: format!("expected a leaf, got {}", sample_kind(other)),
        }),
    }
}

fn sample_kind(s: &HmilSample) -> &'static str {
    match s {
        HmilSample::Leaf(_) => "leaf",
        HmilSample::Bag { .. } => "bag",
        HmilSample::Tuple(_) => "tuple",
        HmilSample::Missing => "missing",
    }
}

impl ModelGrads {
    /// Same canonical order as [`HmilModel::visit_params`].
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for rel in &self.relations {
            for lvl in &rel.levels {
                for mlp in [&lvl.f_hat, &lvl.f_tilde, &lvl.g, &lvl.r] {
                    for layer in &mlp.layers {
                        out.push(layer.w.data());
                        out.push(&layer.b);
                    }
                }
                out.push(&lvl.agg.rho_r);
                out.push(&lvl.agg.rho_p);
                out.push(&lvl.agg.theta_c);
                out.push(&lvl.empty_bag);
            }
            out.push(&rel.missing);
        }
        for layer in &self.head.layers {
            out.push(layer.w.data());
            out.push(&layer.b);
        }
        out
    }

    /// Elementwise accumulation; used to merge per-chunk gradients in a
    /// fixed order.
    pub fn add_assign(&mut self, other: &ModelGrads) {
        let mut a = self.param_slices_mut();
        let b = other.param_slices();
        debug_assert_eq!(a.len(), b.len());
        for (dst, src) in a.iter_mut().zip(b) {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += s;
            }
        }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for rel in &mut self.relations {
            for lvl in &mut rel.levels {
                for mlp in [&mut lvl.f_hat, &mut lvl.f_tilde, &mut lvl.g, &mut lvl.r] {
                    for layer in &mut mlp.layers {
                        out.push(layer.w.data_mut());
                        out.push(&mut layer.b);
                    }
                }
                out.push(&mut lvl.agg.rho_r);
                out.push(&mut lvl.agg.rho_p);
                out.push(&mut lvl.agg.theta_c);
                out.push(&mut lvl.empty_bag);
            }
            out.push(&mut rel.missing);
        }
        for layer in &mut self.head.layers {
            out.push(layer.w.data_mut());
            out.push(&mut layer.b);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{fdcheck, weighted_bce, DenseLayer};
    use crate::seed::rng_from;

    #[test]
    fn builtin_widths() {
        let mb = builtin_arch("Mb", 11).unwrap();
        assert_eq!(mb.f_hat, vec![2, 10, 10]);
        assert_eq!(mb.f_tilde, vec![6, 30, 30]);
        assert_eq!(mb.g, vec![120, 60, 60]);
        assert_eq!(mb.r_rel, vec![70, 20]);
        assert_eq!(mb.r_final, vec![220, 100, 2]);

        let mw = builtin_arch("Mw", 11).unwrap();
        assert_eq!(mw.f_hat, vec![2, 20]);
        assert_eq!(mw.f_tilde, vec![6, 60]);
        assert_eq!(mw.g, vec![240, 120]);
        assert_eq!(mw.r_rel, vec![140, 20]);
        // Final input follows from concatenation: 11 x 20.
        assert_eq!(mw.r_final, vec![220, 2]);

        let md = builtin_arch("Md", 11).unwrap();
        assert_eq!(md.f_hat, vec![2, 5, 5, 5]);
        assert_eq!(md.f_tilde, vec![6, 15, 15, 15, 15]);
        assert_eq!(md.g, vec![60, 60, 30, 30]);
        assert_eq!(md.r_rel, vec![35, 20, 20]);
        assert_eq!(md.r_final, vec![220, 60, 60, 2]);

        assert!(builtin_arch("Mz", 11).is_err());
    }

    #[test]
    fn audit_recomputes_concatenation_arithmetic() {
        for name in ["Mb", "Mw", "Md"] {
            for relations in [1, 3, 11] {
                let arch = builtin_arch(name, relations).unwrap();
                arch.audit().unwrap();
                assert_eq!(arch.g[0], 4 * arch.f_tilde.last().unwrap());
                assert_eq!(
                    arch.r_rel[0],
                    arch.f_hat.last().unwrap() + arch.g.last().unwrap()
                );
                assert_eq!(arch.r_final[0], relations * arch.r_rel.last().unwrap());
                assert_eq!(*arch.r_final.last().unwrap(), 2);
            }
        }
        let mut broken = builtin_arch("Mb", 11).unwrap();
        broken.r_final[0] = 1320;
        assert!(broken.audit().is_err());
    }

    fn tiny_arch(relations: usize, steps: usize) -> ArchitectureSpec {
        let arch = ArchitectureSpec {
            name: "tiny".into(),
            f_hat: vec![2, 3],
            f_tilde: vec![6, 4],
            g: vec![16, 3],
            r_rel: vec![6, 5],
            r_final: vec![relations * 5, 4, 2],
            relations,
            steps,
        };
        arch.audit().unwrap();
        arch
    }

    fn leaf(v: &[f64]) -> HmilSample {
        HmilSample::Leaf(v.to_vec())
    }

    fn rand_leaf(dim: usize, rng: &mut impl Rng) -> HmilSample {
        HmilSample::Leaf((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn rand_node(steps_left: usize, bag_size: usize, rng: &mut impl Rng) -> HmilSample {
        let children: Vec<HmilSample> = (0..bag_size)
            .map(|_| {
                if steps_left == 1 {
                    rand_leaf(EDGE_FEATURE_DIM, rng)
                } else {
                    let inner_size = rng.random_range(0..3);
                    HmilSample::Tuple(vec![
                        rand_node(steps_left - 1, inner_size, rng),
                        rand_leaf(EDGE_FEATURE_DIM, rng),
                    ])
                }
            })
            .collect();
        let weights = (0..bag_size).map(|_| rng.random_range(0.5..3.0)).collect();
        HmilSample::Tuple(vec![
            rand_leaf(VERTEX_FEATURE_DIM, rng),
            HmilSample::Bag { children, weights },
        ])
    }

    #[test]
    fn output_shape_is_two_for_any_bag_size() {
        let mut rng = rng_from(&[71]);
        let model = HmilModel::new(tiny_arch(2, 1), vec!["a".into(), "b".into()], &mut rng).unwrap();
        for bag_size in [0usize, 1, 3, 17] {
            let sample = HmilSample::Tuple(vec![
                rand_node(1, bag_size, &mut rng),
                rand_node(1, 2, &mut rng),
            ]);
            let (logits, _) = model.forward(&sample).unwrap();
            assert!(logits.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn all_missing_uses_imputation_path() {
        let mut rng = rng_from(&[73]);
        let model = HmilModel::new(tiny_arch(3, 1), vec!["a".into(), "b".into(), "c".into()], &mut rng)
            .unwrap();
        let sample = HmilSample::Tuple(vec![HmilSample::Missing; 3]);
        let (l1, _) = model.forward(&sample).unwrap();
        let (l2, _) = model.forward(&sample).unwrap();
        assert_eq!(l1, l2);
        // Zero-initialized missing vectors feed the head directly.
        let concat = vec![0.0; model.arch.r_final[0]];
        let (expect, _) = model.head.forward(&Tensor2::row_vector(&concat)).unwrap();
        assert_eq!(l1, [expect.get(0, 0), expect.get(0, 1)]);
    }

    #[test]
    fn schema_mismatch_names_path() {
        let mut rng = rng_from(&[74]);
        let model = HmilModel::new(tiny_arch(2, 1), vec!["a".into(), "b".into()], &mut rng).unwrap();
        let bad = HmilSample::Tuple(vec![
            rand_node(1, 1, &mut rng),
            HmilSample::Tuple(vec![
                leaf(&[0.0, 0.0]),
                HmilSample::Bag {
                    children: vec![leaf(&[1.0, 2.0, 3.0])], // wrong edge dim
                    weights: vec![1.0],
                },
            ]),
        ]);
        match model.forward(&bad) {
            Err(Error::SchemaMismatch { path, .. }) => {
                assert!(path.contains("relation[1].bag[0]"), "{path}")
            }
            Err(other) => panic!("unexpected {other}"),
            Ok(_) => panic!("expected a schema mismatch"),
        }
    }

    /// Identity-weight composition: with every square layer set to the
    /// identity and the head chosen by hand, the forward pass equals a
    /// straight-line recomputation of leaf -> aggregation -> concatenation.
    #[test]
    fn forward_matches_hand_composition() {
        let arch = ArchitectureSpec {
            name: "hand".into(),
            f_hat: vec![2, 2],
            f_tilde: vec![6, 6],
            g: vec![24, 24],
            r_rel: vec![26, 26],
            r_final: vec![26, 2],
            relations: 1,
            steps: 1,
        };
        arch.audit().unwrap();
        let mut model = HmilModel::zeroed(arch, vec!["r".into()]);
        let set_identity = |layer: &mut DenseLayer| {
            for i in 0..layer.w.rows().min(layer.w.cols()) {
                layer.w.set(i, i, 1.0);
            }
            layer.act = Activation::Identity;
        };
        {
            let lvl = &mut model.relations[0].levels[0];
            set_identity(&mut lvl.f_hat.layers[0]);
            set_identity(&mut lvl.f_tilde.layers[0]);
            set_identity(&mut lvl.g.layers[0]);
            set_identity(&mut lvl.r.layers[0]);
        }
        {
            let head = &mut model.head.layers[0];
            head.act = Activation::Identity;
            for j in 0..26 {
                head.w.set(0, j, 0.5);
            }
            head.w.set(1, 0, 1.0);
            head.b[0] = 0.1;
            head.b[1] = -0.2;
        }

        let x_v = [0.3, 0.4];
        let z = [1.0, -2.0, 3.0, 0.5, 4.0, 1.0];
        let sample = HmilSample::Tuple(vec![HmilSample::Tuple(vec![
            leaf(&x_v),
            HmilSample::Bag {
                children: vec![leaf(&z)],
                weights: vec![2.5],
            },
        ])]);

        // Straight-line recomputation: singleton aggregation produces
        // [z, z, z, |z|]; the relation output is [x_v, agg]; the head takes
        // 0.5 * sum and the first coordinate.
        let mut concat = x_v.to_vec();
        concat.extend_from_slice(&z); // mean
        concat.extend_from_slice(&z); // max
        concat.extend_from_slice(&z); // lse (exact for singletons)
        concat.extend(z.iter().map(|v| v.abs())); // pnorm at theta_c = 0
        let expect0 = 0.5 * concat.iter().sum::<f64>() + 0.1;
        let expect1 = concat[0] - 0.2;

        let (logits, _) = model.forward(&sample).unwrap();
        assert!((logits[0] - expect0).abs() < 1e-9, "{} vs {expect0}", logits[0]);
        assert!((logits[1] - expect1).abs() < 1e-9, "{} vs {expect1}", logits[1]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = rng_from(&[77]);
        let model = HmilModel::new(
            tiny_arch(2, 2),
            vec!["client".into(), "binary".into()],
            &mut rng,
        )
        .unwrap();
        let bytes = model.to_bytes();
        assert_eq!(bytes, model.to_bytes(), "save is deterministic");
        let loaded = HmilModel::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.to_bytes(), bytes);
        assert_eq!(loaded.relation_names(), model.relation_names());

        for seed in 0..100u64 {
            let mut srng = rng_from(&[seed, 0xABC]);
            let sample = HmilSample::Tuple(vec![
                rand_node(2, srng.random_range(0..3), &mut srng),
                rand_node(2, srng.random_range(0..3), &mut srng),
            ]);
            let (a, _) = model.forward(&sample).unwrap();
            let (b, _) = loaded.forward(&sample).unwrap();
            assert_eq!(a, b, "seed {seed}");
        }
    }

    #[test]
    fn checkpoint_version_and_corruption_errors() {
        let mut rng = rng_from(&[79]);
        let model = HmilModel::new(tiny_arch(1, 1), vec!["r".into()], &mut rng).unwrap();
        let mut bytes = model.to_bytes();

        let mut wrong_version = bytes.clone();
        wrong_version[CHECKPOINT_MAGIC.len()] = 9;
        match HmilModel::from_bytes(&wrong_version) {
            Err(Error::CheckpointVersion { found, expected }) => {
                assert_eq!(found, 9);
                assert_eq!(expected, CHECKPOINT_VERSION);
            }
            Err(other) => panic!("expected version error, got {other}"),
            Ok(_) => panic!("expected version error, got a model"),
        }

        bytes.truncate(bytes.len() - 3);
        assert!(HmilModel::from_bytes(&bytes).is_err());
    }

    #[test]
    fn save_load_files() {
        let mut rng = rng_from(&[83]);
        let model = HmilModel::new(tiny_arch(1, 1), vec!["r".into()], &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        model.save(&path).unwrap();
        let loaded = HmilModel::load(&path).unwrap();
        assert_eq!(loaded.to_bytes(), model.to_bytes());
    }

    #[test]
    fn permutation_invariance_of_bags() {
        let mut rng = rng_from(&[89]);
        let model = HmilModel::new(tiny_arch(1, 1), vec!["r".into()], &mut rng).unwrap();
        let children: Vec<HmilSample> = (0..5).map(|_| rand_leaf(EDGE_FEATURE_DIM, &mut rng)).collect();
        let weights: Vec<f64> = (0..5).map(|_| rng.random_range(0.5..2.0)).collect();
        let base = |perm: &[usize]| {
            HmilSample::Tuple(vec![HmilSample::Tuple(vec![
                leaf(&[0.1, 0.2]),
                HmilSample::Bag {
                    children: perm.iter().map(|&i| children[i].clone()).collect(),
                    weights: perm.iter().map(|&i| weights[i]).collect(),
                },
            ])])
        };
        let (l0, _) = model.forward(&base(&[0, 1, 2, 3, 4])).unwrap();
        for perm in [[4usize, 3, 2, 1, 0], [2, 0, 4, 1, 3]] {
            let (l, _) = model.forward(&base(&perm)).unwrap();
            assert!((l[0] - l0[0]).abs() < 1e-9 && (l[1] - l0[1]).abs() < 1e-9);
        }
    }

    fn flatten_params(model: &HmilModel) -> Vec<f64> {
        let mut out = Vec::new();
        model.visit_params(|s| out.extend_from_slice(s));
        out
    }

    fn flatten_grads(grads: &ModelGrads) -> Vec<f64> {
        grads
            .param_slices()
            .into_iter()
            .flat_map(|s| s.iter().copied())
            .collect()
    }

    fn set_params(model: &mut HmilModel, flat: &[f64]) {
        let mut pos = 0;
        for slice in model.param_slices_mut() {
            slice.copy_from_slice(&flat[pos..pos + slice.len()]);
            pos += slice.len();
        }
        assert_eq!(pos, flat.len());
    }

    fn end_to_end_fd(steps: usize, seed: u64) {
        let mut rng = rng_from(&[97, seed]);
        let model = HmilModel::new(tiny_arch(2, steps), vec!["a".into(), "b".into()], &mut rng).unwrap();

        // Three samples exercising full bags, empty bags and missing slots.
        let samples = vec![
            (
                HmilSample::Tuple(vec![rand_node(steps, 2, &mut rng), HmilSample::Missing]),
                1u8,
            ),
            (
                HmilSample::Tuple(vec![rand_node(steps, 0, &mut rng), rand_node(steps, 3, &mut rng)]),
                0u8,
            ),
            (
                HmilSample::Tuple(vec![rand_node(steps, 1, &mut rng), rand_node(steps, 2, &mut rng)]),
                1u8,
            ),
        ];

        let loss_of = |m: &HmilModel| -> f64 {
            samples
                .iter()
                .map(|(s, y)| {
                    let (logits, _) = m.forward(s).unwrap();
                    let t = Tensor2::row_vector(&logits);
                    weighted_bce(&t, &[*y], 0.9, 0.1).unwrap().0
                })
                .sum()
        };

        let mut grads = model.zero_grads();
        for (s, y) in &samples {
            let (logits, cache) = model.forward(s).unwrap();
            let t = Tensor2::row_vector(&logits);
            let (_, glog) = weighted_bce(&t, &[*y], 0.9, 0.1).unwrap();
            model.backward(&cache, [glog.get(0, 0), glog.get(0, 1)], &mut grads);
        }

        let x0 = flatten_params(&model);
        let analytic = flatten_grads(&grads);
        assert_eq!(x0.len(), analytic.len());
        let eval = |p: &[f64]| {
            let mut m = HmilModel::from_bytes(&model.to_bytes()).unwrap();
            set_params(&mut m, p);
            loss_of(&m)
        };
        fdcheck::check_gradient(&x0, &analytic, eval, fdcheck::DEFAULT_STEP, 1e-3)
            .unwrap_or_else(|e| panic!("steps {steps}: {e}"));
    }

    #[test]
    fn end_to_end_gradients_one_step() {
        end_to_end_fd(1, 1);
    }

    #[test]
    fn end_to_end_gradients_two_step() {
        end_to_end_fd(2, 2);
    }
}
