//! End-to-end cluster training.
//!
//! One training step builds a fresh tape, encodes every geometric view,
//! soft-assigns nodes to the learnable centroids, evaluates
//! `J = L_Ric + alpha1 L_Curv + alpha2 L_RGC`, backpropagates, and updates
//! all parameters with Adam moments; centroid restricted blocks are then
//! retracted onto their factors under the just-updated curvature
//! magnitudes. Everything is deterministic given the seed.

pub mod adam;
pub mod checkpoint;
pub mod losses;

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::TrainConfig;
use crate::diff::{DiffError, Tape, Tensor, Var};
use crate::encoder::{
    self, embedding_values, fan_init, EmbeddingSet, EncodedViews, EncoderDiag, EncoderModel,
    FactorVars, NeighborIndex,
};
use crate::graph::Graph;
use crate::manifold::{ManifoldError, ProductManifold, ProductPoint};
use crate::metrics;
use crate::params::{ParamRef, ParamStore};
use crate::ricci::RicciTable;
use adam::{retract_centroids, AdamConfig, AdamState};
use losses::{
    curvature_loss, n2c_loss, n2c_weights_detached, n2c_weights_on_tape, n2n_loss,
    n2n_weights_detached, n2n_weights_on_tape, positive_clusters, reweighted_logits, ricci_loss,
    similarity_grid, soft_assign, total_loss, ContrastDirection, EdgeData, NodeCurvatureData,
    WeightGrid,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("k = {k} exceeds the number of nodes {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("training requires a Ricci table; none was provided")]
    MissingRicciTable,
    #[error("differentiation failed: {0}")]
    Diff(#[from] DiffError),
    #[error("centroid retraction failed: {0}")]
    Retraction(#[from] ManifoldError),
}

/// Learnable state beyond the encoder: curvature magnitudes, contrast
/// parameters, and the cluster centroids.
#[derive(Debug, Clone)]
pub struct TrainerModel {
    pub encoder: EncoderModel,
    pub mag_refs: Vec<ParamRef>,
    /// Bilinear critic S (d0 x d0), shared across views and directions.
    pub critic: ParamRef,
    /// Per restricted factor: gLT weight into spatial dimension d0 - 1.
    pub view_w: Vec<ParamRef>,
    /// K x d0 free-view centroids.
    pub centroid_free: ParamRef,
    /// Per restricted factor: K x (d_m + 1) on-factor centroid blocks.
    pub centroid_blocks: Vec<ParamRef>,
}

/// Cluster centroids plus the soft membership they induce.
#[derive(Debug, Clone)]
pub struct ClusterState {
    pub centroids: Vec<ProductPoint>,
    /// N x K row-stochastic matrix.
    pub membership: Tensor,
}

/// K distinct node embeddings sampled without replacement; on-manifold by
/// construction because the embeddings are. The first node is uniform, each
/// further one is drawn with probability proportional to its squared product
/// distance to the nearest pick so far, which spreads the initial centroids
/// across the embedded clusters.
pub fn init_centroids(
    manifold: &ProductManifold,
    embeddings: &EmbeddingSet,
    k: usize,
    seed: u64,
) -> Result<Vec<ProductPoint>, TrainError> {
    let n = embeddings.free.rows();
    if k > n {
        return Err(TrainError::KTooLarge { k, n });
    }
    let point = |node: usize| ProductPoint {
        free: embeddings.free.row_slice(node).to_vec(),
        restricted: embeddings.restricted.iter().map(|z| z.row_slice(node).to_vec()).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut nearest_sq = vec![f64::INFINITY; n];
    while chosen.len() < k {
        let latest = point(*chosen.last().unwrap());
        for node in 0..n {
            let d = manifold
                .distance(&point(node), &latest)
                .expect("embeddings are on-manifold");
            nearest_sq[node] = nearest_sq[node].min(d * d);
        }
        let total: f64 = nearest_sq.iter().sum();
        let next = if total > 0.0 {
            let mut ticket = rng.gen_range(0.0..total);
            let mut pick = None;
            for (node, &w) in nearest_sq.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                pick = Some(node); // rounding in the ticket lands on the last positive weight
                if ticket < w {
                    break;
                }
                ticket -= w;
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // every remaining embedding coincides with a pick; fall back to
            // the first unchosen node
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n leaves a node")
        };
        chosen.push(next);
        nearest_sq[next] = 0.0;
    }
    Ok(chosen.into_iter().map(point).collect())
}

/// Reweighting grids and hard assignments captured from one forward pass so
/// a re-evaluation (finite differences) sees exactly the same coefficients
/// the gradient treated as constant.
#[derive(Debug, Clone, Default)]
pub struct FrozenAux {
    pub positives: Vec<usize>,
    pub n2n: Vec<Tensor>,
    pub n2c_fwd: Vec<Tensor>,
    pub n2c_rev: Vec<Tensor>,
}

/// Tape handles produced by one loss forward pass.
pub struct ForwardPass {
    pub j: Var,
    pub l_ric: Var,
    pub l_curv: Var,
    pub l_rgc: Var,
    pub membership: Var,
    pub views: EncodedViews,
    /// Per restricted factor: [n2n forward, n2n reversed, n2c forward,
    /// n2c reversed].
    pub contrast_terms: Vec<[Var; 4]>,
    /// Per restricted factor: the node images in the free ambient space.
    pub images: Vec<Var>,
    /// Per restricted factor: the centroid-block images.
    pub centroid_images: Vec<Var>,
    /// N x 1 MLP curvature estimates.
    pub curvature_estimates: Var,
    pub aux: FrozenAux,
}

/// Per-epoch log line.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub j: f64,
    pub l_ric: f64,
    pub l_curv: f64,
    pub l_rgc: f64,
    pub nmi: Option<f64>,
    pub ari: Option<f64>,
    pub acc: Option<f64>,
    pub density: Option<f64>,
    pub entropy: Option<f64>,
}

pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    /// Epoch at which J stopped being finite, if training aborted.
    pub diverged_at: Option<usize>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub manifold: ProductManifold,
    pub store: ParamStore,
    pub model: TrainerModel,
    pub diag: EncoderDiag,
    graph: Graph,
    idx: NeighborIndex,
    edge_data: Option<EdgeData>,
    node_curv: Option<NodeCurvatureData>,
}

impl Trainer {
    /// Builds the full model: encoder and contrast parameters from the
    /// seeded RNG, centroids from an initial forward pass. The Ricci table
    /// is optional only for evaluation-only use; `train` requires it.
    pub fn new(graph: Graph, ricci: Option<&RicciTable>, config: TrainConfig) -> Result<Self, TrainError> {
        let manifold = config.manifold();
        let n = graph.num_nodes();
        if config.k > n {
            return Err(TrainError::KTooLarge { k: config.k, n });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let enc = EncoderModel::init(&mut store, &mut rng, &manifold, graph.num_features(), config.mlp_hidden);
        let mag_refs: Vec<ParamRef> = manifold
            .restricted
            .iter()
            .enumerate()
            .map(|(m, f)| store.add(format!("curvature.mag{m}"), Tensor::scalar(f.magnitude_param())))
            .collect();
        let d0 = manifold.free.dim();
        let critic = store.add("contrast.critic", fan_init(&mut rng, d0, d0));
        let view_w: Vec<ParamRef> = manifold
            .restricted
            .iter()
            .enumerate()
            .map(|(m, f)| store.add(format!("contrast.view{m}"), fan_init(&mut rng, d0 - 1, f.dim())))
            .collect();

        let idx = NeighborIndex::new(&graph);
        let diag = EncoderDiag::default();

        // initial encode to seed the centroids with real node embeddings
        let embeddings = {
            let tape = Tape::new();
            let vars = store.register_all(&tape);
            let factor_vars = factor_vars(&tape, &manifold, &mag_refs, &vars);
            let x = tape.constant(graph.features().clone());
            let views = encoder::encode(&tape, &enc, &vars, &factor_vars, x, &idx, &diag);
            embedding_values(&tape, &views)
        };
        let centroids = init_centroids(&manifold, &embeddings, config.k, config.seed)?;
        let centroid_free = store.add(
            "centroid.free",
            Tensor::from_rows(&centroids.iter().map(|c| c.free.clone()).collect::<Vec<_>>()),
        );
        let centroid_blocks: Vec<ParamRef> = (0..manifold.num_restricted())
            .map(|m| {
                store.add(
                    format!("centroid.r{m}"),
                    Tensor::from_rows(&centroids.iter().map(|c| c.restricted[m].clone()).collect::<Vec<_>>()),
                )
            })
            .collect();

        let model = TrainerModel { encoder: enc, mag_refs, critic, view_w, centroid_free, centroid_blocks };

        let edge_data = ricci.map(|t| {
            let mut src = Vec::with_capacity(t.edge_ricci.len());
            let mut dst = Vec::with_capacity(t.edge_ricci.len());
            let mut vals = Vec::with_capacity(t.edge_ricci.len());
            for (&(i, j), &r) in &t.edge_ricci {
                src.push(i);
                dst.push(j);
                vals.push(r);
            }
            EdgeData { src: Rc::new(src), dst: Rc::new(dst), ricci: Tensor::column(vals) }
        });
        let node_curv = ricci.map(|t| {
            let nodes: Vec<usize> = t.node_ricci.keys().copied().collect();
            let vals: Vec<f64> = t.node_ricci.values().copied().collect();
            NodeCurvatureData { nodes: Rc::new(nodes), ricci: Tensor::column(vals), num_nodes: n }
        });

        Ok(Self { config, manifold, store, model, diag, graph, idx, edge_data, node_curv })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Loss forward pass on `tape` over leaves `vars`. When `frozen` is
    /// given, its reweighting grids and hard assignments are used verbatim;
    /// otherwise they are computed from the current values and returned.
    pub fn forward_losses(&self, tape: &Tape, vars: &[Var], frozen: Option<&FrozenAux>) -> Result<ForwardPass, TrainError> {
        let edges = self.edge_data.as_ref().ok_or(TrainError::MissingRicciTable)?;
        let node_curv = self.node_curv.as_ref().ok_or(TrainError::MissingRicciTable)?;
        let cfg = &self.config;

        let factor_vars = factor_vars(tape, &self.manifold, &self.model.mag_refs, vars);
        let x = tape.constant(self.graph.features().clone());
        let views = encoder::encode(tape, &self.model.encoder, vars, &factor_vars, x, &self.idx, &self.diag);

        let centroid_free = vars[self.model.centroid_free.0];
        let centroid_blocks: Vec<Var> =
            self.model.centroid_blocks.iter().map(|r| vars[r.0]).collect();
        let assignment = soft_assign(
            tape,
            &factor_vars,
            views.free,
            &views.restricted,
            centroid_free,
            &centroid_blocks,
        );
        let membership = assignment.membership;
        let membership_value = tape.value(membership);

        let l_ric = ricci_loss(tape, membership, edges, cfg.k, cfg.alpha0);
        let curvature_estimates =
            encoder::estimate_node_curvature(tape, &self.model.encoder.mlp, vars, views.free, &factor_vars);
        let l_curv = curvature_loss(tape, curvature_estimates, node_curv);

        let positives: Vec<usize> = match frozen {
            Some(aux) => aux.positives.clone(),
            None => positive_clusters(&membership_value),
        };
        let pos_rc = Rc::new(positives.clone());
        let mut aux = FrozenAux { positives, ..Default::default() };
        // the membership Gram matrix feeds every factor's detached weights
        let agreement = if cfg.reweight_grad {
            None
        } else {
            Some(membership_value.matmul(&membership_value.transpose()))
        };

        let critic = vars[self.model.critic.0];
        let mut l_rgc = tape.scalar_const(0.0);
        let mut contrast_terms = Vec::with_capacity(factor_vars.len());
        let mut images = Vec::with_capacity(factor_vars.len());
        let mut centroid_images = Vec::with_capacity(factor_vars.len());
        for (m, fv) in factor_vars.iter().enumerate() {
            let w_view = vars[self.model.view_w[m].0];
            let zhat = encoder::view_image_rows(tape, fv, w_view, views.restricted[m], &self.diag);
            let phi_hat = encoder::view_image_rows(tape, fv, w_view, centroid_blocks[m], &self.diag);

            // node-to-node: both softmax directions over the same grid
            let g_nn = similarity_grid(tape, zhat, critic, views.free);
            let w_nn = if cfg.reweight_grad {
                WeightGrid::OnTape(n2n_weights_on_tape(tape, membership, g_nn, cfg.beta))
            } else {
                let w = match frozen {
                    Some(auxf) => auxf.n2n[m].clone(),
                    None => n2n_weights_detached(
                        agreement.as_ref().expect("detached path"),
                        &tape.value(g_nn),
                        cfg.beta,
                    ),
                };
                aux.n2n.push(w.clone());
                WeightGrid::Detached(w)
            };
            let nn_logits = reweighted_logits(tape, g_nn, &w_nn);
            let l_nn_fwd = n2n_loss(tape, nn_logits, ContrastDirection::RowAnchors);
            let l_nn_rev = n2n_loss(tape, nn_logits, ContrastDirection::ColumnAnchors);

            // node-to-cluster: restricted nodes vs free centroids, and free
            // nodes vs imaged restricted centroids
            let g_fwd = similarity_grid(tape, zhat, critic, centroid_free);
            let g_rev = similarity_grid(tape, views.free, tape.transpose(critic), phi_hat);
            let (w_fwd, w_rev) = if cfg.reweight_grad {
                (
                    WeightGrid::OnTape(n2c_weights_on_tape(tape, membership, g_fwd, cfg.beta)),
                    WeightGrid::OnTape(n2c_weights_on_tape(tape, membership, g_rev, cfg.beta)),
                )
            } else {
                let (wf, wr) = match frozen {
                    Some(auxf) => (auxf.n2c_fwd[m].clone(), auxf.n2c_rev[m].clone()),
                    None => (
                        n2c_weights_detached(&membership_value, &tape.value(g_fwd), cfg.beta),
                        n2c_weights_detached(&membership_value, &tape.value(g_rev), cfg.beta),
                    ),
                };
                aux.n2c_fwd.push(wf.clone());
                aux.n2c_rev.push(wr.clone());
                (WeightGrid::Detached(wf), WeightGrid::Detached(wr))
            };
            let l_nc_fwd = n2c_loss(tape, reweighted_logits(tape, g_fwd, &w_fwd), &pos_rc);
            let l_nc_rev = n2c_loss(tape, reweighted_logits(tape, g_rev, &w_rev), &pos_rc);

            let factor_total = tape.add(tape.add(l_nn_fwd, l_nn_rev), tape.add(l_nc_fwd, l_nc_rev));
            l_rgc = tape.add(l_rgc, factor_total);
            contrast_terms.push([l_nn_fwd, l_nn_rev, l_nc_fwd, l_nc_rev]);
            images.push(zhat);
            centroid_images.push(phi_hat);
        }

        let j = total_loss(tape, l_ric, l_curv, l_rgc, cfg.alpha1, cfg.alpha2);
        Ok(ForwardPass {
            j,
            l_ric,
            l_curv,
            l_rgc,
            membership,
            views,
            contrast_terms,
            images,
            centroid_images,
            curvature_estimates,
            aux,
        })
    }

    /// Encode + soft-assign only (no losses, no Ricci table needed).
    pub fn evaluate(&self) -> ClusterState {
        let tape = Tape::new();
        let vars = self.store.register_all(&tape);
        let factor_vars = factor_vars(&tape, &self.manifold, &self.model.mag_refs, &vars);
        let x = tape.constant(self.graph.features().clone());
        let views = encoder::encode(&tape, &self.model.encoder, &vars, &factor_vars, x, &self.idx, &self.diag);
        let centroid_blocks: Vec<Var> =
            self.model.centroid_blocks.iter().map(|r| vars[r.0]).collect();
        let assignment = soft_assign(
            &tape,
            &factor_vars,
            views.free,
            &views.restricted,
            vars[self.model.centroid_free.0],
            &centroid_blocks,
        );
        ClusterState { centroids: self.centroids(), membership: tape.value(assignment.membership) }
    }

    /// Centroids as product points, read from the parameter store.
    pub fn centroids(&self) -> Vec<ProductPoint> {
        let free = self.store.get(self.model.centroid_free);
        (0..self.config.k)
            .map(|k| ProductPoint {
                free: free.row_slice(k).to_vec(),
                restricted: self
                    .model
                    .centroid_blocks
                    .iter()
                    .map(|r| self.store.get(*r).row_slice(k).to_vec())
                    .collect(),
            })
            .collect()
    }

    fn score(&self, epoch: usize, j: f64, l_ric: f64, l_curv: f64, l_rgc: f64, membership: &Tensor) -> EpochRecord {
        let hard: Vec<usize> = (0..membership.rows()).map(|r| membership.argmax_row(r)).collect();
        let density = metrics::cluster_density(&self.graph, &hard);
        let (nmi, ari, acc, entropy) = match self.graph.labels() {
            Some(truth) => (
                metrics::nmi(&hard, truth).ok(),
                metrics::ari(&hard, truth).ok(),
                metrics::acc(&hard, truth).ok(),
                Some(metrics::cluster_entropy(&hard, truth)),
            ),
            None => (None, None, None, None),
        };
        EpochRecord { epoch, j, l_ric, l_curv, l_rgc, nmi, ari, acc, density, entropy }
    }

    /// Runs the training loop. With `epochs = 0` a single evaluation record
    /// (epoch 0) is produced and nothing is updated. Training aborts with
    /// the last finite state when J stops being finite.
    pub fn train(&mut self) -> Result<TrainOutcome, TrainError> {
        if self.edge_data.is_none() {
            return Err(TrainError::MissingRicciTable);
        }
        let mut adam = AdamState::new(
            &self.store,
            AdamConfig {
                lr: self.config.lr,
                beta1: self.config.beta1,
                beta2: self.config.beta2,
                eps: self.config.eps,
            },
        );
        let mut records = Vec::new();

        if self.config.epochs == 0 {
            let tape = Tape::new();
            let vars = self.store.register_all(&tape);
            let fp = self.forward_losses(&tape, &vars, None)?;
            records.push(self.score(
                0,
                tape.scalar_value(fp.j),
                tape.scalar_value(fp.l_ric),
                tape.scalar_value(fp.l_curv),
                tape.scalar_value(fp.l_rgc),
                &tape.value(fp.membership),
            ));
            return Ok(TrainOutcome { records, diverged_at: None });
        }

        for epoch in 1..=self.config.epochs {
            let tape = Tape::new();
            let vars = self.store.register_all(&tape);
            let fp = self.forward_losses(&tape, &vars, None)?;
            let j = tape.scalar_value(fp.j);
            records.push(self.score(
                epoch,
                j,
                tape.scalar_value(fp.l_ric),
                tape.scalar_value(fp.l_curv),
                tape.scalar_value(fp.l_rgc),
                &tape.value(fp.membership),
            ));
            if !j.is_finite() {
                return Ok(TrainOutcome { records, diverged_at: Some(epoch) });
            }
            let grads = tape.backward(fp.j)?;
            adam.step(&mut self.store, &vars, &grads);
            self.sync_manifold();
            retract_centroids(&mut self.store, &self.manifold, &self.model.centroid_blocks)?;
        }
        Ok(TrainOutcome { records, diverged_at: None })
    }

    /// Copies post-step curvature magnitudes back into the manifold
    /// descriptor (single writer: only the trainer mutates them).
    fn sync_manifold(&mut self) {
        for (factor, r) in self.manifold.restricted.iter_mut().zip(&self.model.mag_refs) {
            factor.set_magnitude_param(self.store.scalar(*r));
        }
    }

    pub fn checkpoint_meta(&self) -> checkpoint::CheckpointMeta {
        let (free_dim, factors) = self.manifold.signature();
        checkpoint::CheckpointMeta {
            free_dim,
            factors,
            k: self.config.k,
            feature_dim: self.graph.num_features(),
        }
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<(), checkpoint::CheckpointError> {
        checkpoint::save(path, &self.manifold, self.config.k, self.graph.num_features(), &self.store)
    }

    /// Loads parameter values and syncs curvature magnitudes.
    pub fn load_checkpoint(&mut self, path: &std::path::Path) -> Result<(), checkpoint::CheckpointError> {
        let meta = self.checkpoint_meta();
        checkpoint::load(path, &meta, &mut self.store)?;
        self.sync_manifold();
        Ok(())
    }
}

/// Builds the per-factor curvature scalars from the magnitude leaves.
pub fn factor_vars(
    tape: &Tape,
    manifold: &ProductManifold,
    mag_refs: &[ParamRef],
    vars: &[Var],
) -> Vec<FactorVars> {
    manifold
        .restricted
        .iter()
        .zip(mag_refs)
        .map(|(f, r)| FactorVars::new(tape, f.sign(), vars[r.0]))
        .collect()
}
