use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::config::DlrmConfig;
use super::interaction::{interaction, interaction_backward};
use super::loss::bce_loss;
use super::shard::{redistribute_backward, redistribute_forward, CommVariant, TableShard};
use crate::comms::{CollectiveHandle, RankContext};
use crate::embedding::{embedding_backward, EmbeddingTable, LookupBatch, SparseGrad, UpdateStrategy};
use crate::error::{Error, Result};
use crate::mlp::{Activation, FcGrad, Mlp};
use crate::optim::{OptimizerState, ParamId, PrecisionMode, SparseTable};
use crate::tensor::DenseTensor;

/// Dense features, one lookup batch per table, and binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniBatch {
    pub dense: DenseTensor,
    pub lookups: Vec<LookupBatch>,
    pub labels: Vec<f32>,
}

impl MiniBatch {
    pub fn new(dense: DenseTensor, lookups: Vec<LookupBatch>, labels: Vec<f32>) -> Result<Self> {
        let (n, _) = dense.dims2()?;
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for {n} samples", labels.len())));
        }
        if let Some((t, l)) = lookups.iter().enumerate().find(|(_, l)| l.batch_size() != n) {
            return Err(Error::shape(format!(
                "table {t} has {} bags for {n} samples",
                l.batch_size()
            )));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::InvalidBatch("labels must be 0 or 1".into()));
        }
        Ok(Self { dense, lookups, labels })
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    /// Samples `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> MiniBatch {
        let d = self.dense.shape()[1];
        MiniBatch {
            dense: DenseTensor::from_vec(&[len, d], self.dense.data()[start * d..(start + len) * d].to_vec())
                .expect("slice within batch"),
            lookups: self.lookups.iter().map(|l| l.slice_bags(start, start + len)).collect(),
            labels: self.labels[start..start + len].to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub precision: PrecisionMode,
    pub lr: f32,
    pub strategy: UpdateStrategy,
    /// Threads used by the sparse update.
    pub update_threads: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            precision: PrecisionMode::Fp32,
            lr: 0.1,
            strategy: UpdateStrategy::RaceFreePartitioned,
            update_threads: rayon::current_num_threads(),
        }
    }
}

/// Wall time of each phase of one step, in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub bottom_fwd: f64,
    pub emb_fwd: f64,
    pub exchange_fwd: f64,
    pub interaction_fwd: f64,
    pub top_fwd: f64,
    pub loss: f64,
    pub top_bwd: f64,
    pub interaction_bwd: f64,
    pub exchange_bwd: f64,
    pub bottom_bwd: f64,
    pub emb_bwd: f64,
    pub emb_update: f64,
    pub allreduce_issue: f64,
    pub allreduce_wait: f64,
    pub dense_update: f64,
    pub total: f64,
}

impl PhaseTimes {
    pub fn components(&self) -> [(&'static str, f64); 15] {
        [
            ("bottom_fwd", self.bottom_fwd),
            ("emb_fwd", self.emb_fwd),
            ("exchange_fwd", self.exchange_fwd),
            ("interaction_fwd", self.interaction_fwd),
            ("top_fwd", self.top_fwd),
            ("loss", self.loss),
            ("top_bwd", self.top_bwd),
            ("interaction_bwd", self.interaction_bwd),
            ("exchange_bwd", self.exchange_bwd),
            ("bottom_bwd", self.bottom_bwd),
            ("emb_bwd", self.emb_bwd),
            ("emb_update", self.emb_update),
            ("allreduce_issue", self.allreduce_issue),
            ("allreduce_wait", self.allreduce_wait),
            ("dense_update", self.dense_update),
        ]
    }

    pub fn component_sum(&self) -> f64 {
        self.components().iter().map(|c| c.1).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Mean loss over the global minibatch.
    pub loss: f32,
    pub times: PhaseTimes,
}

/// Gradients of the mean loss, as produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    /// Bottom layers first, then top layers.
    pub dense: Vec<FcGrad>,
    /// One per owned table.
    pub tables: Vec<SparseGrad>,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

enum PendingGrad {
    Ready(FcGrad),
    InFlight(FcGrad, CollectiveHandle<Vec<f32>>),
}

/// One model replica: both MLPs plus the tables this rank owns.
pub struct Dlrm {
    config: DlrmConfig,
    shard: TableShard,
    rank: usize,
    bottom: Mlp,
    top: Mlp,
    tables: Vec<SparseTable>,
    opt: OptimizerState,
    options: TrainOptions,
}

fn table_seed(seed: u64, t: usize) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(t as u64 + 1)
}

impl Dlrm {
    /// Builds the replica for `rank`. Parameters depend only on `seed`, so
    /// every rank agrees on the MLPs and each table is the same wherever it
    /// lives.
    pub fn new(config: DlrmConfig, seed: u64, options: TrainOptions, shard: TableShard, rank: usize) -> Result<Self> {
        config.validate()?;
        if shard.tables() != config.tables {
            return Err(Error::config(format!(
                "shard covers {} tables, model has {}",
                shard.tables(),
                config.tables
            )));
        }
        if rank >= shard.world() {
            return Err(Error::config(format!("rank {rank} outside world of {}", shard.world())));
        }
        if options.update_threads == 0 {
            return Err(Error::config("update_threads must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bottom = Mlp::random(&config.bottom_mlp, config.block, |_| Activation::Relu, &mut rng)?;
        let top_widths = config.top_widths();
        let last = top_widths.len() - 2;
        let top = Mlp::random(
            &top_widths,
            config.block,
            |l| {
                if l == last {
                    Activation::Sigmoid
                } else {
                    Activation::Relu
                }
            },
            &mut rng,
        )?;
        let mut model = Dlrm {
            shard,
            rank,
            bottom,
            top,
            tables: Vec::new(),
            opt: OptimizerState::new(options.precision, options.lr),
            options,
            config,
        };
        let nlayers = model.num_layers();
        let layers = model
            .bottom
            .layers_mut()
            .iter_mut()
            .chain(model.top.layers_mut().iter_mut());
        for (l, layer) in layers.enumerate() {
            let (w, b) = layer.params_mut();
            model.opt.register_dense(ParamId(2 * l as u32), w)?;
            model.opt.register_dense(ParamId(2 * l as u32 + 1), b)?;
        }
        let bound = (1.0 / model.config.rows as f64).sqrt() as f32;
        let init = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::config(e.to_string()))?;
        for t in model.shard.owned(rank) {
            let mut trng = ChaCha8Rng::seed_from_u64(table_seed(seed, t));
            let (m, e) = (model.config.rows, model.config.dim);
            let data: Vec<f32> = (0..m * e).map(|_| init.sample(&mut trng)).collect();
            let table = EmbeddingTable::new(DenseTensor::from_vec(&[m, e], data)?)?;
            model
                .tables
                .push(model.opt.register_table(ParamId((2 * nlayers + t) as u32), table)?);
        }
        Ok(model)
    }

    /// Single-process model holding every table.
    pub fn new_local(config: DlrmConfig, seed: u64, options: TrainOptions) -> Result<Self> {
        let shard = TableShard::new(config.tables, 1)?;
        Self::new(config, seed, options, shard, 0)
    }

    pub fn config(&self) -> &DlrmConfig {
        &self.config
    }

    pub fn shard(&self) -> &TableShard {
        &self.shard
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn options(&self) -> &TrainOptions {
        &self.options
    }

    pub fn set_strategy(&mut self, strategy: UpdateStrategy, threads: usize) {
        self.options.strategy = strategy;
        self.options.update_threads = threads.max(1);
    }

    pub fn bottom(&self) -> &Mlp {
        &self.bottom
    }

    pub fn top(&self) -> &Mlp {
        &self.top
    }

    /// Owned tables in ascending table order.
    pub fn tables(&self) -> &[SparseTable] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [SparseTable] {
        &mut self.tables
    }

    pub fn num_layers(&self) -> usize {
        self.bottom.layers().len() + self.top.layers().len()
    }

    /// Layer `l` counting bottom layers first.
    pub fn layer_mut(&mut self, l: usize) -> &mut crate::mlp::FcLayer {
        let nb = self.bottom.layers().len();
        if l < nb {
            &mut self.bottom.layers_mut()[l]
        } else {
            &mut self.top.layers_mut()[l - nb]
        }
    }

    pub fn layer(&self, l: usize) -> &crate::mlp::FcLayer {
        let nb = self.bottom.layers().len();
        if l < nb {
            &self.bottom.layers()[l]
        } else {
            &self.top.layers()[l - nb]
        }
    }

    /// Number of dense parameters, the length of the gradient allreduce.
    pub fn dense_param_count(&self) -> usize {
        self.bottom.num_params() + self.top.num_params()
    }

    /// FP32 master values of all dense parameters in layer order.
    pub fn dense_master(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.dense_param_count());
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l).params();
            out.extend(self.opt.master_dense(ParamId(2 * l as u32), w).expect("registered"));
            out.extend(self.opt.master_dense(ParamId(2 * l as u32 + 1), b).expect("registered"));
        }
        out
    }

    /// FNV-1a over the bit patterns of [`Self::dense_master`].
    pub fn dense_checksum(&self) -> u64 {
        self.dense_master().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            v.to_bits()
                .to_le_bytes()
                .iter()
                .fold(h, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
        })
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.opt
    }

    /// Bytes of table storage on this rank.
    pub fn table_storage_bytes(&self) -> usize {
        self.tables.iter().map(SparseTable::storage_bytes).sum()
    }

    /// Click probabilities for a batch (single-process models only).
    pub fn predict(&self, batch: &MiniBatch) -> Result<Vec<f32>> {
        self.require_local()?;
        let (bot, _) = self.bottom.forward(&batch.dense)?;
        let emb = self.forward_tables(batch)?;
        let z = interaction(self.config.interaction, &bot, &emb)?;
        Ok(self.top.forward(&z)?.0.into_vec())
    }

    /// Mean loss without updating anything (single-process models only).
    pub fn loss(&self, batch: &MiniBatch) -> Result<f32> {
        Ok(bce_loss(&self.predict(batch)?, &batch.labels)?.mean)
    }

    /// Loss and gradients without updating (single-process models only).
    pub fn gradients(&mut self, batch: &MiniBatch) -> Result<(f32, Gradients)> {
        let (report, grads) = self.step_impl(None, batch, CommVariant::Alltoall, true, false)?;
        Ok((report.loss, grads.expect("gradients requested")))
    }

    pub fn train_step_local(&mut self, batch: &MiniBatch) -> Result<StepReport> {
        Ok(self.step_impl(None, batch, CommVariant::Alltoall, true, true)?.0)
    }

    /// One hybrid-parallel step. `batch` is the global minibatch; this rank
    /// uses its sample slice for the MLPs and the full batch for its tables.
    /// With `blocking == false`, each layer's gradient allreduce is issued as
    /// soon as backward produces it and awaited just before the update.
    pub fn train_step_distributed(
        &mut self,
        ctx: &RankContext,
        batch: &MiniBatch,
        variant: CommVariant,
        blocking: bool,
    ) -> Result<StepReport> {
        Ok(self.step_impl(Some(ctx), batch, variant, blocking, true)?.0)
    }

    fn require_local(&self) -> Result<()> {
        if self.shard.world() != 1 {
            return Err(Error::config("operation needs a single-process model"));
        }
        Ok(())
    }

    fn forward_tables(&self, batch: &MiniBatch) -> Result<Vec<DenseTensor>> {
        if batch.lookups.len() != self.config.tables {
            return Err(Error::shape(format!(
                "{} lookup batches for {} tables",
                batch.lookups.len(),
                self.config.tables
            )));
        }
        self.shard
            .owned(self.rank)
            .into_iter()
            .zip(&self.tables)
            .map(|(t, table)| table.forward(&batch.lookups[t]))
            .collect()
    }

    fn step_impl(
        &mut self,
        ctx: Option<&RankContext>,
        batch: &MiniBatch,
        variant: CommVariant,
        blocking: bool,
        apply: bool,
    ) -> Result<(StepReport, Option<Gradients>)> {
        let start = Instant::now();
        let mut tm = PhaseTimes::default();
        let world = ctx.map_or(1, RankContext::world_size);
        let me = ctx.map_or(0, RankContext::rank);
        if world != self.shard.world() || me != self.rank {
            return Err(Error::CollectiveMismatch(format!(
                "model built for rank {} of {}, context is rank {me} of {world}",
                self.rank,
                self.shard.world()
            )));
        }
        let gn = batch.batch_size();
        if gn == 0 || !gn.is_multiple_of(world) {
            return Err(Error::InvalidBatch(format!(
                "global batch {gn} does not split over {world} ranks"
            )));
        }
        let n = gn / world;
        let dim = self.config.dim;
        let local = if world == 1 { None } else { Some(batch.slice(me * n, n)) };
        let local = local.as_ref().unwrap_or(batch);

        let t = Instant::now();
        let (bot_out, bot_cache) = self.bottom.forward(&local.dense)?;
        tm.bottom_fwd = ms_since(t);

        let t = Instant::now();
        let owned_out = self.forward_tables(batch)?;
        tm.emb_fwd = ms_since(t);

        let t = Instant::now();
        let emb = match ctx {
            Some(c) => redistribute_forward(c, &self.shard, variant, &owned_out, n, dim)?,
            None => owned_out,
        };
        tm.exchange_fwd = ms_since(t);

        let t = Instant::now();
        let z = interaction(self.config.interaction, &bot_out, &emb)?;
        tm.interaction_fwd = ms_since(t);

        let t = Instant::now();
        let (pred, top_cache) = self.top.forward(&z)?;
        tm.top_fwd = ms_since(t);

        let t = Instant::now();
        let bce = bce_loss(pred.data(), &local.labels)?;
        let d_pred = DenseTensor::from_vec(&[n, 1], bce.grad)?;
        tm.loss = ms_since(t);

        let nb = self.bottom.layers().len();
        let mut pending: Vec<Option<PendingGrad>> = (0..self.num_layers()).map(|_| None).collect();
        let issue_ms = std::cell::Cell::new(0.0f64);
        let mut issue = |l: usize, g: FcGrad| -> Result<()> {
            let t = Instant::now();
            pending[l] = Some(match ctx {
                Some(c) => {
                    let flat = g.to_flat();
                    let pre = ms_since(t);
                    let mut h = c.allreduce(flat, blocking, &format!("grad-{l}"))?;
                    h.add_pre_ms(pre);
                    PendingGrad::InFlight(g, h)
                }
                None => PendingGrad::Ready(g),
            });
            issue_ms.set(issue_ms.get() + ms_since(t));
            Ok(())
        };

        let t = Instant::now();
        let dz = self
            .top
            .backward_each(&top_cache, &d_pred, true, |l, g| issue(nb + l, g))?
            .expect("input gradient requested");
        let top_issue = issue_ms.get();
        tm.top_bwd = ms_since(t) - top_issue;

        let t = Instant::now();
        let (d_bot, d_emb) = interaction_backward(self.config.interaction, &bot_out, &emb, &dz)?;
        tm.interaction_bwd = ms_since(t);

        let t = Instant::now();
        let owned_grads = match ctx {
            Some(c) => redistribute_backward(c, &self.shard, variant, &d_emb, n, dim)?,
            None => d_emb,
        };
        tm.exchange_bwd = ms_since(t);

        let t = Instant::now();
        self.bottom.backward_each(&bot_cache, &d_bot, false, issue)?;
        tm.allreduce_issue = issue_ms.get();
        tm.bottom_bwd = ms_since(t) - (tm.allreduce_issue - top_issue);

        let t = Instant::now();
        let owned = self.shard.owned(me);
        let sparse = owned
            .iter()
            .zip(&owned_grads)
            .map(|(&t, g)| embedding_backward(g, &batch.lookups[t]))
            .collect::<Result<Vec<_>>>()?;
        tm.emb_bwd = ms_since(t);

        if apply {
            let t = Instant::now();
            let scale = 1.0 / world as f32;
            for (table, g) in self.tables.iter_mut().zip(&sparse) {
                self.opt
                    .step_sparse(table, g, scale, self.options.strategy, self.options.update_threads)?;
            }
            tm.emb_update = ms_since(t);
        }

        let t = Instant::now();
        let mut grads = Vec::with_capacity(pending.len());
        for p in pending {
            match p.expect("every layer produced a gradient") {
                PendingGrad::Ready(g) => grads.push(g),
                PendingGrad::InFlight(mut g, mut h) => {
                    let c = ctx.expect("in-flight gradients need a context");
                    c.wait_post(&mut h, |buf| {
                        for v in buf.iter_mut() {
                            *v /= world as f32;
                        }
                    })?;
                    g.copy_from_flat(&h.into_result()?)?;
                    grads.push(g);
                }
            }
        }
        tm.allreduce_wait = ms_since(t);

        let loss = match ctx {
            Some(c) => {
                let mut h = c.allreduce(vec![bce.sum], true, "loss")?;
                c.wait(&mut h)?;
                h.into_result()?[0] / gn as f32
            }
            None => bce.sum / gn as f32,
        };

        let out_grads = if apply {
            let t = Instant::now();
            let nb = self.bottom.layers().len();
            let layers = self
                .bottom
                .layers_mut()
                .iter_mut()
                .chain(self.top.layers_mut().iter_mut());
            for (l, (layer, g)) in layers.zip(&grads).enumerate() {
                let (w, b) = layer.params_mut();
                self.opt.step_dense(ParamId(2 * l as u32), w, g.dw.data())?;
                self.opt.step_dense(ParamId(2 * l as u32 + 1), b, g.db.data())?;
            }
            debug_assert_eq!(nb + self.top.layers().len(), grads.len());
            tm.dense_update = ms_since(t);
            None
        } else {
            Some(Gradients {
                dense: grads,
                tables: sparse,
            })
        };
        tm.total = ms_since(start);
        Ok((StepReport { loss, times: tm }, out_grads))
    }
}
