//! Round orchestration: broadcast, personalization by mask, local training
//! epochs, the pruning phase, report collection, aggregation, and metric
//! recording.

use ndarray::Array2;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agg::{self, create_strategy, AggInputs, ClientReport};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::losses::{
    build_bank, camera_aware_loss, inter_loss, intra_loss, kll_from_embeddings, memory_update,
    total_loss, LossWeights,
};
use crate::nnet::{adam_step, backward_cached, forward, forward_cached, AdamState, NetConfig};
use crate::params::{apply_mask, pruning_ratio, ParamVector, PruneMask};
use crate::prune::{magnitude_prune, GateAction, PruneGate, Stage2Decision};
use crate::pseudo::{assign_proxies, dbscan};
use crate::seeding::{derive_seed, stream};
use crate::synthdata::{evaluate_retrieval, generate_clients, ClientDataset};
use crate::wire::{dense_model_bytes, encode, SparseModelMessage};

/// Per-round, per-client metrics that land in the run log.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundStats {
    pub client_id: usize,
    pub rank1: f64,
    pub map: f64,
    pub pruning_ratio: f64,
    pub klaw_raw: f64,
    pub weight: f64,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    /// Pruning-gate outcome, one token plus key=value details.
    pub decision: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<ClientRoundStats>,
    pub global_checksum: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub final_global: ParamVector,
}

/// Hook called once per round at the aggregation barrier.
pub trait RoundObserver {
    fn on_round(
        &mut self,
        _round: usize,
        _reports: &[ClientReport],
        _weights: &[f64],
        _global: &ParamVector,
    ) {
    }
}

pub struct NoopObserver;

impl RoundObserver for NoopObserver {}

struct ClientState {
    id: usize,
    data: ClientDataset,
    /// Row indices of the training (= gallery) samples.
    train_rows: Vec<usize>,
    train_inputs: Array2<f64>,
    train_cams: Vec<usize>,
    all_inputs: Array2<f64>,
    /// Frozen validation batch used for KLAW and the cosine baseline.
    val_batch: Array2<f64>,
    mask: PruneMask,
    gate: PruneGate,
}

impl ClientState {
    fn new(cfg: &ExperimentConfig, id: usize, data: ClientDataset, model: &ParamVector) -> Self {
        let train_rows: Vec<usize> = (0..data.len()).filter(|&i| !data.is_query[i]).collect();
        let train_inputs = select_rows_f64(&data.samples, &train_rows);
        let train_cams: Vec<usize> = train_rows.iter().map(|&i| data.camera[i]).collect();
        let all_inputs = data.samples.mapv(f64::from);

        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[stream::VALIDATION, id as u64]));
        let take = cfg.data.validation_batch.min(train_rows.len());
        let mut picks = train_rows.clone();
        for i in 0..take {
            let j = rand::Rng::gen_range(&mut rng, i..picks.len());
            picks.swap(i, j);
        }
        let val_batch = select_rows_f64(&data.samples, &picks[..take]);

        ClientState {
            id,
            train_rows,
            train_inputs,
            train_cams,
            all_inputs,
            val_batch,
            mask: PruneMask::all_ones(model),
            gate: PruneGate::new(cfg.crr_state(), cfg.controller_state()),
            data,
        }
    }

    fn eval(&self, net: &NetConfig, model: &ParamVector) -> Result<(f64, f64)> {
        let emb = forward(net, model, &self.all_inputs)?;
        let m = evaluate_retrieval(
            &emb,
            &self.data.identity,
            &self.data.camera,
            &self.data.is_query,
        )?;
        Ok((m.rank1, m.map))
    }
}

fn select_rows_f64(samples: &Array2<f32>, rows: &[usize]) -> Array2<f64> {
    let d = samples.ncols();
    let mut out = Array2::zeros((rows.len(), d));
    for (r, &i) in rows.iter().enumerate() {
        for c in 0..d {
            out[[r, c]] = f64::from(samples[[i, c]]);
        }
    }
    out
}

/// Unit-norm mean embedding of a batch under a model.
fn mean_unit_embedding(
    net: &NetConfig,
    model: &ParamVector,
    batch: &Array2<f64>,
) -> Result<Vec<f64>> {
    let emb = forward(net, model, batch)?;
    let d = emb.ncols();
    let mut mean = vec![0.0f64; d];
    for r in 0..emb.nrows() {
        for c in 0..d {
            mean[c] += emb[[r, c]] / emb.nrows() as f64;
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        mean.iter_mut().for_each(|v| *v = 0.0);
        mean[0] = 1.0;
    } else {
        mean.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(mean)
}

/// One local epoch: re-cluster, rebuild the bank, then minibatch steps on
/// the total objective. Returns false when clustering marked everything as
/// outliers and the epoch was skipped.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    cfg: &ExperimentConfig,
    net: &NetConfig,
    w: &LossWeights,
    inputs: &Array2<f64>,
    cams: &[usize],
    mask: &PruneMask,
    model: &mut ParamVector,
    adam: &mut AdamState,
    reference: &ParamVector,
    seed: u64,
) -> Result<bool> {
    let emb_all = forward(net, model, inputs)?;
    let pids = dbscan(&emb_all, cfg.clustering.eps, cfg.clustering.min_pts)?;
    let lab = match assign_proxies(&pids, cams) {
        Ok(l) => l,
        Err(Error::EmptyEpoch) => return Ok(false),
        Err(e) => return Err(e),
    };
    let mut bank = build_bank(&emb_all, &lab, cfg.losses.momentum, cfg.losses.tau)?;

    let mut order: Vec<usize> = (0..inputs.nrows())
        .filter(|&i| lab.proxy[i].is_some())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    for batch_rows in order.chunks(cfg.batch_size) {
        let x = select_rows_view(inputs, batch_rows);
        let cache = forward_cached(net, model, &x)?;
        let proxies: Vec<usize> = batch_rows.iter().map(|&i| lab.proxy[i].unwrap()).collect();
        let bcams: Vec<usize> = batch_rows.iter().map(|&i| lab.camera_idx[i]).collect();

        let intra = intra_loss(&bank, &cache.embeddings, &proxies, &bcams, &lab)?;
        let inter = inter_loss(&bank, &cache.embeddings, &proxies, &lab, w.k_hard)?;
        let ca = camera_aware_loss(&bank, &cache.embeddings, &proxies, &bcams, &lab, w.k_hard)?;
        let ref_dist = agg::feature_distribution(&forward(net, reference, &x)?)?;
        let kl = kll_from_embeddings(&cache.embeddings, &ref_dist)?;

        let (_, grad_emb) = total_loss(w, &intra, &inter, &ca, &kl);
        let grads = backward_cached(net, model, &cache, &grad_emb)?;
        adam_step(adam, model, &grads, mask)?;

        for (bi, _) in batch_rows.iter().enumerate() {
            memory_update(&mut bank, proxies[bi], cache.embeddings.row(bi))?;
        }
    }
    Ok(true)
}

fn select_rows_view(inputs: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let d = inputs.ncols();
    let mut out = Array2::zeros((rows.len(), d));
    for (r, &i) in rows.iter().enumerate() {
        for c in 0..d {
            out[[r, c]] = inputs[[i, c]];
        }
    }
    out
}

struct ClientRoundOutcome {
    report: ClientReport,
    rank1: f64,
    map: f64,
    decision: String,
    prev_feat: Vec<f64>,
    new_feat: Vec<f64>,
}

/// The full client-side round: E local epochs, the CRR-gated pruning phase
/// with a one-epoch fine-tune, KLAW against the received personalized model,
/// then the report.
fn client_round(
    cfg: &ExperimentConfig,
    net: &NetConfig,
    w: &LossWeights,
    st: &mut ClientState,
    received: ParamVector,
    round: usize,
) -> Result<ClientRoundOutcome> {
    let reference = received.clone();
    let mut model = received;
    let mut adam = AdamState::new(
        &model,
        cfg.optimizer.lr,
        cfg.optimizer.beta1,
        cfg.optimizer.beta2,
        cfg.optimizer.eps,
    );

    let mut skipped_epochs = 0usize;
    for epoch in 0..cfg.local_epochs {
        let seed = derive_seed(
            cfg.seed,
            &[stream::EPOCH, st.id as u64, round as u64, epoch as u64],
        );
        let trained = run_epoch(
            cfg,
            net,
            w,
            &st.train_inputs,
            &st.train_cams,
            &st.mask,
            &mut model,
            &mut adam,
            &reference,
            seed,
        )?;
        if !trained {
            skipped_epochs += 1;
        }
    }

    let (acc_pre, map_pre) = st.eval(net, &model)?;
    let (mut rank1, mut map) = (acc_pre, map_pre);
    let mut decision = if cfg.pruning.enabled {
        match st.gate.begin_round(acc_pre) {
            GateAction::Halted => "halted".to_string(),
            GateAction::Skip => "skip".to_string(),
            GateAction::Prune { target } => {
                // the optimizer state is per-round, so the snapshot only
                // needs what survives the round
                let snapshot = (model.clone(), st.mask.clone());
                st.mask = magnitude_prune(&model, &st.mask, target)?;
                model = apply_mask(&model, &st.mask)?;
                let seed = derive_seed(
                    cfg.seed,
                    &[
                        stream::EPOCH,
                        st.id as u64,
                        round as u64,
                        cfg.local_epochs as u64,
                    ],
                );
                let trained = run_epoch(
                    cfg,
                    net,
                    w,
                    &st.train_inputs,
                    &st.train_cams,
                    &st.mask,
                    &mut model,
                    &mut adam,
                    &reference,
                    seed,
                )?;
                if !trained {
                    skipped_epochs += 1;
                }
                let (acc_post, map_post) = st.eval(net, &model)?;
                let s2 = st.gate.stage2(acc_post)?;
                let outcome = match s2 {
                    Stage2Decision::Commit => {
                        rank1 = acc_post;
                        map = map_post;
                        "commit"
                    }
                    Stage2Decision::Rollback => {
                        model = snapshot.0;
                        st.mask = snapshot.1;
                        "rollback"
                    }
                };
                let ratio_now = pruning_ratio(&st.mask)?;
                st.gate.record_outcome(s2, ratio_now);
                format!("prune target={target:.4} outcome={outcome} pre={acc_pre:.4} post={acc_post:.4}")
            }
        }
    } else {
        "disabled".to_string()
    };
    if skipped_epochs > 0 {
        decision.push_str(&format!(" skipped_epochs={skipped_epochs}"));
    }

    let klaw = agg::klaw_raw(net, &reference, &model, &st.val_batch)?;
    let prev_feat = mean_unit_embedding(net, &reference, &st.val_batch)?;
    let new_feat = mean_unit_embedding(net, &model, &st.val_batch)?;
    let ratio = pruning_ratio(&st.mask)?;
    let report = ClientReport {
        client_id: st.id as u16,
        model: apply_mask(&model, &st.mask)?,
        mask: st.mask.clone(),
        pruning_ratio: ratio as f32,
        klaw_raw: klaw as f32,
        dataset_size: st.train_rows.len(),
    };
    Ok(ClientRoundOutcome {
        report,
        rank1,
        map,
        decision,
        prev_feat,
        new_feat,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_experiment_with(cfg, &mut NoopObserver)
}

/// Runs the experiment on freshly generated synthetic clients, invoking
/// `obs` at every aggregation barrier.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    obs: &mut dyn RoundObserver,
) -> Result<RunOutput> {
    cfg.validate()?;
    let datasets = generate_clients(&cfg.skew_spec(), cfg.clients)?;
    run_experiment_on(cfg, datasets, obs)
}

/// Same protocol on caller-provided datasets (reproducibility audits and
/// degeneracy checks).
pub fn run_experiment_on(
    cfg: &ExperimentConfig,
    datasets: Vec<ClientDataset>,
    obs: &mut dyn RoundObserver,
) -> Result<RunOutput> {
    cfg.validate()?;
    if datasets.len() != cfg.clients {
        return Err(Error::Config(format!(
            "{} datasets provided for {} clients",
            datasets.len(),
            cfg.clients
        )));
    }
    let net = cfg.net_config();
    let weights_cfg = cfg.loss_weights();
    let strategy = create_strategy(
        &cfg.aggregation.strategy,
        cfg.aggregation.gamma,
        cfg.aggregation.delta,
    )?;

    let mut global = crate::nnet::init_params(&net);
    let mut clients: Vec<ClientState> = datasets
        .into_iter()
        .enumerate()
        .map(|(id, data)| ClientState::new(cfg, id, data, &global))
        .collect();

    let mut records = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let download_bytes = dense_model_bytes(&global);
        let personalized: Vec<ParamVector> = clients
            .iter()
            .map(|st| apply_mask(&global, &st.mask))
            .collect::<Result<_>>()?;

        let outcomes: Vec<Result<ClientRoundOutcome>> = if cfg.parallel_clients {
            std::thread::scope(|scope| {
                let handles: Vec<_> = clients
                    .iter_mut()
                    .zip(personalized)
                    .map(|(st, model)| {
                        let net = &net;
                        let w = &weights_cfg;
                        scope.spawn(move || client_round(cfg, net, w, st, model, round))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("client worker panicked"))
                    .collect()
            })
        } else {
            clients
                .iter_mut()
                .zip(personalized)
                .map(|(st, model)| client_round(cfg, &net, &weights_cfg, st, model, round))
                .collect()
        };
        let outcomes: Vec<ClientRoundOutcome> = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

        let reports: Vec<ClientReport> = outcomes.iter().map(|o| o.report.clone()).collect();
        let inputs = AggInputs {
            dataset_sizes: reports.iter().map(|r| r.dataset_size).collect(),
            pruning_ratios: reports.iter().map(|r| f64::from(r.pruning_ratio)).collect(),
            klaw_raws: reports.iter().map(|r| f64::from(r.klaw_raw)).collect(),
            prev_feats: outcomes.iter().map(|o| o.prev_feat.clone()).collect(),
            new_feats: outcomes.iter().map(|o| o.new_feat.clone()).collect(),
        };
        let weights = strategy.client_weights(&inputs)?;

        global = if cfg.aggregation.sas {
            agg::sas_aggregate(&reports, &weights, &global, cfg.aggregation.empty_coord)?
        } else {
            agg::dense_aggregate(&reports, &weights)?
        };
        obs.on_round(round, &reports, &weights, &global);

        let clients_stats: Vec<ClientRoundStats> = outcomes
            .iter()
            .zip(&weights)
            .map(|(o, &weight)| {
                let msg = SparseModelMessage::from_report(&o.report, round as u16)?;
                Ok(ClientRoundStats {
                    client_id: o.report.client_id as usize,
                    rank1: o.rank1,
                    map: o.map,
                    pruning_ratio: f64::from(o.report.pruning_ratio),
                    klaw_raw: f64::from(o.report.klaw_raw),
                    weight,
                    upload_bytes: encode(&msg).len() as u64,
                    download_bytes,
                    decision: o.decision.clone(),
                })
            })
            .collect::<Result<_>>()?;
        records.push(RoundRecord {
            round,
            clients: clients_stats,
            global_checksum: global.checksum(),
        });
    }
    Ok(RunOutput {
        records,
        final_global: global,
    })
}

/// Personalization is plain re-masking of the broadcast global model.
pub fn personalize(global: &ParamVector, client_mask: &PruneMask) -> Result<ParamVector> {
    apply_mask(global, client_mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[allow(clippy::field_reassign_with_default)]
    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.clients = 2;
        cfg.rounds = 2;
        cfg.local_epochs = 1;
        cfg.net.input_dim = 8;
        cfg.net.hidden_dims = vec![10];
        cfg.net.embed_dim = 4;
        cfg.data.identities_min = 3;
        cfg.data.identities_max = 4;
        cfg.data.images_per_identity_min = 4;
        cfg.data.images_per_identity_max = 6;
        cfg.data.cameras_max = 3;
        cfg.data.validation_batch = 8;
        cfg
    }

    #[test]
    fn personalize_with_all_ones_mask_is_identity() {
        let cfg = tiny_cfg();
        let net = cfg.net_config();
        let global = crate::nnet::init_params(&net);
        let mask = PruneMask::all_ones(&global);
        assert_eq!(personalize(&global, &mask).unwrap(), global);
    }

    #[test]
    fn personalize_rezeros_revived_coordinates() {
        let cfg = tiny_cfg();
        let net = cfg.net_config();
        let mut global = crate::nnet::init_params(&net);
        let mut mask = PruneMask::all_ones(&global);
        mask.layers[0].bits[0] = false;
        global.layers[0].values[0] = 5.0; // revived at the server
        let p = personalize(&global, &mask).unwrap();
        assert_eq!(p.layers[0].values[0], 0.0);
        assert_eq!(personalize(&p, &mask).unwrap(), p);
    }

    #[test]
    fn two_runs_are_identical() {
        let cfg = tiny_cfg();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.final_global, b.final_global);
    }

    #[test]
    fn parallel_mode_matches_sequential() {
        let mut cfg = tiny_cfg();
        let seq = run_experiment(&cfg).unwrap();
        cfg.parallel_clients = true;
        let par = run_experiment(&cfg).unwrap();
        assert_eq!(seq.records, par.records);
        assert_eq!(seq.final_global, par.final_global);
    }

    #[test]
    fn weights_sum_to_one_every_round() {
        let cfg = tiny_cfg();
        let out = run_experiment(&cfg).unwrap();
        for r in &out.records {
            let sum: f64 = r.clients.iter().map(|c| c.weight).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}
