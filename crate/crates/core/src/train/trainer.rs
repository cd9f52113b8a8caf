use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::optim::Sgd;
use crate::autodiff::Tape;
use crate::data::{batch_tensor, preprocess, SkeletonSequence};
use crate::error::{shape_err, Error, Result};
use crate::graph::{SkeletonGraph, SkeletonRef};
use crate::network::{Mode, Network, NormUpdate};

pub const METRICS_HEADER: &str = "epoch,lr,loss,acc";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.lr, self.loss, self.acc)
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Centres and resamples every sequence and checks it fits the network.
pub fn prepare(cfg: &TrainConfig, n_joints: usize, seqs: &[SkeletonSequence]) -> Result<Vec<SkeletonSequence>> {
    seqs.iter()
        .map(|s| {
            if s.n_joints != n_joints {
                return Err(shape_err(format!("sequence has {} joints, skeleton has {n_joints}", s.n_joints)));
            }
            if s.label >= cfg.network.n_classes {
                return Err(Error::InvalidLabel { label: s.label, n_classes: cfg.network.n_classes });
            }
            preprocess(s, cfg.frames, cfg.center_joint)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    net: Network,
    opt: Sgd,
    epoch: usize,
    metrics: Vec<EpochMetrics>,
}

impl Trainer {
    /// Fresh network initialised from `cfg.seed`. The configuration snapshot
    /// carries the skeleton inline so checkpoints are self-contained.
    pub fn new(mut cfg: TrainConfig, graph: SkeletonGraph) -> Result<Self> {
        cfg.network.skeleton = SkeletonRef::Inline(graph.to_def());
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = Network::new(cfg.network.clone(), graph, &mut rng)?;
        let opt = Sgd::new(net.params().len(), cfg.momentum, cfg.weight_decay, cfg.nesterov);
        Ok(Trainer { cfg, net, opt, epoch: 0, metrics: Vec::new() })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let net = ckpt.build_network()?;
        let cfg = ckpt.config.clone();
        let mut opt = Sgd::new(net.params().len(), cfg.momentum, cfg.weight_decay, cfg.nesterov);
        for (name, t) in &ckpt.momentum {
            let id = net
                .params()
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("momentum for unknown tensor {name}")))?;
            opt.set_buffer(id, t.clone());
        }
        Ok(Trainer { cfg, net, opt, epoch: ckpt.epoch, metrics: Vec::new() })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn metrics(&self) -> &[EpochMetrics] {
        &self.metrics
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let params = self.net.params();
        let momentum = params
            .trainable_ids()
            .into_iter()
            .filter_map(|id| self.opt.buffer(id).map(|b| (params.entries()[id.0].name.clone(), b.clone())))
            .collect();
        Checkpoint {
            config: self.cfg.clone(),
            epoch: self.epoch,
            params: params.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect(),
            momentum,
        }
    }

    /// One pass over `data` (already prepared) in a seeded shuffled order.
    pub fn train_epoch(&mut self, data: &[SkeletonSequence]) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let lr = self.cfg.lr_after(self.epoch);
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let seqs: Vec<&SkeletonSequence> = chunk.iter().map(|&i| &data[i]).collect();
            let labels: Vec<usize> = seqs.iter().map(|s| s.label).collect();
            let x = batch_tensor(&seqs)?;

            let mut tape = Tape::new();
            let vars = self.net.params().bind(&mut tape);
            let xv = tape.constant(x);
            let out = self.net.forward(&mut tape, &vars, xv, Mode::Train)?;
            let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::DivergedLoss { epoch, batch: bi, value });
            }
            correct += count_correct(tape.value(out.logits).data(), &labels);
            loss_sum += value * labels.len() as f64;

            tape.backward(loss)?;
            let grads: Vec<_> = self
                .net
                .params()
                .trainable_ids()
                .into_iter()
                .map(|id| (id, tape.grad_or_zeros(vars[id.0])))
                .collect();
            drop(tape);
            self.opt.step(self.net.params_mut(), &grads, lr);
            self.update_running_stats(&out.norm_updates);
        }
        self.epoch = epoch;
        let m = EpochMetrics { epoch, lr, loss: loss_sum / data.len() as f64, acc: correct as f64 / data.len() as f64 };
        self.metrics.push(m.clone());
        Ok(m)
    }

    fn update_running_stats(&mut self, updates: &[NormUpdate]) {
        let m = self.cfg.network.bn_momentum;
        let params = self.net.params_mut();
        for u in updates {
            let n = u.stats.count as f64;
            let unbias = if u.stats.count > 1 { n / (n - 1.0) } else { 1.0 };
            for (r, &v) in params.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, &v) in params.get_mut(u.running_var).data_mut().iter_mut().zip(&u.stats.var) {
                *r = (1.0 - m) * *r + m * v * unbias;
            }
        }
    }

    /// Trains until `cfg.epochs` or until `target_accuracy` is reached.
    pub fn fit(&mut self, data: &[SkeletonSequence], mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            let m = self.train_epoch(data)?;
            on_epoch(&m);
            if self.cfg.target_accuracy.is_some_and(|t| m.acc >= t) {
                break;
            }
        }
        Ok(())
    }
}

/// Index of the first maximal logit in each row.
pub fn argmax_rows(logits: &[f64], n_classes: usize) -> Vec<usize> {
    logits
        .chunks(n_classes)
        .map(|row| row.iter().enumerate().fold(0, |best, (k, &v)| if v > row[best] { k } else { best }))
        .collect()
}

fn count_correct(logits: &[f64], labels: &[usize]) -> usize {
    let k = logits.len() / labels.len();
    argmax_rows(logits, k).iter().zip(labels).filter(|(p, l)| p == l).count()
}
