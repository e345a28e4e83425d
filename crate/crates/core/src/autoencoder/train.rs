use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{AeModel, Mode, Variant};
use crate::channel::{to_real_tensor, SplitDataset};
use crate::error::{config_err, dim_err, numeric_err, Result};
use crate::nn::{Adam, Graph, Tensor};
use crate::rng::{self, Rng};
use crate::vq::{kmeans_pp_codewords, vq_loss};

use rand::Rng as _;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Commitment weight (VQ only).
    pub beta: f64,
    /// Codeword length (VQ only).
    pub m: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// L2 penalty `wd/2·‖W‖²` on weights (not biases or codebooks), added
    /// to the gradient before the Adam update.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            lr: 1e-3,
            beta: 0.2,
            m: 1,
            max_epochs: 100,
            patience: 30,
            weight_decay: 0.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("batch size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(config_err!("learning rate {} must be positive", self.lr));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(config_err!("beta={} outside (0, 1)", self.beta));
        }
        if self.m == 0 {
            return Err(config_err!("codeword length m must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_err!("weight_decay must be non-negative"));
        }
        if self.patience == 0 {
            return Err(config_err!("patience must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub recon_loss: f64,
    /// Medians over the epoch's steps (VQ only, zero otherwise).
    pub quant_loss: f64,
    pub commit_loss: f64,
    pub val_nmse: f64,
    pub revived_codes: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AeModel,
    pub history: Vec<EpochRecord>,
    /// Epoch of the returned snapshot; 0 means the initial weights.
    pub best_epoch: usize,
    pub best_val_nmse: f64,
    pub initial_val_nmse: f64,
}

/// Mean of per-sample `‖x − x̂‖² / ‖x‖²`.
pub fn mean_nmse(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(dim_err!("{:?} vs {:?}", x.shape(), x_hat.shape()));
    }
    let n = x.batch();
    if n == 0 {
        return Err(dim_err!("empty evaluation set"));
    }
    let per = x.len() / n;
    let mut total = 0.0;
    for (i, (a, b)) in x.data().chunks(per).zip(x_hat.data().chunks(per)).enumerate() {
        let den: f64 = a.iter().map(|v| v * v).sum();
        if den == 0.0 {
            return Err(numeric_err!("sample {} has zero norm", i));
        }
        let num: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
        total += num / den;
    }
    Ok(total / n as f64)
}

/// Validation NMSE of the model's inference reconstruction.
pub fn validation_nmse(model: &AeModel, val: &Tensor) -> Result<f64> {
    mean_nmse(val, &model.reconstruct(val)?)
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Train on the normalized UL splits of a dataset.
pub fn train_on_dataset(model: AeModel, data: &SplitDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let tr = to_real_tensor(&data.ul.train, data.scale)?;
    let va = to_real_tensor(&data.ul.val, data.scale)?;
    train(model, &tr, &va, cfg, None)
}

/// Adam training with early stopping on validation NMSE. `keep`, when
/// given, holds one flag per parameter entry; cleared entries are held at
/// zero throughout.
pub fn train(
    mut model: AeModel,
    train: &Tensor,
    val: &Tensor,
    cfg: &TrainConfig,
    keep: Option<&[Vec<bool>]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = train.batch();
    if n == 0 {
        return Err(dim_err!("empty training set"));
    }
    if let Some(k) = keep {
        if k.len() != model.params.len() || k.iter().zip(&model.params).any(|(a, p)| a.len() != p.len()) {
            return Err(dim_err!("mask does not match the model parameters"));
        }
        apply_keep(&mut model.params, k);
    }
    let is_vq = model.variant == Variant::Vq;
    if is_vq && cfg.max_epochs > 0 {
        init_codebook(&mut model, train, cfg)?;
    }
    let initial_val_nmse = validation_nmse(&model, val)?;
    let mut best = (0usize, initial_val_nmse, model.params.clone());
    let mut history = Vec::new();
    let mut adam = Adam::new(cfg.lr, &model.params);
    let mut order: Vec<usize> = (0..n).collect();
    let decay_flags: Vec<bool> = model.layers().flat_map(|l| l.weight_flags()).collect();
    let cb_index = if is_vq {
        let offs = model.param_offsets();
        model
            .layers()
            .position(|l| matches!(l, crate::nn::LayerSpec::Vq { .. }))
            .map(|i| offs[i])
    } else {
        None
    };

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng::stream(cfg.seed, "shuffle", epoch as u64));
        let mut nd_rng = rng::stream(cfg.seed, "nd", epoch as u64);
        let (mut loss_sum, mut recon_sum, mut steps) = (0.0, 0.0, 0usize);
        let (mut quants, mut commits) = (Vec::new(), Vec::new());
        let mut usage = vec![0usize; model.codebook().map_or(0, |c| c.size())];
        let mut pool: Vec<f64> = Vec::new();

        for chunk in order.chunks(cfg.batch_size) {
            let xb = train.select_batch(chunk);
            let mut g = Graph::new();
            let x = g.input(xb);
            let fw = model.forward(&mut g, x, Mode::Train, &mut nd_rng)?;
            let loss = match &fw.vq {
                Some(t) => {
                    let l = vq_loss(&mut g, x, fw.output, t.z_e, t.z_q, cfg.beta)?;
                    quants.push(g.value(l.quant).data()[0]);
                    commits.push(g.value(l.commit).data()[0]);
                    recon_sum += g.value(l.recon).data()[0];
                    for &k in &t.indices {
                        usage[k] += 1;
                    }
                    pool = g.value(t.z_e).data().to_vec();
                    l.total
                }
                None => {
                    let l = g.mse(fw.output, x)?;
                    recon_sum += g.value(l).data()[0];
                    l
                }
            };
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(numeric_err!(
                    "non-finite training loss at epoch {} (lr={})",
                    epoch,
                    cfg.lr
                ));
            }
            loss_sum += lv;
            steps += 1;
            g.backward(loss)?;
            let mut grads: Vec<Vec<f64>> = fw
                .params
                .iter()
                .zip(&model.params)
                .map(|(v, p)| g.grad(*v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
                .collect();
            if cfg.weight_decay > 0.0 {
                for ((gr, p), _) in grads.iter_mut().zip(&model.params).zip(&decay_flags).filter(|(_, d)| **d) {
                    for (gv, w) in gr.iter_mut().zip(p.data()) {
                        *gv += cfg.weight_decay * w;
                    }
                }
            }
            if let Some(k) = keep {
                for (gr, kk) in grads.iter_mut().zip(k) {
                    for (v, keep) in gr.iter_mut().zip(kk) {
                        if !keep {
                            *v = 0.0;
                        }
                    }
                }
            }
            adam.step(&mut model.params, &grads).map_err(|e| {
                numeric_err!("optimizer failure at epoch {} (lr={}): {}", epoch, cfg.lr, e)
            })?;
            if let Some(k) = keep {
                apply_keep(&mut model.params, k);
            }
        }

        let mut revived = 0;
        if let Some(ci) = cb_index {
            let m = model.params[ci].shape()[1];
            let mut r: Rng = rng::stream(cfg.seed, "revive", epoch as u64);
            let segs = pool.len() / m;
            for (k, &u) in usage.iter().enumerate() {
                if u == 0 && segs > 0 {
                    let s = r.random_range(0..segs);
                    let data = model.params[ci].data_mut();
                    data[k * m..(k + 1) * m].copy_from_slice(&pool[s * m..(s + 1) * m]);
                    revived += 1;
                }
            }
        }

        let val_nmse = validation_nmse(&model, val)?;
        if !val_nmse.is_finite() {
            return Err(numeric_err!(
                "non-finite validation NMSE at epoch {} (lr={})",
                epoch,
                cfg.lr
            ));
        }
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            recon_loss: recon_sum / steps as f64,
            quant_loss: median(&mut quants),
            commit_loss: median(&mut commits),
            val_nmse,
            revived_codes: revived,
        });
        if val_nmse < best.1 {
            best = (epoch, val_nmse, model.params.clone());
        } else if epoch - best.0 >= cfg.patience {
            break;
        }
    }

    model.params = best.2;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: best.0,
        best_val_nmse: best.1,
        initial_val_nmse,
    })
}

fn apply_keep(params: &mut [Tensor], keep: &[Vec<bool>]) {
    for (p, k) in params.iter_mut().zip(keep) {
        for (v, keep) in p.data_mut().iter_mut().zip(k) {
            if !keep {
                *v = 0.0;
            }
        }
    }
}

/// k-means++ over encoder-output segments of the first batches, enough to
/// hold at least `K` segments.
fn init_codebook(model: &mut AeModel, train: &Tensor, cfg: &TrainConfig) -> Result<()> {
    let cb = model.codebook().expect("vq model");
    let (k, m) = (cb.size(), cb.m);
    let per_sample = model.latent_dim() / m;
    let mut need = cfg.batch_size.max(k.div_ceil(per_sample.max(1)));
    need = need.min(train.batch());
    let z = model.encode(&train.slice_batch(0, need))?;
    let mut r = rng::stream(cfg.seed, "codebook", 0);
    let words = kmeans_pp_codewords(z.data(), m, k, &mut r);
    let cb = crate::vq::VectorCodebook::new(Tensor::new(vec![k, m], words)?)?;
    model.set_codebook(&cb)
}
