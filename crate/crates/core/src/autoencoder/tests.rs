use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::nn::{LayerSpec, Tensor};
use crate::rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "test", 0);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn toy(variant: Variant) -> AeModel {
    let mut arch = ArchConfig::new(variant, 8);
    arch.channels = 4;
    arch.vq_m = 2;
    arch.vq_k = 16;
    AeModel::toy(4, 8, &arch, 3).unwrap()
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 10,
        lr: 3e-3,
        max_epochs: epochs,
        patience: 30,
        ..Default::default()
    }
}

#[test]
fn toy_structure_and_param_parity() {
    let ae = toy(Variant::Ae);
    let nd = toy(Variant::Nd);
    assert_eq!(ae.latent_dim(), 8);
    assert_eq!(ae.param_count(), nd.param_count());
    assert!(matches!(ae.encoder.last(), Some(LayerSpec::Tanh)));
    assert!(matches!(nd.encoder.last(), Some(LayerSpec::NestedDropout { .. })));
    let vq = toy(Variant::Vq);
    assert_eq!(vq.param_count(), ae.param_count() + 16 * 2);
    assert!(vq.codebook().is_some());
}

#[test]
fn bad_structures_are_rejected() {
    let mut arch = ArchConfig::new(Variant::Ae, 8);
    arch.groups = 3;
    assert!(matches!(AeModel::toy(4, 8, &arch, 0), Err(crate::Error::Config(_))));
    let mut arch = ArchConfig::new(Variant::Vq, 8);
    arch.vq_m = 3;
    assert!(AeModel::toy(4, 8, &arch, 0).is_err());
    // ND variant without an ND layer
    let m = AeModel::linear(6, 2, None, 0).unwrap();
    assert!(AeModel::from_parts(Variant::Nd, m.input_shape, m.encoder, m.decoder, m.params).is_err());
}

#[test]
fn latent_ranges_and_determinism() {
    let x = random(&[5, 2, 4, 8], 1).reshape(vec![5, 2, 4, 8]).unwrap();
    let x = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * 40.0).collect()).unwrap();
    let z = toy(Variant::Ae).encode(&x).unwrap();
    assert!(z.data().iter().all(|v| v.abs() <= 1.0));
    for v in [Variant::Nd, Variant::Vq] {
        let m = toy(v);
        let params = m.params.iter().map(|p| Tensor::new(p.shape().to_vec(), p.data().iter().map(|w| w * 50.0).collect()).unwrap()).collect();
        let m = AeModel::from_parts(v, m.input_shape.clone(), m.encoder.clone(), m.decoder.clone(), params).unwrap();
        let z = m.encode(&x).unwrap();
        assert!(z.data().iter().any(|v| v.abs() > 1.0), "{:?}", v);
    }
    let m = toy(Variant::Nd);
    assert_eq!(m.encode(&x).unwrap(), m.encode(&x).unwrap());
    assert_eq!(m.reconstruct(&x).unwrap().shape(), x.shape());
}

#[test]
fn decode_checks_latent_length() {
    let m = toy(Variant::Ae);
    assert!(matches!(m.decode(&Tensor::zeros(vec![2, 7])), Err(crate::Error::Dimension(_))));
    assert!(matches!(m.encode(&Tensor::zeros(vec![2, 2, 4, 7])), Err(crate::Error::Dimension(_))));
}

#[test]
fn eval_forward_matches_encode_decode() {
    let x = random(&[3, 2, 4, 8], 2);
    let m = toy(Variant::Nd);
    let mut g = crate::nn::Graph::new();
    let xv = g.input(x.clone());
    let fw = m.forward(&mut g, xv, Mode::Eval, &mut rng::stream(0, "x", 0)).unwrap();
    assert_eq!(g.value(fw.latent).data(), m.encode(&x).unwrap().data());
    assert_eq!(g.value(fw.output), &m.reconstruct(&x).unwrap());
}

#[test]
fn zero_epochs_returns_initial_model() {
    let x = random(&[20, 2, 4, 8], 3);
    for v in [Variant::Ae, Variant::Vq] {
        let m = toy(v);
        let out = train(m.clone(), &x, &x, &quick_cfg(0), None).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.model, m);
        assert_eq!(out.best_epoch, 0);
    }
}

#[test]
fn best_snapshot_is_never_beaten_later() {
    let x = random(&[40, 2, 4, 8], 4);
    let v = random(&[10, 2, 4, 8], 5);
    let out = train(toy(Variant::Nd), &x, &v, &quick_cfg(8), None).unwrap();
    assert_eq!(out.history.len(), 8);
    assert!(out.best_val_nmse <= out.initial_val_nmse);
    for h in out.history.iter().filter(|h| h.epoch > out.best_epoch) {
        assert!(out.best_val_nmse <= h.val_nmse);
    }
    let got = validation_nmse(&out.model, &v).unwrap();
    assert!((got - out.best_val_nmse).abs() < 1e-12);
    assert!(out.history.last().unwrap().train_loss < out.history[0].train_loss);
}

#[test]
fn patience_stops_early() {
    let x = random(&[20, 2, 4, 8], 6);
    let v = random(&[10, 2, 4, 8], 7);
    let mut cfg = quick_cfg(200);
    cfg.patience = 1;
    cfg.lr = 0.5;
    let out = train(toy(Variant::Ae), &x, &v, &cfg, None).unwrap();
    assert!(out.history.len() < 200);
    let last = out.history.last().unwrap().epoch;
    assert_eq!(last - out.best_epoch, 1);
}

#[test]
fn nan_input_aborts_with_epoch_and_lr() {
    let mut x = random(&[20, 2, 4, 8], 8);
    x.data_mut()[5] = f64::NAN;
    let v = random(&[5, 2, 4, 8], 9);
    match train(toy(Variant::Ae), &x, &v, &quick_cfg(3), None) {
        Err(crate::Error::Numeric(msg)) => {
            assert!(msg.contains("epoch 1") && msg.contains("lr=0.003"), "{}", msg);
        }
        other => panic!("expected numeric error, got {:?}", other.map(|o| o.history)),
    }
}

#[test]
fn invalid_train_config() {
    let x = random(&[4, 2, 4, 8], 10);
    let mut cfg = quick_cfg(1);
    cfg.patience = 0;
    assert!(matches!(train(toy(Variant::Ae), &x, &x, &cfg, None), Err(crate::Error::Config(_))));
    let mut cfg = quick_cfg(1);
    cfg.beta = 1.0;
    assert!(train(toy(Variant::Ae), &x, &x, &cfg, None).is_err());
}

#[test]
fn keep_mask_holds_entries_at_zero() {
    let x = random(&[20, 2, 4, 8], 11);
    let m = toy(Variant::Ae);
    let keep: Vec<Vec<bool>> = m
        .params
        .iter()
        .map(|p| (0..p.len()).map(|i| i % 3 != 0).collect())
        .collect();
    let out = train(m, &x, &x, &quick_cfg(3), Some(&keep)).unwrap();
    for (p, k) in out.model.params.iter().zip(&keep) {
        for (v, kk) in p.data().iter().zip(k) {
            if !kk {
                assert_eq!(*v, 0.0);
            }
        }
    }
}

#[test]
fn vq_training_revives_and_keeps_codebook_shape() {
    let x = random(&[30, 2, 4, 8], 12);
    let out = train(toy(Variant::Vq), &x, &x, &quick_cfg(3), None).unwrap();
    let cb = out.model.codebook().unwrap();
    assert_eq!(cb.codewords.shape(), &[16, 2]);
    assert!(out.history.iter().all(|h| h.quant_loss >= 0.0 && h.commit_loss >= 0.0));
    // the initialized codebook is data-dependent, not the zero placeholder
    assert!(cb.codewords.data().iter().any(|v| *v != 0.0));
}

#[test]
fn model_file_round_trip() {
    let mut arch = ArchConfig::new(Variant::Nd, 8);
    arch.channels = 4;
    arch.groups = 2;
    arch.binary_fc = true;
    let models = [
        toy(Variant::Ae),
        toy(Variant::Nd),
        toy(Variant::Vq),
        AeModel::toy(4, 8, &arch, 1).unwrap(),
        AeModel::linear(6, 3, Some(0.25), 2).unwrap(),
    ];
    for m in models {
        let mut bytes = Vec::new();
        m.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"CSIM");
        assert_eq!(bytes[5], m.variant.code());
        let back = AeModel::read_from(&bytes[..]).unwrap();
        assert_eq!(back.encoder, m.encoder);
        assert_eq!(back.decoder, m.decoder);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
        bytes.push(0);
        assert!(matches!(AeModel::read_from(&bytes[..]), Err(crate::Error::Format(_))));
    }
}

#[test]
fn binary_fc_file_freezes_alpha() {
    let mut arch = ArchConfig::new(Variant::Ae, 8);
    arch.channels = 4;
    arch.binary_fc = true;
    let m = AeModel::toy(4, 8, &arch, 5).unwrap();
    let x = random(&[3, 2, 4, 8], 13);
    let mut bytes = Vec::new();
    m.write_to(&mut bytes).unwrap();
    let back = AeModel::read_from(&bytes[..]).unwrap();
    let a = m.encode(&x).unwrap();
    let b = back.encode(&x).unwrap();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-5, "{} vs {}", u, v);
    }
}

#[test]
fn corrupt_model_headers() {
    let m = toy(Variant::Ae);
    let mut bytes = Vec::new();
    m.write_to(&mut bytes).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(AeModel::read_from(&bad[..]), Err(crate::Error::Format(_))));
    let mut bad = bytes.clone();
    bad[5] = 9;
    assert!(matches!(AeModel::read_from(&bad[..]), Err(crate::Error::Format(_))));
    assert!(AeModel::read_from(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn search_single_trial_and_ties() {
    let x = random(&[20, 2, 4, 8], 14);
    let base = quick_cfg(2);
    let space = SearchSpace::default();
    let res = random_search(&space, &base, 1, 1, &x, &x, |_| Ok(toy(Variant::Ae))).unwrap();
    assert_eq!(res.best_index, 0);
    assert_eq!(res.best.lr, space.sample(&base, base.seed, 0).lr);

    let flat = SearchSpace {
        batch_sizes: vec![10],
        lr_min: 1e-3,
        lr_max: 1e-3,
        beta_min: 0.2,
        beta_max: 0.2,
        m_choices: vec![1],
    };
    let res = random_search(&flat, &base, 3, 2, &x, &x, |_| Ok(toy(Variant::Ae))).unwrap();
    assert!(res.trials.iter().all(|t| t.score == res.trials[0].score));
    assert_eq!(res.best_index, 0);
    assert!(random_search(&flat, &base, 0, 2, &x, &x, |_| Ok(toy(Variant::Ae))).is_err());
}

#[test]
fn sampled_configs_stay_in_range() {
    let space = SearchSpace::default();
    let base = TrainConfig::default();
    for i in 0..500 {
        let c = space.sample(&base, 7, i);
        assert!([25, 50, 100].contains(&c.batch_size));
        assert!((1e-4..=1e-2).contains(&c.lr));
        assert!((0.1..=0.3).contains(&c.beta));
        assert!([1, 2, 4].contains(&c.m));
        c.validate().unwrap();
    }
    assert_eq!(space.sample(&base, 7, 3), space.sample(&base, 7, 3));
}

/// Linear ND autoencoder against the rank-M eigendecomposition optimum.
#[test]
fn linear_nd_recovers_pca_error() {
    let (d, m, n) = (8usize, 4usize, 600usize);
    let mut r = rng::stream(21, "test", 0);
    let mix: Vec<f64> = (0..d * d).map(|_| StandardNormal.sample(&mut r)).collect();
    let scales = [3.0, 2.5, 2.0, 1.5, 0.5, 0.3, 0.2, 0.1];
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let s: Vec<f64> = scales.iter().map(|c| { let g: f64 = StandardNormal.sample(&mut r); c * g }).collect();
        for i in 0..d {
            data.push((0..d).map(|j| mix[i * d + j] * s[j]).sum::<f64>() + 0.5);
        }
    }
    let x = Tensor::new(vec![n, d], data).unwrap();

    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.data()[i * d + j]).sum::<f64>() / n as f64).collect();
    let cov = nalgebra::DMatrix::from_fn(d, d, |a, b| {
        (0..n)
            .map(|i| (x.data()[i * d + a] - mean[a]) * (x.data()[i * d + b] - mean[b]))
            .sum::<f64>()
            / n as f64
    });
    let mut eig: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let optimum: f64 = eig[m..].iter().sum();

    let model = AeModel::linear(d, m, Some(0.2), 4).unwrap();
    let cfg = TrainConfig {
        batch_size: 25,
        lr: 3e-3,
        max_epochs: 400,
        patience: 400,
        ..Default::default()
    };
    let out = train(model, &x, &x, &cfg, None).unwrap();
    let rec = out.model.reconstruct(&x).unwrap();
    let mse = x.data().iter().zip(rec.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64;
    assert!(mse <= optimum * 1.05, "mse {} vs PCA optimum {}", mse, optimum);
}
