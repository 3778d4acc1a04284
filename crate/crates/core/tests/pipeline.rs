use ndarray::Array2;
use qfit_core::fitref::fit_dataset;
use qfit_core::net::backward;
use qfit_core::simulate::add_rician_noise;
use qfit_core::specfun::expected_rician_magnitude;
use qfit_core::{
    compute_metrics, make_dataset, select_common_init, train, Checkpoint, Estimator, LossKind, ModelKind, Network,
    TrainConfig, VoxelDataset,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn files_round_trip_through_training_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let kind = ModelKind::Ivim;
    let protocol = kind.default_protocol();
    let mut tr = make_dataset(kind, 20.0, 800, &protocol, 1).unwrap();
    tr.estimate_sigma_from_background(1000, 4).unwrap();
    let va = make_dataset(kind, 20.0, 100, &protocol, 2).unwrap();
    tr.save_csv(dir.path().join("train.csv")).unwrap();
    let tr2 = VoxelDataset::load_csv(dir.path().join("train.csv")).unwrap();
    assert_eq!(tr, tr2);

    let cfg = TrainConfig {
        max_epochs: 3,
        patience_epochs: 3,
        seed: 11,
        ..TrainConfig::default()
    };
    let sigma = tr2.sigma_estimated.unwrap();
    let init = select_common_init(&tr2, &va, &cfg, 2, sigma).unwrap();
    let fitted = train(&tr2, &va, &init.network, &TrainConfig { loss_kind: LossKind::Mse, ..cfg }, sigma).unwrap();

    let path = dir.path().join("mse.json");
    Checkpoint::new(fitted.final_network.clone(), kind, 11, "hash").save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let a = fitted.final_network.forward(va.signals.view()).unwrap();
    let b = back.network.forward(va.signals.view()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn nlr_gradients_finite_across_random_initialisations() {
    let kind = ModelKind::Adc;
    let protocol = kind.default_protocol();
    let ds = make_dataset(kind, 30.0, 64, &protocol, 3).unwrap();
    for seed in 0..1000 {
        let net = Network::for_model(protocol.len(), kind.n_params(), seed).unwrap();
        let g = backward(&net, ds.signals.view(), &protocol, LossKind::Nlr, 1.0 / 30.0).unwrap();
        assert!(g.loss.is_finite() && g.grad.iter().all(|v| v.is_finite()), "seed {seed}");
    }
}

#[test]
fn different_seeds_give_different_initial_losses() {
    let kind = ModelKind::Ivim;
    let protocol = kind.default_protocol();
    let ds = make_dataset(kind, 10.0, 64, &protocol, 3).unwrap();
    let loss = |seed| {
        let net = Network::for_model(protocol.len(), kind.n_params(), seed).unwrap();
        backward(&net, ds.signals.view(), &protocol, LossKind::Nlr, 0.1).unwrap().loss
    };
    assert_ne!(loss(1), loss(2));
}

#[test]
fn rician_sample_means_match_expected_magnitude() {
    let n = 100_000;
    for (i, &a) in [0.0, 0.5, 1.0].iter().enumerate() {
        for (j, &sigma) in [0.05, 0.1, 0.2].iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64((10 * i + j) as u64);
            let draws: Vec<f64> = (0..n).map(|_| add_rician_noise(a, sigma, &mut rng).unwrap()).collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let sd = (draws.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (n - 1) as f64).sqrt();
            let want = expected_rician_magnitude(a, sigma).unwrap();
            assert!((mean - want).abs() < 4.0 * sd / (n as f64).sqrt(), "A={a} sigma={sigma}");
        }
    }
}

#[test]
fn classical_fits_show_the_rician_bias_pattern() {
    // ADC at SNR 10: least squares underestimates D at the top of the range,
    // the likelihood fit much less so.
    let kind = ModelKind::Adc;
    let ds = make_dataset(kind, 10.0, 10_000, &kind.default_protocol(), 21).unwrap();
    let grid = kind.param_grid();
    let bias_at_2 = |est| {
        let fits = fit_dataset(ds.signals.view(), &ds.protocol, est).unwrap();
        let mut pred = Array2::zeros(ds.truth.dim());
        for (mut row, f) in pred.rows_mut().into_iter().zip(&fits) {
            row.assign(&ndarray::Array1::from(f.params.to_vec()));
        }
        let report = compute_metrics(pred.view(), ds.truth.view(), &grid).unwrap();
        report.marginal_at("D", 2.0).unwrap().bias.mean
    };
    let lsq = bias_at_2(Estimator::Lsq);
    let mle = bias_at_2(Estimator::Mle { sigma: 0.1 });
    assert!(lsq < 0.0, "{lsq}");
    assert!(mle.abs() < lsq.abs(), "mle {mle} lsq {lsq}");
}
