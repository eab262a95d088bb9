use dgp_core::dataset::{generate, FieldSpec, Simulator, Target};
use dgp_core::deepgp::{train_deep, DeepOptions, Predictor};
use dgp_core::model_io::{load_model, save_model};
use dgp_core::uq::{mc_baseline, uq_report, InputDistribution, UqOptions};
use nalgebra::DMatrix;

fn small_spec() -> FieldSpec {
    FieldSpec {
        grid: 16,
        out_grid: 8,
        k_xi: 6,
        ..FieldSpec::default()
    }
}

fn trained(sim: &Simulator) -> (DMatrix<f64>, DMatrix<f64>, Predictor, dgp_core::deepgp::DeepGpModel) {
    let data = generate(sim, 120, 7).unwrap();
    let x = data.permeability.rows(0, 100).into_owned();
    let y = data.target(Target::Pressure).rows(0, 100).into_owned();
    let mut opts = DeepOptions::new(vec![3, 3], vec![20, 20], 100, 1);
    opts.log_inputs = true;
    opts.shared_lengthscale = true;
    let model = train_deep(&x, &y, &opts).unwrap();
    let pred = Predictor::new(&model).unwrap();
    let xt = data.permeability.rows(100, 20).into_owned();
    let yt = data.target(Target::Pressure).rows(100, 20).into_owned();
    (xt, yt, pred, model)
}

#[test]
fn generate_is_reproducible_and_seed_dependent() {
    let sim = Simulator::new(&small_spec()).unwrap();
    let a = generate(&sim, 5, 3).unwrap();
    let b = generate(&sim, 5, 3).unwrap();
    let c = generate(&sim, 5, 4).unwrap();
    assert_eq!(a.pressure, b.pressure);
    assert_eq!(a.permeability, b.permeability);
    assert_ne!(a.permeability, c.permeability);
    assert_eq!(a.permeability.shape(), (5, 256));
    assert_eq!(a.vel_x.shape(), (5, 64));
    assert!(a.permeability.iter().all(|k| *k > 0.0));
}

#[test]
fn train_save_load_predict() {
    let sim = Simulator::new(&small_spec()).unwrap();
    let (xt, yt, pred, model) = trained(&sim);

    let trace = &model.training_meta.elbo_trace;
    assert!(trace.windows(2).all(|w| w[1] >= w[0]));

    let (mean, var) = pred.predict(&xt).unwrap();
    assert_eq!(mean.shape(), yt.shape());
    assert!(var.iter().all(|v| *v > 0.0));
    let rmse = ((&mean - &yt).norm_squared() / yt.len() as f64).sqrt();
    let centred = &yt - DMatrix::from_fn(yt.nrows(), yt.ncols(), |_, j| yt.column(j).mean());
    let sd = (centred.norm_squared() / yt.len() as f64).sqrt();
    assert!(rmse < sd, "rmse {rmse} vs output sd {sd}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let files = save_model(&model, &path).unwrap();
    assert!(files.iter().all(|f| f.exists()));
    let back = Predictor::new(&load_model(&path).unwrap()).unwrap();
    let (m2, v2) = back.predict(&xt).unwrap();
    assert_eq!(mean, m2);
    assert_eq!(var, v2);
}

#[test]
fn surrogate_uq_tracks_simulator_monte_carlo() {
    let sim = Simulator::new(&small_spec()).unwrap();
    let (_, _, pred, _) = trained(&sim);
    let dist = InputDistribution::KleUniform(sim.kle.clone());
    let opts = UqOptions::new(40, 10, 5);
    let report = uq_report(&pred, &dist, &opts).unwrap();
    assert_eq!(report, uq_report(&pred, &dist, &opts).unwrap());

    let mc = mc_baseline(&sim, 400, 9, &[]).unwrap();
    let truth = &mc.field(Target::Pressure).mean;
    let diff: f64 = report.mean_of_mean.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum();
    let gap = (diff / truth.iter().map(|b| b * b).sum::<f64>()).sqrt();
    assert!(gap < 0.1, "relative gap {gap}");
    assert!(report.mean_of_variance.iter().all(|v| *v >= 0.0));
}
