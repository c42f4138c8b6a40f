use mgdun::checkpoint;
use mgdun::dataset::{self, DatasetSpec};
use mgdun::metrics;
use mgdun::net::{MgdunModel, ModelConfig};
use mgdun::solver::{self, SolverParams};
use mgdun::train::{self, AdamConfig, TrainConfig};

fn tiny_model(seed: u64) -> MgdunModel {
    MgdunModel::new(ModelConfig {
        stages: 1,
        width: 8,
        depth: 2,
        inn_hidden: 4,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

#[test]
fn dataset_round_trips_through_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        count: 3,
        size: 16,
        seed: 5,
        ..DatasetSpec::default()
    };
    let manifest = dataset::write(tmp.path(), &spec).unwrap();
    let (read_back, problems) = dataset::read(tmp.path()).unwrap();
    assert_eq!(read_back, manifest);
    assert_eq!(problems, spec.generate().unwrap());
}

#[test]
fn tampered_dataset_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        count: 2,
        size: 16,
        seed: 6,
        ..DatasetSpec::default()
    };
    dataset::write(tmp.path(), &spec).unwrap();
    let victim = tmp.path().join("0001_z.mgt");
    let mut bytes = std::fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&victim, bytes).unwrap();
    assert!(dataset::read(tmp.path()).is_err());
}

#[test]
fn trained_checkpoint_reloads_to_identical_outputs() {
    let data = DatasetSpec {
        count: 4,
        size: 16,
        seed: 7,
        ..DatasetSpec::default()
    }
    .generate()
    .unwrap();
    let mut model = tiny_model(8);
    let cfg = TrainConfig {
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        batch_size: 2,
        max_iters: Some(4),
        val_every: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    let tmp = tempfile::tempdir().unwrap();
    train::train(&cfg, &mut model, &data, &data[..1], Some(tmp.path())).unwrap();
    let ckpt = checkpoint::load(tmp.path().join("final.ckpt")).unwrap();
    assert_eq!(ckpt.model, model);
    let p = &data[0];
    assert_eq!(
        ckpt.model.forward(&p.x, &p.y).unwrap(),
        model.forward(&p.x, &p.y).unwrap()
    );
    let again = checkpoint::encode(&ckpt.model, ckpt.adam.as_ref());
    assert_eq!(again, std::fs::read(tmp.path().join("final.ckpt")).unwrap());
}

#[test]
fn classical_solver_improves_on_its_start() {
    let spec = DatasetSpec {
        count: 2,
        size: 32,
        seed: 10,
        ..DatasetSpec::default()
    };
    let problems = spec.generate().unwrap();
    let ops = spec.operators().unwrap();
    let short = SolverParams {
        iters: 0,
        ..SolverParams::default()
    };
    let long = SolverParams {
        iters: 200,
        ..SolverParams::default()
    };
    let start = solver::solve_batch(&problems, &ops, &short);
    let end = solver::solve_batch(&problems, &ops, &long);
    for ((p, a), b) in problems.iter().zip(start).zip(end) {
        let gt = p.z.as_ref().unwrap();
        let before = metrics::psnr(&a.unwrap().state.z, gt, 1.0).unwrap();
        let after = metrics::psnr(&b.unwrap().state.z, gt, 1.0).unwrap();
        assert!(after > before, "{before} -> {after}");
    }
}

#[test]
fn batch_gradients_do_not_depend_on_thread_count() {
    let data = DatasetSpec {
        count: 4,
        size: 16,
        seed: 11,
        ..DatasetSpec::default()
    }
    .generate()
    .unwrap();
    let model = tiny_model(12);
    let batch: Vec<_> = data.iter().collect();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let wide = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = single.install(|| train::batch_gradients(&model, &batch)).unwrap();
    let b = wide.install(|| train::batch_gradients(&model, &batch)).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
}
