use revsnn::bench::{run_training, TrainRunConfig};
use revsnn::checkpoint::{load_checkpoint, save_checkpoint};
use revsnn::data::synth_dataset;
use revsnn::grad::Strategy;
use revsnn::net::{cross_entropy_loss, train_epoch, DenseLayer, Model, NodeKind, Sgd, SgdConfig, Topology, TrainConfig};
use revsnn::node::NodeParams;
use revsnn::tensor::{Seed, Tensor};

#[test]
fn linear_probe_separates_blobs() {
    let data = synth_dataset(4, 16, 512, Seed(1)).unwrap();
    let x = Tensor::from_vec(vec![data.labels.len(), data.dim], data.features.clone()).unwrap();
    let mut probe = DenseLayer::init(data.dim, data.classes, Seed(2)).unwrap();
    let mut opt = Sgd::new(SgdConfig { lr: 0.5, ..SgdConfig::default() }, &[&probe.weights, &probe.bias]);
    for _ in 0..100 {
        let (_, g) = cross_entropy_loss(&probe.forward(&x).unwrap(), &data.labels).unwrap();
        let (_, gw, gb) = probe.backward(std::slice::from_ref(&x), &[g]).unwrap();
        opt.step(vec![&mut probe.weights, &mut probe.bias], &[gw, gb]).unwrap();
    }
    let logits = probe.forward(&x).unwrap();
    let correct = logits
        .data()
        .chunks_exact(data.classes)
        .zip(&data.labels)
        .filter(|(row, &label)| {
            let best = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            best == label
        })
        .count();
    let accuracy = correct as f64 / data.labels.len() as f64;
    assert!(accuracy >= 0.95, "probe accuracy {accuracy}");
}

#[test]
fn training_census_matches_memory_snapshot() {
    let data = synth_dataset(3, 12, 96, Seed(3)).unwrap();
    let topology = Topology {
        input_dim: 12,
        widths: vec![8, 8],
        classes: 3,
        timesteps: 5,
        node: NodeKind::Reversible(NodeParams::default()),
    };
    for strategy in Strategy::REVERSIBLE {
        let cfg = TrainConfig {
            batch_size: 32,
            strategy,
            instrument: true,
            ..TrainConfig::default()
        };
        let mut model = Model::new(topology.clone(), Seed(4)).unwrap();
        let mut opt = Sgd::new(cfg.sgd, &model.network.params());
        let m = train_epoch(&mut model, &mut opt, &data, &cfg, 0).unwrap();
        assert_eq!(m.census.len(), 3);
        for census in &m.census {
            assert_eq!(census, &model.memory_snapshot(strategy, 32), "{strategy:?}");
        }
    }
}

#[test]
fn resumed_training_is_bit_identical() {
    let data = synth_dataset(3, 10, 128, Seed(5)).unwrap();
    let run = |epochs| TrainRunConfig {
        widths: vec![8, 8],
        timesteps: 3,
        node: NodeKind::Reversible(NodeParams::default()),
        train: TrainConfig {
            batch_size: 32,
            epochs,
            seed: Seed(6),
            ..TrainConfig::default()
        },
    };
    let (full, _, full_ck) = run_training(&run(3), &data, None).unwrap();
    let (_, _, part_ck) = run_training(&run(2), &data, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("part.ckpt");
    save_checkpoint(&path, &part_ck).unwrap();
    let (rest, _, resumed_ck) = run_training(&run(1), &data, Some(load_checkpoint(&path).unwrap())).unwrap();

    assert_eq!(rest[0].epoch, 2);
    let losses = |m: &revsnn::net::EpochMetrics| m.iterations.iter().map(|i| i.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&rest[0]), losses(&full[2]));
    assert_eq!(resumed_ck, full_ck);
    assert_eq!(resumed_ck.to_bytes().unwrap(), full_ck.to_bytes().unwrap());
}
