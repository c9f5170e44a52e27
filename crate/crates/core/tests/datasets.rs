mod common;

use profe::datagen::{self, dirichlet_proportions, load_mnist, PartitionScheme, PartitionSpec};
use profe::seed;
use rand_distr::{Distribution, Gamma};

#[test]
fn mnist_subset_loads() {
    let ds = load_mnist(&common::mnist_dir()).expect("data/mnist is part of the repository");
    assert_eq!(ds.len(), 6000);
    assert_eq!(ds.width(), 784);
    assert_eq!(ds.classes(), 10);
    assert!(ds.class_counts().iter().all(|&c| c == 600));
    assert!((0..ds.len()).all(|i| ds.input(i).iter().all(|&v| (0.0..=1.0).contains(&v))));
}

#[test]
fn swapped_idx_files_are_rejected() {
    let dir = common::mnist_dir();
    let images = dir.join("train-images-idx3-ubyte");
    let err = datagen::load_idx_pair(&images, &images).unwrap_err().to_string();
    assert!(err.contains("byte 0") && err.contains("magic"), "{err}");

    let tmp = tempfile::tempdir().unwrap();
    let bytes = std::fs::read(&images).unwrap();
    let cut = tmp.path().join("cut");
    std::fs::write(&cut, &bytes[..1000]).unwrap();
    let err = datagen::load_idx_pair(&cut, &dir.join("train-labels-idx1-ubyte")).unwrap_err();
    assert!(matches!(err, profe::Error::Format { offset: 1000, .. }), "{err}");
}

#[test]
fn dirichlet_matches_independent_gamma_draws() {
    let (alpha, nodes, classes, s) = (0.5, 5, 10, 17);
    let props = dirichlet_proportions(alpha, nodes, classes, s).unwrap();

    let gamma = Gamma::new(alpha, 1.0).unwrap();
    let mut rng = seed::stream(s, "dirichlet", 0);
    for row in &props {
        let g: Vec<f64> = (0..nodes).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = g.iter().sum();
        for (p, gi) in row.iter().zip(&g) {
            assert!((p - gi / total).abs() < 1e-12);
        }
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    // shard composition follows the proportions to within one sample per class
    let ds = datagen::gen_blobs(classes, 100, 3, 0.1, 1).unwrap();
    let shards = datagen::partition(
        &ds,
        &PartitionSpec {
            scheme: PartitionScheme::Dirichlet(alpha),
            nodes,
            seed: s,
        },
    )
    .unwrap();
    for (c, row) in props.iter().enumerate() {
        for (node, p) in row.iter().enumerate() {
            let got = shards[node].class_counts()[c] as f64;
            assert!((got - p * 100.0).abs() < 1.0 + 1e-9, "class {c} node {node}: {got} vs {}", p * 100.0);
        }
    }
}

#[test]
fn class_fraction_twenty_percent_gives_two_classes() {
    let ds = load_mnist(&common::mnist_dir()).unwrap();
    for nodes in [5, 20] {
        let shards = datagen::partition(
            &ds,
            &PartitionSpec {
                scheme: PartitionScheme::ClassFraction(0.2),
                nodes,
                seed: 3,
            },
        )
        .unwrap();
        assert!(shards.iter().all(|s| s.class_counts().iter().filter(|&&c| c > 0).count() == 2));
    }
}
