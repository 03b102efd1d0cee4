use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use viewlab::eval::{self, MineConfig, ProbeConfig};
use viewlab::rng;
use viewlab_autodiff::Tensor;

fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(&[seed, 77]);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut r)).collect())
}

/// All-pairs scan with a full sort: the reference for k-NN.
fn brute_force_knn(train: &Tensor, labels: &[u32], queries: &Tensor, k: usize) -> Vec<u32> {
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    (0..queries.rows())
        .map(|q| {
            let qr = queries.row(q);
            let mut all: Vec<(f64, usize)> = (0..train.rows())
                .map(|j| {
                    let t = train.row(j);
                    let qn: Vec<f64> = qr.iter().map(|v| v / norm(qr)).collect();
                    let tn: Vec<f64> = t.iter().map(|v| v / norm(t)).collect();
                    (qn.iter().zip(&tn).map(|(a, b)| a * b).sum(), j)
                })
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let top = &all[..k];
            let max_label = *labels.iter().max().unwrap() as usize;
            let mut counts = vec![0usize; max_label + 1];
            for &(_, j) in top {
                counts[labels[j] as usize] += 1;
            }
            let best = *counts.iter().max().unwrap();
            // First label reaching the best count in rank order.
            top.iter().map(|&(_, j)| labels[j]).find(|&l| counts[l as usize] == best).unwrap()
        })
        .collect()
}

#[test]
fn knn_matches_brute_force_on_random_instances() {
    for inst in 0..20u64 {
        let mut r = rng::stream(&[inst, 1]);
        let d = 2 + (inst as usize % 5);
        let train = randn(200, d, inst);
        let labels: Vec<u32> = (0..200).map(|_| r.random_range(0..4)).collect();
        let queries = randn(50, d, 1000 + inst);
        for k in [1, 5, 8] {
            let got = eval::knn_predict(&train, &labels, &queries, k).unwrap();
            assert_eq!(got, brute_force_knn(&train, &labels, &queries, k), "instance {inst}, k {k}");
        }
    }
}

#[test]
fn knn_duplicates_and_self_match() {
    let train = randn(30, 4, 3);
    let labels: Vec<u32> = (0..30).map(|i| i % 3).collect();
    assert_eq!(eval::knn_accuracy(&train, &labels, &train, &labels, 1).unwrap(), 1.0);

    let q = randn(1, 4, 9);
    let mut rows = train.data().to_vec();
    let mut lab = labels.clone();
    for _ in 0..5 {
        rows.extend_from_slice(q.data());
        lab.push(2);
    }
    let bank = Tensor::matrix(35, 4, rows);
    assert_eq!(eval::knn_predict(&bank, &lab, &q, 5).unwrap(), vec![2]);
    assert!(eval::knn_predict(&train, &labels, &q, 31).is_err());
}

#[test]
fn equal_similarities_prefer_the_smaller_index() {
    let train = Tensor::matrix(3, 2, vec![1.0, 0.0, 2.0, 0.0, 0.0, 1.0]);
    let q = Tensor::matrix(1, 2, vec![1.0, 0.0]);
    assert_eq!(eval::knn_predict(&train, &[7, 3, 1], &q, 1).unwrap(), vec![7]);
    // One vote each: the nearer neighbour wins.
    assert_eq!(eval::knn_predict(&train, &[7, 3, 1], &q, 2).unwrap(), vec![7]);
}

fn one_hot(labels: &[u32], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l as usize] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data)
}

#[test]
fn probe_separates_one_hot_embeddings() {
    let train: Vec<u32> = (0..200).map(|i| i % 4).collect();
    let test: Vec<u32> = (0..80).map(|i| (i * 7 % 4) as u32).collect();
    let cfg = ProbeConfig {
        epochs: 20,
        ..ProbeConfig::default()
    };
    let acc = eval::linear_probe_features(&one_hot(&train, 4), &train, &one_hot(&test, 4), &test, &cfg).unwrap();
    assert_eq!(acc, 1.0);
}

#[test]
fn probe_on_random_embeddings_is_at_chance() {
    let classes = 4;
    let train: Vec<u32> = (0..400).map(|i| i % classes).collect();
    let test: Vec<u32> = (0..2000).map(|i| i % classes).collect();
    let cfg = ProbeConfig {
        epochs: 30,
        ..ProbeConfig::default()
    };
    let acc = eval::linear_probe_features(&randn(400, 16, 1), &train, &randn(2000, 16, 2), &test, &cfg).unwrap();
    let p = 1.0 / classes as f64;
    let sigma = (p * (1.0 - p) / 2000.0).sqrt();
    assert!((acc - p).abs() <= 3.0 * sigma, "{acc}");
}

#[test]
fn probe_rejects_a_single_class() {
    let labels = vec![1u32; 10];
    let x = randn(10, 3, 0);
    assert!(eval::linear_probe_features(&x, &labels, &x, &labels, &ProbeConfig::default()).is_err());
}

fn gaussian_pairs(rho: f64, n: usize, seed: u64) -> (Tensor, Tensor) {
    let mut r = rng::stream(&[seed, 55]);
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = StandardNormal.sample(&mut r);
        let b: f64 = StandardNormal.sample(&mut r);
        u.push(a);
        v.push(rho * a + (1.0 - rho * rho).sqrt() * b);
    }
    (Tensor::matrix(n, 1, u), Tensor::matrix(n, 1, v))
}

fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

#[test]
fn mine_recovers_gaussian_information() {
    let (u, v) = gaussian_pairs(0.9, 10_000, 1);
    let est = eval::mine_estimate(&u, &v, &MineConfig::default()).unwrap();
    let truth = gaussian_mi(0.9);
    assert!((est.nats - truth).abs() <= 0.15 * truth, "{est:?} vs {truth}");
}

#[test]
fn mine_is_near_zero_for_independent_pairs() {
    let (u, v) = gaussian_pairs(0.0, 10_000, 2);
    let est = eval::mine_estimate(&u, &v, &MineConfig::default()).unwrap();
    assert!(est.nats <= 0.05, "{est:?}");
    assert!(est.nats >= 0.0);
}

#[test]
fn mine_grows_with_correlation() {
    let cfg = MineConfig {
        steps: 600,
        ..MineConfig::default()
    };
    let mean = |rho: f64| {
        (0..5)
            .map(|s| {
                let (u, v) = gaussian_pairs(rho, 2000, 10 + s);
                eval::mine_estimate(&u, &v, &MineConfig { seed: s, ..cfg }).unwrap().nats
            })
            .sum::<f64>()
            / 5.0
    };
    let (a, b, c) = (mean(0.3), mean(0.6), mean(0.9));
    assert!(a < b && b < c, "{a} {b} {c}");
}

#[test]
fn mine_needs_enough_pairs() {
    let (u, v) = gaussian_pairs(0.5, 999, 3);
    assert!(eval::mine_estimate(&u, &v, &MineConfig::default()).is_err());
}
