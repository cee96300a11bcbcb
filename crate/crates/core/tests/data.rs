use std::collections::BTreeSet;

use fedbsd_core::data::{
    gen_synthetic_blobs, load_idx, lognormal_allocate, mean_pairwise_overlap, partition_by_classes, Allocation, Dataset, PartitionSpec,
};
use fedbsd_core::harness::TrainConfig;
use fedbsd_core::harness::metrics::evaluate_client;
use fedbsd_core::nn::{BackboneNet, HeadLayer, LinearLayer, SplitModel};
use fedbsd_core::protocol::train_head;
use fedbsd_core::rng::{stream, Purpose};
use fedbsd_core::{Error, Tensor2D};

fn idx_images(images: &[[u8; 784]]) -> Vec<u8> {
    let mut b = vec![0, 0, 0x08, 0x03];
    b.extend_from_slice(&(images.len() as u32).to_be_bytes());
    b.extend_from_slice(&28u32.to_be_bytes());
    b.extend_from_slice(&28u32.to_be_bytes());
    for im in images {
        b.extend_from_slice(im);
    }
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 0x08, 0x01];
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

fn fixture_images() -> Vec<[u8; 784]> {
    (0..4u32)
        .map(|k| {
            let mut im = [0u8; 784];
            for (p, v) in im.iter_mut().enumerate() {
                let p = p as u32;
                // a diagonal stroke per image plus a few scattered pixels
                if (p / 28 + k * 3) % 28 == p % 28 || (p * 7 + k * 13) % 97 == 0 {
                    *v = ((p * 31 + k * 57) % 256) as u8;
                }
            }
            im
        })
        .collect()
}

/// Reads the fixture back byte by byte, scales to [0, 1] and standardizes
/// every pixel column (population variance; constant columns only centered).
fn reference_parse(images: &[u8], labels: &[u8]) -> (usize, usize, Vec<f64>, Vec<usize>) {
    let be = |b: &[u8], at: usize| u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]]) as usize;
    assert_eq!(be(images, 0), 0x803);
    assert_eq!(be(labels, 0), 0x801);
    let n = be(images, 4);
    let d = be(images, 8) * be(images, 12);
    let mut x: Vec<f64> = images[16..16 + n * d].iter().map(|&v| v as f64 / 255.0).collect();
    for c in 0..d {
        let mean = (0..n).map(|r| x[r * d + c]).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (x[r * d + c] - mean).powi(2)).sum::<f64>() / n as f64;
        for r in 0..n {
            let v = x[r * d + c] - mean;
            x[r * d + c] = if var > 0.0 { v / var.sqrt() } else { v };
        }
    }
    let y = labels[8..8 + n].iter().map(|&l| l as usize).collect();
    (n, d, x, y)
}

#[test]
fn idx_fixture_loads_and_matches_reference_parser() {
    let dir = tempfile::tempdir().unwrap();
    let images = idx_images(&fixture_images());
    let labels = idx_labels(&[3, 0, 7, 3]);
    let (ip, lp) = (dir.path().join("images.idx3-ubyte"), dir.path().join("labels.idx1-ubyte"));
    std::fs::write(&ip, &images).unwrap();
    std::fs::write(&lp, &labels).unwrap();

    let d = load_idx(&ip, &lp).unwrap();
    assert_eq!(d.features().shape(), (4, 784));
    assert_eq!(d.labels(), &[3, 0, 7, 3]);
    assert_eq!(d.num_classes(), 8);

    let (n, dim, x, y) = reference_parse(&images, &labels);
    assert_eq!((n, dim), (4, 784));
    assert_eq!(d.labels(), &y[..]);
    let (mut sum, mut ref_sum) = (0.0, 0.0);
    for (i, (a, b)) in d.features().as_slice().iter().zip(&x).enumerate() {
        assert!((a - b).abs() < 1e-12, "pixel {i}: {a} vs {b}");
        sum += a * (i % 13) as f64;
        ref_sum += b * (i % 13) as f64;
    }
    assert!((sum - ref_sum).abs() < 1e-9);
}

#[test]
fn idx_count_mismatch_and_bad_magic_fail() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    std::fs::write(&ip, idx_images(&fixture_images())).unwrap();
    std::fs::write(&lp, idx_labels(&[1, 2, 3])).unwrap();
    assert!(load_idx(&ip, &lp).is_err());

    let mut bad = idx_images(&fixture_images());
    bad[3] = 0x01;
    std::fs::write(&ip, bad).unwrap();
    std::fs::write(&lp, idx_labels(&[1, 2, 3, 4])).unwrap();
    assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { offset: 0, .. })));
    assert!(load_idx(&dir.path().join("missing"), &lp).is_err());
}

#[test]
fn central_linear_classifier_separates_tight_blobs() {
    let data = gen_synthetic_blobs(10, 32, 200, 0.3, &mut stream(11, Purpose::Data, 0, 0)).unwrap();
    let n_train = 1600;
    let train = data.subset(&(0..n_train).collect::<Vec<_>>());
    let test = data.subset(&(n_train..data.len()).collect::<Vec<_>>());
    let cfg = TrainConfig {
        lr: 0.1,
        batch_size: 50,
        ..Default::default()
    };
    let mut head = HeadLayer::new(32, 10);
    head.layer_mut().init_glorot(&mut stream(11, Purpose::Init, 0, 0));
    train_head(&mut head, train.features(), train.labels(), 30, &cfg, &mut stream(11, Purpose::ClientUpdate, 0, 0)).unwrap();

    // identity backbone so the head acts on raw inputs
    let eye = Tensor2D::from_vec(32, 32, (0..32 * 32).map(|i| if i % 33 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
    let backbone = BackboneNet::from_layers(vec![(LinearLayer::from_params(eye, vec![0.0; 32]).unwrap(), false)]).unwrap();
    let acc = evaluate_client(&SplitModel::new(backbone, head).unwrap(), &test).unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
}

fn spec(n: usize, s: usize, seed: u64) -> PartitionSpec {
    PartitionSpec {
        num_clients: n,
        classes_per_client: s,
        allocation: Allocation::Uniform,
        seed,
    }
}

fn blobs(m: usize, per_class: usize, seed: u64) -> Dataset {
    gen_synthetic_blobs(m, 4, per_class, 1.0, &mut stream(seed, Purpose::Data, 0, 0)).unwrap()
}

#[test]
fn four_clients_one_class_each() {
    let data = blobs(2, 40, 3);
    let shards = partition_by_classes(&data, &spec(4, 1, 5), &mut stream(5, Purpose::Partition, 0, 0)).unwrap();
    assert_eq!(shards.len(), 4);
    let mut union = BTreeSet::new();
    for s in &shards {
        assert_eq!(s.class_set.len(), 1);
        let c = s.class_set[0];
        assert!(s.train.labels().iter().chain(s.test.labels()).all(|&l| l == c));
        union.insert(c);
    }
    assert_eq!(union, BTreeSet::from([0, 1]));
    let total: usize = shards.iter().map(|s| s.train.len() + s.test.len()).sum();
    assert_eq!(total, data.len());
}

#[test]
fn iid_limit_gives_every_client_all_classes() {
    let data = blobs(5, 50, 4);
    let shards = partition_by_classes(&data, &spec(6, 5, 1), &mut stream(1, Purpose::Partition, 0, 0)).unwrap();
    for s in &shards {
        assert_eq!(s.class_set, vec![0, 1, 2, 3, 4]);
        assert!(s.train.class_counts().iter().all(|&c| c > 0));
    }
}

#[test]
fn overlap_grows_with_classes_per_client() {
    let data = blobs(10, 100, 9);
    for seed in 0..5 {
        let overlaps: Vec<f64> = [1, 2, 5, 8, 10]
            .iter()
            .map(|&s| {
                let shards = partition_by_classes(&data, &spec(20, s, seed), &mut stream(seed, Purpose::Partition, 0, 0)).unwrap();
                mean_pairwise_overlap(&shards)
            })
            .collect();
        assert!(overlaps.windows(2).all(|w| w[0] <= w[1]), "seed {seed}: {overlaps:?}");
        assert!((overlaps[4] - 1.0).abs() < 0.05);
    }
}

#[test]
fn per_client_split_is_about_eighty_twenty() {
    let data = blobs(10, 100, 2);
    let shards = partition_by_classes(&data, &spec(20, 2, 2), &mut stream(2, Purpose::Partition, 0, 0)).unwrap();
    for s in &shards {
        let frac = s.test.len() as f64 / (s.train.len() + s.test.len()) as f64;
        assert!((frac - 0.2).abs() < 0.05, "client {}: {frac}", s.client_id);
        assert_eq!(s.train.class_counts().iter().filter(|&&c| c > 0).count(), 2);
        assert_eq!(s.test.class_counts().iter().filter(|&&c| c > 0).count(), 2);
    }
}

#[test]
fn lognormal_allocation_golden_and_conservation() {
    let v = lognormal_allocate(1000, 10, 1.0, &mut stream(42, Purpose::Partition, 0, 0)).unwrap();
    assert_eq!(v, vec![89, 42, 51, 109, 96, 429, 19, 69, 25, 71]);
    for (total, n, sigma) in [(1000, 10, 1.0), (37, 5, 2.5), (12, 12, 3.0), (101, 7, 0.0)] {
        let v = lognormal_allocate(total, n, sigma, &mut stream(total as u64, Purpose::Partition, 0, 0)).unwrap();
        assert_eq!(v.iter().sum::<usize>(), total);
        assert!(v.iter().all(|&c| c >= 1));
        if sigma == 0.0 {
            let (lo, hi) = (v.iter().min().unwrap(), v.iter().max().unwrap());
            assert!(hi - lo <= 1);
        }
    }
    assert!(lognormal_allocate(5, 6, 1.0, &mut stream(0, Purpose::Partition, 0, 0)).is_err());
    assert!(lognormal_allocate(50, 6, -1.0, &mut stream(0, Purpose::Partition, 0, 0)).is_err());
}

#[test]
fn lognormal_partition_keeps_every_holder_nonempty() {
    let data = blobs(4, 60, 8);
    let s = PartitionSpec {
        allocation: Allocation::LogNormal { sigma: 2.0 },
        ..spec(8, 2, 8)
    };
    let shards = partition_by_classes(&data, &s, &mut stream(8, Purpose::Partition, 0, 0)).unwrap();
    for sh in &shards {
        assert!(sh.train.len() >= 2 && !sh.test.is_empty());
    }
    let sizes: BTreeSet<usize> = shards.iter().map(|s| s.train.len() + s.test.len()).collect();
    assert!(sizes.len() > 2, "log-normal shares should differ: {sizes:?}");
}
