mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semtree::{build_index, build_tree_with_report, dbscan, DbscanParams, Metric, NOISE};

type Distance = fn(&[f64], &[f64]) -> f64;

fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    // a few clumps plus uniform background, so instances have real clusters
    let centers: Vec<Vec<f64>> = (0..rng.random_range(1..6))
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    (0..n)
        .map(|_| {
            if rng.random_bool(0.8) {
                let c = &centers[rng.random_range(0..centers.len())];
                c.iter().map(|x| x + rng.random_range(-0.15..0.15)).collect()
            } else {
                (0..dim).map(|_| rng.random_range(-1.2..1.2)).collect()
            }
        })
        .collect()
}

fn flatten(points: &[Vec<f64>]) -> Vec<f64> {
    points.iter().flatten().copied().collect()
}

fn as_options(assignment: &[u32]) -> Vec<Option<u32>> {
    assignment.iter().map(|&c| (c != NOISE).then_some(c)).collect()
}

#[test]
fn single_passes_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..60 {
        let n = rng.random_range(1..400);
        let (metric, dim, dist): (Metric, usize, Distance) = if case % 4 == 3 {
            (Metric::Cosine, rng.random_range(2..6), oracles::cosine)
        } else {
            (Metric::L2, 2, oracles::l2)
        };
        let mut points = random_points(&mut rng, n, dim);
        if metric == Metric::Cosine {
            // keep every vector away from the origin
            for p in &mut points {
                p[0] += 3.0;
            }
        }
        let eps = if metric == Metric::Cosine {
            rng.random_range(0.0005..0.05)
        } else {
            rng.random_range(0.01..0.3)
        };
        let minpts = rng.random_range(1..10);
        let index = build_index(flatten(&points), dim, metric).unwrap();
        let layer = dbscan(&index, eps, minpts).unwrap();
        let expected = oracles::brute_dbscan(&points, eps, minpts, dist);
        assert!(
            oracles::same_partition(&as_options(&layer.assignment), &expected),
            "case {case}: n={n} eps={eps} minpts={minpts}"
        );
    }
}

#[test]
fn range_queries_match_linear_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for dim in [1, 2, 3, 8, 20] {
        let points = random_points(&mut rng, 300, dim);
        let index = build_index(flatten(&points), dim, Metric::L2).unwrap();
        for _ in 0..40 {
            let i = rng.random_range(0..points.len());
            let eps = rng.random_range(0.0..0.5);
            let mut got = index.range_query(i, eps);
            got.sort_unstable();
            assert_eq!(got, oracles::linear_range(&points, i, eps, oracles::l2), "dim {dim}");
            assert_eq!(index.count_within(i, eps, usize::MAX), got.len());
        }
    }
}

#[test]
fn every_pass_and_layer_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut built = 0;
    for case in 0..12 {
        let n = rng.random_range(20..200);
        let points = random_points(&mut rng, n, 2);
        let params = DbscanParams::new(rng.random_range(0.02..0.08), rng.random_range(0.01..0.05), rng.random_range(2..7), Metric::L2);
        let index = build_index(flatten(&points), 2, Metric::L2).unwrap();
        let Ok((tree, report)) = build_tree_with_report(&index, &params) else {
            continue;
        };
        built += 1;
        for pass in &report.passes {
            let expected = oracles::brute_dbscan(&points, pass.epsilon, params.minpts, oracles::l2);
            let clusters = expected.iter().flatten().max().map_or(0, |m| m + 1);
            let noise = expected.iter().filter(|c| c.is_none()).count();
            assert_eq!((pass.cluster_count, pass.noise_count), (clusters, noise), "case {case} pass {}", pass.pass);
        }
        for layer in tree.layers() {
            if tree.has_synthetic_root() && layer.layer_index == tree.layers().len() - 1 {
                continue;
            }
            let expected = oracles::brute_dbscan(&points, layer.epsilon, params.minpts, oracles::l2);
            assert!(oracles::same_partition(&as_options(&layer.assignment), &expected), "case {case} layer {}", layer.layer_index);
        }
    }
    assert!(built >= 8, "only {built} trees built");
}
