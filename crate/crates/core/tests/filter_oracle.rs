use brainex_core::densecrf::{gaussian_filter_fast, gaussian_filter_naive, Features};
use brainex_core::rng::rng_from;
use rand::Rng;

fn random_instance(seed: u64, n: usize, dim: usize, extent: f64, channels: usize) -> (Features, Vec<f64>) {
    let mut rng = rng_from(seed);
    let f: Vec<f64> = (0..n * dim).map(|_| rng.random::<f64>() * extent).collect();
    let v: Vec<f64> = (0..n * channels).map(|_| rng.random::<f64>()).collect();
    (Features::new(dim, f).unwrap(), v)
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

#[test]
fn fast_matches_naive_on_random_points() {
    for dim in [3, 4] {
        for (seed, n, extent) in [(1u64, 500, 3.0), (2, 500, 6.0), (3, 10_000, 10.0)] {
            let (f, v) = random_instance(seed * 10 + dim as u64, n, dim, extent, 1);
            let exact = gaussian_filter_naive(&v, 1, &f).unwrap();
            let fast = gaussian_filter_fast(&v, 1, &f).unwrap();
            let err = rel_l2(&fast, &exact);
            println!("dim {dim} n {n} extent {extent}: relative L2 error {err:.4}");
            assert!(err <= 0.05, "dim {dim} extent {extent}: {err}");
        }
    }
}

#[test]
fn fast_filter_is_order_invariant() {
    let (f, v) = random_instance(7, 200, 4, 4.0, 2);
    let out = gaussian_filter_fast(&v, 2, &f).unwrap();
    let n = f.len();
    let perm: Vec<usize> = (0..n).map(|i| (i * 37 + 11) % n).collect();
    let fp: Vec<f64> = perm.iter().flat_map(|&i| f.point(i).to_vec()).collect();
    let vp: Vec<f64> = perm.iter().flat_map(|&i| v[2 * i..2 * i + 2].to_vec()).collect();
    let outp = gaussian_filter_fast(&vp, 2, &Features::new(4, fp).unwrap()).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        for c in 0..2 {
            let (a, b) = (outp[2 * k + c], out[2 * i + c]);
            assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "point {i}: {a} vs {b}");
        }
    }
}

#[test]
fn constant_field_is_constant_after_degree_normalization() {
    let (f, _) = random_instance(9, 1000, 3, 5.0, 1);
    let ones = vec![1.0; f.len()];
    let threes = vec![3.0; f.len()];
    let deg = gaussian_filter_fast(&ones, 1, &f).unwrap();
    let out = gaussian_filter_fast(&threes, 1, &f).unwrap();
    let worst = out.iter().zip(&deg).map(|(o, d)| (o / d / 3.0 - 1.0).abs()).fold(0.0, f64::max);
    assert!(worst < 0.05, "{worst}");
}
