use brainex_core::densecrf::{
    exact_map_bruteforce, gibbs_energy, infer, meanfield_step, unary_from_prob, CrfParams, FeatureSet,
    FilterKind, Normalization, Pairwise,
};
use brainex_core::phantom::{generate_phantom, PhantomConfig};
use brainex_core::rng::rng_from;
use brainex_core::{math, Grid, LabelVolume, ProbVolume, Volume3D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const SHAPES: [[usize; 3]; 5] = [[3, 2, 2], [3, 3, 1], [4, 3, 1], [2, 2, 3], [5, 2, 1]];

fn random_image(rng: &mut ChaCha8Rng, g: Grid) -> Volume3D {
    Volume3D::new(g, (0..g.len()).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// Binary probabilities whose log-odds favour a random label by at least
/// `margin`.
fn dominant_probs(rng: &mut ChaCha8Rng, g: Grid, margin: f64) -> ProbVolume {
    let mut data = Vec::new();
    for _ in 0..g.len() {
        let m = margin + rng.random::<f64>() * 5.0;
        let p = 1.0 / (1.0 + math::exp(-m));
        if rng.random::<bool>() {
            data.extend([p, 1.0 - p]);
        } else {
            data.extend([1.0 - p, p]);
        }
    }
    ProbVolume::new(g, 2, data).unwrap()
}

fn random_probs(rng: &mut ChaCha8Rng, g: Grid) -> ProbVolume {
    let mut data = Vec::new();
    for _ in 0..g.len() {
        let p: f64 = rng.random();
        data.extend([p, 1.0 - p]);
    }
    ProbVolume::new(g, 2, data).unwrap()
}

/// Independent energy: builds the full weight matrix, then sums.
fn reference_energy(x: &[u8], unary: &[f64], feats: &FeatureSet, p: &CrfParams) -> f64 {
    let n = x.len();
    let k = |f: &brainex_core::densecrf::Features, i: usize, j: usize| {
        let d: f64 = f.point(i).iter().zip(f.point(j)).map(|(a, b)| (a - b).powi(2)).sum();
        (-d / 2.0).exp()
    };
    let degree = |f: &brainex_core::densecrf::Features| -> Vec<f64> {
        (0..n).map(|i| (0..n).map(|j| k(f, i, j)).sum()).collect()
    };
    let (da, ds) = (degree(feats.appearance()), degree(feats.smoothness()));
    let mut e = 0.0;
    for i in 0..n {
        e += unary[2 * i + x[i] as usize];
        for j in 0..n {
            if i < j && x[i] != x[j] {
                let (mut ka, mut ks) = (k(feats.appearance(), i, j), k(feats.smoothness(), i, j));
                if p.normalization == Normalization::Symmetric {
                    ka /= (da[i] * da[j]).sqrt();
                    ks /= (ds[i] * ds[j]).sqrt();
                }
                e += p.w1 * ka + p.w2 * ks;
            }
        }
    }
    e
}

#[test]
fn energy_matches_independent_implementation() {
    let mut rng = rng_from(41);
    for (t, shape) in SHAPES.iter().cycle().take(20).enumerate() {
        let g = Grid::new(*shape, [1.0; 3]).unwrap();
        let params = if t % 2 == 0 {
            CrfParams::default()
        } else {
            CrfParams { normalization: Normalization::None, ..CrfParams::default() }
        };
        let feats = FeatureSet::from_image(&random_image(&mut rng, g), &params).unwrap();
        let unary = unary_from_prob(&random_probs(&mut rng, g), params.unary_floor);
        let x: Vec<u8> = (0..g.len()).map(|_| rng.random_range(0..2)).collect();
        let lab = LabelVolume::new(g, 2, x.clone()).unwrap();
        let e = gibbs_energy(&lab, &unary, &feats, &params).unwrap();
        let r = reference_energy(&x, unary.data(), &feats, &params);
        assert!((e - r).abs() < 1e-9 * (1.0 + r.abs()), "{e} vs {r}");
    }
}

#[test]
fn bruteforce_is_global_minimum_on_3x3() {
    let mut rng = rng_from(43);
    let g = Grid::new([3, 3, 1], [1.0; 3]).unwrap();
    for _ in 0..10 {
        let params = CrfParams::default();
        let feats = FeatureSet::from_image(&random_image(&mut rng, g), &params).unwrap();
        let unary = unary_from_prob(&random_probs(&mut rng, g), params.unary_floor);
        let best = exact_map_bruteforce(&unary, &feats, &params).unwrap();
        let best_e = reference_energy(best.data(), unary.data(), &feats, &params);
        for code in 0u32..512 {
            let x: Vec<u8> = (0..9).map(|i| ((code >> (8 - i)) & 1) as u8).collect();
            assert!(reference_energy(&x, unary.data(), &feats, &params) >= best_e - 1e-9);
        }
    }
}

#[test]
fn dominant_unaries_give_exact_map() {
    let params = CrfParams::default();
    let mut rng = rng_from(47);
    for t in 0..100 {
        let g = Grid::new(SHAPES[t % SHAPES.len()], [1.0; 3]).unwrap();
        let probs = dominant_probs(&mut rng, g, params.w1 + params.w2);
        let image = random_image(&mut rng, g);
        let (_, x) = infer(&probs, &image, &params, FilterKind::Naive).unwrap();
        let feats = FeatureSet::from_image(&image, &params).unwrap();
        let unary = unary_from_prob(&probs, params.unary_floor);
        let map = exact_map_bruteforce(&unary, &feats, &params).unwrap();
        assert_eq!(x.data(), map.data(), "instance {t}");
    }
}

#[test]
fn inference_does_not_raise_energy_against_unary_labeling() {
    let params = CrfParams::default();
    let mut rng = rng_from(53);
    let mut ok = 0;
    for t in 0..100 {
        let g = Grid::new(SHAPES[t % SHAPES.len()], [1.0; 3]).unwrap();
        let probs = random_probs(&mut rng, g);
        let image = random_image(&mut rng, g);
        let (_, x) = infer(&probs, &image, &params, FilterKind::Naive).unwrap();
        let feats = FeatureSet::from_image(&image, &params).unwrap();
        let unary = unary_from_prob(&probs, params.unary_floor);
        let e_inf = gibbs_energy(&x, &unary, &feats, &params).unwrap();
        let e_un = gibbs_energy(&probs.argmax(), &unary, &feats, &params).unwrap();
        if e_inf <= e_un + 1e-12 {
            ok += 1;
        }
    }
    assert!(ok >= 95, "{ok}/100");
}

#[test]
fn meanfield_outputs_stay_on_the_simplex() {
    let mut rng = rng_from(59);
    let g = Grid::new([6, 5, 4], [1.0; 3]).unwrap();
    for kind in [FilterKind::Naive, FilterKind::Fast, FilterKind::Lattice] {
        let params = CrfParams::default();
        let feats = FeatureSet::from_image(&random_image(&mut rng, g), &params).unwrap();
        let probs = random_probs(&mut rng, g);
        let unary = unary_from_prob(&probs, params.unary_floor);
        let pw = Pairwise::new(&feats, kind, params.normalization).unwrap();
        let q = meanfield_step(&probs, &unary, &pw, &params).unwrap();
        for i in 0..g.len() {
            let v = q.voxel(i);
            assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_weights_are_a_fixed_point() {
    let mut rng = rng_from(61);
    let g = Grid::new([4, 4, 2], [1.0; 3]).unwrap();
    let probs = random_probs(&mut rng, g);
    let image = random_image(&mut rng, g);
    for iterations in [1, 3] {
        let params = CrfParams { w1: 0.0, w2: 0.0, iterations, ..CrfParams::default() };
        let (q, _) = infer(&probs, &image, &params, FilterKind::Fast).unwrap();
        for (a, b) in q.data().iter().zip(probs.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn single_voxel_is_unary_softmax() {
    let g = Grid::new([1, 1, 1], [1.0; 3]).unwrap();
    let probs = ProbVolume::new(g, 2, vec![0.3, 0.7]).unwrap();
    let image = Volume3D::new(g, vec![0.5]).unwrap();
    let (q, x) = infer(&probs, &image, &CrfParams::default(), FilterKind::Fast).unwrap();
    assert!((q.voxel(0)[1] - 0.7).abs() < 1e-12);
    assert_eq!(x.data(), &[1]);
}

#[test]
fn label_permutation_is_equivariant() {
    let mut rng = rng_from(67);
    let g = Grid::new([5, 4, 3], [1.0; 3]).unwrap();
    let mut data = Vec::new();
    for _ in 0..g.len() {
        let a: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let s: f64 = a.iter().sum();
        data.extend(a.map(|v| v / s));
    }
    let probs = ProbVolume::new(g, 3, data.clone()).unwrap();
    let perm = [2usize, 0, 1];
    let permuted: Vec<f64> = data.chunks(3).flat_map(|c| perm.map(|p| c[p])).collect();
    let probs_p = ProbVolume::new(g, 3, permuted).unwrap();
    let image = random_image(&mut rng, g);
    for kind in [FilterKind::Naive, FilterKind::Fast] {
        let (q, x) = infer(&probs, &image, &CrfParams::default(), kind).unwrap();
        let (qp, xp) = infer(&probs_p, &image, &CrfParams::default(), kind).unwrap();
        for i in 0..g.len() {
            for (k, &p) in perm.iter().enumerate() {
                assert!((qp.voxel(i)[k] - q.voxel(i)[p]).abs() < 1e-12);
            }
            assert_eq!(perm[xp.data()[i] as usize], x.data()[i] as usize);
        }
    }
}

#[test]
fn consensus_input_is_unchanged() {
    let g = Grid::new([8, 8, 8], [1.0; 3]).unwrap();
    let probs = ProbVolume::new(g, 2, [0.01, 0.99].repeat(g.len())).unwrap();
    let image = Volume3D::new(g, vec![0.6; g.len()]).unwrap();
    let (_, x) = infer(&probs, &image, &CrfParams::default(), FilterKind::Fast).unwrap();
    assert_eq!(x.count(1), g.len());
}

#[test]
fn grid_path_matches_naive_inference() {
    let (image, mask) = generate_phantom(&PhantomConfig::default()).unwrap();
    let g = Grid::new([12, 12, 12], image.spacing()).unwrap();
    let o = [24, 38, 12];
    let crop = Volume3D::from_fn(g, |x, y, z| image.get(x + o[0], y + o[1], z + o[2])).unwrap();
    let mut rng = rng_from(71);
    let mut data = Vec::new();
    for i in 0..g.len() {
        let c = g.coords(i);
        let inside = mask.get(c[0] + o[0], c[1] + o[1], c[2] + o[2]) == 1;
        let p = if inside { 0.75 } else { 0.25 } + (rng.random::<f64>() - 0.5) * 0.4;
        data.extend([1.0 - p, p]);
    }
    let probs = ProbVolume::new(g, 2, data).unwrap();
    let params = CrfParams::default();
    let (qn, _) = infer(&probs, &crop, &params, FilterKind::Naive).unwrap();
    let (qf, _) = infer(&probs, &crop, &params, FilterKind::Fast).unwrap();
    let worst = qn.data().iter().zip(qf.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn island_is_removed_and_energy_drops() {
    let (image, mask) = generate_phantom(&PhantomConfig::default()).unwrap();
    let g = Grid::new([20, 20, 20], image.spacing()).unwrap();
    let o = [22, 18, 14];
    let crop = Volume3D::from_fn(g, |x, y, z| image.get(x + o[0], y + o[1], z + o[2])).unwrap();
    let mut data = Vec::new();
    for i in 0..g.len() {
        let c = g.coords(i);
        let p = if mask.get(c[0] + o[0], c[1] + o[1], c[2] + o[2]) == 1 { 0.95 } else { 0.05 };
        data.extend([1.0 - p, p]);
    }
    let island = g.index(10, 10, 10);
    assert_eq!(data[2 * island + 1], 0.95, "fixture voxel must lie inside the brain");
    data[2 * island] = 0.6;
    data[2 * island + 1] = 0.4;
    let probs = ProbVolume::new(g, 2, data).unwrap();
    let params = CrfParams::default();
    let (_, x) = infer(&probs, &crop, &params, FilterKind::Fast).unwrap();
    assert_eq!(x.data()[island], 1);
    let feats = FeatureSet::from_image(&crop, &params).unwrap();
    let unary = unary_from_prob(&probs, params.unary_floor);
    let before = gibbs_energy(&probs.argmax(), &unary, &feats, &params).unwrap();
    let after = gibbs_energy(&x, &unary, &feats, &params).unwrap();
    assert!(after < before, "{after} vs {before}");
}
