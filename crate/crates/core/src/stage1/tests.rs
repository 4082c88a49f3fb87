use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{Arch, ModelParams};
use crate::scene::{generate_scene, type_prototypes, SceneSpec};
use crate::tensor::grad_check;
use crate::tokenize::sam_tokenize;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn weights_for_ten_five_one() {
    let (k, tau, w) = group_weights(&[10, 5, 1]).unwrap();
    assert!(close(&k, &[0.9, 0.4, 0.0], 1e-15));
    assert!(close(&tau, &[0.1, 0.6, 1.0], 1e-15));
    assert!(close(&w, &[0.1 / 1.7, 0.6 / 1.7, 1.0 / 1.7], 1e-15));
    assert!(close(&w, &[0.0588, 0.3529, 0.5882], 1e-4));
}

#[test]
fn single_and_symmetric_groups() {
    assert_eq!(group_weights(&[7]).unwrap().2, vec![1.0]);
    assert_eq!(group_weights(&[5, 5]).unwrap().2, vec![0.5, 0.5]);
    assert!(group_weights(&[]).is_err());
    assert!(group_weights(&[0, 0]).is_err());
}

proptest! {
    #[test]
    fn weight_table_invariants(counts in proptest::collection::vec(1usize..200, 1..20)) {
        let (_, _, w) = group_weights(&counts).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for a in 0..counts.len() {
            for b in 0..counts.len() {
                if counts[a] <= counts[b] {
                    prop_assert!(w[a] >= w[b]);
                }
                if counts[a] == counts[b] {
                    prop_assert_eq!(w[a], w[b]);
                }
            }
        }
    }

    #[test]
    fn loss_is_permutation_invariant(seed in 0u64..500, m in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f2: Vec<f64> = (0..m * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f3: Vec<f64> = (0..m * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..3.0)).collect();
        let perm: Vec<usize> = (0..m).rev().collect();
        let permute = |v: &[f64], w: usize| perm.iter().flat_map(|&i| v[i * w..(i + 1) * w].to_vec()).collect::<Vec<_>>();
        let eval = |f2: Vec<f64>, f3: Vec<f64>, c: &[f64]| {
            let t = Tape::new();
            let a = t.constant(Tensor::matrix(m, 3, f2));
            let b = t.constant(Tensor::matrix(m, 3, f3));
            let l = stage1_loss(&t, a, b, c, 1.0).unwrap();
            let v = t.value(l).item();
            v
        };
        let base = eval(f2.clone(), f3.clone(), &c);
        let p = eval(permute(&f2, 3), permute(&f3, 3), &permute(&c, 1));
        prop_assert!((base - p).abs() <= 1e-12 * base.abs().max(1.0));
    }
}

fn table_from_counts(counts: &[usize]) -> WeightTable {
    let (k, tau, w) = group_weights(counts).unwrap();
    WeightTable {
        k_groups: counts.len(),
        seed: 0,
        group_of_region: vec![],
        counts: counts.to_vec(),
        k,
        tau,
        w,
        centroids: vec![vec![0.0]; counts.len()],
    }
}

#[test]
fn mean_one_uniform_groups_match_unweighted_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k_groups in [1, 3, 7, 16, 49] {
        let table = table_from_counts(&vec![4; k_groups]);
        let groups: Vec<usize> = (0..10).map(|i| i % k_groups).collect();
        let c = region_coefficients(&table, &groups, ScaleMode::MeanOne).unwrap();
        let f2: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f3: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = Tape::new();
        let a = t.constant(Tensor::matrix(10, 4, f2));
        let b = t.constant(Tensor::matrix(10, 4, f3));
        let weighted = stage1_loss(&t, a, b, &c, 1.0).unwrap();
        let plain = stage1_loss(&t, a, b, &[1.0; 10], 1.0).unwrap();
        assert_eq!(t.value(weighted).item(), t.value(plain).item());
    }
}

#[test]
fn paper_literal_uses_raw_weights() {
    let table = table_from_counts(&[10, 5, 1]);
    let c = region_coefficients(&table, &[0, 2], ScaleMode::PaperLiteral).unwrap();
    assert_eq!(c, vec![table.w[0], table.w[2]]);
    let c1 = region_coefficients(&table, &[0, 2], ScaleMode::MeanOne).unwrap();
    assert!(close(&c1, &[3.0 * table.w[0], 3.0 * table.w[2]], 1e-12));
    assert!(region_coefficients(&table, &[3], ScaleMode::MeanOne).is_err());
}

#[test]
fn identical_features_give_zero_loss() {
    let t = Tape::new();
    let a = t.constant(Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 3.0]));
    let l = stage1_loss(&t, a, a, &[0.3, 2.0], 1.0).unwrap();
    assert_eq!(t.value(l).item(), 0.0);
    assert!(stage1_loss(&t, a, a, &[1.0], 1.0).is_err());
}

fn bundle_with_two_pixel_region() -> SceneBundle {
    let mut b = generate_scene(&SceneSpec::default()).unwrap();
    let pixels = b.width() * b.height();
    b.feature_dim = 2;
    b.region_count = 1;
    b.mask = vec![-1; pixels];
    b.feat2d = vec![0.0; pixels * 2];
    b.mask[10] = 0;
    b.mask[500] = 0;
    b.feat2d[20..22].copy_from_slice(&[1.0, 1.0]);
    b.feat2d[1000..1002].copy_from_slice(&[3.0, 3.0]);
    b
}

#[test]
fn mean_and_max_pooling() {
    let b = bundle_with_two_pixel_region();
    assert_eq!(pool_regions(&b, &[0], Pooling::Mean).unwrap().features.data(), &[2.0, 2.0]);
    assert_eq!(pool_regions(&b, &[0], Pooling::Max).unwrap().features.data(), &[3.0, 3.0]);
    assert!(matches!(pool_regions(&b, &[1], Pooling::Mean), Err(Error::Inconsistency(_))));
}

#[test]
fn noise_free_pooling_recovers_prototypes() {
    let spec = SceneSpec {
        noise_sigma: 0.0,
        seed: 3,
        ..SceneSpec::default()
    };
    let b = generate_scene(&spec).unwrap();
    let tokens = sam_tokenize(&b, 8).unwrap();
    let pooled = pool_region_features(&b, &tokens, Pooling::Mean).unwrap();
    let protos = type_prototypes(spec.feature_dim);
    for (row, tok) in tokens.tokens.iter().enumerate() {
        let ty = b.region_type(tok.region_id).unwrap() as usize;
        let expect: Vec<f64> = protos[ty].iter().map(|&v| f64::from(v as f32)).collect();
        assert_eq!(pooled.features.row_slice(row), &expect[..]);
    }
}

#[test]
fn knn_tokens_map_to_center_regions() {
    let b = generate_scene(&SceneSpec::default()).unwrap();
    let tokens = crate::tokenize::knn_tokenize(&b.points_f64(), 12, 16).unwrap();
    let regions = token_regions(&b, &tokens).unwrap();
    let ids = b.point_mask_ids().unwrap();
    for (t, r) in tokens.tokens.iter().zip(&regions) {
        assert_eq!(*r, ids[t.center_index.unwrap()].filter(|&r| r >= 0));
    }
    assert!(pool_region_features(&b, &tokens, Pooling::Mean).is_err());
}

fn small_arch() -> Arch {
    Arch {
        embed_dim: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        pointnet_hidden: 8,
        max_points_per_token: 8,
        feat2d_dim: 4,
    }
}

#[test]
fn projection_identity_and_zero() {
    let arch = Arch {
        feat2d_dim: 8,
        ..small_arch()
    };
    let mut p = ModelParams::init(&arch, 0).unwrap();
    let h = Tensor::matrix(2, 8, (0..16).map(|i| i as f64 - 4.0).collect());
    let mut eye = vec![0.0; 64];
    (0..8).for_each(|i| eye[i * 9] = 1.0);
    *p.get_mut("proj.w").unwrap() = Tensor::matrix(8, 8, eye);
    let run = |p: &ModelParams| {
        let t = Tape::new();
        let b = p.bind(&t);
        let out = project_3d(&b, t.constant(h.clone())).unwrap();
        let v = t.value(out).clone();
        v
    };
    assert_eq!(run(&p), h);
    *p.get_mut("proj.w").unwrap() = Tensor::zeros(&[8, 8]);
    assert!(run(&p).data().iter().all(|&v| v == 0.0));
}

#[test]
fn weight_table_is_deterministic_and_persists() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let feats: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let t = WeightTable::build(&feats, 4, 11).unwrap();
    assert_eq!(t, WeightTable::build(&feats, 4, 11).unwrap());
    assert_eq!(t.counts.iter().sum::<usize>(), 30);
    for (f, &g) in feats.iter().zip(&t.group_of_region) {
        assert_eq!(t.group_of(f).unwrap(), g);
    }
    let dir = tempfile::tempdir().unwrap();
    t.save(dir.path()).unwrap();
    assert_eq!(WeightTable::load(dir.path()).unwrap(), t);
    assert!(WeightTable::build(&feats[..3], 4, 0).is_err());
}

#[test]
fn stage1_loss_gradients_match_finite_differences() {
    let arch = small_arch();
    let mut p = ModelParams::init(&arch, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for param in p.params.values_mut() {
        param.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let b = generate_scene(&SceneSpec {
        n_objects: 3,
        feature_dim: 4,
        ..SceneSpec::default()
    })
    .unwrap();
    let tokens = sam_tokenize(&b, 8).unwrap();
    let inputs = TokenInputs::new(&b.points_f64(), &tokens, arch.max_points_per_token).unwrap();
    let target = pool_region_features(&b, &tokens, Pooling::Mean).unwrap().features;
    let coeffs: Vec<f64> = (0..tokens.len()).map(|i| 0.5 + i as f64).collect();
    let names: Vec<String> = p.params.keys().cloned().collect();
    let values: Vec<Tensor> = p.params.values().map(|q| q.value.clone()).collect();
    let check = grad_check(
        |tape, vars| {
            let bound = Bound::from_vars(tape, &arch, names.iter().cloned().zip(vars.iter().copied()));
            let f3 = forward_3d(&bound, &inputs)?;
            stage1_loss(tape, tape.constant(target.clone()), f3, &coeffs, 1.0)
        },
        &values,
        1e-5,
    )
    .unwrap();
    assert!(check.max_rel_err < 1e-4, "{check:?}");
}
