mod common;

use common::*;
use hiperformer::attention::{Pma, SetBlock};
use hiperformer::harness::{
    check_equivariance, is_hierarchical_permutation, random_hierarchical_permutation, LabelMode, SeriesPermutation, TOL_F32,
    TOL_F64,
};
use hiperformer::model::{self_att_c, ClassAssignment, HiPerformer, ModelConfig, Variant};
use hiperformer::numerics::rng::standard_normal;
use hiperformer::numerics::{ParamStore, Tape, Tensor};
use proptest::prelude::*;

fn max_row_change(a: &Tensor<f64>, b: &Tensor<f64>, row: usize) -> f64 {
    let n = a.len() / a.shape()[0];
    a.data()[row * n..(row + 1) * n]
        .iter()
        .zip(&b.data()[row * n..(row + 1) * n])
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Features before and after perturbing the input of series `j`.
fn perturb_series(model: &HiPerformer<f64>, c: &ClassAssignment, j: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    let x = randn(&[c.len(), 5, 3], &mut r);
    let mut x2 = x.clone();
    let row = 5 * 3;
    for v in &mut x2.data_mut()[j * row..(j + 1) * row] {
        *v += 0.5 * standard_normal(&mut r);
    }
    (model.features(&x, c).unwrap(), model.features(&x2, c).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn full_variant_commutes_with_hierarchical_permutations(
        sizes in prop::collection::vec(1usize..4, 1..5),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let c = interleaved_labels(&sizes, &mut r);
        let model = small_model(Variant::Full, seed % 7);
        let x = randn(&[c.len(), 5, 3], &mut r);
        let p = random_hierarchical_permutation(&c, seed);
        prop_assert!(is_hierarchical_permutation(&p, &c));
        let v = check_equivariance(&model, &x, &c, &p, TOL_F64, LabelMode::Travel).unwrap();
        prop_assert!(v.pass, "deviation {}", v.deviation);
    }

    #[test]
    fn output_shapes_for_any_set_size(n_classes in 1usize..=4, extra in 0usize..=8, seed in 0u64..1000) {
        let mut r = rng(seed);
        let mut sizes = vec![1; n_classes];
        for k in 0..extra {
            sizes[k % n_classes] += 1;
        }
        let s: usize = sizes.iter().sum();
        prop_assume!((2..=12).contains(&s));
        let c = interleaved_labels(&sizes, &mut r);
        let model = small_model(Variant::Full, 3);
        let x = randn(&[s, 5, 3], &mut r);
        let f = model.predict(&x, &c).unwrap();
        prop_assert_eq!(f.mean.shape(), &[s, 3, 2]);
        prop_assert_eq!(f.covariance.shape(), &[s, s, 3, 2]);
        prop_assert!(f.mean.is_finite() && f.covariance.is_finite());
        f.validate().unwrap();
    }
}

#[test]
fn wo_class_commutes_with_every_permutation() {
    let model = small_model(Variant::WoClass, 1);
    let mut r = rng(21);
    let c = interleaved_labels(&[2, 3, 1], &mut r);
    let x = randn(&[6, 5, 3], &mut r);
    for _ in 0..30 {
        let p = SeriesPermutation::random(6, &mut r);
        let v = check_equivariance(&model, &x, &c, &p, TOL_F64, LabelMode::Fixed).unwrap();
        assert!(v.pass, "{}", v.to_json_line());
    }
}

#[test]
fn fixed_labels_break_full_variant_on_cross_class_swaps() {
    let model = small_model(Variant::Full, 2);
    let c = ClassAssignment::new(["A", "A", "B", "B", "B"]).unwrap();
    let x = randn(&[5, 5, 3], &mut rng(22));
    // A1 <-> B1 while labels stay at their positions
    let p = SeriesPermutation::new(vec![2, 1, 0, 3, 4]).unwrap();
    assert!(!is_hierarchical_permutation(&p, &c));
    let v = check_equivariance(&model, &x, &c, &p, TOL_F64, LabelMode::Fixed).unwrap();
    assert!(!v.pass);
    assert!(v.deviation > 1e-6);
    assert!(v.offending.is_some());
    // within-class swaps remain fine with fixed labels
    let q = SeriesPermutation::new(vec![1, 0, 4, 2, 3]).unwrap();
    assert!(check_equivariance(&model, &x, &c, &q, TOL_F64, LabelMode::Fixed).unwrap().pass);
}

#[test]
fn injected_fault_is_caught() {
    let mut model = small_model(Variant::Full, 3);
    model.fault = Some(1e-3);
    let c = ClassAssignment::new(["A", "A", "B"]).unwrap();
    let x = randn(&[3, 5, 3], &mut rng(23));
    let p = SeriesPermutation::new(vec![1, 0, 2]).unwrap();
    let v = check_equivariance(&model, &x, &c, &p, TOL_F64, LabelMode::Travel).unwrap();
    assert!(!v.pass);
    // swapping neighbours shifts their feature bias by exactly the fault size
    assert!(v.deviation >= 1e-3 * (1.0 - 1e-9), "{}", v.deviation);
    assert!(["features", "mean", "covariance"].contains(&v.offending.as_ref().unwrap().quantity.as_str()));
    assert!(check_equivariance(&model, &x, &c, &SeriesPermutation::identity(3), TOL_F64, LabelMode::Travel)
        .unwrap()
        .pass);
}

#[test]
fn att_t_and_zero_layers_have_no_cross_series_path() {
    let c = ClassAssignment::new(["A", "B", "A", "B"]).unwrap();
    let att_t = small_model(Variant::AttT, 4);
    let shallow = HiPerformer::<f64>::new_unchecked_depth(
        ModelConfig {
            n_layers: 0,
            ..small_config(Variant::Full)
        },
        4,
    )
    .unwrap();
    for model in [&att_t, &shallow] {
        let (a, b) = perturb_series(model, &c, 1, 40);
        assert!(max_row_change(&a, &b, 1) > 1e-6);
        for i in [0, 2, 3] {
            assert_eq!(max_row_change(&a, &b, i), 0.0, "series {i}");
        }
    }
    assert!(HiPerformer::<f64>::new(
        ModelConfig {
            n_layers: 0,
            ..small_config(Variant::Full)
        },
        0
    )
    .is_err());
}

#[test]
fn cross_series_paths_exist_where_expected() {
    let c = ClassAssignment::new(["A", "B", "A", "B"]).unwrap();
    // w/o-class mixes every series
    let (a, b) = perturb_series(&small_model(Variant::WoClass, 5), &c, 1, 41);
    for i in 0..4 {
        assert!(max_row_change(&a, &b, i) > 1e-8, "series {i}");
    }
    // full: same class via the series block, other class via the class block
    let (a, b) = perturb_series(&small_model(Variant::Full, 5), &c, 1, 41);
    for i in 0..4 {
        assert!(max_row_change(&a, &b, i) > 1e-8, "series {i}");
    }
}

#[test]
fn class_block_output_is_constant_within_a_class() {
    let cfg = small_config(Variant::Full);
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(50);
    let pool = Pma::new(&mut store, "pool", cfg.attention(), 1, &mut r);
    let block = SetBlock::new(&mut store, "block", cfg.attention(), cfg.set_block, &mut r).unwrap();
    let c = ClassAssignment::new(["x", "y", "x", "z", "y", "x"]).unwrap();
    let layout = c.layout();
    let mut tape = Tape::new(&store);
    let m = tape.leaf(randn(&[6, 4, cfg.d_model], &mut r));
    let out = self_att_c(&mut tape, &pool, &block, m, &layout).unwrap();
    let v = tape.value(out);
    assert_eq!(v.shape(), &[6, 4, cfg.d_model]);
    let row = 4 * cfg.d_model;
    for range in layout.class_ranges() {
        let first = &v.data()[range.start * row..(range.start + 1) * row];
        for i in range {
            assert_eq!(&v.data()[i * row..(i + 1) * row], first);
        }
    }
}

#[test]
fn reordering_classes_and_members_moves_outputs() {
    let model = small_model(Variant::Full, 6);
    let c = ClassAssignment::new(["A", "A", "A", "B", "B", "C"]).unwrap();
    let x = randn(&[6, 5, 3], &mut rng(60));
    let z = model.features(&x, &c).unwrap();
    // swap two members of A; then move block C to the front
    for map in [vec![1, 0, 2, 3, 4, 5], vec![5, 3, 4, 0, 1, 2], vec![5, 4, 3, 2, 0, 1]] {
        let p = SeriesPermutation::new(map).unwrap();
        assert!(is_hierarchical_permutation(&p, &c));
        let pz = model.features(&p.apply(&x).unwrap(), &p.apply_labels(&c).unwrap()).unwrap();
        assert!(pz.max_abs_diff(&p.apply(&z).unwrap()).unwrap() <= TOL_F64);
    }
}

#[test]
fn single_precision_equivariance_within_its_tolerance() {
    let model = HiPerformer::<f32>::new(small_config(Variant::Full), 7).unwrap();
    let c = ClassAssignment::new(["A", "B", "A", "B", "C"]).unwrap();
    let x: Tensor<f32> = randn(&[5, 5, 3], &mut rng(70)).cast();
    for seed in 0..10 {
        let p = random_hierarchical_permutation(&c, seed);
        let v = check_equivariance(&model, &x, &c, &p, TOL_F32, LabelMode::Travel).unwrap();
        assert!(v.pass, "{}", v.to_json_line());
    }
}

#[test]
fn mismatched_inputs_are_rejected() {
    let model = small_model(Variant::Full, 8);
    let c = ClassAssignment::new(["A", "B"]).unwrap();
    assert!(model.features(&Tensor::zeros(&[3, 5, 3]), &c).is_err());
    assert!(model.features(&Tensor::zeros(&[2, 4, 3]), &c).is_err());
    assert!(model.features(&Tensor::zeros(&[2, 5, 2]), &c).is_err());
}
