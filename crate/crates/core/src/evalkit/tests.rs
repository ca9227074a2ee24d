use super::*;
use crate::plantsim::{build_doe_dataset, DatasetKind};
use crate::trainloop::exp1_plans;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn v(x: &[f64]) -> ActionVec {
    ActionVec::new(x.to_vec()).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn angle_examples() {
    assert_eq!(angle(&v(&[0.3, -0.2, 1.0]), &v(&[0.3, -0.2, 1.0])).unwrap(), Some(0.0));
    assert!(close(angle(&v(&[1.0, 0.0, 0.0]), &v(&[0.0, 1.0, 0.0])).unwrap().unwrap(), 90.0, 1e-12));
    assert!(close(angle(&v(&[1.0, 0.0, 0.0]), &v(&[-1.0, 0.0, 0.0])).unwrap().unwrap(), 180.0, 1e-12));
    assert_eq!(angle(&v(&[0.0, 0.0, 0.0]), &v(&[1.0, 0.0, 0.0])).unwrap(), None);
    assert_eq!(angle(&v(&[1.0, 0.0, 0.0]), &v(&[0.0, 0.0, 0.0])).unwrap(), None);
    assert!(angle(&v(&[1.0, 0.0]), &v(&[1.0, 0.0, 0.0])).is_err());
}

#[test]
fn nearly_parallel_vectors_do_not_produce_nan() {
    let a = v(&[0.1, 0.2, 0.30000000000000004]);
    let b = v(&[0.2, 0.4, 0.6]);
    let t = angle(&a, &b).unwrap().unwrap();
    assert!(t.is_finite() && t < 1e-5);
}

#[test]
fn distance_examples() {
    assert_eq!(distance(&v(&[1.0, 2.0, 3.0]), &v(&[1.0, 2.0, 3.0])).unwrap(), 0.0);
    assert_eq!(distance(&v(&[1.0, 0.0, 0.0]), &v(&[0.0, 0.0, 0.0])).unwrap(), 1.0);
    assert!(close(distance(&v(&[1.0, 1.0, 1.0]), &v(&[0.0; 3])).unwrap(), 3f64.sqrt(), 1e-15));
}

#[test]
fn distance_2d_normalization() {
    let z = v(&[0.0; 3]);
    assert_eq!(distance_2d(&v(&[0.5, 0.5, 0.2]), &v(&[0.5, 0.5, 0.9]), (0, 1)).unwrap(), 0.0);
    assert_eq!(distance_2d(&v(&[1.0, 1.0, 0.0]), &z, (0, 1)).unwrap(), 1.0);
    assert!(close(distance_2d(&v(&[1.0, 0.0, 0.0]), &z, (0, 1)).unwrap(), 0.5f64.sqrt(), 1e-15));
    assert!(distance_2d(&z, &z, (1, 1)).is_err());
    assert!(distance_2d(&z, &z, (0, 3)).is_err());
}

#[test]
fn two_d_pairs_for_three_dims() {
    assert_eq!(dim_pairs(3), vec![(0, 1), (0, 2), (1, 2)]);
    assert_eq!(dim_pairs(3).len(), 3);
    assert_eq!(dim_pairs(4).len(), 6);
}

#[test]
fn metrics_2d_examples() {
    let t = v(&[0.4, -0.1, 0.7]);
    assert_eq!(metrics_2d(&t, &t).unwrap(), (0.0, 0.0));
    // projections: (1,1)v(1,0) 45°, (1,0)v(1,0) 0°, (1,0)v(0,0) → orthogonal 90°
    let (th, _) = metrics_2d(&v(&[1.0, 1.0, 0.0]), &v(&[1.0, 0.0, 0.0])).unwrap();
    assert!(close(th, 45.0, 1e-12));
    // pair (1,2) has zero projected truth and is skipped: mean of 45° and 0°
    let (th, _) = metrics_2d(&v(&[1.0, 0.0, 0.0]), &v(&[1.0, 1.0, 0.0])).unwrap();
    assert!(close(th, 22.5, 1e-12));
    assert!(metrics_2d(&v(&[0.0; 3]), &v(&[1.0, 0.0, 0.0])).is_err());
}

#[test]
fn q_examples() {
    for (theta, d, q) in [
        (16.13, 0.25, 0.13),
        (9.59, 0.17, 0.08),
        (8.68, 0.14, 0.07),
        (12.14, 0.20, 0.10),
        (23.89, 0.34, 0.19),
    ] {
        let got = overall_q(theta, d).unwrap();
        assert!(close(got, q, 0.005), "q({theta}, {d}) = {got}");
    }
    assert_eq!(overall_q(0.0, 0.7).unwrap(), 0.0);
    assert_eq!(overall_q(30.0, 0.0).unwrap(), 0.0);
    assert!(overall_q(-1.0, 0.5).is_err());
    assert!(overall_q(10.0, -0.5).is_err());
    assert!(overall_q(f64::NAN, 0.5).is_err());
    // harmonic mean of θ/180 and d equals d when they coincide
    assert!(close(overall_q(90.0, 0.5).unwrap(), 0.5, 1e-15));
}

fn pair(t: &[f64], p: &[f64]) -> ActionPair {
    ActionPair::new(v(t), v(p)).unwrap()
}

#[test]
fn evaluate_perfect_predictions() {
    let pairs = vec![pair(&[1.0, 0.0, 0.5], &[1.0, 0.0, 0.5]), pair(&[0.0, -1.0, 0.0], &[0.0, -1.0, 0.0])];
    let r = evaluate(&pairs, &[0, 1]).unwrap();
    let s = r.summary;
    assert_eq!([s.theta_2d, s.d_2d, s.q_2d, s.theta_3d, s.d_3d, s.q_3d], [0.0; 6]);
    assert_eq!(s.n_evaluated, 2);
    assert_eq!(s.n_excluded, 0);
    assert_eq!(r.per_vertex.len(), 2);
}

#[test]
fn evaluate_excludes_zero_truth() {
    let pairs = vec![pair(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]), pair(&[0.0; 3], &[0.2, 0.0, 0.0])];
    let r = evaluate(&pairs, &[3, 3]).unwrap();
    assert_eq!(r.summary.n_excluded, 1);
    assert_eq!(r.summary.n_evaluated, 1);
    assert!(close(r.summary.theta_3d, 90.0, 1e-12));
    // distances keep the excluded pair
    assert!(close(r.summary.d_3d, (2f64.sqrt() + 0.2) / 2.0, 1e-12));
}

#[test]
fn evaluate_two_stage_mean() {
    // vertex 0: three pairs at 0°, vertex 1: one pair at 90°
    let mut pairs = vec![pair(&[1.0, 0.0, 0.0], &[2.0, 0.0, 0.0]); 3];
    pairs.push(pair(&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]));
    let r = evaluate(&pairs, &[0, 0, 0, 1]).unwrap();
    assert!(close(r.summary.theta_3d, 45.0, 1e-12));
    assert!(close(r.per_vertex[0].metrics.theta_3d, 0.0, 1e-12));
    assert!(close(r.per_vertex[1].metrics.theta_3d, 90.0, 1e-12));
    let (_, q3) = r.summary.q_of_means();
    assert_eq!(r.q_of_means_3d, q3);
    assert!(evaluate(&[], &[]).is_err());
    assert!(evaluate(&pairs, &[0, 1]).is_err());
}

#[test]
fn q_is_mean_of_per_pair_values() {
    let pairs = vec![pair(&[1.0, 0.0, 0.0], &[1.5, 0.0, 0.0]), pair(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0])];
    let r = evaluate(&pairs, &[0, 0]).unwrap();
    let q2 = overall_q(90.0, 2f64.sqrt()).unwrap();
    assert!(close(r.summary.q_3d, q2 / 2.0, 1e-12));
    assert!((r.summary.q_3d - r.q_of_means_3d).abs() > 0.01);
}

fn random_unit_pairs(n: usize, seed: u64) -> Vec<ActionPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = || -> Vec<f64> { (0..3).map(|_| rng.sample(StandardNormal)).collect() };
    (0..n).map(|_| pair(&g(), &g())).collect()
}

#[test]
fn random_predictor_sits_at_ninety_degrees() {
    let pairs = random_unit_pairs(20_000, 1);
    let r = evaluate(&pairs, &vec![0; pairs.len()]).unwrap();
    assert!(close(r.summary.theta_3d, 90.0, 3.0), "{}", r.summary.theta_3d);
}

#[test]
fn aggregate_examples() {
    let mut a = MetricReport { theta_3d: 10.0, n_evaluated: 4, n_excluded: 1, ..Default::default() };
    assert_eq!(aggregate_seeds(&[a]).unwrap(), a);
    let b = MetricReport { theta_3d: 20.0, n_evaluated: 6, n_excluded: 0, ..Default::default() };
    let m = aggregate_seeds(&[a, b]).unwrap();
    assert_eq!(m.theta_3d, 15.0);
    assert_eq!(m.n_evaluated, 10);
    assert_eq!(m.n_excluded, 1);
    a.d_2d = 0.5;
    assert_eq!(aggregate_seeds(&[a, b]).unwrap().d_2d, 0.25);
    assert!(aggregate_seeds(&[]).is_err());
}

#[test]
fn report_csv() {
    let r = MetricReport { theta_2d: 1.5, d_2d: 0.25, q_2d: 0.0, theta_3d: 2.0, d_3d: 0.5, q_3d: 0.125, n_evaluated: 3, n_excluded: 1 };
    let mut buf = Vec::new();
    write_report_csv(&mut buf, &[("exp1".into(), r)]).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "label,theta_2d,d_2d,q_2d,theta_3d,d_3d,q_3d,n_evaluated,n_excluded\nexp1,1.5,0.25,0,2,0.5,0.125,3,1\n"
    );
}

#[test]
fn pca_line_and_centering() {
    let dir = [0.1, -0.3, 0.2, 0.0, 0.5, 0.0, 0.0, 0.1, -0.2, 0.4];
    let pts: Vec<LatentVec> = (0..12)
        .map(|i| LatentVec(std::array::from_fn(|d| 1.0 + (i as f64 - 3.0) * dir[d])))
        .collect();
    let (proj, pca) = pca_project(&pts, 2).unwrap();
    assert!(close(pca.explained_ratio[0], 1.0, 1e-12));
    assert!(pca.explained_ratio[1].abs() < 1e-12);
    let m0: f64 = proj.iter().map(|p| p[0]).sum::<f64>() / proj.len() as f64;
    let m1: f64 = proj.iter().map(|p| p[1]).sum::<f64>() / proj.len() as f64;
    assert!(m0.abs() < 1e-12 && m1.abs() < 1e-12);
    // largest-magnitude entry of each component is positive
    for c in &pca.components {
        let lead = c.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap();
        assert!(lead > 0.0);
    }
}

#[test]
fn pca_errors() {
    let same = vec![LatentVec([0.5; 10]); 5];
    assert!(pca_project(&same, 2).is_err());
    let two = vec![LatentVec([0.0; 10]), LatentVec([1.0; 10])];
    assert!(pca_project(&two, 2).is_err());
    assert!(pca_project(&two, 0).is_err());
}

proptest! {
    #[test]
    fn angle_symmetric_and_scale_invariant(t in proptest::array::uniform3(-2.0f64..2.0), p in proptest::array::uniform3(-2.0f64..2.0), c in 0.01f64..100.0) {
        prop_assume!(t.iter().any(|x| x.abs() > 1e-3) && p.iter().any(|x| x.abs() > 1e-3));
        let (tv, pv) = (v(&t), v(&p));
        let ab = angle(&tv, &pv).unwrap().unwrap();
        let ba = angle(&pv, &tv).unwrap().unwrap();
        prop_assert!(close(ab, ba, 1e-9));
        let scaled = v(&[c * p[0], c * p[1], c * p[2]]);
        prop_assert!(close(angle(&tv, &scaled).unwrap().unwrap(), ab, 1e-6));
        prop_assert!((0.0..=180.0).contains(&ab));
    }

    #[test]
    fn distance_triangle(a in proptest::array::uniform3(-2.0f64..2.0), b in proptest::array::uniform3(-2.0f64..2.0), c in proptest::array::uniform3(-2.0f64..2.0)) {
        let (a, b, c) = (v(&a), v(&b), v(&c));
        prop_assert!(distance(&a, &c).unwrap() <= distance(&a, &b).unwrap() + distance(&b, &c).unwrap() + 1e-12);
    }

    #[test]
    fn parallel_vectors_zero_in_2d_and_3d(t in proptest::array::uniform3(-2.0f64..2.0), c in 0.1f64..10.0) {
        prop_assume!(t.iter().all(|x| x.abs() > 1e-3));
        let tv = v(&t);
        let pv = v(&[c * t[0], c * t[1], c * t[2]]);
        prop_assert!(angle(&tv, &pv).unwrap().unwrap() < 1e-5);
        prop_assert!(metrics_2d(&tv, &pv).unwrap().0 < 1e-5);
    }

    #[test]
    fn q_in_unit_interval(theta in 0.0f64..=180.0, d in 0.0f64..=1.0) {
        let q = overall_q(theta, d).unwrap();
        prop_assert!((0.0..=1.0).contains(&q));
    }

    #[test]
    fn evaluate_permutation_invariant(seed in 0u64..1000, rot in 0usize..50) {
        let pairs = random_unit_pairs(50, seed);
        let vertex: Vec<usize> = (0..50).map(|i| i % 4).collect();
        let a = evaluate(&pairs, &vertex).unwrap().summary;
        let mut idx: Vec<usize> = (0..50).collect();
        idx.reverse();
        idx.rotate_left(rot);
        let p2: Vec<ActionPair> = idx.iter().map(|&i| pairs[i].clone()).collect();
        let v2: Vec<usize> = idx.iter().map(|&i| vertex[i]).collect();
        let b = evaluate(&p2, &v2).unwrap().summary;
        for (x, y) in [(a.theta_2d, b.theta_2d), (a.d_2d, b.d_2d), (a.q_2d, b.q_2d), (a.theta_3d, b.theta_3d), (a.d_3d, b.d_3d), (a.q_3d, b.q_3d)] {
            prop_assert!(close(x, y, 1e-12));
        }
        prop_assert_eq!(a.n_evaluated, b.n_evaluated);
    }
}

#[test]
fn model_evaluation_groups_by_reference_setting() {
    let ds = build_doe_dataset(DatasetKind::D1, 0);
    let (_, test) = exp1_plans(&ds).unwrap();
    let m = WorldModel::new(1);
    let (pairs, vertex) = predict_plan(&m, &ds, &test).unwrap();
    assert_eq!(pairs.len(), 15200);
    let r = evaluate(&pairs, &vertex).unwrap();
    assert_eq!(r.per_vertex.len(), 8);
    assert_eq!(r.summary.n_evaluated, 15200);
    assert_eq!(r.summary.n_excluded, 0);
    // spot check one prediction against direct encoding
    let (rid, oid) = test.sample_pairs()[777];
    let direct = m.predict_action(&m.encode(ds.curve(rid.setting, rid.cycle)), &m.encode(ds.curve(oid.setting, oid.cycle)));
    for (a, b) in direct.values().iter().zip(pairs[777].pred.values()) {
        assert!(close(*a, *b, 1e-12));
    }
    assert_eq!(vertex[777], rid.setting);
}

#[test]
fn dataset_pca_points() {
    let ds = build_doe_dataset(DatasetKind::D1, 0);
    let m = WorldModel::new(1);
    let (pts, pca) = dataset_pca(&m, &ds).unwrap();
    assert_eq!(pts.len(), 270);
    assert_eq!(pca.components.len(), 2);
    let mut buf = Vec::new();
    write_pca_csv(&mut buf, &ds, &pts).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("setting,cycle,holding_pressure,injection_speed,mold_temperature,pc1,pc2\n"));
    assert_eq!(text.lines().count(), 271);
}
