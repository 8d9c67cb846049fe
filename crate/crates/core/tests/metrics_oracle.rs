use def_core::metrics::*;
use proptest::prelude::*;

fn brute_crps(members: &[Vec<f64>], obs: &[f64]) -> f64 {
    let b = members.len() as f64;
    let mut total = 0.0;
    for p in 0..obs.len() {
        let mut first = 0.0;
        let mut second = 0.0;
        for m in members {
            first += (m[p] - obs[p]).abs();
            for n in members {
                second += (m[p] - n[p]).abs();
            }
        }
        total += first / b - second / (2.0 * b * b);
    }
    total / obs.len() as f64
}

fn norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn brute_energy(members: &[Vec<f64>], obs: &[f64]) -> f64 {
    let b = members.len() as f64;
    let first: f64 = members.iter().map(|m| norm(m, obs)).sum();
    let second: f64 = members.iter().flat_map(|m| members.iter().map(move |n| norm(m, n))).sum();
    first / b - second / (2.0 * b * b)
}

fn ensemble() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..=8, 1usize..=16).prop_flat_map(|(b, n)| {
        (
            prop::collection::vec(prop::collection::vec(-10.0..10.0f64, n), b),
            prop::collection::vec(-10.0..10.0f64, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn crps_and_energy_match_double_loop((members, obs) in ensemble()) {
        prop_assert!((crps(&members, &obs).unwrap() - brute_crps(&members, &obs)).abs() < 1e-10);
        prop_assert!((energy_score(&members, &obs).unwrap() - brute_energy(&members, &obs)).abs() < 1e-10);
    }

    #[test]
    fn crps_bounded_by_mean_absolute_error((members, obs) in ensemble()) {
        let mae: f64 = members
            .iter()
            .map(|m| m.iter().zip(&obs).map(|(a, b)| (a - b).abs()).sum::<f64>() / obs.len() as f64)
            .sum::<f64>()
            / members.len() as f64;
        let c = crps(&members, &obs).unwrap();
        prop_assert!(c >= -1e-12 && c <= mae + 1e-12);
    }

    #[test]
    fn scores_ignore_member_order((members, obs) in ensemble()) {
        let mut rev = members.clone();
        rev.reverse();
        let (mean, _) = mean_and_spread(&members).unwrap();
        let (rmean, _) = mean_and_spread(&rev).unwrap();
        prop_assert!((crps(&members, &obs).unwrap() - crps(&rev, &obs).unwrap()).abs() < 1e-10);
        prop_assert!((energy_score(&members, &obs).unwrap() - energy_score(&rev, &obs).unwrap()).abs() < 1e-10);
        prop_assert!((rmse(&mean, &obs).unwrap() - rmse(&rmean, &obs).unwrap()).abs() < 1e-10);
        let sc = spread_correlation(&members, &obs, &mean).unwrap();
        let rsc = spread_correlation(&rev, &obs, &rmean).unwrap();
        prop_assert!((sc - rsc).abs() < 1e-10);
    }

    #[test]
    fn single_pixel_energy_equals_crps(members in prop::collection::vec(-5.0..5.0f64, 1..8), obs in -5.0..5.0f64) {
        let fields: Vec<Vec<f64>> = members.iter().map(|&m| vec![m]).collect();
        let e = energy_score(&fields, &[obs]).unwrap();
        prop_assert!((e - crps(&fields, &[obs]).unwrap()).abs() < 1e-12);
        prop_assert!((e - crps_scalar(&members, obs).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rmse_is_symmetric(a in prop::collection::vec(-5.0..5.0f64, 6), b in prop::collection::vec(-5.0..5.0f64, 6)) {
        prop_assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
    }
}

#[test]
fn spread_is_zero_iff_members_agree() {
    let same = vec![vec![1.0, 2.0]; 3];
    assert!(mean_and_spread(&same).unwrap().1.iter().all(|&s| s == 0.0));
    let differ = vec![vec![1.0, 2.0], vec![1.0, 2.5]];
    let (_, spread) = mean_and_spread(&differ).unwrap();
    assert_eq!(spread[0], 0.0);
    assert!(spread[1] > 0.0);
}

#[test]
fn rejects_empty_and_mismatched() {
    let none: Vec<Vec<f64>> = Vec::new();
    assert!(crps(&none, &[1.0]).is_err());
    assert!(energy_score(&[vec![1.0, 2.0]], &[1.0]).is_err());
    assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
}
