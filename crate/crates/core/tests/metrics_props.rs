//! Metrics against a from-scratch brute-force oracle.

use proptest::prelude::*;
use trajprior::geom::Vec2;
use trajprior::metrics::{brier_min_fde, miss_rate, min_ade, min_fde, pearson, Mode, MultiModalPrediction};

/// Recomputes everything with plain loops over all modes.
fn oracle(modes: &[(Vec<(f64, f64)>, f64)], gt: &[(f64, f64)], k: usize) -> (f64, f64, f64) {
    let mut order: Vec<usize> = (0..modes.len()).collect();
    // Stable sort keeps index order among equal confidences.
    order.sort_by(|a, b| modes[*b].1.partial_cmp(&modes[*a].1).unwrap());
    let chosen = &order[..k];
    let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let mut best_ade = f64::MAX;
    let mut best_fde = f64::MAX;
    let mut best_conf = 0.0;
    for &i in chosen {
        let tr = &modes[i].0;
        let mut total = 0.0;
        for t in 0..gt.len() {
            total += dist(tr[t], gt[t]);
        }
        best_ade = best_ade.min(total / gt.len() as f64);
        let f = dist(tr[gt.len() - 1], gt[gt.len() - 1]);
        if f < best_fde {
            best_fde = f;
            best_conf = modes[i].1;
        }
    }
    (best_ade, best_fde, best_fde + (1.0 - best_conf) * (1.0 - best_conf))
}

fn instance() -> impl Strategy<Value = (Vec<(Vec<(f64, f64)>, f64)>, Vec<(f64, f64)>, usize)> {
    (1usize..6, 1usize..8).prop_flat_map(|(m, t)| {
        let pt = (-20.0..20.0f64, -20.0..20.0f64);
        (
            prop::collection::vec((prop::collection::vec(pt.clone(), t), 0.0..1.0f64), m),
            prop::collection::vec(pt, t),
            1..=m,
        )
    })
}

fn to_pred(modes: &[(Vec<(f64, f64)>, f64)]) -> MultiModalPrediction {
    let total: f64 = modes.iter().map(|m| m.1).sum::<f64>().max(1.0);
    MultiModalPrediction {
        agent_id: "a".into(),
        modes: modes
            .iter()
            .map(|(tr, c)| Mode { trajectory: tr.iter().map(|&(x, y)| Vec2::new(x, y)).collect(), confidence: c / total })
            .collect(),
    }
}

proptest! {
    #[test]
    fn matches_brute_force((modes, gt, k) in instance()) {
        let pred = to_pred(&modes);
        let normalized: Vec<(Vec<(f64, f64)>, f64)> =
            modes.iter().zip(&pred.modes).map(|(m, p)| (m.0.clone(), p.confidence)).collect();
        let g: Vec<Vec2> = gt.iter().map(|&(x, y)| Vec2::new(x, y)).collect();
        let (a, f, b) = oracle(&normalized, &gt, k);
        prop_assert!((min_ade(&pred, &g, k).unwrap() - a).abs() <= 1e-9);
        prop_assert!((min_fde(&pred, &g, k).unwrap() - f).abs() <= 1e-9);
        prop_assert!((brier_min_fde(&pred, &g, k).unwrap() - b).abs() <= 1e-9);
        let mr = miss_rate(&[(&pred, &g[..])], k, 2.0).unwrap();
        prop_assert_eq!(mr, if f > 2.0 { 1.0 } else { 0.0 });
    }

    #[test]
    fn monotone_in_k_and_brier_bound((modes, gt, _k) in instance()) {
        let pred = to_pred(&modes);
        let g: Vec<Vec2> = gt.iter().map(|&(x, y)| Vec2::new(x, y)).collect();
        for k in 1..pred.modes.len() {
            prop_assert!(min_ade(&pred, &g, k + 1).unwrap() <= min_ade(&pred, &g, k).unwrap());
            prop_assert!(min_fde(&pred, &g, k + 1).unwrap() <= min_fde(&pred, &g, k).unwrap());
        }
        let k = pred.modes.len();
        prop_assert!(brier_min_fde(&pred, &g, k).unwrap() >= min_fde(&pred, &g, k).unwrap());
    }

    #[test]
    fn pearson_affine_invariance(
        xs in prop::collection::vec(-10.0..10.0f64, 3..30),
        noise in prop::collection::vec(-5.0..5.0f64, 30),
        a in 0.1..10.0f64, b in -10.0..10.0f64,
    ) {
        let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, n)| x + n).collect();
        let r = pearson(&xs, &ys);
        prop_assume!(r.is_ok());
        let r = r.unwrap();
        let xs2: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        let ys2: Vec<f64> = ys.iter().map(|y| y / a - b).collect();
        prop_assert!((pearson(&xs2, &ys2).unwrap() - r).abs() <= 1e-9);
        prop_assert!((-1.0..=1.0).contains(&r));
    }
}
