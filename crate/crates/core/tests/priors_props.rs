use proptest::prelude::*;
use trajprior::geom::{wrap_angle, Vec2};
use trajprior::priors::{prior_scores, PriorConfig, PriorKind};
use trajprior::scene::{knn_neighbors, AgentClass, AgentState, AgentTrack, Scene};

type Agent = (f64, f64, f64, f64);

fn scene_of(agents: &[Agent]) -> Scene {
    let tracks = agents
        .iter()
        .enumerate()
        .map(|(i, &(x, y, vx, vy))| {
            let heading = if vx.hypot(vy) > 0.0 { vy.atan2(vx) } else { 0.0 };
            let s = AgentState { x, y, vx, vy, heading, valid: true };
            AgentTrack { agent_id: format!("a{i}"), class: AgentClass::Vehicle, states: vec![s; 2], profile: None }
        })
        .collect();
    Scene { scene_id: "p".into(), dt: 0.1, t_obs: 1, t_horizon: 1, tracks, focal_ids: vec!["a0".into()] }
}

fn rigid(agents: &[Agent], rot: f64, shift: Vec2) -> Vec<Agent> {
    let (s, c) = rot.sin_cos();
    agents
        .iter()
        .map(|&(x, y, vx, vy)| (c * x - s * y + shift.x, s * x + c * y + shift.y, c * vx - s * vy, s * vx + c * vy))
        .collect()
}

fn agents() -> impl Strategy<Value = Vec<Agent>> {
    prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64, -15.0..15.0f64, -15.0..15.0f64), 2..12)
}

fn kind() -> impl Strategy<Value = PriorKind> {
    prop_oneof![Just(PriorKind::Dgsfm), Just(PriorKind::Skgacn), Just(PriorKind::L2)]
}

proptest! {
    #[test]
    fn scores_are_a_distribution(a in agents(), kind in kind()) {
        let sc = scene_of(&a);
        sc.validate().unwrap();
        let nb = knn_neighbors(&sc, "a0", 8).unwrap();
        let sv = prior_scores(kind, &sc, &nb, &PriorConfig::default()).unwrap();
        let sum: f64 = sv.scores().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-9);
        prop_assert!(sv.scores().iter().all(|s| s.is_finite() && *s >= 0.0));
    }

    #[test]
    fn dgsfm_invariant_under_rigid_motion(a in agents(), rot in -3.0..3.0f64, dx in -100.0..100.0f64, dy in -100.0..100.0f64) {
        // Keep every speed clear of the isotropic cutoff so rounding cannot flip it.
        prop_assume!(a.iter().all(|&(_, _, vx, vy)| (vx.hypot(vy) - 0.1).abs() > 1e-6));
        let cfg = PriorConfig::default();
        let base = scene_of(&a);
        let moved = scene_of(&rigid(&a, wrap_angle(rot), Vec2::new(dx, dy)));
        let n = a.len() - 1;
        let s0 = prior_scores(PriorKind::Dgsfm, &base, &knn_neighbors(&base, "a0", n).unwrap(), &cfg).unwrap();
        let s1 = prior_scores(PriorKind::Dgsfm, &moved, &knn_neighbors(&moved, "a0", n).unwrap(), &cfg).unwrap();
        let by_id = |sv: &trajprior::priors::ScoreVector| {
            let mut e = sv.entries.clone();
            e.sort_by(|x, y| x.0.cmp(&y.0));
            e
        };
        for ((i0, v0), (i1, v1)) in by_id(&s0).iter().zip(by_id(&s1).iter()) {
            prop_assert_eq!(i0, i1);
            prop_assert!((v0 - v1).abs() <= 1e-9, "{} vs {}", v0, v1);
        }
    }
}
