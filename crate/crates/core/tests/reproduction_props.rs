use proptest::prelude::*;
use trajprior::feasibility::{audit_track, AuditTrack};
use trajprior::geom::Vec2;
use trajprior::kinematics::{default_limits, Interval, KinematicModel};
use trajprior::reproduction::{invert_controls, Pose, SolverConfig};
use trajprior::scene::AgentClass;

fn pairing() -> impl Strategy<Value = (AgentClass, KinematicModel)> {
    prop_oneof![
        Just((AgentClass::Vehicle, KinematicModel::Unicycle)),
        Just((AgentClass::Pedestrian, KinematicModel::Unicycle)),
        Just((AgentClass::Pedestrian, KinematicModel::SingleIntegrator)),
        Just((AgentClass::Pedestrian, KinematicModel::DoubleIntegrator)),
    ]
}

fn random_walk(steps: &[(f64, f64)], scale: f64) -> Vec<Pose> {
    let mut p = Vec2::new(3.0, 4.0);
    let mut out = vec![Pose { x: p.x, y: p.y, theta: 0.0 }];
    for &(a, b) in steps {
        let d = Vec2::new(a, b) * scale;
        p = p + d;
        out.push(Pose { x: p.x, y: p.y, theta: if d.norm() > 0.01 { d.angle() } else { out.last().unwrap().theta } });
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reproduced_trajectories_are_feasible(
        (class, model) in pairing(),
        steps in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 2..25),
        scale in 0.05..2.0f64,
    ) {
        let gt = random_walk(&steps, scale);
        let lim = default_limits(class, model);
        let rep = invert_controls(model, &gt, 0.1, &lim, &SolverConfig::default()).unwrap();
        let tr = AuditTrack::from_positions(class, lim, 0.1, &rep.rollout.positions());
        let c = audit_track(&tr).unwrap_or_default();
        prop_assert_eq!(c.infeasible_any_steps, 0, "{:?}", c);
        prop_assert_eq!(rep.controls.len(), gt.len() - 1);
    }
}

fn burst_gt() -> Vec<Pose> {
    // Pedestrian walking at 1.5 m/s with a 31 m/s² lunge and a hard stop.
    let dt = 0.1;
    let mut p = Vec2::ZERO;
    let mut v = Vec2::new(1.5, 0.0);
    let mut out = vec![Pose { x: 0.0, y: 0.0, theta: 0.0 }];
    for t in 0..40 {
        p = p + v * dt;
        let a = match t {
            10 => Vec2::new(31.0, 5.0),
            20 => Vec2::new(-20.0, -10.0),
            _ => Vec2::ZERO,
        };
        v = v + a * dt;
        out.push(Pose { x: p.x, y: p.y, theta: v.angle() });
    }
    out
}

#[test]
fn tightening_limits_never_helps() {
    let gt = burst_gt();
    let pts: Vec<Vec2> = gt[1..].iter().map(|p| p.position()).collect();
    for model in [KinematicModel::DoubleIntegrator, KinematicModel::SingleIntegrator] {
        let mut last = 0.0;
        for bound in [40.0, 16.0, 8.0, 4.0, 2.0, 1.0] {
            let mut lim = default_limits(AgentClass::Pedestrian, model);
            if model == KinematicModel::DoubleIntegrator {
                lim.accel = Some(Interval::symmetric(bound));
            } else {
                lim.speed = Interval::new(0.0, bound / 2.0);
            }
            let rep = invert_controls(model, &gt, 0.1, &lim, &SolverConfig::default()).unwrap();
            let pred: Vec<Vec2> = rep.rollout.states.iter().map(|s| s.position()).collect();
            let err = trajprior::metrics::ade(&pred, &pts);
            assert!(err + 1e-12 >= last, "{model} bound {bound}: {err} < {last}");
            last = err;
        }
        assert!(last > 0.0);
    }
}

#[test]
fn burst_clamps_double_integrator() {
    let gt = burst_gt();
    let lim = default_limits(AgentClass::Pedestrian, KinematicModel::DoubleIntegrator);
    let rep = invert_controls(KinematicModel::DoubleIntegrator, &gt, 0.1, &lim, &SolverConfig::default()).unwrap();
    assert!(rep.clamped_steps() > 0);
}
