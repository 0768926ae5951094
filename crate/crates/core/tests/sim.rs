use echo_core::kinematics::JointLimits;
use echo_core::protocol::{parse_all, Message};
use echo_core::sensing::{adc_to_angle, Calibration};
use echo_core::sim::*;
use echo_core::types::{JointVector, SlaveCommand, JOINTS};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn seeds() -> impl Iterator<Item = ScenarioConfig> {
    (0..20).map(|seed| ScenarioConfig {
        seed,
        ..ScenarioConfig::default()
    })
}

/// Closed-form ceiling on the feedback-on peak force.
///
/// Once the sensed force reaches `deadband + duty_max / k_f` the duty saturates
/// and the operator surrogate holds the trigger at least `operator_gain *
/// duty_max` open. With the default config that is at or above `x0`, so the
/// gripper stops closing. Before that happens the force report, duty and
/// operator reaction add two ticks of closing at `gripper_v_max`. The trigger
/// reading is also off by at most `noise + 0.5` counts.
fn feedback_on_bound(cfg: &ScenarioConfig) -> f64 {
    let cal = Calibration::default();
    let tc = cal.trigger;
    let reading_error = (f64::from(cfg.noise) + 0.5) * tc.scale / (tc.open - tc.closed);
    let latency = 2.0 * cfg.gripper_v_max * cfg.dt();
    cfg.deadband + f64::from(cfg.duty_max) / cfg.k_f + cfg.k * (latency + reading_error)
}

#[test]
fn egg_feedback_lowers_peak_force_on_every_seed() {
    let mut broke_without = 0;
    for cfg in seeds() {
        let on = run_egg_scenario(&cfg, true).unwrap();
        let off = run_egg_scenario(&cfg, false).unwrap();
        assert!(on.peak_force < off.peak_force, "seed {}: {on:?} vs {off:?}", cfg.seed);
        assert!(!on.broken, "seed {}", cfg.seed);
        broke_without += usize::from(off.broken);
    }
    assert!(broke_without >= 1);
}

#[test]
fn egg_feedback_peak_respects_closed_form_bound() {
    for cfg in seeds() {
        // the bound relies on saturated duty pushing the trigger past first contact
        assert!(cfg.operator_gain * f64::from(cfg.duty_max) >= cfg.x0);
        let bound = feedback_on_bound(&cfg);
        assert!(bound < cfg.f_break);
        let on = run_egg_scenario(&cfg, true).unwrap();
        assert!(on.peak_force <= bound, "seed {}: {} > {bound}", cfg.seed, on.peak_force);
    }
}

#[test]
fn unbreakable_egg_never_breaks() {
    for cfg in seeds().take(5) {
        let cfg = ScenarioConfig {
            f_break: f64::INFINITY,
            ..cfg
        };
        for ff in [true, false] {
            assert!(!run_egg_scenario(&cfg, ff).unwrap().broken);
        }
    }
}

#[test]
fn egg_reports_are_deterministic() {
    let cfg = ScenarioConfig {
        seed: 7,
        ..ScenarioConfig::default()
    };
    assert_eq!(run_egg_scenario(&cfg, true).unwrap(), run_egg_scenario(&cfg, true).unwrap());
}

#[test]
fn invalid_config_rejected() {
    let cfg = ScenarioConfig {
        tau: -1.0,
        ..ScenarioConfig::default()
    };
    assert!(matches!(run_egg_scenario(&cfg, true), Err(SimError::ConfigInvalid(_))));
}

#[test]
fn shipped_scenario_file_is_the_default() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../config/scenario.toml");
    assert_eq!(ScenarioConfig::load(std::path::Path::new(path)).unwrap(), ScenarioConfig::default());
}

#[test]
fn noise_error_bound_over_long_run() {
    let cal = Calibration::default();
    let script = LeaderScript::Wave {
        center: JointVector::ZERO,
        amplitude: JointVector([2.0; JOINTS]),
        period_s: 3.7,
        gripper_period_s: 1.3,
    };
    let mk = |noise| VirtualDevice::new(cal.clone(), script.clone(), vec![], noise, ChaCha8Rng::seed_from_u64(11), 0.0);
    let (mut noisy, clean) = (mk(2), mk(0));
    for step in 0..100_000u64 {
        let t_us = step * 10_000;
        let exact = clean.exact_counts(t_us as f64 / 1e6);
        let msgs = parse_all(&noisy.device_step(t_us)).messages;
        let Some(Message::JointReport { adc, .. }) = msgs.last() else {
            panic!("no joint report at step {step}")
        };
        for i in 0..JOINTS {
            let c = &cal.joints[i];
            let truth = adc_to_angle(exact[i].round() as u16, c).unwrap();
            let got = adc_to_angle(adc[i], c).unwrap();
            assert!((got - truth).abs() <= 2.0 * c.scale + 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn contact_force_nonnegative_and_break_absorbing(
        openings in prop::collection::vec(0.0f64..=1.0, 1..100),
        x0 in 0.01f64..1.0,
        k in 0.0f64..500.0,
        f_break in 0.1f64..50.0,
    ) {
        let mut obj = ContactObject::new(x0, k, f_break);
        let mut broken = false;
        for o in openings {
            let f = obj.contact_force(o);
            prop_assert!(f >= 0.0);
            if broken {
                prop_assert_eq!(f, 0.0);
            }
            broken = obj.broken;
        }
    }

    #[test]
    fn follower_stays_within_limits(
        targets in prop::collection::vec(prop::array::uniform6(-20.0f64..20.0), 1..50),
        grips in prop::collection::vec(-1.0f64..2.0, 1..50),
    ) {
        let lim = JointLimits::uniform(-1.0, 1.0, 2.0);
        let params = FollowerParams { tau: 0.05, v_max: 2.0, gripper_v_max: 1.5 };
        let mut f = FollowerSim::new(params, lim, JointVector::ZERO, 0.5);
        for (q, g) in targets.iter().zip(grips.iter().cycle()) {
            let before = f.q();
            f.step(&SlaveCommand { q_target: JointVector(*q), gripper_target: *g }, 0.01);
            prop_assert!(lim.contains(&f.q()));
            prop_assert!((0.0..=1.0).contains(&f.gripper()));
            prop_assert!(f.q().max_abs_diff(&before) <= 2.0 * 0.01 + 1e-15);
        }
    }
}
