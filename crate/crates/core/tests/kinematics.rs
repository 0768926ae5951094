use std::f64::consts::PI;

use echo_core::kinematics::{clamp_to_limits, forward_kinematics, DhTable, JointLimits};
use echo_core::types::{JointVector, JOINTS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type M4 = [[f64; 4]; 4];

/// Standard DH link matrix written out element by element.
fn dh_matrix(theta: f64, d: f64, a: f64, alpha: f64) -> M4 {
    let (st, ct) = theta.sin_cos();
    let (sa, ca) = alpha.sin_cos();
    [
        [ct, -st * ca, st * sa, a * ct],
        [st, ct * ca, -ct * sa, a * st],
        [0.0, sa, ca, d],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn mul(x: &M4, y: &M4) -> M4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| x[i][k] * y[k][j]).sum();
        }
    }
    out
}

/// Shepperd's method, branching on the largest diagonal term. Returns w, x, y, z.
fn rotation_to_quaternion(m: &M4) -> [f64; 4] {
    let trace = m[0][0] + m[1][1] + m[2][2];
    let q = if trace > m[0][0] && trace > m[1][1] && trace > m[2][2] {
        let s = 2.0 * (1.0 + trace).sqrt();
        [0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = 2.0 * (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt();
        [(m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s]
    } else if m[1][1] > m[2][2] {
        let s = 2.0 * (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt();
        [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s]
    } else {
        let s = 2.0 * (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt();
        [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s]
    };
    if q[0] < 0.0 {
        q.map(|v| -v)
    } else {
        q
    }
}

/// UR3 parameters typed in independently of the library table: (a, alpha, d).
const UR3: [(f64, f64, f64); JOINTS] = [
    (0.0, PI / 2.0, 0.1519),
    (-0.24365, 0.0, 0.0),
    (-0.21325, 0.0, 0.0),
    (0.0, PI / 2.0, 0.11235),
    (0.0, -PI / 2.0, 0.08535),
    (0.0, 0.0, 0.0819),
];

fn oracle(q: &[f64; JOINTS]) -> ([f64; 3], [f64; 4]) {
    let mut t: M4 = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
    for (i, (a, alpha, d)) in UR3.iter().enumerate() {
        t = mul(&t, &dh_matrix(q[i], *d, *a, *alpha));
    }
    ([t[0][3], t[1][3], t[2][3]], rotation_to_quaternion(&t))
}

#[test]
fn fk_matches_matrix_chain_oracle() {
    let dh = DhTable::ur3();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0EC0);
    for _ in 0..1000 {
        let q: [f64; JOINTS] = std::array::from_fn(|_| rng.gen_range(-2.0 * PI..2.0 * PI));
        let pose = forward_kinematics(&JointVector(q), &dh);
        let (pos, quat) = oracle(&q);
        for k in 0..3 {
            assert!((pose.position[k] - pos[k]).abs() < 1e-9, "q={q:?}");
        }
        // w >= 0 on both sides; at w ~ 0 the sign is ambiguous, so compare up to sign
        let same: f64 = (0..4).map(|k| (pose.orientation[k] - quat[k]).abs()).fold(0.0, f64::max);
        let flipped: f64 = (0..4).map(|k| (pose.orientation[k] + quat[k]).abs()).fold(0.0, f64::max);
        assert!(same.min(flipped) < 1e-9, "q={q:?} {:?} vs {quat:?}", pose.orientation);
    }
}

#[test]
fn shipped_dh_file_is_ur3() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../config/ur3.dh")).unwrap();
    assert_eq!(DhTable::parse(&text).unwrap(), DhTable::ur3());
}

proptest! {
    #[test]
    fn fk_is_bit_deterministic(q in prop::array::uniform6(-10.0f64..10.0)) {
        let dh = DhTable::ur3();
        let a = forward_kinematics(&JointVector(q), &dh);
        let b = forward_kinematics(&JointVector(q), &dh);
        prop_assert_eq!(a.position.map(f64::to_bits), b.position.map(f64::to_bits));
        prop_assert_eq!(a.orientation.map(f64::to_bits), b.orientation.map(f64::to_bits));
    }

    #[test]
    fn reach_bound_and_unit_quaternion(q in prop::array::uniform6(-10.0f64..10.0)) {
        let dh = DhTable::ur3();
        let p = forward_kinematics(&JointVector(q), &dh);
        let r = p.position.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(r <= dh.reach() + 1e-12);
        prop_assert!((p.quaternion_norm() - 1.0).abs() < 1e-12);
        prop_assert!(p.orientation[0] >= 0.0);
    }

    #[test]
    fn clamp_is_safe_and_idempotent(q in prop::array::uniform6(prop::num::f64::ANY)) {
        let lim = JointLimits::default();
        let c = clamp_to_limits(&JointVector(q), &lim);
        prop_assert!(lim.contains(&c));
        prop_assert_eq!(clamp_to_limits(&c, &lim), c);
    }
}
