//! Buffer plus transmission protocol against the closed-form selection
//! matrices, over every uplink pattern of a window.

use netsmpc::channel::{actuator_output, g_sequence, realize_sg_diag, tp1_payload, Buffer, HMode};
use netsmpc::linalg::Vector;

fn patterns(n: usize) -> impl Iterator<Item = Vec<bool>> {
    (0..1u32 << n).map(move |bits| (0..n).map(|k| bits >> k & 1 == 1).collect())
}

/// Distinct full and nominal blocks so any mixup shows up.
fn blocks(n: usize, m: usize) -> (Vec<Vector>, Vec<Vector>) {
    let full = (0..n)
        .map(|l| Vector::from_fn(m, |k, _| 10.0 * (l + 1) as f64 + k as f64 + 0.25))
        .collect();
    let nominal = (0..n)
        .map(|l| Vector::from_fn(m, |k, _| -(l as f64) - 0.5 * k as f64 - 3.0))
        .collect();
    (full, nominal)
}

fn run_buffer(
    nu: &[bool],
    full: &[Vector],
    nominal: &[Vector],
    u_r: &[Vector],
    mode: HMode,
) -> Vec<Vector> {
    let n_r = nu.len();
    let m = full[0].len();
    let mut buffer = Buffer::new(n_r, m);
    let strip = |v: &Vector, l: usize| match mode {
        HMode::EqualsG => v.clone(),
        HMode::EqualsI => v - &u_r[l],
    };
    (0..n_r)
        .map(|l| {
            let tail: Vec<Vector> = (l + 1..n_r).map(|j| strip(&nominal[j], j)).collect();
            let payload = tp1_payload(l, buffer.is_empty(), strip(&full[l], l), &tail);
            assert!(buffer.len() <= n_r);
            let block = buffer.tick(l, &payload, nu[l]).unwrap();
            actuator_output(mode, block, &u_r[l])
        })
        .collect()
}

#[test]
fn buffered_inputs_match_selection_matrices() {
    let m = 2;
    for n_r in 1..=6 {
        let (full, nominal) = blocks(n_r, m);
        let u_r: Vec<Vector> = (0..n_r)
            .map(|l| Vector::from_element(m, 0.1 * l as f64))
            .collect();
        for nu in patterns(n_r) {
            let (s, g) = realize_sg_diag(&nu, n_r, n_r, n_r, m);
            let applied = run_buffer(&nu, &full, &nominal, &u_r, HMode::EqualsG);
            for l in 0..n_r {
                // 𝒢(uʳ + η) + 𝒮Θψ, with Θψ = full − nominal
                let expected = &nominal[l] * g[l * m] + (&full[l] - &nominal[l]) * s[l * m];
                assert_eq!(applied[l], expected, "N_r = {n_r}, ν = {nu:?}, block {l}");
            }
        }
    }
}

#[test]
fn reference_at_the_actuator_is_always_applied() {
    let m = 1;
    for n_r in 1..=6 {
        let (full, nominal) = blocks(n_r, m);
        let u_r: Vec<Vector> = (0..n_r)
            .map(|l| Vector::from_element(m, 1.0 + l as f64))
            .collect();
        for nu in patterns(n_r) {
            let (s, g) = realize_sg_diag(&nu, n_r, n_r, n_r, m);
            let applied = run_buffer(&nu, &full, &nominal, &u_r, HMode::EqualsI);
            for l in 0..n_r {
                // uʳ + 𝒢η + 𝒮Θψ
                let eta = &nominal[l] - &u_r[l];
                let expected = &u_r[l] + eta * g[l] + (&full[l] - &nominal[l]) * s[l];
                assert!(
                    (&applied[l] - &expected).amax() < 1e-12,
                    "N_r = {n_r}, ν = {nu:?}, block {l}"
                );
            }
        }
    }
}

#[test]
fn later_blocks_use_the_full_control() {
    let nu = [false, false, true];
    let (s, g) = realize_sg_diag(&nu, 5, 3, 3, 1);
    assert_eq!(s, vec![0.0, 0.0, 1.0, 1.0, 1.0]);
    assert_eq!(g, vec![0.0, 0.0, 1.0, 1.0, 1.0]);
}

#[test]
fn consecutive_success_indicator_latches() {
    for nu in patterns(8) {
        let g = g_sequence(&nu);
        for l in 0..8 {
            assert_eq!(g[l], nu[..=l].iter().any(|&b| b));
        }
    }
}

#[test]
fn buffer_rejects_a_missed_optimization_instant() {
    let mut b = Buffer::new(2, 1);
    let one = Vector::from_element(1, 1.0);
    let p = tp1_payload(0, true, one.clone(), std::slice::from_ref(&one));
    b.tick(0, &p, true).unwrap();
    assert!(b.tick(2, &p, true).is_err());
    // a non-empty buffer at offset 0 means the previous window did not drain
    assert!(b.tick(0, &p, false).is_err());
}
