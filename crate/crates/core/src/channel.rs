//! Bernoulli uplink/downlink, the actuator-side buffer and transmission
//! protocol TP1.
//!
//! At an optimization instant the controller sends the current control and
//! the nominal blocks `uʳ + η` for the rest of the recalculation window. Later
//! in the window it resends the full tail only if the buffer is known to be
//! empty (acknowledgments are lossless), otherwise a single block. Received
//! blocks overwrite the buffer from the head; the head is applied and the
//! buffer shifts left once per step, so it is empty again when the next
//! window starts.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// uplink (controller → actuator) success probability
    pub p_c: f64,
    /// downlink (sensor → controller) success probability
    pub p_s: f64,
}

impl ChannelConfig {
    pub fn new(p_c: f64, p_s: f64) -> Result<Self> {
        for (name, p) in [("p_c", p_c), ("p_s", p_s)] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::config(format!("{name} = {p} must lie in (0, 1]")));
            }
        }
        Ok(Self { p_c, p_s })
    }
}

/// How the reference input reaches the actuator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HMode {
    /// `uʳ` travels with the policy and is lost with it (`ℋ = 𝒢`).
    #[default]
    EqualsG,
    /// `uʳ` is pre-stored at the actuator (`ℋ = I`).
    EqualsI,
}

pub fn sample_bit<R: Rng + ?Sized>(p: f64, rng: &mut R) -> Result<bool> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!("probability {p} outside [0, 1]")));
    }
    Ok(bernoulli(p, rng))
}

#[inline]
pub(crate) fn bernoulli<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    if p >= 1.0 {
        true
    } else if p <= 0.0 {
        false
    } else {
        rng.random::<f64>() < p
    }
}

/// Consecutive-success indicator: `g₀ = ν₀`, `g_ℓ = g_{ℓ−1} + (1 − g_{ℓ−1}) ν_ℓ`.
pub fn g_sequence(nu: &[bool]) -> Vec<bool> {
    let mut g = false;
    nu.iter()
        .map(|&n| {
            g = g || n;
            g
        })
        .collect()
}

/// Diagonals of the realized `𝒮` and `𝒢` (one entry per scalar input, Nm long).
pub fn realize_sg_diag(
    nu: &[bool],
    horizon: usize,
    recalc: usize,
    kappa: usize,
    m: usize,
) -> (Vec<f64>, Vec<f64>) {
    assert!(
        nu.len() >= kappa.max(recalc),
        "channel window shorter than max(κ, N_r)"
    );
    let g = g_sequence(&nu[..recalc]);
    let mut s_diag = vec![1.0; horizon * m];
    let mut g_diag = vec![1.0; horizon * m];
    for block in 0..horizon {
        let s = if block < kappa {
            nu[block] as u8 as f64
        } else {
            1.0
        };
        let gv = if block < recalc {
            g[block] as u8 as f64
        } else {
            1.0
        };
        for k in 0..m {
            s_diag[block * m + k] = s;
            g_diag[block * m + k] = gv;
        }
    }
    (s_diag, g_diag)
}

/// Realized `(𝒮, 𝒢)` for one window of uplink bits.
pub fn realize_sg(
    nu: &[bool],
    horizon: usize,
    recalc: usize,
    kappa: usize,
    m: usize,
) -> (Mat, Mat) {
    let (s, g) = realize_sg_diag(nu, horizon, recalc, kappa, m);
    (
        Mat::from_diagonal(&Vector::from_vec(s)),
        Mat::from_diagonal(&Vector::from_vec(g)),
    )
}

/// `ℋ` for a given realized `𝒢`.
pub fn h_matrix(mode: HMode, g: &Mat) -> Mat {
    match mode {
        HMode::EqualsG => g.clone(),
        HMode::EqualsI => Mat::identity(g.nrows(), g.ncols()),
    }
}

/// `uᵃ = ℋ uʳ + 𝒢 η + 𝒮 Θ ψ`
pub fn stacked_applied_control(
    s: &Mat,
    g: &Mat,
    mode: HMode,
    u_r: &Vector,
    eta: &Vector,
    theta: &Mat,
    psi: &Vector,
) -> Vector {
    h_matrix(mode, g) * u_r + g * eta + s * (theta * psi)
}

/// One buffered control block.
#[derive(Clone, Debug, PartialEq)]
pub enum Slot {
    /// Full control including feedback on the latest compensator disturbance.
    Full(Vector),
    /// Nominal part only.
    Nominal(Vector),
}

impl Slot {
    pub fn value(&self) -> &Vector {
        match self {
            Slot::Full(v) | Slot::Nominal(v) => v,
        }
    }
}

/// Actuator-side buffer holding up to `N_r` blocks.
#[derive(Clone, Debug)]
pub struct Buffer {
    slots: VecDeque<Slot>,
    capacity: usize,
    m: usize,
}

impl Buffer {
    pub fn new(capacity: usize, m: usize) -> Self {
        Self {
            slots: VecDeque::with_capacity(capacity),
            capacity,
            m,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> impl Iterator<Item = &Slot> {
        self.slots.iter()
    }

    /// One actuator step at window offset `step`: store a received payload from
    /// the head, apply the head block (zero on underflow) and shift left.
    pub fn tick(&mut self, step: usize, payload: &[Slot], nu: bool) -> Result<Vector> {
        if step >= self.capacity {
            return Err(Error::Protocol(format!(
                "window offset {step} ≥ N_r = {}: optimization instant missed",
                self.capacity
            )));
        }
        if step == 0 && !self.slots.is_empty() {
            return Err(Error::Protocol(
                "buffer not empty at an optimization instant".into(),
            ));
        }
        if nu {
            if payload.is_empty() || payload.len() > self.capacity - step {
                return Err(Error::Protocol(format!(
                    "payload of {} blocks does not fit at offset {step}",
                    payload.len()
                )));
            }
            for (i, slot) in payload.iter().enumerate() {
                if slot.value().len() != self.m {
                    return Err(Error::dims("payload block", self.m, slot.value().len()));
                }
                if i < self.slots.len() {
                    self.slots[i] = slot.clone();
                } else {
                    self.slots.push_back(slot.clone());
                }
            }
        }
        Ok(match self.slots.pop_front() {
            Some(slot) => slot.value().clone(),
            None => Vector::zeros(self.m),
        })
    }
}

/// Packet sent by TP1 at window offset `step`.
///
/// `nominal_tail` holds the nominal blocks for offsets `step+1 .. N_r−1`.
pub fn tp1_payload(
    step: usize,
    buffer_empty: bool,
    current: Vector,
    nominal_tail: &[Vector],
) -> Vec<Slot> {
    let mut payload = vec![Slot::Full(current)];
    if step == 0 || buffer_empty {
        payload.extend(nominal_tail.iter().cloned().map(Slot::Nominal));
    }
    payload
}

/// Applied input at the plant: in `ℋ = I` mode the actuator adds its stored
/// reference input to whatever the buffer produced.
pub fn actuator_output(mode: HMode, block: Vector, u_r: &Vector) -> Vector {
    match mode {
        HMode::EqualsG => block,
        HMode::EqualsI => block + u_r,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::vec_from;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert!(sample_bit(1.0, &mut rng).unwrap());
            assert!(!sample_bit(0.0, &mut rng).unwrap());
        }
        assert!(sample_bit(1.5, &mut rng).is_err());
        assert!(sample_bit(-0.1, &mut rng).is_err());
    }

    #[test]
    fn bit_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| sample_bit(0.9, &mut rng).unwrap())
            .count();
        let mean = hits as f64 / n as f64;
        assert!((mean - 0.9).abs() <= 3.0 * (0.09f64 / n as f64).sqrt());
    }

    #[test]
    fn g_examples() {
        assert_eq!(g_sequence(&[true, true, true]), vec![true, true, true]);
        assert_eq!(g_sequence(&[false, true, false]), vec![false, true, true]);
        assert_eq!(
            g_sequence(&[false, false, false]),
            vec![false, false, false]
        );
    }

    #[test]
    fn g_exhaustive_closed_form() {
        for n in 1..=6 {
            for mask in 0..(1u32 << n) {
                let nu: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                let g = g_sequence(&nu);
                for l in 0..n {
                    let prod: f64 = nu[..=l].iter().map(|&b| 1.0 - b as u8 as f64).product();
                    assert_eq!(g[l] as u8 as f64, 1.0 - prod);
                    if l > 0 {
                        assert!(g[l] >= g[l - 1]);
                    }
                }
            }
        }
    }

    #[test]
    fn sg_examples() {
        let (s, g) = realize_sg_diag(&[true; 3], 5, 3, 3, 1);
        assert_eq!(s, vec![1.0; 5]);
        assert_eq!(g, vec![1.0; 5]);
        let (s, g) = realize_sg_diag(&[false, true, false], 5, 3, 3, 1);
        assert_eq!(s, vec![0.0, 1.0, 0.0, 1.0, 1.0]);
        assert_eq!(g, vec![0.0, 1.0, 1.0, 1.0, 1.0]);
        let (_, g) = realize_sg_diag(&[false; 3], 5, 3, 3, 1);
        assert_eq!(g, vec![0.0, 0.0, 0.0, 1.0, 1.0]);
        let (s, g) = realize_sg(&[false, true, false], 5, 3, 3, 1);
        assert_eq!(&s * &s, s);
        assert_eq!(&g * &g, g);
    }

    #[test]
    fn tp1_hand_trace() {
        // N_r = 3, ν = [1, 0, 1]
        let mut buf = Buffer::new(3, 1);
        let u = |v: f64| vec_from(&[v]);
        let p0 = tp1_payload(0, true, u(10.0), &[u(1.0), u(2.0)]);
        assert_eq!(buf.tick(0, &p0, true).unwrap(), u(10.0));
        assert_eq!(buf.len(), 2);
        // t+1: single block lost, nominal n_{t+1} applied
        let p1 = tp1_payload(1, buf.is_empty(), u(11.0), &[u(2.0)]);
        assert_eq!(p1.len(), 1);
        assert_eq!(buf.tick(1, &p1, false).unwrap(), u(1.0));
        // t+2: single block received and applied
        let p2 = tp1_payload(2, buf.is_empty(), u(12.0), &[]);
        assert_eq!(buf.tick(2, &p2, true).unwrap(), u(12.0));
        assert!(buf.is_empty());
    }

    #[test]
    fn total_outage_applies_zero() {
        let mut buf = Buffer::new(3, 2);
        for step in 0..3 {
            let p = tp1_payload(step, true, vec_from(&[1.0, 1.0]), &[]);
            assert_eq!(buf.tick(step, &p, false).unwrap(), Vector::zeros(2));
        }
    }

    #[test]
    fn missed_instant_is_protocol_error() {
        let mut buf = Buffer::new(2, 1);
        let p = vec![Slot::Full(vec_from(&[0.0]))];
        assert!(matches!(buf.tick(2, &p, true), Err(Error::Protocol(_))));
    }

    #[test]
    fn perfect_channel_reduces_to_policy() {
        let s = Mat::identity(3, 3);
        let g = Mat::identity(3, 3);
        let ur = vec_from(&[1.0, 2.0, 3.0]);
        let eta = vec_from(&[0.5, 0.5, 0.5]);
        let theta = Mat::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.5, 1.0, 0.0, 0.2, 0.3, 1.0]);
        let psi = vec_from(&[0.1, -0.2, 0.3]);
        let ua = stacked_applied_control(&s, &g, HMode::EqualsG, &ur, &eta, &theta, &psi);
        assert!((ua - (&ur + &eta + &theta * &psi)).amax() < 1e-15);
        let z = Mat::zeros(3, 3);
        let ua = stacked_applied_control(
            &s,
            &z,
            HMode::EqualsG,
            &ur,
            &Vector::zeros(3),
            &theta,
            &Vector::zeros(3),
        );
        assert_eq!(ua, Vector::zeros(3));
    }
}
