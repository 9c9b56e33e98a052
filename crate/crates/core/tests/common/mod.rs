//! Shared fixtures: a small window instance and a Monte Carlo evaluation of
//! the expected window cost that simulates the links and the buffer directly.

#![allow(dead_code)]

use netsmpc::channel::{tp1_payload, Buffer, HMode};
use netsmpc::config::ObjectiveForm;
use netsmpc::linalg::{Mat, Vector};
use netsmpc::model::{CostWeights, GaussianNoise, HorizonStack, LinearSystem, NoiseSampler};
use netsmpc::moments::{
    channel_moments_exact, noise_moments, ChannelMoments, NoiseMomentSpec, NoiseMoments,
};
use netsmpc::policy::{input_constraint_rows, PolicyParams, SaturationFn};
use netsmpc::qp::{DecisionLayout, ObjectiveData, WindowData};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct SmallWindow {
    pub sys: LinearSystem,
    pub weights: CostWeights,
    pub stack: HorizonStack,
    pub data: ObjectiveData,
    pub layout: DecisionLayout,
    pub channel: ChannelMoments,
    pub noise: NoiseMoments,
    pub p_c: f64,
    pub p_s: f64,
    pub h: usize,
    pub e_c: Vector,
    pub psi_last: Vector,
    pub u_r: Vector,
    pub sat: SaturationFn,
}

impl SmallWindow {
    /// Planar rotation plant with one input, horizon 2, two losses before the window.
    pub fn new(noise_samples: usize) -> Self {
        let (c, s) = (0.6, 0.8);
        let sys = LinearSystem::new(
            Mat::from_row_slice(2, 2, &[c, -s, s, c]),
            Mat::from_row_slice(2, 1, &[0.5, 1.0]),
            Mat::identity(2, 2) * 0.3,
            3.0,
        )
        .unwrap();
        let weights = CostWeights::new(
            Mat::identity(2, 2),
            Mat::identity(2, 2) * 2.0,
            Mat::identity(1, 1) * 0.5,
        )
        .unwrap();
        let (n, n_r) = (2, 2);
        let stack = HorizonStack::build(&sys, &weights, n, n_r).unwrap();
        let (p_c, p_s, h) = (0.7, 0.8, 2);
        let sat = SaturationFn::Sigmoid;
        let channel = channel_moments_exact(p_c, &stack, n_r, HMode::EqualsG).unwrap();
        let spec = NoiseMomentSpec::new(&sys, p_s, sat, n, noise_samples, 99).unwrap();
        let noise = noise_moments(&spec, h).unwrap();
        Self {
            data: ObjectiveData::new(&stack),
            layout: DecisionLayout::new(n, 1, 2),
            sys,
            weights,
            stack,
            channel,
            noise,
            p_c,
            p_s,
            h,
            e_c: Vector::from_vec(vec![1.0, -0.5]),
            psi_last: Vector::from_vec(vec![0.4, -0.3]),
            u_r: Vector::from_vec(vec![0.3, -0.2]),
            sat,
        }
    }

    pub fn window(&self, form: ObjectiveForm) -> WindowData<'_> {
        WindowData {
            channel: &self.channel,
            noise: &self.noise,
            e_c: &self.e_c,
            u_r_stack: &self.u_r,
            psi_last: &self.psi_last,
            form,
        }
    }

    pub fn horizon(&self) -> usize {
        self.stack.horizon
    }

    /// Random policy scaled inside the hard input rows.
    pub fn random_policy(&self, rng: &mut impl Rng) -> PolicyParams {
        let n = self.horizon();
        let mut p = PolicyParams::zeros(n, 1, 2);
        for i in 0..n {
            p.eta[i] = rng.random_range(-1.5..1.5);
            for j in 0..=i {
                for k in 0..2 {
                    p.theta[(i, j * 2 + k)] = rng.random_range(-1.5..1.5);
                }
            }
        }
        let rows = input_constraint_rows(&p, &self.u_r, self.sat.phi_max(), self.sys.u_max);
        for (i, r) in rows.iter().enumerate() {
            if !r.satisfied {
                let used = self.sys.u_max - r.margin;
                let f = 0.95 * self.sys.u_max / used;
                p.eta[i] = f * (self.u_r[i] + p.eta[i]) - self.u_r[i];
                for v in p.theta.row_mut(i).iter_mut() {
                    *v *= f;
                }
            }
        }
        p
    }
}

/// Realized window cost for each policy on one shared draw of noise and link bits.
fn sample_costs(
    w: &SmallWindow,
    policies: &[&PolicyParams],
    rng: &mut ChaCha8Rng,
    noise: &GaussianNoise,
) -> Vec<f64> {
    let n = w.horizon();
    let a = &w.sys.a;
    let b = &w.sys.b;
    let d = a.nrows();

    // estimator error accumulated over the losses before the window
    let mut e_d = Vector::zeros(d);
    for _ in 0..w.h {
        e_d = a * e_d + noise.sample(rng);
    }
    let mut ws = Vec::with_capacity(n);
    let mut psi = vec![w.psi_last.clone()];
    let mut e_run = e_d.clone();
    for _ in 0..n {
        let wk = noise.sample(rng);
        let s = rng.random::<f64>() < w.p_s;
        let next = a * &e_run + &wk;
        psi.push(if s {
            w.sat.apply_vec(&next)
        } else {
            Vector::zeros(d)
        });
        e_run = if s { Vector::zeros(d) } else { next };
        ws.push(wk);
    }
    let nu: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < w.p_c).collect();

    policies
        .iter()
        .map(|pol| {
            let mut e = &w.e_c + &e_d;
            let mut buffer = Buffer::new(w.stack.recalc, 1);
            let mut cost = 0.0;
            for l in 0..n {
                cost += e.dot(&(&w.weights.q * &e));
                let ur = w.u_r.rows(l, 1).into_owned();
                let full = pol.compute_control(&ur, &psi, l).unwrap();
                let applied = if l < w.stack.recalc {
                    let tail: Vec<Vector> = (l + 1..w.stack.recalc)
                        .map(|j| pol.nominal(&w.u_r.rows(j, 1).into_owned(), j))
                        .collect();
                    let payload = tp1_payload(l, buffer.is_empty(), full, &tail);
                    buffer.tick(l, &payload, nu[l]).unwrap()
                } else {
                    full
                };
                let ue = applied - &ur;
                cost += ue.dot(&(&w.weights.r * &ue));
                e = a * e + b * ue + &ws[l];
            }
            cost + e.dot(&(&w.weights.q_f * &e))
        })
        .collect()
}

/// Mean and standard error of `V(first) − V(second)` over `draws` common draws.
pub fn mc_cost_difference(
    w: &SmallWindow,
    first: &PolicyParams,
    second: &PolicyParams,
    draws: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = GaussianNoise::new(&w.sys.noise_cov).unwrap();
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..draws {
        let c = sample_costs(w, &[first, second], &mut rng, &noise);
        let diff = c[0] - c[1];
        sum += diff;
        sq += diff * diff;
    }
    let k = draws as f64;
    let mean = sum / k;
    let var = (sq - k * mean * mean) / (k - 1.0);
    (mean, (var.max(0.0) / k).sqrt())
}
