#![allow(dead_code)]

use affine_fence::linalg::Matrix;
use affine_fence::trainer::task_loss_and_grad;
use affine_fence::trainer::TaskKind;
use affine_fence::{Network, Qp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Random `min ‖u‖² s.t. A u ≥ c` with a known feasible point. About half the
/// rows are tight at that point.
pub fn random_feasible_qp(seed: u64, max_q: usize, max_m: usize) -> Qp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = rng.random_range(1..=max_q);
    let m = rng.random_range(1..=max_m);
    let a: Vec<f64> = (0..m * q).map(|_| rng.sample(StandardNormal)).collect();
    let a = Matrix::new(m, q, a).unwrap();
    let u0: Vec<f64> = (0..q).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0).collect();
    let c: Vec<f64> = a
        .iter_rows()
        .map(|r| {
            let slack = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..1.0) };
            r.iter().zip(&u0).map(|(x, y)| x * y).sum::<f64>() - slack
        })
        .collect();
    Qp::new(a, c.into()).unwrap()
}

fn dual_grad(a: &Matrix<f64>, c: &[f64], lam: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let u = primal_of(a, lam);
    let g = a
        .iter_rows()
        .zip(c)
        .map(|(r, &cj)| r.iter().zip(&u).map(|(x, y)| x * y).sum::<f64>() - cj)
        .collect();
    (g, u)
}

fn primal_of(a: &Matrix<f64>, lam: &[f64]) -> Vec<f64> {
    let mut u = vec![0.0; a.cols()];
    for (r, &l) in a.iter_rows().zip(lam) {
        for (ui, &x) in u.iter_mut().zip(r) {
            *ui += l * x;
        }
    }
    u
}

/// Accelerated projected gradient on the dual `min ½‖Aᵀλ‖² − cᵀλ, λ ≥ 0`
/// with adaptive restart. Returns `u = Aᵀλ`.
pub fn projected_gradient_oracle(qp: &Qp) -> Vec<f64> {
    let a = &qp.a;
    let c: Vec<f64> = qp.c.iter().copied().collect();
    let m = a.rows();
    // Power iteration for ‖A Aᵀ‖₂.
    let mut v = vec![1.0; m];
    let mut big = 1.0;
    for _ in 0..500 {
        let u = primal_of(a, &v);
        let w: Vec<f64> = a.iter_rows().map(|r| r.iter().zip(&u).map(|(x, y)| x * y).sum()).collect();
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            break;
        }
        big = n / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.iter().map(|x| x / n).collect();
    }
    let step = 1.0 / (big * 1.05);
    let mut lam = vec![0.0; m];
    let mut y = lam.clone();
    let mut t: f64 = 1.0;
    for k in 0..2_000_000 {
        let (g, _) = dual_grad(a, &c, &y);
        let next: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| (yi - step * gi).max(0.0)).collect();
        let moved: f64 = next.iter().zip(&lam).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        // Restart when the momentum direction stops being a descent one.
        let uphill: f64 = g.iter().zip(next.iter().zip(&lam)).map(|(gi, (n, l))| gi * (n - l)).sum();
        if uphill > 0.0 {
            t = 1.0;
            y = lam.clone();
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        y = next
            .iter()
            .zip(&lam)
            .map(|(n, l)| n + (t - 1.0) / t_next * (n - l))
            .collect();
        lam = next;
        t = t_next;
        if moved < 1e-16 && k > 10 {
            break;
        }
    }
    primal_of(a, &lam)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Primal feasibility, stationarity, dual sign and complementarity residuals
/// of `(u, λ)`, largest first.
pub fn kkt_residual(qp: &Qp, u: &[f64], lam: &[f64]) -> f64 {
    let feas = qp.max_violation(u);
    let stat = max_abs_diff(u, &primal_of(&qp.a, lam));
    let sign = lam.iter().fold(0.0f64, |m, &l| m.max(-l));
    let comp = qp
        .a
        .iter_rows()
        .zip(qp.c.iter())
        .zip(lam)
        .map(|((r, &cj), &l)| (l * (r.iter().zip(u).map(|(x, y)| x * y).sum::<f64>() - cj)).abs())
        .fold(0.0, f64::max);
    feas.max(stat).max(sign).max(comp)
}

pub fn random_dims(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let d = rng.random_range(1..=3);
    let depth = rng.random_range(1..=3);
    let mut dims = vec![d];
    dims.extend((0..depth).map(|_| rng.random_range(2..=6)));
    dims.push(rng.random_range(1..=2));
    dims
}

pub fn smallest_hidden_preactivation(net: &Network, x: &Matrix<f64>) -> f64 {
    let trace = net.forward_trace_batch(x).unwrap();
    let hidden = &trace.pre_activations[..trace.pre_activations.len() - 1];
    hidden
        .iter()
        .flat_map(|z| z.data().iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

pub fn loss_of(net: &Network, x: &Matrix<f64>, t: &Matrix<f64>, task: TaskKind) -> f64 {
    task_loss_and_grad(&net.forward_batch(x).unwrap(), t, task).0
}

pub fn central_differences(net: &Network, f: impl Fn(&Network) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let p = net.params();
    let mut probe = net.clone();
    (0..p.len())
        .map(|i| {
            let mut q = p.clone();
            q[i] = p[i] + h;
            probe.set_params(&q).unwrap();
            let up = f(&probe);
            q[i] = p[i] - h;
            probe.set_params(&q).unwrap();
            let down = f(&probe);
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(1e-8, f64::max);
    diff / scale
}
