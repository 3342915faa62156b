use rand::Rng;
use treeflow::cnf::{CnfConfig, CnfStack, TraceEstimator};
use treeflow::seed;

pub fn random_stack(
    dim: usize,
    ctx: usize,
    hidden: Vec<usize>,
    blocks: usize,
    seed: u64,
    spread: f64,
) -> CnfStack {
    let mut cfg = CnfConfig::new(dim, ctx, hidden, blocks);
    cfg.seed = seed;
    let mut stack = CnfStack::new(cfg).unwrap();
    let mut rng = seed::rng(seed ^ 0x5eed);
    for v in stack.store_mut().values_mut() {
        *v += rng.gen_range(-spread..spread);
    }
    stack
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample(rand_distr::StandardNormal))
        .collect()
}

/// Largest `|inv(fwd(z)) - z|` and `|fwd(inv(z)) - z|` over `cases` random
/// nets, points and contexts, integrated with 50 steps.
pub fn max_round_trip_error(cases: usize) -> f64 {
    let mut rng = seed::rng(77);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let stack = random_stack(2, 3, vec![16, 16], 2, (case / 100) as u64, 0.3);
        let z = normal_vec(&mut rng, 2);
        let w: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = stack.forward_transform_with(&z, &w, 50).unwrap();
        let back = stack.inverse_transform_with(&y, &w, 50).unwrap();
        let z2 = stack.inverse_transform_with(&z, &w, 50).unwrap();
        let y2 = stack.forward_transform_with(&z2, &w, 50).unwrap();
        for i in 0..2 {
            worst = worst.max((back[i] - z[i]).abs()).max((y2[i] - z[i]).abs());
        }
    }
    worst
}

/// Central-difference divergence of block 0's vector field.
pub fn fd_divergence(stack: &CnfStack, z: &[f64], t: f64, w: &[f64]) -> f64 {
    let eps = 1e-5;
    (0..z.len())
        .map(|i| {
            let (mut a, mut b) = (z.to_vec(), z.to_vec());
            a[i] += eps;
            b[i] -= eps;
            (stack.dynamics(0, &a, t, w).unwrap()[i] - stack.dynamics(0, &b, t, w).unwrap()[i])
                / (2.0 * eps)
        })
        .sum()
}

/// Largest absolute gap between the exact trace and the finite-difference
/// divergence, over `per_dim` random nets for each dimension.
pub fn max_trace_error(dims: &[usize], per_dim: u64) -> f64 {
    let mut rng = seed::rng(5);
    let mut worst: f64 = 0.0;
    for &dim in dims {
        for s in 0..per_dim {
            let stack = random_stack(dim, 4, vec![32, 16], 1, 100 + s, 0.3);
            let z = normal_vec(&mut rng, dim);
            let w = normal_vec(&mut rng, 4);
            let t = rng.gen_range(0.0..1.0);
            let exact = stack.exact_trace(0, &z, t, &w).unwrap();
            worst = worst.max((exact - fd_divergence(&stack, &z, t, &w)).abs());
        }
    }
    worst
}

pub fn trapezoid(values: &[f64], dx: f64) -> f64 {
    let n = values.len();
    dx * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1]))
}

/// Trapezoid mass of a random 1-D conditional flow over [-30, 30].
pub fn one_d_mass(seed: u64) -> f64 {
    let stack = random_stack(1, 2, vec![16, 8], 2, seed, 0.5);
    let w = [0.3, -0.8];
    let n = 4001;
    let ys: Vec<f64> = (0..n)
        .map(|i| -30.0 + 60.0 * i as f64 / (n - 1) as f64)
        .collect();
    let lp = stack.log_prob_batch(&ys, &w.repeat(n), 50).unwrap();
    let dens: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    trapezoid(&dens, 60.0 / (n - 1) as f64)
}

pub fn loss_only(stack: &CnfStack, ys: &[f64], ws: &[f64]) -> f64 {
    let mut s = stack.clone();
    s.store_mut().zero_grad();
    s.nll_loss_and_gradients(ys, ws, None).unwrap()
}

/// Worst relative error of parameter and context gradients against central
/// differences of the loss. Returns `(max error, parameter count)`.
pub fn max_gradient_error(
    dim: usize,
    ctx: usize,
    hidden: Vec<usize>,
    blocks: usize,
    trace: TraceEstimator,
    seed_v: u64,
) -> (f64, usize) {
    let mut stack = random_stack(dim, ctx, hidden, blocks, seed_v, 0.4);
    if trace == TraceEstimator::Hutchinson {
        let mut cfg = stack.config().clone();
        cfg.trace = trace;
        let values = stack.store().values().to_vec();
        stack = CnfStack::new(cfg).unwrap();
        stack.store_mut().load_values(&values).unwrap();
    }
    let mut rng = seed::rng(seed_v + 1000);
    let rows = 3;
    let ys = normal_vec(&mut rng, rows * dim);
    let ws = normal_vec(&mut rng, rows * ctx);
    stack.store_mut().zero_grad();
    let mut cg = vec![0.0; rows * ctx];
    stack
        .nll_loss_and_gradients(&ys, &ws, Some(&mut cg))
        .unwrap();
    let grads = stack.store().grads().to_vec();
    let eps = 1e-5;
    let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
    let mut worst: f64 = 0.0;
    for (i, g) in grads.iter().enumerate() {
        let mut a = stack.clone();
        a.store_mut().values_mut()[i] += eps;
        let mut b = stack.clone();
        b.store_mut().values_mut()[i] -= eps;
        let fd = (loss_only(&a, &ys, &ws) - loss_only(&b, &ys, &ws)) / (2.0 * eps);
        worst = worst.max(rel(fd, *g));
    }
    for i in 0..rows * ctx {
        let (mut a, mut b) = (ws.clone(), ws.clone());
        a[i] += eps;
        b[i] -= eps;
        let fd = (loss_only(&stack, &ys, &a) - loss_only(&stack, &ys, &b)) / (2.0 * eps);
        worst = worst.max(rel(fd, cg[i]));
    }
    (worst, stack.n_params())
}

/// The gradient-check nets: small enough for per-parameter differences.
pub fn gradient_cases() -> Vec<(usize, usize, Vec<usize>, usize, TraceEstimator, u64)> {
    vec![
        (1, 2, vec![4, 3], 2, TraceEstimator::Exact, 1),
        (2, 2, vec![5], 2, TraceEstimator::Exact, 2),
        (3, 1, vec![4], 1, TraceEstimator::Exact, 3),
        (3, 1, vec![4], 1, TraceEstimator::Hutchinson, 4),
    ]
}
