//! Seeded finite-difference cases covering every differentiable tape op.

use htfl_core::numcore::{seeded_rng, Tape, Var};
use rand::Rng;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Vec<f32>)>,
    pub build: fn(&mut Tape, &[Var], &Extra) -> Var,
    pub extra: Extra,
}

/// Fixed non-differentiable side data (labels, weights, constants).
#[derive(Clone, Default)]
pub struct Extra {
    pub labels: Vec<usize>,
    pub weights: Vec<f32>,
    pub target: Vec<f32>,
    pub target_shape: Vec<usize>,
}

fn away_from_zero<R: Rng>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let v: f32 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn reduce(t: &mut Tape, out: Var, e: &Extra) -> Var {
    let r = t.constant(e.target_shape.clone(), e.target.clone()).unwrap();
    t.mse(out, r).unwrap()
}

const KINDS: usize = 17;

pub fn case(index: usize) -> Case {
    let mut rng = seeded_rng(9000 + index as u64);
    let b = rng.random_range(2..5usize);
    let m = rng.random_range(2..6usize);
    let n = rng.random_range(2..6usize);
    let mut x = |shape: Vec<usize>| {
        let len = shape.iter().product();
        let d = away_from_zero(&mut rng, len);
        (shape, d)
    };
    let (name, inputs, out_shape, build): (&'static str, Vec<_>, Vec<usize>, fn(&mut Tape, &[Var], &Extra) -> Var) =
        match index % KINDS {
            0 => ("linear", vec![x(vec![b, m]), x(vec![m, n]), x(vec![n])], vec![b, n], |t, v, e| {
                let o = t.linear(v[0], v[1], v[2]).unwrap();
                reduce(t, o, e)
            }),
            1 => ("matmul", vec![x(vec![b, m]), x(vec![m, n])], vec![b, n], |t, v, e| {
                let o = t.matmul(v[0], v[1]).unwrap();
                reduce(t, o, e)
            }),
            2 => ("relu", vec![x(vec![b, m])], vec![b, m], |t, v, e| {
                let o = t.relu(v[0]);
                reduce(t, o, e)
            }),
            3 => ("softmax", vec![x(vec![b, m])], vec![b, m], |t, v, e| {
                let o = t.softmax(v[0]).unwrap();
                reduce(t, o, e)
            }),
            4 => ("log_softmax", vec![x(vec![b, m])], vec![b, m], |t, v, e| {
                let o = t.log_softmax(v[0]).unwrap();
                reduce(t, o, e)
            }),
            5 => ("cross_entropy", vec![x(vec![b, m])], vec![], |t, v, e| {
                t.cross_entropy(v[0], &e.labels).unwrap()
            }),
            6 => ("weighted_cross_entropy", vec![x(vec![b, m])], vec![], |t, v, e| {
                t.weighted_cross_entropy(v[0], &e.labels, &e.weights).unwrap()
            }),
            7 => ("kl_divergence", vec![x(vec![b, m]), x(vec![b, m])], vec![], |t, v, _| {
                t.kl_divergence(v[0], v[1], 2.0).unwrap()
            }),
            8 => ("mse", vec![x(vec![b, m]), x(vec![b, m])], vec![], |t, v, _| t.mse(v[0], v[1]).unwrap()),
            9 => ("conv1d_s1", vec![x(vec![b, 2, 7]), x(vec![3, 2, 3]), x(vec![3])], vec![b, 3, 5], |t, v, e| {
                let o = t.conv1d(v[0], v[1], v[2], 1).unwrap();
                reduce(t, o, e)
            }),
            10 => ("conv1d_s2", vec![x(vec![b, 2, 8]), x(vec![3, 2, 3]), x(vec![3])], vec![b, 3, 3], |t, v, e| {
                let o = t.conv1d(v[0], v[1], v[2], 2).unwrap();
                reduce(t, o, e)
            }),
            11 => ("pool1d", vec![x(vec![b, 2, 6])], vec![b, 2, 3], |t, v, e| {
                let o = t.pool1d(v[0]).unwrap();
                reduce(t, o, e)
            }),
            12 => ("average_pool", vec![x(vec![b, 12])], vec![b, 4], |t, v, e| {
                let o = t.average_pool(v[0], 4).unwrap();
                reduce(t, o, e)
            }),
            13 => ("concat", vec![x(vec![b, m]), x(vec![b, n])], vec![b, m + n], |t, v, e| {
                let o = t.concat(v[0], v[1]).unwrap();
                reduce(t, o, e)
            }),
            14 => ("pairwise_distance", vec![x(vec![b, m]), x(vec![n, m])], vec![b, n], |t, v, e| {
                let o = t.pairwise_distance(v[0], v[1]).unwrap();
                reduce(t, o, e)
            }),
            15 => ("select_rows_mse_add_scaled", vec![x(vec![b, m])], vec![], |t, v, e| {
                let ce = t.cross_entropy(v[0], &e.labels).unwrap();
                let rows: Vec<usize> = (0..e.labels.len()).step_by(2).collect();
                let s = t.select_rows(v[0], &rows).unwrap();
                let r = t.constant(vec![rows.len(), e.target_shape[1]], e.target[..rows.len() * e.target_shape[1]].to_vec()).unwrap();
                let reg = t.mse(s, r).unwrap();
                t.add_scaled(ce, reg, 0.7).unwrap()
            }),
            _ => ("sub_scale_sum_mean", vec![x(vec![b, m]), x(vec![b, m])], vec![], |t, v, _| {
                let d = t.sub(v[0], v[1]).unwrap();
                let d = t.relu(d);
                let s = t.scale(d, 1.5);
                let a = t.sum(s);
                let sq = t.mse(v[0], v[1]).unwrap();
                let mm = t.mean(v[1]);
                let a = t.add(a, sq).unwrap();
                t.add(a, mm).unwrap()
            }),
        };
    let rows = inputs[0].0[0];
    let cols = *inputs[0].0.last().unwrap();
    let target_shape = if out_shape.is_empty() { vec![rows, cols] } else { out_shape };
    let tlen = target_shape.iter().product();
    let extra = Extra {
        labels: (0..rows).map(|_| rng.random_range(0..cols)).collect(),
        weights: (0..rows).map(|_| rng.random_range(0.5..3.0)).collect(),
        target: away_from_zero(&mut rng, tlen),
        target_shape,
    };
    Case {
        name,
        inputs,
        build,
        extra,
    }
}

/// Relative error `‖g − ĝ‖ / max(‖g‖ + ‖ĝ‖, 1e-6)` between the tape
/// gradient and a central difference, worst over inputs.
pub fn check(c: &Case) -> f64 {
    let eval = |inputs: &[(Vec<usize>, Vec<f32>)]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|(s, d)| t.constant(s.clone(), d.clone()).unwrap()).collect();
        let l = (c.build)(&mut t, &vars, &c.extra);
        t.scalar(l) as f64
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = c.inputs.iter().map(|(s, d)| t.param(s.clone(), d.clone()).unwrap()).collect();
    let l = (c.build)(&mut t, &vars, &c.extra);
    t.backward(l).unwrap();
    let eps = 1e-2f32;
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let g = t.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; c.inputs[k].1.len()]);
        let mut num = Vec::with_capacity(g.len());
        for j in 0..g.len() {
            let mut plus = c.inputs.clone();
            plus[k].1[j] += eps;
            let mut minus = c.inputs.clone();
            minus[k].1[j] -= eps;
            num.push((eval(&plus) - eval(&minus)) / (2.0 * eps as f64));
        }
        let diff: f64 = g.iter().zip(&num).map(|(a, b)| (*a as f64 - b).powi(2)).sum::<f64>().sqrt();
        let na: f64 = g.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = num.iter().map(|b| b.powi(2)).sum::<f64>().sqrt();
        worst = worst.max(diff / (na + nb).max(1e-6));
    }
    worst
}
