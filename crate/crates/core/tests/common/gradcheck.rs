//! Central finite-difference oracle for graph gradients, run in f64.

use style_evo::tensor::{Bindings, Graph, ParamStore, Tensor, Var};

/// Step of the central difference.
pub const H: f64 = 1e-3;
/// Largest accepted per-coordinate relative error.
pub const TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    /// Largest relative error over all checked coordinates.
    Checked { max_rel: f64, coords: usize },
    /// The function is not smooth inside the stencil of some coordinate
    /// (a ReLU kink or clamp); the instance says nothing about the gradient.
    Kinked,
}

fn value<F>(f: &F, inputs: &[Tensor<f64>]) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).item()
}

fn central<F>(f: &F, inputs: &mut [Tensor<f64>], i: usize, j: usize, h: f64) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let orig = inputs[i].data()[j];
    inputs[i].data_mut()[j] = orig + h;
    let up = value(f, inputs);
    inputs[i].data_mut()[j] = orig - h;
    let down = value(f, inputs);
    inputs[i].data_mut()[j] = orig;
    (up - down) / (2.0 * h)
}

/// Compares the tape's gradient of the scalar `f(inputs)` with central
/// differences for the inputs flagged in `wrt`.
///
/// Relative error per coordinate is `|a − n| / max(|a|, |n|, 1e-3·‖n‖∞, 1e-8)`,
/// so coordinates whose gradient is tiny next to the largest one are judged
/// on an absolute scale.
pub fn check<F>(inputs: &[Tensor<f64>], wrt: &[bool], f: F) -> Outcome
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(wrt)
        .map(|(t, w)| {
            if *w {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).expect("scalar loss");
    let mut inputs = inputs.to_vec();
    let mut analytic = Vec::new();
    let mut coords = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        if wrt[i] {
            analytic.extend_from_slice(grads.get(*v).data());
            coords.extend((0..inputs[i].numel()).map(|j| (i, j)));
        }
    }
    compare(&analytic, &coords, |(i, j), h| {
        central(&f, &mut inputs, i, j, h)
    })
}

/// Same as [`check`], for the trainable parameters of `store` as seen
/// through `f`'s bindings.
pub fn check_store<F>(store: &ParamStore<f64>, f: F) -> Outcome
where
    F: Fn(&mut Graph<f64>, &Bindings) -> Var,
{
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let out = f(&mut g, &p);
    let grads = g.backward(out).expect("scalar loss");
    let mut analytic = Vec::new();
    let mut coords = Vec::new();
    for (id, var) in p.iter() {
        if store.is_frozen(id) {
            continue;
        }
        let n = store.get(id).numel();
        match grads.slice(var) {
            Some(gr) => analytic.extend_from_slice(gr),
            None => analytic.extend(std::iter::repeat_n(0.0, n)),
        }
        coords.extend((0..n).map(|j| (id, j)));
    }
    let mut store = store.clone();
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let out = f(&mut g, &p);
        g.value(out).item()
    };
    compare(&analytic, &coords, |(id, j), h| {
        let orig = store.get(id).data()[j];
        store.get_mut(id).data_mut()[j] = orig + h;
        let up = eval(&store);
        store.get_mut(id).data_mut()[j] = orig - h;
        let down = eval(&store);
        store.get_mut(id).data_mut()[j] = orig;
        (up - down) / (2.0 * h)
    })
}

fn compare<C: Copy>(
    analytic: &[f64],
    coords: &[C],
    mut diff: impl FnMut(C, f64) -> f64,
) -> Outcome {
    let mut numeric = Vec::with_capacity(coords.len());
    for &c in coords {
        let n1 = diff(c, H);
        let n2 = diff(c, H / 2.0);
        // Richardson-consistent pairs differ by O(h²); a kink gives O(1)
        if (n1 - n2).abs() > 1e-6 * (1.0 + n1.abs().max(n2.abs())) {
            return Outcome::Kinked;
        }
        // Richardson extrapolation cancels the h² term
        numeric.push((4.0 * n2 - n1) / 3.0);
    }
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let max_rel = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale).max(1e-8))
        .fold(0.0, f64::max);
    Outcome::Checked {
        max_rel,
        coords: numeric.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub worst: f64,
    pub valid: usize,
    pub kinked: usize,
    pub coords: usize,
}

impl Summary {
    pub fn passed(&self) -> bool {
        self.valid > 0 && self.worst < TOL
    }
}

/// Runs `make(seed)` for increasing seeds until `want` instances are smooth
/// enough to check, giving up after `want` kinked ones.
pub fn check_many<M>(want: usize, mut make: M) -> Summary
where
    M: FnMut(u64) -> Outcome,
{
    let mut s = Summary {
        worst: 0.0,
        valid: 0,
        kinked: 0,
        coords: 0,
    };
    let mut seed = 0;
    while s.valid < want && s.kinked <= want {
        match make(seed) {
            Outcome::Checked { max_rel, coords } => {
                s.valid += 1;
                s.coords += coords;
                s.worst = s.worst.max(max_rel);
            }
            Outcome::Kinked => s.kinked += 1,
        }
        seed += 1;
    }
    s
}
