//! Every differentiable op and module, each as a seeded family of
//! finite-difference instances.

use style_evo::disentangle::{self, DisentangledPair, Extractor, ExtractorInit, Fuser, Matcher};
use style_evo::proto::{self, PrototypeBank};
use style_evo::tensor::{Graph, ParamStore, Tensor, Var};
use style_evo::{rng, style};

use super::gradcheck::{check, check_store, Outcome};

pub struct Case {
    pub name: &'static str,
    pub instances: usize,
    pub make: fn(u64) -> Outcome,
}

fn randn(shape: &[usize], r: &mut impl rand::Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

/// `Σ x ⊙ w` for a fixed random `w`, so every output coordinate matters.
fn probe(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let w = randn(g.shape(x), &mut rng::derive(seed, "probe"));
    let w = g.constant(w);
    let y = g.mul(x, w).unwrap();
    g.sum(y)
}

fn elementwise(s: u64) -> Outcome {
    let mut r = rng::from_seed(s);
    let (a, b) = (randn(&[2, 3, 2, 2], &mut r), randn(&[2, 3, 2, 2], &mut r));
    check(&[a, b], &[true, true], move |g, v| {
        let x = g.add(v[0], v[1]).unwrap();
        let y = g.sub(v[0], v[1]).unwrap();
        let z = g.mul(x, y).unwrap();
        let z = g.affine(z, 0.7, -0.2);
        let z = g.relu(z);
        let z = g.scale(z, 1.5);
        let m = g.mean(z);
        let p = probe(g, y, s);
        g.add(m, p).unwrap()
    })
}

fn scalar_plumbing(s: u64) -> Outcome {
    let mut r = rng::from_seed(s);
    let x = randn(&[2, 6], &mut r);
    check(&[x], &[true], move |g, v| {
        let y = g.reshape(v[0], &[3, 4]).unwrap();
        let a = probe(g, y, s);
        let sq = g.mul(v[0], v[0]).unwrap();
        let b = g.mean(sq);
        let logits = g.stack_scalars(&[a, b]).unwrap();
        let ce = g.cross_entropy(logits, &[1]).unwrap();
        g.weighted_sum(&[(ce, 0.8), (a, 0.3)]).unwrap()
    })
}

fn linear_ce(s: u64) -> Outcome {
    let mut r = rng::from_seed(s);
    let (x, w, b) = (
        randn(&[3, 5], &mut r),
        randn(&[4, 5], &mut r),
        randn(&[4], &mut r),
    );
    check(&[x, w, b], &[true; 3], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
        g.cross_entropy(y, &[0, 3, 1]).unwrap()
    })
}

fn conv(s: u64) -> Outcome {
    let mut r = rng::from_seed(s);
    let (x, w, b) = (
        randn(&[2, 3, 5, 4], &mut r),
        randn(&[4, 3, 3, 3], &mut r),
        randn(&[4], &mut r),
    );
    let (stride, pad) = [(1, 1), (2, 1), (1, 0)][s as usize % 3];
    check(&[x, w, b], &[true; 3], move |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
        probe(g, y, s)
    })
}

fn normalize_channels(s: u64) -> Outcome {
    let mut r = rng::from_seed(s);
    check(&[randn(&[2, 3, 3, 3], &mut r)], &[true], move |g, v| {
        let y = g.normalize_channels(v[0]).unwrap();
        probe(g, y, s)
    })
}

fn apply_style(s: u64) -> Outcome {
    let mut r = rng::from_seed(s);
    let (x, mu, sigma) = (
        randn(&[2, 3, 3, 3], &mut r),
        randn(&[3], &mut r),
        randn(&[3], &mut r),
    );
    check(&[x, mu, sigma], &[true; 3], move |g, v| {
        let y = g.apply_style(v[0], v[1], v[2]).unwrap();
        probe(g, y, s)
    })
}

fn channel_cosine(s: u64) -> Outcome {
    let mut r = rng::from_seed(s);
    let (a, b) = (randn(&[2, 4, 2, 3], &mut r), randn(&[2, 4, 2, 3], &mut r));
    check(&[a, b], &[true, true], |g, v| {
        g.channel_cosine(v[0], v[1]).unwrap()
    })
}

fn project_channels(s: u64) -> Outcome {
    let mut r = rng::from_seed(s);
    let (x, p) = (randn(&[2, 3, 2, 2], &mut r), randn(&[5, 3], &mut r));
    check(&[x, p], &[true, true], move |g, v| {
        let y = g.project_channels(v[0], v[1]).unwrap();
        probe(g, y, s)
    })
}

fn l2_channels(s: u64) -> Outcome {
    let mut r = rng::from_seed(s);
    check(&[randn(&[2, 4, 2, 3], &mut r)], &[true], move |g, v| {
        let y = g.l2_normalize_channels(v[0]).unwrap();
        probe(g, y, s)
    })
}

fn l2_rows(s: u64) -> Outcome {
    let mut r = rng::from_seed(s);
    check(&[randn(&[2, 3, 5], &mut r)], &[true], move |g, v| {
        let y = g.l2_normalize_rows(v[0]).unwrap();
        probe(g, y, s)
    })
}

fn softmax_channels(s: u64) -> Outcome {
    let mut r = rng::from_seed(s);
    check(&[randn(&[2, 4, 2, 2], &mut r)], &[true], move |g, v| {
        let y = g.softmax_channels(v[0]).unwrap();
        probe(g, y, s)
    })
}

fn assignment_residuals(s: u64) -> Outcome {
    let mut r = rng::from_seed(s);
    let (f, t, c) = (
        randn(&[2, 3, 2, 2], &mut r),
        randn(&[2, 4, 2, 2], &mut r),
        randn(&[4, 3], &mut r),
    );
    check(&[f, t, c], &[true; 3], move |g, v| {
        let y = g.assignment_residuals(v[0], v[1], v[2]).unwrap();
        probe(g, y, s)
    })
}

fn spatial_plumbing(s: u64) -> Outcome {
    let mut r = rng::from_seed(s);
    let (a, b, k) = (
        randn(&[2, 2, 5, 3], &mut r),
        randn(&[2, 3, 5, 3], &mut r),
        randn(&[2, 3, 2], &mut r),
    );
    check(&[a, b, k], &[true; 3], move |g, v| {
        let cat = g.concat_channels(v[0], v[1]).unwrap();
        // 5×3 → 2×2 pools over overlapping, unequal windows
        let pooled = g.adaptive_avg_pool(cat, 2, 2).unwrap();
        let a = probe(g, pooled, s);
        let gp = g.global_avg_pool(cat).unwrap();
        let b = probe(g, gp, s ^ 1);
        let m = g.mean_broadcast_spatial(v[2], 2, 3).unwrap();
        let c = probe(g, m, s ^ 2);
        g.weighted_sum(&[(a, 1.0), (b, 1.0), (c, 1.0)]).unwrap()
    })
}

/// Text-consistency loss through the style parameters it trains.
fn loss_tc(s: u64) -> Outcome {
    let mut r = rng::from_seed(s);
    let (c, d) = (3, 5);
    let x = randn(&[2, c, 3, 3], &mut r);
    let (mu, sigma, f, p) = (
        randn(&[c], &mut r),
        randn(&[c], &mut r),
        randn(&[d], &mut r),
        randn(&[d, c], &mut r),
    );
    check(
        &[x, mu, sigma, f, p],
        &[false, true, true, true, true],
        |g, v| {
            let n = g.normalize_channels(v[0]).unwrap();
            let styled = g.apply_style(n, v[1], v[2]).unwrap();
            style::loss_tc(g, styled, v[3], v[4]).unwrap()
        },
    )
}

fn extractors(store: &mut ParamStore<f64>, c: usize, s: u64) -> (Extractor, Extractor) {
    let init = ExtractorInit::Identity { noise: 0.02 };
    (
        Extractor::new(store, "style", c, init, &mut rng::derive(s, "style")),
        Extractor::new(store, "content", c, init, &mut rng::derive(s, "content")),
    )
}

/// The three disentanglement losses, through both extractors.
fn disentangle_losses(s: u64) -> Outcome {
    let c = 2;
    let mut store = ParamStore::new();
    let (es, ec) = extractors(&mut store, c, s);
    let mut r = rng::derive(s, "inputs");
    // |F_1| >= 0.5 keeps the hidden ReLUs of the near-identity extractors
    // well away from their kink
    let f1 = randn(&[1, c, 4, 4], &mut r).map(|v| v.signum() * (0.5 + v.abs()));
    let (fp, text) = (randn(&[1, 3, 2, 2], &mut r), randn(&[c], &mut r));
    let proj = randn(&[c, c], &mut r);
    let matcher = Matcher::random(3, c, 4, 4, &mut r);
    check_store(&store, move |g, p| {
        let x = g.constant(f1.clone());
        let pair = disentangle::split(g, p, x, &es, &ec).unwrap();
        let ld = disentangle::loss_d(g, &pair, 0.7).unwrap();
        let (t, pr) = (g.constant(text.clone()), g.constant(proj.clone()));
        let lsc = disentangle::loss_sc(g, pair.style, t, pr).unwrap();
        let fpv = g.constant(fp.clone());
        let lgc = disentangle::loss_gc(g, fpv, pair.content, &matcher).unwrap();
        g.weighted_sum(&[(ld, 1.0), (lsc, 0.5), (lgc, 2.0)])
            .unwrap()
    })
}

/// `loss_d` and `loss_gc` with respect to the maps themselves, including the
/// prototype side of `loss_gc`.
fn disentangle_inputs(s: u64) -> Outcome {
    // four channels keep per-position norms away from zero, where the
    // cosine is too curved for a 1e-3 stencil
    let mut r = rng::from_seed(s);
    let (f1, fs, fc) = (
        randn(&[1, 4, 3, 3], &mut r),
        randn(&[1, 4, 3, 3], &mut r),
        randn(&[1, 4, 3, 3], &mut r),
    );
    let fp = randn(&[1, 6, 2, 2], &mut r);
    let matcher = Matcher::random(6, 4, 3, 3, &mut r);
    check(&[f1, fs, fc, fp], &[true; 4], move |g, v| {
        let pair = DisentangledPair {
            source: v[0],
            style: v[1],
            content: v[2],
        };
        let ld = disentangle::loss_d(g, &pair, 1.0).unwrap();
        let lgc = disentangle::loss_gc(g, v[3], v[2], &matcher).unwrap();
        g.add(ld, lgc).unwrap()
    })
}

fn fuser(s: u64) -> Outcome {
    let c = 3;
    let mut store = ParamStore::new();
    let fu = Fuser::new(&mut store, "fuser", c);
    for id in store.ids().collect::<Vec<_>>() {
        let noise = randn(store.get(id).shape(), &mut rng::derive(s, "noise"));
        for (v, e) in store.get_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += 0.3 * e;
        }
    }
    let mut r = rng::derive(s, "inputs");
    let (a, b) = (randn(&[2, c, 2, 2], &mut r), randn(&[2, c, 2, 2], &mut r));
    check_store(&store, move |g, p| {
        let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
        let out = fu.forward(g, p, x, y).unwrap();
        probe(g, out, s)
    })
}

/// Centers, assignment conv, output linear and fuse conv through a scalar
/// head on the enhanced map.
fn prototypes(s: u64) -> Outcome {
    let (k, c) = (3, 2);
    let mut store = ParamStore::new();
    let bank =
        PrototypeBank::new(&mut store, "proto", k, c, 0.5, &mut rng::derive(s, "bank")).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let noise = randn(store.get(id).shape(), &mut rng::derive(s, store.name(id)));
        for (v, e) in store.get_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += 0.3 * e;
        }
    }
    let f = randn(&[2, c, 3, 3], &mut rng::derive(s, "inputs"));
    check_store(&store, move |g, p| {
        let x = g.constant(f.clone());
        let out = proto::enhance(g, p, x, &bank).unwrap();
        probe(g, out, s)
    })
}

pub fn cases() -> Vec<Case> {
    let c = |name, instances, make| Case {
        name,
        instances,
        make,
    };
    vec![
        c("elementwise", 8, elementwise as fn(u64) -> Outcome),
        c(
            "reshape/stack/weighted_sum/cross_entropy",
            8,
            scalar_plumbing,
        ),
        c("linear + cross_entropy", 8, linear_ce),
        c("conv2d", 6, conv),
        c("normalize_channels", 8, normalize_channels),
        c("apply_style", 8, apply_style),
        c("channel_cosine", 8, channel_cosine),
        c("project_channels", 6, project_channels),
        c("l2_normalize_channels", 8, l2_channels),
        c("l2_normalize_rows", 8, l2_rows),
        c("softmax_channels", 8, softmax_channels),
        c("assignment_residuals", 8, assignment_residuals),
        c("pooling/concat/broadcast", 6, spatial_plumbing),
        c("loss_tc through style params", 8, loss_tc),
        c(
            "loss_d + loss_sc + loss_gc through extractors",
            5,
            disentangle_losses,
        ),
        c("loss_d + loss_gc inputs", 8, disentangle_inputs),
        c("fuser", 5, fuser),
        c("prototype bank", 5, prototypes),
    ]
}
