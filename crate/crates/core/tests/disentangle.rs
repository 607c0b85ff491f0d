use style_evo::disentangle::{
    loss_d, loss_d_from_sims, loss_gc, loss_sc, split, DisentangledPair, Extractor, ExtractorInit,
    Fuser, Matcher,
};
use style_evo::prompt::{FakeEncoder, TextEncoder};
use style_evo::style::Projection;
use style_evo::tensor::{Sgd, SgdConfig};
use style_evo::{rng, Graph, ParamStore, Tensor};

fn map(c: usize, vals: &[f64]) -> Tensor<f64> {
    Tensor::new(&[1, c, 1, vals.len() / c], vals.to_vec()).unwrap()
}

fn pair_of(init: ExtractorInit, x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let c = x.shape()[1];
    let mut store = ParamStore::<f64>::new();
    let es = Extractor::new(&mut store, "s", c, init, &mut rng::from_seed(1));
    let ec = Extractor::new(&mut store, "c", c, init, &mut rng::from_seed(2));
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let f1 = g.constant(x.clone());
    let pair = split(&mut g, &p, f1, &es, &ec).unwrap();
    assert_eq!(pair.source, f1);
    (g.value(pair.style).clone(), g.value(pair.content).clone())
}

#[test]
fn split_examples() {
    let x = Tensor::<f64>::randn(&[2, 4, 5, 3], 1.0, &mut rng::from_seed(0));
    let (s, c) = pair_of(ExtractorInit::Identity { noise: 0.0 }, &x);
    assert_eq!(s, x);
    assert_eq!(c, x);

    let (s, c) = pair_of(ExtractorInit::Zero, &x);
    assert!(s.data().iter().chain(c.data()).all(|v| *v == 0.0));

    for seed in 0..10 {
        let x = Tensor::<f64>::randn(
            &[1 + seed as usize % 2, 3, 4 + seed as usize, 6],
            2.0,
            &mut rng::from_seed(seed),
        );
        let (s, c) = pair_of(ExtractorInit::Random, &x);
        assert_eq!(s.shape(), x.shape());
        assert_eq!(c.shape(), x.shape());
        assert!(s.all_finite() && c.all_finite());
    }
}

fn loss_d_of(source: &[f64], style: &[f64], content: &[f64], tau: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let pair = DisentangledPair {
        source: g.constant(map(2, source)),
        style: g.constant(map(2, style)),
        content: g.constant(map(2, content)),
    };
    let l = loss_d(&mut g, &pair, tau).unwrap();
    g.value(l).item()
}

#[test]
fn loss_d_examples() {
    // one position, two channels: sim(F_1,F_s) = 1, sim(F_1,F_c) = 0
    let l = loss_d_of(&[1.0, 0.0], &[2.0, 0.0], &[0.0, 3.0], 1.0);
    assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    assert!((l - 0.31326).abs() < 1e-5);
    let l = loss_d_of(&[1.0, 1.0], &[1.0, 0.0], &[0.0, 1.0], 1.0);
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    let l = loss_d_of(&[1.0, 2.0], &[1.0, 2.0], &[3.0, 6.0], 1.0);
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    // temperature scales the similarity gap
    let l = loss_d_of(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 0.5);
    assert!((l - loss_d_from_sims(1.0, 0.0, 0.5)).abs() < 1e-12);
    assert!(l > 0.0);

    let mut g = Graph::<f64>::new();
    let a = g.constant(map(2, &[1.0, 0.0]));
    let pair = DisentangledPair {
        source: a,
        style: a,
        content: a,
    };
    assert!(loss_d(&mut g, &pair, -1.0).is_err());
    assert!(loss_d(&mut g, &pair, f64::NAN).is_err());
}

#[test]
fn loss_d_falls_as_style_similarity_rises() {
    let grid: Vec<f64> = (0..=40).map(|i| -1.0 + i as f64 * 0.05).collect();
    for tau in [0.1, 0.5, 1.0, 2.0] {
        for &sc in &grid {
            for w in grid.windows(2) {
                let (lo, hi) = (
                    loss_d_from_sims(w[0], sc, tau),
                    loss_d_from_sims(w[1], sc, tau),
                );
                assert!(hi < lo, "tau {tau}, s_c {sc}: {lo} then {hi}");
                assert!(hi > 0.0);
            }
        }
    }
}

fn loss_sc_of(style: Tensor<f64>, text: &[f64]) -> f64 {
    let mut g = Graph::<f64>::new();
    let s = g.constant(style);
    let f = g.constant(Tensor::new(&[text.len()], text.to_vec()).unwrap());
    let proj = g.constant(Projection::identity(text.len()).matrix.cast());
    let l = loss_sc(&mut g, s, f, proj).unwrap();
    g.value(l).item()
}

#[test]
fn loss_sc_examples() {
    let text = [1.0, 2.0];
    assert!(loss_sc_of(map(2, &[1.0, 3.0, 2.0, 6.0]), &text).abs() < 1e-12);
    assert!((loss_sc_of(map(2, &[2.0, -4.0, -1.0, 2.0]), &text) - 1.0).abs() < 1e-12);
    assert!((loss_sc_of(map(2, &[-1.0, -0.5, -2.0, -1.0]), &text) - 2.0).abs() < 1e-12);
}

/// Matcher whose pooling is a no-op and whose channel map is the identity.
fn identity_matcher(c: usize, h: usize, w: usize) -> Matcher {
    Matcher {
        map: Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 }),
        out_h: h,
        out_w: w,
    }
}

fn loss_gc_of(fp: Tensor<f64>, fc: Tensor<f64>, m: &Matcher) -> f64 {
    let mut g = Graph::<f64>::new();
    let a = g.constant(fp);
    let b = g.constant(fc);
    let l = loss_gc(&mut g, a, b, m).unwrap();
    g.value(l).item()
}

#[test]
fn loss_gc_examples() {
    let m = identity_matcher(2, 1, 2);
    let fc = map(2, &[1.0, -2.0, 0.5, 3.0]);
    assert!(loss_gc_of(fc.clone(), fc.clone(), &m).abs() < 1e-12);
    // (1, 0.5) ⟂ (-0.5, 1) and (-2, 3) ⟂ (3, 2)
    assert!((loss_gc_of(map(2, &[-0.5, 3.0, 1.0, 2.0]), fc.clone(), &m) - 1.0).abs() < 1e-12);
    assert!((loss_gc_of(fc.map(|v| -v), fc.clone(), &m) - 2.0).abs() < 1e-12);

    // a 4×4 map of constant 2×2 blocks pools down to the blocks themselves
    let small = Tensor::<f64>::randn(&[1, 2, 2, 2], 1.0, &mut rng::from_seed(3));
    let big = Tensor::from_fn(&[1, 2, 4, 4], |i| {
        let (c, y, x) = (i / 16, (i / 4) % 4, i % 4);
        small.data()[c * 4 + (y / 2) * 2 + x / 2]
    });
    assert!(loss_gc_of(big, small, &identity_matcher(2, 2, 2)).abs() < 1e-12);

    // a random matcher reaches the content shape from a deeper, smaller map
    let m = Matcher::random(8, 3, 6, 6, &mut rng::from_seed(4));
    let l = loss_gc_of(
        Tensor::randn(&[2, 8, 3, 3], 1.0, &mut rng::from_seed(5)),
        Tensor::randn(&[2, 3, 6, 6], 1.0, &mut rng::from_seed(6)),
        &m,
    );
    assert!((0.0..=2.0).contains(&l));
}

fn fuse_of(
    styled: &Tensor<f64>,
    content: &Tensor<f64>,
) -> Result<Tensor<f64>, style_evo::tensor::TensorError> {
    let mut store = ParamStore::<f64>::new();
    let fuser = Fuser::new(&mut store, "fuse", styled.shape()[1]);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let a = g.constant(styled.clone());
    let b = g.constant(content.clone());
    let out = fuser.forward(&mut g, &p, a, b)?;
    Ok(g.value(out).clone())
}

#[test]
fn fuse_examples() {
    let x = Tensor::<f64>::randn(&[2, 3, 4, 4], 1.0, &mut rng::from_seed(7));
    assert_eq!(fuse_of(&x, &Tensor::zeros(x.shape())).unwrap(), x);
    assert_eq!(fuse_of(&x, &x).unwrap(), x.map(|v| 2.0 * v));
    let y = Tensor::<f64>::randn(&[2, 3, 4, 4], 1.0, &mut rng::from_seed(8));
    assert_eq!(fuse_of(&x, &y).unwrap().shape(), x.shape());
    assert!(fuse_of(&x, &Tensor::zeros(&[2, 3, 4, 5])).is_err());
}

#[test]
fn joint_training_halves_the_summed_loss() {
    let c = 8;
    let mut r = rng::from_seed(11);
    let f1 = Tensor::<f32>::randn(&[2, c, 8, 8], 1.0, &mut r);
    let deep = Tensor::<f32>::randn(&[2, 16, 2, 2], 1.0, &mut r);
    let text = FakeEncoder::new(c, 0)
        .unwrap()
        .encode("sunny day realistic")
        .unwrap();
    let matcher = Matcher::random(16, c, 8, 8, &mut r);

    let mut store = ParamStore::<f32>::new();
    let init = ExtractorInit::Identity { noise: 0.01 };
    let es = Extractor::new(&mut store, "style", c, init, &mut r);
    let ec = Extractor::new(&mut store, "content", c, init, &mut r);
    let mut opt = Sgd::new(SgdConfig {
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 0.0,
    });
    let mut losses = Vec::new();
    for _ in 0..300 {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(f1.clone());
        let pair = split(&mut g, &p, x, &es, &ec).unwrap();
        let ft = g.constant(Tensor::new(&[c], text.0.clone()).unwrap());
        let proj = g.constant(Projection::identity(c).matrix.clone());
        let fp = g.constant(deep.clone());
        let ld = loss_d(&mut g, &pair, 1.0).unwrap();
        let lsc = loss_sc(&mut g, pair.style, ft, proj).unwrap();
        let lgc = loss_gc(&mut g, fp, pair.content, &matcher).unwrap();
        let total = g.add(ld, lsc).unwrap();
        let total = g.add(total, lgc).unwrap();
        losses.push(g.value(total).item() as f64);
        let grads = g.backward(total).unwrap();
        opt.step(&mut store, &p, &grads).unwrap();
    }
    let smooth = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    let (first, last) = (smooth(&losses[..10]), smooth(&losses[290..]));
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(last <= 0.5 * first, "{first} -> {last}");
}
