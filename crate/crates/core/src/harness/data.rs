use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{rng, Error, Result};

/// Number of distinct shape generators; class `k` draws shape `k`: a
/// horizontal, vertical, rising and falling bar, a square and a ring.
pub const SHAPES: usize = 6;

/// Per-channel photometric style of a synthetic domain:
/// `x' = scale · x + shift + noise · ε` with `ε ~ N(0, 1)` per pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomain {
    pub name: String,
    pub classes: usize,
    pub shift: [f32; 3],
    pub scale: [f32; 3],
    pub noise: f32,
}

impl SyntheticDomain {
    pub fn new(
        name: &str,
        classes: usize,
        shift: [f32; 3],
        scale: [f32; 3],
        noise: f32,
    ) -> Result<Self> {
        if classes == 0 || classes > SHAPES {
            return Err(Error::config(format!(
                "synthetic data supports 1..={SHAPES} classes, got {classes}"
            )));
        }
        if scale.iter().any(|s| !(*s > 0.0)) || !(noise >= 0.0) {
            return Err(Error::config(format!(
                "domain {name}: scales must be positive and noise non-negative"
            )));
        }
        Ok(Self {
            name: name.into(),
            classes,
            shift,
            scale,
            noise,
        })
    }

    /// The unshifted training domain.
    pub fn source(classes: usize) -> Result<Self> {
        Self::new("source", classes, [0.0; 3], [1.0; 3], 0.0)
    }

    /// The four shifted evaluation domains: darkening, additive noise, both,
    /// and contrast compression towards a bright level.
    pub fn targets(classes: usize) -> Result<Vec<Self>> {
        Ok(vec![
            Self::new("night", classes, [-0.6, -0.6, -0.45], [0.5; 3], 0.0)?,
            Self::new("rain", classes, [-0.1; 3], [0.9; 3], 0.3)?,
            Self::new("night_rain", classes, [-0.6, -0.6, -0.45], [0.5; 3], 0.25)?,
            Self::new("fog", classes, [0.55; 3], [0.4; 3], 0.0)?,
        ])
    }

    /// Source followed by the four targets.
    pub fn benchmark(classes: usize) -> Result<Vec<Self>> {
        let mut d = vec![Self::source(classes)?];
        d.extend(Self::targets(classes)?);
        Ok(d)
    }
}

/// Labelled images `[n, 3, S, S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images and labels at `idx`, in that order.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let [_, c, h, w] = self.images.dims4()?;
        let row = c * h * w;
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * row..(i + 1) * row]);
        }
        Ok((
            Tensor::new(&[idx.len(), c, h, w], data)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}

fn inside(shape: usize, dx: f32, dy: f32, r: f32) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let thick = r * 0.3;
    let diag = |u: f32, v: f32| {
        (u - v).abs() <= thick * std::f32::consts::SQRT_2 && (u + v).abs() <= 2.0 * r
    };
    match shape {
        0 => ax <= r && ay <= thick,
        1 => ay <= r && ax <= thick,
        2 => diag(dx, -dy),
        3 => diag(dx, dy),
        4 => ax <= r * 0.8 && ay <= r * 0.8,
        _ => {
            let d = (dx * dx + dy * dy).sqrt();
            d <= r && d >= r * 0.55
        }
    }
}

/// Clean image of `shape` drawn from `rng`: a faintly graded background and
/// a shape that is brighter than it in every channel.
fn base_image(shape: usize, size: usize, rng: &mut impl Rng, out: &mut [f32]) {
    let s = size as f32;
    let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.2..0.2));
    let grad: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.1..0.1));
    let fg: [f32; 3] = std::array::from_fn(|c| bg[c] + rng.random_range(0.6..1.0));
    let cx = rng.random_range(0.35 * s..0.65 * s);
    let cy = rng.random_range(0.35 * s..0.65 * s);
    let r = rng.random_range(0.18 * s..0.3 * s);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let on = inside(shape, dx, dy, r);
            for c in 0..3 {
                let v = if on {
                    fg[c]
                } else {
                    bg[c] + grad[c] * (x as f32 / s - 0.5)
                };
                let eps: f32 = StandardNormal.sample(rng);
                out[(c * size + y) * size + x] = v + 0.05 * eps;
            }
        }
    }
}

/// `n` balanced samples (label `i % classes`) in `domain`'s style. The clean
/// images depend only on `seed`, so every domain sees the same content.
pub fn gen_synthetic(
    domain: &SyntheticDomain,
    n: usize,
    size: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || size == 0 {
        return Err(Error::config(
            "synthetic dataset needs at least one sample and pixel",
        ));
    }
    let mut base_rng = rng::derive(seed, "synthetic-content");
    let mut noise_rng = rng::derive(seed, &format!("synthetic-noise:{}", domain.name));
    let plane = size * size;
    let mut data = vec![0.0f32; n * 3 * plane];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % domain.classes;
        let img = &mut data[i * 3 * plane..(i + 1) * 3 * plane];
        base_image(label, size, &mut base_rng, img);
        for c in 0..3 {
            for v in &mut img[c * plane..(c + 1) * plane] {
                let eps: f32 = if domain.noise > 0.0 {
                    StandardNormal.sample(&mut noise_rng)
                } else {
                    0.0
                };
                *v = domain.scale[c] * *v + domain.shift[c] + domain.noise * eps;
            }
        }
        labels.push(label);
    }
    Ok(Dataset {
        images: Tensor::new(&[n, 3, size, size], data)?,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domain_validation() {
        assert!(SyntheticDomain::new("x", 4, [0.0; 3], [0.0, 1.0, 1.0], 0.0).is_err());
        assert!(SyntheticDomain::new("x", 0, [0.0; 3], [1.0; 3], 0.0).is_err());
        assert!(SyntheticDomain::new("x", SHAPES + 1, [0.0; 3], [1.0; 3], 0.0).is_err());
        assert_eq!(SyntheticDomain::benchmark(4).unwrap().len(), 5);
    }

    #[test]
    fn labels_are_balanced() {
        let d = gen_synthetic(&SyntheticDomain::source(4).unwrap(), 12, 8, 0).unwrap();
        assert_eq!(d.labels, vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3]);
        let (x, y) = d.gather(&[5, 2]).unwrap();
        assert_eq!(y, vec![1, 2]);
        assert_eq!(x.shape(), &[2, 3, 8, 8]);
    }
}
