//! A 51-parameter model for finite-difference checks of the losses.
//!
//! Per feature cell: `f = tanh(W1 x + b1)` with `x ∈ R^8`, `f ∈ R^4`.
//! Features are upsampled ×2 (nearest) and a 4→3 linear head gives logits.

use incseg::losses::{
    disca_loss, festa_loss, podnet_loss, sdr_loss, sparse_ce, LossGrad, Prototypes, SdrWeights,
};
use incseg::IGNORE;
use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const IN: usize = 8;
pub const FEAT: usize = 4;
pub const CLASSES: usize = 3;
pub const STRIDE: usize = 2;

#[derive(Clone, Debug)]
pub struct Toy {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Toy {
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut u = |s: f64| rng.gen_range(-s..s);
        Self {
            w1: Array2::from_shape_fn((FEAT, IN), |_| u(0.8)),
            b1: Array1::from_shape_fn(FEAT, |_| u(0.3)),
            w2: Array2::from_shape_fn((CLASSES, FEAT), |_| u(1.0)),
            b2: Array1::from_shape_fn(CLASSES, |_| u(0.3)),
        }
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .copied()
            .collect()
    }

    pub fn with_flat(&self, v: &[f64]) -> Self {
        let mut t = self.clone();
        let mut it = v.iter().copied();
        for p in
            t.w1.iter_mut()
                .chain(t.b1.iter_mut())
                .chain(t.w2.iter_mut())
                .chain(t.b2.iter_mut())
        {
            *p = it.next().expect("length matches");
        }
        t
    }

    /// Features `(B, FEAT, h, w)` and logits `(B, CLASSES, 2h, 2w)`.
    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, Array4<f64>) {
        let (b, _, h, w) = x.dim();
        let features = Array4::from_shape_fn((b, FEAT, h, w), |(n, f, y, xx)| {
            let z: f64 = (0..IN)
                .map(|i| self.w1[[f, i]] * x[[n, i, y, xx]])
                .sum::<f64>()
                + self.b1[f];
            z.tanh()
        });
        let logits =
            Array4::from_shape_fn((b, CLASSES, h * STRIDE, w * STRIDE), |(n, k, y, xx)| {
                let (fy, fx) = (y / STRIDE, xx / STRIDE);
                (0..FEAT)
                    .map(|f| self.w2[[k, f]] * features[[n, f, fy, fx]])
                    .sum::<f64>()
                    + self.b2[k]
            });
        (features, logits)
    }

    /// Flat parameter gradient from upstream gradients on logits and features.
    pub fn backward(
        &self,
        x: &Array4<f64>,
        features: &Array4<f64>,
        dlogits: &Array4<f64>,
        dfeatures: Option<&Array4<f64>>,
    ) -> Vec<f64> {
        let (b, _, h, w) = x.dim();
        let mut gw2 = Array2::<f64>::zeros((CLASSES, FEAT));
        let mut gb2 = Array1::<f64>::zeros(CLASSES);
        let mut df = match dfeatures {
            Some(d) => d.clone(),
            None => Array4::zeros(features.raw_dim()),
        };
        for ((n, k, y, xx), &g) in dlogits.indexed_iter() {
            let (fy, fx) = (y / STRIDE, xx / STRIDE);
            gb2[k] += g;
            for f in 0..FEAT {
                gw2[[k, f]] += g * features[[n, f, fy, fx]];
                df[[n, f, fy, fx]] += g * self.w2[[k, f]];
            }
        }
        let mut gw1 = Array2::<f64>::zeros((FEAT, IN));
        let mut gb1 = Array1::<f64>::zeros(FEAT);
        for n in 0..b {
            for f in 0..FEAT {
                for y in 0..h {
                    for xx in 0..w {
                        let t = features[[n, f, y, xx]];
                        let dz = df[[n, f, y, xx]] * (1.0 - t * t);
                        gb1[f] += dz;
                        for i in 0..IN {
                            gw1[[f, i]] += dz * x[[n, i, y, xx]];
                        }
                    }
                }
            }
        }
        gw1.iter()
            .chain(&gb1)
            .chain(&gw2)
            .chain(&gb2)
            .copied()
            .collect()
    }
}

/// Which scalar objective of the toy outputs is checked.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    SparseCe,
    Disca,
    Podnet,
    SdrMatch,
    SdrRepulsive,
    SdrAttract,
    Festa,
}

impl Objective {
    pub const ALL: [Objective; 7] = [
        Objective::SparseCe,
        Objective::Disca,
        Objective::Podnet,
        Objective::SdrMatch,
        Objective::SdrRepulsive,
        Objective::SdrAttract,
        Objective::Festa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::SparseCe => "sparse_ce",
            Objective::Disca => "disca",
            Objective::Podnet => "podnet",
            Objective::SdrMatch => "sdr_match",
            Objective::SdrRepulsive => "sdr_rep",
            Objective::SdrAttract => "sdr_att",
            Objective::Festa => "festa",
        }
    }
}

/// Fixed inputs of one random instance.
pub struct Instance {
    pub x: Array4<f64>,
    /// Full-resolution sparse targets.
    pub targets: Array3<u8>,
    /// Feature-resolution labels (one per cell, some ignored).
    pub cell_labels: Array3<u8>,
    pub memory_logits: Array4<f64>,
    pub memory_features: Array4<f64>,
    pub previous: Prototypes,
    pub memory_prototypes: Prototypes,
}

impl Instance {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, h, w) = (2, 4, 4);
        let x = Array4::from_shape_fn((b, IN, h, w), |_| rng.gen_range(-1.0..1.0));
        let targets = Array3::from_shape_fn((b, h * STRIDE, w * STRIDE), |_| {
            if rng.gen_bool(0.3) {
                rng.gen_range(0..CLASSES as u8)
            } else {
                IGNORE
            }
        });
        // Guarantee at least one labeled pixel and two classes.
        let mut targets = targets;
        targets[[0, 0, 0]] = 0;
        targets[[1, 3, 5]] = 2;
        let mut cell_labels = Array3::from_shape_fn((b, h, w), |_| {
            if rng.gen_bool(0.6) {
                rng.gen_range(0..CLASSES as u8)
            } else {
                IGNORE
            }
        });
        cell_labels[[0, 1, 1]] = 0;
        cell_labels[[0, 2, 2]] = 1;
        cell_labels[[1, 0, 3]] = 2;
        let memory_logits =
            Array4::from_shape_fn((b, 2, h * STRIDE, w * STRIDE), |_| rng.gen_range(-2.0..2.0));
        let memory_features = Array4::from_shape_fn((b, FEAT, h, w), |_| rng.gen_range(-1.0..1.0));
        let mut previous = Prototypes::default();
        previous.insert(0, (0..FEAT).map(|_| rng.gen_range(-1.0..1.0)).collect());
        previous.insert(1, (0..FEAT).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut memory_prototypes = Prototypes::default();
        memory_prototypes.insert(0, (0..FEAT).map(|_| rng.gen_range(-1.0..1.0)).collect());
        memory_prototypes.insert(1, (0..FEAT).map(|_| rng.gen_range(-1.0..1.0)).collect());
        Self {
            x,
            targets,
            cell_labels,
            memory_logits,
            memory_features,
            previous,
            memory_prototypes,
        }
    }

    /// Loss value and upstream gradients `(dlogits, dfeatures)`.
    pub fn evaluate(
        &self,
        objective: Objective,
        logits: &Array4<f64>,
        features: &Array4<f64>,
    ) -> (f64, Array4<f64>, Option<Array4<f64>>) {
        let zeros = || Array4::zeros(logits.raw_dim());
        let sdr = |weights: SdrWeights| {
            let out = sdr_loss(
                features.view(),
                self.cell_labels.view(),
                IGNORE,
                &self.previous,
                &self.memory_prototypes,
                0.9,
                weights,
            )
            .expect("valid sdr inputs");
            (out.value, zeros(), Some(out.grad))
        };
        let only = |m: f64, r: f64, a: f64| SdrWeights {
            matching: m,
            repulsive: r,
            attracting: a,
        };
        match objective {
            Objective::SparseCe => {
                let LossGrad { value, grad } =
                    sparse_ce(logits.view(), self.targets.view(), IGNORE).expect("labeled");
                (value, grad, None)
            }
            Objective::Disca => {
                let LossGrad { value, grad } =
                    disca_loss(logits.view(), self.memory_logits.view(), &[1]).expect("shapes");
                (value, grad, None)
            }
            Objective::Podnet => {
                let LossGrad { value, grad } =
                    podnet_loss(features.view(), self.memory_features.view()).expect("shapes");
                (value, zeros(), Some(grad))
            }
            Objective::SdrMatch => sdr(only(1.0, 0.0, 0.0)),
            Objective::SdrRepulsive => sdr(only(0.0, 1.0, 0.0)),
            Objective::SdrAttract => sdr(only(0.0, 0.0, 1.0)),
            Objective::Festa => {
                let out =
                    festa_loss(features.view(), self.cell_labels.view(), IGNORE).expect("shapes");
                (out.value, zeros(), Some(out.grad))
            }
        }
    }

    pub fn objective(&self, objective: Objective, toy: &Toy) -> f64 {
        let (features, logits) = toy.forward(&self.x);
        self.evaluate(objective, &logits, &features).0
    }

    pub fn analytic_gradient(&self, objective: Objective, toy: &Toy) -> Vec<f64> {
        let (features, logits) = toy.forward(&self.x);
        let (_, dl, df) = self.evaluate(objective, &logits, &features);
        toy.backward(&self.x, &features, &dl, df.as_ref())
    }

    pub fn numeric_gradient(&self, objective: Objective, toy: &Toy, step: f64) -> Vec<f64> {
        let base = toy.flat();
        (0..base.len())
            .map(|i| {
                let mut plus = base.clone();
                plus[i] += step;
                let mut minus = base.clone();
                minus[i] -= step;
                (self.objective(objective, &toy.with_flat(&plus))
                    - self.objective(objective, &toy.with_flat(&minus)))
                    / (2.0 * step)
            })
            .collect()
    }
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
