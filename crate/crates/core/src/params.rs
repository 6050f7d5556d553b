//! Trainable tensors of the anomaly expert.
//!
//! [`ExpertTensors`] is generic over its leaf so the same layout carries
//! tensors, tape handles, shapes and optimizer moments. Names and iteration
//! order are canonical and shared by initialization, binding, checkpoints
//! and the optimizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::Error;

/// Number of tapped encoder levels.
pub const LEVELS: usize = 4;

/// Dimensions and structural switches of the expert head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    /// Tokens per side of every crop grid.
    pub g: usize,
    /// Encoder feature width.
    pub d_enc: usize,
    /// Adapted (compressed) width.
    pub d: usize,
    pub n_heads: usize,
    pub pool_h: usize,
    pub pool_w: usize,
    /// Initial significance temperature.
    pub tau: f64,
    /// Whether the look-back token fusion carries a bias.
    pub lookback_bias: bool,
    /// Residual connection from the pooled queries around the cross-attention.
    pub qformer_residual: bool,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            g: 8,
            d_enc: 64,
            d: 32,
            n_heads: 4,
            pool_h: 2,
            pool_w: 2,
            tau: 0.07,
            lookback_bias: true,
            qformer_residual: true,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.g == 0 || self.d_enc == 0 || self.d == 0 || self.n_heads == 0 {
            return bad("dimensions must be positive".into());
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.d_enc % self.n_heads != 0 {
            return bad(format!("d_enc {} not divisible by n_heads {}", self.d_enc, self.n_heads));
        }
        if self.pool_h == 0 || self.pool_w == 0 || self.pool_h > self.g || self.pool_w > self.g {
            return bad(format!("pool {}x{} does not fit a {}x{} grid", self.pool_h, self.pool_w, self.g, self.g));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.g * self.g
    }

    pub fn cells(&self) -> usize {
        self.pool_h * self.pool_w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T> {
    pub weight: T,
    pub bias: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayer<T> {
    pub fc1: Affine<T>,
    pub fc2: Affine<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensors<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertTensors<T> {
    pub adapters: Vec<Affine<T>>,
    pub lookback: Vec<Affine<T>>,
    pub e_plus: T,
    pub e_minus: T,
    pub mlp_plus: Vec<TwoLayer<T>>,
    pub mlp_minus: Vec<TwoLayer<T>>,
    pub qformer: AttentionTensors<T>,
    pub score_mlp: TwoLayer<T>,
    pub tau: T,
}

fn map_affine<'a, T, U, E>(
    prefix: &str,
    a: &'a Affine<T>,
    f: &mut impl FnMut(&str, &'a T) -> Result<U, E>,
) -> Result<Affine<U>, E> {
    Ok(Affine {
        weight: f(&format!("{prefix}.weight"), &a.weight)?,
        bias: match &a.bias {
            Some(b) => Some(f(&format!("{prefix}.bias"), b)?),
            None => None,
        },
    })
}

fn map_two<'a, T, U, E>(
    prefix: &str,
    m: &'a TwoLayer<T>,
    f: &mut impl FnMut(&str, &'a T) -> Result<U, E>,
) -> Result<TwoLayer<U>, E> {
    Ok(TwoLayer { fc1: map_affine(&format!("{prefix}.fc1"), &m.fc1, f)?, fc2: map_affine(&format!("{prefix}.fc2"), &m.fc2, f)? })
}

fn visit_affine<T>(prefix: &str, a: &mut Affine<T>, f: &mut impl FnMut(&str, &mut T)) {
    f(&format!("{prefix}.weight"), &mut a.weight);
    if let Some(b) = &mut a.bias {
        f(&format!("{prefix}.bias"), b);
    }
}

fn visit_two<T>(prefix: &str, m: &mut TwoLayer<T>, f: &mut impl FnMut(&str, &mut T)) {
    visit_affine(&format!("{prefix}.fc1"), &mut m.fc1, f);
    visit_affine(&format!("{prefix}.fc2"), &mut m.fc2, f);
}

impl<T> ExpertTensors<T> {
    /// Maps every leaf in canonical order, passing its checkpoint name.
    pub fn try_map<'a, U, E>(&'a self, mut f: impl FnMut(&str, &'a T) -> Result<U, E>) -> Result<ExpertTensors<U>, E> {
        let mut adapters = Vec::with_capacity(LEVELS);
        for (i, a) in self.adapters.iter().enumerate() {
            adapters.push(map_affine(&format!("adapter.{}", i + 1), a, &mut f)?);
        }
        let mut lookback = Vec::with_capacity(LEVELS);
        for (i, a) in self.lookback.iter().enumerate() {
            lookback.push(map_affine(&format!("lookback.{}", i + 1), a, &mut f)?);
        }
        let e_plus = f("e_plus", &self.e_plus)?;
        let e_minus = f("e_minus", &self.e_minus)?;
        let mut mlp_plus = Vec::with_capacity(LEVELS);
        for (i, m) in self.mlp_plus.iter().enumerate() {
            mlp_plus.push(map_two(&format!("mlp_plus.{}", i + 1), m, &mut f)?);
        }
        let mut mlp_minus = Vec::with_capacity(LEVELS);
        for (i, m) in self.mlp_minus.iter().enumerate() {
            mlp_minus.push(map_two(&format!("mlp_minus.{}", i + 1), m, &mut f)?);
        }
        let qformer = AttentionTensors {
            wq: f("qformer.wq", &self.qformer.wq)?,
            wk: f("qformer.wk", &self.qformer.wk)?,
            wv: f("qformer.wv", &self.qformer.wv)?,
            wo: f("qformer.wo", &self.qformer.wo)?,
        };
        let score_mlp = map_two("score_mlp", &self.score_mlp, &mut f)?;
        let tau = f("tau", &self.tau)?;
        Ok(ExpertTensors { adapters, lookback, e_plus, e_minus, mlp_plus, mlp_minus, qformer, score_mlp, tau })
    }

    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> ExpertTensors<U> {
        self.try_map(|n, t| Ok::<U, std::convert::Infallible>(f(n, t))).unwrap_or_else(|e| match e {})
    }

    /// Visits every leaf mutably in canonical order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        for (i, a) in self.adapters.iter_mut().enumerate() {
            visit_affine(&format!("adapter.{}", i + 1), a, &mut f);
        }
        for (i, a) in self.lookback.iter_mut().enumerate() {
            visit_affine(&format!("lookback.{}", i + 1), a, &mut f);
        }
        f("e_plus", &mut self.e_plus);
        f("e_minus", &mut self.e_minus);
        for (i, m) in self.mlp_plus.iter_mut().enumerate() {
            visit_two(&format!("mlp_plus.{}", i + 1), m, &mut f);
        }
        for (i, m) in self.mlp_minus.iter_mut().enumerate() {
            visit_two(&format!("mlp_minus.{}", i + 1), m, &mut f);
        }
        f("qformer.wq", &mut self.qformer.wq);
        f("qformer.wk", &mut self.qformer.wk);
        f("qformer.wv", &mut self.qformer.wv);
        f("qformer.wo", &mut self.qformer.wo);
        visit_two("score_mlp", &mut self.score_mlp, &mut f);
        f("tau", &mut self.tau);
    }

    /// Mutable leaves in canonical order.
    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        fn affine<'a, T>(a: &'a mut Affine<T>, out: &mut Vec<&'a mut T>) {
            out.push(&mut a.weight);
            if let Some(b) = &mut a.bias {
                out.push(b);
            }
        }
        fn two<'a, T>(m: &'a mut TwoLayer<T>, out: &mut Vec<&'a mut T>) {
            affine(&mut m.fc1, out);
            affine(&mut m.fc2, out);
        }
        let mut out = Vec::new();
        self.adapters.iter_mut().for_each(|a| affine(a, &mut out));
        self.lookback.iter_mut().for_each(|a| affine(a, &mut out));
        out.push(&mut self.e_plus);
        out.push(&mut self.e_minus);
        self.mlp_plus.iter_mut().for_each(|m| two(m, &mut out));
        self.mlp_minus.iter_mut().for_each(|m| two(m, &mut out));
        let q = &mut self.qformer;
        out.extend([&mut q.wq, &mut q.wk, &mut q.wv, &mut q.wo]);
        two(&mut self.score_mlp, &mut out);
        out.push(&mut self.tau);
        out
    }

    /// Leaves paired with their names, in canonical order.
    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(|n, t| out.push((n.to_string(), t)));
        out
    }
}

impl ExpertTensors<Vec<usize>> {
    /// Shapes of every tensor for a given configuration.
    pub fn shapes(cfg: &ExpertConfig) -> Self {
        let (d, de, t) = (cfg.d, cfg.d_enc, cfg.tokens());
        let affine = |i: usize, o: usize, bias: bool| Affine { weight: vec![i, o], bias: bias.then(|| vec![o]) };
        let two = |i: usize, h: usize, o: usize| TwoLayer { fc1: affine(i, h, true), fc2: affine(h, o, true) };
        ExpertTensors {
            adapters: (0..LEVELS).map(|_| affine(de, d, true)).collect(),
            lookback: (0..LEVELS)
                .map(|_| Affine { weight: vec![1, t], bias: cfg.lookback_bias.then(|| vec![d]) })
                .collect(),
            e_plus: vec![d],
            e_minus: vec![d],
            mlp_plus: (0..LEVELS).map(|_| two(2 * d, d, d)).collect(),
            mlp_minus: (0..LEVELS).map(|_| two(2 * d, d, d)).collect(),
            qformer: AttentionTensors { wq: vec![de, de], wk: vec![de, de], wv: vec![de, de], wo: vec![de, de] },
            score_mlp: two(de, d, 1),
            tau: vec![],
        }
    }
}

/// All trainable tensors plus the configuration that fixes their shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams<F> {
    pub config: ExpertConfig,
    pub tensors: ExpertTensors<Tensor<F>>,
}

impl<F: Real> ExpertParams<F> {
    /// Seeded initialization: uniform weights in `±1/√fan_in`, zero biases,
    /// `e±` from `N(0, 1/√D)`. Every tensor draws from its own ChaCha stream,
    /// so `e⁺` and `e⁻` never coincide.
    pub fn init(config: &ExpertConfig, seed: u64) -> Result<Self, Error> {
        config.validate()?;
        let shapes = ExpertTensors::shapes(config);
        let mut stream = 0u64;
        let tensors = shapes.map(|name, shape| {
            stream += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name == "tau" {
                vec![config.tau]
            } else if name == "e_plus" || name == "e_minus" {
                let normal = Normal::new(0.0, 1.0 / (config.d as f64).sqrt()).expect("valid std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            } else if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                // Look-back weights are stored output-major `[1×g²]`.
                let fan_in = if name.starts_with("lookback.") { shape[1] } else { shape[0] };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let uni = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
                (0..n).map(|_| uni.sample(&mut rng)).collect()
            };
            Tensor::from_f64_slice(shape, &data).expect("shape matches data")
        });
        Ok(Self { config: config.clone(), tensors })
    }

    /// Registers every tensor on `tape`. `tau` only requires a gradient when
    /// `train_tau` is set.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool, train_tau: bool) -> ExpertTensors<Var> {
        self.tensors.map(|name, t| {
            let rg = trainable && (name != "tau" || train_tau);
            tape.leaf(t.clone(), rg)
        })
    }

    pub fn cast<G: Real>(&self) -> ExpertParams<G> {
        ExpertParams { config: self.config.clone(), tensors: self.tensors.map(|_, t| t.cast()) }
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.entries().into_iter().map(|(n, _)| n).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.entries().iter().all(|(_, t)| t.is_finite())
    }

    pub fn tau(&self) -> F {
        self.tensors.tau.item()
    }
}

impl Affine<Var> {
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var, crate::AutodiffError> {
        tape.linear(x, self.weight, self.bias)
    }
}

impl TwoLayer<Var> {
    /// `fc2(relu(fc1(x)))`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var, crate::AutodiffError> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.relu(h)?;
        self.fc2.forward(tape, h)
    }
}
