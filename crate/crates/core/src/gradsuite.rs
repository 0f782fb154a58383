//! Named finite-difference checks covering every differentiable op, block
//! and loss, plus the full model. Each check binds its inputs as parameters
//! of a 64-bit store, reduces the output to a scalar through a fixed random
//! projection (so that flat directions such as softmax sums still carry
//! signal) and perturbs a deterministic sample of coordinates.

use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{ChannelAttention, ResidualConvBlock, S2dtBlock, SpatialDiffAttention};
use crate::encoder::{Cbam, Dffm, FoundationProvider, Lam, StandIn};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_params_step, GradCheckReport, FD_STEP};
use crate::graph::{Graph, Var};
use crate::model::{ChangeModel, ModelConfig};
use crate::morphology::{Lmm, MorphOp};
use crate::nn::{init_rng, Builder};
use crate::objectives::{total_loss, LossConfig};
use crate::ops::Reduce;
use crate::param::{normal, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_TOL: f64 = 1e-4;
/// Coordinates perturbed per tensor in the small checks.
const SMALL_SAMPLE: usize = 24;
/// Millions of ReLU and abs inputs make kink crossings likely at the default
/// step; this one keeps the truncation error negligible in 64-bit.
const FULL_MODEL_STEP: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub elapsed: Duration,
}

type Build = fn(&mut Case) -> Result<()>;
type Forward = Box<dyn Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var>>;

/// A store of 64-bit inputs and the function under test.
struct Case {
    store: ParamStore<f64>,
    rng: ChaCha8Rng,
    forward: Option<Forward>,
    per_tensor: usize,
    step: f64,
}

impl Case {
    fn new(seed: u64) -> Self {
        Self { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed), forward: None, per_tensor: SMALL_SAMPLE, step: FD_STEP }
    }

    fn input(&mut self, name: &str, dims: &[usize], std: f64) -> Result<ParamId> {
        let t = normal(&mut self.rng, dims, std)?;
        self.store.add(name, t, true)
    }

    fn uniform(&mut self, name: &str, dims: &[usize], lo: f64, hi: f64) -> Result<ParamId> {
        let n = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(lo..hi)).collect();
        self.store.add(name, Tensor::from_vec(dims, data)?, true)
    }

    fn projection(&mut self, dims: &[usize]) -> Result<Tensor<f64>> {
        normal(&mut self.rng, dims, 1.0)
    }

    /// Adopts layer parameters, jittered so no zero-initialized weight hides
    /// a path from the check.
    fn adopt(&mut self, layers: &ParamStore<f32>, jitter: f64) -> Result<()> {
        let cast: ParamStore<f64> = layers.cast();
        for (_, p) in cast.iter() {
            let noise = normal::<f64, _>(&mut self.rng, p.value.dims(), jitter)?;
            let v: Vec<f64> = p.value.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            self.store.add(p.name.clone(), Tensor::from_vec(p.value.dims(), v)?, p.trainable)?;
        }
        Ok(())
    }

    /// Sets the function; its output is reduced by a projection drawn now.
    fn set(&mut self, out_dims: &[usize], f: impl Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var> + 'static) -> Result<()> {
        let r = self.projection(out_dims)?;
        self.forward = Some(Box::new(move |g, s| {
            let y = f(g, s)?;
            let p = g.constant(r.clone());
            g.sum_all(g.mul(y, p)?)
        }));
        Ok(())
    }

    /// Sets a function that already returns a scalar.
    fn set_scalar(&mut self, f: impl Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var> + 'static) {
        self.forward = Some(Box::new(f));
    }

    fn run(mut self, tol: f64) -> Result<GradCheckReport> {
        let forward = self.forward.take().ok_or_else(|| Error::invalid("gradient check without a function"))?;
        let mut targets = Vec::new();
        for (id, p) in self.store.iter() {
            if !p.trainable {
                continue;
            }
            let n = p.value.numel();
            let k = n.min(self.per_tensor);
            let mut idx = sample(&mut self.rng, n, k).into_vec();
            idx.sort_unstable();
            targets.push((id, idx));
        }
        grad_check_params_step(&self.store, &targets, |g, s| forward(g, s), tol, self.step)
    }
}

fn layers(seed: u64, f: impl FnOnce(&mut Builder) -> Result<()>) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    let mut rng = init_rng(seed);
    let mut b = Builder::new(&mut store, &mut rng);
    f(&mut b)?;
    Ok(store)
}

fn p(g: &Graph<f64>, s: &ParamStore<f64>, name: &str) -> Var {
    g.param(s, s.id(name).expect("input registered"))
}

fn conv2d(c: &mut Case) -> Result<()> {
    c.input("x", &[2, 4, 7, 6], 1.0)?;
    c.input("w", &[6, 2, 3, 3], 0.5)?;
    c.input("b", &[6], 0.5)?;
    c.input("dw", &[4, 1, 5, 5], 0.5)?;
    c.set(&[2, 6, 4, 3], |g, s| {
        let y = g.conv2d(p(g, s, "x"), p(g, s, "w"), Some(p(g, s, "b")), 2, 1, 2)?;
        let d = g.conv2d(p(g, s, "x"), p(g, s, "dw"), None, 2, 2, 4)?;
        let d = g.conv2d(d, g.constant(Tensor::full(&[6, 4, 1, 1], 0.3)?), None, 1, 0, 1)?;
        g.add(y, d)
    })
}

fn matmul(c: &mut Case) -> Result<()> {
    c.input("a", &[2, 3, 4], 1.0)?;
    c.input("b", &[2, 4, 5], 1.0)?;
    c.input("c", &[2, 6, 4], 1.0)?;
    c.set(&[2, 3, 5], |g, s| {
        let ab = g.matmul_batched(p(g, s, "a"), p(g, s, "b"))?;
        let ac = g.matmul_batched_nt(p(g, s, "a"), p(g, s, "c"))?;
        let ac = g.slice(ac, 2, 1, 5)?;
        let t = g.matmul_ex(p(g, s, "b"), p(g, s, "c"), true, true)?;
        let t = g.slice(g.slice(t, 1, 0, 3)?, 2, 0, 5)?;
        g.add(g.add(ab, ac)?, t)
    })
}

fn softmax(c: &mut Case) -> Result<()> {
    c.input("x", &[3, 5, 4], 2.0)?;
    c.set(&[3, 5, 4], |g, s| {
        let x = p(g, s, "x");
        g.add(g.softmax(x, 1)?, g.softmax(x, 2)?)
    })
}

fn resize(c: &mut Case) -> Result<()> {
    c.input("x", &[2, 3, 5, 6], 1.0)?;
    c.set(&[2, 3, 11, 3], |g, s| {
        let x = p(g, s, "x");
        let up = g.bilinear_resize(x, 11, 13)?;
        g.bilinear_resize(up, 11, 3)
    })
}

fn rmsnorm(c: &mut Case) -> Result<()> {
    c.input("x", &[2, 6, 5], 1.0)?;
    c.uniform("gain", &[6], 0.5, 1.5)?;
    c.uniform("gain2", &[5], 0.5, 1.5)?;
    c.set(&[2, 6, 5], |g, s| {
        let x = p(g, s, "x");
        let a = g.rmsnorm(x, p(g, s, "gain"), 1, 1e-6)?;
        let b = g.rmsnorm(x, p(g, s, "gain2"), 2, 1e-6)?;
        g.add(a, b)
    })
}

fn groupnorm(c: &mut Case) -> Result<()> {
    c.input("x", &[2, 6, 3, 4], 1.0)?;
    c.uniform("gamma", &[6], 0.5, 1.5)?;
    c.input("beta", &[6], 0.5)?;
    c.set(&[2, 6, 3, 4], |g, s| g.group_norm(p(g, s, "x"), p(g, s, "gamma"), p(g, s, "beta"), 3, 1e-5))
}

fn elementwise(c: &mut Case) -> Result<()> {
    c.input("x", &[4, 5], 1.0)?;
    c.uniform("pos", &[4, 5], 0.2, 2.0)?;
    c.uniform("prob", &[4, 5], 0.05, 0.95)?;
    c.set(&[4, 5], |g, s| {
        let (x, q, pr) = (p(g, s, "x"), p(g, s, "pos"), p(g, s, "prob"));
        let mut acc = g.mul(g.sigmoid(x)?, g.exp(g.scale(x, 0.5)?)?)?;
        acc = g.add(acc, g.div(g.log(q)?, g.sqrt(q)?)?)?;
        acc = g.add(acc, g.logit(pr, 1e-6)?)?;
        acc = g.add(acc, g.abs(g.shift(q, 0.1)?)?)?;
        acc = g.add(acc, g.relu(x)?)?;
        acc = g.add(acc, g.square(g.sub(x, q)?)?)?;
        acc = g.add(acc, g.clamp(x, -0.7, 0.7)?)?;
        g.add(acc, g.neg(pr)?)
    })
}

fn layout(c: &mut Case) -> Result<()> {
    c.input("x", &[2, 4, 10, 11], 1.0)?;
    c.set(&[2, 4, 10, 11], |g, s| {
        let x = p(g, s, "x");
        let wins = g.extract_windows(x, 4, 1)?;
        let inner = g.slice(g.slice(wins, 2, 1, 4)?, 3, 1, 4)?;
        let merged = g.merge_windows(inner, 2, 10, 11)?;
        let halves = g.split(x, 1, &[1, 3])?;
        let swapped = g.concat(&[halves[1], halves[0]], 1)?;
        let t = g.permute(swapped, &[0, 1, 3, 2])?;
        let t = g.reshape(t, &[2, 4, 10 * 11])?;
        let t = g.permute(g.reshape(t, &[2, 4, 11, 10])?, &[0, 1, 3, 2])?;
        let max = g.reduce(x, &[1], Reduce::Max, true)?;
        let mean = g.reduce(x, &[2, 3], Reduce::Mean, true)?;
        let stats = g.add(max, mean)?;
        g.add(g.add(merged, t)?, g.mul(x, stats)?)
    })
}

fn diff_attention(c: &mut Case) -> Result<()> {
    c.input("q", &[3, 8, 5], 1.0)?;
    c.input("k", &[3, 8, 7], 1.0)?;
    c.input("v", &[3, 8, 7], 1.0)?;
    c.uniform("lambda", &[2], 0.2, 0.9)?;
    c.set(&[6, 5, 4], |g, s| differential_attention_of(g, s))
}

fn differential_attention_of(g: &Graph<f64>, s: &ParamStore<f64>) -> Result<Var> {
    crate::decoder::differential_attention(g, p(g, s, "q"), p(g, s, "k"), p(g, s, "v"), p(g, s, "lambda"), 2)
}

fn channel_attention_core(c: &mut Case) -> Result<()> {
    c.input("q", &[2, 8, 6], 1.0)?;
    c.input("k", &[2, 8, 6], 1.0)?;
    c.input("v", &[2, 8, 6], 1.0)?;
    c.uniform("tau", &[2], 0.5, 2.0)?;
    c.set(&[2, 8, 6], |g, s| crate::decoder::channel_attention_core(g, p(g, s, "q"), p(g, s, "k"), p(g, s, "v"), p(g, s, "tau"), 2))
}

/// Builds a block, jitters its weights and checks input and weights. Layer
/// ids index the store directly, so the layer parameters must come first.
fn block_case<L: 'static>(
    c: &mut Case,
    input: &[usize],
    extra: &[(&str, &[usize])],
    build: impl FnOnce(&mut Builder) -> Result<L>,
    forward: impl Fn(&L, &Graph<f64>, &ParamStore<f64>, Var) -> Result<Var> + 'static,
) -> Result<()> {
    let mut layer = None;
    let store = layers(5, |b| {
        layer = Some(build(b)?);
        Ok(())
    })?;
    c.adopt(&store, 0.05)?;
    c.input("x", input, 1.0)?;
    for (name, dims) in extra {
        c.input(name, dims, 1.0)?;
    }
    let layer = layer.expect("built");
    let probe = {
        let g = Graph::new();
        let x = p(&g, &c.store, "x");
        g.dims(forward(&layer, &g, &c.store, x)?)
    };
    c.set(&probe, move |g, s| forward(&layer, g, s, p(g, s, "x")))
}

fn spatial_attention(c: &mut Case) -> Result<()> {
    c.per_tensor = 12;
    block_case(c, &[1, 8, 6, 6], &[], |b| SpatialDiffAttention::new(b, "sda", 8, 2), |l, g, s, x| l.forward(g, s, x))
}

fn windowed_attention(c: &mut Case) -> Result<()> {
    c.per_tensor = 12;
    block_case(c, &[1, 8, 12, 10], &[], |b| SpatialDiffAttention::new(b, "sda", 8, 2), |l, g, s, x| l.forward(g, s, x))
}

fn channel_attention(c: &mut Case) -> Result<()> {
    c.per_tensor = 12;
    block_case(c, &[2, 8, 5, 4], &[], |b| ChannelAttention::new(b, "ca", 8, 2), |l, g, s, x| l.forward(g, s, x))
}

fn s2dt_block(c: &mut Case) -> Result<()> {
    c.per_tensor = 8;
    block_case(c, &[1, 8, 10, 9], &[], |b| S2dtBlock::new(b, "blk", 8, 2), |l, g, s, x| l.forward(g, s, x))
}

fn residual_block(c: &mut Case) -> Result<()> {
    c.per_tensor = 8;
    block_case(c, &[2, 8, 5, 6], &[], |b| ResidualConvBlock::new(b, "res", 8), |l, g, s, x| l.forward(g, s, x))
}

fn cbam(c: &mut Case) -> Result<()> {
    c.per_tensor = 12;
    block_case(c, &[2, 16, 6, 5], &[], |b| Cbam::new(b, "cbam", 16), |l, g, s, x| l.forward(g, s, x))
}

fn fusion(c: &mut Case) -> Result<()> {
    c.per_tensor = 8;
    block_case(
        c,
        &[2, 16, 6, 6],
        &[("feat", &[2, 6, 3, 3])],
        |b| Ok((Lam::new(b, "lam", 6, 16)?, Dffm::new(b, "dffm", 16)?)),
        |(lam, dffm), g, s, x| {
            let adapted = lam.forward(g, s, p(g, s, "feat"), 6, 6)?;
            dffm.forward(g, s, x, adapted)
        },
    )
}

fn morphology(c: &mut Case) -> Result<()> {
    c.uniform("m", &[2, 1, 7, 6], 0.05, 0.95)?;
    c.input("omega3", &[3, 3], 0.3)?;
    c.input("omega5", &[5, 5], 0.3)?;
    c.set(&[2, 1, 7, 6], |g, s| {
        let (m, o3, o5) = (p(g, s, "m"), p(g, s, "omega3"), p(g, s, "omega5"));
        let e = g.soft_morph(m, o3, 10.0, MorphOp::Erode)?;
        let d = g.soft_morph(m, o5, 4.0, MorphOp::Dilate)?;
        let oc = g.closing(g.opening(m, o3, 10.0)?, o5, 10.0)?;
        g.add(g.add(e, d)?, oc)
    })
}

fn lmm(c: &mut Case) -> Result<()> {
    c.per_tensor = 12;
    block_case(c, &[2, 1, 9, 8], &[], |b| Lmm::new(b, 10.0), |l, g, s, x| l.forward(g, s, g.scale(x, 3.0)?))
}

fn losses(c: &mut Case) -> Result<()> {
    c.input("main", &[2, 1, 6, 5], 2.0)?;
    for i in 0..4 {
        c.input(&format!("aux{i}"), &[2, 1, 6, 5], 2.0)?;
    }
    let y: Vec<f64> = (0..60).map(|_| f64::from(u8::from(c.rng.random_bool(0.4)))).collect();
    let y = Tensor::from_vec(&[2, 1, 6, 5], y)?;
    c.set_scalar(move |g, s| {
        let aux = [p(g, s, "aux0"), p(g, s, "aux1"), p(g, s, "aux2"), p(g, s, "aux3")];
        let main = p(g, s, "main");
        let terms = total_loss(g, main, &aux, &y, &LossConfig::default())?;
        let plain = g.focal_loss(main, &y, 0.0, 0.5)?;
        g.add(terms.total, g.add(plain, g.dice_loss(aux[2], &y, 1.0)?)?)
    });
    Ok(())
}

/// Full network on `[2,3,64,64]` pairs with the stand-in provider, through
/// the complete training loss.
fn full_model(c: &mut Case) -> Result<()> {
    c.per_tensor = 1;
    c.step = FULL_MODEL_STEP;
    let cfg = ModelConfig::default();
    let (model, store) = ChangeModel::build(&cfg, 3)?;
    let (standin, provider_store) = StandIn::build(11, cfg.provider_channels)?;
    c.adopt(&store, 0.01)?;
    c.uniform("img1", &[2, 3, 64, 64], 0.0, 1.0)?;
    c.uniform("img2", &[2, 3, 64, 64], 0.0, 1.0)?;
    let y: Vec<f64> = (0..2 * 64 * 64).map(|_| f64::from(u8::from(c.rng.random_bool(0.3)))).collect();
    let y = Tensor::from_vec(&[2, 1, 64, 64], y)?;
    let provider = FoundationProvider::StandIn(standin);
    let provider_store: ParamStore<f64> = provider_store.cast();
    c.set_scalar(move |g, s| {
        let out = model.forward(g, s, &provider, &provider_store, p(g, s, "img1"), p(g, s, "img2"), None)?;
        Ok(total_loss(g, out.logits, &out.aux, &y, &LossConfig::default())?.total)
    });
    Ok(())
}

const CHECKS: &[(&str, Build)] = &[
    ("conv2d", conv2d),
    ("matmul", matmul),
    ("softmax", softmax),
    ("resize", resize),
    ("rmsnorm", rmsnorm),
    ("groupnorm", groupnorm),
    ("elementwise", elementwise),
    ("layout", layout),
    ("differential_attention", diff_attention),
    ("channel_attention_core", channel_attention_core),
    ("spatial_attention", spatial_attention),
    ("windowed_attention", windowed_attention),
    ("channel_attention", channel_attention),
    ("s2dt_block", s2dt_block),
    ("residual_block", residual_block),
    ("cbam", cbam),
    ("fusion", fusion),
    ("morphology", morphology),
    ("lmm", lmm),
    ("losses", losses),
    ("full_model", full_model),
];

pub fn names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs the checks whose name contains `filter` (all when `None`).
pub fn run(filter: Option<&str>, tol: f64) -> Result<Vec<CheckOutcome>> {
    let selected: Vec<_> = CHECKS.iter().enumerate().filter(|(_, (n, _))| filter.is_none_or(|f| n.contains(f))).collect();
    if selected.is_empty() {
        return Err(Error::invalid(format!("no gradient check matches `{}`", filter.unwrap_or(""))));
    }
    selected
        .into_iter()
        .map(|(i, (name, build))| {
            let start = Instant::now();
            let mut case = Case::new(1000 + i as u64);
            build(&mut case)?;
            let report = case.run(tol)?;
            Ok(CheckOutcome { name, report, elapsed: start.elapsed() })
        })
        .collect()
}
