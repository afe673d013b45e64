//! Central finite-difference verification of tape gradients (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Conv2dParams, Tape, Var};
use crate::backbone::{BottleneckBlock, SqueezeExcite};
use crate::error::Result;
use crate::metrics::AuLabelFrame;
use crate::model::{AuModel, ModelConfig};
use crate::nn::{normal, Bound, ParamStore, NORM_EPS};
use crate::tensor::Tensor;
use crate::training::{focal_loss, FocalLossConfig};
use crate::vivit::{EncoderConfig, Msa, TransformerLayer, TubeletConfig, NUM_AUS};

/// Max over coordinates of `|analytic − central difference| / max(1, |analytic|)`.
///
/// `f` must map its input to a scalar. Any NaN (in `f` or in the gradient)
/// yields NaN, which fails every tolerance comparison.
pub fn finite_diff_check<G>(f: G, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    G: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), eps, None)
}

/// Which coordinates of each input get perturbed.
#[derive(Debug, Clone, Copy)]
pub struct Sampling {
    /// Upper bound on checked coordinates per input tensor.
    pub per_input: usize,
    pub seed: u64,
}

/// Multi-input variant; with `sampling`, only a seeded subset of coordinates is perturbed.
pub fn finite_diff_check_many<G>(
    f: G,
    points: &[Tensor<f64>],
    eps: f64,
    sampling: Option<Sampling>,
) -> Result<f64>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.leaf(p)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    };

    let mut tape = Tape::new();
    let leaves: Vec<Tensor<f64>> = points.iter().map(|p| p.clone().with_requires_grad(true)).collect();
    let vars: Vec<Var> = leaves.iter().map(|p| tape.leaf(p)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = sampling.map(|s| ChaCha8Rng::seed_from_u64(s.seed));
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let n = points[idx].numel();
        let analytic: Vec<f64> = match grads.get(*var) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; n],
        };
        let coords: Vec<usize> = match (&mut rng, sampling) {
            (Some(r), Some(s)) if s.per_input < n => (0..s.per_input).map(|_| r.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = points[idx].data()[c];
            work[idx].data_mut()[c] = orig + eps;
            let up = eval(&work)?;
            work[idx].data_mut()[c] = orig - eps;
            let down = eval(&work)?;
            work[idx].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic[c] - numeric).abs() / analytic[c].abs().max(1.0);
            if err.is_nan() {
                return Ok(f64::NAN);
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}


/// Elementwise ops are held to a tighter bound than everything else.
pub const ELEMENTWISE_TOLERANCE: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Outcome of one finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

impl std::fmt::Display for OpCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed() { "ok" } else { "FAIL" };
        write!(f, "{:<18} max error {:.3e} (tolerance {:.0e}) {verdict}", self.name, self.max_error, self.tolerance)
    }
}

const EPS: f64 = 1e-6;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    normal(shape, 1.0, rng)
}

/// Values kept at least 0.1 away from zero, so kinks (relu) and poles (ln of |x|) are not crossed.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.1..2.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Contracts `out` against fixed random weights so every output coordinate matters.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(randn(tape.shape(out), &mut rng));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum_all(prod))
}

type Check = (&'static str, f64, Box<dyn Fn() -> Result<f64>>);

fn unary(name: &'static str, op: fn(&mut Tape<f64>, Var) -> Var, positive: bool) -> Check {
    (
        name,
        ELEMENTWISE_TOLERANCE,
        Box::new(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut x = away_from_zero(&[3, 5], &mut rng);
            if positive {
                x.data_mut().iter_mut().for_each(|v| *v = v.abs());
            }
            finite_diff_check(|t, v| { let y = op(t, v); project(t, y, 2) }, &x, EPS)
        }),
    )
}

fn binary(name: &'static str, op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>, b_shape: &'static [usize]) -> Check {
    (
        name,
        ELEMENTWISE_TOLERANCE,
        Box::new(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let pts = [randn(&[2, 3, 4], &mut rng), randn(b_shape, &mut rng)];
            finite_diff_check_many(|t, v| { let y = op(t, v[0], v[1])?; project(t, y, 4) }, &pts, EPS, None)
        }),
    )
}

fn general(name: &'static str, shapes: &'static [&'static [usize]], f: fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Check {
    (
        name,
        TOLERANCE,
        Box::new(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let pts: Vec<Tensor<f64>> = shapes.iter().map(|s| randn(s, &mut rng)).collect();
            finite_diff_check_many(|t, v| { let y = f(t, v)?; project(t, y, 6) }, &pts, EPS, None)
        }),
    )
}

/// Checks a parameterized module: gradients flow to its input and to every parameter.
fn module<B, M>(name: &'static str, input: &'static [usize], build: B, forward: M, sampling: Option<Sampling>) -> Check
where
    B: Fn(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Result<M::Module> + 'static,
    M: ModuleForward + 'static,
{
    (
        name,
        TOLERANCE,
        Box::new(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut store = ParamStore::new();
            let m = build(&mut store, &mut rng)?;
            let mut pts = vec![randn(input, &mut rng)];
            pts.extend(store.iter().map(|p| p.tensor.clone()));
            finite_diff_check_many(
                |t, v| {
                    let p = Bound::from_vars(v[1..].to_vec());
                    let y = forward.run(&m, t, &p, v[0])?;
                    project(t, y, 8)
                },
                &pts,
                EPS,
                sampling,
            )
        }),
    )
}

trait ModuleForward {
    type Module;
    fn run(&self, m: &Self::Module, tape: &mut Tape<f64>, p: &Bound, x: Var) -> Result<Var>;
}

struct Fwd<M>(fn(&M, &mut Tape<f64>, &Bound, Var) -> Result<Var>);

impl<M> ModuleForward for Fwd<M> {
    type Module = M;
    fn run(&self, m: &M, tape: &mut Tape<f64>, p: &Bound, x: Var) -> Result<Var> {
        (self.0)(m, tape, p, x)
    }
}

/// The micro end-to-end model: micro backbone, (2,2,2) tubelets, 1+1 layers at D=8, focal loss.
pub fn micro_model_config() -> ModelConfig {
    ModelConfig {
        tubelet: TubeletConfig { t: 2, h: 2, w: 2, embed_dim: 8 },
        encoder: EncoderConfig { n_spatial_layers: 1, n_temporal_layers: 1, n_heads: 2, model_dim: 8, layer_budget: 2, ..Default::default() },
        seq_len: 4,
        ..Default::default()
    }
}

fn micro_model_check() -> Result<f64> {
    let model = AuModel::<f64>::new(micro_model_config(), 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let frames = normal(&[1, 4, 3, 32, 32], 0.5, &mut rng);
    let labels: Vec<AuLabelFrame> = (0..4)
        .map(|_| AuLabelFrame(std::array::from_fn(|_| [0, 1, 1, -1][rng.random_range(0..4)])))
        .collect();
    let focal = FocalLossConfig::default();
    let pts: Vec<Tensor<f64>> = model.params.iter().map(|p| p.tensor.clone()).collect();
    finite_diff_check_many(
        |t, v| {
            let p = Bound::from_vars(v.to_vec());
            let x = t.constant(frames.clone());
            let logits = model.forward(t, &p, x)?;
            focal_loss(t, logits, &labels, &focal)
        },
        &pts,
        EPS,
        Some(Sampling { per_input: 6, seed: 13 }),
    )
}

fn checks() -> Vec<Check> {
    let enc = EncoderConfig { n_spatial_layers: 1, n_temporal_layers: 1, n_heads: 2, model_dim: 8, layer_budget: 2, ..Default::default() };
    vec![
        binary("add", |t, a, b| t.add(a, b), &[3, 4]),
        binary("sub", |t, a, b| t.sub(a, b), &[2, 1, 4]),
        binary("mul", |t, a, b| t.mul(a, b), &[2, 3, 4]),
        unary("scale", |t, x| t.scale(x, -1.7), false),
        unary("add_scalar", |t, x| t.add_scalar(x, 0.3), false),
        unary("sigmoid", |t, x| t.sigmoid(x), false),
        unary("relu", |t, x| t.relu(x), false),
        unary("gelu", |t, x| t.gelu(x), false),
        unary("tanh", |t, x| t.tanh(x), false),
        unary("exp", |t, x| t.exp(x), false),
        unary("ln", |t, x| t.ln(x), true),
        general("matmul", &[&[2, 3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1])),
        general("linear", &[&[2, 3, 4], &[4, 5], &[5]], |t, v| t.linear(v[0], v[1], Some(v[2]))),
        general("conv2d", &[&[2, 4, 5, 5], &[6, 2, 3, 3]], |t, v| t.conv2d(v[0], v[1], Conv2dParams::new(2, 1, 2))),
        general("layer_norm", &[&[3, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], v[1], v[2], NORM_EPS)),
        general("group_norm", &[&[2, 4, 3, 3], &[4], &[4]], |t, v| t.group_norm(v[0], v[1], v[2], 2, NORM_EPS)),
        general("softmax", &[&[3, 5]], |t, v| t.softmax(v[0], 1)),
        general("sum", &[&[2, 3, 4]], |t, v| t.sum(v[0], &[0, 2], true)),
        general("mean", &[&[2, 3, 4]], |t, v| t.mean(v[0], &[1], false)),
        general("reshape", &[&[2, 3, 4]], |t, v| t.reshape(v[0], &[6, 4])),
        general("permute", &[&[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1])),
        general("concat", &[&[2, 3], &[2, 2]], |t, v| t.concat(&[v[0], v[1]], 1)),
        general("slice", &[&[4, 3]], |t, v| t.slice(v[0], 0, 1, 2)),
        general("expand", &[&[1, 3]], |t, v| t.expand(v[0], &[4, 3])),
        (
            "focal_loss",
            TOLERANCE,
            Box::new(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                let labels: Vec<AuLabelFrame> =
                    (0..6).map(|_| AuLabelFrame(std::array::from_fn(|_| [0, 1, -1][rng.random_range(0..3)]))).collect();
                let z = normal(&[2, 3, NUM_AUS], 2.0, &mut rng);
                let cfg = FocalLossConfig::default();
                finite_diff_check(|t, x| focal_loss(t, x, &labels, &cfg), &z, EPS)
            }),
        ),
        module(
            "msa",
            &[2, 5, 8],
            |s, r| Msa::new(s, "msa", 8, 2, r),
            Fwd(|m: &Msa, t, p, x| m.forward(t, p, x)),
            None,
        ),
        module(
            "transformer_layer",
            &[2, 5, 8],
            move |s, r| TransformerLayer::new(s, "layer", &enc, r),
            Fwd(|m: &TransformerLayer, t, p, x| m.forward(t, p, x)),
            None,
        ),
        module(
            "squeeze_excite",
            &[2, 8, 3, 3],
            |s, r| SqueezeExcite::new(s, "se", 8, 0.25, r),
            Fwd(|m: &SqueezeExcite, t, p, x| m.forward(t, p, x)),
            None,
        ),
        module(
            "bottleneck_block",
            &[2, 4, 6, 6],
            |s, r| BottleneckBlock::new(s, "block", 4, 8, 2, 4, 0.25, r),
            Fwd(|m: &BottleneckBlock, t, p, x| m.forward(t, p, x)),
            Some(Sampling { per_input: 24, seed: 10 }),
        ),
        ("micro_model", TOLERANCE, Box::new(micro_model_check)),
    ]
}

/// Runs every check; `on_result` sees each outcome as it completes.
pub fn run_suite(mut on_result: impl FnMut(&OpCheck)) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for (name, tolerance, run) in checks() {
        let check = OpCheck { name, max_error: run()?, tolerance };
        on_result(&check);
        out.push(check);
    }
    Ok(out)
}
