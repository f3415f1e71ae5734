//! Central-difference gradient checking for tape-recorded functions.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Mixing, ModelConfig, ModelParams};
use crate::moe_layer::{ExpertMode, LayerVars, MoeLayerParams};
use crate::router::MoeConfig;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Maximum over coordinates of `|g_tape − g_fd| / max(1, |g_fd|)`, where
/// `g_fd = (f(x+εe) − f(x−εe)) / 2ε`.
///
/// `f` must be pure and return a single-element tensor.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), core::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once; the error is the maximum over
/// every coordinate of every input.
pub fn grad_check_many<F>(f: F, xs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    // Written so that NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(eps > 0.0) {
        return Err(Error::Contract("grad_check step must be positive".into()));
    }
    let analytic: Vec<Tensor<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(xs)
            .map(|(&v, x)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect()
    };

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut inputs: Vec<Tensor<f64>> = xs.to_vec();
    let mut worst = 0.0f64;
    for k in 0..xs.len() {
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            let (up, down) = (orig + eps, orig - eps);
            inputs[k].data_mut()[i] = up;
            let plus = eval(&inputs)?;
            inputs[k].data_mut()[i] = down;
            let minus = eval(&inputs)?;
            inputs[k].data_mut()[i] = orig;
            // The realized step, not 2ε, so rounding of x±ε does not bias it.
            let fd = (plus - minus) / (up - down);
            let err = (analytic[k].data()[i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Outcome of one named check over several random instances.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

/// Finite-difference step used by the suite.
pub const SUITE_EPS: f64 = 1e-5;
/// Tolerance for single primitives.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Tolerance for whole-layer and whole-model checks.
pub const END_TO_END_TOL: f64 = 1e-5;

type Check = fn(&mut ChaCha8Rng) -> Result<f64>;

/// `Σ y ⊙ c` for a fixed random `c`, so every output coordinate matters.
fn scalarize(tape: &mut Tape<f64>, y: Var, c: &Tensor<f64>) -> Result<Var> {
    let cv = tape.constant(c.clone());
    let p = tape.mul(y, cv)?;
    Ok(tape.sum(p))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<f64> {
    Tensor::uniform(rng, shape, bound)
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(0.2..1.5))
}

/// Checks a unary tape op on an input of `shape`.
fn unary(
    rng: &mut ChaCha8Rng,
    x: Tensor<f64>,
    out_shape: &[usize],
    op: impl Fn(&mut Tape<f64>, Var) -> Result<Var>,
) -> Result<f64> {
    let c = uniform(rng, out_shape, 1.0);
    grad_check(|t, v| {
        let y = op(t, v)?;
        scalarize(t, y, &c)
    }, &x, SUITE_EPS)
}

fn binary(
    rng: &mut ChaCha8Rng,
    a: Tensor<f64>,
    b: Tensor<f64>,
    out_shape: &[usize],
    op: impl Fn(&mut Tape<f64>, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let c = uniform(rng, out_shape, 1.0);
    grad_check_many(|t, v| {
        let y = op(t, v[0], v[1])?;
        scalarize(t, y, &c)
    }, &[a, b], SUITE_EPS)
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..5))
}

const PRIMITIVES: &[(&str, Check)] = &[
    ("matmul", |r| {
        let (m, p, q) = dims(r);
        let (a, b) = (uniform(r, &[m, p], 1.0), uniform(r, &[p, q], 1.0));
        binary(r, a, b, &[m, q], |t, a, b| t.matmul(a, b))
    }),
    ("transpose", |r| {
        let (m, p, _) = dims(r);
        let x = uniform(r, &[m, p], 1.0);
        unary(r, x, &[p, m], |t, v| t.transpose(v))
    }),
    ("add", |r| {
        let (m, p, _) = dims(r);
        let (a, b) = (uniform(r, &[m, p], 1.0), uniform(r, &[m, p], 1.0));
        binary(r, a, b, &[m, p], |t, a, b| t.add(a, b))
    }),
    ("add_broadcast", |r| {
        let (m, p, _) = dims(r);
        let (a, b) = (uniform(r, &[m, p], 1.0), uniform(r, &[p], 1.0));
        binary(r, a, b, &[m, p], |t, a, b| t.add(a, b))
    }),
    ("mul", |r| {
        let (m, p, _) = dims(r);
        let (a, b) = (uniform(r, &[m, p], 1.0), uniform(r, &[m, p], 1.0));
        binary(r, a, b, &[m, p], |t, a, b| t.mul(a, b))
    }),
    ("mul_broadcast", |r| {
        let (m, p, _) = dims(r);
        let (a, b) = (uniform(r, &[m, p], 1.0), uniform(r, &[p], 1.0));
        binary(r, a, b, &[m, p], |t, a, b| t.mul(a, b))
    }),
    ("silu", |r| {
        let (m, p, _) = dims(r);
        let x = uniform(r, &[m, p], 3.0);
        unary(r, x, &[m, p], |t, v| Ok(t.silu(v)))
    }),
    ("scale", |r| {
        let (m, p, _) = dims(r);
        let (x, c) = (uniform(r, &[m, p], 1.0), r.gen_range(-2.0..2.0));
        unary(r, x, &[m, p], move |t, v| Ok(t.scale(v, c)))
    }),
    ("softmax", |r| {
        let (m, p, _) = dims(r);
        let x = uniform(r, &[m, p], 3.0);
        unary(r, x, &[m, p], |t, v| Ok(t.softmax(v)))
    }),
    ("causal_softmax", |r| {
        let n = r.gen_range(1..6);
        let x = uniform(r, &[n, n], 3.0);
        unary(r, x, &[n, n], |t, v| t.causal_softmax(v))
    }),
    ("rms_norm", |r| {
        let (m, p, _) = dims(r);
        // Near a zero row the map is close to a sign function and central
        // differences stop resolving it, so keep magnitudes away from zero.
        let x = Tensor::from_fn(&[m, p], |_| {
            let v = r.gen_range(0.2..2.0);
            if r.gen_bool(0.5) { v } else { -v }
        });
        unary(r, x, &[m, p], |t, v| Ok(t.rms_norm(v, 1e-6)))
    }),
    ("row_normalize", |r| {
        let (m, p, _) = dims(r);
        let x = positive(r, &[m, p]);
        unary(r, x, &[m, p], |t, v| Ok(t.row_normalize(v)))
    }),
    ("gather_rows", |r| {
        let (m, p, q) = dims(r);
        let idx: Vec<usize> = (0..q + 2).map(|_| r.gen_range(0..m)).collect();
        let x = uniform(r, &[m, p], 1.0);
        let n = idx.len();
        unary(r, x, &[n, p], move |t, v| t.gather_rows(v, idx.clone()))
    }),
    ("scatter_rows", |r| {
        let (m, p, q) = dims(r);
        let idx: Vec<usize> = (0..m).map(|_| r.gen_range(0..q)).collect();
        let x = uniform(r, &[m, p], 1.0);
        unary(r, x, &[q, p], move |t, v| t.scatter_rows(v, idx.clone(), q))
    }),
    ("gather_elems", |r| {
        let (m, p, q) = dims(r);
        let pos: Vec<usize> = (0..q + 2).map(|_| r.gen_range(0..m * p)).collect();
        let x = uniform(r, &[m, p], 1.0);
        let n = pos.len();
        unary(r, x, &[n], move |t, v| t.gather_elems(v, pos.clone()))
    }),
    ("scale_rows", |r| {
        let (m, p, _) = dims(r);
        let (a, b) = (uniform(r, &[m, p], 1.0), uniform(r, &[m], 1.0));
        binary(r, a, b, &[m, p], |t, a, b| t.scale_rows(a, b))
    }),
    ("mix_rows", |r| {
        let (m, p, g) = dims(r);
        let n = r.gen_range(1..6);
        let idx: Vec<usize> = (0..m * g).map(|_| r.gen_range(0..n)).collect();
        let (bank, w) = (uniform(r, &[n, p], 2.0), positive(r, &[m, g]));
        binary(r, bank, w, &[m, p], move |t, a, b| t.mix_rows(a, b, idx.clone()))
    }),
    ("causal_mean", |r| {
        let (seg, p, reps) = dims(r);
        let x = uniform(r, &[seg * reps, p], 1.0);
        unary(r, x, &[seg * reps, p], move |t, v| t.causal_mean(v, seg))
    }),
    ("slice_rows", |r| {
        let (m, p, _) = dims(r);
        let (lo, hi) = (r.gen_range(0..m), m);
        let x = uniform(r, &[m + 1, p], 1.0);
        unary(r, x, &[hi - lo + 1, p], move |t, v| t.slice_rows(v, lo, hi + 1))
    }),
    ("concat_rows", |r| {
        let (m, p, q) = dims(r);
        let (a, b) = (uniform(r, &[m, p], 1.0), uniform(r, &[q, p], 1.0));
        binary(r, a, b, &[m + q + m, p], |t, a, b| t.concat_rows(&[a, b, a]))
    }),
    ("reshape", |r| {
        let (m, p, _) = dims(r);
        let x = uniform(r, &[m, p], 1.0);
        unary(r, x, &[p * m], |t, v| t.reshape(v, &[t.value(v).len()]))
    }),
    ("sum", |r| {
        let (m, p, _) = dims(r);
        let x = uniform(r, &[m, p], 1.0);
        unary(r, x, &[1], |t, v| Ok(t.sum(v)))
    }),
    ("cross_entropy", |r| {
        let (m, v, _) = dims(r);
        let v = v + 1;
        let targets: Vec<usize> = (0..m).map(|_| r.gen_range(0..v)).collect();
        let x = uniform(r, &[m, v], 3.0);
        unary(r, x, &[1], move |t, x| t.cross_entropy(x, targets.clone()))
    }),
];

/// Scalarized layer forward, differentiated with respect to the router,
/// every expert matrix, the bank and the input at once.
fn layer_check(rng: &mut ChaCha8Rng, mode: ExpertMode) -> Result<f64> {
    let n = rng.gen_range(3..6);
    let k = rng.gen_range(2..=n);
    let km = rng.gen_range(1..k);
    let (d, f, tokens) = (rng.gen_range(2..6), rng.gen_range(2..7), rng.gen_range(1..5));
    let cfg = MoeConfig::new(n, k, km, d, f)?.with_renormalize_main(rng.gen_bool(0.5));
    let mut layer = MoeLayerParams::<f64>::init(cfg, rng)?;
    layer.router.weight = uniform(rng, &[d, n], 1.0);
    layer.bank.thetas = Tensor::from_fn(&[n, d], |_| rng.gen_range(0.5..1.5));
    let h = uniform(rng, &[tokens, d], 1.0);
    let c = uniform(rng, &[tokens, d], 1.0);

    let mut inputs: Vec<Tensor<f64>> = layer.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    inputs.push(h);
    grad_check_many(
        |tape, vars| {
            let lv = LayerVars {
                router: vars[0],
                experts: (0..n).map(|e| [vars[1 + 3 * e], vars[2 + 3 * e], vars[3 + 3 * e]]).collect(),
                bank: vars[1 + 3 * n],
            };
            let out = layer.forward(tape, &lv, vars[2 + 3 * n], mode)?;
            scalarize(tape, out.output, &c)
        },
        &inputs,
        SUITE_EPS,
    )
}

/// Mean answer-token loss of a two-layer model, with respect to every
/// parameter tensor.
fn model_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mixing = if rng.gen_bool(0.5) { Mixing::Attention } else { Mixing::MeanPool };
    let d = rng.gen_range(2..5);
    let cfg = ModelConfig {
        vocab_size: 6,
        hidden_dim: d,
        n_layers: 2,
        seq_len: 4,
        moe: MoeConfig::new(3, 2, 1, d, 3)?.with_renormalize_main(rng.gen_bool(0.5)),
        mixing,
    };
    let mut params = ModelParams::<f64>::init(cfg, rng.gen())?;
    for b in &mut params.blocks {
        b.moe.bank.thetas = Tensor::from_fn(&[3, d], |_| rng.gen_range(0.5..1.5));
    }
    let tokens: Vec<usize> = (0..8).map(|_| rng.gen_range(0..6)).collect();
    let targets: Vec<usize> = (0..8).map(|_| rng.gen_range(0..6)).collect();
    let inputs: Vec<Tensor<f64>> = params.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    grad_check_many(
        |tape, vars| {
            let mv = params.vars_from_flat(vars)?;
            let out = params.forward(tape, &mv, &tokens, 2, ExpertMode::Compressed)?;
            tape.cross_entropy(out.logits, targets.clone())
        },
        &inputs,
        SUITE_EPS,
    )
}

/// Runs every check `instances` times with inputs drawn from `seed`.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: &str, tol: f64, check: &dyn Fn(&mut ChaCha8Rng) -> Result<f64>| -> Result<()> {
        let mut worst = 0.0f64;
        for _ in 0..instances {
            worst = worst.max(check(&mut rng)?);
        }
        out.push(CheckResult {
            name: name.into(),
            instances,
            max_error: worst,
            tolerance: tol,
        });
        Ok(())
    };
    for &(name, check) in PRIMITIVES {
        run(name, PRIMITIVE_TOL, &check)?;
    }
    run("moe_layer_full", END_TO_END_TOL, &|r| layer_check(r, ExpertMode::Full))?;
    run("moe_layer_ce", END_TO_END_TOL, &|r| layer_check(r, ExpertMode::Compressed))?;
    run("model", END_TO_END_TOL, &model_check)?;
    Ok(out)
}
