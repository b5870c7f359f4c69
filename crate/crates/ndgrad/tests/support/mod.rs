//! Finite-difference checks of every differentiable primitive on seeded
//! random inputs. Shared with the workspace acceptance suite.

#![allow(dead_code)]

use ndgrad::{max_relative_error, numeric_gradient4, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STENCIL_STEP: f64 = 1e-3;

type Op = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

struct Case {
    name: &'static str,
    x: Tensor,
    op: Op,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values in ±[0.05, 1.5], kept away from the relu kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn case(name: &'static str, x: Tensor, op: impl Fn(&mut Tape, Var) -> Result<Var> + 'static) -> Case {
    Case { name, x, op: Box::new(op) }
}

fn cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let c34 = uniform(rng, &[3, 4], -1.0, 1.0);
    let c14 = uniform(rng, &[1, 4], -1.0, 1.0);
    let c42 = uniform(rng, &[4, 2], -1.0, 1.0);
    let c22 = uniform(rng, &[2, 2], -1.0, 1.0);
    let k433 = uniform(rng, &[4, 3, 3], -1.0, 1.0);
    let x253 = uniform(rng, &[2, 5, 3], -1.0, 1.0);
    let targets: Vec<f64> = (0..12).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
    let mask: Vec<bool> = (0..15).map(|i| i % 5 == 0 || rng.gen_bool(0.6)).collect();
    let ids: Vec<usize> = (0..7).map(|_| rng.gen_range(0..6)).collect();

    let (a, b, c, d) = (c34.clone(), c34.clone(), c34.clone(), c14.clone());
    let (e, f, g, h) = (c42.clone(), c34.clone(), c22.clone(), c22.clone());
    let (k, xin) = (k433.clone(), x253.clone());
    vec![
        case("add", uniform(rng, &[3, 4], -1.0, 1.0), move |t, x| {
            let y = t.constant(a.clone());
            t.add(x, y)
        }),
        case("add_broadcast_rhs", uniform(rng, &[1, 4], -1.0, 1.0), move |t, x| {
            let y = t.constant(b.clone());
            t.add(y, x)
        }),
        case("add_broadcast_lhs", uniform(rng, &[3, 4], -1.0, 1.0), move |t, x| {
            let y = t.constant(d.clone());
            t.add(x, y)
        }),
        case("sub", uniform(rng, &[3, 4], -1.0, 1.0), move |t, x| {
            let y = t.constant(c.clone());
            let l = t.sub(x, y)?;
            let r = t.sub(y, x)?;
            let r = t.mul(r, r)?;
            t.add(l, r)
        }),
        case("mul", uniform(rng, &[3, 4], -1.0, 1.0), move |t, x| {
            let y = t.constant(f.clone());
            let p = t.mul(x, y)?;
            t.mul(p, x)
        }),
        case("scale", uniform(rng, &[5], -1.0, 1.0), |t, x| t.scale(x, -1.7)),
        case("matmul_lhs", uniform(rng, &[3, 4], -1.0, 1.0), move |t, x| {
            let y = t.constant(e.clone());
            t.matmul(x, y)
        }),
        case("matmul_rhs", uniform(rng, &[4, 2], -1.0, 1.0), {
            let l = c34.clone();
            move |t, x| {
                let y = t.constant(l.clone());
                t.matmul(y, x)
            }
        }),
        case("matmul_self", uniform(rng, &[3, 3], -1.0, 1.0), |t, x| t.matmul(x, x)),
        case("concat_axis1", uniform(rng, &[2, 3], -1.0, 1.0), move |t, x| {
            let y = t.constant(g.clone());
            t.concat(&[y, x, x], 1)
        }),
        case("concat_axis0", uniform(rng, &[1, 2], -1.0, 1.0), move |t, x| {
            let y = t.constant(h.clone());
            t.concat(&[x, y], 0)
        }),
        case("slice", uniform(rng, &[4, 5], -1.0, 1.0), |t, x| t.slice(x, 1, 1, 4)),
        case("reshape", uniform(rng, &[2, 6], -1.0, 1.0), |t, x| {
            let sq = t.mul(x, x)?;
            t.reshape(sq, &[3, 4])
        }),
        case("sum", uniform(rng, &[3, 4], -1.0, 1.0), |t, x| {
            let sq = t.mul(x, x)?;
            t.sum(sq)
        }),
        case("mean", uniform(rng, &[3, 4], -1.0, 1.0), |t, x| {
            let sq = t.mul(x, x)?;
            t.mean(sq)
        }),
        case("sum_axis0", uniform(rng, &[3, 4], -1.0, 1.0), |t, x| {
            let sq = t.mul(x, x)?;
            t.sum_axis(sq, 0)
        }),
        case("sum_axis1", uniform(rng, &[2, 3, 4], -1.0, 1.0), |t, x| {
            let sq = t.mul(x, x)?;
            t.sum_axis(sq, 1)
        }),
        case("tanh", uniform(rng, &[3, 4], -2.0, 2.0), |t, x| t.tanh(x)),
        case("sigmoid", uniform(rng, &[3, 4], -3.0, 3.0), |t, x| t.sigmoid(x)),
        case("relu", off_zero(rng, &[3, 4]), |t, x| t.relu(x)),
        case("exp", uniform(rng, &[3, 4], -1.5, 1.5), |t, x| t.exp(x)),
        case("log", uniform(rng, &[3, 4], 0.5, 2.0), |t, x| t.log(x)),
        case("softmax", uniform(rng, &[3, 5], -2.0, 2.0), |t, x| t.softmax(x)),
        case("masked_softmax", uniform(rng, &[3, 5], -2.0, 2.0), move |t, x| t.masked_softmax(x, &mask)),
        case("log_softmax", uniform(rng, &[3, 5], -2.0, 2.0), |t, x| t.log_softmax(x)),
        case("embedding_gather", uniform(rng, &[6, 3], -1.0, 1.0), move |t, x| t.embedding_gather(x, &ids)),
        case("conv1d_input", uniform(rng, &[2, 5, 3], -1.0, 1.0), move |t, x| {
            let w = t.constant(k.clone());
            t.conv1d(x, w)
        }),
        case("conv1d_kernel", uniform(rng, &[4, 3, 3], -1.0, 1.0), move |t, w| {
            let x = t.constant(xin.clone());
            t.conv1d(x, w)
        }),
        case("bce_with_logits", uniform(rng, &[3, 4], -3.0, 3.0), move |t, x| t.bce_with_logits(x, &targets)),
    ]
}

/// Maximum elementwise relative error of each primitive's tape gradient
/// against a fourth-order central difference. Every output is contracted
/// with a fixed random weight tensor so that all output elements matter.
pub fn primitive_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all = cases(&mut rng);
    all.into_iter()
        .map(|Case { name, x, op }| {
            let mut probe = Tape::new();
            let px = probe.param(x.clone());
            let out = op(&mut probe, px).expect("primitive runs");
            let shape = probe.shape(out).to_vec();
            let w = uniform(&mut rng, &shape, -1.0, 1.0);
            let f = move |t: &mut Tape, v: Var| {
                let y = op(t, v)?;
                let wv = t.constant(w.clone());
                let p = t.mul(y, wv)?;
                t.sum(p)
            };
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let y = f(&mut tape, xv).expect("primitive runs");
            let analytic = tape.backward(y).expect("scalar loss").wrt(xv);
            let numeric = numeric_gradient4(&f, &x, STENCIL_STEP).expect("finite");
            (name, max_relative_error(&analytic, &numeric))
        })
        .collect()
}
