//! Central-difference oracle and the per-primitive gradient checks built on it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{cross_entropy_softmax, row_concat, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Step used by every finite-difference check in the crate.
pub const FD_STEP: f64 = 1e-5;
pub const FIRST_ORDER_TOL: f64 = 1e-6;
pub const SECOND_ORDER_TOL: f64 = 1e-4;

/// Central-difference gradient of `f` at `point`.
pub fn finite_diff<S: Scalar>(
    f: impl Fn(&Tensor<S>) -> Result<S>,
    point: &Tensor<S>,
    h: S,
) -> Result<Tensor<S>> {
    if !(h > S::zero()) {
        return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
    }
    let mut grad = Tensor::zeros(point.shape());
    let mut probe = point.clone();
    let two_h = h + h;
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff" });
        }
        grad.data_mut()[i] = (up - down) / two_h;
    }
    Ok(grad)
}

/// Five-point central difference, fourth order in `h`. Tolerates a larger
/// step than [`finite_diff`], which keeps rounding noise small when the
/// gradient itself is small.
pub fn finite_diff_5pt<S: Scalar>(
    f: impl Fn(&Tensor<S>) -> Result<S>,
    point: &Tensor<S>,
    h: S,
) -> Result<Tensor<S>> {
    if !(h > S::zero()) {
        return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
    }
    let mut grad = Tensor::zeros(point.shape());
    let mut probe = point.clone();
    let mut eval = |i: usize, at: S| -> Result<S> {
        let orig = probe.data()[i];
        probe.data_mut()[i] = at;
        let v = f(&probe);
        probe.data_mut()[i] = orig;
        match v {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(_) => Err(Error::NonFinite { op: "finite_diff_5pt" }),
            Err(e) => Err(e),
        }
    };
    let eight = S::lit(8.0);
    for i in 0..point.numel() {
        let x = point.data()[i];
        let p2 = eval(i, x + h + h)?;
        let p1 = eval(i, x + h)?;
        let m1 = eval(i, x - h)?;
        let m2 = eval(i, x - h - h)?;
        grad.data_mut()[i] = (m2 - p2 + eight * (p1 - m1)) / (S::lit(12.0) * h);
    }
    Ok(grad)
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm, with a floor of `1e-8` on
/// the denominator so vanishing gradients compare absolutely.
pub fn relative_error<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.frobenius_norm().to_f64_lossy();
    let nb = b.frobenius_norm().to_f64_lossy();
    diff / na.max(nb).max(1e-8)
}

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub order: u8,
    pub trials: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

#[derive(Clone, Copy)]
enum Domain {
    Real,
    Positive,
    AwayFromZero,
}

type Build = for<'t> fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>;

struct Case {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    domain: Domain,
    build: Build,
}

fn cases() -> Vec<Case> {
    use Domain::*;
    const M34: &[usize] = &[3, 4];
    vec![
        Case { name: "add", shapes: &[M34, M34], domain: Real, build: |v| v[0].add(v[1]) },
        Case { name: "subtract", shapes: &[M34, M34], domain: Real, build: |v| v[0].sub(v[1]) },
        Case { name: "elementwise-multiply", shapes: &[M34, M34], domain: Real, build: |v| v[0].mul(v[1]) },
        Case { name: "scalar-scale", shapes: &[M34], domain: Real, build: |v| v[0].scale(-1.7) },
        Case { name: "scale-by-node", shapes: &[M34, &[1, 1]], domain: Real, build: |v| v[0].scale_by(v[1]) },
        Case { name: "matmul", shapes: &[M34, &[4, 2]], domain: Real, build: |v| v[0].matmul(v[1]) },
        Case { name: "transpose", shapes: &[M34], domain: Real, build: |v| v[0].t() },
        Case { name: "reshape", shapes: &[M34], domain: Real, build: |v| v[0].reshape(&[2, 6]) },
        Case { name: "row-concat", shapes: &[&[2, 3], &[4, 3]], domain: Real, build: |v| row_concat(v) },
        Case { name: "row-slice", shapes: &[&[5, 3]], domain: Real, build: |v| v[0].row_slice(1, 4) },
        Case { name: "sum", shapes: &[M34], domain: Real, build: |v| v[0].sum() },
        Case { name: "mean", shapes: &[M34], domain: Real, build: |v| v[0].mean() },
        Case { name: "row-softmax", shapes: &[&[3, 5]], domain: Real, build: |v| v[0].row_softmax() },
        Case { name: "row-layernorm", shapes: &[&[4, 8]], domain: Real, build: |v| v[0].row_layernorm(1e-5) },
        Case { name: "relu", shapes: &[M34], domain: AwayFromZero, build: |v| v[0].relu() },
        Case { name: "gelu", shapes: &[M34], domain: Real, build: |v| v[0].gelu() },
        Case { name: "exp", shapes: &[M34], domain: Real, build: |v| v[0].exp() },
        Case { name: "log", shapes: &[M34], domain: Positive, build: |v| v[0].log() },
        Case { name: "sqrt", shapes: &[M34], domain: Positive, build: |v| v[0].sqrt() },
        Case { name: "square", shapes: &[M34], domain: Real, build: |v| v[0].square() },
        Case { name: "reciprocal", shapes: &[M34], domain: Positive, build: |v| v[0].recip() },
        Case { name: "abs", shapes: &[M34], domain: AwayFromZero, build: |v| v[0].abs() },
        Case { name: "frobenius-norm-squared", shapes: &[M34], domain: Real, build: |v| v[0].frobenius_sq() },
        Case { name: "l1-norm", shapes: &[M34], domain: AwayFromZero, build: |v| v[0].l1_norm() },
        Case { name: "dot", shapes: &[M34, M34], domain: Real, build: |v| v[0].dot(v[1]) },
        Case { name: "cosine-similarity", shapes: &[M34, M34], domain: Real, build: |v| v[0].cosine_similarity(v[1]) },
        Case { name: "cross-entropy", shapes: &[&[5, 1]], domain: Real, build: |v| cross_entropy_softmax(v[0], 2) },
    ]
}

fn sample(rng: &mut ChaCha8Rng, n: usize, domain: Domain) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            match domain {
                Domain::Real => z,
                Domain::Positive => 0.5 + rng.random::<f64>() * 1.5,
                Domain::AwayFromZero => z.signum() * (0.05 + z.abs()),
            }
        })
        .collect()
}

fn split(point: &Tensor<f64>, shapes: &[&[usize]]) -> Vec<Tensor<f64>> {
    let mut offset = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s.to_vec(), point.data()[offset..offset + n].to_vec()).expect("shape");
            offset += n;
            t
        })
        .collect()
}

/// Contracts the primitive's output against a fixed random cotangent so the
/// check exercises a generic vector-Jacobian product.
fn scalar_objective<'t>(case: &Case, inputs: &[Var<'t, f64>], cotangent: &Tensor<f64>) -> Result<Var<'t, f64>> {
    let out = (case.build)(inputs)?;
    let tape = out.tape();
    if out.value().numel() == 1 {
        out.scale(cotangent.data()[0])
    } else {
        out.dot(tape.constant(cotangent.reshape(&out.shape())?))
    }
}

fn first_order(case: &Case, point: &Tensor<f64>, cotangent: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
    let tape = Tape::new();
    let vars: Vec<_> = split(point, case.shapes).into_iter().map(|t| tape.leaf(t)).collect();
    let obj = scalar_objective(case, &vars, cotangent)?;
    let grads = tape.grad(obj, &vars)?;
    let flat: Vec<f64> = grads.into_iter().flat_map(Tensor::into_data).collect();
    Ok((obj.item(), Tensor::new(vec![flat.len()], flat)?))
}

/// `<grad f(x), u>` evaluated through the first-order backward pass.
fn directional(case: &Case, point: &Tensor<f64>, cotangent: &Tensor<f64>, u: &Tensor<f64>) -> Result<f64> {
    let (_, g) = first_order(case, point, cotangent)?;
    g.dot(u)
}

fn second_order(case: &Case, point: &Tensor<f64>, cotangent: &Tensor<f64>, u: &Tensor<f64>) -> Result<Tensor<f64>> {
    let tape = Tape::new();
    let vars: Vec<_> = split(point, case.shapes).into_iter().map(|t| tape.leaf(t)).collect();
    let obj = scalar_objective(case, &vars, cotangent)?;
    let grads = tape.grad_graph(obj, &vars)?;
    let us = split(u, case.shapes);
    let mut phi: Option<Var<'_, f64>> = None;
    for (g, ui) in grads.iter().zip(us) {
        let term = g.dot(tape.constant(ui))?;
        phi = Some(match phi {
            None => term,
            Some(p) => p.add(term)?,
        });
    }
    let phi = phi.expect("at least one input");
    let hv = tape.grad(phi, &vars)?;
    let flat: Vec<f64> = hv.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![flat.len()], flat)
}

/// Checks every primitive's first- and second-order derivatives against
/// central differences on `trials` random inputs each.
pub fn primitive_suite(seed: u64, trials: usize) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcomes = Vec::new();
    for case in cases() {
        let total: usize = case.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let mut worst1: f64 = 0.0;
        let mut worst2: f64 = 0.0;
        for _ in 0..trials {
            let point = Tensor::new(vec![total], sample(&mut rng, total, case.domain))?;
            let probe = {
                let tape = Tape::new();
                let vars: Vec<_> = split(&point, case.shapes).into_iter().map(|t| tape.constant(t)).collect();
                (case.build)(&vars)?.value().numel()
            };
            let cot = Tensor::new(vec![probe], sample(&mut rng, probe, Domain::Real))?;
            let u = Tensor::new(vec![total], sample(&mut rng, total, Domain::Real))?;

            let (_, analytic) = first_order(&case, &point, &cot)?;
            let numeric = finite_diff(|p| first_order(&case, p, &cot).map(|r| r.0), &point, FD_STEP)?;
            worst1 = worst1.max(relative_error(&analytic, &numeric));

            let hv = second_order(&case, &point, &cot, &u)?;
            let hv_fd = finite_diff(|p| directional(&case, p, &cot, &u), &point, FD_STEP)?;
            worst2 = worst2.max(relative_error(&hv, &hv_fd));
        }
        outcomes.push(CheckOutcome {
            name: case.name.to_string(),
            order: 1,
            trials,
            max_rel_err: worst1,
            tolerance: FIRST_ORDER_TOL,
        });
        outcomes.push(CheckOutcome {
            name: case.name.to_string(),
            order: 2,
            trials,
            max_rel_err: worst2,
            tolerance: SECOND_ORDER_TOL,
        });
    }
    Ok(outcomes)
}
