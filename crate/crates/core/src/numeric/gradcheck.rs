//! Central finite-difference gradient checking.
//!
//! The numerical gradient of entry `i` is `(f(x + h e_i) - f(x - h e_i)) / 2h`.
//! Each entry's relative error is `|analytic - numeric| / max(|analytic|,
//! |numeric|, ABS_FLOOR)`; the floor keeps entries whose true gradient is
//! near zero from being judged on round-off alone.

use super::graph::{Graph, Var};
use super::rng;
use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const ABS_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (input or parameter index, entry index) of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub rtol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.rtol
    }

    fn new(rtol: f64) -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: None,
            checked: 0,
            rtol,
        }
    }

    fn record(&mut self, which: usize, entry: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
        self.checked += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((which, entry));
        }
    }
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let vals = g.value(v);
    if vals.len() != 1 {
        return Err(Error::NotScalarLoss(g.shape(v).to_vec()));
    }
    Ok(vals[0])
}

/// Checks the gradient of scalar `f` at `point`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, rtol: f64, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(point), rtol, h)
}

/// Checks the gradient of scalar `f` with respect to each of `points`.
pub fn finite_diff_check_many<F>(f: F, points: &[Tensor], rtol: f64, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    finite_diff_check_on(Graph::new, f, points, rtol, h)
}

/// As [`finite_diff_check_many`], on tapes built by `tape`. A training tape
/// from a fixed seed draws the same dropout mask on every evaluation.
pub fn finite_diff_check_on<T, F>(tape: T, f: F, points: &[Tensor], rtol: f64, h: f64) -> Result<GradCheckReport>
where
    T: Fn() -> Graph,
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = tape();
        let vars: Vec<Var> = pts.iter().map(|p| g.input(p)).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = tape();
    let vars: Vec<Var> = points.iter().map(|p| g.input(p)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheckReport::new(rtol);
    let mut work = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        for j in 0..point.len() {
            let x = point.values()[j];
            work[pi].values_mut()[j] = x + h;
            let plus = eval(&work)?;
            work[pi].values_mut()[j] = x - h;
            let minus = eval(&work)?;
            work[pi].values_mut()[j] = x;
            report.record(pi, j, analytic[pi][j], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Checks the gradient of scalar `f` with respect to every trainable
/// parameter in `params`. Parameter values are restored before returning.
pub fn finite_diff_check_params<F>(
    f: F,
    params: &mut ParamStore,
    rtol: f64,
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    params.clear_grads();
    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    g.backward_params(out, params)?;
    let analytic: Vec<Option<Vec<f64>>> = params
        .iter()
        .map(|(_, t)| t.grad().map(<[f64]>::to_vec))
        .collect();
    params.clear_grads();

    let mut report = GradCheckReport::new(rtol);
    let ids: Vec<_> = params.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        if !params.get(id).requires_grad() {
            continue;
        }
        for j in 0..params.get(id).len() {
            let x = params.get(id).values()[j];
            params.get_mut(id).values_mut()[j] = x + h;
            let plus = {
                let mut g = Graph::new();
                let v = f(&mut g, params)?;
                scalar_of(&g, v)?
            };
            params.get_mut(id).values_mut()[j] = x - h;
            let minus = {
                let mut g = Graph::new();
                let v = f(&mut g, params)?;
                scalar_of(&g, v)?
            };
            params.get_mut(id).values_mut()[j] = x;
            let a = analytic[pi].as_ref().map_or(0.0, |g| g[j]);
            report.record(pi, j, a, (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Deterministic test point with entries in `[-1, 1)`.
pub fn probe_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed, rng::stream::SYNTH);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect()).expect("shape matches length")
}

/// Reduces `y` to a scalar through fixed, uneven weights, so that no
/// entry's gradient cancels by symmetry (softmax rows sum to one, etc.).
pub fn weighted_sum(g: &mut Graph, y: Var) -> Result<Var> {
    let w = probe_tensor(g.shape(y), 1_000 + g.value(y).len() as u64);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn op_cases() -> Vec<OpCase> {
    let t = probe_tensor;
    vec![
        ("matmul", vec![t(&[3, 4], 1), t(&[4, 2], 2)], Box::new(|g, x| g.matmul(x[0], x[1]))),
        ("matmul_t", vec![t(&[4, 3], 3), t(&[2, 4], 4)], Box::new(|g, x| g.matmul_t(x[0], x[1], true, true))),
        ("matmul_3d", vec![t(&[2, 3, 4], 5), t(&[2, 4, 3], 6)], Box::new(|g, x| g.matmul(x[0], x[1]))),
        ("add", vec![t(&[2, 3], 7), t(&[2, 3], 8)], Box::new(|g, x| g.add(x[0], x[1]))),
        ("sub", vec![t(&[2, 3], 9), t(&[2, 3], 10)], Box::new(|g, x| g.sub(x[0], x[1]))),
        ("mul", vec![t(&[2, 3], 11), t(&[2, 3], 12)], Box::new(|g, x| g.mul(x[0], x[1]))),
        ("add_row", vec![t(&[2, 2, 3], 13), t(&[3], 14)], Box::new(|g, x| g.add_row(x[0], x[1]))),
        ("scale", vec![t(&[5], 15)], Box::new(|g, x| g.scale(x[0], -1.7))),
        ("tanh", vec![t(&[6], 16)], Box::new(|g, x| g.tanh(x[0]))),
        ("sigmoid", vec![t(&[6], 17)], Box::new(|g, x| g.sigmoid(x[0]))),
        ("gelu", vec![t(&[6], 18)], Box::new(|g, x| g.gelu(x[0]))),
        ("relu", vec![t(&[6], 19)], Box::new(|g, x| g.map(x[0], super::graph::RELU))),
        ("softmax", vec![t(&[2, 5], 20)], Box::new(|g, x| g.softmax(x[0]))),
        ("mean_axis1", vec![t(&[2, 3, 4], 21)], Box::new(|g, x| g.mean(x[0], 1))),
        ("mean_all", vec![t(&[3, 3], 22)], Box::new(|g, x| g.mean_all(x[0]))),
        ("sum", vec![t(&[3, 3], 23)], Box::new(|g, x| g.sum(x[0]))),
        (
            "layer_norm",
            vec![t(&[3, 5], 24), t(&[5], 25), t(&[5], 26)],
            Box::new(|g, x| g.layer_norm(x[0], x[1], x[2], 1e-12)),
        ),
        ("concat", vec![t(&[2, 3], 27), t(&[2, 2], 28)], Box::new(|g, x| g.concat(&[x[0], x[1]], 1))),
        ("narrow", vec![t(&[2, 6], 29)], Box::new(|g, x| g.narrow(x[0], 1, 2, 3))),
        ("gather", vec![t(&[4, 3], 30)], Box::new(|g, x| g.gather(x[0], &[3, 0, 3, 1]))),
        ("reshape", vec![t(&[2, 6], 31)], Box::new(|g, x| g.reshape(x[0], &[3, 4]))),
        ("permute", vec![t(&[2, 3, 4], 32)], Box::new(|g, x| g.permute(x[0], &[1, 2, 0]))),
        (
            "select_rows",
            vec![t(&[3, 2], 33), t(&[3, 2], 34)],
            Box::new(|g, x| g.select_rows(&[true, false, true], x[0], x[1])),
        ),
    ]
}

/// Gradient check of every differentiable tape operation, each composed with
/// [`weighted_sum`]. Dropout runs on a training tape with a fixed mask.
pub fn op_suite(rtol: f64, h: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut out = Vec::new();
    for (name, points, f) in op_cases() {
        let report = finite_diff_check_many(
            |g, x| {
                let y = f(g, x)?;
                weighted_sum(g, y)
            },
            &points,
            rtol,
            h,
        )?;
        out.push((name, report));
    }
    let dropout = finite_diff_check_on(
        || Graph::training(rng::seeded(11, rng::stream::DROPOUT)),
        |g, x| {
            let y = g.dropout(x[0], 0.3)?;
            weighted_sum(g, y)
        },
        &[probe_tensor(&[4, 5], 35)],
        rtol,
        h,
    )?;
    out.push(("dropout", dropout));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::graph::ElementwiseFn;

    #[test]
    fn linear_function_is_exact() {
        let p = Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let r = finite_diff_check(
            |g, x| {
                let y = g.scale(x, 3.5)?;
                g.sum(y)
            },
            &p,
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn tanh_composition_within_tolerance() {
        let p = Tensor::new(&[4], vec![0.1, -0.7, 1.3, 0.0]).unwrap();
        let r = finite_diff_check(
            |g, x| {
                let a = g.tanh(x)?;
                let b = g.mul(a, x)?;
                let c = g.tanh(b)?;
                g.sum(c)
            },
            &p,
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn corrupted_backward_is_caught() {
        // forward is sin, derivative deliberately wrong
        let broken = ElementwiseFn {
            name: "broken_sin",
            f: f64::sin,
            df: |x| 1.1 * x.cos(),
        };
        let p = Tensor::new(&[3], vec![0.2, 0.9, -0.4]).unwrap();
        let r = finite_diff_check(
            |g, x| {
                let y = g.map(x, broken)?;
                g.sum(y)
            },
            &p,
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(!r.passed());
        assert!(r.max_rel_error > 100.0 * r.rtol, "{r:?}");
    }

    #[test]
    fn every_op_passes() {
        let suite = op_suite(1e-4, 1e-5).unwrap();
        assert!(suite.len() >= 20);
        for (name, r) in suite {
            assert!(r.passed(), "{name}: {r:?}");
            assert!(r.checked > 0, "{name}");
        }
    }
}
