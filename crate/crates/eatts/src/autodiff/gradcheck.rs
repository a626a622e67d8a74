//! Central-finite-difference gradient checking. The project's
//! anti-regression oracle: every backward rule must agree with
//! (f(x+h) - f(x-h)) / 2h in double precision.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct CoordError {
    pub tensor_index: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords: Vec<CoordError>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub fn worst(&self) -> Option<&CoordError> {
        self.coords
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-8 {
        (a - b).abs()
    } else {
        (a - b).abs() / denom
    }
}

/// Checks the tape gradient of `f` against central finite differences at
/// `point`, coordinate by coordinate. Always produces a report.
pub fn grad_check<F>(f: F, point: &[Tensor<f64>], h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    // Analytic gradients via the tape.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = point
        .iter()
        .map(|t| g.leaf(&t.clone().requires_grad(true)))
        .collect();
    let loss = f(&mut g, &ids)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| grads.get(id).expect("leaf requires grad").to_vec())
        .collect();

    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = pts.iter().map(|t| g.leaf(t)).collect();
        let loss = f(&mut g, &ids)?;
        Ok(g.value(loss)[0])
    };

    let mut coords = Vec::new();
    let mut max_rel = 0.0_f64;
    let mut work: Vec<Tensor<f64>> = point.to_vec();
    for ti in 0..point.len() {
        for j in 0..point[ti].data().len() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[ti].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti][j];
            let re = rel_err(a, numeric);
            max_rel = max_rel.max(re);
            coords.push(CoordError {
                tensor_index: ti,
                coord: j,
                analytic: a,
                numeric,
                rel_err: re,
            });
        }
    }
    Ok(GradCheckReport {
        coords,
        max_rel_err: max_rel,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tensor::Shape;
    use crate::rng::Rng;

    #[test]
    fn linear_function_matches_to_machine_precision() {
        let w = Tensor::from_vec(vec![0.5, -1.5, 2.5]);
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let report = grad_check(
            |g, ids| {
                let prod = g.mul(ids[0], ids[1])?;
                Ok(g.sum_all(prod))
            },
            &[w, x],
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn corrupted_backward_rule_fails() {
        // A deliberately wrong derivative: claims d/dx x^2 = 3x.
        let x = Tensor::from_vec(vec![0.7, -1.3, 2.2]);
        let report = grad_check(
            |g, ids| {
                let y = g.unary(ids[0], |v| v * v, |v, _| 3.0 * v);
                Ok(g.sum_all(y))
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed(), "corruption undetected");
    }

    #[test]
    fn matmul_gradients_random_3x4_4x2() {
        let mut rng = Rng::new(42);
        let a = Tensor::uniform(Shape::matrix(3, 4), 1.0, &mut rng);
        let b = Tensor::uniform(Shape::matrix(4, 2), 1.0, &mut rng);
        let report = grad_check(
            |g, ids| {
                let c = g.matmul(ids[0], ids[1])?;
                // Weighted sum so gradients are not all ones.
                let sq = g.mul(c, c)?;
                Ok(g.sum_all(sq))
            },
            &[a, b],
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn l2_normalize_gradient_at_122() {
        let v = Tensor::from_vec(vec![1.0, 2.0, 2.0]);
        let report = grad_check(
            |g, ids| {
                let n = g.l2_normalize(ids[0])?;
                Ok(g.sum_all(n))
            },
            &[v],
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn elementwise_and_reduction_primitives() {
        let mut rng = Rng::new(7);
        let a = Tensor::uniform(Shape::matrix(3, 3), 0.8, &mut rng);
        let b = Tensor::uniform(Shape::matrix(3, 3), 0.8, &mut rng);
        // Mixture exercising div, exp, ln, sqrt, tanh, sigmoid, row_sum.
        let report = grad_check(
            |g, ids| {
                let shifted = g.add_const(ids[1], 3.0);
                let q = g.div(ids[0], shifted)?;
                let e = g.exp(q);
                let s = g.sigmoid(e);
                let t = g.tanh(s);
                let plus = g.add_const(t, 1.5);
                let l = g.ln(plus);
                let r = g.sqrt(plus);
                let m = g.mul(l, r)?;
                let rs = g.row_sum(m)?;
                Ok(g.sum_all(rs))
            },
            &[a, b],
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn lstm_five_step_sequence_all_parameter_gradients() {
        use crate::autodiff::lstm::{lstm_cell, LstmIds};
        let (d_in, d_h, steps) = (3, 4, 5);
        let mut rng = Rng::new(11);
        let w_x = Tensor::uniform(Shape::matrix(d_in, 4 * d_h), 0.5, &mut rng);
        let w_h = Tensor::uniform(Shape::matrix(d_h, 4 * d_h), 0.5, &mut rng);
        let bias = Tensor::uniform(Shape::vector(4 * d_h), 0.5, &mut rng);
        let xs: Vec<f64> = (0..steps * d_in).map(|_| rng.range(-1.0, 1.0)).collect();
        let report = grad_check(
            |g, ids| {
                let lstm = LstmIds {
                    w_x: ids[0],
                    w_h: ids[1],
                    bias: ids[2],
                    d_h,
                };
                let mut h = g.constant(Shape::matrix(1, d_h), vec![0.0; d_h])?;
                let mut c = g.constant(Shape::matrix(1, d_h), vec![0.0; d_h])?;
                for t in 0..steps {
                    let x = g.constant(
                        Shape::matrix(1, d_in),
                        xs[t * d_in..(t + 1) * d_in].to_vec(),
                    )?;
                    let (h2, c2) = lstm_cell(g, &lstm, x, h, c)?;
                    h = h2;
                    c = c2;
                }
                let sq = g.mul(h, h)?;
                Ok(g.sum_all(sq))
            },
            &[w_x, w_h, bias],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}
