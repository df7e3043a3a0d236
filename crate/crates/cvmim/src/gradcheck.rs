//! Finite-difference gradient checker.
//!
//! The builder callback reconstructs the loss graph from scratch for every
//! evaluation; the tape it receives is always seeded identically, so any
//! stochastic op (dropout) replays the same masks. Central differences
//! (f(θ+h) − f(θ−h)) / 2h are compared per coordinate against one reverse
//! pass, with relative error over max(|analytic|, |numeric|, 1e-8).

use crate::array::Array2D;
use crate::error::{CvmimError, Result};
use crate::tape::{NodeId, Tape};

pub type LossBuilder<'a> = dyn FnMut(&mut Tape, &[NodeId]) -> Result<NodeId> + 'a;

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate.
    pub worst_coord: usize,
    pub failing_coords: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn eval_loss(
    builder: &mut LossBuilder,
    params: &[(String, Array2D)],
    seed: u64,
) -> Result<(Tape, Vec<NodeId>, NodeId)> {
    let mut tape = Tape::new(seed);
    let mut ids = Vec::with_capacity(params.len());
    for (_, value) in params {
        ids.push(tape.leaf(value.clone(), true)?);
    }
    let loss = builder(&mut tape, &ids)?;
    Ok((tape, ids, loss))
}

pub fn grad_check(
    builder: &mut LossBuilder,
    params: &[(String, Array2D)],
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if h <= 0.0 {
        return Err(CvmimError::InvalidArgument(format!("step h = {h} must be > 0")));
    }
    // determinism audit: two forward passes must agree node for node
    let (tape_a, _, _loss_a) = eval_loss(builder, params, seed)?;
    let (tape_b, _, _) = eval_loss(builder, params, seed)?;
    if tape_a.len() != tape_b.len() {
        return Err(CvmimError::GradCheck(format!(
            "non-deterministic builder: node counts {} vs {}",
            tape_a.len(),
            tape_b.len()
        )));
    }
    for id in 0..tape_a.len() {
        if tape_a.value(id) != tape_b.value(id) {
            return Err(CvmimError::GradCheck(format!(
                "non-deterministic builder: first differing node id {id}"
            )));
        }
    }

    let (mut tape, ids, loss) = eval_loss(builder, params, seed)?;
    tape.backward(loss)?;
    let analytic: Vec<Array2D> = ids.iter().map(|&id| tape.grad(id).clone()).collect();

    let mut reports = Vec::with_capacity(params.len());
    let mut global_max = 0.0f64;
    let mut perturbed: Vec<(String, Array2D)> = params.to_vec();
    for (pi, (name, base)) in params.iter().enumerate() {
        let mut max_rel = 0.0f64;
        let mut worst = 0usize;
        let mut failing = 0usize;
        for ci in 0..base.len() {
            let orig = base.data()[ci];
            perturbed[pi].1.data_mut()[ci] = orig + h;
            let (t_plus, _, l_plus) = eval_loss(builder, &perturbed, seed)?;
            let f_plus = t_plus.value(l_plus).scalar_value();
            perturbed[pi].1.data_mut()[ci] = orig - h;
            let (t_minus, _, l_minus) = eval_loss(builder, &perturbed, seed)?;
            let f_minus = t_minus.value(l_minus).scalar_value();
            perturbed[pi].1.data_mut()[ci] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[pi].data()[ci];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = ci;
            }
            if rel > tol {
                failing += 1;
            }
        }
        global_max = global_max.max(max_rel);
        reports.push(ParamReport {
            name: name.clone(),
            max_rel_err: max_rel,
            worst_coord: worst,
            failing_coords: failing,
        });
    }

    Ok(GradCheckReport {
        params: reports,
        max_rel_err: global_max,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn linear_layer_mean_loss_passes() {
        let mut rng = Rng::from_seed(0);
        let w = Array2D::uniform_init(3, 2, 0.5, &mut rng);
        let b = Array2D::uniform_init(1, 2, 0.5, &mut rng);
        let x = Array2D::uniform_init(4, 3, 1.0, &mut rng);
        let params = vec![("w".to_string(), w), ("b".to_string(), b)];
        let mut builder = move |t: &mut Tape, ids: &[NodeId]| {
            let xn = t.constant(x.clone())?;
            let y = t.matmul(xn, ids[0])?;
            let y = t.add(y, ids[1])?;
            let y = t.square(y)?;
            t.mean_all(y)
        };
        let report = grad_check(&mut builder, &params, 1e-6, 1e-5, 0).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let params = vec![("w".to_string(), Array2D::full(2, 2, 1.5))];
        let mut builder = |t: &mut Tape, _ids: &[NodeId]| t.scalar(3.0);
        let report = grad_check(&mut builder, &params, 1e-6, 1e-5, 0).unwrap();
        assert!(report.passed());
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut rng = Rng::from_seed(0);
        let w1 = Array2D::uniform_init(5, 8, 0.5, &mut rng);
        let b1 = Array2D::uniform_init(1, 8, 0.1, &mut rng);
        let w2 = Array2D::uniform_init(8, 3, 0.5, &mut rng);
        let b2 = Array2D::uniform_init(1, 3, 0.1, &mut rng);
        let x = Array2D::uniform_init(6, 5, 1.0, &mut rng);
        let params = vec![
            ("w1".into(), w1),
            ("b1".into(), b1),
            ("w2".into(), w2),
            ("b2".into(), b2),
        ];
        let mut builder = move |t: &mut Tape, ids: &[NodeId]| {
            let xn = t.constant(x.clone())?;
            let h = t.matmul(xn, ids[0])?;
            let h = t.add(h, ids[1])?;
            let h = t.softplus(h)?;
            let y = t.matmul(h, ids[2])?;
            let y = t.add(y, ids[3])?;
            let y = t.sigmoid(y)?;
            let y = t.square(y)?;
            t.mean_all(y)
        };
        let report = grad_check(&mut builder, &params, 1e-6, 1e-5, 0).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn nondeterministic_builder_rejected() {
        let params = vec![("w".to_string(), Array2D::scalar(1.0))];
        let mut flip = 0.0;
        let mut builder = move |t: &mut Tape, ids: &[NodeId]| {
            flip += 1.0;
            let c = t.scalar(flip)?;
            let y = t.mul(ids[0], c)?;
            t.mean_all(y)
        };
        let err = grad_check(&mut builder, &params, 1e-6, 1e-5, 0).unwrap_err();
        assert!(err.to_string().contains("non-deterministic"));
    }

    #[test]
    fn dropout_path_is_replayed_deterministically() {
        let mut rng = Rng::from_seed(4);
        let w = Array2D::uniform_init(4, 4, 0.5, &mut rng);
        let x = Array2D::uniform_init(8, 4, 1.0, &mut rng);
        let params = vec![("w".into(), w)];
        let mut builder = move |t: &mut Tape, ids: &[NodeId]| {
            let xn = t.constant(x.clone())?;
            let h = t.matmul(xn, ids[0])?;
            let h = t.dropout(h, 0.25)?;
            let h = t.square(h)?;
            t.mean_all(h)
        };
        let report = grad_check(&mut builder, &params, 1e-6, 1e-5, 7).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}
