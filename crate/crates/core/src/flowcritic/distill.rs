use ndarray::{Array2, Axis};
use rand::Rng;

use crate::approx::{cosine_embed_into, Activation, Gradients, NetParams};
use crate::error::{usage, Result};

use super::critic::integrate_many;
use super::net::{FlowPoint, VelocityModel};
use super::schedule::TimeSchedule;
use super::source::SourceMap;

/// One-step quantile network `q(s, a, tau)` over one-hot state, one-hot
/// action and cosine fraction features.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileStudent {
    pub net: NetParams,
    n_states: usize,
    n_actions: usize,
    cosine_basis: usize,
}

impl QuantileStudent {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        cosine_basis: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut dims = vec![n_states + n_actions + cosine_basis];
        dims.extend(hidden);
        dims.push(1);
        Ok(Self {
            net: NetParams::new(&dims, activation, Activation::Identity, rng)?,
            n_states,
            n_actions,
            cosine_basis,
        })
    }

    fn features(&self, s: usize, a: usize, taus: &[f64]) -> Result<Array2<f64>> {
        if s >= self.n_states || a >= self.n_actions {
            return Err(usage!("state-action ({s},{a}) outside the student's table"));
        }
        let mut x = Array2::zeros((taus.len(), self.n_states + self.n_actions + self.cosine_basis));
        let off = self.n_states + self.n_actions;
        for (mut row, &tau) in x.axis_iter_mut(Axis(0)).zip(taus) {
            row[s] = 1.0;
            row[self.n_states + a] = 1.0;
            let row = row.as_slice_mut().expect("row-major");
            cosine_embed_into(tau, &mut row[off..]);
        }
        Ok(x)
    }

    pub fn predict(&self, s: usize, a: usize, taus: &[f64]) -> Result<Vec<f64>> {
        let x = self.features(s, a, taus)?;
        Ok(self.net.predict(x.view())?.iter().copied().collect())
    }
}

/// Mean over the shared fractions of `|student(s, a, tau) - teacher(tau)|^2`,
/// with the teacher's integrated returns held constant.
#[allow(clippy::too_many_arguments)]
pub fn distill_student(
    teacher: &impl VelocityModel,
    student: &QuantileStudent,
    s: usize,
    a: usize,
    grid: &[f64],
    sm: &SourceMap,
    schedule: &TimeSchedule,
) -> Result<(f64, Gradients)> {
    if grid.is_empty() {
        return Err(usage!("distillation needs at least one fraction"));
    }
    let points: Vec<FlowPoint> = grid.iter().map(|&tau| FlowPoint { s, a, tau }).collect();
    let teacher_z = integrate_many(teacher, &points, sm, schedule)?;
    let x = student.features(s, a, grid)?;
    let (out, cache) = student.net.forward(x.view())?;
    let n = grid.len() as f64;
    let mut loss = 0.0;
    let mut g = Array2::zeros((grid.len(), 1));
    for (i, (&p, t)) in out.iter().zip(&teacher_z).enumerate() {
        let r = p - t;
        loss += r * r / n;
        g[[i, 0]] = 2.0 * r / n;
    }
    let (grads, _) = student.net.backward(&cache, g.view())?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::ParamSet;
    use crate::dist1d::midpoint_grid;
    use crate::flowcritic::net::{FnField, VelocityQuery};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_student(c: f64) -> QuantileStudent {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut st = QuantileStudent::new(2, 1, 4, &[3], Activation::Gelu, &mut rng).unwrap();
        for t in st.net.tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        let last = st.net.n_layers() - 1;
        st.net.bias_mut(last)[0] = c;
        st
    }

    #[test]
    fn constant_teacher_and_student() {
        let sm = SourceMap::from_interval(0.0, 1.0).unwrap();
        let sched = TimeSchedule::uniform(4).unwrap();
        let teacher = FnField::new(|q: &VelocityQuery| 2.0 - q.z);
        let grid: Vec<f64> = midpoint_grid(5).collect();
        let st = constant_student(0.5);
        let (loss, _) = distill_student(&teacher, &st, 0, 0, &grid, &sm, &sched).unwrap();
        let z = integrate_many(&teacher, &grid.iter().map(|&tau| FlowPoint { s: 0, a: 0, tau }).collect::<Vec<_>>(), &sm, &sched)
            .unwrap();
        let want = z.iter().map(|t| (0.5 - t) * (0.5 - t)).sum::<f64>() / 5.0;
        assert!((loss - want).abs() < 1e-14);

        let c_teacher = FnField::new(|_: &VelocityQuery| 0.0);
        let point = SourceMap::from_interval(3.0, 3.0).unwrap();
        let (loss, _) = distill_student(&c_teacher, &constant_student(1.0), 1, 0, &grid, &point, &sched).unwrap();
        assert!((loss - 4.0).abs() < 1e-4);
    }

    #[test]
    fn matching_student_has_zero_loss_and_gradient() {
        let sm = SourceMap::from_interval(0.0, 1.0).unwrap();
        let sched = TimeSchedule::uniform(2).unwrap();
        let teacher = FnField::new(|_: &VelocityQuery| 0.0);
        let st = constant_student(0.0);
        // Teacher returns g(tau) = tau, which the constant student misses;
        // a constant teacher at 0 needs a point interval at 0.
        let zero = SourceMap::from_interval(0.0, 0.0).unwrap();
        let grid = [0.25, 0.75];
        let (loss, g) = distill_student(&teacher, &st, 0, 0, &grid, &zero, &sched).unwrap();
        assert!(loss < 1e-12);
        assert!(g.as_slice().iter().all(|x| x.abs() < 1e-5));
        let (loss, _) = distill_student(&teacher, &st, 0, 0, &grid, &sm, &sched).unwrap();
        assert!((loss - (0.0625 + 0.5625) / 2.0).abs() < 1e-14);
    }
}
