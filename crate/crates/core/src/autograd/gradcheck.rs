//! Central finite-difference checks for tape gradients.

use super::{NodeId, ParamStore, Tape};
use crate::error::Result;
use crate::tensor::Tensor;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.zip_map(b, |x, y| x - y).expect("same shape").norm_l2();
    let scale = a.norm_l2().max(b.norm_l2());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub labels: Vec<String>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheck {
    pub fn rel_errors(&self) -> Vec<f64> {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| relative_error(a, n))
            .collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors().into_iter().fold(0.0, f64::max)
    }

    /// Labels whose analytic gradient is identically zero.
    pub fn zero_gradients(&self) -> Vec<&str> {
        self.labels
            .iter()
            .zip(&self.analytic)
            .filter(|(_, g)| g.norm_l2() == 0.0)
            .map(|(l, _)| l.as_str())
            .collect()
    }
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let root = f(&mut tape, &ids)?;
    Ok(tape.value(root).data()[0])
}

/// Compares analytic gradients of the scalar `f(inputs)` with central
/// differences of step `h` for every input tensor.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = f(&mut tape, &ids)?;
    tape.backward(root)?;
    let analytic = ids
        .iter()
        .zip(inputs)
        .map(|(id, t)| tape.grad(*id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work, &f)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work, &f)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * h);
        }
        numeric.push(g);
    }
    Ok(GradCheck {
        labels: (0..inputs.len()).map(|i| format!("input{i}")).collect(),
        analytic,
        numeric,
    })
}

/// Same check over every parameter of `store`; `f` builds the loss.
pub fn check_params<F>(store: &ParamStore, h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let root = f(&mut tape, store)?;
    tape.backward(root)?;
    let mut analytic: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value().shape())).collect();
    for (id, g) in tape.param_grads() {
        analytic[id.index()].add_assign(&g);
    }
    let mut work = store.clone();
    let mut numeric = Vec::with_capacity(store.len());
    for id in store.ids() {
        let mut g = Tensor::zeros(store.value(id).shape());
        for j in 0..g.len() {
            let orig = work.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + h;
            let mut t = Tape::new();
            let r = f(&mut t, &work)?;
            let up = t.value(r).data()[0];
            work.value_mut(id).data_mut()[j] = orig - h;
            let mut t = Tape::new();
            let r = f(&mut t, &work)?;
            let down = t.value(r).data()[0];
            work.value_mut(id).data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * h);
        }
        numeric.push(g);
    }
    Ok(GradCheck {
        labels: store.names().map(str::to_string).collect(),
        analytic,
        numeric,
    })
}
