//! Named parameter traversal shared by checkpointing, the optimizer and
//! gradient audits.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Role of a parameter tensor; only `Weight` receives weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Token,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

/// Dotted parameter path `prefix.name` (just `name` at the root).
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A structure owning named parameter tensors.
///
/// Visitation order is fixed and defines the flattened order used by
/// [`Params::flatten`] and [`Params::assign`].
pub trait Params<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind));

    fn flatten(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t, _| {
            let mut t = t.clone();
            t.clear_grad();
            out.push(t);
        });
        out
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |n, _, _| out.push(n.to_string()));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, _| n += t.len());
        n
    }

    fn grads(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t, _| out.push(t.grad_tensor()));
        out
    }

    fn zero_grads(&mut self) {
        self.visit_mut("", &mut |_, t, _| t.zero_grad());
    }

    /// Overwrites values in visitation order, converting precision.
    fn assign<U: Real>(&mut self, src: &[Tensor<U>]) -> Result<()>
    where
        Self: Sized,
    {
        let mut i = 0;
        let mut err = None;
        self.visit_mut("", &mut |name, t, _| {
            if err.is_some() {
                return;
            }
            match src.get(i) {
                Some(s) if s.shape() == t.shape() => {
                    for (d, &v) in t.data_mut().iter_mut().zip(s.data()) {
                        *d = T::from_f64(v.as_f64());
                    }
                }
                Some(s) => err = Some(Error::shape("assign", t.shape(), s.shape())),
                None => err = Some(Error::Contract(format!("assign: no tensor for {name}"))),
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if i != src.len() {
            return Err(Error::Contract(format!(
                "assign: expected {i} tensors, got {}",
                src.len()
            )));
        }
        Ok(())
    }
}
