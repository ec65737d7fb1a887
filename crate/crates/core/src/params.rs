use crate::numerics::{Gradients, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Records which tape leaf holds which named parameter during a forward
/// pass, so gradients can be routed back by name.
#[derive(Debug)]
pub struct Bindings {
    trainable: bool,
    preset: Vec<(String, Var)>,
    vars: Vec<(String, Var)>,
}

impl Bindings {
    /// Parameters become gradient-carrying leaves.
    pub fn trainable() -> Self {
        Self {
            trainable: true,
            preset: Vec::new(),
            vars: Vec::new(),
        }
    }

    /// Parameters become constants.
    pub fn frozen() -> Self {
        Self {
            trainable: false,
            preset: Vec::new(),
            vars: Vec::new(),
        }
    }

    /// Named parameters resolve to the given existing nodes; any other
    /// parameter becomes a constant.
    pub fn with_leaves(leaves: Vec<(String, Var)>) -> Self {
        Self {
            trainable: false,
            preset: leaves,
            vars: Vec::new(),
        }
    }

    pub fn bind<S: Scalar>(&mut self, tape: &mut Tape<S>, name: impl Into<String>, value: &Tensor<S>) -> Var {
        let name = name.into();
        let var = if let Some((_, v)) = self.preset.iter().find(|(n, _)| *n == name) {
            *v
        } else if self.trainable {
            tape.param(value.clone())
        } else {
            tape.constant(value.clone())
        };
        self.vars.push((name, var));
        var
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    pub fn names(&self) -> Vec<&str> {
        self.vars.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Moves each bound parameter's gradient out of `grads`, keyed by name.
    pub fn collect<S: Scalar>(&self, grads: &mut Gradients<S>) -> Vec<(String, Tensor<S>)> {
        self.vars
            .iter()
            .filter_map(|(n, v)| grads.take(*v).map(|g| (n.clone(), g)))
            .collect()
    }
}
