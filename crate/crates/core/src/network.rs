use crate::error::Result;
use crate::registry::{Bound, ParameterRegistry};
use crate::tensor::{Tape, Tensor, Var};

/// A classifier whose parameters live in a registry.
pub trait Network {
    fn registry(&self) -> &ParameterRegistry;

    fn registry_mut(&mut self) -> &mut ParameterRegistry;

    fn num_classes(&self) -> usize;

    /// Logits `[batch, classes]` for a batch of inputs, using the parameter
    /// leaves in `params`.
    fn forward<'t>(&self, tape: &'t Tape, params: &Bound<'t>, inputs: &Tensor) -> Result<Var<'t>>;

    /// Untracked forward pass.
    fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        let tape = Tape::inference();
        let params = self.registry().bind(&tape);
        Ok(self.forward(&tape, &params, inputs)?.value())
    }
}
