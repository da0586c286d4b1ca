use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable tensor. Rows listed in `frozen_rows` never receive
/// gradient (used for the PAD rows of embedding tables).
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub frozen_rows: Vec<usize>,
}

/// Owns every learnable tensor of a model, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.register_frozen_rows(name, tensor, Vec::new())
    }

    pub fn register_frozen_rows(
        &mut self,
        name: impl Into<String>,
        mut tensor: Tensor,
        frozen_rows: Vec<usize>,
    ) -> ParamId {
        tensor.requires_grad = true;
        tensor.grad = Some(vec![0.0; tensor.numel()]);
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            tensor,
            frozen_rows,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Adds `grad` into the parameter's gradient buffer, skipping frozen rows.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) -> Result<()> {
        let param = &mut self.params[id.0];
        if grad.len() != param.tensor.numel() {
            return Err(Error::dim(
                "accumulate_grad",
                param.tensor.shape(),
                &[grad.len()],
            ));
        }
        let cols = *param.tensor.shape().last().unwrap_or(&1);
        let buf = param
            .tensor
            .grad
            .get_or_insert_with(|| vec![0.0; grad.len()]);
        for (b, g) in buf.iter_mut().zip(grad) {
            *b += g;
        }
        for &row in &param.frozen_rows {
            buf[row * cols..(row + 1) * cols]
                .iter_mut()
                .for_each(|x| *x = 0.0);
        }
        Ok(())
    }

    /// True when every parameter value is finite.
    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.tensor.data().iter().all(|x| x.is_finite()))
    }
}
