use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Plain SGD: `p ← p − lr·∇p`, then the gradient is zeroed.
///
/// Every parameter must carry a gradient; the check runs before any update so
/// a failure leaves all parameters untouched.
pub fn sgd_step<'a, F, I>(params: I, lr: F) -> Result<()>
where
    F: Scalar,
    I: IntoIterator<Item = &'a mut Tensor<F>>,
{
    let params: Vec<&mut Tensor<F>> = params.into_iter().collect();
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::Usage(format!(
            "sgd_step: parameter #{i} ({}) has no gradient",
            params[i].shape()
        )));
    }
    for p in params {
        p.descend(lr);
    }
    Ok(())
}
