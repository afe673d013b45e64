use crate::error::{Error, Result};
use crate::model::AuModel;
use crate::tensor::{Element, Tensor};

/// Uniform mean of the members' probabilities for one clip `[T, 3, H, W]`, giving `[T, 12]`.
///
/// Each entry is summed in sorted order, so the result does not depend on member
/// order, and `k` identical members reproduce the single-model output exactly.
pub fn ensemble_predict<F: Element>(models: &[&AuModel<F>], clip: &Tensor<F>) -> Result<Tensor<F>> {
    if models.is_empty() {
        return Err(Error::usage("ensemble needs at least one model"));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(clip.shape());
    let batch = clip.reshaped(&shape)?;
    let outputs = models.iter().map(|m| m.predict_proba(&batch)).collect::<Result<Vec<_>>>()?;
    let out_shape = outputs[0].shape()[1..].to_vec();
    if let Some(o) = outputs.iter().find(|o| o.shape() != outputs[0].shape()) {
        return Err(Error::dim(format!("member outputs differ: {:?} vs {:?}", o.shape(), outputs[0].shape())));
    }
    let k = outputs.len() as f64;
    let mut column = vec![0.0f64; outputs.len()];
    let data = (0..outputs[0].numel())
        .map(|i| {
            for (c, o) in column.iter_mut().zip(&outputs) {
                *c = o.data()[i].as_f64();
            }
            column.sort_by(f64::total_cmp);
            // min + mean of offsets: exactly min when all members agree.
            let min = column[0];
            let offset: f64 = column.iter().map(|c| c - min).sum();
            F::lit(min + offset / k)
        })
        .collect();
    Tensor::new(out_shape, data)
}
