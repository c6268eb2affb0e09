// SPDX-License-Identifier: Apache-2.0

//! Training objectives as graph operations.

use kinaema_tensor::{Graph, Result, Scalar, Tensor, TensorError, Var};

/// Mean over queries of the summed absolute error on the five pose numbers.
/// `pred` is `[Q, 5]` and `target` has `5·Q` entries.
pub fn loss_rpe<T: Scalar>(g: &mut Graph<'_, T>, pred: Var, target: &[f32]) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    if shape.len() != 2 || shape[1] != 5 || target.len() != shape[0] * 5 || shape[0] == 0 {
        return Err(TensorError::shape("loss_rpe", &shape, &[target.len() / 5, 5]));
    }
    let t = g.input(Tensor::new(
        shape.clone(),
        target.iter().map(|&v| T::of(v as f64)).collect(),
    )?);
    let d = g.sub(pred, t)?;
    let a = g.abs(d);
    let s = g.sum(a);
    Ok(g.scale(s, 1.0 / shape[0] as f64))
}

/// Mean squared error over the rows of `recon` flagged in `mask`.
pub fn loss_mim<T: Scalar>(g: &mut Graph<'_, T>, recon: Var, target: Var, mask: &[bool]) -> Result<Var> {
    if g.shape(recon) != g.shape(target) || g.value(recon).rows() != mask.len() {
        return Err(TensorError::shape("loss_mim", g.shape(recon), g.shape(target)));
    }
    let rows: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if rows.is_empty() {
        return Err(TensorError::Config(
            "masked modeling needs at least one masked chunk".into(),
        ));
    }
    let r = g.gather_rows(recon, &rows)?;
    let t = g.gather_rows(target, &rows)?;
    let d = g.sub(r, t)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}
