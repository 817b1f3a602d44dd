use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Value};

/// Layer-wise loss: the sum over layers of the mean absolute error on the
/// `loss_mask` positions.
///
/// `predictions` are per-layer `P × d` values, `truth` is `P·d` long and
/// only read where `loss_mask` is set. Returns `None` when the mask is empty
/// (nothing to supervise in this window).
pub fn spin_loss(tape: &mut Tape, predictions: &[Value], truth: &[f64], loss_mask: &[bool]) -> Result<Option<Value>> {
    let rows: Vec<usize> = (0..loss_mask.len()).filter(|&p| loss_mask[p]).collect();
    if rows.is_empty() {
        return Ok(None);
    }
    if predictions.is_empty() {
        return Err(Error::Invalid("loss needs at least one layer output".into()));
    }
    let d = tape.value(predictions[0])?.cols();
    if truth.len() != loss_mask.len() * d {
        return Err(Error::shape(
            "spin_loss",
            format!("truth has {} entries for {} positions x {d}", truth.len(), loss_mask.len()),
        ));
    }
    let mut target = Vec::with_capacity(rows.len() * d);
    for &p in &rows {
        target.extend_from_slice(&truth[p * d..(p + 1) * d]);
    }
    let target = tape.constant(Tensor::matrix(rows.len(), d, target)?)?;
    let rows = Rc::new(rows);
    let scale = 1.0 / (rows.len() * d) as f64;
    let mut total: Option<Value> = None;
    for &pred in predictions {
        let g = tape.gather_rows(pred, Rc::clone(&rows))?;
        let diff = tape.sub(g, target)?;
        let a = tape.abs(diff)?;
        let s = tape.sum(a)?;
        let term = tape.scale(s, scale)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total)
}
