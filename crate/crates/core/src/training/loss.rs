use super::config::PcLoss;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensorcore::{Tape, Tensor, Var};

/// Mean-reduced distance between predicted and target center embeddings.
/// The target should already be detached where that is wanted.
pub fn loss_pc<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var, mode: PcLoss) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape(
            "loss_pc",
            tape.shape(pred),
            tape.shape(target),
        ));
    }
    Ok(match mode {
        PcLoss::L2 => {
            let r = tape.sub(pred, target)?;
            let r = tape.square(r);
            tape.mean(r)
        }
        PcLoss::L1 => {
            let r = tape.sub(pred, target)?;
            let r = tape.abs(r);
            tape.mean(r)
        }
        PcLoss::SmoothL1 => {
            let r = tape.sub(pred, target)?;
            let r = tape.smooth_l1(r);
            tape.mean(r)
        }
        PcLoss::Cosine => {
            let c = tape.cosine_rows(pred, target)?;
            let c = tape.mean(c);
            let one = tape.constant(Tensor::scalar(T::one()));
            tape.sub(one, c)?
        }
    })
}

/// Chamfer distance per predicted patch `[P, k, 3]`, averaged over patches.
pub fn loss_recon<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    if tape.shape(pred) != target.shape() {
        return Err(Error::shape("loss_recon", tape.shape(pred), target.shape()));
    }
    tape.chamfer(pred, target)
}

/// `eta * loss_pc + loss_recon`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    loss_pc: Var,
    loss_recon: Var,
    eta: f64,
) -> Result<Var> {
    let pc = tape.scale(loss_pc, T::lit(eta));
    tape.add(pc, loss_recon)
}
