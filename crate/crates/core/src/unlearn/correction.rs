//! Newton-style corrective steps.

use nalgebra::{DMatrix, DVector};

use crate::data::Samples;
use crate::dpsgd::ClientState;
use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::models::LossModel;

/// `(1/(n-m)) H^-1 sum_{deleted} grad F(x_c)`, with `H` the client's retained statistic.
pub fn newton_correction_samples<S: Samples + ?Sized>(
    client: &ClientState,
    deleted: &[usize],
    data: &S,
    model: &LossModel,
) -> Result<DVector<f64>> {
    let d = model.dim();
    if deleted.is_empty() {
        return Ok(DVector::zeros(d));
    }
    let stat = client.statistic.as_ref().ok_or(Error::MissingStatistics(client.id))?;
    let retained = client.shard.len().saturating_sub(deleted.len());
    if retained == 0 {
        return Err(Error::EmptyRetained { client: client.id });
    }
    if stat.samples() != retained {
        return Err(Error::Protocol(format!(
            "client {} statistic covers {} rows but {} are retained; recollect statistics",
            client.id,
            stat.samples(),
            retained
        )));
    }
    let mut b = DVector::zeros(d);
    for &i in deleted {
        model.add_grad(client.model.as_slice(), data.features(i), data.label(i), 1.0, true, b.as_mut_slice());
    }
    Ok(stat.solve(&b)? / retained as f64)
}

/// `(1/(N-1)) H^-1 grad f_c(x_c)` with `H` the mean statistic of the other clients.
pub fn newton_correction_client<S: Samples + ?Sized>(
    clients: &[ClientState],
    leaving: usize,
    data: &S,
    model: &LossModel,
) -> Result<DVector<f64>> {
    let n = clients.len();
    if n < 2 {
        return Err(invalid("client removal needs at least two clients"));
    }
    let pos = clients
        .iter()
        .position(|c| c.id == leaving)
        .ok_or_else(|| invalid(format!("unknown client {leaving}")))?;
    let d = model.dim();
    let mut sum = DMatrix::zeros(d, d);
    for (k, c) in clients.iter().enumerate() {
        if k != pos {
            sum += c.statistic.as_ref().ok_or(Error::MissingStatistics(c.id))?.dense();
        }
    }
    let others = (n - 1) as f64;
    let hessian = sum / others;
    let leaver = &clients[pos];
    let grad = model.mean_grad(&leaver.model, data, &leaver.shard);
    Ok(linalg::spd_solve(&hessian, &grad)? / others)
}
