use crate::config::ScheduleKind;
use crate::error::{Error, Result};

/// Epochs of the full table that a compressed run spans.
pub const COMPRESSED_SPAN: usize = 80;

/// Warm-up then step decay, by 1-based epoch. Past epoch 140 the last rate
/// is held.
pub fn lr_schedule(epoch: usize) -> Result<f64> {
    Ok(match epoch {
        0 => return Err(Error::Input("epochs are numbered from 1".into())),
        1..=10 => epoch as f64 * 0.1 / 10.0,
        11..=55 => 0.1,
        56..=80 => 0.01,
        81..=100 => 0.001,
        101..=120 => 0.0001,
        _ => 0.00001,
    })
}

/// Table epoch used at `epoch` of a `total`-epoch compressed run:
/// `ceil(epoch · 80 / total)`, so the warm-up covers the first eighth.
pub fn compressed_epoch(epoch: usize, total: usize) -> Result<usize> {
    if epoch == 0 || total == 0 || epoch > total {
        return Err(Error::Input(format!("epoch {epoch} outside 1..={total}")));
    }
    Ok((epoch * COMPRESSED_SPAN).div_ceil(total))
}

pub fn learning_rate(kind: ScheduleKind, epoch: usize, total: usize) -> Result<f64> {
    match kind {
        ScheduleKind::Full => lr_schedule(epoch),
        ScheduleKind::Compressed => lr_schedule(compressed_epoch(epoch, total)?),
    }
}
