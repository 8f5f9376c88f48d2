use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ExecutionLog, NetsimError};
use crate::command::DeviceId;
use crate::schedule::Schedule;
use crate::timelock::Trapdoor;

/// What the owner keeps about one issued order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OwnerOrder {
    pub order_id: usize,
    pub ring_id: String,
    pub issued_at_us: u64,
    pub schedule: Schedule,
    pub t_hats: BTreeMap<DeviceId, u64>,
    pub delays_us: BTreeMap<DeviceId, u64>,
}

/// Owner-side secrets and records needed to audit a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OwnerState {
    pub trapdoor: Trapdoor,
    pub orders: Vec<OwnerOrder>,
}

/// Accepts iff every scheduled device reported the solution the trapdoor
/// predicts for its `t_hat`, and every adjacent pair of each chain executed
/// in order.
///
/// A missing delivery or execution record is an error rather than a
/// rejection.
pub fn verify_run(owner: &OwnerState, log: &ExecutionLog) -> Result<bool, NetsimError> {
    for order in &owner.orders {
        let delivery = log
            .deliveries
            .iter()
            .find(|d| d.order_id == order.order_id)
            .ok_or_else(|| NetsimError::Incomplete(format!("order {} was never delivered", order.order_id)))?;
        let mut t_com = BTreeMap::new();
        for cmd in order.schedule.commands() {
            let record = log
                .records
                .iter()
                .find(|r| r.token_id == delivery.token_id && r.device == cmd.device_id)
                .ok_or_else(|| {
                    NetsimError::Incomplete(format!(
                        "no execution record for {} in order {}",
                        cmd.device_id, order.order_id
                    ))
                })?;
            let t_hat = order.t_hats.get(&cmd.device_id).ok_or_else(|| {
                NetsimError::Incomplete(format!("owner has no t_hat for {}", cmd.device_id))
            })?;
            if record.solution != owner.trapdoor.fast_eval(*t_hat) {
                return Ok(false);
            }
            t_com.insert(&cmd.device_id, record.t_com_us);
        }
        for chain in &order.schedule.chains {
            for pair in chain.windows(2) {
                if t_com[&pair[0].device_id] > t_com[&pair[1].device_id] {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}
