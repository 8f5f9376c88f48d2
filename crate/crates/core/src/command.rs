//! Device identifiers and the on/off command carried inside a puzzle.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Device identifier such as `D7`.
///
/// Ordering is natural: the non-numeric prefix compares lexically and a
/// trailing run of digits compares numerically, so `D2 < D10`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(String);

impl DeviceId {
    pub fn new(id: impl Into<String>) -> Self {
        DeviceId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn split_numeric(&self) -> (&str, Option<u64>) {
        let digits = self.0.bytes().rev().take_while(u8::is_ascii_digit).count();
        let (prefix, suffix) = self.0.split_at(self.0.len() - digits);
        (prefix, suffix.parse().ok())
    }
}

impl Ord for DeviceId {
    fn cmp(&self, other: &Self) -> Ordering {
        let (pa, na) = self.split_numeric();
        let (pb, nb) = other.split_numeric();
        pa.cmp(pb).then(na.cmp(&nb)).then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for DeviceId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DeviceId {
    fn from(s: &str) -> Self {
        DeviceId::new(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwitchState {
    On,
    Off,
}

/// A single device command. `exec_time_us` is the requested solver delay
/// after the device forwards the token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Command {
    pub device_id: DeviceId,
    pub state: SwitchState,
    pub exec_time_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CommandDecodeError {
    #[error("command encoding truncated")]
    Truncated,
    #[error("unknown switch state byte {0:#04x}")]
    BadState(u8),
    #[error("device id is not valid UTF-8")]
    BadId,
}

impl Command {
    pub fn new(device_id: impl Into<DeviceId>, state: SwitchState, exec_time_us: u64) -> Self {
        Command {
            device_id: device_id.into(),
            state,
            exec_time_us,
        }
    }

    /// `[2-byte id len][id][1-byte state][8-byte exec time]`, big-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let id = self.device_id.as_str().as_bytes();
        let mut out = Vec::with_capacity(2 + id.len() + 9);
        out.extend_from_slice(&(id.len() as u16).to_be_bytes());
        out.extend_from_slice(id);
        out.push(match self.state {
            SwitchState::Off => 0,
            SwitchState::On => 1,
        });
        out.extend_from_slice(&self.exec_time_us.to_be_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CommandDecodeError> {
        let id_len = u16::from_be_bytes(
            bytes
                .get(..2)
                .ok_or(CommandDecodeError::Truncated)?
                .try_into()
                .unwrap(),
        ) as usize;
        if bytes.len() != 2 + id_len + 9 {
            return Err(CommandDecodeError::Truncated);
        }
        let id = std::str::from_utf8(&bytes[2..2 + id_len]).map_err(|_| CommandDecodeError::BadId)?;
        let state = match bytes[2 + id_len] {
            0 => SwitchState::Off,
            1 => SwitchState::On,
            other => return Err(CommandDecodeError::BadState(other)),
        };
        let exec_time_us = u64::from_be_bytes(bytes[3 + id_len..].try_into().unwrap());
        Ok(Command::new(DeviceId::new(id), state, exec_time_us))
    }
}

impl From<String> for DeviceId {
    fn from(s: String) -> Self {
        DeviceId(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn natural_ordering() {
        let mut ids: Vec<DeviceId> = ["D10", "D2", "D1", "A3", "D"].iter().map(|s| DeviceId::from(*s)).collect();
        ids.sort();
        let names: Vec<&str> = ids.iter().map(DeviceId::as_str).collect();
        assert_eq!(names, ["A3", "D", "D1", "D2", "D10"]);
    }

    #[test]
    fn command_bytes_round_trip() {
        let cmd = Command::new("D4", SwitchState::On, 1_500_000);
        let bytes = cmd.to_bytes();
        assert_eq!(bytes.len(), 2 + 2 + 1 + 8);
        assert_eq!(Command::from_bytes(&bytes).unwrap(), cmd);
        assert_eq!(Command::from_bytes(&bytes[..5]), Err(CommandDecodeError::Truncated));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(Command::from_bytes(&bad), Err(CommandDecodeError::BadState(9)));
    }
}
