//! The circulating token: command field, data field and toggle bits, sealed
//! under the ring key. Its serialized length depends only on the ring
//! configuration.

use std::collections::HashMap;
use std::fmt;

use rand::RngCore;

use crate::crypto::{self, SymmetricKey, NONCE_LEN, TAG_LEN};
use crate::schedule::{OrderedCommands, ScheduleError};

/// Framing around `c_l` inside the command field: length prefix and a
/// truncated SHA-256 check value.
const COMMAND_FRAME_OVERHEAD: usize = 4 + 8;
/// Length prefix inside an uploaded sub-field.
pub const PAYLOAD_PREFIX: usize = 4;

pub type RingKey = SymmetricKey;

#[derive(Debug, thiserror::Error)]
pub enum TokenError {
    #[error("token failed authentication")]
    Tamper,
    #[error("capacity exceeded: need {needed} bytes, have {available}")]
    Capacity { needed: usize, available: usize },
    #[error("toggle index {index} out of range for {len} devices")]
    Index { index: usize, len: usize },
    #[error("device {0} holds no sub-field in this round")]
    NotGranted(usize),
    #[error("no pad recorded for round {round:#x} sub-field {sub_field}")]
    Ledger { round: u64, sub_field: usize },
    #[error("recovered length prefix {0} does not fit the sub-field")]
    Framing(usize),
    #[error("malformed token: {0}")]
    Decode(&'static str),
    #[error(transparent)]
    Order(#[from] ScheduleError),
}

/// Field capacities for one ring. Fixes the token's byte length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub command_capacity: usize,
    pub data_capacity: usize,
    pub device_count: u16,
}

impl TokenLayout {
    pub fn plaintext_len(&self) -> usize {
        8 + 4 + 4 + self.command_capacity + 4 + self.data_capacity + 2 + toggle_bytes(self.device_count)
    }

    pub fn sealed_len(&self) -> usize {
        NONCE_LEN + self.plaintext_len() + TAG_LEN
    }
}

fn toggle_bytes(len: u16) -> usize {
    (len as usize).div_ceil(8)
}

/// `N` request bits; bit `i` is bit `7 - i % 8` of byte `i / 8`.
#[derive(Clone, PartialEq, Eq)]
pub struct ToggleBits {
    len: u16,
    bytes: Vec<u8>,
}

impl ToggleBits {
    pub fn zeros(len: u16) -> Self {
        ToggleBits {
            len,
            bytes: vec![0; toggle_bytes(len)],
        }
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn check(&self, index: usize) -> Result<(), TokenError> {
        if index >= self.len() {
            return Err(TokenError::Index { index, len: self.len() });
        }
        Ok(())
    }

    pub fn get(&self, index: usize) -> Result<bool, TokenError> {
        self.check(index)?;
        Ok(self.bytes[index / 8] & (0x80 >> (index % 8)) != 0)
    }

    pub fn flip(&mut self, index: usize) -> Result<(), TokenError> {
        self.check(index)?;
        self.bytes[index / 8] ^= 0x80 >> (index % 8);
        Ok(())
    }

    pub fn set_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.get(i).unwrap_or(false)).collect()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }
}

impl fmt::Debug for ToggleBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ToggleBits({self})")
    }
}

impl fmt::Display for ToggleBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len() {
            f.write_str(if self.get(i).unwrap_or(false) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub token_id: u64,
    /// Remaining device visits before the token returns to the hub.
    pub counter: u32,
    pub command_field: Vec<u8>,
    pub data_field: Vec<u8>,
    pub toggle_bits: ToggleBits,
}

impl Token {
    /// A token with random command and data fields and clear toggle bits.
    pub fn fresh<R: RngCore + ?Sized>(layout: &TokenLayout, token_id: u64, counter: u32, rng: &mut R) -> Self {
        let mut command_field = vec![0u8; layout.command_capacity];
        let mut data_field = vec![0u8; layout.data_capacity];
        rng.fill_bytes(&mut command_field);
        rng.fill_bytes(&mut data_field);
        Token {
            token_id,
            counter,
            command_field,
            data_field,
            toggle_bits: ToggleBits::zeros(layout.device_count),
        }
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout {
            command_capacity: self.command_field.len(),
            data_capacity: self.data_field.len(),
            device_count: self.toggle_bits.len,
        }
    }

    /// `[8 id][4 counter][4 C][C command][4 D][D data][2 N][ceil(N/8) toggles]`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.layout().plaintext_len());
        out.extend_from_slice(&self.token_id.to_be_bytes());
        out.extend_from_slice(&self.counter.to_be_bytes());
        out.extend_from_slice(&(self.command_field.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.command_field);
        out.extend_from_slice(&(self.data_field.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.data_field);
        out.extend_from_slice(&self.toggle_bits.len.to_be_bytes());
        out.extend_from_slice(&self.toggle_bits.bytes);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TokenError> {
        let mut rest = bytes;
        let mut take = |len: usize| -> Result<&[u8], TokenError> {
            if rest.len() < len {
                return Err(TokenError::Decode("truncated"));
            }
            let (head, tail) = rest.split_at(len);
            rest = tail;
            Ok(head)
        };
        let token_id = u64::from_be_bytes(take(8)?.try_into().unwrap());
        let counter = u32::from_be_bytes(take(4)?.try_into().unwrap());
        let c_len = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;
        let command_field = take(c_len)?.to_vec();
        let d_len = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;
        let data_field = take(d_len)?.to_vec();
        let n = u16::from_be_bytes(take(2)?.try_into().unwrap());
        let toggles = take(toggle_bytes(n))?.to_vec();
        if !rest.is_empty() {
            return Err(TokenError::Decode("trailing bytes"));
        }
        Ok(Token {
            token_id,
            counter,
            command_field,
            data_field,
            toggle_bits: ToggleBits { len: n, bytes: toggles },
        })
    }

    /// The `c_l` carried this round, if the command field holds a valid frame.
    pub fn commands(&self) -> Option<OrderedCommands> {
        let field = &self.command_field;
        let len = u32::from_be_bytes(field.get(..4)?.try_into().ok()?) as usize;
        let body = field.get(4..4 + len)?;
        let check = field.get(4 + len..4 + len + 8)?;
        if crypto::sha256(&[body])[..8] != *check {
            return None;
        }
        OrderedCommands::from_bytes(body).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedToken {
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl SealedToken {
    /// `[12 nonce][ciphertext][16 tag]`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TokenError> {
        if bytes.len() < NONCE_LEN + TAG_LEN {
            return Err(TokenError::Decode("sealed token too short"));
        }
        let (nonce, rest) = bytes.split_at(NONCE_LEN);
        let (ciphertext, tag) = rest.split_at(rest.len() - TAG_LEN);
        Ok(SealedToken {
            nonce: nonce.try_into().unwrap(),
            ciphertext: ciphertext.to_vec(),
            tag: tag.try_into().unwrap(),
        })
    }

    pub fn len(&self) -> usize {
        NONCE_LEN + self.ciphertext.len() + TAG_LEN
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn seal<R: RngCore + ?Sized>(token: &Token, key: &RingKey, rng: &mut R) -> SealedToken {
    let nonce = crypto::random_nonce(rng);
    let mut ciphertext = token.to_bytes();
    let tag = crypto::seal_detached(key, &nonce, &mut ciphertext);
    SealedToken { nonce, ciphertext, tag }
}

pub fn open(sealed: &SealedToken, key: &RingKey) -> Result<Token, TokenError> {
    let mut plaintext = sealed.ciphertext.clone();
    crypto::open_detached(key, &sealed.nonce, &mut plaintext, &sealed.tag).map_err(|_| TokenError::Tamper)?;
    Token::from_bytes(&plaintext)
}

/// Writes `c_l` (framed) followed by fresh random filler. An absent or empty
/// `c_l` leaves the whole field random.
pub fn load_commands<R: RngCore + ?Sized>(
    token: &Token,
    commands: Option<&OrderedCommands>,
    rng: &mut R,
) -> Result<Token, TokenError> {
    let mut out = token.clone();
    rng.fill_bytes(&mut out.command_field);
    let Some(commands) = commands.filter(|c| !c.is_empty()) else {
        return Ok(out);
    };
    let body = commands.to_bytes();
    let needed = body.len() + COMMAND_FRAME_OVERHEAD;
    if needed > out.command_field.len() {
        return Err(TokenError::Capacity {
            needed,
            available: out.command_field.len(),
        });
    }
    out.command_field[..4].copy_from_slice(&(body.len() as u32).to_be_bytes());
    out.command_field[4..4 + body.len()].copy_from_slice(&body);
    out.command_field[4 + body.len()..needed].copy_from_slice(&crypto::sha256(&[&body])[..8]);
    Ok(out)
}

/// Bytes of command-field capacity consumed by `commands`.
pub fn command_frame_len(commands: &OrderedCommands) -> usize {
    commands.to_bytes().len() + COMMAND_FRAME_OVERHEAD
}

pub fn toggle_request(token: &Token, device_index: usize) -> Result<Token, TokenError> {
    let mut out = token.clone();
    out.toggle_bits.flip(device_index)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubField {
    pub device_index: usize,
    pub offset: usize,
    pub size: usize,
}

/// Placement of per-device sub-fields inside the data field. Space after the
/// last sub-field is random filler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataLayout {
    pub capacity: usize,
    pub sub_fields: Vec<SubField>,
}

impl DataLayout {
    pub fn slot_of(&self, device_index: usize) -> Option<(usize, SubField)> {
        self.sub_fields
            .iter()
            .copied()
            .enumerate()
            .find(|(_, f)| f.device_index == device_index)
    }

    pub fn filler_len(&self) -> usize {
        self.capacity - self.sub_fields.iter().map(|f| f.size).sum::<usize>()
    }
}

/// Result of [`partition_data_field`]. A non-empty `deferred` list is the
/// collision case: those devices wait for the next round, in request order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub layout: DataLayout,
    pub deferred: Vec<usize>,
}

/// Lays out `(device_index, size)` requests first-come first-served.
pub fn partition_data_field(capacity: usize, requests: &[(usize, usize)]) -> Partition {
    let mut sub_fields = Vec::new();
    let mut deferred = Vec::new();
    let mut offset = 0;
    for &(device_index, size) in requests {
        if offset + size <= capacity && deferred.is_empty() {
            sub_fields.push(SubField {
                device_index,
                offset,
                size,
            });
            offset += size;
        } else {
            deferred.push(device_index);
        }
    }
    Partition {
        layout: DataLayout { capacity, sub_fields },
        deferred,
    }
}

/// Largest payload a sub-field of `size` bytes can carry.
pub fn max_payload(size: usize) -> usize {
    size.saturating_sub(PAYLOAD_PREFIX)
}

/// XORs `[4 len][payload][random pad]` into the device's sub-field.
pub fn overwrite_data<R: RngCore + ?Sized>(
    token: &Token,
    layout: &DataLayout,
    device_index: usize,
    payload: &[u8],
    rng: &mut R,
) -> Result<Token, TokenError> {
    let (_, field) = layout
        .slot_of(device_index)
        .ok_or(TokenError::NotGranted(device_index))?;
    if payload.len() > max_payload(field.size) {
        return Err(TokenError::Capacity {
            needed: payload.len() + PAYLOAD_PREFIX,
            available: field.size,
        });
    }
    let mut framed = vec![0u8; field.size];
    framed[..PAYLOAD_PREFIX].copy_from_slice(&(payload.len() as u32).to_be_bytes());
    framed[PAYLOAD_PREFIX..PAYLOAD_PREFIX + payload.len()].copy_from_slice(payload);
    rng.fill_bytes(&mut framed[PAYLOAD_PREFIX + payload.len()..]);
    let mut out = token.clone();
    for (dst, src) in out.data_field[field.offset..field.offset + field.size].iter_mut().zip(&framed) {
        *dst ^= src;
    }
    Ok(out)
}

/// Hub-side record of the random pads written into each sub-field.
#[derive(Debug, Default, Clone)]
pub struct PadLedger {
    pads: HashMap<(u64, usize), Vec<u8>>,
}

impl PadLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Refills the data field with fresh random bytes and remembers the pad
    /// of every sub-field under the token's round id.
    pub fn refill<R: RngCore + ?Sized>(&mut self, token: &Token, layout: &DataLayout, rng: &mut R) -> Token {
        let mut out = token.clone();
        rng.fill_bytes(&mut out.data_field);
        for (index, field) in layout.sub_fields.iter().enumerate() {
            self.pads.insert(
                (out.token_id, index),
                out.data_field[field.offset..field.offset + field.size].to_vec(),
            );
        }
        out
    }

    /// Drops every pad still held for `round`.
    pub fn discard_round(&mut self, round: u64) {
        self.pads.retain(|(r, _), _| *r != round);
    }

    pub fn len(&self) -> usize {
        self.pads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pads.is_empty()
    }
}

/// Unmasks sub-field `sub_field` of the layout and strips the framing. The
/// ledger entry is consumed.
pub fn recover_data(
    ledger: &mut PadLedger,
    token: &Token,
    layout: &DataLayout,
    sub_field: usize,
) -> Result<Vec<u8>, TokenError> {
    let key = (token.token_id, sub_field);
    let pad = ledger.pads.get(&key).ok_or(TokenError::Ledger {
        round: token.token_id,
        sub_field,
    })?;
    let field = layout.sub_fields.get(sub_field).ok_or(TokenError::Ledger {
        round: token.token_id,
        sub_field,
    })?;
    let unmasked: Vec<u8> = token.data_field[field.offset..field.offset + field.size]
        .iter()
        .zip(pad)
        .map(|(a, b)| a ^ b)
        .collect();
    ledger.pads.remove(&key);
    if unmasked.len() < PAYLOAD_PREFIX {
        return Err(TokenError::Framing(0));
    }
    let len = u32::from_be_bytes(unmasked[..PAYLOAD_PREFIX].try_into().unwrap()) as usize;
    if len > max_payload(field.size) {
        return Err(TokenError::Framing(len));
    }
    Ok(unmasked[PAYLOAD_PREFIX..PAYLOAD_PREFIX + len].to_vec())
}
