//! Server ledgers and the hash-linked block chain.
//!
//! # Canonical block serialization
//!
//! The SHA-256 digest of a block covers, in order, all big-endian:
//!
//! | field          | encoding                  |
//! |----------------|---------------------------|
//! | index          | u64                       |
//! | prev_hash      | 32 raw bytes              |
//! | timestamp      | u64 (logical round)       |
//! | term           | u64                       |
//! | entry count    | u64                       |
//! | per entry      | epoch u64, batch u64, pair_id u64, mi_upper f64 bits, mi_lower f64 bits, timestamp u64 |
//!
//! Reals are hashed as their IEEE-754 bit patterns, so `-0.0` and `0.0`
//! differ and NaN payloads are covered.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consensus::Role;
use crate::{Error, Result};

/// One batch's MI record as kept by a server.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub epoch: u64,
    pub batch: u64,
    pub pair_id: u64,
    pub mi_upper_bits: f64,
    pub mi_lower_bits: f64,
    /// Logical round counter.
    pub timestamp: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Digest32(pub [u8; 32]);

impl Digest32 {
    pub const ZERO: Digest32 = Digest32([0; 32]);

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest32({})", self.to_hex())
    }
}

impl fmt::Display for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest32 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Block {
    pub index: u64,
    pub prev_hash: Digest32,
    pub timestamp: u64,
    pub term: u64,
    pub entries: Vec<LedgerEntry>,
    pub hash: Digest32,
}

pub fn canonical_bytes(
    index: u64,
    prev_hash: &Digest32,
    timestamp: u64,
    term: u64,
    entries: &[LedgerEntry],
) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 * 4 + 32 + entries.len() * 48);
    buf.extend_from_slice(&index.to_be_bytes());
    buf.extend_from_slice(&prev_hash.0);
    buf.extend_from_slice(&timestamp.to_be_bytes());
    buf.extend_from_slice(&term.to_be_bytes());
    buf.extend_from_slice(&(entries.len() as u64).to_be_bytes());
    for e in entries {
        buf.extend_from_slice(&e.epoch.to_be_bytes());
        buf.extend_from_slice(&e.batch.to_be_bytes());
        buf.extend_from_slice(&e.pair_id.to_be_bytes());
        buf.extend_from_slice(&e.mi_upper_bits.to_bits().to_be_bytes());
        buf.extend_from_slice(&e.mi_lower_bits.to_bits().to_be_bytes());
        buf.extend_from_slice(&e.timestamp.to_be_bytes());
    }
    buf
}

pub fn hash_block(
    index: u64,
    prev_hash: &Digest32,
    timestamp: u64,
    term: u64,
    entries: &[LedgerEntry],
) -> Digest32 {
    let digest = Sha256::digest(canonical_bytes(index, prev_hash, timestamp, term, entries));
    Digest32(digest.into())
}

impl Block {
    pub fn new(
        index: u64,
        prev_hash: Digest32,
        timestamp: u64,
        term: u64,
        entries: Vec<LedgerEntry>,
    ) -> Self {
        let hash = hash_block(index, &prev_hash, timestamp, term, &entries);
        Self {
            index,
            prev_hash,
            timestamp,
            term,
            entries,
            hash,
        }
    }

    pub fn recompute_hash(&self) -> Digest32 {
        hash_block(
            self.index,
            &self.prev_hash,
            self.timestamp,
            self.term,
            &self.entries,
        )
    }
}

/// Append-only sequence of blocks. Blocks are shared between server copies.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Chain {
    blocks: Vec<Arc<Block>>,
}

impl Chain {
    pub fn new() -> Self {
        Self::default()
    }

    /// A chain holding only the genesis block.
    pub fn with_genesis(term: u64, round: u64) -> Self {
        Self {
            blocks: vec![Arc::new(Block::new(
                0,
                Digest32::ZERO,
                round,
                term,
                Vec::new(),
            ))],
        }
    }

    pub fn height(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[Arc<Block>] {
        &self.blocks
    }

    pub fn tip(&self) -> Option<&Block> {
        self.blocks.last().map(|b| b.as_ref())
    }

    pub fn tip_hash(&self) -> Option<Digest32> {
        self.tip().map(|b| b.hash)
    }

    /// Links a new block holding `entries` to the tip. Only a leader may do so.
    pub fn append(
        &mut self,
        caller: Role,
        entries: Vec<LedgerEntry>,
        term: u64,
        round: u64,
    ) -> Result<&Block> {
        if caller != Role::Leader {
            return Err(Error::Unauthorized {
                caller: format!("{caller:?}"),
                action: "append a block",
            });
        }
        if entries.is_empty() {
            return Err(Error::config("a block needs at least one ledger entry"));
        }
        let tip = self
            .tip()
            .ok_or_else(|| Error::config("chain has no genesis block"))?;
        let block = Block::new(tip.index + 1, tip.hash, round, term, entries);
        self.blocks.push(Arc::new(block));
        Ok(self.blocks.last().expect("just pushed"))
    }

    /// Brings this copy up to `source`, reusing shared blocks.
    pub fn sync_from(&mut self, source: &Chain) {
        let h = self.height();
        if h <= source.height() && (h == 0 || self.blocks[h - 1].hash == source.blocks[h - 1].hash)
        {
            self.blocks.extend(source.blocks[h..].iter().cloned());
            return;
        }
        let common = self
            .blocks
            .iter()
            .zip(&source.blocks)
            .take_while(|(a, b)| Arc::ptr_eq(a, b) || a.hash == b.hash)
            .count();
        self.blocks.truncate(common);
        self.blocks.extend(source.blocks[common..].iter().cloned());
    }

    /// Replaces the block at `height`; for tamper simulations.
    pub fn replace_block(&mut self, height: usize, block: Block) {
        self.blocks[height] = Arc::new(block);
    }

    pub fn block_mut(&mut self, height: usize) -> &mut Block {
        Arc::make_mut(&mut self.blocks[height])
    }

    pub fn entries(&self) -> impl Iterator<Item = &LedgerEntry> {
        self.blocks.iter().flat_map(|b| b.entries.iter())
    }

    /// One JSON record per block.
    pub fn export<W: Write>(&self, mut out: W) -> Result<()> {
        for b in &self.blocks {
            serde_json::to_writer(&mut out, b.as_ref())?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Checks every hash and link; on failure returns the lowest bad height.
pub fn validate_chain(chain: &Chain) -> std::result::Result<(), u64> {
    let mut prev: Option<&Block> = None;
    for (height, block) in chain.blocks.iter().enumerate() {
        let h = height as u64;
        let linked = match prev {
            None => block.prev_hash == Digest32::ZERO,
            Some(p) => block.prev_hash == p.hash,
        };
        if block.index != h || !linked || block.recompute_hash() != block.hash {
            return Err(h);
        }
        prev = Some(block);
    }
    Ok(())
}

/// Picks the chain version held by a strict majority of `copies`.
///
/// Copies that fail validation never count. Returns `None` when no version
/// reaches a strict majority.
pub fn reconcile_majority(copies: &[&Chain]) -> Option<Chain> {
    let mut votes: HashMap<(usize, Option<Digest32>), (usize, usize)> = HashMap::new();
    for (i, c) in copies.iter().enumerate() {
        if validate_chain(c).is_ok() {
            votes.entry((c.height(), c.tip_hash())).or_insert((0, i)).0 += 1;
        }
    }
    let mut best: Option<(usize, usize)> = None;
    for &(count, idx) in votes.values() {
        if best.map_or(true, |(c, i)| count > c || (count == c && idx < i)) {
            best = Some((count, idx));
        }
    }
    best.filter(|&(count, _)| 2 * count > copies.len())
        .map(|(_, idx)| copies[idx].clone())
}
