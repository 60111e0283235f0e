//! Raft-lite consensus among the servers.
//!
//! Every alive server stands as a candidate in an election and casts one
//! uniformly random vote (self-votes allowed). The plurality winner leads,
//! with ties going to the lowest id. The leader heartbeats every
//! `heartbeat_interval` rounds; followers that miss `missed_heartbeat_threshold`
//! heartbeats force a new election, as does expiry of the term timer.
//! After each training round the leader collects follower ledgers and
//! commits a block only if at least `floor(F/2) + 1` of its `F` followers
//! responded; otherwise the round is aborted and its entries are discarded.

use std::fmt;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ledger::{reconcile_majority, validate_chain, Chain, LedgerEntry};
use crate::node::NodeId;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Leader,
    Follower,
    Candidate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermConfig {
    /// Rounds before leadership is re-contested.
    pub term_rounds: u64,
    pub heartbeat_interval: u64,
    pub missed_heartbeat_threshold: u32,
}

impl Default for TermConfig {
    fn default() -> Self {
        Self {
            term_rounds: 600,
            heartbeat_interval: 1,
            missed_heartbeat_threshold: 3,
        }
    }
}

impl TermConfig {
    pub fn validate(&self) -> Result<()> {
        if self.term_rounds == 0
            || self.heartbeat_interval == 0
            || self.missed_heartbeat_threshold == 0
        {
            return Err(Error::config(format!(
                "term configuration values must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NodeState {
    pub node_id: usize,
    pub role: Role,
    pub current_term: u64,
    pub alive: bool,
    pub missed_heartbeats: u32,
    /// Ledger entries recorded since the last commit.
    pub pending: Vec<LedgerEntry>,
    pub chain: Chain,
}

impl NodeState {
    fn new(node_id: usize) -> Self {
        Self {
            node_id,
            role: Role::Follower,
            current_term: 0,
            alive: true,
            missed_heartbeats: 0,
            pending: Vec::new(),
            chain: Chain::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ElectionReason {
    Startup,
    HeartbeatTimeout,
    TermExpired,
    QuorumAbort,
}

impl fmt::Display for ElectionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ElectionReason::Startup => "startup",
            ElectionReason::HeartbeatTimeout => "heartbeat-timeout",
            ElectionReason::TermExpired => "term-expired",
            ElectionReason::QuorumAbort => "quorum-abort",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Election {
        round: u64,
        term: u64,
        winner: usize,
        votes: usize,
        reason: ElectionReason,
    },
    HeartbeatMiss {
        round: u64,
        node: usize,
    },
    Commit {
        round: u64,
        height: usize,
        entries: usize,
    },
    Abort {
        round: u64,
        received: usize,
        quorum: usize,
    },
    Paralyze {
        round: u64,
        epoch: u64,
        node: NodeId,
    },
    Restore {
        round: u64,
        epoch: u64,
        node: NodeId,
    },
    PairSkipped {
        round: u64,
        pair: usize,
    },
    BatchSkipped {
        round: u64,
        epoch: u64,
        batch: u64,
    },
    Restart {
        round: u64,
        epoch: u64,
    },
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::Election {
                round,
                term,
                winner,
                votes,
                reason,
            } => {
                write!(f, "round={round} ELECTION term={term} winner=server-{winner} votes={votes} reason={reason}")
            }
            Event::HeartbeatMiss { round, node } => {
                write!(f, "round={round} HEARTBEAT_MISS node=server-{node}")
            }
            Event::Commit {
                round,
                height,
                entries,
            } => write!(f, "round={round} COMMIT height={height} entries={entries}"),
            Event::Abort {
                round,
                received,
                quorum,
            } => write!(f, "round={round} ABORT received={received} quorum={quorum}"),
            Event::Paralyze { round, epoch, node } => {
                write!(f, "round={round} PARALYZE epoch={epoch} node={node}")
            }
            Event::Restore { round, epoch, node } => {
                write!(f, "round={round} RESTORE epoch={epoch} node={node}")
            }
            Event::PairSkipped { round, pair } => write!(f, "round={round} SKIP_PAIR pair={pair}"),
            Event::BatchSkipped {
                round,
                epoch,
                batch,
            } => write!(f, "round={round} SKIP_BATCH epoch={epoch} batch={batch}"),
            Event::Restart { round, epoch } => write!(f, "round={round} RESTART epoch={epoch}"),
        }
    }
}

/// Append-only record of consensus and attack events.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    events: Vec<Event>,
}

impl EventLog {
    pub fn push(&mut self, e: Event) {
        self.events.push(e);
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn elections(&self) -> impl Iterator<Item = &Event> {
        self.events
            .iter()
            .filter(|e| matches!(e, Event::Election { .. }))
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.events {
            writeln!(out, "{e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElectionResult {
    pub winner: usize,
    pub winner_votes: usize,
    /// `(voter, candidate)` in voting order.
    pub ballots: Vec<(usize, usize)>,
}

/// One voting pass over `alive` server ids.
///
/// Voters go in ascending id order; each draws its candidate with
/// `rng.random_range(0..alive.len())` over the sorted candidate list.
pub fn start_election<R: Rng + ?Sized>(alive: &[usize], rng: &mut R) -> Result<ElectionResult> {
    if alive.is_empty() {
        return Err(Error::TotalFailure);
    }
    let mut candidates = alive.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    let mut tally = vec![0usize; candidates.len()];
    let mut ballots = Vec::with_capacity(candidates.len());
    for &voter in &candidates {
        let pick = rng.random_range(0..candidates.len());
        tally[pick] += 1;
        ballots.push((voter, candidates[pick]));
    }
    // First maximum in ascending id order breaks ties toward the lowest id.
    let (best, &votes) =
        tally.iter().enumerate().fold(
            (0, &tally[0]),
            |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc },
        );
    Ok(ElectionResult {
        winner: candidates[best],
        winner_votes: votes,
        ballots,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommitOutcome {
    Committed {
        height: usize,
        entries: usize,
    },
    /// Too few follower ledgers; pending entries were discarded.
    Aborted {
        received: usize,
        quorum: usize,
    },
    /// Quorum met but no server had anything to record.
    NothingToCommit,
    /// The leader is paralyzed; nothing was collected.
    LeaderUnavailable,
}

/// All servers' consensus state plus the event log.
#[derive(Debug, Clone)]
pub struct Cluster {
    nodes: Vec<NodeState>,
    cfg: TermConfig,
    leader: Option<usize>,
    term: u64,
    term_started: u64,
    events: EventLog,
}

impl Cluster {
    pub fn new(servers: usize, cfg: TermConfig) -> Result<Self> {
        cfg.validate()?;
        if servers == 0 {
            return Err(Error::config("need at least one server"));
        }
        Ok(Self {
            nodes: (0..servers).map(NodeState::new).collect(),
            cfg,
            leader: None,
            term: 0,
            term_started: 0,
            events: EventLog::default(),
        })
    }

    /// Initial election among all servers; the winner creates the genesis
    /// block, which every alive server adopts.
    pub fn bootstrap<R: Rng + ?Sized>(&mut self, rng: &mut R, round: u64) -> Result<usize> {
        for n in &mut self.nodes {
            n.role = Role::Candidate;
        }
        let leader = self.elect(rng, round, ElectionReason::Startup)?;
        let genesis = Chain::with_genesis(self.term, round);
        for n in self.nodes.iter_mut() {
            n.chain = genesis.clone();
        }
        Ok(leader)
    }

    pub fn config(&self) -> &TermConfig {
        &self.cfg
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &NodeState {
        &self.nodes[id]
    }

    pub fn node_mut(&mut self, id: usize) -> &mut NodeState {
        &mut self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn term(&self) -> u64 {
        self.term
    }

    pub fn leader(&self) -> Option<usize> {
        self.leader
    }

    pub fn alive_leader(&self) -> Option<usize> {
        self.leader.filter(|&l| self.nodes[l].alive)
    }

    pub fn alive_ids(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.alive)
            .map(|n| n.node_id)
            .collect()
    }

    pub fn events(&self) -> &EventLog {
        &self.events
    }

    pub fn events_mut(&mut self) -> &mut EventLog {
        &mut self.events
    }

    /// Follower responses needed to commit: `floor(F/2) + 1`, or 0 when the
    /// leader has no followers.
    pub fn quorum(&self) -> usize {
        let followers = self.nodes.len() - 1;
        if followers == 0 {
            0
        } else {
            followers / 2 + 1
        }
    }

    pub fn set_alive(&mut self, id: usize, alive: bool) {
        let n = &mut self.nodes[id];
        if alive && !n.alive {
            n.missed_heartbeats = 0;
        }
        n.alive = alive;
    }

    pub fn record_entry(&mut self, server: usize, entry: LedgerEntry) {
        self.nodes[server].pending.push(entry);
    }

    /// Chain held by the leader, or by the first alive server if leaderless.
    pub fn canonical_chain(&self) -> &Chain {
        let idx = self
            .leader
            .or_else(|| self.nodes.iter().position(|n| n.alive))
            .unwrap_or(0);
        &self.nodes[idx].chain
    }

    pub fn start_election<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        round: u64,
        reason: ElectionReason,
    ) -> Result<usize> {
        for n in self.nodes.iter_mut().filter(|n| n.alive) {
            n.role = Role::Candidate;
        }
        self.elect(rng, round, reason)
    }

    fn elect<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        round: u64,
        reason: ElectionReason,
    ) -> Result<usize> {
        let alive = self.alive_ids();
        let result = start_election(&alive, rng)?;
        self.term += 1;
        self.term_started = round;
        self.leader = Some(result.winner);
        for n in &mut self.nodes {
            n.missed_heartbeats = 0;
            if n.alive {
                n.current_term = self.term;
                n.role = if n.node_id == result.winner {
                    Role::Leader
                } else {
                    Role::Follower
                };
            } else {
                n.role = Role::Follower;
            }
        }
        self.reconcile_chains();
        self.events.push(Event::Election {
            round,
            term: self.term,
            winner: result.winner,
            votes: result.winner_votes,
            reason,
        });
        Ok(result.winner)
    }

    /// Leader heartbeat for `round`. Returns the new leader if missed
    /// heartbeats triggered an election.
    pub fn heartbeat_tick<R: Rng + ?Sized>(
        &mut self,
        round: u64,
        rng: &mut R,
    ) -> Result<Option<usize>> {
        if round % self.cfg.heartbeat_interval != 0 {
            return Ok(None);
        }
        if let Some(leader) = self.alive_leader() {
            for n in self
                .nodes
                .iter_mut()
                .filter(|n| n.alive && n.node_id != leader)
            {
                n.missed_heartbeats = 0;
            }
            return Ok(None);
        }
        let mut timed_out = false;
        let leader = self.leader;
        for n in self
            .nodes
            .iter_mut()
            .filter(|n| n.alive && Some(n.node_id) != leader)
        {
            n.missed_heartbeats += 1;
            self.events.push(Event::HeartbeatMiss {
                round,
                node: n.node_id,
            });
            timed_out |= n.missed_heartbeats >= self.cfg.missed_heartbeat_threshold;
        }
        if self.alive_ids().is_empty() {
            return Err(Error::TotalFailure);
        }
        if timed_out {
            return self
                .start_election(rng, round, ElectionReason::HeartbeatTimeout)
                .map(Some);
        }
        Ok(None)
    }

    /// Re-runs the election once the current term has lasted `term_rounds`.
    pub fn check_term<R: Rng + ?Sized>(
        &mut self,
        round: u64,
        rng: &mut R,
    ) -> Result<Option<usize>> {
        if round.saturating_sub(self.term_started) >= self.cfg.term_rounds {
            return self
                .start_election(rng, round, ElectionReason::TermExpired)
                .map(Some);
        }
        Ok(None)
    }

    /// Drops every pending entry on every server.
    pub fn discard_pending(&mut self) {
        for n in &mut self.nodes {
            n.pending.clear();
        }
    }

    /// Leader gathers follower ledgers and commits them as one block.
    pub fn collect_and_commit(&mut self, round: u64) -> Result<CommitOutcome> {
        let Some(leader) = self.alive_leader() else {
            return Ok(CommitOutcome::LeaderUnavailable);
        };
        let quorum = self.quorum();
        let responders: Vec<usize> = self
            .nodes
            .iter()
            .filter(|n| n.alive && n.node_id != leader)
            .map(|n| n.node_id)
            .collect();
        if responders.len() < quorum {
            self.discard_pending();
            self.events.push(Event::Abort {
                round,
                received: responders.len(),
                quorum,
            });
            return Ok(CommitOutcome::Aborted {
                received: responders.len(),
                quorum,
            });
        }

        let mut entries = std::mem::take(&mut self.nodes[leader].pending);
        for &f in &responders {
            entries.append(&mut self.nodes[f].pending);
        }
        if entries.is_empty() {
            return Ok(CommitOutcome::NothingToCommit);
        }
        entries.sort_by_key(|e| e.pair_id);
        let count = entries.len();
        let term = self.term;
        let mut chain = std::mem::take(&mut self.nodes[leader].chain);
        let appended = chain
            .append(self.nodes[leader].role, entries, term, round)
            .map(|_| ());
        let height = chain.height();
        for &f in &responders {
            self.nodes[f].chain.sync_from(&chain);
        }
        self.nodes[leader].chain = chain;
        appended?;
        self.events.push(Event::Commit {
            round,
            height,
            entries: count,
        });
        Ok(CommitOutcome::Committed {
            height,
            entries: count,
        })
    }

    /// Alive servers adopt the chain version held by a strict majority of
    /// them, falling back to the longest valid copy. Returns whether any
    /// copy changed.
    pub fn reconcile_chains(&mut self) -> bool {
        let alive = self.alive_ids();
        let copies: Vec<&Chain> = alive.iter().map(|&i| &self.nodes[i].chain).collect();
        let chosen = reconcile_majority(&copies).or_else(|| {
            copies
                .iter()
                .filter(|c| validate_chain(c).is_ok())
                .max_by_key(|c| c.height())
                .map(|c| (*c).clone())
        });
        let Some(chosen) = chosen else { return false };
        let mut changed = false;
        for i in alive {
            if self.nodes[i].chain != chosen {
                self.nodes[i].chain = chosen.clone();
                changed = true;
            }
        }
        changed
    }
}
