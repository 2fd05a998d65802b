//! The run's event log: a header line followed by one JSON event per line.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::alias::AliasRecord;
use crate::amount::MonetaryAmount;
use crate::fmi::{InstructionRecord, Obligation, SettlementMode};
use crate::ids::{AccountId, AccountRef, MsgId, ParticipantId, Role, Tick};
use crate::ledger::Receipt;
use crate::money::{CashReceipt, MoneySnapshot, SagaState};
use crate::pip::{ConfidentialPayload, Digest, RailMessage, UserLimit};
use crate::scheme::SchemeTransaction;

use super::config::{Capability, Provider};

pub const SCHEMA: &str = "cbdc-sim/events";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub schema: String,
    pub version: u32,
    pub seed: u64,
    pub scenario: String,
    pub config: String,
    pub topology: BTreeMap<Capability, Provider>,
    pub settlement_mode: SettlementMode,
    pub central_bank: ParticipantId,
    pub networks: Vec<ParticipantId>,
    pub roles: BTreeMap<ParticipantId, Role>,
    pub pii_tokens: Vec<String>,
}

impl Header {
    pub fn provider(&self, cap: Capability) -> Option<Provider> {
        match cap {
            Capability::C1 => Some(Provider::Pip),
            Capability::C4 => Some(Provider::Fmi),
            c => self.topology.get(&c).copied(),
        }
    }
}

/// What a step is expected to do: `ok`, `reject` or `reject:<reason>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Expect {
    Ok,
    Reject(Option<String>),
}

impl TryFrom<String> for Expect {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        match s.as_str() {
            "ok" => Ok(Expect::Ok),
            "reject" => Ok(Expect::Reject(None)),
            _ => match s.strip_prefix("reject:") {
                Some(r) if !r.is_empty() => Ok(Expect::Reject(Some(r.to_owned()))),
                _ => Err(format!("expected ok, reject or reject:<reason>, got {s:?}")),
            },
        }
    }
}

impl From<Expect> for String {
    fn from(e: Expect) -> String {
        e.to_string()
    }
}

impl fmt::Display for Expect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expect::Ok => f.write_str("ok"),
            Expect::Reject(None) => f.write_str("reject"),
            Expect::Reject(Some(r)) => write!(f, "reject:{r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "kebab-case")]
pub enum Outcome {
    Ok { detail: String },
    Rejected { reason: String },
}

impl Outcome {
    pub fn satisfies(&self, expect: &Expect) -> bool {
        match (expect, self) {
            (Expect::Ok, Outcome::Ok { .. }) => true,
            (Expect::Reject(None), Outcome::Rejected { .. }) => true,
            (Expect::Reject(Some(want)), Outcome::Rejected { reason }) => reason.contains(want.as_str()),
            _ => false,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Ok { detail } => write!(f, "ok ({detail})"),
            Outcome::Rejected { reason } => write!(f, "rejected ({reason})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayloadAction {
    Stored,
    Voided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CycleState {
    Settled,
    Interrupted,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AliasView {
    pub host: ParticipantId,
    pub record: AliasRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EventKind {
    StepBegin {
        index: u32,
        id: String,
        action: String,
        capability: Option<Capability>,
        provider: Option<Provider>,
    },
    StepEnd {
        index: u32,
        id: String,
        expect: Expect,
        outcome: Outcome,
        matched: bool,
        /// Capability whose operation failed, when not the step's own.
        blame: Option<Capability>,
    },
    Message {
        msg_id: MsgId,
        from: ParticipantId,
        to: ParticipantId,
        capability: Option<Capability>,
        channel: String,
        body: Value,
        copy: u8,
    },
    Observation {
        observer: ParticipantId,
        msg_id: MsgId,
        payload: bool,
    },
    Fault {
        fault: String,
        target: String,
        effect: String,
    },
    Entry {
        receipt: Receipt,
    },
    CashMint {
        holder: ParticipantId,
        amount: MonetaryAmount,
    },
    CashMove {
        receipt: CashReceipt,
    },
    Saga {
        key: String,
        state: SagaState,
        legs: usize,
        applied: usize,
    },
    AliasActive {
        alias: String,
        wallet: AccountId,
        pip: ParticipantId,
        host: ParticipantId,
    },
    AliasRetired {
        alias: String,
        pip: ParticipantId,
        host: ParticipantId,
    },
    AliasRejected {
        alias: String,
        pip: ParticipantId,
        reason: String,
    },
    Resolve {
        alias: String,
        via: ParticipantId,
        wallet: Option<AccountId>,
        exists: Option<bool>,
        error: Option<String>,
    },
    Payload {
        msg_id: MsgId,
        action: PayloadAction,
        from: ParticipantId,
        to: ParticipantId,
        route: String,
        intermediaries: Vec<ParticipantId>,
        digest: Digest,
        payload: ConfidentialPayload,
    },
    Rail {
        submitted_by: ParticipantId,
        message: RailMessage,
    },
    LimitRegistered {
        user: ParticipantId,
        wallet: AccountId,
        limit: MonetaryAmount,
    },
    Instruction {
        record: InstructionRecord,
    },
    Cycle {
        cycle_id: String,
        mode: SettlementMode,
        state: CycleState,
        instructions: Vec<String>,
        cleared_total: MonetaryAmount,
        obligations: Vec<Obligation>,
        cause: Option<String>,
    },
    SchemeAuth {
        network: ParticipantId,
        processor: ParticipantId,
        txn: SchemeTransaction,
    },
    SchemeCleared {
        network: ParticipantId,
        txn_id: String,
        cleared: MonetaryAmount,
        released: MonetaryAmount,
    },
    Payment {
        payment_id: String,
        capability: Capability,
        from: AccountRef,
        to: AccountRef,
        amount: MonetaryAmount,
        started: Tick,
        settled: Option<Tick>,
        ticks: Option<u64>,
        fee: MonetaryAmount,
        failed_at: Option<String>,
        reason: Option<String>,
    },
    PiiRegistered {
        token: String,
    },
    Expectation {
        subject: String,
        expected: u64,
        actual: Option<u64>,
        passed: bool,
    },
    Snapshot {
        money: MoneySnapshot,
        aliases: Vec<AliasView>,
        limits: BTreeMap<ParticipantId, UserLimit>,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::StepBegin { .. } => "step-begin",
            EventKind::StepEnd { .. } => "step-end",
            EventKind::Message { .. } => "message",
            EventKind::Observation { .. } => "observation",
            EventKind::Fault { .. } => "fault",
            EventKind::Entry { .. } => "entry",
            EventKind::CashMint { .. } => "cash-mint",
            EventKind::CashMove { .. } => "cash-move",
            EventKind::Saga { .. } => "saga",
            EventKind::AliasActive { .. } => "alias-active",
            EventKind::AliasRetired { .. } => "alias-retired",
            EventKind::AliasRejected { .. } => "alias-rejected",
            EventKind::Resolve { .. } => "resolve",
            EventKind::Payload { .. } => "payload",
            EventKind::Rail { .. } => "rail",
            EventKind::LimitRegistered { .. } => "limit-registered",
            EventKind::Instruction { .. } => "instruction",
            EventKind::Cycle { .. } => "cycle",
            EventKind::SchemeAuth { .. } => "scheme-auth",
            EventKind::SchemeCleared { .. } => "scheme-cleared",
            EventKind::Payment { .. } => "payment",
            EventKind::PiiRegistered { .. } => "pii-registered",
            EventKind::Expectation { .. } => "expectation",
            EventKind::Snapshot { .. } => "snapshot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub tick: Tick,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {message}")]
    Json { line: usize, message: String },
    #[error("log is empty")]
    Empty,
    #[error("unsupported schema {schema} version {version}")]
    Schema { schema: String, version: u32 },
    #[error("line {line}: sequence number {got}, expected {expected}")]
    Sequence { line: usize, expected: u64, got: u64 },
    #[error("log is truncated: no final snapshot")]
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventLog {
    pub header: Header,
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn new(header: Header) -> Self {
        EventLog {
            header,
            events: Vec::new(),
        }
    }

    pub fn push(&mut self, tick: Tick, kind: EventKind) {
        let seq = self.events.len() as u64 + 1;
        self.events.push(Event { seq, tick, kind });
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses a log. A log that does not end with a snapshot is truncated.
    pub fn parse(text: &str) -> Result<EventLog, LogError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(LogError::Empty)?;
        let header: Header = serde_json::from_str(first).map_err(|e| LogError::Json {
            line: 1,
            message: e.to_string(),
        })?;
        if header.schema != SCHEMA || header.version != SCHEMA_VERSION {
            return Err(LogError::Schema {
                schema: header.schema,
                version: header.version,
            });
        }
        let mut events = Vec::new();
        for (i, line) in lines {
            let event: Event = serde_json::from_str(line).map_err(|e| LogError::Json {
                line: i + 1,
                message: e.to_string(),
            })?;
            let expected = events.len() as u64 + 1;
            if event.seq != expected {
                return Err(LogError::Sequence {
                    line: i + 1,
                    expected,
                    got: event.seq,
                });
            }
            events.push(event);
        }
        match events.last() {
            Some(Event {
                kind: EventKind::Snapshot { .. },
                ..
            }) => Ok(EventLog { header, events }),
            _ => Err(LogError::Truncated),
        }
    }

    /// `tick,observer,msg_id,payload` lines, one per observation.
    pub fn observations(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            if let EventKind::Observation {
                observer,
                msg_id,
                payload,
            } = &e.kind
            {
                out.push_str(&format!("{},{},{},{}\n", e.tick, observer, msg_id, u8::from(*payload)));
            }
        }
        out
    }

    pub fn snapshot(&self) -> Option<&MoneySnapshot> {
        self.events.iter().rev().find_map(|e| match &e.kind {
            EventKind::Snapshot { money, .. } => Some(money),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expect_round_trips_as_string() {
        for s in ["ok", "reject", "reject:limit"] {
            let e: Expect = serde_json::from_value(Value::String(s.into())).unwrap();
            assert_eq!(serde_json::to_value(&e).unwrap(), Value::String(s.into()));
        }
        assert!(serde_json::from_value::<Expect>(Value::String("maybe".into())).is_err());
    }

    #[test]
    fn outcome_matching() {
        let r = Outcome::Rejected {
            reason: "declined: limit".into(),
        };
        assert!(r.satisfies(&Expect::Reject(Some("limit".into()))));
        assert!(!r.satisfies(&Expect::Reject(Some("auth".into()))));
        assert!(!r.satisfies(&Expect::Ok));
    }
}
