//! Invariant auditor. Every check reads only the event log, so re-auditing a
//! stored log reproduces the report.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::amount::MonetaryAmount;
use crate::fmi::InstructionState;
use crate::ids::{AccountId, LedgerId, LockId, ParticipantId, Role, Tick};
use crate::ledger::{LedgerSnapshot, LockState, Receipt};
use crate::money::{SagaState, CORE_LEDGER, RESERVE_LEDGER};

use super::config::{Capability, Provider};
use super::events::{Event, EventKind, EventLog, PayloadAction};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub seq: u64,
    pub tick: Tick,
    pub event: String,
    pub capability: Option<Capability>,
    pub provider: Option<Provider>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub module: String,
    pub name: String,
    pub passed: bool,
    pub violations: usize,
    /// Every capability charged with a violation of this check.
    pub charged: Vec<Capability>,
    pub first: Option<Violation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilityOutcome {
    pub capability: Capability,
    pub title: String,
    pub provider: Provider,
    pub configurable: bool,
    pub suitable: bool,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentLine {
    pub payment_id: String,
    pub capability: Capability,
    pub amount: MonetaryAmount,
    pub started: Tick,
    pub settled: Option<Tick>,
    pub ticks: Option<u64>,
    pub fee: MonetaryAmount,
    pub failed_at: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultLine {
    pub seq: u64,
    pub tick: Tick,
    pub fault: String,
    pub target: String,
    pub effect: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub scenario: String,
    pub config: String,
    pub seed: u64,
    pub events: usize,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
    pub capabilities: Vec<CapabilityOutcome>,
    pub payments: Vec<PaymentLine>,
    pub faults: Vec<FaultLine>,
    pub notes: Vec<String>,
}

impl AuditReport {
    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failed_checks(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

/// Module and name of every check, in report order.
pub const CHECKS: [(&str, &str); 22] = [
    ("ledger-kernel", "conservation-per-ledger"),
    ("ledger-kernel", "issuance-backing"),
    ("ledger-kernel", "idempotency"),
    ("ledger-kernel", "lock-safety"),
    ("ledger-kernel", "serialization-equivalence"),
    ("money-system", "cross-form-conservation"),
    ("money-system", "no-direct-coupling"),
    ("money-system", "bridge-atomicity"),
    ("alias-directory", "alias-uniqueness"),
    ("alias-directory", "resolution-consistency"),
    ("alias-directory", "concealment"),
    ("pip-layer", "pii-isolation"),
    ("pip-layer", "digest-binding"),
    ("pip-layer", "limit-soundness"),
    ("pip-layer", "fail-closed"),
    ("interop-fmi", "settlement-via-reserves"),
    ("interop-fmi", "exactly-once"),
    ("interop-fmi", "cycle-conservation"),
    ("scheme-adapters", "hold-discipline"),
    ("scheme-adapters", "four-party-conservation"),
    ("scheme-adapters", "scheme-layering"),
    ("scenario-harness", "capability-coverage"),
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Bal {
    available: i64,
    locked: i64,
}

#[derive(Debug, Clone)]
struct LockTrack {
    amount: i64,
    drawn: i64,
    state: LockState,
}

/// Leg totals of `receipts` grouped into core, reserve and bank ledgers.
#[derive(Debug, Default)]
struct Sums {
    core: i64,
    reserve: i64,
    banks: i64,
    per_bank: BTreeMap<LedgerId, i64>,
    per_reserve: BTreeMap<AccountId, i64>,
}

fn sums<'a>(receipts: impl Iterator<Item = &'a Receipt>) -> Sums {
    let mut s = Sums::default();
    for r in receipts {
        let total: i64 = r.legs.iter().map(|l| l.total()).sum();
        match r.ledger.as_str() {
            CORE_LEDGER => s.core += total,
            RESERVE_LEDGER => {
                s.reserve += total;
                for l in &r.legs {
                    *s.per_reserve.entry(l.account.clone()).or_default() += l.total();
                }
            }
            _ => {
                s.banks += total;
                *s.per_bank.entry(r.ledger.clone()).or_default() += total;
            }
        }
    }
    s
}

struct Auditor<'a> {
    log: &'a EventLog,
    /// Capability charged for events inside each step.
    step_cap: BTreeMap<u32, Option<Capability>>,
    /// Step index enclosing each event, by position.
    step_of: Vec<u32>,
    found: BTreeMap<&'static str, Vec<Violation>>,
    entries: Vec<(&'a Event, &'a Receipt)>,
}

fn saga_of(key: &str) -> Option<&str> {
    key.rsplit_once('#').map(|(s, _)| s)
}

fn in_cycle(key: &str, cycle: &str) -> bool {
    saga_of(key).is_some_and(|s| s == cycle || s == format!("{cycle}~comp"))
}

impl<'a> Auditor<'a> {
    fn new(log: &'a EventLog) -> Self {
        let mut step_cap = BTreeMap::new();
        let mut begin_cap = BTreeMap::new();
        let mut step_of = Vec::with_capacity(log.events.len());
        let mut current = 0;
        let mut entries = Vec::new();
        for e in &log.events {
            match &e.kind {
                EventKind::StepBegin { index, capability, .. } => {
                    current = *index;
                    begin_cap.insert(*index, *capability);
                    step_cap.insert(*index, *capability);
                }
                EventKind::StepEnd { index, blame, .. } => {
                    let own = begin_cap.get(index).copied().flatten();
                    step_cap.insert(*index, blame.or(own));
                }
                EventKind::Entry { receipt } => entries.push((e, receipt)),
                _ => {}
            }
            step_of.push(current);
        }
        Auditor {
            log,
            step_cap,
            step_of,
            found: CHECKS.iter().map(|(_, n)| (*n, Vec::new())).collect(),
            entries,
        }
    }

    fn cap_at(&self, e: &Event) -> Option<Capability> {
        let pos = (e.seq - 1) as usize;
        self.step_of.get(pos).and_then(|s| self.step_cap.get(s).copied().flatten())
    }

    fn flag(&mut self, check: &'static str, e: &Event, cap: Option<Capability>, detail: String) {
        let capability = cap.or_else(|| self.cap_at(e));
        let provider = capability.and_then(|c| self.log.header.provider(c));
        self.found.get_mut(check).expect("known check").push(Violation {
            seq: e.seq,
            tick: e.tick,
            event: e.kind.name().to_owned(),
            capability,
            provider,
            detail,
        });
    }

    fn last(&self) -> &'a Event {
        self.log.events.last().expect("parsed logs end with a snapshot")
    }

    fn cb(&self) -> &'a ParticipantId {
        &self.log.header.central_bank
    }

    fn ledger_kernel(&mut self) {
        let mut keys: BTreeMap<&LedgerId, BTreeSet<&str>> = BTreeMap::new();
        let mut seqs: BTreeMap<&LedgerId, u64> = BTreeMap::new();
        let mut bals: BTreeMap<(LedgerId, AccountId), Bal> = BTreeMap::new();
        let mut locks: BTreeMap<LockId, LockTrack> = BTreeMap::new();
        let mut issued = 0i64;
        for (e, r) in self.entries.clone() {
            let legs: i64 = r.legs.iter().map(|l| l.total()).sum();
            let opened = if r.opened.is_some() { r.amount.as_delta() } else { 0 };
            if legs != r.bridge_delta + opened {
                self.flag(
                    "conservation-per-ledger",
                    e,
                    None,
                    format!("{} #{}: legs sum {legs}, bridge {} opened {opened}", r.ledger, r.seq, r.bridge_delta),
                );
            }
            if r.ledger.as_str() == CORE_LEDGER && r.bridge_delta != 0 {
                issued += r.bridge_delta;
                match &r.backing {
                    Some(b) if b.delta == -r.bridge_delta => {}
                    other => self.flag(
                        "issuance-backing",
                        e,
                        None,
                        format!("core #{} bridges {} with backing {:?}", r.seq, r.bridge_delta, other.as_ref().map(|b| b.delta)),
                    ),
                }
            }
            if !keys.entry(&r.ledger).or_default().insert(r.key.as_str()) {
                self.flag("idempotency", e, None, format!("{} applied key {} twice", r.ledger, r.key));
            }
            let expected = seqs.get(&r.ledger).copied().unwrap_or(0) + 1;
            if r.seq != expected {
                self.flag("idempotency", e, None, format!("{} seq {} follows {}", r.ledger, r.seq, expected - 1));
            }
            seqs.insert(&r.ledger, r.seq);
            for l in &r.legs {
                let b = bals.entry((r.ledger.clone(), l.account.clone())).or_default();
                b.available += l.available;
                b.locked += l.locked;
                if b.available < 0 || b.locked < 0 {
                    self.flag(
                        "lock-safety",
                        e,
                        None,
                        format!("{} goes negative: available {} locked {}", l.account, b.available, b.locked),
                    );
                }
            }
            self.track_lock(e, r, &mut locks);
        }
        let last = self.last();
        if let EventKind::Snapshot { money, .. } = &last.kind {
            let outstanding: i64 = money.core.accounts.iter().map(|a| a.total.as_delta()).sum();
            if outstanding != issued {
                self.flag(
                    "issuance-backing",
                    last,
                    None,
                    format!("digital pounds outstanding {outstanding}, bridged {issued}"),
                );
            }
            for lock in money.all_locks() {
                match locks.get(&lock.lock_id) {
                    Some(t) if t.state == lock.state && t.amount - t.drawn == lock.remaining.as_delta() => {}
                    t => self.flag(
                        "lock-safety",
                        last,
                        None,
                        format!("snapshot lock {} ({:?}) disagrees with replay {:?}", lock.lock_id, lock.state, t.map(|t| t.state)),
                    ),
                }
            }
            let mut replayed: BTreeMap<(LedgerId, AccountId), Bal> = bals.into_iter().filter(|(_, b)| *b != Bal::default()).collect();
            for snap in money.ledgers() {
                for a in &snap.accounts {
                    let want = Bal {
                        available: a.available.as_delta(),
                        locked: a.locked.as_delta(),
                    };
                    let got = replayed.remove(&(snap.ledger.clone(), a.account_id.clone())).unwrap_or_default();
                    if got != want {
                        self.flag(
                            "serialization-equivalence",
                            last,
                            None,
                            format!("{}: replay {got:?}, snapshot {want:?}", a.account_id),
                        );
                    }
                }
            }
            for ((_, acct), b) in replayed {
                self.flag(
                    "serialization-equivalence",
                    last,
                    None,
                    format!("{acct}: replay {b:?} missing from snapshot"),
                );
            }
            let cash = self.replay_cash();
            let snap_cash: BTreeMap<&ParticipantId, i64> = money
                .cash
                .iter()
                .map(|(k, v)| (k, v.as_delta()))
                .filter(|(_, v)| *v != 0)
                .collect();
            let cash: BTreeMap<&ParticipantId, i64> = cash.iter().map(|(k, v)| (*k, *v)).filter(|(_, v)| *v != 0).collect();
            if cash != snap_cash {
                self.flag(
                    "serialization-equivalence",
                    last,
                    None,
                    "cash replay disagrees with snapshot".into(),
                );
            }
        }
    }

    fn track_lock(&mut self, e: &Event, r: &Receipt, locks: &mut BTreeMap<LockId, LockTrack>) {
        let Some(id) = &r.lock else { return };
        match r.op.as_str() {
            "lock" => {
                if locks
                    .insert(
                        id.clone(),
                        LockTrack {
                            amount: r.amount.as_delta(),
                            drawn: 0,
                            state: LockState::Active,
                        },
                    )
                    .is_some()
                {
                    self.flag("lock-safety", e, None, format!("lock {id} created twice"));
                }
            }
            op => {
                let Some(t) = locks.get_mut(id) else {
                    self.flag("lock-safety", e, None, format!("{op} on unknown lock {id}"));
                    return;
                };
                if t.state != LockState::Active {
                    let state = t.state;
                    self.flag("lock-safety", e, None, format!("{op} on {id} in state {state:?}"));
                    return;
                }
                if op == "drawdown" {
                    t.drawn += r.amount.as_delta();
                    if t.drawn > t.amount {
                        let (drawn, amount) = (t.drawn, t.amount);
                        self.flag("lock-safety", e, None, format!("{id} drawn {drawn} of {amount}"));
                    } else if t.drawn == t.amount {
                        t.state = LockState::Drawn;
                    }
                } else {
                    let remaining = t.amount - t.drawn;
                    t.state = LockState::Released;
                    if r.amount.as_delta() != remaining {
                        self.flag(
                            "lock-safety",
                            e,
                            None,
                            format!("{op} of {id} returned {} of remaining {remaining}", r.amount.as_delta()),
                        );
                    }
                }
            }
        }
    }

    fn replay_cash(&self) -> BTreeMap<&'a ParticipantId, i64> {
        let mut cash: BTreeMap<&ParticipantId, i64> = BTreeMap::new();
        for e in &self.log.events {
            match &e.kind {
                EventKind::CashMint { holder, amount } => *cash.entry(holder).or_default() += amount.as_delta(),
                EventKind::CashMove { receipt } => {
                    *cash.entry(&receipt.from).or_default() -= receipt.amount.as_delta();
                    *cash.entry(&receipt.to).or_default() += receipt.amount.as_delta();
                }
                _ => {}
            }
        }
        cash
    }

    fn money_system(&mut self) {
        let mut core = 0i64;
        let mut reserve = 0i64;
        let mut banks = 0i64;
        let mut cash = 0i64;
        let mut cash_keys = BTreeSet::new();
        let mut cash_seq = 0;
        let mut baseline: Option<(i64, i64)> = None;
        let mut reserve_entries: BTreeMap<u64, &Receipt> = BTreeMap::new();
        let reserve_sagas: BTreeSet<&str> = self
            .entries
            .iter()
            .filter(|(_, r)| r.ledger.as_str() == RESERVE_LEDGER)
            .filter_map(|(_, r)| saga_of(r.key.as_str()))
            .collect();
        for e in &self.log.events {
            match &e.kind {
                EventKind::Entry { receipt: r } => {
                    let total: i64 = r.legs.iter().map(|l| l.total()).sum();
                    match r.ledger.as_str() {
                        CORE_LEDGER => {
                            core += total;
                            if r.bridge_delta != 0 {
                                let cited = r.backing.as_ref().and_then(|b| {
                                    let rr = reserve_entries.get(&b.seq)?;
                                    let leg: i64 = rr.legs.iter().filter(|l| l.account == b.account).map(|l| l.total()).sum();
                                    (b.ledger.as_str() == RESERVE_LEDGER && leg == b.delta).then_some(())
                                });
                                if cited.is_none() {
                                    self.flag(
                                        "no-direct-coupling",
                                        e,
                                        None,
                                        format!("core bridge {} cites no matching reserve movement", r.key),
                                    );
                                }
                            }
                        }
                        RESERVE_LEDGER => {
                            reserve += total;
                            reserve_entries.insert(r.seq, r);
                        }
                        _ => {
                            banks += total;
                            if r.bridge_delta != 0 && !saga_of(r.key.as_str()).is_some_and(|s| reserve_sagas.contains(s)) {
                                self.flag(
                                    "no-direct-coupling",
                                    e,
                                    None,
                                    format!("{} bridge {} has no reserve settlement", r.ledger, r.key),
                                );
                            }
                        }
                    }
                }
                EventKind::CashMint { amount, .. } => cash += amount.as_delta(),
                EventKind::CashMove { receipt } => {
                    cash_seq += 1;
                    if receipt.seq != cash_seq || !cash_keys.insert(receipt.key.as_str()) {
                        self.flag("idempotency", e, None, format!("cash move {} out of sequence or repeated", receipt.key));
                    }
                }
                EventKind::StepEnd { index, .. } => {
                    let now = (banks + core + cash, reserve + core);
                    match baseline {
                        None if *index == 0 => baseline = Some(now),
                        Some(b) if b != now => {
                            self.flag(
                                "cross-form-conservation",
                                e,
                                None,
                                format!("broad money {} (was {}), central bank money {} (was {})", now.0, b.0, now.1, b.1),
                            );
                            baseline = Some(now);
                        }
                        _ => {}
                    }
                }
                _ => {}
            }
        }
        self.bridge_atomicity();
    }

    fn bridge_atomicity(&mut self) {
        let mut sagas: BTreeMap<&str, (&Event, SagaState, usize, usize)> = BTreeMap::new();
        for e in &self.log.events {
            if let EventKind::Saga { key, state, legs, applied } = &e.kind {
                sagas.insert(key.as_str(), (e, *state, *legs, *applied));
            }
        }
        let mut leg_keys: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for (_, r) in &self.entries {
            if let Some(s) = saga_of(r.key.as_str()) {
                leg_keys.entry(s).or_default().insert(r.key.as_str());
            }
        }
        for (key, (e, state, legs, applied)) in sagas.clone() {
            let present = leg_keys.get(key).map(|k| k.len()).unwrap_or(0);
            match state {
                SagaState::Committed if applied == legs && present == legs => {}
                SagaState::Committed => self.flag(
                    "bridge-atomicity",
                    e,
                    None,
                    format!("saga {key} committed with {applied}/{legs} legs applied, {present} logged"),
                ),
                SagaState::Compensated => {
                    let comp = format!("{key}~comp");
                    match sagas.get(comp.as_str()) {
                        Some((_, SagaState::Committed, l, a)) if l == a => {}
                        _ => self.flag("bridge-atomicity", e, None, format!("saga {key} compensation incomplete")),
                    }
                }
                s => self.flag("bridge-atomicity", e, None, format!("saga {key} left {s:?}")),
            }
        }
    }

    fn alias_directory(&mut self) {
        let mut active: BTreeMap<&str, Vec<(&AccountId, &ParticipantId)>> = BTreeMap::new();
        let mut pairs: Vec<(&str, &AccountId)> = Vec::new();
        for e in &self.log.events {
            if let EventKind::AliasActive { alias, wallet, .. } = &e.kind {
                pairs.push((alias, wallet));
            }
        }
        let cb = self.cb();
        for e in &self.log.events {
            match &e.kind {
                EventKind::AliasActive { alias, wallet, pip, .. } => {
                    let list = active.entry(alias).or_default();
                    list.push((wallet, pip));
                    if list.len() > 1 {
                        let n = list.len();
                        self.flag(
                            "alias-uniqueness",
                            e,
                            Some(Capability::C3),
                            format!("{alias} has {n} active records"),
                        );
                    }
                }
                EventKind::AliasRetired { alias, pip, .. } => {
                    if let Some(list) = active.get_mut(alias.as_str()) {
                        list.retain(|(_, p)| *p != pip);
                    }
                }
                EventKind::Resolve {
                    alias,
                    via,
                    wallet,
                    exists,
                    ..
                } => {
                    let live = active.get(alias.as_str()).map(Vec::as_slice).unwrap_or(&[]);
                    let ok = match (wallet, exists) {
                        (Some(w), _) => live.len() == 1 && live[0].0 == w,
                        (None, Some(true)) => live.len() == 1,
                        (None, Some(false)) => live.is_empty(),
                        (None, None) => true,
                    };
                    if !ok {
                        let n = live.len();
                        self.flag(
                            "resolution-consistency",
                            e,
                            Some(Capability::C3),
                            format!("{alias} via {via} answered {wallet:?}/{exists:?} with {n} active records"),
                        );
                    }
                }
                EventKind::Message { to, body, capability, .. } if to == cb => {
                    let text = body.to_string();
                    if let Some((a, _)) = pairs.iter().find(|(a, w)| text.contains(*a) && text.contains(w.as_str())) {
                        self.flag(
                            "concealment",
                            e,
                            *capability,
                            format!("{cb} received alias {a} with its wallet"),
                        );
                    }
                }
                _ => {}
            }
        }
        let last = self.last();
        if let EventKind::Snapshot { aliases, .. } = &last.kind {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for v in aliases.iter().filter(|v| v.record.status == crate::alias::AliasStatus::Active) {
                *counts.entry(v.record.alias.value.as_str()).or_default() += 1;
            }
            for (alias, n) in counts.iter().filter(|(_, n)| **n > 1) {
                self.flag(
                    "alias-uniqueness",
                    last,
                    Some(Capability::C3),
                    format!("final directory holds {n} active records for {alias}"),
                );
            }
            for (alias, live) in &active {
                if live.len() != counts.get(alias).copied().unwrap_or(0) {
                    self.flag(
                        "resolution-consistency",
                        last,
                        Some(Capability::C3),
                        format!("final directory disagrees with log for {alias}"),
                    );
                }
            }
        }
    }

    fn pip_layer(&mut self) {
        let mut tokens: Vec<&str> = self.log.header.pii_tokens.iter().map(String::as_str).collect();
        let cb = self.cb();
        let mut stored: BTreeMap<&str, (&crate::pip::Digest, bool)> = BTreeMap::new();
        let mut wallet_user: BTreeMap<&AccountId, &ParticipantId> = BTreeMap::new();
        let mut limits: BTreeMap<&ParticipantId, i64> = BTreeMap::new();
        let mut wallet_total: BTreeMap<&AccountId, i64> = BTreeMap::new();
        let mut rails: Vec<(&Event, &crate::pip::RailMessage)> = Vec::new();
        for e in &self.log.events {
            match &e.kind {
                EventKind::PiiRegistered { token } => tokens.push(token),
                EventKind::Message { to, body, capability, .. } if to == cb => {
                    let text = body.to_string();
                    if let Some(t) = tokens.iter().find(|t| text.contains(**t)) {
                        self.flag("pii-isolation", e, *capability, format!("{cb} received PII token {t:?}"));
                    }
                }
                EventKind::Observation { observer, msg_id, payload: true } if observer == cb => {
                    self.flag(
                        "pii-isolation",
                        e,
                        Some(Capability::C2),
                        format!("{cb} observed payload bytes of {msg_id}"),
                    );
                }
                EventKind::Payload {
                    msg_id,
                    action,
                    digest,
                    payload,
                    intermediaries,
                    ..
                } => match action {
                    PayloadAction::Stored => {
                        if payload.digest() != *digest {
                            self.flag(
                                "digest-binding",
                                e,
                                Some(Capability::C2),
                                format!("payload {msg_id} digest {digest} does not match contents"),
                            );
                        }
                        if intermediaries.contains(cb) {
                            self.flag("pii-isolation", e, Some(Capability::C2), format!("payload {msg_id} relayed by {cb}"));
                        }
                        stored.insert(msg_id.as_str(), (digest, true));
                    }
                    PayloadAction::Voided => {
                        if let Some(s) = stored.get_mut(msg_id.as_str()) {
                            s.1 = false;
                        }
                    }
                },
                EventKind::Rail { message, .. } => rails.push((e, message)),
                EventKind::LimitRegistered { user, wallet, limit } => {
                    wallet_user.insert(wallet, user);
                    limits.entry(user).or_insert(limit.as_delta());
                }
                EventKind::Entry { receipt: r } if r.ledger.as_str() == CORE_LEDGER => {
                    let mut touched = BTreeSet::new();
                    for l in &r.legs {
                        *wallet_total.entry(&l.account).or_default() += l.total();
                        if let Some(u) = wallet_user.get(&l.account) {
                            touched.insert(*u);
                        }
                    }
                    for user in touched {
                        let held: i64 = wallet_user
                            .iter()
                            .filter(|(_, u)| **u == user)
                            .map(|(w, _)| wallet_total.get(*w).copied().unwrap_or(0))
                            .sum();
                        let limit = limits[user];
                        if held > limit {
                            self.flag(
                                "limit-soundness",
                                e,
                                None,
                                format!("{user} holds {held} across wallets, limit {limit}"),
                            );
                        }
                    }
                }
                _ => {}
            }
        }
        for (e, rail) in rails {
            let Some(d) = &rail.payload_digest else { continue };
            match stored.get(rail.msg_id.as_str()) {
                Some((sd, _)) if *sd == d => {}
                _ => self.flag(
                    "digest-binding",
                    e,
                    Some(Capability::C2),
                    format!("rail {} digest {d} has no bound payload", rail.msg_id),
                ),
            }
        }
        for e in &self.log.events {
            let EventKind::Payment {
                payment_id, failed_at, capability, ..
            } = &e.kind
            else {
                continue;
            };
            let live = stored.get(payment_id.as_str()).is_some_and(|s| s.1);
            if failed_at.is_some() && live {
                self.flag(
                    "digest-binding",
                    e,
                    Some(*capability),
                    format!("failed payment {payment_id} left a live payload"),
                );
            }
            if failed_at.as_deref() == Some("payload") {
                let leaked = self.log.events.iter().any(|x| match &x.kind {
                    EventKind::Rail { message, .. } => message.msg_id.as_str() == payment_id,
                    EventKind::Instruction { record } => record.instr.instr_id == *payment_id,
                    EventKind::Entry { receipt } => receipt.key.as_str().starts_with(payment_id.as_str()),
                    _ => false,
                });
                if leaked {
                    self.flag(
                        "fail-closed",
                        e,
                        Some(*capability),
                        format!("{payment_id} reached the rail without its payload"),
                    );
                }
            }
        }
    }

    fn interop_fmi(&mut self) {
        let mut reserve_owner: BTreeMap<&AccountId, LedgerId> = BTreeMap::new();
        for (_, r) in &self.entries {
            if let (RESERVE_LEDGER, Some(o), Some(a)) = (r.ledger.as_str(), &r.opened, &r.account) {
                reserve_owner.insert(a, LedgerId::new(o.owner.as_str()));
            }
        }
        let mut settled_in: BTreeMap<&str, usize> = BTreeMap::new();
        let mut final_state: BTreeMap<&str, (&Event, InstructionState)> = BTreeMap::new();
        for e in &self.log.events {
            match &e.kind {
                EventKind::Cycle {
                    cycle_id,
                    state,
                    instructions,
                    ..
                } => {
                    if *state == super::events::CycleState::Settled {
                        for i in instructions {
                            *settled_in.entry(i).or_default() += 1;
                        }
                    }
                    if *state == super::events::CycleState::Interrupted {
                        continue;
                    }
                    let s = sums(self.entries.iter().map(|(_, r)| *r).filter(|r| in_cycle(r.key.as_str(), cycle_id)));
                    if s.core + s.banks != 0 || s.core + s.reserve != 0 {
                        self.flag(
                            "cycle-conservation",
                            e,
                            Some(Capability::C4),
                            format!("{cycle_id}: core {} banks {} reserves {}", s.core, s.banks, s.reserve),
                        );
                    }
                    let mut per: BTreeMap<LedgerId, (i64, i64)> = BTreeMap::new();
                    for (b, d) in &s.per_bank {
                        per.entry(b.clone()).or_default().0 += d;
                    }
                    for (a, d) in &s.per_reserve {
                        let bank = reserve_owner.get(a).cloned().unwrap_or_else(|| LedgerId::new(a.as_str()));
                        per.entry(bank).or_default().1 += d;
                    }
                    for (bank, (money, res)) in per.into_iter().filter(|(_, (m, r))| m != r) {
                        self.flag(
                            "settlement-via-reserves",
                            e,
                            Some(Capability::C4),
                            format!("{cycle_id}: {bank} money moved {money}, reserves {res}"),
                        );
                    }
                }
                EventKind::Instruction { record } => {
                    final_state.insert(record.instr.instr_id.as_str(), (e, record.state));
                }
                _ => {}
            }
        }
        for (id, (e, state)) in final_state {
            let n = settled_in.get(id).copied().unwrap_or(0);
            let ok = match state {
                InstructionState::Settled => n == 1,
                InstructionState::Rejected => n == 0,
                _ => false,
            };
            if !ok {
                self.flag(
                    "exactly-once",
                    e,
                    Some(Capability::C4),
                    format!("instruction {id} ended {state:?} after {n} settled cycles"),
                );
            }
        }
    }

    fn scheme_adapters(&mut self) {
        let networks = &self.log.header.networks;
        let mut authorized: BTreeMap<&str, (MonetaryAmount, bool, &crate::ids::AccountRef)> = BTreeMap::new();
        let mut cash_by_key: BTreeMap<&str, i64> = BTreeMap::new();
        for e in &self.log.events {
            if let EventKind::CashMove { receipt } = &e.kind {
                cash_by_key.insert(receipt.key.as_str(), receipt.amount.as_delta());
            }
        }
        for e in &self.log.events {
            match &e.kind {
                EventKind::Entry { receipt } if networks.contains(&receipt.caller) => {
                    self.flag(
                        "scheme-layering",
                        e,
                        None,
                        format!("network {} wrote {} on {}", receipt.caller, receipt.key, receipt.ledger),
                    );
                }
                EventKind::SchemeAuth { processor, txn, .. } => {
                    let member = matches!(self.log.header.roles.get(processor), Some(Role::Pip | Role::Fmi));
                    if !member {
                        self.flag("scheme-layering", e, None, format!("{processor} processed {} without membership", txn.txn_id));
                    }
                    authorized.insert(txn.txn_id.as_str(), (txn.amount, txn.lock.is_some(), &txn.wallet));
                }
                EventKind::SchemeCleared {
                    txn_id, cleared, released, ..
                } => {
                    let Some((auth, held, wallet)) = authorized.get(txn_id.as_str()).copied() else {
                        self.flag("hold-discipline", e, None, format!("{txn_id} cleared without authorization"));
                        continue;
                    };
                    let residual_ok = !held || cleared.checked_add(*released).ok() == Some(auth);
                    if *cleared > auth || !residual_ok {
                        self.flag(
                            "hold-discipline",
                            e,
                            None,
                            format!("{txn_id}: authorized {auth}, cleared {cleared}, released {released}"),
                        );
                    }
                    let prefix = format!("{txn_id}/");
                    let mine: Vec<&Receipt> = self
                        .entries
                        .iter()
                        .map(|(_, r)| *r)
                        .filter(|r| r.key.as_str().starts_with(&prefix))
                        .collect();
                    let s = sums(mine.iter().copied());
                    let wallet_delta: i64 = mine
                        .iter()
                        .filter(|r| r.ledger == wallet.ledger)
                        .flat_map(|r| r.legs.iter())
                        .filter(|l| l.account == wallet.account)
                        .map(|l| l.total())
                        .sum();
                    let cash = cash_by_key.get(format!("{txn_id}/cash").as_str()).copied();
                    let cash_ok = cash.is_none_or(|c| c == cleared.as_delta());
                    if s.core + s.banks != 0 || s.core + s.reserve != 0 || wallet_delta.abs() != cleared.as_delta() || !cash_ok {
                        self.flag(
                            "four-party-conservation",
                            e,
                            None,
                            format!(
                                "{txn_id}: core {} banks {} reserves {} wallet {wallet_delta} cash {cash:?} cleared {cleared}",
                                s.core, s.banks, s.reserve
                            ),
                        );
                    }
                }
                _ => {}
            }
        }
        let last = self.last();
        if let EventKind::Snapshot { money, .. } = &last.kind {
            for lock in money.all_locks() {
                if lock.state == LockState::Active && lock.condition_tag.starts_with("cleared:") {
                    self.flag(
                        "hold-discipline",
                        last,
                        Some(Capability::C7),
                        format!("hold {} still active at end of run", lock.lock_id),
                    );
                }
            }
        }
    }

    fn harness(&mut self) {
        let mut open: BTreeSet<u32> = BTreeSet::new();
        for e in &self.log.events {
            match &e.kind {
                EventKind::StepBegin { index, .. } => {
                    open.insert(*index);
                }
                EventKind::StepEnd {
                    index,
                    id,
                    expect,
                    outcome,
                    matched,
                    ..
                } => {
                    open.remove(index);
                    if !matched {
                        self.flag(
                            "capability-coverage",
                            e,
                            None,
                            format!("step {id} expected {expect}, got {outcome}"),
                        );
                    }
                }
                EventKind::Expectation {
                    subject,
                    expected,
                    actual,
                    passed: false,
                } => self.flag(
                    "capability-coverage",
                    e,
                    None,
                    format!("{subject} ended at {actual:?}, expected {expected}"),
                ),
                _ => {}
            }
        }
        let last = self.last();
        for index in open {
            self.flag("capability-coverage", last, None, format!("step {index} never ended"));
        }
    }

    fn report(self) -> AuditReport {
        let header = &self.log.header;
        let all: Vec<&Violation> = self.found.values().flatten().collect();
        let capabilities = Capability::ALL
            .into_iter()
            .map(|c| {
                let n = all.iter().filter(|v| v.capability == Some(c)).count();
                CapabilityOutcome {
                    capability: c,
                    title: c.title().to_owned(),
                    provider: header.provider(c).unwrap_or(Provider::Fmi),
                    configurable: Capability::CONFIGURABLE.contains(&c),
                    suitable: n == 0,
                    violations: n,
                }
            })
            .collect();
        let checks: Vec<CheckResult> = CHECKS
            .iter()
            .map(|(module, name)| {
                let v = &self.found[name];
                CheckResult {
                    module: (*module).to_owned(),
                    name: (*name).to_owned(),
                    passed: v.is_empty(),
                    violations: v.len(),
                    charged: v
                        .iter()
                        .filter_map(|v| v.capability)
                        .collect::<BTreeSet<_>>()
                        .into_iter()
                        .collect(),
                    first: v.iter().min_by_key(|v| v.seq).cloned(),
                }
            })
            .collect();
        let mut payments = Vec::new();
        let mut faults = Vec::new();
        for e in &self.log.events {
            match &e.kind {
                EventKind::Payment {
                    payment_id,
                    capability,
                    amount,
                    started,
                    settled,
                    ticks,
                    fee,
                    failed_at,
                    ..
                } => payments.push(PaymentLine {
                    payment_id: payment_id.clone(),
                    capability: *capability,
                    amount: *amount,
                    started: *started,
                    settled: *settled,
                    ticks: *ticks,
                    fee: *fee,
                    failed_at: failed_at.clone(),
                }),
                EventKind::Fault { fault, target, effect } => faults.push(FaultLine {
                    seq: e.seq,
                    tick: e.tick,
                    fault: fault.clone(),
                    target: target.clone(),
                    effect: effect.clone(),
                }),
                _ => {}
            }
        }
        let non_digital = self
            .log
            .events
            .iter()
            .any(|e| matches!(&e.kind, EventKind::CashMove { .. } | EventKind::SchemeAuth { .. }));
        let mut notes = vec![
            "settlement time is reported in ticks per payment; fees are zero throughout".to_owned(),
            "acceptability and inclusivity are covered only as journey coverage".to_owned(),
        ];
        if non_digital {
            notes.push("this run exercises the card, cash and point-of-presence path".to_owned());
        }
        AuditReport {
            scenario: header.scenario.clone(),
            config: header.config.clone(),
            seed: header.seed,
            events: self.log.events.len(),
            passed: checks.iter().all(|c| c.passed),
            checks,
            capabilities,
            payments,
            faults,
            notes,
        }
    }
}

/// Snapshot helpers used by the auditor.
trait SnapshotExt {
    fn ledgers(&self) -> Vec<&LedgerSnapshot>;
    fn all_locks(&self) -> Vec<&crate::ledger::FundsLock>;
}

impl SnapshotExt for crate::money::MoneySnapshot {
    fn ledgers(&self) -> Vec<&LedgerSnapshot> {
        let mut v = vec![&self.core, &self.reserves];
        v.extend(self.banks.iter());
        v
    }

    fn all_locks(&self) -> Vec<&crate::ledger::FundsLock> {
        self.ledgers().into_iter().flat_map(|l| l.locks.iter()).collect()
    }
}

/// Audits a complete log.
pub fn audit(log: &EventLog) -> AuditReport {
    let mut a = Auditor::new(log);
    a.ledger_kernel();
    a.money_system();
    a.alias_directory();
    a.pip_layer();
    a.interop_fmi();
    a.scheme_adapters();
    a.harness();
    a.report()
}
