//! The simulated ecosystem. Participants talk over a message bus that applies
//! the fault plan; the topology decides which participant carries each
//! capability, and the run succeeds or fails on that wiring alone.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::alias::{AliasDirectory, AliasError, DirectoryMode, Resolution};
use crate::amount::MonetaryAmount;
use crate::fmi::{core_ref, ClearingInstruction, Direction, Fmi, FmiError, Funding, InstructionState, Party};
use crate::ids::{AccountId, AccountRef, LedgerId, LockId, MoneyForm, ParticipantId, Role, Tick};
use crate::ledger::{Beneficiary, CommandKind, EventProof, GrantScope, LedgerCommand, LockState, Op, Origin, Receipt};
use crate::money::{LegDelivery, LimitDenied, LimitGate, MoneySystem, SagaLeg, SagaState, CORE_LEDGER};
use crate::pip::{
    initiate_payment, ConfidentialPayload, DeliveryReceipt, KycProvider, KycStatus, Payee, PayloadBody, PayloadRoute,
    PayloadStore, PaymentRails, PaymentRequest, PipError, PipLayer, PipResult, RailMessage,
};
use crate::scheme::{AtmAction, AuthState, Scheme, SchemeBackend, SchemeTransaction, SessionResult, TxnKind};

use super::config::{glob_match, Capability, Fault, Provider, Roster, TopologyConfig};
use super::events::{AliasView, CycleState, EventKind, EventLog, Header, Outcome, PayloadAction, SCHEMA, SCHEMA_VERSION};
use super::script::{Action, Scenario};

#[derive(Debug, Clone)]
struct Failure {
    reason: String,
    blame: Option<Capability>,
}

fn fail(reason: impl Into<String>) -> Failure {
    Failure {
        reason: reason.into(),
        blame: None,
    }
}

fn blamed(cap: Capability, reason: impl Into<String>) -> Failure {
    Failure {
        reason: reason.into(),
        blame: Some(cap),
    }
}

type StepResult = Result<String, Failure>;

fn amt(pence: u64) -> MonetaryAmount {
    MonetaryAmount::from_pence(pence)
}

fn leg_operator(cb: &ParticipantId, leg: &SagaLeg) -> ParticipantId {
    match leg {
        SagaLeg::Bank { bank, .. } | SagaLeg::BankDrawdown { bank, .. } | SagaLeg::BankTransfer { bank, .. } => bank.clone(),
        _ => cb.clone(),
    }
}

/// Message transport with the fault plan applied. One hop is one tick.
struct Bus {
    log: EventLog,
    tick: Tick,
    step: u32,
    base: Tick,
    counter: u32,
    faults: Vec<Fault>,
    fired: BTreeSet<usize>,
    central_bank: ParticipantId,
}

impl Bus {
    fn emit(&mut self, kind: EventKind) {
        self.log.push(self.tick, kind);
    }

    fn next_id(&mut self, kind: &str) -> String {
        self.counter += 1;
        format!("{:02}-{kind}-{}", self.step, self.counter)
    }

    /// A crash fires at the first interaction with the participant at or
    /// after its tick.
    fn crash_due(&mut self, who: &ParticipantId) -> bool {
        let tick = self.tick;
        let hit = self.faults.iter().enumerate().find(|(i, f)| {
            !self.fired.contains(i) && matches!(f, Fault::CrashRestart { participant, tick: t } if participant == who && *t <= tick)
        });
        match hit.map(|(i, _)| i) {
            Some(i) => {
                self.fired.insert(i);
                true
            }
            None => false,
        }
    }

    fn dropped(&self, msg_id: &str) -> bool {
        self.faults
            .iter()
            .any(|f| matches!(f, Fault::Drop { msg_id: g } if glob_match(g, msg_id)))
    }

    fn duplicated(&self, msg_id: &str) -> bool {
        self.faults
            .iter()
            .any(|f| matches!(f, Fault::DuplicateDelivery { msg_id: g } if glob_match(g, msg_id)))
    }

    fn queue_if_down(&mut self, to: &ParticipantId, msg_id: &str) {
        if self.crash_due(to) {
            self.emit(EventKind::Fault {
                fault: "crash".into(),
                target: to.to_string(),
                effect: format!("{msg_id} queued until restart"),
            });
            self.tick += 1;
            self.emit(EventKind::Fault {
                fault: "restart".into(),
                target: to.to_string(),
                effect: "queued messages delivered".into(),
            });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn deliver(&mut self, msg_id: &str, from: &ParticipantId, to: &ParticipantId, cap: Option<Capability>, channel: &str, body: &Value, copy: u8) {
        self.emit(EventKind::Message {
            msg_id: msg_id.into(),
            from: from.clone(),
            to: to.clone(),
            capability: cap,
            channel: channel.to_owned(),
            body: body.clone(),
            copy,
        });
        self.emit(EventKind::Observation {
            observer: to.clone(),
            msg_id: msg_id.into(),
            payload: channel == "payload",
        });
    }

    /// Sends one message. Returns how many copies the receiver gets.
    fn hop(&mut self, from: &ParticipantId, to: &ParticipantId, kind: &str, cap: Option<Capability>, channel: &str, body: Value) -> Result<u8, String> {
        let msg_id = self.next_id(kind);
        self.tick += 1;
        self.queue_if_down(to, &msg_id);
        self.deliver(&msg_id, from, to, cap, channel, &body, 1);
        if self.dropped(&msg_id) {
            self.emit(EventKind::Fault {
                fault: "drop".into(),
                target: msg_id.clone(),
                effect: "lost; sender timed out".into(),
            });
            return Err(format!("message {msg_id} to {to} lost"));
        }
        if self.duplicated(&msg_id) {
            self.emit(EventKind::Fault {
                fault: "duplicate-delivery".into(),
                target: msg_id.clone(),
                effect: "delivered twice".into(),
            });
            self.deliver(&msg_id, from, to, cap, channel, &body, 2);
            return Ok(2);
        }
        Ok(1)
    }

    /// Fault hook for saga legs driven by `driver`.
    fn leg(&mut self, driver: &ParticipantId, cap: Option<Capability>, leg: &SagaLeg, idx: usize) -> LegDelivery {
        let msg_id = self.next_id("leg");
        self.tick += 1;
        if self.crash_due(driver) {
            self.emit(EventKind::Fault {
                fault: "crash".into(),
                target: driver.to_string(),
                effect: format!("saga interrupted before leg {idx} ({msg_id})"),
            });
            return LegDelivery::Crash;
        }
        let to = leg_operator(&self.central_bank, leg);
        self.queue_if_down(&to, &msg_id);
        let body = json!({ "leg": idx, "command": leg });
        self.deliver(&msg_id, driver, &to, cap, "ledger", &body, 1);
        if self.dropped(&msg_id) {
            self.emit(EventKind::Fault {
                fault: "drop".into(),
                target: msg_id,
                effect: "leg command lost; saga interrupted".into(),
            });
            return LegDelivery::Crash;
        }
        if self.duplicated(&msg_id) {
            self.emit(EventKind::Fault {
                fault: "duplicate-delivery".into(),
                target: msg_id.clone(),
                effect: "delivered twice".into(),
            });
            self.deliver(&msg_id, driver, &to, cap, "ledger", &body, 2);
            return LegDelivery::DeliverAt(self.tick, 2);
        }
        LegDelivery::DeliverAt(self.tick, 1)
    }
}

#[derive(Debug, Clone)]
struct Order {
    payer: AccountRef,
    payee: AccountRef,
    amount: MonetaryAmount,
    lock: LockId,
    tag: String,
    provider: ParticipantId,
    payer_pip: ParticipantId,
    acquirer: ParticipantId,
    customer: ParticipantId,
}

#[derive(Debug, Clone)]
struct Deferred {
    id: String,
    cap: Capability,
    from: AccountRef,
    to: AccountRef,
    amount: MonetaryAmount,
    started: Tick,
}

pub struct World {
    cfg: TopologyConfig,
    roster: Roster,
    pub ms: MoneySystem,
    pub dir: AliasDirectory,
    pub pips: PipLayer,
    pub fmi: Fmi,
    pub cards: Scheme,
    pub atms: Scheme,
    payloads: PayloadStore,
    bus: Bus,
    rng: ChaCha8Rng,
    roles: BTreeMap<ParticipantId, Role>,
    labels: BTreeMap<String, AccountRef>,
    identities: BTreeMap<ParticipantId, (String, String)>,
    orders: BTreeMap<String, Order>,
    card_numbers: BTreeMap<String, String>,
    funding: Option<Funding>,
    processor: ParticipantId,
    scheme_cap: Capability,
    defer_interbank: bool,
    deferred: Vec<Deferred>,
    logged: BTreeMap<LedgerId, usize>,
    cash_logged: usize,
    sagas_seen: BTreeMap<String, (SagaState, usize)>,
    instr_seen: BTreeMap<String, (InstructionState, Option<String>)>,
}

fn roles_of(r: &Roster) -> BTreeMap<ParticipantId, Role> {
    let mut roles = BTreeMap::new();
    roles.insert(r.central_bank.clone(), Role::CentralBank);
    roles.insert(r.fmi.clone(), Role::Fmi);
    roles.insert(r.tsp.clone(), Role::Tsp);
    roles.insert(r.kyc.id.clone(), Role::Tsp);
    roles.insert(r.networks.card.clone(), Role::Fmi);
    roles.insert(r.networks.atm.clone(), Role::Fmi);
    for b in &r.banks {
        roles.insert(b.id.clone(), Role::CommercialBank);
    }
    for p in &r.pips {
        roles.insert(p.id.clone(), Role::Pip);
    }
    for e in &r.esips {
        roles.insert(e.clone(), Role::Esip);
    }
    for a in &r.acquirers {
        roles.insert(a.id.clone(), Role::MerchantAcquirer);
    }
    for u in &r.users {
        roles.insert(u.clone(), Role::User);
    }
    for m in &r.merchants {
        roles.insert(m.clone(), Role::Merchant);
    }
    for o in &r.operators {
        roles.insert(o.clone(), Role::PopOperator);
    }
    roles
}

/// Every PII token the run can produce before card issuance.
fn pii_tokens(scenario: &Scenario) -> Vec<String> {
    let mut tokens: BTreeSet<String> = scenario.pii_tokens.iter().cloned().collect();
    for s in &scenario.steps {
        if let Action::Onboard { pii, .. } = &s.action {
            tokens.extend(pii.iter().cloned());
        }
    }
    tokens.into_iter().collect()
}

impl World {
    pub fn new(cfg: &TopologyConfig, scenario: &Scenario) -> World {
        let roster = cfg.roster.clone();
        let roles = roles_of(&roster);
        let header = Header {
            schema: SCHEMA.into(),
            version: SCHEMA_VERSION,
            seed: cfg.seed,
            scenario: scenario.name.clone(),
            config: cfg.name.clone(),
            topology: Capability::ALL.into_iter().map(|c| (c, cfg.provider(c))).collect(),
            settlement_mode: cfg.settlement_mode,
            central_bank: roster.central_bank.clone(),
            networks: vec![roster.networks.card.clone(), roster.networks.atm.clone()],
            roles: roles.clone(),
            pii_tokens: pii_tokens(scenario),
        };
        let mode = match cfg.provider(Capability::C3) {
            Provider::CentralBank => DirectoryMode::Central {
                host: roster.central_bank.clone(),
            },
            Provider::Fmi => DirectoryMode::Central { host: roster.fmi.clone() },
            Provider::Tsp => DirectoryMode::Federated {
                sequencer: roster.tsp.clone(),
            },
            Provider::Pip => DirectoryMode::Isolated,
        };
        World {
            ms: MoneySystem::new(roster.central_bank.clone()),
            dir: AliasDirectory::new(mode),
            pips: PipLayer::new(roster.fmi.clone()),
            fmi: Fmi::new(roster.fmi.clone(), cfg.settlement_mode),
            cards: Scheme::new(roster.networks.card.clone()),
            atms: Scheme::new(roster.networks.atm.clone()),
            payloads: PayloadStore::default(),
            bus: Bus {
                log: EventLog::new(header),
                tick: 0,
                step: 0,
                base: 0,
                counter: 0,
                faults: cfg.faults.clone(),
                fired: BTreeSet::new(),
                central_bank: roster.central_bank.clone(),
            },
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            roles,
            labels: BTreeMap::new(),
            identities: BTreeMap::new(),
            orders: BTreeMap::new(),
            card_numbers: BTreeMap::new(),
            funding: None,
            processor: roster.central_bank.clone(),
            scheme_cap: Capability::C7,
            defer_interbank: false,
            deferred: Vec::new(),
            logged: BTreeMap::new(),
            cash_logged: 0,
            sagas_seen: BTreeMap::new(),
            instr_seen: BTreeMap::new(),
            cfg: cfg.clone(),
            roster,
        }
    }

    pub fn log(&self) -> &EventLog {
        &self.bus.log
    }

    pub fn into_log(self) -> EventLog {
        self.bus.log
    }

    pub fn account_ref(&self, label: &str) -> Option<&AccountRef> {
        self.labels.get(label)
    }

    /// Runs setup and every step, then end-state checks and the snapshot.
    pub fn run(cfg: &TopologyConfig, scenario: &Scenario) -> World {
        let mut w = World::new(cfg, scenario);
        w.begin_step(0, "setup", "setup", None);
        let setup = w.setup();
        w.end_step(0, "setup", &super::events::Expect::Ok, setup.map_err(fail), None);
        for (i, step) in scenario.steps.iter().enumerate() {
            let index = i as u32 + 1;
            let id = if step.id.is_empty() {
                format!("step-{index}")
            } else {
                step.id.clone()
            };
            let cap = step.action.capability();
            w.begin_step(index, &id, step.action.name(), cap);
            let result = w.execute(&step.action);
            w.settle_deferred();
            w.end_step(index, &id, &step.expect, result, cap);
        }
        w.finish(scenario);
        w
    }

    fn provider(&self, cap: Capability) -> Provider {
        self.cfg.provider(cap)
    }

    fn participant_for(&self, p: Provider) -> Option<ParticipantId> {
        match p {
            Provider::CentralBank => Some(self.roster.central_bank.clone()),
            Provider::Tsp => Some(self.roster.tsp.clone()),
            Provider::Fmi => Some(self.roster.fmi.clone()),
            Provider::Pip => None,
        }
    }

    fn role(&self, p: &ParticipantId) -> Option<Role> {
        self.roles.get(p).copied()
    }

    fn begin_step(&mut self, index: u32, id: &str, action: &str, cap: Option<Capability>) {
        self.bus.step = index;
        self.bus.counter = 0;
        self.bus.base = (100 * Tick::from(index)).max(self.bus.tick + 1);
        self.bus.tick = self.bus.base;
        self.ms.set_tick(self.bus.tick);
        let provider = cap.map(|c| self.provider(c));
        self.bus.emit(EventKind::StepBegin {
            index,
            id: id.to_owned(),
            action: action.to_owned(),
            capability: cap,
            provider,
        });
    }

    fn end_step(&mut self, index: u32, id: &str, expect: &super::events::Expect, result: StepResult, cap: Option<Capability>) {
        self.sync();
        let (outcome, blame) = match result {
            Ok(detail) => (Outcome::Ok { detail }, None),
            Err(f) => (Outcome::Rejected { reason: f.reason }, f.blame.filter(|b| Some(*b) != cap)),
        };
        let matched = outcome.satisfies(expect);
        self.bus.emit(EventKind::StepEnd {
            index,
            id: id.to_owned(),
            expect: expect.clone(),
            outcome,
            matched,
            blame,
        });
    }

    fn finish(&mut self, scenario: &Scenario) {
        self.sync();
        for check in &scenario.final_state {
            let actual = match check.subject.strip_prefix("cash:") {
                Some(holder) => Some(self.ms.cash().held_by(&ParticipantId::new(holder)).pence()),
                None => self.labels.get(&check.subject).and_then(|r| self.total(r)).map(MonetaryAmount::pence),
            };
            self.bus.emit(EventKind::Expectation {
                subject: check.subject.clone(),
                expected: check.equals,
                actual,
                passed: actual == Some(check.equals),
            });
        }
        let aliases = self
            .dir
            .records()
            .map(|(host, record)| AliasView {
                host: host.clone(),
                record: record.clone(),
            })
            .collect();
        self.bus.emit(EventKind::Snapshot {
            money: self.ms.snapshot(),
            aliases,
            limits: self.pips.registry.users().clone(),
        });
    }

    /// Logs ledger receipts, cash moves, saga and instruction changes made
    /// since the last call.
    fn sync(&mut self) {
        let mut fresh: Vec<Receipt> = Vec::new();
        for ledger in self.ms.all_ledgers() {
            let done = self.logged.get(ledger.id()).copied().unwrap_or(0);
            fresh.extend(ledger.journal()[done..].iter().cloned());
            self.logged.insert(ledger.id().clone(), ledger.journal().len());
        }
        fresh.sort_by(|a, b| (a.tick, &a.ledger, a.seq).cmp(&(b.tick, &b.ledger, b.seq)));
        for receipt in fresh {
            self.bus.emit(EventKind::Entry { receipt });
        }
        let cash: Vec<_> = self.ms.cash().journal()[self.cash_logged..].to_vec();
        self.cash_logged += cash.len();
        for receipt in cash {
            self.bus.emit(EventKind::CashMove { receipt });
        }
        let sagas: Vec<_> = self
            .ms
            .sagas()
            .filter(|s| self.sagas_seen.get(&s.key) != Some(&(s.state, s.applied)))
            .map(|s| (s.key.clone(), s.state, s.legs.len(), s.applied))
            .collect();
        for (key, state, legs, applied) in sagas {
            self.sagas_seen.insert(key.clone(), (state, applied));
            self.bus.emit(EventKind::Saga { key, state, legs, applied });
        }
        let instrs: Vec<_> = self
            .fmi
            .instructions()
            .filter(|r| self.instr_seen.get(&r.instr.instr_id) != Some(&(r.state, r.cycle.clone())))
            .cloned()
            .collect();
        for record in instrs {
            self.instr_seen
                .insert(record.instr.instr_id.clone(), (record.state, record.cycle.clone()));
            self.bus.emit(EventKind::Instruction { record });
        }
    }

    fn setup(&mut self) -> Result<String, String> {
        let r = self.roster.clone();
        let e = |e: crate::money::MoneyError| e.to_string();
        for b in &r.banks {
            self.ms.add_bank(b.id.clone(), amt(b.reserve)).map_err(e)?;
        }
        let dp_ops = [Op::Open, Op::Transfer, Op::Lock, Op::Drawdown, Op::Release];
        let lock_ops = [Op::Lock, Op::Drawdown, Op::Release];
        for owner in r.users.iter().chain(&r.merchants) {
            self.ms.core_mut().register(owner.clone());
        }
        for p in &r.pips {
            self.ms.core_mut().grant(p.id.clone(), &dp_ops, GrantScope::Serviced);
            self.pips.add_pip(p.id.clone());
            self.dir.add_pip(p.id.clone());
            if let Some(bin) = &p.bin {
                self.dir.set_card_prefix(p.id.clone(), bin.clone());
            }
        }
        self.ms.core_mut().grant(r.fmi.clone(), &lock_ops, GrantScope::AllAccounts);
        for b in &r.banks {
            self.ms.grant_bank(&b.id, r.fmi.clone(), &lock_ops, GrantScope::AllAccounts).map_err(e)?;
        }
        self.pips.add_provider(KycProvider::new(r.kyc.id.clone(), r.kyc.sanctioned.clone()));
        for m in r.merchants.iter().chain(&r.operators) {
            self.identities
                .insert(m.clone(), (m.to_string(), format!("{m} trading address")));
        }
        for a in &r.bank_accounts {
            let acct = self.ms.open_bank_account(&a.bank, a.owner.clone(), amt(a.balance)).map_err(e)?;
            self.labels.insert(a.label.clone(), acct);
        }
        for c in &r.cash {
            self.ms.mint_cash(c.holder.clone(), amt(c.amount));
            self.bus.emit(EventKind::CashMint {
                holder: c.holder.clone(),
                amount: amt(c.amount),
            });
        }
        for w in &r.wallets {
            let receipt = self
                .ms
                .core_mut()
                .apply(LedgerCommand::new(
                    format!("setup:wallet:{}", w.label),
                    w.pip.clone(),
                    Origin::Setup,
                    CommandKind::Open {
                        owner: w.owner.clone(),
                        form: MoneyForm::DigitalPound,
                        initial: MonetaryAmount::ZERO,
                    },
                ))
                .map_err(|e| e.to_string())?;
            let wallet = receipt.account.expect("open names account");
            self.pips.attach_wallet(&w.pip, &w.owner, wallet.clone()).map_err(|e| e.to_string())?;
            self.labels.insert(w.label.clone(), core_ref(wallet));
        }
        self.sync();
        for w in &r.wallets {
            if let Some(alias) = &w.alias {
                let wallet = self.labels[&w.label].account.clone();
                self.register_alias(alias, &wallet, &w.pip).map_err(|f| f.reason)?;
            }
        }
        Ok(format!("{} banks, {} pips", r.banks.len(), r.pips.len()))
    }

    fn execute(&mut self, action: &Action) -> StepResult {
        match action {
            Action::Onboard { user, pip, pii } => self.onboard(user, pip, pii),
            Action::Provision { wallet, user, pip, limit } => self.provision(wallet, user, pip, *limit),
            Action::RegisterAlias { alias, wallet } => {
                let w = self.label(wallet)?;
                let pip = self.servicer(&w).ok_or_else(|| fail(format!("{wallet} has no servicing pip")))?;
                self.register_alias(alias, &w.account, &pip)?;
                Ok(format!("{alias} -> {}", w.account))
            }
            Action::ValidateAlias { alias, acquirer } => self.validate_alias(alias, acquirer),
            Action::Fund { wallet, account, amount } => self.fund(wallet, account, *amount),
            Action::Defund { wallet, account, amount } => self.defund(wallet, account, *amount),
            Action::LockPayment {
                order,
                payer,
                payee,
                amount,
                expires_in,
                acquirer,
                customer_alias,
            } => self.lock_payment(order, payer, payee, *amount, *expires_in, acquirer, customer_alias),
            Action::Deliver { order } => self.deliver_order(order),
            Action::Pay {
                payer,
                payee,
                amount,
                purpose,
            } => self.pay(payer, payee, *amount, purpose),
            Action::Sweep => self.sweep(),
            Action::IssueCard { card, wallet, secret } => self.issue_card(card, wallet, secret),
            Action::PopDeposit {
                card,
                secret,
                operator,
                account,
                amount,
            } => self.pop_deposit(card, secret, operator, account, *amount),
            Action::PosPurchase {
                card,
                secret,
                merchant,
                wallet,
                authorize,
                clear,
            } => self.pos_purchase(card, secret, merchant, wallet, *authorize, *clear),
            Action::AtmBalance {
                card,
                secret,
                operator,
                account,
                shows,
            } => {
                let out = self.atm(card, secret, operator, account, AtmAction::Balance)?;
                match (shows, &out) {
                    (Some(want), Some(SessionResult::Balance { total })) if total.pence() != *want => {
                        Err(fail(format!("balance shows {total}, expected {}", amt(*want))))
                    }
                    (_, Some(SessionResult::Balance { total })) => Ok(format!("balance {total}")),
                    _ => Ok("balance".into()),
                }
            }
            Action::AtmWithdraw {
                card,
                secret,
                operator,
                account,
                amount,
            } => self
                .atm(card, secret, operator, account, AtmAction::Withdraw { amount: amt(*amount) })
                .map(|_| format!("dispensed {}", amt(*amount))),
            Action::AtmDeposit {
                card,
                secret,
                operator,
                account,
                amount,
            } => self
                .atm(card, secret, operator, account, AtmAction::Deposit { amount: amt(*amount) })
                .map(|_| format!("deposited {}", amt(*amount))),
            Action::CashPay { from, to, amount } => {
                let key = self.bus.next_id("cash");
                self.bus
                    .hop(from, to, "cash", None, "cash", json!({ "amount": amount }))
                    .map_err(fail)?;
                self.ms
                    .cash_movement(key, from, to, amt(*amount))
                    .map_err(|e| fail(e.to_string()))?;
                Ok(format!("{from} paid {to} {} in cash", amt(*amount)))
            }
        }
    }

    fn label(&self, label: &str) -> Result<AccountRef, Failure> {
        self.labels
            .get(label)
            .cloned()
            .ok_or_else(|| fail(format!("unknown account {label}")))
    }

    fn servicer(&self, acct: &AccountRef) -> Option<ParticipantId> {
        if acct.ledger.as_str() != CORE_LEDGER {
            return None;
        }
        self.pips.servicer_of(&acct.account).cloned()
    }

    fn ledger_operator(&self, ledger: &LedgerId) -> ParticipantId {
        match ledger.as_str() {
            CORE_LEDGER | crate::money::RESERVE_LEDGER => self.roster.central_bank.clone(),
            bank => ParticipantId::new(bank),
        }
    }

    fn owner(&self, acct: &AccountRef) -> Option<ParticipantId> {
        Some(self.ms.ledger(&acct.ledger)?.account(&acct.account)?.owner.clone())
    }

    fn form(&self, acct: &AccountRef) -> Option<MoneyForm> {
        Some(self.ms.ledger(&acct.ledger)?.account(&acct.account)?.form)
    }

    fn total(&self, acct: &AccountRef) -> Option<MonetaryAmount> {
        self.ms.ledger(&acct.ledger)?.total(&acct.account).ok()
    }

    fn customer_pip(&self, user: &ParticipantId) -> Option<ParticipantId> {
        self.pips
            .pips()
            .iter()
            .find(|(_, s)| s.customers.contains_key(user))
            .map(|(p, _)| p.clone())
    }

    fn identity(&self, who: &ParticipantId) -> (String, String) {
        self.identities
            .get(who)
            .cloned()
            .unwrap_or_else(|| (who.to_string(), String::new()))
    }

    /// Sends a ledger command to the ledger's operator and applies one copy
    /// per delivery.
    fn apply_on(&mut self, ledger: &LedgerId, from: &ParticipantId, cap: Capability, kind: &str, cmd: LedgerCommand) -> Result<Receipt, Failure> {
        let op = self.ledger_operator(ledger);
        let copies = if *from != op {
            self.bus
                .hop(from, &op, kind, Some(cap), "ledger", json!(cmd))
                .map_err(|e| blamed(cap, e))?
        } else {
            1
        };
        self.ms.set_tick(self.bus.tick);
        let target = self.ms.ledger_mut(ledger).ok_or_else(|| fail(format!("unknown ledger {ledger}")))?;
        let mut out = target.apply(cmd.clone());
        for _ in 1..copies {
            out = target.apply(cmd.clone());
        }
        self.sync();
        out.map_err(|e| blamed(cap, format!("{ledger} refused {kind} from {from}: {e}")))
    }

    fn onboard(&mut self, user: &ParticipantId, pip: &ParticipantId, pii: &[String]) -> StepResult {
        let idp = self.roster.kyc.id.clone();
        let cap = Some(Capability::C1);
        let body = json!({ "user": user, "pii": pii });
        self.bus.hop(user, pip, "onboard", cap, "kyc", body.clone()).map_err(fail)?;
        self.bus.hop(pip, &idp, "kyc-check", cap, "kyc", body).map_err(fail)?;
        let profile = self
            .pips
            .onboard_customer(pip, user, pii.iter().cloned().collect(), &idp)
            .map_err(|e| fail(e.to_string()))?;
        self.bus
            .hop(&idp, pip, "kyc-result", cap, "kyc", json!({ "user": user, "status": profile.kyc_status }))
            .map_err(fail)?;
        if pii.len() >= 2 {
            self.identities.insert(user.clone(), (pii[0].clone(), pii[1].clone()));
        }
        match profile.kyc_status {
            KycStatus::Verified => Ok(format!("{user} verified at {pip}")),
            s => Err(fail(format!("kyc {s:?}"))),
        }
    }

    fn provision(&mut self, label: &str, user: &ParticipantId, pip: &ParticipantId, limit: u64) -> StepResult {
        let cb = self.roster.central_bank.clone();
        let cap = Some(Capability::C1);
        let key = self.bus.next_id("open");
        self.bus
            .hop(pip, &cb, "open-wallet", cap, "ledger", json!({ "owner": user, "form": MoneyForm::DigitalPound }))
            .map_err(fail)?;
        self.ms.set_tick(self.bus.tick);
        let p = self
            .pips
            .provision_wallet(&key, pip, user, amt(limit), self.ms.core_mut())
            .map_err(|e| fail(e.to_string()));
        self.sync();
        let p = p?;
        let host = self.pips.registry.host.clone();
        self.bus
            .hop(pip, &host, "limit-register", cap, "registry", json!({ "user": user, "wallet": p.wallet, "limit": p.limit }))
            .map_err(fail)?;
        self.bus.emit(EventKind::LimitRegistered {
            user: user.clone(),
            wallet: p.wallet.clone(),
            limit: p.limit,
        });
        self.labels.insert(label.to_owned(), core_ref(p.wallet.clone()));
        Ok(format!("{label} = {} (limit {})", p.wallet, p.limit))
    }

    fn register_alias(&mut self, alias: &str, wallet: &AccountId, pip: &ParticipantId) -> Result<(), Failure> {
        let cap = Some(Capability::C3);
        let tick = self.bus.base;
        let c3 = |e: String| blamed(Capability::C3, e);
        match self.dir.mode().clone() {
            DirectoryMode::Central { host } => {
                self.bus
                    .hop(pip, &host, "alias-register", cap, "directory", json!({ "alias": alias, "wallet": wallet, "pip": pip }))
                    .map_err(c3)?;
            }
            DirectoryMode::Federated { sequencer } => {
                self.bus
                    .hop(pip, &sequencer, "alias-claim", cap, "directory", json!({ "alias": alias, "pip": pip }))
                    .map_err(c3)?;
            }
            DirectoryMode::Isolated => {}
        }
        let result = self.dir.register(alias, wallet, pip, tick);
        match &result {
            Ok(_) => {
                let host = self.dir.record_host(pip);
                self.bus.emit(EventKind::AliasActive {
                    alias: alias.to_owned(),
                    wallet: wallet.clone(),
                    pip: pip.clone(),
                    host,
                });
                if let DirectoryMode::Federated { sequencer } = self.dir.mode().clone() {
                    let mut others: Vec<ParticipantId> = self.dir.stores().keys().filter(|p| *p != pip).cloned().collect();
                    others.shuffle(&mut self.rng);
                    for other in others {
                        // Broadcast loss leaves the peer's index stale; the
                        // sequencer's log stays authoritative.
                        let _ = self.bus.hop(
                            &sequencer,
                            &other,
                            "alias-broadcast",
                            cap,
                            "directory",
                            json!({ "alias": alias, "pip": pip }),
                        );
                    }
                }
            }
            Err(e) => self.bus.emit(EventKind::AliasRejected {
                alias: alias.to_owned(),
                pip: pip.clone(),
                reason: e.to_string(),
            }),
        }
        result.map(|_| ()).map_err(|e| c3(e.to_string()))
    }

    /// Directory lookup from `via`, with the messages the directory mode needs.
    fn lookup(&mut self, alias: &str, via: &ParticipantId, validate: bool) -> Result<(Option<Resolution>, bool), AliasError> {
        let cap = Some(Capability::C3);
        let lost = |p: &ParticipantId| AliasError::Unavailable { participant: p.clone() };
        let query = json!({ "alias": alias });
        let mut effective = via.clone();
        match self.dir.mode().clone() {
            DirectoryMode::Central { host } if *via != host => {
                self.bus
                    .hop(via, &host, "alias-lookup", cap, "directory", query)
                    .map_err(|_| lost(&host))?;
            }
            DirectoryMode::Federated { sequencer } => {
                if let Some(store) = self.dir.stores().get(via) {
                    let owner = store.index.get(alias).map(|c| c.pip.clone());
                    if let Some(owner) = owner.filter(|o| o != via) {
                        self.bus
                            .hop(via, &owner, "alias-lookup", cap, "directory", query)
                            .map_err(|_| lost(&owner))?;
                    }
                } else if *via != sequencer {
                    self.bus
                        .hop(via, &sequencer, "alias-lookup", cap, "directory", query)
                        .map_err(|_| lost(&sequencer))?;
                    effective = sequencer;
                }
            }
            _ => {}
        }
        let out = if validate {
            self.dir.validate(alias, &effective).map(|v| (None, v.exists))
        } else {
            self.dir.resolve(alias, &effective).map(|r| (Some(r), true))
        };
        let (wallet, exists, error) = match &out {
            Ok((r, exists)) => (r.as_ref().map(|r| r.wallet.clone()), Some(*exists), None),
            Err(e) => (None, None, Some(e.to_string())),
        };
        self.bus.emit(EventKind::Resolve {
            alias: alias.to_owned(),
            via: via.clone(),
            wallet,
            exists,
            error,
        });
        out
    }

    /// Routes a merchant-gateway message from the acquirer to `dest`.
    fn gateway(&mut self, acquirer: &ParticipantId, dest: &ParticipantId, kind: &str, body: Value) -> Result<(), Failure> {
        let cap = Capability::C6;
        match self.participant_for(self.provider(cap)) {
            None => {
                if self.role(acquirer) != Some(Role::Pip) {
                    return Err(blamed(cap, format!("{acquirer} is not a pip and cannot run a pip-operated gateway")));
                }
                if acquirer != dest {
                    self.bus.hop(acquirer, dest, kind, Some(cap), "gateway", body).map_err(|e| blamed(cap, e))?;
                }
            }
            Some(hub) => {
                self.bus
                    .hop(acquirer, &hub, kind, Some(cap), "gateway", body.clone())
                    .map_err(|e| blamed(cap, e))?;
                if hub != *dest {
                    self.bus.hop(&hub, dest, kind, Some(cap), "gateway", body).map_err(|e| blamed(cap, e))?;
                }
            }
        }
        Ok(())
    }

    fn validate_alias(&mut self, alias: &str, acquirer: &ParticipantId) -> StepResult {
        let partner = self
            .roster
            .acquirers
            .iter()
            .find(|a| &a.id == acquirer)
            .map(|a| a.partner_pip.clone())
            .ok_or_else(|| fail(format!("{acquirer} is not a configured acquirer")))?;
        let hub = self.participant_for(self.provider(Capability::C6)).unwrap_or_else(|| acquirer.clone());
        self.gateway(acquirer, &hub, "validate-alias", json!({ "alias": alias }))?;
        let via = if matches!(self.dir.mode(), DirectoryMode::Isolated) {
            self.bus
                .hop(&hub, &partner, "alias-lookup", Some(Capability::C6), "gateway", json!({ "alias": alias }))
                .map_err(|e| blamed(Capability::C6, e))?;
            partner
        } else {
            hub
        };
        let (_, exists) = self
            .lookup(alias, &via, true)
            .map_err(|e| blamed(Capability::C3, e.to_string()))?;
        if exists {
            Ok(format!("{alias} exists"))
        } else {
            Err(blamed(Capability::C3, format!("{alias} not found")))
        }
    }

    fn payment_failure(e: &PipError) -> Failure {
        match e {
            PipError::Alias(_) => blamed(Capability::C3, e.to_string()),
            PipError::PayloadChannelDown { .. } | PipError::RouteMismatch { .. } => blamed(Capability::C2, e.to_string()),
            _ => fail(e.to_string()),
        }
    }

    /// Runs a payment and logs its outcome with tick counts.
    fn run_payment(&mut self, cap: Capability, req: PaymentRequest) -> Result<Vec<Receipt>, Failure> {
        let started = self.bus.tick;
        self.defer_interbank = false;
        let result = initiate_payment(self, &req);
        self.funding = None;
        let to = match (&result, &req.payee) {
            (Ok(o), _) => o.rail.payee.clone(),
            (Err(_), Payee::Account(a)) => a.clone(),
            (Err(_), Payee::Alias(a)) => AccountRef::new(CORE_LEDGER, format!("alias:{a}")),
        };
        match result {
            Ok(out) if self.defer_interbank => {
                self.deferred.push(Deferred {
                    id: req.msg_id.to_string(),
                    cap,
                    from: req.payer.clone(),
                    to,
                    amount: req.amount,
                    started,
                });
                Ok(out.receipts)
            }
            Ok(out) => {
                self.payment_event(req.msg_id.as_str(), cap, &req.payer, &to, req.amount, started, None);
                Ok(out.receipts)
            }
            Err(e) => {
                let stage = match &e {
                    PipError::PayloadChannelDown { .. } | PipError::RouteMismatch { .. } | PipError::UnknownPayee(_) => "payload",
                    PipError::Alias(_) => "alias",
                    PipError::InsufficientFunds { .. } => "funds",
                    _ => "rail",
                };
                self.payment_event(
                    req.msg_id.as_str(),
                    cap,
                    &req.payer,
                    &to,
                    req.amount,
                    started,
                    Some((stage, e.to_string())),
                );
                Err(Self::payment_failure(&e))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn payment_event(&mut self, id: &str, cap: Capability, from: &AccountRef, to: &AccountRef, amount: MonetaryAmount, started: Tick, failed: Option<(&str, String)>) {
        let settled = failed.is_none().then_some(self.bus.tick);
        let (failed_at, reason) = match failed {
            Some((s, r)) => (Some(s.to_owned()), Some(r)),
            None => (None, None),
        };
        self.bus.emit(EventKind::Payment {
            payment_id: id.to_owned(),
            capability: cap,
            from: from.clone(),
            to: to.clone(),
            amount,
            started,
            settled,
            ticks: settled.map(|s| s - started),
            fee: MonetaryAmount::ZERO,
            failed_at,
            reason,
        });
    }

    fn body(&self, payer: &ParticipantId, payee: &ParticipantId, purpose: &str) -> PayloadBody {
        let (payer_name, payer_address) = self.identity(payer);
        let (payee_name, payee_address) = self.identity(payee);
        PayloadBody {
            payer_name,
            payer_address,
            payee_name,
            payee_address,
            purpose: purpose.to_owned(),
        }
    }

    fn fund(&mut self, wallet: &str, account: &str, amount: u64) -> StepResult {
        let w = self.label(wallet)?;
        let a = self.label(account)?;
        let pip = self.servicer(&w).ok_or_else(|| fail(format!("{wallet} has no servicing pip")))?;
        let bank = self.ledger_operator(&a.ledger);
        self.bus
            .hop(&pip, &bank, "funding-request", Some(Capability::C4), "open-banking", json!({ "from": a, "to": w, "amount": amount }))
            .map_err(fail)?;
        let user = self.owner(&w).unwrap_or_else(|| ParticipantId::new(""));
        let req = PaymentRequest {
            msg_id: self.bus.next_id("pay").into(),
            payer_pip: bank,
            payer: a,
            payee: Payee::Account(w),
            amount: amt(amount),
            lock: None,
            payload: Some(self.body(&user, &user, "wallet funding")),
        };
        self.run_payment(Capability::C4, req)?;
        Ok(format!("funded {wallet} with {}", amt(amount)))
    }

    fn defund(&mut self, wallet: &str, account: &str, amount: u64) -> StepResult {
        let w = self.label(wallet)?;
        let a = self.label(account)?;
        let pip = self.servicer(&w).ok_or_else(|| fail(format!("{wallet} has no servicing pip")))?;
        let user = self.owner(&w).unwrap_or_else(|| ParticipantId::new(""));
        let req = PaymentRequest {
            msg_id: self.bus.next_id("pay").into(),
            payer_pip: pip,
            payer: w,
            payee: Payee::Account(a),
            amount: amt(amount),
            lock: None,
            payload: Some(self.body(&user, &user, "wallet defunding")),
        };
        self.run_payment(Capability::C4, req)?;
        Ok(format!("defunded {} from {wallet}", amt(amount)))
    }

    /// Participant that places and draws conditional-payment locks.
    fn programmable_provider(&self, customer: &ParticipantId, payer: &AccountRef) -> Option<ParticipantId> {
        match self.participant_for(self.provider(Capability::C5)) {
            Some(p) => Some(p),
            None => self.servicer(payer).or_else(|| self.customer_pip(customer)),
        }
    }

    fn origin_of(p: Provider) -> Origin {
        match p {
            Provider::Pip => Origin::Pip,
            Provider::Fmi => Origin::Fmi,
            Provider::CentralBank => Origin::MoneySystem,
            Provider::Tsp => Origin::Harness,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn lock_payment(
        &mut self,
        order: &str,
        payer: &str,
        payee: &str,
        amount: u64,
        expires_in: Tick,
        acquirer: &ParticipantId,
        customer_alias: &str,
    ) -> StepResult {
        let cap = Capability::C5;
        let payer_ref = self.label(payer)?;
        let payee_ref = self.label(payee)?;
        let customer = self.owner(&payer_ref).ok_or_else(|| fail(format!("{payer} has no owner")))?;
        let payer_pip = self
            .servicer(&payer_ref)
            .unwrap_or_else(|| self.ledger_operator(&payer_ref.ledger));
        let merchant = self.owner(&payee_ref).unwrap_or_else(|| ParticipantId::new(""));
        let (name, address) = self.identity(&customer);
        self.gateway(
            acquirer,
            &payer_pip,
            "payment-request",
            json!({
                "order": order,
                "amount": amount,
                "customer": customer_alias,
                "deliver_to": { "name": name, "address": address },
                "merchant": merchant,
                "pay_to": payee_ref,
            }),
        )?;
        let provider = self
            .programmable_provider(&customer, &payer_ref)
            .ok_or_else(|| blamed(cap, "no pip services the payer"))?;
        let tag = format!("delivered:{order}");
        let expiry = self.bus.base + expires_in;
        if provider != payer_pip {
            self.bus
                .hop(
                    &payer_pip,
                    &provider,
                    "lock-request",
                    Some(cap),
                    "programmable",
                    json!({ "account": payer_ref, "amount": amount, "beneficiary": payee_ref, "condition": tag, "expiry": expiry }),
                )
                .map_err(|e| blamed(cap, e))?;
        }
        let beneficiary = if payee_ref.ledger == payer_ref.ledger {
            Beneficiary::Local(payee_ref.account.clone())
        } else {
            Beneficiary::External(payee_ref.clone())
        };
        let cmd = LedgerCommand::new(
            format!("{order}/lock"),
            provider.clone(),
            Self::origin_of(self.provider(cap)),
            CommandKind::Lock {
                account: payer_ref.account.clone(),
                amount: amt(amount),
                beneficiary,
                condition_tag: tag.clone(),
                expiry,
            },
        );
        let receipt = self.apply_on(&payer_ref.ledger, &provider, cap, "lock", cmd)?;
        let lock = receipt.lock.expect("lock receipt names lock");
        self.orders.insert(
            order.to_owned(),
            Order {
                payer: payer_ref,
                payee: payee_ref,
                amount: amt(amount),
                lock: lock.clone(),
                tag,
                provider,
                payer_pip,
                acquirer: acquirer.clone(),
                customer,
            },
        );
        Ok(format!("{order}: {lock} holds {} until tick {expiry}", amt(amount)))
    }

    fn deliver_order(&mut self, order: &str) -> StepResult {
        let cap = Capability::C5;
        let o = self
            .orders
            .get(order)
            .cloned()
            .ok_or_else(|| blamed(cap, format!("{order} has no lock to draw")))?;
        self.gateway(&o.acquirer, &o.provider, "delivery-confirmed", json!({ "order": order, "condition": o.tag }))?;
        if o.provider != o.payer_pip {
            self.bus
                .hop(&o.provider, &o.payer_pip, "release-instruction", Some(cap), "programmable", json!({ "order": order, "lock": o.lock }))
                .map_err(|e| blamed(cap, e))?;
        }
        let merchant = self.owner(&o.payee).unwrap_or_else(|| ParticipantId::new(""));
        self.funding = Some(Funding::Lock {
            lock: o.lock.clone(),
            proof: EventProof::new(o.tag.clone()),
            caller: o.provider.clone(),
        });
        let req = PaymentRequest {
            msg_id: self.bus.next_id("pay").into(),
            payer_pip: o.payer_pip.clone(),
            payer: o.payer.clone(),
            payee: Payee::Account(o.payee.clone()),
            amount: o.amount,
            lock: Some(o.lock.clone()),
            payload: Some(self.body(&o.customer, &merchant, order)),
        };
        self.run_payment(cap, req).map_err(|f| Failure {
            blame: f.blame.or(Some(cap)),
            ..f
        })?;
        Ok(format!("{order} paid {} to {}", o.amount, o.payee))
    }

    fn pay(&mut self, payer: &str, payee: &str, amount: u64, purpose: &str) -> StepResult {
        let from = self.label(payer)?;
        let pip = self.servicer(&from).ok_or_else(|| fail(format!("{payer} has no servicing pip")))?;
        let target = if payee.starts_with('+') || payee.starts_with('@') {
            Payee::Alias(payee.to_owned())
        } else {
            Payee::Account(self.label(payee)?)
        };
        let user = self.owner(&from).unwrap_or_else(|| ParticipantId::new(""));
        let payee_owner = match &target {
            Payee::Account(a) => self.owner(a),
            Payee::Alias(_) => None,
        }
        .unwrap_or_else(|| ParticipantId::new(payee));
        let req = PaymentRequest {
            msg_id: self.bus.next_id("pay").into(),
            payer_pip: pip,
            payer: from,
            payee: target,
            amount: amt(amount),
            lock: None,
            payload: Some(self.body(&user, &payee_owner, purpose)),
        };
        self.run_payment(Capability::C2, req)?;
        Ok(format!("paid {} to {payee}", amt(amount)))
    }

    fn sweep(&mut self) -> StepResult {
        let cap = Capability::C5;
        let now = self.bus.base;
        let mut released = MonetaryAmount::ZERO;
        let mut count = 0;
        let orders: Vec<(String, Order)> = self.orders.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (name, o) in orders {
            let Some(lock) = self.ms.ledger(&o.payer.ledger).and_then(|l| l.lock(&o.lock)).cloned() else {
                continue;
            };
            if lock.state != LockState::Active || lock.expiry > now {
                continue;
            }
            let cmd = LedgerCommand::new(
                format!("{name}/expire"),
                o.provider.clone(),
                Self::origin_of(self.provider(cap)),
                CommandKind::Expire { lock: o.lock.clone() },
            );
            self.apply_on(&o.payer.ledger, &o.provider, cap, "expire", cmd)?;
            released = released.checked_add(lock.remaining).expect("bounded");
            count += 1;
        }
        Ok(format!("released {count} expired locks totalling {released}"))
    }

    /// Member of the scheme network that processes for capability `cap`.
    fn scheme_processor(&self, cap: Capability, issuing_pip: &ParticipantId) -> Result<ParticipantId, Failure> {
        let p = self
            .participant_for(self.provider(cap))
            .unwrap_or_else(|| issuing_pip.clone());
        let network = if cap == Capability::C7 {
            &self.roster.networks.card
        } else {
            &self.roster.networks.atm
        };
        match self.role(&p) {
            Some(Role::Pip) | Some(Role::Fmi) => Ok(p),
            _ => Err(blamed(cap, format!("{p} is not a member of {network}"))),
        }
    }

    fn issue_card(&mut self, label: &str, wallet: &str, secret: &str) -> StepResult {
        let cap = Capability::C7;
        let w = self.label(wallet)?;
        let servicer = self.servicer(&w).ok_or_else(|| fail(format!("{wallet} has no servicing pip")))?;
        let holder = self.owner(&w).unwrap_or_else(|| ParticipantId::new(""));
        let issuer = self
            .participant_for(self.provider(cap))
            .unwrap_or_else(|| servicer.clone());
        if issuer != servicer {
            let (name, _) = self.identity(&holder);
            self.bus
                .hop(&servicer, &issuer, "card-request", Some(cap), "scheme", json!({ "cardholder": name, "wallet": w }))
                .map_err(|e| blamed(cap, e))?;
        }
        self.scheme_processor(cap, &issuer)?;
        let bin = self
            .roster
            .pips
            .iter()
            .find(|p| p.id == issuer)
            .and_then(|p| p.bin.clone())
            .ok_or_else(|| blamed(cap, format!("{issuer} has no issuing partner with a card BIN")))?;
        self.processor = issuer.clone();
        self.scheme_cap = cap;
        let mut cards = std::mem::replace(&mut self.cards, Scheme::new(""));
        let issued = cards.issue_card(self, &issuer, &holder, &w, &bin, secret);
        self.cards = cards;
        let card = issued.map_err(|e| blamed(cap, e.to_string()))?;
        self.atms.enroll(card.clone());
        self.card_numbers.insert(label.to_owned(), card.card_number.clone());
        Ok(format!("card ending {} issued by {issuer}", &card.card_number[12..]))
    }

    fn card(&self, label: &str, cap: Capability) -> Result<(String, ParticipantId), Failure> {
        let number = self
            .card_numbers
            .get(label)
            .cloned()
            .ok_or_else(|| blamed(cap, format!("no card {label} has been issued")))?;
        let issuer = self
            .cards
            .card(&number)
            .map(|c| c.issuing_pip.clone())
            .expect("issued cards are recorded");
        Ok((number, issuer))
    }

    fn scheme_auth_event(&mut self, network: &ParticipantId, txn: &SchemeTransaction) {
        self.bus.emit(EventKind::SchemeAuth {
            network: network.clone(),
            processor: self.processor.clone(),
            txn: txn.clone(),
        });
    }

    fn decline_text(state: &AuthState) -> Option<String> {
        match state {
            AuthState::Declined(r) => Some(format!(
                "declined: {}",
                serde_json::to_value(r).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
            )),
            _ => None,
        }
    }

    fn scheme_payment(&mut self, txn: &SchemeTransaction, cap: Capability, cleared: MonetaryAmount, started: Tick) {
        let (from, to) = match txn.kind {
            TxnKind::AtmDeposit => (txn.counterparty_account.clone(), txn.wallet.clone()),
            _ => (txn.wallet.clone(), txn.counterparty_account.clone()),
        };
        self.payment_event(&txn.txn_id, cap, &from, &to, cleared, started, None);
    }

    fn pop_deposit(&mut self, label: &str, secret: &str, operator: &ParticipantId, account: &str, amount: u64) -> StepResult {
        let cap = Capability::C7;
        let network = self.roster.networks.card.clone();
        let (number, issuer) = self.card(label, cap)?;
        let acct = self.label(account)?;
        let processor = self.scheme_processor(cap, &issuer)?;
        let started = self.bus.tick;
        let txn_id = self.bus.next_id("txn");
        let req = json!({ "txn": txn_id, "card": number, "amount": amount, "kind": TxnKind::AtmDeposit });
        self.bus.hop(operator, &network, "auth-request", Some(cap), "scheme", req.clone()).map_err(|e| blamed(cap, e))?;
        self.bus.hop(&network, &processor, "auth-request", Some(cap), "scheme", req).map_err(|e| blamed(cap, e))?;
        self.processor = processor.clone();
        self.scheme_cap = cap;
        let mut cards = std::mem::replace(&mut self.cards, Scheme::new(""));
        let auth = cards.authorize(self, &txn_id, &number, secret, amt(amount), TxnKind::AtmDeposit, operator, &acct);
        let txn = match auth {
            Ok(t) => t,
            Err(e) => {
                self.cards = cards;
                return Err(blamed(cap, e.to_string()));
            }
        };
        self.scheme_auth_event(&network, &txn);
        if let Some(d) = Self::decline_text(&txn.auth_state) {
            self.cards = cards;
            return Err(fail(d));
        }
        let out = self
            .bus
            .hop(&network, &processor, "clearing", Some(cap), "scheme", json!({ "txn": txn_id, "amount": amount }))
            .map_err(|e| blamed(cap, e))
            .and_then(|_| cards.clear_and_settle(self, &txn_id, amt(amount)).map_err(|e| blamed(cap, e.to_string())));
        self.cards = cards;
        let clearing = out?;
        self.bus.emit(EventKind::SchemeCleared {
            network,
            txn_id: txn_id.clone(),
            cleared: clearing.cleared,
            released: clearing.released,
        });
        self.scheme_payment(&txn, cap, clearing.cleared, started);
        Ok(format!("{} deposited at {operator}", clearing.cleared))
    }

    fn pos_purchase(&mut self, label: &str, secret: &str, merchant: &ParticipantId, wallet: &str, authorize: u64, clear: u64) -> StepResult {
        let cap = Capability::C7;
        let network = self.roster.networks.card.clone();
        let (number, issuer) = self.card(label, cap)?;
        let merchant_wallet = self.label(wallet)?;
        let processor = self.scheme_processor(cap, &issuer)?;
        let started = self.bus.tick;
        let txn_id = self.bus.next_id("txn");
        let req = json!({ "txn": txn_id, "card": number, "amount": authorize, "kind": TxnKind::PosPurchase });
        self.bus.hop(merchant, &network, "auth-request", Some(cap), "scheme", req.clone()).map_err(|e| blamed(cap, e))?;
        self.bus.hop(&network, &processor, "auth-request", Some(cap), "scheme", req).map_err(|e| blamed(cap, e))?;
        self.processor = processor.clone();
        self.scheme_cap = cap;
        let mut cards = std::mem::replace(&mut self.cards, Scheme::new(""));
        let out = (|| {
            let txn = cards
                .authorize(self, &txn_id, &number, secret, amt(authorize), TxnKind::PosPurchase, merchant, &merchant_wallet)
                .map_err(|e| blamed(cap, e.to_string()))?;
            self.scheme_auth_event(&network, &txn);
            if let Some(d) = Self::decline_text(&txn.auth_state) {
                return Err(fail(d));
            }
            self.bus
                .hop(&network, &processor, "clearing", Some(cap), "scheme", json!({ "txn": txn_id, "amount": clear }))
                .map_err(|e| blamed(cap, e))?;
            let c = cards
                .clear_and_settle(self, &txn_id, amt(clear))
                .map_err(|e| blamed(cap, e.to_string()))?;
            Ok((txn, c))
        })();
        self.cards = cards;
        let (txn, clearing) = out?;
        self.bus.emit(EventKind::SchemeCleared {
            network,
            txn_id,
            cleared: clearing.cleared,
            released: clearing.released,
        });
        self.scheme_payment(&txn, cap, clearing.cleared, started);
        Ok(format!("authorized {}, cleared {}, released {}", amt(authorize), clearing.cleared, clearing.released))
    }

    fn atm(&mut self, label: &str, secret: &str, operator: &ParticipantId, account: &str, action: AtmAction) -> Result<Option<SessionResult>, Failure> {
        let cap = Capability::C8;
        let network = self.roster.networks.atm.clone();
        let (number, issuer) = self.card(label, cap)?;
        let acct = self.label(account)?;
        let processor = self.scheme_processor(cap, &issuer)?;
        let started = self.bus.tick;
        let session = self.bus.next_id("txn");
        let req = json!({ "txn": session, "card": number, "action": action });
        self.bus.hop(operator, &network, "atm-request", Some(cap), "scheme", req.clone()).map_err(|e| blamed(cap, e))?;
        self.bus.hop(&network, &processor, "atm-request", Some(cap), "scheme", req).map_err(|e| blamed(cap, e))?;
        self.processor = processor;
        self.scheme_cap = cap;
        let mut atms = std::mem::replace(&mut self.atms, Scheme::new(""));
        let out = atms.atm_session(self, &session, &number, secret, &action, operator, &acct);
        let txn = atms.txn(&session).cloned();
        self.atms = atms;
        let result = out.map_err(|e| blamed(cap, e.to_string()))?;
        if let Some(t) = &txn {
            self.scheme_auth_event(&network, t);
        }
        match &result {
            SessionResult::Declined { reason } => Err(fail(format!(
                "declined: {}",
                serde_json::to_value(reason).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
            ))),
            SessionResult::Completed { clearing } => {
                self.bus.emit(EventKind::SchemeCleared {
                    network,
                    txn_id: session,
                    cleared: clearing.cleared,
                    released: clearing.released,
                });
                if let Some(t) = &txn {
                    self.scheme_payment(t, cap, clearing.cleared, started);
                }
                Ok(Some(result))
            }
            SessionResult::Balance { .. } => Ok(Some(result)),
        }
    }

    /// Clears an instruction and settles it in its own cycle, or leaves it
    /// for the end-of-step net cycle when it is bank-to-bank in net mode.
    fn clear_and_settle(&mut self, instr: ClearingInstruction) -> Result<Vec<Receipt>, String> {
        let id = instr.instr_id.clone();
        let rec = self
            .fmi
            .submit_instruction(&self.ms, &self.pips.registry, instr)
            .map_err(|e| e.to_string());
        self.sync();
        let rec = rec?;
        if rec.state == InstructionState::Rejected {
            return Err(format!("instruction {id} rejected: {}", rec.reason.unwrap_or_default()));
        }
        if rec.state == InstructionState::Settled {
            return Ok(Vec::new());
        }
        if self.cfg.settlement_mode == crate::fmi::SettlementMode::Net && rec.direction == Direction::CobmToCobm {
            self.defer_interbank = true;
            return Ok(Vec::new());
        }
        self.run_cycle(&format!("{id}/cycle"))
    }

    fn cycle_event(&mut self, cycle_id: &str, state: CycleState, cause: Option<String>) {
        let report = self.fmi.reports().iter().rev().find(|r| r.cycle_id == cycle_id).cloned();
        self.bus.emit(EventKind::Cycle {
            cycle_id: cycle_id.to_owned(),
            mode: self.fmi.mode,
            state,
            instructions: report.as_ref().map(|r| r.instructions.clone()).unwrap_or_default(),
            cleared_total: report.as_ref().map(|r| r.cleared_total).unwrap_or_default(),
            obligations: report.map(|r| r.obligations).unwrap_or_default(),
            cause,
        });
    }

    fn run_cycle(&mut self, cycle_id: &str) -> Result<Vec<Receipt>, String> {
        let driver = self.fmi.id.clone();
        let first = {
            let bus = &mut self.bus;
            let mut hook = |leg: &SagaLeg, i: usize| bus.leg(&driver, Some(Capability::C4), leg, i);
            self.fmi.settle_cycle(cycle_id, &mut self.ms, &mut hook)
        };
        self.sync();
        let mut result = first;
        for _ in 0..16 {
            match result {
                Err(FmiError::Interrupted { .. }) => {
                    self.cycle_event(cycle_id, CycleState::Interrupted, None);
                    self.bus.tick += 1;
                    self.bus.emit(EventKind::Fault {
                        fault: "restart".into(),
                        target: driver.to_string(),
                        effect: "recovering in-flight cycles".into(),
                    });
                    let outcomes = {
                        let bus = &mut self.bus;
                        let mut hook = |leg: &SagaLeg, i: usize| bus.leg(&driver, Some(Capability::C4), leg, i);
                        self.fmi.recover(&mut self.ms, &mut hook)
                    };
                    self.sync();
                    result = outcomes
                        .into_iter()
                        .find(|r| match r {
                            Ok(rep) => rep.cycle_id == cycle_id,
                            Err(FmiError::Interrupted { cycle }) | Err(FmiError::CycleAborted { cycle, .. }) => cycle == cycle_id,
                            Err(_) => false,
                        })
                        .unwrap_or(Err(FmiError::NothingToSettle));
                }
                _ => break,
            }
        }
        match result {
            Ok(rep) => {
                self.cycle_event(cycle_id, CycleState::Settled, None);
                Ok(rep.receipts)
            }
            Err(FmiError::NothingToSettle) => Ok(Vec::new()),
            Err(FmiError::CycleAborted { cause, .. }) => {
                self.cycle_event(cycle_id, CycleState::Aborted, Some(cause.clone()));
                Err(format!("settlement aborted: {cause}"))
            }
            Err(e) => Err(e.to_string()),
        }
    }

    fn settle_deferred(&mut self) {
        if self.deferred.is_empty() {
            return;
        }
        let cycle = format!("{:02}-net-cycle", self.bus.step);
        let settled = self.run_cycle(&cycle).is_ok();
        for d in std::mem::take(&mut self.deferred) {
            let failed = (!settled).then(|| ("rail", format!("net cycle {cycle} failed")));
            self.payment_event(&d.id, d.cap, &d.from, &d.to, d.amount, d.started, failed);
        }
    }

    fn payload_route(&self) -> PayloadRoute {
        match self.provider(Capability::C2) {
            Provider::Pip => PayloadRoute::Peer,
            Provider::Tsp => PayloadRoute::TspRelay(self.roster.tsp.clone()),
            Provider::Fmi => PayloadRoute::Fmi(self.roster.fmi.clone()),
            Provider::CentralBank => PayloadRoute::CentralBank(self.roster.central_bank.clone()),
        }
    }

    fn void_payload(&mut self, msg_id: &crate::ids::MsgId) {
        let stored = self
            .payloads
            .receipts()
            .get(msg_id)
            .and_then(|r| self.payloads.at(&r.to).and_then(|m| m.get(msg_id)).cloned());
        if let (Some(payload), Some(r)) = (stored, self.payloads.void(msg_id)) {
            self.bus.emit(EventKind::Payload {
                msg_id: msg_id.clone(),
                action: PayloadAction::Voided,
                from: r.from,
                to: r.to,
                route: r.route.name().into(),
                intermediaries: r.intermediaries,
                digest: r.digest,
                payload,
            });
        }
    }

    fn submit_rail(&mut self, payer_pip: &ParticipantId, msg: &RailMessage) -> PipResult<Vec<Receipt>> {
        let rail_down = |e: String| PipError::Rail(e);
        let both_core = msg.payer.ledger.as_str() == CORE_LEDGER && msg.payee.ledger.as_str() == CORE_LEDGER;
        if both_core && msg.lock.is_none() {
            let cb = self.roster.central_bank.clone();
            let copies = self
                .bus
                .hop(payer_pip, &cb, "rail", Some(Capability::C2), "rail", json!(msg))
                .map_err(rail_down)?;
            self.bus.emit(EventKind::Rail {
                submitted_by: payer_pip.clone(),
                message: msg.clone(),
            });
            let cmd = LedgerCommand::new(
                msg.msg_id.as_str(),
                payer_pip.clone(),
                Origin::Pip,
                CommandKind::Transfer {
                    from: msg.payer.account.clone(),
                    to: msg.payee.account.clone(),
                    amount: msg.amount,
                },
            );
            self.ms.set_tick(self.bus.tick);
            let core = self.ms.core_mut();
            let mut out = core.apply(cmd.clone());
            for _ in 1..copies {
                out = core.apply(cmd.clone());
            }
            self.sync();
            return out.map(|r| vec![r]).map_err(|e| PipError::Rail(e.to_string()));
        }
        let fmi = self.fmi.id.clone();
        self.bus
            .hop(payer_pip, &fmi, "rail", Some(Capability::C4), "rail", json!(msg))
            .map_err(rail_down)?;
        self.bus.emit(EventKind::Rail {
            submitted_by: payer_pip.clone(),
            message: msg.clone(),
        });
        let funding = match (&msg.lock, self.funding.clone()) {
            (None, _) => Funding::Available,
            (Some(_), Some(f @ Funding::Lock { .. })) => f,
            (Some(l), _) => return Err(PipError::Rail(format!("no release proof for {l}"))),
        };
        let party = |w: &World, a: &AccountRef| Party {
            participant: w.owner(a).unwrap_or_else(|| ParticipantId::new("")),
            account: a.clone(),
        };
        let instr = ClearingInstruction {
            instr_id: msg.msg_id.to_string(),
            debtor: party(self, &msg.payer),
            creditor: party(self, &msg.payee),
            amount: msg.amount,
            source_form: self.form(&msg.payer).ok_or_else(|| PipError::UnknownPayee(msg.payer.to_string()))?,
            dest_form: self.form(&msg.payee).ok_or_else(|| PipError::UnknownPayee(msg.payee.to_string()))?,
            funding,
            payload_digest: msg.payload_digest.clone(),
        };
        self.clear_and_settle(instr).map_err(PipError::Rail)
    }
}

impl PaymentRails for World {
    fn resolve_alias(&mut self, alias: &str, via: &ParticipantId) -> Result<Resolution, AliasError> {
        let (r, _) = self.lookup(alias, via, false)?;
        Ok(r.expect("resolve returns a resolution"))
    }

    fn endpoint(&self, payee: &AccountRef) -> Option<ParticipantId> {
        if payee.ledger.as_str() == CORE_LEDGER {
            return self.servicer(payee);
        }
        let owner = self.owner(payee)?;
        Some(
            self.roster
                .merchant_acquirers
                .get(&owner)
                .cloned()
                .unwrap_or_else(|| self.ledger_operator(&payee.ledger)),
        )
    }

    fn available(&self, account: &AccountRef) -> Option<MonetaryAmount> {
        self.ms.ledger(&account.ledger)?.available(&account.account).ok()
    }

    fn deliver_payload(&mut self, from: &ParticipantId, to: &ParticipantId, payload: &ConfidentialPayload) -> PipResult<DeliveryReceipt> {
        let route = self.payload_route();
        let mut path = vec![from.clone()];
        path.extend(route.intermediaries());
        path.push(to.clone());
        for pair in path.windows(2) {
            if pair[0] == pair[1] {
                continue;
            }
            self.bus
                .hop(&pair[0], &pair[1], "payload", Some(Capability::C2), "payload", json!(payload))
                .map_err(|_| PipError::PayloadChannelDown {
                    from: from.clone(),
                    to: to.clone(),
                })?;
        }
        let r = self.payloads.exchange(from, to, payload, &route, &route)?;
        self.bus.emit(EventKind::Payload {
            msg_id: r.msg_id.clone(),
            action: PayloadAction::Stored,
            from: r.from.clone(),
            to: r.to.clone(),
            route: r.route.name().into(),
            intermediaries: r.intermediaries.clone(),
            digest: r.digest.clone(),
            payload: payload.clone(),
        });
        Ok(r)
    }

    fn submit(&mut self, payer_pip: &ParticipantId, msg: &RailMessage) -> PipResult<Vec<Receipt>> {
        let out = self.submit_rail(payer_pip, msg);
        if out.is_err() {
            self.void_payload(&msg.msg_id);
        }
        out
    }
}

impl SchemeBackend for World {
    fn now(&self) -> Tick {
        self.bus.base
    }

    fn register_card(&mut self, pip: &ParticipantId, card: &str, wallet: &AccountRef) -> Result<(), String> {
        self.bus.emit(EventKind::PiiRegistered { token: card.to_owned() });
        self.register_alias(card, &wallet.account, pip).map_err(|f| f.reason)
    }

    fn card_target(&self, card: &str) -> Option<AccountRef> {
        self.dir
            .records()
            .find(|(_, r)| r.alias.value == card && r.status == crate::alias::AliasStatus::Active)
            .map(|(_, r)| core_ref(r.wallet.clone()))
    }

    fn available(&self, account: &AccountRef) -> Option<MonetaryAmount> {
        PaymentRails::available(self, account)
    }

    fn total(&self, account: &AccountRef) -> Option<MonetaryAmount> {
        World::total(self, account)
    }

    fn cash_held(&self, holder: &ParticipantId) -> MonetaryAmount {
        self.ms.cash().held_by(holder)
    }

    fn admit_credit(&self, wallet: &AccountRef, amount: MonetaryAmount) -> Result<(), LimitDenied> {
        self.pips.registry.admit_credit(self.ms.core(), &wallet.account, amount)
    }

    fn place_hold(&mut self, txn: &SchemeTransaction) -> Result<LockId, String> {
        let beneficiary = if txn.counterparty_account.ledger == txn.wallet.ledger {
            Beneficiary::Local(txn.counterparty_account.account.clone())
        } else {
            Beneficiary::External(txn.counterparty_account.clone())
        };
        let processor = self.processor.clone();
        let cmd = LedgerCommand::new(
            format!("{}/hold", txn.txn_id),
            processor.clone(),
            Origin::Scheme,
            CommandKind::Lock {
                account: txn.wallet.account.clone(),
                amount: txn.amount,
                beneficiary,
                condition_tag: format!("cleared:{}", txn.txn_id),
                expiry: txn.expiry,
            },
        );
        let r = self
            .apply_on(&txn.wallet.ledger, &processor, self.scheme_cap, "hold", cmd)
            .map_err(|f| f.reason)?;
        Ok(r.lock.expect("lock receipt names lock"))
    }

    fn settle(&mut self, txn: &SchemeTransaction, amount: MonetaryAmount) -> Result<Vec<Receipt>, String> {
        let processor = self.processor.clone();
        let cap = self.scheme_cap;
        let proof = EventProof::new(format!("cleared:{}", txn.txn_id));
        match txn.kind {
            TxnKind::PosPurchase => {
                let lock = txn.lock.clone().ok_or("purchase without hold")?;
                let cmd = LedgerCommand::new(
                    format!("{}/draw", txn.txn_id),
                    processor.clone(),
                    Origin::Scheme,
                    CommandKind::Drawdown {
                        lock,
                        amount,
                        proof,
                        bridge: None,
                    },
                );
                self.apply_on(&txn.wallet.ledger, &processor, cap, "drawdown", cmd)
                    .map(|r| vec![r])
                    .map_err(|f| f.reason)
            }
            TxnKind::AtmWithdrawal | TxnKind::AtmDeposit => {
                let fmi = self.fmi.id.clone();
                self.bus.hop(
                    &processor,
                    &fmi,
                    "clearing-instruction",
                    Some(cap),
                    "rail",
                    json!({ "txn": txn.txn_id, "amount": amount }),
                )?;
                let party = |w: &World, a: &AccountRef| Party {
                    participant: w.owner(a).unwrap_or_else(|| ParticipantId::new("")),
                    account: a.clone(),
                };
                let (debtor, creditor, funding) = if txn.kind == TxnKind::AtmWithdrawal {
                    let lock = txn.lock.clone().ok_or("withdrawal without hold")?;
                    (
                        party(self, &txn.wallet),
                        party(self, &txn.counterparty_account),
                        Funding::Lock {
                            lock,
                            proof,
                            caller: processor.clone(),
                        },
                    )
                } else {
                    (party(self, &txn.counterparty_account), party(self, &txn.wallet), Funding::Available)
                };
                let instr = ClearingInstruction {
                    instr_id: txn.txn_id.clone(),
                    source_form: self.form(&debtor.account).ok_or("unknown debtor")?,
                    dest_form: self.form(&creditor.account).ok_or("unknown creditor")?,
                    debtor,
                    creditor,
                    amount,
                    funding,
                    payload_digest: None,
                };
                self.clear_and_settle(instr)
            }
        }
    }

    fn release_hold(&mut self, txn: &SchemeTransaction) -> Result<Vec<Receipt>, String> {
        let processor = self.processor.clone();
        let lock = txn.lock.clone().ok_or("no hold to release")?;
        let cmd = LedgerCommand::new(
            format!("{}/release", txn.txn_id),
            processor.clone(),
            Origin::Scheme,
            CommandKind::Release { lock },
        );
        self.apply_on(&txn.wallet.ledger, &processor, self.scheme_cap, "release", cmd)
            .map(|r| vec![r])
            .map_err(|f| f.reason)
    }

    fn move_cash(&mut self, key: &str, from: &ParticipantId, to: &ParticipantId, amount: MonetaryAmount) -> Result<(), String> {
        self.bus
            .hop(from, to, "cash", Some(self.scheme_cap), "cash", json!({ "amount": amount }))?;
        self.ms.cash_movement(key, from, to, amount).map(|_| ()).map_err(|e| e.to_string())?;
        self.sync();
        Ok(())
    }
}
