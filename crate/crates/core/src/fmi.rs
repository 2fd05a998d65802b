//! Clearing and settlement between digital pounds and commercial bank money.
//!
//! Instructions clear against the debtor's ledger and settle in cycles. A
//! cycle is one money-system saga: reserve movements plus the bridge legs on
//! the core and bank ledgers. Creditors are credited only at settlement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::amount::MonetaryAmount;
use crate::ids::{AccountRef, LockId, MoneyForm, ParticipantId};
use crate::ledger::{Beneficiary, EventProof, LockState, Origin, Receipt};
use crate::money::{LegHook, LimitDenied, LimitGate, MoneyError, MoneySystem, SagaLeg, CORE_LEDGER};
use crate::pip::Digest;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FmiError {
    #[error("unknown ledger for {0}")]
    UnknownLedger(AccountRef),
    #[error("unknown account {0}")]
    UnknownAccount(AccountRef),
    #[error("unsupported conversion {source_form} -> {dest_form}")]
    Unsupported { source_form: MoneyForm, dest_form: MoneyForm },
    #[error("instruction {0} reused with different contents")]
    Conflict(String),
    #[error("no cleared instructions to settle")]
    NothingToSettle,
    #[error("cycle {cycle} interrupted")]
    Interrupted { cycle: String },
    #[error("cycle {cycle} aborted: {cause}")]
    CycleAborted { cycle: String, cause: String },
    #[error("payload not delivered: {0}")]
    PayloadUndelivered(String),
    #[error("instruction {0} rejected: {1}")]
    Rejected(String, String),
}

pub type FmiResult<T> = Result<T, FmiError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SettlementMode {
    #[default]
    Gross,
    Net,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstructionState {
    Submitted,
    Cleared,
    Settled,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    DpToCobm,
    CobmToDp,
    CobmToCobm,
}

/// How the debtor side is debited.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "funding", rename_all = "kebab-case")]
pub enum Funding {
    Available,
    /// Drawdown of a lock; `caller` is the participant executing it.
    Lock {
        lock: LockId,
        proof: EventProof,
        caller: ParticipantId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Party {
    pub participant: ParticipantId,
    pub account: AccountRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClearingInstruction {
    pub instr_id: String,
    pub debtor: Party,
    pub creditor: Party,
    pub amount: MonetaryAmount,
    pub source_form: MoneyForm,
    pub dest_form: MoneyForm,
    pub funding: Funding,
    pub payload_digest: Option<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub instr: ClearingInstruction,
    pub direction: Direction,
    pub state: InstructionState,
    pub reason: Option<String>,
    pub cycle: Option<String>,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Obligation {
    pub from: ParticipantId,
    pub to: ParticipantId,
    pub amount: MonetaryAmount,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle_id: String,
    pub mode: SettlementMode,
    pub instructions: Vec<String>,
    pub cleared_total: MonetaryAmount,
    pub obligations: Vec<Obligation>,
    pub receipts: Vec<Receipt>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fmi {
    pub id: ParticipantId,
    pub mode: SettlementMode,
    instructions: BTreeMap<String, InstructionRecord>,
    /// Cycles whose saga was interrupted, with their instruction ids.
    in_flight: BTreeMap<String, Vec<String>>,
    reports: Vec<CycleReport>,
    next_seq: u64,
}

fn form_of(ms: &MoneySystem, acct: &AccountRef) -> FmiResult<MoneyForm> {
    let ledger = ms.ledger(&acct.ledger).ok_or_else(|| FmiError::UnknownLedger(acct.clone()))?;
    Ok(ledger.account(&acct.account).ok_or_else(|| FmiError::UnknownAccount(acct.clone()))?.form)
}

fn bank_of(acct: &AccountRef) -> ParticipantId {
    ParticipantId::new(acct.ledger.as_str())
}

impl Fmi {
    pub fn new(id: impl Into<ParticipantId>, mode: SettlementMode) -> Self {
        Fmi {
            id: id.into(),
            mode,
            instructions: BTreeMap::new(),
            in_flight: BTreeMap::new(),
            reports: Vec::new(),
            next_seq: 0,
        }
    }

    pub fn instruction(&self, id: &str) -> Option<&InstructionRecord> {
        self.instructions.get(id)
    }

    pub fn instructions(&self) -> impl Iterator<Item = &InstructionRecord> {
        self.instructions.values()
    }

    pub fn reports(&self) -> &[CycleReport] {
        &self.reports
    }

    pub fn has_pending(&self) -> bool {
        self.instructions
            .values()
            .any(|r| r.state == InstructionState::Cleared && r.cycle.is_none())
    }

    fn pending_debits(&self, acct: &AccountRef) -> MonetaryAmount {
        self.instructions
            .values()
            .filter(|r| r.state == InstructionState::Cleared && r.instr.funding == Funding::Available)
            .filter(|r| &r.instr.debtor.account == acct)
            .map(|r| r.instr.amount)
            .sum()
    }

    fn pending_credits(&self, acct: &AccountRef) -> MonetaryAmount {
        self.instructions
            .values()
            .filter(|r| r.state == InstructionState::Cleared && &r.instr.creditor.account == acct)
            .map(|r| r.instr.amount)
            .sum()
    }

    /// Clears or rejects an instruction. Resubmitting the same instruction
    /// returns its recorded state.
    pub fn submit_instruction(
        &mut self,
        ms: &MoneySystem,
        gate: &dyn LimitGate,
        instr: ClearingInstruction,
    ) -> FmiResult<InstructionRecord> {
        if let Some(existing) = self.instructions.get(&instr.instr_id) {
            if existing.instr != instr {
                return Err(FmiError::Conflict(instr.instr_id));
            }
            return Ok(existing.clone());
        }
        let src = form_of(ms, &instr.debtor.account)?;
        let dst = form_of(ms, &instr.creditor.account)?;
        let direction = match (src, dst) {
            (MoneyForm::DigitalPound, MoneyForm::CommercialBankMoney) => Direction::DpToCobm,
            (MoneyForm::CommercialBankMoney, MoneyForm::DigitalPound) => Direction::CobmToDp,
            (MoneyForm::CommercialBankMoney, MoneyForm::CommercialBankMoney) => Direction::CobmToCobm,
            (s, d) => {
                return Err(FmiError::Unsupported {
                    source_form: s,
                    dest_form: d,
                })
            }
        };
        if (src, dst) != (instr.source_form, instr.dest_form) {
            return Err(FmiError::Unsupported {
                source_form: instr.source_form,
                dest_form: instr.dest_form,
            });
        }
        let reason = self.clearing_check(ms, gate, &instr);
        self.next_seq += 1;
        let record = InstructionRecord {
            direction,
            state: if reason.is_none() {
                InstructionState::Cleared
            } else {
                InstructionState::Rejected
            },
            reason,
            cycle: None,
            seq: self.next_seq,
            instr,
        };
        self.instructions.insert(record.instr.instr_id.clone(), record.clone());
        Ok(record)
    }

    fn clearing_check(&self, ms: &MoneySystem, gate: &dyn LimitGate, instr: &ClearingInstruction) -> Option<String> {
        if instr.amount.is_zero() {
            return Some("zero amount".into());
        }
        let debtor = &instr.debtor.account;
        let ledger = ms.ledger(&debtor.ledger).expect("checked by form_of");
        match &instr.funding {
            Funding::Available => {
                let avail = ledger.available(&debtor.account).unwrap_or_default();
                let free = avail.checked_sub(self.pending_debits(debtor)).unwrap_or_default();
                if free < instr.amount {
                    return Some(format!("insufficient funds: available {free}, requested {}", instr.amount));
                }
            }
            Funding::Lock { lock, proof, .. } => {
                let Some(l) = ledger.lock(lock) else {
                    return Some(format!("unknown lock {lock}"));
                };
                if l.state != LockState::Active || l.remaining < instr.amount || l.account != debtor.account {
                    return Some(format!("lock {lock} cannot fund {}", instr.amount));
                }
                if l.condition_tag != proof.condition_tag {
                    return Some(format!("condition {} not met", l.condition_tag));
                }
                let target = match &l.beneficiary {
                    Beneficiary::External(r) => r.clone(),
                    Beneficiary::Local(a) => AccountRef::new(debtor.ledger.clone(), a.clone()),
                };
                if target != instr.creditor.account {
                    return Some(format!("lock {lock} beneficiary is {target}"));
                }
            }
        }
        if instr.dest_form == MoneyForm::DigitalPound {
            let credit = instr
                .amount
                .checked_add(self.pending_credits(&instr.creditor.account))
                .unwrap_or(MonetaryAmount::from_pence(u64::MAX));
            if let Err(e) = gate.admit_credit(ms.core(), &instr.creditor.account.account, credit) {
                return Some(match e {
                    LimitDenied::Exceeded { .. } => format!("holding limit: {e}"),
                    LimitDenied::Unavailable => e.to_string(),
                });
            }
        }
        None
    }

    fn debit_leg(&self, instr: &ClearingInstruction, backed_by: Option<usize>) -> SagaLeg {
        let acct = &instr.debtor.account;
        match (&instr.funding, instr.source_form) {
            (Funding::Available, MoneyForm::DigitalPound) => SagaLeg::Core {
                wallet: acct.account.clone(),
                delta: -instr.amount.as_delta(),
                backed_by: backed_by.expect("dp debit is backed"),
            },
            (Funding::Lock { lock, proof, caller }, MoneyForm::DigitalPound) => SagaLeg::CoreDrawdown {
                lock: lock.clone(),
                amount: instr.amount,
                proof: proof.clone(),
                caller: caller.clone(),
                backed_by,
            },
            (Funding::Available, _) => SagaLeg::Bank {
                bank: bank_of(acct),
                account: acct.account.clone(),
                delta: -instr.amount.as_delta(),
            },
            (Funding::Lock { lock, proof, caller }, _) => SagaLeg::BankDrawdown {
                bank: bank_of(acct),
                lock: lock.clone(),
                amount: instr.amount,
                proof: proof.clone(),
                caller: caller.clone(),
            },
        }
    }

    fn bank_credit(instr: &ClearingInstruction) -> SagaLeg {
        SagaLeg::Bank {
            bank: bank_of(&instr.creditor.account),
            account: instr.creditor.account.account.clone(),
            delta: instr.amount.as_delta(),
        }
    }

    /// Appends the legs for one instruction. Bank-to-bank reserve movement is
    /// returned separately so net mode can aggregate it.
    fn instruction_legs(&self, ms: &MoneySystem, rec: &InstructionRecord, legs: &mut Vec<SagaLeg>) -> Option<Obligation> {
        let i = &rec.instr;
        let x = i.amount.as_delta();
        match rec.direction {
            Direction::DpToCobm => {
                let bank = bank_of(&i.creditor.account);
                let base = legs.len();
                legs.push(SagaLeg::Reserve { bank: bank.clone(), delta: x });
                legs.push(self.debit_leg(i, Some(base)));
                legs.push(Fmi::bank_credit(i));
                Some(Obligation {
                    from: ms.central_bank().clone(),
                    to: bank,
                    amount: i.amount,
                })
            }
            Direction::CobmToDp => {
                let bank = bank_of(&i.debtor.account);
                legs.push(self.debit_leg(i, None));
                let base = legs.len();
                legs.push(SagaLeg::Reserve { bank: bank.clone(), delta: -x });
                legs.push(SagaLeg::Core {
                    wallet: i.creditor.account.account.clone(),
                    delta: x,
                    backed_by: base,
                });
                Some(Obligation {
                    from: bank,
                    to: ms.central_bank().clone(),
                    amount: i.amount,
                })
            }
            Direction::CobmToCobm => {
                let (a, b) = (bank_of(&i.debtor.account), bank_of(&i.creditor.account));
                if a == b {
                    match &i.funding {
                        Funding::Available => legs.push(SagaLeg::BankTransfer {
                            bank: a,
                            from: i.debtor.account.account.clone(),
                            to: i.creditor.account.account.clone(),
                            amount: i.amount,
                        }),
                        Funding::Lock { .. } => legs.push(self.debit_leg(i, None)),
                    }
                    return None;
                }
                legs.push(self.debit_leg(i, None));
                legs.push(Fmi::bank_credit(i));
                Some(Obligation {
                    from: a,
                    to: b,
                    amount: i.amount,
                })
            }
        }
    }

    /// Settles every cleared instruction not yet in a cycle. The cycle is a
    /// single saga: it settles wholly or leaves all instructions cleared.
    pub fn settle_cycle(&mut self, cycle_id: &str, ms: &mut MoneySystem, hook: &mut LegHook<'_>) -> FmiResult<CycleReport> {
        if self.in_flight.contains_key(cycle_id) {
            return self.finish(cycle_id, ms, hook);
        }
        let mut pending: Vec<&InstructionRecord> = self
            .instructions
            .values()
            .filter(|r| r.state == InstructionState::Cleared && r.cycle.is_none())
            .collect();
        if pending.is_empty() {
            return Err(FmiError::NothingToSettle);
        }
        pending.sort_by_key(|r| r.seq);
        let mut legs = Vec::new();
        let mut interbank = Vec::new();
        let mut conversions = Vec::new();
        for rec in &pending {
            if let Some(ob) = self.instruction_legs(ms, rec, &mut legs) {
                if rec.direction == Direction::CobmToCobm {
                    interbank.push(ob);
                } else {
                    conversions.push(ob);
                }
            }
        }
        let interbank = match self.mode {
            SettlementMode::Gross => interbank,
            SettlementMode::Net => net(&interbank),
        };
        for ob in &interbank {
            legs.push(SagaLeg::ReserveTransfer {
                from: ob.from.clone(),
                to: ob.to.clone(),
                amount: ob.amount,
            });
        }
        let ids: Vec<String> = pending.iter().map(|r| r.instr.instr_id.clone()).collect();
        let cleared_total = pending.iter().map(|r| r.instr.amount).sum();
        let mut obligations = conversions;
        obligations.extend(interbank);
        self.reports.push(CycleReport {
            cycle_id: cycle_id.to_owned(),
            mode: self.mode,
            instructions: ids.clone(),
            cleared_total,
            obligations,
            receipts: Vec::new(),
        });
        for id in &ids {
            self.instructions.get_mut(id).expect("pending").cycle = Some(cycle_id.to_owned());
        }
        self.in_flight.insert(cycle_id.to_owned(), ids);
        match ms.run_saga(cycle_id, Origin::Fmi, legs, hook) {
            Ok(r) => Ok(self.commit(cycle_id, r.receipts)),
            Err(e) => Err(self.fail(cycle_id, e)),
        }
    }

    fn commit(&mut self, cycle_id: &str, receipts: Vec<Receipt>) -> CycleReport {
        let ids = self.in_flight.remove(cycle_id).unwrap_or_default();
        for id in &ids {
            self.instructions.get_mut(id).expect("cycle member").state = InstructionState::Settled;
        }
        let report = self
            .reports
            .iter_mut()
            .rev()
            .find(|r| r.cycle_id == cycle_id)
            .expect("report recorded");
        report.receipts = receipts;
        report.clone()
    }

    fn fail(&mut self, cycle_id: &str, e: MoneyError) -> FmiError {
        if let MoneyError::Interrupted { .. } = e {
            return FmiError::Interrupted {
                cycle: cycle_id.to_owned(),
            };
        }
        let ids = self.in_flight.remove(cycle_id).unwrap_or_default();
        for id in &ids {
            self.instructions.get_mut(id).expect("cycle member").cycle = None;
        }
        self.reports.retain(|r| r.cycle_id != cycle_id);
        FmiError::CycleAborted {
            cycle: cycle_id.to_owned(),
            cause: e.to_string(),
        }
    }

    fn finish(&mut self, cycle_id: &str, ms: &mut MoneySystem, hook: &mut LegHook<'_>) -> FmiResult<CycleReport> {
        match ms.run_saga(cycle_id, Origin::Fmi, Vec::new(), hook) {
            Ok(r) => Ok(self.commit(cycle_id, r.receipts)),
            Err(e) => Err(self.fail(cycle_id, e)),
        }
    }

    /// Completes every interrupted cycle.
    pub fn recover(&mut self, ms: &mut MoneySystem, hook: &mut LegHook<'_>) -> Vec<FmiResult<CycleReport>> {
        let cycles: Vec<String> = self.in_flight.keys().cloned().collect();
        cycles.iter().map(|c| self.finish(c, ms, hook)).collect()
    }

    pub fn in_flight(&self) -> impl Iterator<Item = &String> {
        self.in_flight.keys()
    }

    /// Clearing, payload delivery and a dedicated settlement cycle in one
    /// call. The payload goes first; if it fails nothing is submitted.
    pub fn convert(
        &mut self,
        ms: &mut MoneySystem,
        gate: &dyn LimitGate,
        instr: ClearingInstruction,
        deliver: &mut dyn FnMut(&ClearingInstruction) -> Result<(), String>,
        hook: &mut LegHook<'_>,
    ) -> FmiResult<CycleReport> {
        let id = instr.instr_id.clone();
        let cycle = format!("{id}/settle");
        if let Some(rec) = self.instructions.get(&id) {
            if rec.state == InstructionState::Settled {
                if let Some(r) = self.reports.iter().find(|r| r.instructions.contains(&id)) {
                    return Ok(r.clone());
                }
            }
        } else {
            deliver(&instr).map_err(FmiError::PayloadUndelivered)?;
        }
        let rec = self.submit_instruction(ms, gate, instr)?;
        if rec.state == InstructionState::Rejected {
            return Err(FmiError::Rejected(id, rec.reason.unwrap_or_default()));
        }
        self.settle_cycle(&cycle, ms, hook)
    }
}

/// Pairwise netting of bank-to-bank obligations.
pub fn net(obligations: &[Obligation]) -> Vec<Obligation> {
    let mut pairs: BTreeMap<(ParticipantId, ParticipantId), i128> = BTreeMap::new();
    for ob in obligations {
        let (key, sign) = if ob.from <= ob.to {
            ((ob.from.clone(), ob.to.clone()), 1)
        } else {
            ((ob.to.clone(), ob.from.clone()), -1)
        };
        *pairs.entry(key).or_default() += sign * i128::from(ob.amount.pence());
    }
    pairs
        .into_iter()
        .filter(|(_, v)| *v != 0)
        .map(|((a, b), v)| {
            let amount = MonetaryAmount::from_pence(u64::try_from(v.unsigned_abs()).expect("bounded by inputs"));
            if v > 0 {
                Obligation { from: a, to: b, amount }
            } else {
                Obligation { from: b, to: a, amount }
            }
        })
        .collect()
}

/// Core wallet on the digital pound ledger.
pub fn core_ref(wallet: impl Into<crate::ids::AccountId>) -> AccountRef {
    AccountRef::new(CORE_LEDGER, wallet)
}
