//! Card scheme and ATM network adapters.
//!
//! The scheme keeps cards and transaction state only. Holds, drawdowns, FMI
//! settlement and cash movements are requested from a [`SchemeBackend`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::amount::MonetaryAmount;
use crate::ids::{AccountRef, LockId, ParticipantId, Tick};
use crate::ledger::Receipt;
use crate::money::LimitDenied;

/// Hold lifetime: seven simulated days at one tick per minute.
pub const DEFAULT_HOLD_TICKS: Tick = 7 * 24 * 60;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemeError {
    #[error("card issuance failed: {0}")]
    Issue(String),
    #[error("unknown transaction {0}")]
    UnknownTxn(String),
    #[error("transaction {0} is not awaiting clearing")]
    NotClearable(String),
    #[error("clearing {requested} exceeds authorized {authorized}")]
    OverClearing {
        authorized: MonetaryAmount,
        requested: MonetaryAmount,
    },
    #[error("hold for {0} has expired")]
    Expired(String),
    #[error("backend: {0}")]
    Backend(String),
}

pub type SchemeResult<T> = Result<T, SchemeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TxnKind {
    PosPurchase,
    AtmWithdrawal,
    AtmDeposit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeclineReason {
    BadCard,
    BadAuth,
    Insufficient,
    Limit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "reason", rename_all = "kebab-case")]
pub enum AuthState {
    Authorized,
    Declined(DeclineReason),
    Cleared,
    Released,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardCredential {
    pub card_number: String,
    pub holder: ParticipantId,
    pub wallet: AccountRef,
    pub issuing_pip: ParticipantId,
    pub issuer_prefix: String,
    pub auth_secret: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemeTransaction {
    pub txn_id: String,
    pub kind: TxnKind,
    pub card: String,
    pub holder: ParticipantId,
    pub wallet: AccountRef,
    pub counterparty: ParticipantId,
    pub counterparty_account: AccountRef,
    pub amount: MonetaryAmount,
    pub auth_state: AuthState,
    pub lock: Option<LockId>,
    pub cleared: Option<MonetaryAmount>,
    pub released: MonetaryAmount,
    pub expiry: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clearing {
    pub txn_id: String,
    pub cleared: MonetaryAmount,
    pub released: MonetaryAmount,
    pub receipts: Vec<Receipt>,
}

/// Ledger, FMI and cash services the scheme relies on.
pub trait SchemeBackend {
    fn now(&self) -> Tick;
    /// Registers `card` as a card-number alias of `wallet`.
    fn register_card(&mut self, pip: &ParticipantId, card: &str, wallet: &AccountRef) -> Result<(), String>;
    /// Current alias target of a card, if it is an active alias.
    fn card_target(&self, card: &str) -> Option<AccountRef>;
    fn available(&self, account: &AccountRef) -> Option<MonetaryAmount>;
    fn total(&self, account: &AccountRef) -> Option<MonetaryAmount>;
    fn cash_held(&self, holder: &ParticipantId) -> MonetaryAmount;
    fn admit_credit(&self, wallet: &AccountRef, amount: MonetaryAmount) -> Result<(), LimitDenied>;
    fn place_hold(&mut self, txn: &SchemeTransaction) -> Result<LockId, String>;
    /// Moves `amount` for a cleared transaction, drawing down its hold if any.
    fn settle(&mut self, txn: &SchemeTransaction, amount: MonetaryAmount) -> Result<Vec<Receipt>, String>;
    fn release_hold(&mut self, txn: &SchemeTransaction) -> Result<Vec<Receipt>, String>;
    fn move_cash(&mut self, key: &str, from: &ParticipantId, to: &ParticipantId, amount: MonetaryAmount) -> Result<(), String>;
}

/// Luhn check digit for a string of decimal digits.
pub fn luhn_digit(payload: &str) -> u8 {
    let sum: u32 = payload
        .bytes()
        .rev()
        .enumerate()
        .map(|(i, b)| {
            let d = u32::from(b - b'0');
            if i % 2 == 0 {
                let x = d * 2;
                if x > 9 {
                    x - 9
                } else {
                    x
                }
            } else {
                d
            }
        })
        .sum();
    ((10 - sum % 10) % 10) as u8
}

pub fn luhn_valid(number: &str) -> bool {
    let Some((body, last)) = number.len().checked_sub(1).map(|n| number.split_at(n)) else {
        return false;
    };
    number.bytes().all(|b| b.is_ascii_digit()) && !body.is_empty() && luhn_digit(body) == last.as_bytes()[0] - b'0'
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scheme {
    pub id: ParticipantId,
    cards: BTreeMap<String, CardCredential>,
    txns: BTreeMap<String, SchemeTransaction>,
    issued: u64,
    pub hold_ticks: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum AtmAction {
    Balance,
    Withdraw { amount: MonetaryAmount },
    Deposit { amount: MonetaryAmount },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "kebab-case")]
pub enum SessionResult {
    Balance { total: MonetaryAmount },
    Completed { clearing: Clearing },
    Declined { reason: DeclineReason },
}

impl Scheme {
    pub fn new(id: impl Into<ParticipantId>) -> Self {
        Scheme {
            id: id.into(),
            cards: BTreeMap::new(),
            txns: BTreeMap::new(),
            issued: 0,
            hold_ticks: DEFAULT_HOLD_TICKS,
        }
    }

    pub fn card(&self, number: &str) -> Option<&CardCredential> {
        self.cards.get(number)
    }

    pub fn cards(&self) -> impl Iterator<Item = &CardCredential> {
        self.cards.values()
    }

    /// Accepts a card issued on another network.
    pub fn enroll(&mut self, card: CardCredential) {
        self.cards.insert(card.card_number.clone(), card);
    }

    pub fn txn(&self, id: &str) -> Option<&SchemeTransaction> {
        self.txns.get(id)
    }

    pub fn txns(&self) -> impl Iterator<Item = &SchemeTransaction> {
        self.txns.values()
    }

    /// Issues a card whose number is `prefix`, a nine-digit serial and a Luhn
    /// check digit, and registers it as an alias of `wallet`.
    pub fn issue_card<B: SchemeBackend + ?Sized>(
        &mut self,
        backend: &mut B,
        pip: &ParticipantId,
        holder: &ParticipantId,
        wallet: &AccountRef,
        prefix: &str,
        secret: &str,
    ) -> SchemeResult<CardCredential> {
        if prefix.len() != 6 || !prefix.bytes().all(|b| b.is_ascii_digit()) {
            return Err(SchemeError::Issue(format!("issuer prefix {prefix:?} must be 6 digits")));
        }
        if backend.total(wallet).is_none() {
            return Err(SchemeError::Issue(format!("unknown wallet {wallet}")));
        }
        let body = format!("{prefix}{:09}", self.issued + 1);
        let number = format!("{body}{}", luhn_digit(&body));
        backend.register_card(pip, &number, wallet).map_err(SchemeError::Issue)?;
        self.issued += 1;
        let card = CardCredential {
            card_number: number.clone(),
            holder: holder.clone(),
            wallet: wallet.clone(),
            issuing_pip: pip.clone(),
            issuer_prefix: prefix.to_owned(),
            auth_secret: secret.to_owned(),
        };
        self.cards.insert(number, card.clone());
        Ok(card)
    }

    /// Authorizes a transaction. Purchases and withdrawals place a hold on the
    /// cardholder's wallet; deposits are limit-checked and hold nothing.
    /// Replaying a `txn_id` returns the recorded state.
    #[allow(clippy::too_many_arguments)]
    pub fn authorize<B: SchemeBackend + ?Sized>(
        &mut self,
        backend: &mut B,
        txn_id: &str,
        card: &str,
        secret: &str,
        amount: MonetaryAmount,
        kind: TxnKind,
        counterparty: &ParticipantId,
        counterparty_account: &AccountRef,
    ) -> SchemeResult<SchemeTransaction> {
        if let Some(t) = self.txns.get(txn_id) {
            return Ok(t.clone());
        }
        let cred = self.cards.get(card).cloned();
        let target = backend.card_target(card);
        let valid = luhn_valid(card) && cred.is_some() && target.is_some() && target == cred.as_ref().map(|c| c.wallet.clone());
        let mut txn = SchemeTransaction {
            txn_id: txn_id.to_owned(),
            kind,
            card: card.to_owned(),
            holder: cred.as_ref().map(|c| c.holder.clone()).unwrap_or_else(|| ParticipantId::new("")),
            wallet: target.clone().unwrap_or_else(|| AccountRef::new("", "")),
            counterparty: counterparty.clone(),
            counterparty_account: counterparty_account.clone(),
            amount,
            auth_state: AuthState::Authorized,
            lock: None,
            cleared: None,
            released: MonetaryAmount::ZERO,
            expiry: backend.now() + self.hold_ticks,
        };
        let decline = if !valid {
            Some(DeclineReason::BadCard)
        } else if cred.as_ref().map(|c| c.auth_secret.as_str()) != Some(secret) {
            Some(DeclineReason::BadAuth)
        } else {
            match kind {
                TxnKind::AtmDeposit => {
                    if backend.cash_held(&txn.holder) < amount {
                        Some(DeclineReason::Insufficient)
                    } else if backend.admit_credit(&txn.wallet, amount).is_err() {
                        Some(DeclineReason::Limit)
                    } else {
                        None
                    }
                }
                TxnKind::PosPurchase | TxnKind::AtmWithdrawal => {
                    let avail = backend.available(&txn.wallet).unwrap_or_default();
                    if amount.is_zero() || avail < amount {
                        Some(DeclineReason::Insufficient)
                    } else {
                        match backend.place_hold(&txn) {
                            Ok(lock) => {
                                txn.lock = Some(lock);
                                None
                            }
                            Err(_) => Some(DeclineReason::Insufficient),
                        }
                    }
                }
            }
        };
        if let Some(r) = decline {
            txn.auth_state = AuthState::Declined(r);
        }
        self.txns.insert(txn_id.to_owned(), txn.clone());
        Ok(txn)
    }

    /// Settles `amount` of an authorized transaction and releases any residual
    /// hold. Withdrawals and deposits also move cash.
    pub fn clear_and_settle<B: SchemeBackend + ?Sized>(
        &mut self,
        backend: &mut B,
        txn_id: &str,
        amount: MonetaryAmount,
    ) -> SchemeResult<Clearing> {
        let txn = self
            .txns
            .get(txn_id)
            .cloned()
            .ok_or_else(|| SchemeError::UnknownTxn(txn_id.to_owned()))?;
        if txn.auth_state == AuthState::Cleared {
            return Ok(Clearing {
                txn_id: txn_id.to_owned(),
                cleared: txn.cleared.unwrap_or_default(),
                released: txn.released,
                receipts: Vec::new(),
            });
        }
        if txn.auth_state != AuthState::Authorized {
            return Err(SchemeError::NotClearable(txn_id.to_owned()));
        }
        if amount > txn.amount {
            return Err(SchemeError::OverClearing {
                authorized: txn.amount,
                requested: amount,
            });
        }
        if txn.lock.is_some() && backend.now() >= txn.expiry {
            return Err(SchemeError::Expired(txn_id.to_owned()));
        }
        let mut receipts = Vec::new();
        if !amount.is_zero() {
            receipts.extend(backend.settle(&txn, amount).map_err(SchemeError::Backend)?);
            let key = format!("{txn_id}/cash");
            match txn.kind {
                TxnKind::AtmWithdrawal => backend.move_cash(&key, &txn.counterparty, &txn.holder, amount),
                TxnKind::AtmDeposit => backend.move_cash(&key, &txn.holder, &txn.counterparty, amount),
                TxnKind::PosPurchase => Ok(()),
            }
            .map_err(SchemeError::Backend)?;
        }
        let residual = txn.amount.checked_sub(amount).expect("checked above");
        let mut released = MonetaryAmount::ZERO;
        if txn.lock.is_some() && !residual.is_zero() {
            receipts.extend(backend.release_hold(&txn).map_err(SchemeError::Backend)?);
            released = residual;
        }
        let t = self.txns.get_mut(txn_id).expect("present");
        t.auth_state = AuthState::Cleared;
        t.cleared = Some(amount);
        t.released = released;
        Ok(Clearing {
            txn_id: txn_id.to_owned(),
            cleared: amount,
            released,
            receipts,
        })
    }

    /// Marks a transaction whose hold the ledger released by expiry.
    pub fn mark_expired(&mut self, txn_id: &str) {
        if let Some(t) = self.txns.get_mut(txn_id) {
            if t.auth_state == AuthState::Authorized {
                t.auth_state = AuthState::Released;
                t.released = t.amount;
            }
        }
    }

    /// Balance check, withdrawal or deposit at an ATM.
    #[allow(clippy::too_many_arguments)]
    pub fn atm_session<B: SchemeBackend + ?Sized>(
        &mut self,
        backend: &mut B,
        session_id: &str,
        card: &str,
        secret: &str,
        action: &AtmAction,
        operator: &ParticipantId,
        operator_account: &AccountRef,
    ) -> SchemeResult<SessionResult> {
        let (kind, amount) = match action {
            AtmAction::Balance => {
                let cred = self.cards.get(card);
                let target = backend.card_target(card);
                let total = match (cred, target) {
                    (Some(c), Some(t)) if c.wallet == t && luhn_valid(card) => {
                        if c.auth_secret != secret {
                            return Ok(SessionResult::Declined {
                                reason: DeclineReason::BadAuth,
                            });
                        }
                        backend.total(&t)
                    }
                    _ => None,
                };
                return Ok(match total {
                    Some(total) => SessionResult::Balance { total },
                    None => SessionResult::Declined {
                        reason: DeclineReason::BadCard,
                    },
                });
            }
            AtmAction::Withdraw { amount } => (TxnKind::AtmWithdrawal, *amount),
            AtmAction::Deposit { amount } => (TxnKind::AtmDeposit, *amount),
        };
        let txn = self.authorize(backend, session_id, card, secret, amount, kind, operator, operator_account)?;
        if let AuthState::Declined(reason) = txn.auth_state {
            return Ok(SessionResult::Declined { reason });
        }
        let clearing = self.clear_and_settle(backend, session_id, amount)?;
        Ok(SessionResult::Completed { clearing })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[derive(Default)]
    struct Mock {
        now: Tick,
        aliases: BTreeMap<String, AccountRef>,
        prefixes: BTreeMap<ParticipantId, String>,
        avail: BTreeMap<AccountRef, u64>,
        locks: BTreeMap<String, (AccountRef, u64)>,
        cash: BTreeMap<ParticipantId, u64>,
        limit: u64,
        moves: BTreeSet<String>,
    }

    impl Mock {
        fn locked(&self, a: &AccountRef) -> u64 {
            self.locks.values().filter(|(x, _)| x == a).map(|(_, v)| v).sum()
        }
    }

    impl SchemeBackend for Mock {
        fn now(&self) -> Tick {
            self.now
        }
        fn register_card(&mut self, pip: &ParticipantId, card: &str, wallet: &AccountRef) -> Result<(), String> {
            if self.prefixes.get(pip).map(String::as_str) != Some(&card[..6]) {
                return Err("foreign prefix".into());
            }
            self.aliases.insert(card.into(), wallet.clone());
            Ok(())
        }
        fn card_target(&self, card: &str) -> Option<AccountRef> {
            self.aliases.get(card).cloned()
        }
        fn available(&self, a: &AccountRef) -> Option<MonetaryAmount> {
            self.avail.get(a).map(|v| (*v).into())
        }
        fn total(&self, a: &AccountRef) -> Option<MonetaryAmount> {
            self.avail.get(a).map(|v| (v + self.locked(a)).into())
        }
        fn cash_held(&self, h: &ParticipantId) -> MonetaryAmount {
            self.cash.get(h).copied().unwrap_or(0).into()
        }
        fn admit_credit(&self, w: &AccountRef, amount: MonetaryAmount) -> Result<(), LimitDenied> {
            if self.total(w).unwrap().pence() + amount.pence() > self.limit {
                Err(LimitDenied::Unavailable)
            } else {
                Ok(())
            }
        }
        fn place_hold(&mut self, t: &SchemeTransaction) -> Result<LockId, String> {
            *self.avail.get_mut(&t.wallet).unwrap() -= t.amount.pence();
            self.locks.insert(t.txn_id.clone(), (t.wallet.clone(), t.amount.pence()));
            Ok(LockId::new(format!("L-{}", t.txn_id)))
        }
        fn settle(&mut self, t: &SchemeTransaction, amount: MonetaryAmount) -> Result<Vec<Receipt>, String> {
            let x = amount.pence();
            match t.kind {
                TxnKind::AtmDeposit => {
                    *self.avail.get_mut(&t.counterparty_account).unwrap() -= x;
                    *self.avail.get_mut(&t.wallet).unwrap() += x;
                }
                _ => {
                    self.locks.get_mut(&t.txn_id).unwrap().1 -= x;
                    *self.avail.get_mut(&t.counterparty_account).unwrap() += x;
                }
            }
            Ok(vec![])
        }
        fn release_hold(&mut self, t: &SchemeTransaction) -> Result<Vec<Receipt>, String> {
            let (a, rest) = self.locks.remove(&t.txn_id).unwrap();
            *self.avail.get_mut(&a).unwrap() += rest;
            Ok(vec![])
        }
        fn move_cash(&mut self, key: &str, from: &ParticipantId, to: &ParticipantId, amount: MonetaryAmount) -> Result<(), String> {
            if !self.moves.insert(key.into()) {
                return Ok(());
            }
            let x = amount.pence();
            let f = self.cash.entry(from.clone()).or_default();
            if *f < x {
                return Err("insufficient cash".into());
            }
            *f -= x;
            *self.cash.entry(to.clone()).or_default() += x;
            Ok(())
        }
    }

    fn acct(s: &str) -> AccountRef {
        AccountRef::new("core", s)
    }

    fn setup() -> (Scheme, Mock, String) {
        let mut m = Mock {
            limit: 50_000,
            ..Mock::default()
        };
        m.prefixes.insert("pip2".into(), "412345".into());
        m.avail.insert(acct("bob"), 20_000);
        m.avail.insert(acct("store"), 0);
        m.avail.insert(AccountRef::new("bank-b", "atm"), 500_000);
        m.cash.insert("bob".into(), 60_000);
        m.cash.insert("atm-op".into(), 200_000);
        let mut s = Scheme::new("cardnet");
        let card = s.issue_card(&mut m, &"pip2".into(), &"bob".into(), &acct("bob"), "412345", "1234").unwrap();
        (s, m, card.card_number)
    }

    #[test]
    fn luhn_known_numbers() {
        assert!(luhn_valid("4111111111111111"));
        assert!(luhn_valid("79927398713"));
        assert!(!luhn_valid("4111111111111112"));
        assert_eq!(luhn_digit("7992739871"), 3);
    }

    #[test]
    fn issued_card_is_prefixed_luhn_alias() {
        let (mut s, mut m, card) = setup();
        assert!(card.starts_with("412345"));
        assert_eq!(card.len(), 16);
        assert!(luhn_valid(&card));
        assert_eq!(m.card_target(&card), Some(acct("bob")));
        let second = s.issue_card(&mut m, &"pip2".into(), &"bob".into(), &acct("bob"), "412345", "9").unwrap();
        assert_ne!(second.card_number, card);
        assert_eq!(m.card_target(&second.card_number), Some(acct("bob")));
        assert!(matches!(
            s.issue_card(&mut m, &"pip2".into(), &"bob".into(), &acct("bob"), "999999", "1"),
            Err(SchemeError::Issue(_))
        ));
        assert!(matches!(
            s.issue_card(&mut m, &"pip2".into(), &"bob".into(), &acct("nobody"), "412345", "1"),
            Err(SchemeError::Issue(_))
        ));
    }

    #[test]
    fn authorize_declines() {
        let (mut s, mut m, card) = setup();
        let op = ParticipantId::new("store");
        let t = s.authorize(&mut m, "t1", &card, "1234", 3000u64.into(), TxnKind::PosPurchase, &op, &acct("store")).unwrap();
        assert_eq!(t.auth_state, AuthState::Authorized);
        assert_eq!(m.locked(&acct("bob")), 3000);
        let t = s.authorize(&mut m, "t2", &card, "0000", 100u64.into(), TxnKind::PosPurchase, &op, &acct("store")).unwrap();
        assert_eq!(t.auth_state, AuthState::Declined(DeclineReason::BadAuth));
        assert!(t.lock.is_none());
        let t = s.authorize(&mut m, "t3", &card, "1234", 17_001u64.into(), TxnKind::PosPurchase, &op, &acct("store")).unwrap();
        assert_eq!(t.auth_state, AuthState::Declined(DeclineReason::Insufficient));
        let t = s.authorize(&mut m, "t4", "4111111111111111", "1234", 1u64.into(), TxnKind::PosPurchase, &op, &acct("store")).unwrap();
        assert_eq!(t.auth_state, AuthState::Declined(DeclineReason::BadCard));
        assert_eq!(m.locked(&acct("bob")), 3000);
    }

    #[test]
    fn partial_clearing_releases_residual() {
        let (mut s, mut m, card) = setup();
        let op = ParticipantId::new("store");
        s.authorize(&mut m, "t1", &card, "1234", 3000u64.into(), TxnKind::PosPurchase, &op, &acct("store")).unwrap();
        assert!(matches!(s.clear_and_settle(&mut m, "t1", 3001u64.into()), Err(SchemeError::OverClearing { .. })));
        let c = s.clear_and_settle(&mut m, "t1", 2500u64.into()).unwrap();
        assert_eq!((c.cleared.pence(), c.released.pence()), (2500, 500));
        assert_eq!(m.avail[&acct("bob")], 17_500);
        assert_eq!(m.avail[&acct("store")], 2500);
        assert_eq!(m.locked(&acct("bob")), 0);
        // second clearing is the recorded one
        assert_eq!(s.clear_and_settle(&mut m, "t1", 2500u64.into()).unwrap().cleared.pence(), 2500);
        assert_eq!(m.avail[&acct("store")], 2500);
    }

    #[test]
    fn expired_hold_cannot_clear() {
        let (mut s, mut m, card) = setup();
        s.authorize(&mut m, "t1", &card, "1234", 3000u64.into(), TxnKind::PosPurchase, &"store".into(), &acct("store")).unwrap();
        m.now = DEFAULT_HOLD_TICKS;
        assert_eq!(s.clear_and_settle(&mut m, "t1", 1u64.into()), Err(SchemeError::Expired("t1".into())));
    }

    #[test]
    fn atm_withdraw_four_entries_sum_to_zero() {
        let (mut s, mut m, card) = setup();
        let opacct = AccountRef::new("bank-b", "atm");
        let op = ParticipantId::new("atm-op");
        let before = m.avail[&acct("bob")] + m.avail[&opacct] + m.cash[&"bob".into()] + m.cash[&op];
        let r = s
            .atm_session(&mut m, "a1", &card, "1234", &AtmAction::Withdraw { amount: 3000u64.into() }, &op, &opacct)
            .unwrap();
        assert!(matches!(r, SessionResult::Completed { .. }));
        assert_eq!(m.avail[&acct("bob")], 17_000);
        assert_eq!(m.avail[&opacct], 503_000);
        assert_eq!(m.cash[&"bob".into()], 63_000);
        assert_eq!(m.cash[&op], 197_000);
        let after = m.avail[&acct("bob")] + m.avail[&opacct] + m.cash[&"bob".into()] + m.cash[&op];
        assert_eq!(before, after);
    }

    #[test]
    fn atm_balance_and_deposit() {
        let (mut s, mut m, card) = setup();
        let opacct = AccountRef::new("bank-b", "atm");
        let op = ParticipantId::new("atm-op");
        let r = s.atm_session(&mut m, "b1", &card, "1234", &AtmAction::Balance, &op, &opacct).unwrap();
        assert_eq!(r, SessionResult::Balance { total: 20_000u64.into() });
        assert!(s.txns().next().is_none());
        let r = s
            .atm_session(&mut m, "d1", &card, "1234", &AtmAction::Deposit { amount: 4000u64.into() }, &op, &opacct)
            .unwrap();
        assert!(matches!(r, SessionResult::Completed { .. }));
        assert_eq!((m.avail[&acct("bob")], m.cash[&"bob".into()]), (24_000, 56_000));
        let r = s
            .atm_session(&mut m, "d2", &card, "1234", &AtmAction::Deposit { amount: 26_001u64.into() }, &op, &opacct)
            .unwrap();
        assert_eq!(r, SessionResult::Declined { reason: DeclineReason::Limit });
        assert_eq!((m.avail[&acct("bob")], m.cash[&"bob".into()]), (24_000, 56_000));
    }
}
