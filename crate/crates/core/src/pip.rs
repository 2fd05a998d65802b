//! Payment interface providers: onboarding, wallet provisioning, holding
//! limits, confidential payload exchange and payment initiation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alias::{AliasError, Resolution};
use crate::amount::MonetaryAmount;
use crate::ids::{AccountId, AccountRef, LockId, MoneyForm, MsgId, ParticipantId};
use crate::ledger::{CommandKind, Ledger, LedgerCommand, LedgerError, Origin, Receipt};
use crate::money::{LimitDenied, LimitGate, CORE_LEDGER};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipError {
    #[error("{0} is not a registered pip")]
    UnknownPip(ParticipantId),
    #[error("{user} is already onboarded at {pip}")]
    DuplicateOnboarding { pip: ParticipantId, user: ParticipantId },
    #[error("unknown identity provider {0}")]
    UnknownProvider(ParticipantId),
    #[error("identity provider {0} unavailable")]
    ProviderUnavailable(ParticipantId),
    #[error("{user} is not onboarded at {pip}")]
    NotOnboarded { pip: ParticipantId, user: ParticipantId },
    #[error("{user} has kyc status {status:?}")]
    Unverified { user: ParticipantId, status: KycStatus },
    #[error("holding-limit registry unavailable")]
    RegistryUnavailable,
    #[error("requested limit {requested} exceeds registered aggregate limit {registered} for {user}")]
    LimitCapacity {
        user: ParticipantId,
        registered: MonetaryAmount,
        requested: MonetaryAmount,
    },
    #[error(transparent)]
    Limit(#[from] LimitDenied),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Alias(#[from] AliasError),
    #[error("insufficient funds: available {available}, requested {requested}")]
    InsufficientFunds {
        available: MonetaryAmount,
        requested: MonetaryAmount,
    },
    #[error("unknown payee {0}")]
    UnknownPayee(String),
    #[error("payload channel {from} -> {to} down")]
    PayloadChannelDown { from: ParticipantId, to: ParticipantId },
    #[error("payload route {got} does not match topology route {expected}")]
    RouteMismatch { expected: String, got: String },
    #[error("rail rejected payment: {0}")]
    Rail(String),
}

pub type PipResult<T> = Result<T, PipError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KycStatus {
    Pending,
    Verified,
    Rejected,
}

/// Deterministic identity provider: rejects sanctioned names and empty
/// identity sets, verifies everything else.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KycProvider {
    pub id: ParticipantId,
    pub sanctioned: BTreeSet<String>,
}

impl KycProvider {
    pub fn new(id: impl Into<ParticipantId>, sanctioned: impl IntoIterator<Item = String>) -> Self {
        KycProvider {
            id: id.into(),
            sanctioned: sanctioned.into_iter().collect(),
        }
    }

    pub fn assess(&self, pii: &BTreeSet<String>) -> KycStatus {
        if pii.is_empty() || pii.iter().any(|t| self.sanctioned.contains(t)) {
            KycStatus::Rejected
        } else {
            KycStatus::Verified
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CustomerProfile {
    pub user: ParticipantId,
    pub pip: ParticipantId,
    pub pii: BTreeSet<String>,
    pub kyc_status: KycStatus,
    pub kyc_provider: ParticipantId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserLimit {
    pub limit: MonetaryAmount,
    pub wallets: BTreeSet<AccountId>,
}

/// Cross-PIP holding limits. A user's first provisioning fixes the aggregate
/// limit; later wallets share it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoldingLimitRegistry {
    pub host: ParticipantId,
    users: BTreeMap<ParticipantId, UserLimit>,
    owners: BTreeMap<AccountId, ParticipantId>,
    online: bool,
}

impl HoldingLimitRegistry {
    pub fn new(host: impl Into<ParticipantId>) -> Self {
        HoldingLimitRegistry {
            host: host.into(),
            users: BTreeMap::new(),
            owners: BTreeMap::new(),
            online: true,
        }
    }

    pub fn set_online(&mut self, online: bool) {
        self.online = online;
    }

    pub fn is_online(&self) -> bool {
        self.online
    }

    pub fn users(&self) -> &BTreeMap<ParticipantId, UserLimit> {
        &self.users
    }

    pub fn owner_of(&self, wallet: &AccountId) -> Option<&ParticipantId> {
        self.owners.get(wallet)
    }

    fn check_capacity(&self, user: &ParticipantId, requested: MonetaryAmount) -> PipResult<()> {
        if !self.online {
            return Err(PipError::RegistryUnavailable);
        }
        match self.users.get(user) {
            Some(u) if requested > u.limit => Err(PipError::LimitCapacity {
                user: user.clone(),
                registered: u.limit,
                requested,
            }),
            _ => Ok(()),
        }
    }

    pub fn register(&mut self, user: &ParticipantId, wallet: &AccountId, limit: MonetaryAmount) -> PipResult<&UserLimit> {
        self.check_capacity(user, limit)?;
        let entry = self.users.entry(user.clone()).or_insert_with(|| UserLimit {
            limit,
            wallets: BTreeSet::new(),
        });
        entry.wallets.insert(wallet.clone());
        self.owners.insert(wallet.clone(), user.clone());
        Ok(entry)
    }

    /// Allows iff the sum of prospective wallet totals is within the limit.
    /// Users with no registration are unconstrained.
    pub fn enforce(&self, user: &ParticipantId, prospective: &[MonetaryAmount]) -> Result<(), LimitDenied> {
        if !self.online {
            return Err(LimitDenied::Unavailable);
        }
        let Some(u) = self.users.get(user) else { return Ok(()) };
        let total: u128 = prospective.iter().map(|a| u128::from(a.pence())).sum();
        if total > u128::from(u.limit.pence()) {
            return Err(LimitDenied::Exceeded {
                user: user.clone(),
                limit: u.limit,
                prospective: MonetaryAmount::from_pence(u64::try_from(total).unwrap_or(u64::MAX)),
            });
        }
        Ok(())
    }

    /// Current aggregate total for `user` on `core`, counting locked funds.
    pub fn aggregate(&self, core: &Ledger, user: &ParticipantId) -> MonetaryAmount {
        self.users
            .get(user)
            .map(|u| u.wallets.iter().filter_map(|w| core.total(w).ok()).sum())
            .unwrap_or_default()
    }
}

impl LimitGate for HoldingLimitRegistry {
    fn admit_credit(&self, core: &Ledger, wallet: &AccountId, credit: MonetaryAmount) -> Result<(), LimitDenied> {
        if !self.online {
            return Err(LimitDenied::Unavailable);
        }
        let Some(user) = self.owners.get(wallet) else { return Ok(()) };
        let totals: Vec<MonetaryAmount> = self.users[user]
            .wallets
            .iter()
            .map(|w| {
                let t = core.total(w).unwrap_or_default();
                if w == wallet {
                    t.checked_add(credit).unwrap_or(MonetaryAmount::from_pence(u64::MAX))
                } else {
                    t
                }
            })
            .collect();
        self.enforce(user, &totals)
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(PRIME))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Digest(pub String);

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadBody {
    pub payer_name: String,
    pub payer_address: String,
    pub payee_name: String,
    pub payee_address: String,
    pub purpose: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfidentialPayload {
    pub msg_id: MsgId,
    pub payer_name: String,
    pub payer_address: String,
    pub payee_name: String,
    pub payee_address: String,
    pub purpose: String,
}

impl ConfidentialPayload {
    pub fn new(msg_id: MsgId, body: PayloadBody) -> Self {
        ConfidentialPayload {
            msg_id,
            payer_name: body.payer_name,
            payer_address: body.payer_address,
            payee_name: body.payee_name,
            payee_address: body.payee_address,
            purpose: body.purpose,
        }
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("payload serializes")
    }

    pub fn digest(&self) -> Digest {
        Digest(format!("fnv1a64:{:016x}", fnv1a64(self.canonical_json().as_bytes())))
    }
}

/// The ledger-facing half of a payment. Holds wallet references only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RailMessage {
    pub msg_id: MsgId,
    pub payer: AccountRef,
    pub payee: AccountRef,
    pub amount: MonetaryAmount,
    pub lock: Option<LockId>,
    pub payload_digest: Option<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "route", content = "via", rename_all = "kebab-case")]
pub enum PayloadRoute {
    Peer,
    TspRelay(ParticipantId),
    Fmi(ParticipantId),
    CentralBank(ParticipantId),
}

impl PayloadRoute {
    pub fn name(&self) -> &'static str {
        match self {
            PayloadRoute::Peer => "peer",
            PayloadRoute::TspRelay(_) => "tsp-relay",
            PayloadRoute::Fmi(_) => "fmi",
            PayloadRoute::CentralBank(_) => "central-bank",
        }
    }

    /// Participants other than the endpoints that see payload bytes.
    pub fn intermediaries(&self) -> Vec<ParticipantId> {
        match self {
            PayloadRoute::Peer => Vec::new(),
            PayloadRoute::TspRelay(p) | PayloadRoute::Fmi(p) | PayloadRoute::CentralBank(p) => vec![p.clone()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryReceipt {
    pub msg_id: MsgId,
    pub from: ParticipantId,
    pub to: ParticipantId,
    pub route: PayloadRoute,
    pub intermediaries: Vec<ParticipantId>,
    pub digest: Digest,
}

/// Payloads held at their destination PIPs, deduplicated on msg id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadStore {
    stored: BTreeMap<ParticipantId, BTreeMap<MsgId, ConfidentialPayload>>,
    receipts: BTreeMap<MsgId, DeliveryReceipt>,
}

impl PayloadStore {
    pub fn at(&self, pip: &ParticipantId) -> Option<&BTreeMap<MsgId, ConfidentialPayload>> {
        self.stored.get(pip)
    }

    pub fn receipts(&self) -> &BTreeMap<MsgId, DeliveryReceipt> {
        &self.receipts
    }

    /// Removes a payload whose rail leg was never submitted.
    pub fn void(&mut self, msg_id: &MsgId) -> Option<DeliveryReceipt> {
        let r = self.receipts.remove(msg_id)?;
        if let Some(s) = self.stored.get_mut(&r.to) {
            s.remove(msg_id);
        }
        Some(r)
    }

    /// Delivers `payload` from `from` to `to` over `route`, which must be the
    /// topology's route.
    pub fn exchange(
        &mut self,
        from: &ParticipantId,
        to: &ParticipantId,
        payload: &ConfidentialPayload,
        route: &PayloadRoute,
        topology: &PayloadRoute,
    ) -> PipResult<DeliveryReceipt> {
        if route != topology {
            return Err(PipError::RouteMismatch {
                expected: topology.name().into(),
                got: route.name().into(),
            });
        }
        if let Some(r) = self.receipts.get(&payload.msg_id) {
            return Ok(r.clone());
        }
        let receipt = DeliveryReceipt {
            msg_id: payload.msg_id.clone(),
            from: from.clone(),
            to: to.clone(),
            intermediaries: route.intermediaries(),
            route: route.clone(),
            digest: payload.digest(),
        };
        self.stored
            .entry(to.clone())
            .or_default()
            .insert(payload.msg_id.clone(), payload.clone());
        self.receipts.insert(payload.msg_id.clone(), receipt.clone());
        Ok(receipt)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "ref", rename_all = "kebab-case")]
pub enum Payee {
    Alias(String),
    Account(AccountRef),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentRequest {
    pub msg_id: MsgId,
    pub payer_pip: ParticipantId,
    pub payer: AccountRef,
    pub payee: Payee,
    pub amount: MonetaryAmount,
    pub lock: Option<LockId>,
    pub payload: Option<PayloadBody>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentOutcome {
    pub rail: RailMessage,
    pub delivery: Option<DeliveryReceipt>,
    pub receipts: Vec<Receipt>,
}

/// What a PIP needs from the rest of the ecosystem to make a payment.
pub trait PaymentRails {
    fn resolve_alias(&mut self, alias: &str, via: &ParticipantId) -> Result<Resolution, AliasError>;
    /// Participant that receives the confidential payload for `payee`.
    fn endpoint(&self, payee: &AccountRef) -> Option<ParticipantId>;
    fn available(&self, account: &AccountRef) -> Option<MonetaryAmount>;
    fn deliver_payload(&mut self, from: &ParticipantId, to: &ParticipantId, payload: &ConfidentialPayload) -> PipResult<DeliveryReceipt>;
    fn submit(&mut self, payer_pip: &ParticipantId, msg: &RailMessage) -> PipResult<Vec<Receipt>>;
}

/// Resolves, checks funds, delivers the payload, then submits the rail
/// message. A failed payload delivery stops the payment before the rail.
pub fn initiate_payment<R: PaymentRails + ?Sized>(rails: &mut R, req: &PaymentRequest) -> PipResult<PaymentOutcome> {
    let payee = match &req.payee {
        Payee::Alias(a) => {
            let r = rails.resolve_alias(a, &req.payer_pip)?;
            AccountRef::new(CORE_LEDGER, r.wallet)
        }
        Payee::Account(acct) => acct.clone(),
    };
    if req.lock.is_none() {
        let available = rails
            .available(&req.payer)
            .ok_or_else(|| PipError::Ledger(LedgerError::UnknownAccount(req.payer.account.clone())))?;
        if available < req.amount {
            return Err(PipError::InsufficientFunds {
                available,
                requested: req.amount,
            });
        }
    }
    let payload = req.payload.clone().map(|b| ConfidentialPayload::new(req.msg_id.clone(), b));
    let delivery = match &payload {
        Some(p) => {
            let to = rails
                .endpoint(&payee)
                .ok_or_else(|| PipError::UnknownPayee(payee.to_string()))?;
            Some(rails.deliver_payload(&req.payer_pip, &to, p)?)
        }
        None => None,
    };
    let rail = RailMessage {
        msg_id: req.msg_id.clone(),
        payer: req.payer.clone(),
        payee,
        amount: req.amount,
        lock: req.lock.clone(),
        payload_digest: payload.as_ref().map(ConfidentialPayload::digest),
    };
    let receipts = rails.submit(&req.payer_pip, &rail)?;
    Ok(PaymentOutcome { rail, delivery, receipts })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipState {
    pub customers: BTreeMap<ParticipantId, CustomerProfile>,
    pub wallets: BTreeMap<AccountId, ParticipantId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provisioned {
    pub pip: ParticipantId,
    pub user: ParticipantId,
    pub wallet: AccountId,
    pub limit: MonetaryAmount,
    pub receipt: Receipt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipLayer {
    pips: BTreeMap<ParticipantId, PipState>,
    providers: BTreeMap<ParticipantId, KycProvider>,
    offline_providers: BTreeSet<ParticipantId>,
    pub registry: HoldingLimitRegistry,
}

impl PipLayer {
    pub fn new(registry_host: impl Into<ParticipantId>) -> Self {
        PipLayer {
            pips: BTreeMap::new(),
            providers: BTreeMap::new(),
            offline_providers: BTreeSet::new(),
            registry: HoldingLimitRegistry::new(registry_host),
        }
    }

    pub fn add_pip(&mut self, pip: impl Into<ParticipantId>) {
        self.pips.entry(pip.into()).or_default();
    }

    pub fn add_provider(&mut self, provider: KycProvider) {
        self.providers.insert(provider.id.clone(), provider);
    }

    pub fn set_provider_online(&mut self, id: &ParticipantId, online: bool) {
        if online {
            self.offline_providers.remove(id);
        } else {
            self.offline_providers.insert(id.clone());
        }
    }

    pub fn pips(&self) -> &BTreeMap<ParticipantId, PipState> {
        &self.pips
    }

    pub fn profile(&self, pip: &ParticipantId, user: &ParticipantId) -> Option<&CustomerProfile> {
        self.pips.get(pip)?.customers.get(user)
    }

    /// The PIP servicing `wallet`, if any.
    pub fn servicer_of(&self, wallet: &AccountId) -> Option<&ParticipantId> {
        self.pips.iter().find(|(_, s)| s.wallets.contains_key(wallet)).map(|(p, _)| p)
    }

    /// Records a wallet opened outside provisioning, such as a merchant's.
    pub fn attach_wallet(&mut self, pip: &ParticipantId, owner: &ParticipantId, wallet: AccountId) -> PipResult<()> {
        self.pips
            .get_mut(pip)
            .ok_or_else(|| PipError::UnknownPip(pip.clone()))?
            .wallets
            .insert(wallet, owner.clone());
        Ok(())
    }

    pub fn onboard_customer(
        &mut self,
        pip: &ParticipantId,
        user: &ParticipantId,
        pii: BTreeSet<String>,
        provider: &ParticipantId,
    ) -> PipResult<CustomerProfile> {
        let idp = self
            .providers
            .get(provider)
            .ok_or_else(|| PipError::UnknownProvider(provider.clone()))?;
        if self.offline_providers.contains(provider) {
            return Err(PipError::ProviderUnavailable(provider.clone()));
        }
        let status = idp.assess(&pii);
        let state = self.pips.get_mut(pip).ok_or_else(|| PipError::UnknownPip(pip.clone()))?;
        if state.customers.contains_key(user) {
            return Err(PipError::DuplicateOnboarding {
                pip: pip.clone(),
                user: user.clone(),
            });
        }
        let profile = CustomerProfile {
            user: user.clone(),
            pip: pip.clone(),
            pii,
            kyc_status: status,
            kyc_provider: provider.clone(),
        };
        state.customers.insert(user.clone(), profile.clone());
        Ok(profile)
    }

    /// Opens a zero-balance core wallet for a verified customer and registers
    /// it against the user's aggregate limit.
    pub fn provision_wallet(
        &mut self,
        key: &str,
        pip: &ParticipantId,
        user: &ParticipantId,
        limit: MonetaryAmount,
        core: &mut Ledger,
    ) -> PipResult<Provisioned> {
        let profile = self
            .profile(pip, user)
            .ok_or_else(|| PipError::NotOnboarded {
                pip: pip.clone(),
                user: user.clone(),
            })?;
        if profile.kyc_status != KycStatus::Verified {
            return Err(PipError::Unverified {
                user: user.clone(),
                status: profile.kyc_status,
            });
        }
        self.registry.check_capacity(user, limit)?;
        let receipt = core.apply(LedgerCommand::new(
            key,
            pip.clone(),
            Origin::Pip,
            CommandKind::Open {
                owner: user.clone(),
                form: MoneyForm::DigitalPound,
                initial: MonetaryAmount::ZERO,
            },
        ))?;
        let wallet = receipt.account.clone().expect("open names account");
        let registered = self.registry.register(user, &wallet, limit)?.limit;
        self.pips
            .get_mut(pip)
            .expect("profile found above")
            .wallets
            .insert(wallet.clone(), user.clone());
        Ok(Provisioned {
            pip: pip.clone(),
            user: user.clone(),
            wallet,
            limit: registered,
            receipt,
        })
    }
}
