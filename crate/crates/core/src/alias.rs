//! Alias directory: maps mobile numbers, card numbers and handles to
//! digital pound wallets.
//!
//! Three deployments are supported. A central store held by one host; PIP-local
//! stores federated through a sequencer (only `(alias, pip, tick)` claims leave
//! the registering PIP, wallet references never do); and isolated PIP-local
//! stores with no federation at all, which exists to show what breaks without
//! one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{AccountId, ParticipantId, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AliasKind {
    MobileNumber,
    CardNumber,
    Handle,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "kebab-case")]
pub enum AliasError {
    #[error("malformed alias {alias:?}: {reason}")]
    Malformed { alias: String, reason: String },
    #[error("alias {alias} is already active")]
    Duplicate { alias: String },
    #[error("card prefix of {alias} is not owned by the registering pip's issuer (expected {expected:?})")]
    ForeignPrefix { alias: String, expected: Option<String> },
    #[error("unknown alias {0}")]
    Unknown(String),
    #[error("alias {0} is retired")]
    Retired(String),
    #[error("alias {alias} is quarantined until tick {until:?}")]
    Quarantined { alias: String, until: Option<Tick> },
    #[error("directory unavailable: {participant} is offline")]
    Unavailable { participant: ParticipantId },
    #[error("{caller} did not register {alias}")]
    NotRegistrant { alias: String, caller: ParticipantId },
    #[error("{0} is not a directory member")]
    NotMember(ParticipantId),
}

pub type AliasResult<T> = Result<T, AliasError>;

/// A syntactically valid alias.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Alias {
    pub kind: AliasKind,
    pub value: String,
}

impl Alias {
    /// Mobile numbers are `+` and 8 to 15 digits, card numbers are 16 digits,
    /// handles are `@` and 3 to 32 of `[a-z0-9._-]`.
    pub fn parse(s: &str) -> AliasResult<Alias> {
        let bad = |reason: &str| AliasError::Malformed {
            alias: s.to_owned(),
            reason: reason.to_owned(),
        };
        if let Some(digits) = s.strip_prefix('+') {
            if !digits.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad("mobile number must be + followed by digits"));
            }
            if !(8..=15).contains(&digits.len()) || digits.starts_with('0') {
                return Err(bad("mobile number must have 8-15 digits and no leading zero"));
            }
            Ok(Alias {
                kind: AliasKind::MobileNumber,
                value: s.to_owned(),
            })
        } else if let Some(h) = s.strip_prefix('@') {
            let ok = h
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || matches!(b, b'.' | b'_' | b'-'));
            if !ok || !(3..=32).contains(&h.len()) {
                return Err(bad("handle must be @ followed by 3-32 of [a-z0-9._-]"));
            }
            Ok(Alias {
                kind: AliasKind::Handle,
                value: s.to_owned(),
            })
        } else if s.bytes().all(|b| b.is_ascii_digit()) && !s.is_empty() {
            if s.len() != 16 {
                return Err(bad("card number must have 16 digits"));
            }
            Ok(Alias {
                kind: AliasKind::CardNumber,
                value: s.to_owned(),
            })
        } else {
            Err(bad("not a mobile number, card number or handle"))
        }
    }

    pub fn card_prefix(&self) -> Option<&str> {
        (self.kind == AliasKind::CardNumber).then(|| &self.value[..6])
    }
}

impl fmt::Display for Alias {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AliasStatus {
    Active,
    Retired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AliasRecord {
    pub alias: Alias,
    pub wallet: AccountId,
    pub registering_pip: ParticipantId,
    pub status: AliasStatus,
    pub registered_at: Tick,
    pub retired_at: Option<Tick>,
}

/// Federation index entry. Carries no wallet reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub alias: String,
    pub pip: ParticipantId,
    pub tick: Tick,
    pub status: AliasStatus,
    pub retired_at: Option<Tick>,
}

/// A registration request submitted in a batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub alias: String,
    pub wallet: AccountId,
    pub pip: ParticipantId,
    pub tick: Tick,
}

/// Full resolution, returned only to PIPs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub alias: String,
    pub wallet: AccountId,
    pub pip: ParticipantId,
}

/// Existence check; has no wallet field by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Validation {
    pub alias: String,
    pub exists: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum DirectoryMode {
    /// One store at `host` (central bank, TSP or FMI).
    Central { host: ParticipantId },
    /// PIP-local stores; claims sequenced and broadcast by `sequencer`.
    Federated { sequencer: ParticipantId },
    /// PIP-local stores that never talk to each other.
    Isolated,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Store {
    pub records: BTreeMap<String, AliasRecord>,
    pub index: BTreeMap<String, Claim>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AliasDirectory {
    mode: DirectoryMode,
    pips: BTreeSet<ParticipantId>,
    stores: BTreeMap<ParticipantId, Store>,
    /// The sequencer's own claim log in federated mode.
    claims: BTreeMap<String, Claim>,
    card_prefixes: BTreeMap<ParticipantId, String>,
    /// Ticks a retired alias waits before reuse; `None` means never.
    quarantine: Option<Tick>,
    offline: BTreeSet<ParticipantId>,
}

impl AliasDirectory {
    pub fn new(mode: DirectoryMode) -> Self {
        let mut stores = BTreeMap::new();
        if let DirectoryMode::Central { host } = &mode {
            stores.insert(host.clone(), Store::default());
        }
        AliasDirectory {
            mode,
            pips: BTreeSet::new(),
            stores,
            claims: BTreeMap::new(),
            card_prefixes: BTreeMap::new(),
            quarantine: None,
            offline: BTreeSet::new(),
        }
    }

    pub fn with_quarantine(mut self, ticks: Option<Tick>) -> Self {
        self.quarantine = ticks;
        self
    }

    pub fn mode(&self) -> &DirectoryMode {
        &self.mode
    }

    pub fn add_pip(&mut self, pip: impl Into<ParticipantId>) {
        let pip = pip.into();
        if !matches!(self.mode, DirectoryMode::Central { .. }) {
            self.stores.entry(pip.clone()).or_default();
        }
        self.pips.insert(pip);
    }

    /// Declares the card prefix owned by `pip`'s issuing partner.
    pub fn set_card_prefix(&mut self, pip: impl Into<ParticipantId>, prefix: impl Into<String>) {
        self.card_prefixes.insert(pip.into(), prefix.into());
    }

    pub fn set_offline(&mut self, who: &ParticipantId, offline: bool) {
        if offline {
            self.offline.insert(who.clone());
        } else {
            self.offline.remove(who);
        }
    }

    /// Where the full record registered by `pip` is held.
    pub fn record_host(&self, pip: &ParticipantId) -> ParticipantId {
        match &self.mode {
            DirectoryMode::Central { host } => host.clone(),
            _ => pip.clone(),
        }
    }

    pub fn stores(&self) -> &BTreeMap<ParticipantId, Store> {
        &self.stores
    }

    /// Every full record across every store.
    pub fn records(&self) -> impl Iterator<Item = (&ParticipantId, &AliasRecord)> {
        self.stores
            .iter()
            .flat_map(|(host, s)| s.records.values().map(move |r| (host, r)))
    }

    /// Active aliases with their record count; any count above one is a
    /// federation-wide duplicate.
    pub fn active_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (_, r) in self.records() {
            if r.status == AliasStatus::Active {
                *out.entry(r.alias.value.clone()).or_insert(0) += 1;
            }
        }
        out
    }

    fn up(&self, who: &ParticipantId) -> AliasResult<()> {
        if self.offline.contains(who) {
            Err(AliasError::Unavailable {
                participant: who.clone(),
            })
        } else {
            Ok(())
        }
    }

    fn member(&self, pip: &ParticipantId) -> AliasResult<()> {
        if self.pips.contains(pip) {
            Ok(())
        } else {
            Err(AliasError::NotMember(pip.clone()))
        }
    }

    fn check_reuse(&self, alias: &str, status: AliasStatus, retired_at: Option<Tick>, tick: Tick) -> AliasResult<()> {
        match status {
            AliasStatus::Active => Err(AliasError::Duplicate { alias: alias.to_owned() }),
            AliasStatus::Retired => match (self.quarantine, retired_at) {
                (Some(q), Some(at)) if tick >= at + q => Ok(()),
                (q, at) => Err(AliasError::Quarantined {
                    alias: alias.to_owned(),
                    until: q.zip(at).map(|(q, at)| at + q),
                }),
            },
        }
    }

    fn validate_new(&self, alias: &str, pip: &ParticipantId) -> AliasResult<Alias> {
        let parsed = Alias::parse(alias)?;
        if let Some(prefix) = parsed.card_prefix() {
            let expected = self.card_prefixes.get(pip);
            if expected.map(String::as_str) != Some(prefix) {
                return Err(AliasError::ForeignPrefix {
                    alias: alias.to_owned(),
                    expected: expected.cloned(),
                });
            }
        }
        Ok(parsed)
    }

    /// Registers `alias` for `wallet` on behalf of `pip`. Re-registering the
    /// identical active mapping returns the existing record.
    pub fn register(&mut self, alias: &str, wallet: &AccountId, pip: &ParticipantId, tick: Tick) -> AliasResult<AliasRecord> {
        self.member(pip)?;
        let parsed = self.validate_new(alias, pip)?;
        let host = self.record_host(pip);
        self.up(&host)?;
        if let Some(existing) = self.stores.get(&host).and_then(|s| s.records.get(alias)) {
            if existing.status == AliasStatus::Active && &existing.wallet == wallet && &existing.registering_pip == pip {
                return Ok(existing.clone());
            }
            self.check_reuse(alias, existing.status, existing.retired_at, tick)?;
        }
        if let DirectoryMode::Federated { sequencer } = &self.mode {
            let sequencer = sequencer.clone();
            if let Some(c) = self.stores[pip].index.get(alias) {
                self.check_reuse(alias, c.status, c.retired_at, tick)?;
            }
            self.up(&sequencer)?;
            if let Some(c) = self.claims.get(alias) {
                self.check_reuse(alias, c.status, c.retired_at, tick)?;
            }
            let claim = Claim {
                alias: alias.to_owned(),
                pip: pip.clone(),
                tick,
                status: AliasStatus::Active,
                retired_at: None,
            };
            self.broadcast(claim);
        }
        let record = AliasRecord {
            alias: parsed,
            wallet: wallet.clone(),
            registering_pip: pip.clone(),
            status: AliasStatus::Active,
            registered_at: tick,
            retired_at: None,
        };
        self.stores
            .entry(host)
            .or_default()
            .records
            .insert(alias.to_owned(), record.clone());
        Ok(record)
    }

    fn broadcast(&mut self, claim: Claim) {
        self.claims.insert(claim.alias.clone(), claim.clone());
        for pip in &self.pips {
            if let Some(s) = self.stores.get_mut(pip) {
                s.index.insert(claim.alias.clone(), claim.clone());
            }
        }
    }

    /// Registrations that reach the directory concurrently. Conflicts are
    /// decided first-writer-wins on `(tick, pip)`, so the outcome does not
    /// depend on the order of `batch`.
    pub fn register_batch(&mut self, batch: &[Registration]) -> Vec<(Registration, AliasResult<AliasRecord>)> {
        let mut ordered: Vec<&Registration> = batch.iter().collect();
        ordered.sort_by(|a, b| (a.tick, &a.pip, &a.alias, &a.wallet).cmp(&(b.tick, &b.pip, &b.alias, &b.wallet)));
        ordered
            .into_iter()
            .map(|r| (r.clone(), self.register(&r.alias, &r.wallet, &r.pip, r.tick)))
            .collect()
    }

    /// Looks the alias up through `via`'s view of the directory.
    pub fn resolve(&self, alias: &str, via: &ParticipantId) -> AliasResult<Resolution> {
        let record = self.find(alias, via)?;
        match record.status {
            AliasStatus::Active => Ok(Resolution {
                alias: alias.to_owned(),
                wallet: record.wallet.clone(),
                pip: record.registering_pip.clone(),
            }),
            AliasStatus::Retired => Err(AliasError::Retired(alias.to_owned())),
        }
    }

    pub fn validate(&self, alias: &str, via: &ParticipantId) -> AliasResult<Validation> {
        let exists = match self.find(alias, via) {
            Ok(r) => r.status == AliasStatus::Active,
            Err(AliasError::Unknown(_)) => false,
            Err(e) => return Err(e),
        };
        Ok(Validation {
            alias: alias.to_owned(),
            exists,
        })
    }

    fn find(&self, alias: &str, via: &ParticipantId) -> AliasResult<&AliasRecord> {
        let unknown = || AliasError::Unknown(alias.to_owned());
        match &self.mode {
            DirectoryMode::Central { host } => {
                self.up(host)?;
                self.stores[host].records.get(alias).ok_or_else(unknown)
            }
            DirectoryMode::Federated { sequencer } => {
                // Non-PIP participants look up through the sequencer's claim log.
                let claim = if let Some(view) = self.stores.get(via) {
                    view.index.get(alias)
                } else if via == sequencer {
                    self.up(sequencer)?;
                    self.claims.get(alias)
                } else {
                    return Err(AliasError::NotMember(via.clone()));
                };
                let claim = claim.ok_or_else(unknown)?;
                self.up(&claim.pip)?;
                self.stores[&claim.pip].records.get(alias).ok_or_else(unknown)
            }
            DirectoryMode::Isolated => {
                let view = self.stores.get(via).ok_or_else(|| AliasError::NotMember(via.clone()))?;
                self.up(via)?;
                view.records.get(alias).ok_or_else(unknown)
            }
        }
    }

    /// Retires an alias registered by `pip`.
    pub fn retire(&mut self, alias: &str, pip: &ParticipantId, tick: Tick) -> AliasResult<AliasRecord> {
        let host = self.record_host(pip);
        self.up(&host)?;
        if let Some(c) = self.claims.get(alias) {
            if &c.pip != pip {
                return Err(AliasError::NotRegistrant {
                    alias: alias.to_owned(),
                    caller: pip.clone(),
                });
            }
        }
        let record = self
            .stores
            .get_mut(&host)
            .and_then(|s| s.records.get_mut(alias))
            .ok_or_else(|| AliasError::Unknown(alias.to_owned()))?;
        if &record.registering_pip != pip {
            return Err(AliasError::NotRegistrant {
                alias: alias.to_owned(),
                caller: pip.clone(),
            });
        }
        if record.status == AliasStatus::Retired {
            return Err(AliasError::Retired(alias.to_owned()));
        }
        record.status = AliasStatus::Retired;
        record.retired_at = Some(tick);
        let out = record.clone();
        if let Some(mut claim) = self.claims.get(alias).cloned() {
            claim.status = AliasStatus::Retired;
            claim.retired_at = Some(tick);
            self.broadcast(claim);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pid(s: &str) -> ParticipantId {
        ParticipantId::new(s)
    }

    fn dir(mode: DirectoryMode) -> AliasDirectory {
        let mut d = AliasDirectory::new(mode);
        d.add_pip("pip1");
        d.add_pip("pip2");
        d.set_card_prefix("pip2", "412345");
        d
    }

    fn federated() -> AliasDirectory {
        dir(DirectoryMode::Federated { sequencer: pid("tsp") })
    }

    #[test]
    fn parses_alias_shapes() {
        assert_eq!(Alias::parse("+447700900123").unwrap().kind, AliasKind::MobileNumber);
        assert_eq!(Alias::parse("4123450000000001").unwrap().kind, AliasKind::CardNumber);
        assert_eq!(Alias::parse("@laura.j").unwrap().kind, AliasKind::Handle);
        for bad in ["+44-bad", "+0123456789", "+4412", "123", "@AB", "laura", ""] {
            assert!(matches!(Alias::parse(bad), Err(AliasError::Malformed { .. })), "{bad}");
        }
    }

    #[test]
    fn register_resolve_duplicate() {
        let wl = AccountId::new("core:0001");
        for mode in [
            DirectoryMode::Central { host: pid("fmi") },
            DirectoryMode::Federated { sequencer: pid("tsp") },
        ] {
            let mut d = dir(mode);
            let rec = d.register("+447700900123", &wl, &pid("pip1"), 1).unwrap();
            assert_eq!(rec.status, AliasStatus::Active);
            let err = d.register("+447700900123", &AccountId::new("core:0002"), &pid("pip2"), 2).unwrap_err();
            assert_eq!(err, AliasError::Duplicate { alias: "+447700900123".into() });
            for via in ["pip1", "pip2"] {
                let r = d.resolve("+447700900123", &pid(via)).unwrap();
                assert_eq!((r.wallet, r.pip), (wl.clone(), pid("pip1")));
            }
            assert!(matches!(d.register("+44-bad", &wl, &pid("pip1"), 3), Err(AliasError::Malformed { .. })));
            // same mapping again is idempotent
            assert_eq!(d.register("+447700900123", &wl, &pid("pip1"), 4).unwrap(), rec);
        }
    }

    #[test]
    fn isolated_stores_admit_duplicates() {
        let mut d = dir(DirectoryMode::Isolated);
        d.register("+447700900123", &AccountId::new("core:0001"), &pid("pip1"), 1).unwrap();
        d.register("+447700900123", &AccountId::new("core:0002"), &pid("pip2"), 2).unwrap();
        assert_eq!(d.active_counts()["+447700900123"], 2);
        assert!(!d.validate("+447700900123", &pid("pip3")).is_ok());
    }

    #[test]
    fn validate_discloses_only_existence() {
        let mut d = federated();
        d.register("+447700900123", &AccountId::new("core:0001"), &pid("pip1"), 1).unwrap();
        let v = d.validate("+447700900123", &pid("pip2")).unwrap();
        assert!(v.exists);
        assert!(!d.validate("+447700900999", &pid("pip2")).unwrap().exists);
        let json = serde_json::to_value(&v).unwrap();
        assert_eq!(json.as_object().unwrap().keys().collect::<Vec<_>>(), ["alias", "exists"]);
    }

    #[test]
    fn retired_alias_not_resolvable_or_reusable_by_default() {
        let mut d = federated();
        let w = AccountId::new("core:0001");
        d.register("@laura", &w, &pid("pip1"), 1).unwrap();
        assert!(matches!(d.retire("@laura", &pid("pip2"), 2), Err(AliasError::NotRegistrant { .. })));
        d.retire("@laura", &pid("pip1"), 2).unwrap();
        assert_eq!(d.resolve("@laura", &pid("pip2")), Err(AliasError::Retired("@laura".into())));
        assert!(!d.validate("@laura", &pid("pip2")).unwrap().exists);
        assert!(matches!(d.register("@laura", &w, &pid("pip2"), 1000), Err(AliasError::Quarantined { until: None, .. })));

        let mut q = federated().with_quarantine(Some(10));
        q.register("@laura", &w, &pid("pip1"), 1).unwrap();
        q.retire("@laura", &pid("pip1"), 5).unwrap();
        assert!(matches!(q.register("@laura", &w, &pid("pip2"), 14), Err(AliasError::Quarantined { until: Some(15), .. })));
        q.register("@laura", &w, &pid("pip2"), 15).unwrap();
    }

    #[test]
    fn offline_registrant_makes_federated_resolution_unavailable() {
        let mut d = federated();
        d.register("+447700900123", &AccountId::new("core:0001"), &pid("pip1"), 1).unwrap();
        d.set_offline(&pid("pip1"), true);
        assert_eq!(
            d.resolve("+447700900123", &pid("pip2")),
            Err(AliasError::Unavailable { participant: pid("pip1") })
        );
        d.set_offline(&pid("tsp"), true);
        assert!(matches!(d.register("@bob1", &AccountId::new("core:0002"), &pid("pip2"), 2), Err(AliasError::Unavailable { .. })));
    }

    #[test]
    fn card_prefix_must_belong_to_issuer() {
        let mut d = federated();
        let w = AccountId::new("core:0003");
        assert!(matches!(d.register("4123450000000001", &w, &pid("pip1"), 1), Err(AliasError::ForeignPrefix { .. })));
        assert!(matches!(d.register("9999990000000001", &w, &pid("pip2"), 1), Err(AliasError::ForeignPrefix { .. })));
        d.register("4123450000000001", &w, &pid("pip2"), 1).unwrap();
    }

    #[test]
    fn concurrent_claims_first_writer_wins() {
        let reg = |pip: &str, tick, n: &str| Registration {
            alias: "@shared".into(),
            wallet: AccountId::new(n),
            pip: pid(pip),
            tick,
        };
        let batch = vec![reg("pip2", 3, "core:0002"), reg("pip1", 3, "core:0001"), reg("pip2", 2, "core:0004")];
        let mut a = federated();
        let mut b = federated();
        let mut reversed = batch.clone();
        reversed.reverse();
        let ra = a.register_batch(&batch);
        b.register_batch(&reversed);
        assert_eq!(a, b);
        assert!(ra[0].1.is_ok());
        assert_eq!(ra[0].0.tick, 2);
        assert_eq!(a.resolve("@shared", &pid("pip1")).unwrap().wallet, AccountId::new("core:0004"));
    }
}
