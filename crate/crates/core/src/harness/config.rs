//! Topology configuration: capability providers, settlement mode, roster and
//! fault plan. Loaded from canonical JSON and validated with field paths.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::fmi::SettlementMode;
use crate::ids::{ParticipantId, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Capability {
    C1,
    C2,
    C3,
    C4,
    C5,
    C6,
    C7,
    C8,
}

impl Capability {
    pub const ALL: [Capability; 8] = [
        Capability::C1,
        Capability::C2,
        Capability::C3,
        Capability::C4,
        Capability::C5,
        Capability::C6,
        Capability::C7,
        Capability::C8,
    ];

    /// Capabilities whose provider is chosen by the topology.
    pub const CONFIGURABLE: [Capability; 6] = [
        Capability::C2,
        Capability::C3,
        Capability::C5,
        Capability::C6,
        Capability::C7,
        Capability::C8,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Capability::C1 => "C1",
            Capability::C2 => "C2",
            Capability::C3 => "C3",
            Capability::C4 => "C4",
            Capability::C5 => "C5",
            Capability::C6 => "C6",
            Capability::C7 => "C7",
            Capability::C8 => "C8",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Capability::C1 => "KYC checks",
            Capability::C2 => "confidential payment information",
            Capability::C3 => "alias management",
            Capability::C4 => "interoperability with bank money",
            Capability::C5 => "programmable payments",
            Capability::C6 => "merchant payment gateways",
            Capability::C7 => "card schemes",
            Capability::C8 => "ATM network schemes",
        }
    }

    pub fn parse(s: &str) -> Option<Capability> {
        Capability::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provider {
    CentralBank,
    Pip,
    Tsp,
    Fmi,
}

impl Provider {
    pub const ALL: [Provider; 4] = [Provider::CentralBank, Provider::Pip, Provider::Tsp, Provider::Fmi];

    pub fn as_str(self) -> &'static str {
        match self {
            Provider::CentralBank => "central-bank",
            Provider::Pip => "pip",
            Provider::Tsp => "tsp",
            Provider::Fmi => "fmi",
        }
    }

    pub fn parse(s: &str) -> Option<Provider> {
        Provider::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

impl fmt::Display for Provider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Fault {
    /// Deliver every message whose id matches the glob twice.
    DuplicateDelivery { msg_id: String },
    /// Lose the named message.
    Drop { msg_id: String },
    /// Participant crashes at `tick` and restarts one tick later.
    CrashRestart { participant: ParticipantId, tick: Tick },
}

/// `*` matches any run of characters.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == text;
    }
    let mut rest = text;
    for (i, part) in parts.iter().enumerate() {
        if i == 0 {
            match rest.strip_prefix(part) {
                Some(r) => rest = r,
                None => return false,
            }
        } else if i == parts.len() - 1 {
            return rest.len() >= part.len() && rest.ends_with(part);
        } else if let Some(pos) = rest.find(part) {
            rest = &rest[pos + part.len()..];
        } else {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankSpec {
    pub id: ParticipantId,
    pub reserve: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipSpec {
    pub id: ParticipantId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub issuing_partner: Option<ParticipantId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bin: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcquirerSpec {
    pub id: ParticipantId,
    pub partner_pip: ParticipantId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KycSpec {
    pub id: ParticipantId,
    pub sanctioned: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankAccountSpec {
    pub label: String,
    pub bank: ParticipantId,
    pub owner: ParticipantId,
    pub balance: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalletSpec {
    pub label: String,
    pub owner: ParticipantId,
    pub pip: ParticipantId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alias: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CashSpec {
    pub holder: ParticipantId,
    pub amount: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Networks {
    pub card: ParticipantId,
    pub atm: ParticipantId,
}

/// Who takes part in a run and what they hold at setup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roster {
    pub central_bank: ParticipantId,
    pub fmi: ParticipantId,
    pub tsp: ParticipantId,
    pub kyc: KycSpec,
    pub banks: Vec<BankSpec>,
    pub pips: Vec<PipSpec>,
    pub esips: Vec<ParticipantId>,
    pub acquirers: Vec<AcquirerSpec>,
    pub networks: Networks,
    pub users: Vec<ParticipantId>,
    pub merchants: Vec<ParticipantId>,
    pub operators: Vec<ParticipantId>,
    /// Merchant to the acquirer that receives its payment information.
    pub merchant_acquirers: BTreeMap<ParticipantId, ParticipantId>,
    pub bank_accounts: Vec<BankAccountSpec>,
    pub wallets: Vec<WalletSpec>,
    pub cash: Vec<CashSpec>,
}

impl Default for Roster {
    fn default() -> Self {
        fn p(s: &str) -> ParticipantId {
            ParticipantId::new(s)
        }
        let acct = |label: &str, bank: &str, owner: &str, balance| BankAccountSpec {
            label: label.into(),
            bank: p(bank),
            owner: p(owner),
            balance,
        };
        let cash = |holder: &str, amount| CashSpec { holder: p(holder), amount };
        Roster {
            central_bank: p("boe"),
            fmi: p("fmi"),
            tsp: p("tsp"),
            kyc: KycSpec {
                id: p("idp1"),
                sanctioned: vec!["Eve Mallory".into()],
            },
            banks: vec![
                BankSpec {
                    id: p("bank-a"),
                    reserve: 1_000_000,
                },
                BankSpec {
                    id: p("bank-b"),
                    reserve: 1_000_000,
                },
            ],
            pips: vec![
                PipSpec {
                    id: p("pip1"),
                    issuing_partner: None,
                    bin: None,
                },
                PipSpec {
                    id: p("pip2"),
                    issuing_partner: Some(p("bank-b")),
                    bin: Some("412345".into()),
                },
            ],
            esips: vec![p("esip1")],
            acquirers: vec![AcquirerSpec {
                id: p("acq1"),
                partner_pip: p("pip1"),
            }],
            networks: Networks {
                card: p("cardnet"),
                atm: p("atmnet"),
            },
            users: vec![p("laura"), p("bob")],
            merchants: vec![p("shop"), p("store"), p("farmer")],
            operators: vec![p("pop"), p("atm-op")],
            merchant_acquirers: [(p("shop"), p("acq1")), (p("store"), p("acq1"))].into_iter().collect(),
            bank_accounts: vec![
                acct("laura-bank", "bank-a", "laura", 120_000),
                acct("shop-bank", "bank-b", "shop", 0),
                acct("pop-bank", "bank-b", "pop", 500_000),
                acct("atm-bank", "bank-b", "atm-op", 500_000),
            ],
            wallets: vec![WalletSpec {
                label: "store-dp".into(),
                owner: p("store"),
                pip: p("pip1"),
                alias: Some("@store".into()),
            }],
            cash: vec![
                cash("bob", 60_000),
                cash("pop", 200_000),
                cash("atm-op", 200_000),
                cash("farmer", 0),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyConfig {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub topology: BTreeMap<Capability, Provider>,
    #[serde(default)]
    pub settlement_mode: SettlementMode,
    #[serde(default)]
    pub roster: Roster,
    #[serde(default)]
    pub faults: Vec<Fault>,
}

impl TopologyConfig {
    pub fn provider(&self, cap: Capability) -> Provider {
        match cap {
            Capability::C1 => Provider::Pip,
            Capability::C4 => Provider::Fmi,
            c => self.topology[&c],
        }
    }

    pub fn with_faults(mut self, faults: Vec<Fault>) -> Self {
        self.faults = faults;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

pub const PRESETS: [&str; 5] = ["option1", "option2", "option3", "option4", "mixed"];

/// Built-in topologies: the four uniform design options and the mixed one.
pub fn preset(name: &str) -> Option<TopologyConfig> {
    let uniform = |p: Provider| Capability::CONFIGURABLE.into_iter().map(|c| (c, p)).collect();
    let topology = match name {
        "option1" => uniform(Provider::CentralBank),
        "option2" => uniform(Provider::Pip),
        "option3" => uniform(Provider::Tsp),
        "option4" => uniform(Provider::Fmi),
        "mixed" => [
            (Capability::C2, Provider::Pip),
            (Capability::C3, Provider::Tsp),
            (Capability::C5, Provider::Fmi),
            (Capability::C6, Provider::Fmi),
            (Capability::C7, Provider::Pip),
            (Capability::C8, Provider::Pip),
        ]
        .into_iter()
        .collect(),
        _ => return None,
    };
    Some(TopologyConfig {
        name: name.to_owned(),
        seed: 42,
        topology,
        settlement_mode: SettlementMode::Gross,
        roster: Roster::default(),
        faults: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("invalid config: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
}

impl ConfigError {
    pub fn fields(&self) -> &[FieldError] {
        match self {
            ConfigError::Invalid(f) => f,
            _ => &[],
        }
    }
}

fn err(path: impl Into<String>, message: impl Into<String>) -> FieldError {
    FieldError {
        path: path.into(),
        message: message.into(),
    }
}

fn validate_faults(v: &Value, errors: &mut Vec<FieldError>) {
    let Some(items) = v.as_array() else {
        errors.push(err("faults", "must be an array"));
        return;
    };
    for (i, f) in items.iter().enumerate() {
        let path = format!("faults[{i}]");
        let kind = f.get("kind").and_then(Value::as_str);
        let need_str = |field: &str, errors: &mut Vec<FieldError>| {
            if f.get(field).and_then(Value::as_str).is_none() {
                errors.push(err(format!("{path}.{field}"), "required string"));
            }
        };
        match kind {
            Some("duplicate-delivery") | Some("drop") => need_str("msg_id", errors),
            Some("crash-restart") => {
                need_str("participant", errors);
                if f.get("tick").and_then(Value::as_u64).is_none() {
                    errors.push(err(format!("{path}.tick"), "required non-negative integer"));
                }
            }
            Some(other) => errors.push(err(format!("{path}.kind"), format!("unknown fault kind {other:?}"))),
            None => errors.push(err(format!("{path}.kind"), "required string")),
        }
    }
}

/// Validates a parsed JSON document and converts it to a config.
pub fn parse_config(v: &Value) -> Result<TopologyConfig, ConfigError> {
    let mut errors = Vec::new();
    let Some(obj) = v.as_object() else {
        return Err(ConfigError::Invalid(vec![err("$", "config must be an object")]));
    };
    const KNOWN: [&str; 6] = ["name", "seed", "topology", "settlement_mode", "roster", "faults"];
    for k in obj.keys() {
        if !KNOWN.contains(&k.as_str()) {
            errors.push(err(k.clone(), "unknown field"));
        }
    }
    match obj.get("seed") {
        None => errors.push(err("seed", "required: runs must be seeded")),
        Some(s) if s.as_u64().is_none() => errors.push(err("seed", "must be a non-negative integer")),
        _ => {}
    }
    match obj.get("topology").and_then(Value::as_object) {
        None => errors.push(err("topology", "required object mapping capabilities to providers")),
        Some(t) => {
            for (k, p) in t {
                let path = format!("topology.{k}");
                let Some(cap) = Capability::parse(k) else {
                    errors.push(err(path, "unknown capability"));
                    continue;
                };
                let Some(provider) = p.as_str().and_then(Provider::parse) else {
                    errors.push(err(path, format!("unknown provider {p}; expected central-bank, pip, tsp or fmi")));
                    continue;
                };
                if cap == Capability::C1 && provider != Provider::Pip {
                    errors.push(err(path, "C1 is always provided by pip"));
                } else if cap == Capability::C4 && provider != Provider::Fmi {
                    errors.push(err(path, "C4 is always railed through fmi"));
                }
            }
            for cap in Capability::CONFIGURABLE {
                if !t.contains_key(cap.as_str()) {
                    errors.push(err(format!("topology.{cap}"), "missing provider"));
                }
            }
        }
    }
    if let Some(m) = obj.get("settlement_mode") {
        if !matches!(m.as_str(), Some("gross") | Some("net")) {
            errors.push(err("settlement_mode", "must be gross or net"));
        }
    }
    if let Some(f) = obj.get("faults") {
        validate_faults(f, &mut errors);
    }
    if let Some(r) = obj.get("roster") {
        if let Err(e) = serde_json::from_value::<Roster>(r.clone()) {
            errors.push(err("roster", e.to_string()));
        }
    }
    if !errors.is_empty() {
        return Err(ConfigError::Invalid(errors));
    }
    let mut cfg: TopologyConfig =
        serde_json::from_value(v.clone()).map_err(|e| ConfigError::Invalid(vec![err("$", e.to_string())]))?;
    cfg.topology.remove(&Capability::C1);
    cfg.topology.remove(&Capability::C4);
    Ok(cfg)
}

pub fn parse_config_str(s: &str) -> Result<TopologyConfig, ConfigError> {
    let v: Value = serde_json::from_str(s).map_err(|e| ConfigError::Json(e.to_string()))?;
    parse_config(&v)
}

/// Loads a config file, or a built-in topology given as `preset:<name>`.
pub fn load_config(path: &str) -> Result<TopologyConfig, ConfigError> {
    if let Some(name) = path.strip_prefix("preset:") {
        return preset(name).ok_or_else(|| ConfigError::Invalid(vec![err("preset", format!("unknown preset {name:?}"))]));
    }
    let text = std::fs::read_to_string(Path::new(path)).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_config_str(&text)
}
