//! Scenario scripts: ordered steps with expected outcomes, plus end-state
//! checks. Laura, Bob and the holding-limit walk are built in.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{ParticipantId, Tick};

use super::config::Capability;
use super::events::Expect;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum Action {
    Onboard {
        user: ParticipantId,
        pip: ParticipantId,
        pii: Vec<String>,
    },
    Provision {
        wallet: String,
        user: ParticipantId,
        pip: ParticipantId,
        limit: u64,
    },
    RegisterAlias {
        alias: String,
        wallet: String,
    },
    ValidateAlias {
        alias: String,
        acquirer: ParticipantId,
    },
    Fund {
        wallet: String,
        account: String,
        amount: u64,
    },
    Defund {
        wallet: String,
        account: String,
        amount: u64,
    },
    /// Merchant-initiated conditional payment: lock now, pay on delivery.
    LockPayment {
        order: String,
        payer: String,
        payee: String,
        amount: u64,
        expires_in: Tick,
        acquirer: ParticipantId,
        customer_alias: String,
    },
    Deliver {
        order: String,
    },
    /// Wallet payment to an alias or a labelled account.
    Pay {
        payer: String,
        payee: String,
        amount: u64,
        purpose: String,
    },
    /// Releases every expired conditional-payment lock.
    Sweep,
    IssueCard {
        card: String,
        wallet: String,
        secret: String,
    },
    PopDeposit {
        card: String,
        secret: String,
        operator: ParticipantId,
        account: String,
        amount: u64,
    },
    PosPurchase {
        card: String,
        secret: String,
        merchant: ParticipantId,
        wallet: String,
        authorize: u64,
        clear: u64,
    },
    AtmBalance {
        card: String,
        secret: String,
        operator: ParticipantId,
        account: String,
        shows: Option<u64>,
    },
    AtmWithdraw {
        card: String,
        secret: String,
        operator: ParticipantId,
        account: String,
        amount: u64,
    },
    AtmDeposit {
        card: String,
        secret: String,
        operator: ParticipantId,
        account: String,
        amount: u64,
    },
    CashPay {
        from: ParticipantId,
        to: ParticipantId,
        amount: u64,
    },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Onboard { .. } => "onboard",
            Action::Provision { .. } => "provision",
            Action::RegisterAlias { .. } => "register-alias",
            Action::ValidateAlias { .. } => "validate-alias",
            Action::Fund { .. } => "fund",
            Action::Defund { .. } => "defund",
            Action::LockPayment { .. } => "lock-payment",
            Action::Deliver { .. } => "deliver",
            Action::Pay { .. } => "pay",
            Action::Sweep => "sweep",
            Action::IssueCard { .. } => "issue-card",
            Action::PopDeposit { .. } => "pop-deposit",
            Action::PosPurchase { .. } => "pos-purchase",
            Action::AtmBalance { .. } => "atm-balance",
            Action::AtmWithdraw { .. } => "atm-withdraw",
            Action::AtmDeposit { .. } => "atm-deposit",
            Action::CashPay { .. } => "cash-pay",
        }
    }

    pub fn capability(&self) -> Option<Capability> {
        Some(match self {
            Action::Onboard { .. } | Action::Provision { .. } => Capability::C1,
            Action::Pay { .. } => Capability::C2,
            Action::RegisterAlias { .. } => Capability::C3,
            Action::Fund { .. } | Action::Defund { .. } => Capability::C4,
            Action::LockPayment { .. } | Action::Deliver { .. } | Action::Sweep => Capability::C5,
            Action::ValidateAlias { .. } => Capability::C6,
            Action::IssueCard { .. } | Action::PopDeposit { .. } | Action::PosPurchase { .. } => Capability::C7,
            Action::AtmBalance { .. } | Action::AtmWithdraw { .. } | Action::AtmDeposit { .. } => Capability::C8,
            Action::CashPay { .. } => return None,
        })
    }
}

fn ok() -> Expect {
    Expect::Ok
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    #[serde(default)]
    pub id: String,
    #[serde(flatten)]
    pub action: Action,
    #[serde(default = "ok")]
    pub expect: Expect,
}

/// End-state check: an account label's total, or `cash:<holder>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalCheck {
    pub subject: String,
    pub equals: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub pii_tokens: Vec<String>,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub final_state: Vec<FinalCheck>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown builtin scenario {0:?}")]
    UnknownBuiltin(String),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid scenario: {0}")]
    Json(String),
}

/// Loads `builtin:<name>` or a JSON scenario file.
pub fn load_scenario(arg: &str) -> Result<Scenario, ScenarioError> {
    if let Some(name) = arg.strip_prefix("builtin:") {
        return builtin(name).ok_or_else(|| ScenarioError::UnknownBuiltin(name.to_owned()));
    }
    let text = std::fs::read_to_string(arg).map_err(|source| ScenarioError::Io {
        path: arg.to_owned(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| ScenarioError::Json(e.to_string()))
}

pub const BUILTINS: [&str; 3] = ["laura", "bob", "limits"];

pub fn builtin(name: &str) -> Option<Scenario> {
    match name {
        "laura" => Some(laura()),
        "bob" => Some(bob()),
        "limits" => Some(limits()),
        _ => None,
    }
}

fn step(id: &str, action: Action) -> Step {
    Step {
        id: id.to_owned(),
        action,
        expect: Expect::Ok,
    }
}

fn rejects(id: &str, action: Action, reason: &str) -> Step {
    Step {
        id: id.to_owned(),
        action,
        expect: Expect::Reject(Some(reason.to_owned())),
    }
}

fn check(subject: &str, equals: u64) -> FinalCheck {
    FinalCheck {
        subject: subject.to_owned(),
        equals,
    }
}

const LAURA_PHONE: &str = "+447700900123";

fn laura_pii() -> Vec<String> {
    vec!["Laura Jones".into(), "12 Acacia Avenue, Leeds".into(), LAURA_PHONE.into()]
}

fn onboard(user: &str, pip: &str, pii: Vec<String>) -> Action {
    Action::Onboard {
        user: user.into(),
        pip: pip.into(),
        pii,
    }
}

fn provision(wallet: &str, user: &str, pip: &str, limit: u64) -> Action {
    Action::Provision {
        wallet: wallet.into(),
        user: user.into(),
        pip: pip.into(),
        limit,
    }
}

fn fund(wallet: &str, account: &str, amount: u64) -> Action {
    Action::Fund {
        wallet: wallet.into(),
        account: account.into(),
        amount,
    }
}

fn defund(wallet: &str, account: &str, amount: u64) -> Action {
    Action::Defund {
        wallet: wallet.into(),
        account: account.into(),
        amount,
    }
}

fn order(order: &str, payer: &str, amount: u64, expires_in: Tick) -> Action {
    Action::LockPayment {
        order: order.into(),
        payer: payer.into(),
        payee: "shop-bank".into(),
        amount,
        expires_in,
        acquirer: "acq1".into(),
        customer_alias: LAURA_PHONE.into(),
    }
}

fn deliver(o: &str) -> Action {
    Action::Deliver { order: o.into() }
}

/// Laura shops online with pay-on-delivery from her wallet and bank account.
pub fn laura() -> Scenario {
    let alias = |wallet: &str| Action::RegisterAlias {
        alias: LAURA_PHONE.into(),
        wallet: wallet.into(),
    };
    Scenario {
        name: "laura".into(),
        pii_tokens: laura_pii(),
        steps: vec![
            step("onboard-pip1", onboard("laura", "pip1", laura_pii())),
            step("provision-dp", provision("laura-dp", "laura", "pip1", 100_000)),
            step("register-alias", alias("laura-dp")),
            step("onboard-pip2", onboard("laura", "pip2", laura_pii())),
            step("provision-dp2", provision("laura-dp2", "laura", "pip2", 100_000)),
            rejects("reuse-alias", alias("laura-dp2"), "already active"),
            step("fund", fund("laura-dp", "laura-bank", 40_000)),
            step(
                "gateway-validate",
                Action::ValidateAlias {
                    alias: LAURA_PHONE.into(),
                    acquirer: "acq1".into(),
                },
            ),
            step("order-1-lock", order("order-1", "laura-dp", 30_000, 1_000)),
            rejects("defund-locked", defund("laura-dp", "laura-bank", 30_000), "insufficient"),
            step("order-2-lock", order("order-2", "laura-dp", 10_000, 150)),
            step("order-1-delivered", deliver("order-1")),
            rejects(
                "pay-store",
                Action::Pay {
                    payer: "laura-dp".into(),
                    payee: "@store".into(),
                    amount: 5_000,
                    purpose: "groceries".into(),
                },
                "insufficient",
            ),
            step("expiry-sweep", Action::Sweep),
            step("defund", defund("laura-dp", "laura-bank", 10_000)),
            step("order-3-lock", order("order-3", "laura-bank", 20_000, 1_000)),
            step("order-3-delivered", deliver("order-3")),
        ],
        final_state: vec![
            check("laura-dp", 0),
            check("laura-dp2", 0),
            check("laura-bank", 70_000),
            check("shop-bank", 50_000),
        ],
    }
}

/// Bob uses a card: cash in at a point of presence, a shop purchase, ATM
/// withdrawal and an ATM deposit that would breach his holding limit.
pub fn bob() -> Scenario {
    let card = || "bob-card".to_owned();
    let secret = || "2468".to_owned();
    let atm = || ParticipantId::new("atm-op");
    let atm_account = || "atm-bank".to_owned();
    Scenario {
        name: "bob".into(),
        pii_tokens: vec!["Bob Smith".into(), "3 Mill Lane, York".into()],
        steps: vec![
            step("onboard", onboard("bob", "pip2", vec!["Bob Smith".into(), "3 Mill Lane, York".into()])),
            step("provision", provision("bob-dp", "bob", "pip2", 50_000)),
            step(
                "issue-card",
                Action::IssueCard {
                    card: card(),
                    wallet: "bob-dp".into(),
                    secret: secret(),
                },
            ),
            step(
                "pop-deposit",
                Action::PopDeposit {
                    card: card(),
                    secret: secret(),
                    operator: "pop".into(),
                    account: "pop-bank".into(),
                    amount: 20_000,
                },
            ),
            step(
                "atm-balance",
                Action::AtmBalance {
                    card: card(),
                    secret: secret(),
                    operator: atm(),
                    account: atm_account(),
                    shows: Some(20_000),
                },
            ),
            step(
                "pos-purchase",
                Action::PosPurchase {
                    card: card(),
                    secret: secret(),
                    merchant: "store".into(),
                    wallet: "store-dp".into(),
                    authorize: 3_500,
                    clear: 3_000,
                },
            ),
            step(
                "atm-withdraw",
                Action::AtmWithdraw {
                    card: card(),
                    secret: secret(),
                    operator: atm(),
                    account: atm_account(),
                    amount: 6_000,
                },
            ),
            step(
                "pay-farmer",
                Action::CashPay {
                    from: "bob".into(),
                    to: "farmer".into(),
                    amount: 6_000,
                },
            ),
            rejects(
                "atm-deposit",
                Action::AtmDeposit {
                    card: card(),
                    secret: secret(),
                    operator: atm(),
                    account: atm_account(),
                    amount: 40_000,
                },
                "limit",
            ),
        ],
        final_state: vec![
            check("bob-dp", 11_000),
            check("store-dp", 3_000),
            check("pop-bank", 480_000),
            check("atm-bank", 506_000),
            check("cash:bob", 40_000),
            check("cash:farmer", 6_000),
            check("cash:pop", 220_000),
            check("cash:atm-op", 194_000),
        ],
    }
}

/// One user, two wallets at different PIPs, one aggregate limit.
pub fn limits() -> Scenario {
    Scenario {
        name: "limits".into(),
        pii_tokens: laura_pii(),
        steps: vec![
            step("onboard-pip1", onboard("laura", "pip1", laura_pii())),
            step("provision-dp", provision("laura-dp", "laura", "pip1", 100_000)),
            step("onboard-pip2", onboard("laura", "pip2", laura_pii())),
            step("provision-dp2", provision("laura-dp2", "laura", "pip2", 100_000)),
            step("fund-first", fund("laura-dp", "laura-bank", 60_000)),
            rejects("fund-over", fund("laura-dp2", "laura-bank", 40_001), "limit"),
            step("fund-exact", fund("laura-dp2", "laura-bank", 40_000)),
        ],
        final_state: vec![
            check("laura-dp", 60_000),
            check("laura-dp2", 40_000),
            check("laura-bank", 20_000),
        ],
    }
}
