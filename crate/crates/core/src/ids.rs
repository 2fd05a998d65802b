//! Identifiers and small domain enums shared by every module.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                $name(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }
    };
}

string_id!(
    /// Identity of a simulated participant.
    ParticipantId
);
string_id!(AccountId);
string_id!(LedgerId);
string_id!(LockId);
string_id!(
    /// Caller-chosen token that makes a ledger command safe to retry.
    IdempotencyKey
);
string_id!(MsgId);

/// Logical simulator time.
pub type Tick = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    CentralBank,
    CommercialBank,
    Pip,
    Esip,
    Tsp,
    Fmi,
    MerchantAcquirer,
    User,
    Merchant,
    PopOperator,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::CentralBank => "central-bank",
            Role::CommercialBank => "commercial-bank",
            Role::Pip => "pip",
            Role::Esip => "esip",
            Role::Tsp => "tsp",
            Role::Fmi => "fmi",
            Role::MerchantAcquirer => "merchant-acquirer",
            Role::User => "user",
            Role::Merchant => "merchant",
            Role::PopOperator => "pop-operator",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A participant with its registration-time role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participant {
    pub id: ParticipantId,
    pub role: Role,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MoneyForm {
    DigitalPound,
    CommercialBankMoney,
    Reserve,
    PhysicalCash,
}

impl MoneyForm {
    pub fn as_str(self) -> &'static str {
        match self {
            MoneyForm::DigitalPound => "digital-pound",
            MoneyForm::CommercialBankMoney => "commercial-bank-money",
            MoneyForm::Reserve => "reserve",
            MoneyForm::PhysicalCash => "physical-cash",
        }
    }
}

impl fmt::Display for MoneyForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An account on a named ledger.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AccountRef {
    pub ledger: LedgerId,
    pub account: AccountId,
}

impl AccountRef {
    pub fn new(ledger: impl Into<LedgerId>, account: impl Into<AccountId>) -> Self {
        AccountRef {
            ledger: ledger.into(),
            account: account.into(),
        }
    }
}

impl fmt::Display for AccountRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.ledger, self.account)
    }
}
