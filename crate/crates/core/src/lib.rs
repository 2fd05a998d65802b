pub mod alias;
pub mod amount;
pub mod fmi;
pub mod harness;
pub mod ids;
pub mod ledger;
pub mod money;
pub mod pip;
pub mod scheme;
