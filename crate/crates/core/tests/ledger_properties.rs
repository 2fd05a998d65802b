use std::collections::BTreeMap;

use cbdc_sim::ids::{AccountId, LockId, MoneyForm};
use cbdc_sim::ledger::{
    Beneficiary, CommandKind, EventProof, Ledger, LedgerCommand, LockState, Origin,
};
use proptest::prelude::*;

const OP: &str = "bank";
const ACCOUNTS: usize = 3;

#[derive(Debug, Clone)]
enum Action {
    Transfer(usize, usize, u64),
    Lock(usize, usize, u64, u64),
    Draw(usize, u64, bool),
    Release(usize),
    Tick(u64),
}

fn action() -> impl Strategy<Value = Action> {
    prop_oneof![
        (0..ACCOUNTS, 0..ACCOUNTS, 0u64..6000).prop_map(|(a, b, x)| Action::Transfer(a, b, x)),
        (0..ACCOUNTS, 0..ACCOUNTS, 0u64..6000, 1u64..30).prop_map(|(a, b, x, e)| Action::Lock(a, b, x, e)),
        (0usize..8, 0u64..4000, any::<bool>()).prop_map(|(l, x, ok)| Action::Draw(l, x, ok)),
        (0usize..8).prop_map(Action::Release),
        (1u64..10).prop_map(Action::Tick),
    ]
}

/// Independent reference: plain maps, rules restated from scratch.
#[derive(Debug, Default, Clone, PartialEq)]
struct Model {
    available: Vec<u64>,
    // (account, beneficiary, remaining, expiry, active)
    locks: Vec<(usize, usize, u64, u64, bool)>,
    now: u64,
}

impl Model {
    fn apply(&mut self, a: &Action) -> bool {
        match *a {
            Action::Transfer(f, t, x) => {
                if x == 0 || f == t || self.available[f] < x {
                    return false;
                }
                self.available[f] -= x;
                self.available[t] += x;
                true
            }
            Action::Lock(f, b, x, e) => {
                if x == 0 || self.available[f] < x {
                    return false;
                }
                self.available[f] -= x;
                self.locks.push((f, b, x, self.now + e, true));
                true
            }
            Action::Draw(i, x, tag_ok) => {
                let now = self.now;
                let Some(l) = self.locks.get_mut(i) else { return false };
                if !l.4 || now >= l.3 || !tag_ok || x == 0 || x > l.2 {
                    return false;
                }
                l.2 -= x;
                if l.2 == 0 {
                    l.4 = false;
                }
                let b = l.1;
                self.available[b] += x;
                true
            }
            Action::Release(i) => {
                let Some(l) = self.locks.get_mut(i) else { return false };
                if !l.4 {
                    return false;
                }
                l.4 = false;
                let (f, rem) = (l.0, l.2);
                self.available[f] += rem;
                true
            }
            Action::Tick(d) => {
                self.now += d;
                true
            }
        }
    }

    fn totals(&self) -> Vec<u64> {
        let mut t = self.available.clone();
        for l in self.locks.iter().filter(|l| l.4) {
            t[l.0] += l.2;
        }
        t
    }
}

struct Harness {
    ledger: Ledger,
    accounts: Vec<AccountId>,
    locks: Vec<LockId>,
    n: usize,
}

impl Harness {
    fn new(initial: &[u64]) -> Self {
        let mut ledger = Ledger::new("bank", OP);
        let mut accounts = Vec::new();
        for (i, amt) in initial.iter().enumerate() {
            let owner = format!("c{i}");
            ledger.register(owner.as_str());
            let r = ledger
                .apply(LedgerCommand::new(
                    format!("open{i}"),
                    OP,
                    Origin::Setup,
                    CommandKind::Open {
                        owner: owner.into(),
                        form: MoneyForm::CommercialBankMoney,
                        initial: (*amt).into(),
                    },
                ))
                .unwrap();
            accounts.push(r.account.unwrap());
        }
        Harness {
            ledger,
            accounts,
            locks: Vec::new(),
            n: 0,
        }
    }

    fn command(&mut self, a: &Action) -> Option<LedgerCommand> {
        self.n += 1;
        let key = format!("k{}", self.n);
        let kind = match *a {
            Action::Transfer(f, t, x) => CommandKind::Transfer {
                from: self.accounts[f].clone(),
                to: self.accounts[t].clone(),
                amount: x.into(),
            },
            Action::Lock(f, b, x, e) => CommandKind::Lock {
                account: self.accounts[f].clone(),
                amount: x.into(),
                beneficiary: Beneficiary::Local(self.accounts[b].clone()),
                condition_tag: "ok".into(),
                expiry: self.ledger.now() + e,
            },
            Action::Draw(i, x, tag_ok) => CommandKind::Drawdown {
                lock: self.locks.get(i).cloned().unwrap_or_else(|| LockId::new("missing")),
                amount: x.into(),
                proof: EventProof::new(if tag_ok { "ok" } else { "nope" }),
                bridge: None,
            },
            Action::Release(i) => CommandKind::Release {
                lock: self.locks.get(i).cloned().unwrap_or_else(|| LockId::new("missing")),
            },
            Action::Tick(d) => {
                let now = self.ledger.now();
                self.ledger.set_tick(now + d);
                return None;
            }
        };
        Some(LedgerCommand::new(key, OP, Origin::Harness, kind))
    }

    fn totals(&self) -> Vec<u64> {
        self.accounts
            .iter()
            .map(|a| self.ledger.total(a).unwrap().pence())
            .collect()
    }

    fn check_lock_safety(&self) {
        for a in &self.accounts {
            let acct = self.ledger.account(a).unwrap();
            let active: u64 = acct
                .locks
                .iter()
                .filter_map(|l| self.ledger.lock(l))
                .filter(|l| l.state == LockState::Active)
                .map(|l| l.remaining.pence())
                .sum();
            assert_eq!(self.ledger.total(a).unwrap().pence(), acct.available.pence() + active);
        }
        for l in self.ledger.locks() {
            assert!(l.remaining <= l.amount);
            if l.state == LockState::Drawn {
                assert!(l.remaining.is_zero());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn kernel_matches_serial_reference(
        initial in proptest::collection::vec(0u64..12000, ACCOUNTS),
        actions in proptest::collection::vec(action(), 1..40),
    ) {
        let mut h = Harness::new(&initial);
        let mut model = Model { available: initial.clone(), ..Model::default() };
        let start: u64 = initial.iter().sum();
        let mut applied = Vec::new();

        for a in &actions {
            let expect_ok = model.apply(a);
            let Some(cmd) = h.command(a) else { continue };
            let before = h.ledger.snapshot();
            let out = h.ledger.apply(cmd.clone());
            prop_assert_eq!(out.is_ok(), expect_ok, "action {:?} -> {:?}", a, out);
            if let Ok(r) = &out {
                if let Some(l) = &r.lock {
                    if r.op == "lock" {
                        h.locks.push(l.clone());
                    }
                }
                applied.push(r.seq);
            }
            // idempotency: replay is a no-op with the identical outcome
            let after = h.ledger.snapshot();
            prop_assert_eq!(h.ledger.apply(cmd), out.clone());
            prop_assert_eq!(h.ledger.snapshot(), after.clone());
            if out.is_err() {
                prop_assert_eq!(before, after);
            }
            h.check_lock_safety();
            // conservation: no bridge commands here, so the sum is fixed
            prop_assert_eq!(h.totals().iter().sum::<u64>(), start);
            prop_assert_eq!(h.totals(), model.totals());
        }
        // receipts form one strictly increasing order
        prop_assert!(applied.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn journal_replay_reproduces_balances() {
    let mut h = Harness::new(&[10000, 5000, 0]);
    let script = [
        Action::Transfer(0, 2, 2500),
        Action::Lock(1, 2, 4000, 10),
        Action::Draw(0, 1500, true),
        Action::Tick(3),
        Action::Release(0),
        Action::Transfer(2, 0, 100),
    ];
    for a in &script {
        if let Some(cmd) = h.command(a) {
            let r = h.ledger.apply(cmd).unwrap();
            if r.op == "lock" {
                h.locks.push(r.lock.unwrap());
            }
        }
    }
    let mut totals: BTreeMap<AccountId, i64> = BTreeMap::new();
    for r in h.ledger.journal() {
        for leg in &r.legs {
            *totals.entry(leg.account.clone()).or_default() += leg.total();
        }
    }
    for a in &h.accounts {
        assert_eq!(totals[a] as u64, h.ledger.total(a).unwrap().pence());
    }
    assert_eq!(h.totals(), vec![7600, 3500, 3900]);
}
