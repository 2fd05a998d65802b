//! The nine acceptance criteria. Each prints one PASS/FAIL line; the test
//! fails if any criterion fails.

use std::collections::BTreeMap;

use cbdc_sim::alias::{AliasDirectory, DirectoryMode, Registration};
use cbdc_sim::harness::audit::{audit, AuditReport};
use cbdc_sim::harness::config::{preset, Capability, Fault, Provider, TopologyConfig, PRESETS};
use cbdc_sim::harness::events::{Event, EventKind, EventLog, Outcome};
use cbdc_sim::harness::report;
use cbdc_sim::harness::script::{self, Scenario};
use cbdc_sim::harness::world::World;
use cbdc_sim::harness::{self};
use cbdc_sim::ids::{AccountId, ParticipantId};
use cbdc_sim::money::MoneySnapshot;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);
/// (step, wallet change, cash changes per holder)
type WalkStep = (&'static str, i64, &'static [(&'static str, i64)]);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn cfg(name: &str) -> TopologyConfig {
    preset(name).expect("preset exists")
}

fn journey(name: &str) -> Scenario {
    script::builtin(name).expect("builtin exists")
}

fn with(mut c: TopologyConfig, cap: Capability, p: Provider) -> TopologyConfig {
    c.topology.insert(cap, p);
    c.name = format!("{}+{}={}", c.name, cap, p);
    c
}

/// Total of a labelled account in the final snapshot, or a cash pool.
fn balance(world: &World, snap: &MoneySnapshot, label: &str) -> u64 {
    if let Some(holder) = label.strip_prefix("cash:") {
        return snap.cash.get(&ParticipantId::new(holder)).map_or(0, |a| a.pence());
    }
    let r = world.account_ref(label).expect("known label");
    std::iter::once(&snap.core)
        .chain(snap.banks.iter())
        .filter(|l| l.ledger == r.ledger)
        .flat_map(|l| l.accounts.iter())
        .find(|a| a.account_id == r.account)
        .map_or(0, |a| a.total.pence())
}

fn step_end<'a>(log: &'a EventLog, id: &str) -> &'a Outcome {
    log.events
        .iter()
        .find_map(|e| match &e.kind {
            EventKind::StepEnd { id: i, outcome, .. } if i == id => Some(outcome),
            _ => None,
        })
        .unwrap_or_else(|| panic!("step {id} missing"))
}

fn step_range(log: &EventLog, id: &str) -> Vec<Event> {
    let mut inside = false;
    let mut out = Vec::new();
    for e in &log.events {
        match &e.kind {
            EventKind::StepBegin { id: i, .. } if i == id => inside = true,
            EventKind::StepEnd { id: i, .. } if i == id => return out,
            _ if inside => out.push(e.clone()),
            _ => {}
        }
    }
    out
}

fn failed(r: &AuditReport) -> Vec<&str> {
    r.failed_checks()
}

/// Broad money and central bank money, summed straight from a snapshot.
fn aggregates(s: &MoneySnapshot) -> (i128, i128) {
    let total = |l: &cbdc_sim::ledger::LedgerSnapshot| l.accounts.iter().map(|a| i128::from(a.total.pence())).sum::<i128>();
    let core = total(&s.core);
    let banks: i128 = s.banks.iter().map(total).sum();
    let cash: i128 = s.cash.values().map(|a| i128::from(a.pence())).sum();
    (banks + core + cash, total(&s.reserves) + core)
}

fn criterion_1() -> Verdict {
    let roster = cfg("mixed").roster;
    let broad: i128 = roster.bank_accounts.iter().map(|a| i128::from(a.balance)).sum::<i128>()
        + roster.cash.iter().map(|c| i128::from(c.amount)).sum::<i128>();
    let central: i128 = roster.banks.iter().map(|b| i128::from(b.reserve)).sum();
    let mut runs = 0;
    for p in PRESETS {
        for j in ["laura", "bob"] {
            let log = harness::simulate(&cfg(p), &journey(j));
            let snap = log.snapshot().expect("snapshot");
            let got = aggregates(snap);
            ensure(got == (broad, central), || format!("{j}/{p}: aggregates {got:?}, minted {broad}/{central}"))?;
            let mut step = 0;
            for e in &log.events {
                match &e.kind {
                    EventKind::StepBegin { index, .. } => step = *index,
                    EventKind::CashMint { .. } => ensure(step == 0, || format!("{j}/{p}: cash minted in step {step}"))?,
                    EventKind::Entry { receipt } if receipt.opened.is_some() && !receipt.amount.is_zero() => {
                        ensure(step == 0, || format!("{j}/{p}: funded account opened in step {step}"))?
                    }
                    _ => {}
                }
            }
            let r = audit(&log);
            for c in ["conservation-per-ledger", "cross-form-conservation", "cycle-conservation"] {
                ensure(r.check(c).unwrap().passed, || format!("{j}/{p}: {c} failed"))?;
            }
            runs += 1;
        }
    }
    Ok(format!("{runs} runs, broad money {broad} and central bank money {central} unchanged"))
}

fn privacy_fails(r: &AuditReport) -> bool {
    !r.check("pii-isolation").unwrap().passed || !r.check("concealment").unwrap().passed
}

fn criterion_2() -> Verdict {
    let laura = journey("laura");
    let mut runs = 0;
    for c2 in Provider::ALL {
        for c3 in Provider::ALL {
            let c = with(with(cfg("mixed"), Capability::C2, c2), Capability::C3, c3);
            let r = harness::run(&c, &laura).report;
            let expect_fail = c2 == Provider::CentralBank || c3 == Provider::CentralBank;
            ensure(privacy_fails(&r) == expect_fail, || format!("C2={c2} C3={c3}: privacy fail = {}", privacy_fails(&r)))?;
            if c2 == Provider::CentralBank {
                let charged = &r.check("pii-isolation").unwrap().charged;
                ensure(charged.contains(&Capability::C2), || format!("C2={c2} C3={c3}: C2 not charged ({charged:?})"))?;
            }
            runs += 1;
        }
    }
    let bob = journey("bob");
    for c3 in Provider::ALL {
        let r = harness::run(&with(cfg("mixed"), Capability::C3, c3), &bob).report;
        ensure(privacy_fails(&r) == (c3 == Provider::CentralBank), || format!("bob C3={c3}: privacy mismatch"))?;
        runs += 1;
    }
    // Seeded tokens: each one planted in a central-bank-bound message must be found.
    let clean = harness::simulate(&cfg("mixed"), &laura);
    ensure(!privacy_fails(&audit(&clean)), || "clean mixed run fails privacy".into())?;
    let tokens = clean.header.pii_tokens.clone();
    for t in &tokens {
        for body in [
            serde_json::json!({ "note": t }),
            serde_json::json!({ "nested": { "list": ["x", format!("pre{t}post")] } }),
        ] {
            let planted = plant(&clean, body);
            let r = audit(&planted);
            ensure(!r.check("pii-isolation").unwrap().passed, || format!("token {t:?} missed"))?;
        }
    }
    Ok(format!("{runs} topologies classified; {} seeded tokens all detected", tokens.len()))
}

/// Inserts a message to the central bank before the final snapshot.
fn plant(log: &EventLog, body: serde_json::Value) -> EventLog {
    let mut out = EventLog::new(log.header.clone());
    let n = log.events.len();
    for (i, e) in log.events.iter().enumerate() {
        if i == n - 1 {
            out.push(
                e.tick,
                EventKind::Message {
                    msg_id: "99-planted-1".into(),
                    from: "pip1".into(),
                    to: log.header.central_bank.clone(),
                    capability: Some(Capability::C2),
                    channel: "rail".into(),
                    body: body.clone(),
                    copy: 1,
                },
            );
        }
        out.push(e.tick, e.kind.clone());
    }
    out
}

fn criterion_3() -> Verdict {
    let mut lines = Vec::new();
    let mut any_fail = false;
    for p in ["option1", "option2", "option3", "option4"] {
        let mut fails = Vec::new();
        for j in ["laura", "bob"] {
            let r = harness::run(&cfg(p), &journey(j)).report;
            let bad: Vec<String> = r.capabilities.iter().filter(|c| c.configurable && !c.suitable).map(|c| c.capability.to_string()).collect();
            if !r.passed {
                fails.push(format!("{j}:{}", bad.join("/")));
            }
        }
        ensure(!fails.is_empty(), || format!("{p} passes every audit for both journeys"))?;
        any_fail = true;
        lines.push(format!("{p} fails {}", fails.join(",")));
    }
    ensure(any_fail, || "no uniform topology fails".into())?;
    for j in script::BUILTINS {
        let r = harness::run(&cfg("mixed"), &journey(j)).report;
        ensure(r.passed, || format!("mixed/{j} fails {:?}", failed(&r)))?;
    }
    Ok(format!("{}; mixed passes all", lines.join("; ")))
}

fn criterion_4() -> Verdict {
    let laura = journey("laura");
    // Hand walk: bank 120000, fund 40000 into the wallet, order-1 locks 30000,
    // order-2 locks 10000 and expires, 10000 is defunded, order-3 draws 20000
    // from the bank account.
    let bank = 120_000 - 40_000 + 10_000 - 20_000;
    let shop = 30_000 + 20_000;
    let oracle = [("laura-dp", 0), ("laura-dp2", 0), ("laura-bank", bank), ("shop-bank", shop)];
    for p in ["option4", "mixed"] {
        let world = World::run(&cfg(p), &laura);
        let log = world.log();
        let snap = log.snapshot().unwrap();
        for (label, want) in oracle {
            let got = balance(&world, snap, label);
            ensure(got == want, || format!("{p}: {label} = {got}, oracle {want}"))?;
        }
        for id in ["defund-locked", "pay-store"] {
            match step_end(log, id) {
                Outcome::Rejected { reason } if reason.contains("insufficient") => {}
                o => return Err(format!("{p}: {id} should be refused while funds are locked, got {o}")),
            }
        }
        let expired: Vec<_> = step_range(log, "expiry-sweep")
            .into_iter()
            .filter_map(|e| match e.kind {
                EventKind::Entry { receipt } if receipt.op == "expire" => Some(receipt),
                _ => None,
            })
            .collect();
        ensure(expired.len() == 1, || format!("{p}: {} expiries", expired.len()))?;
        let leg = &expired[0].legs[0];
        ensure(expired[0].amount.pence() == 10_000 && leg.available == 10_000 && leg.locked == -10_000, || {
            format!("{p}: expiry returned {:?}", expired[0])
        })?;
    }
    Ok(format!("laura-bank {bank}, shop-bank {shop}, wallets 0; locked funds refused; expiry returned 10000"))
}

fn criterion_5() -> Verdict {
    let mut lines = Vec::new();
    for (p, j) in [("mixed", "laura"), ("mixed", "bob"), ("option4", "laura")] {
        let c = cfg(p);
        let s = journey(j);
        let clean = harness::simulate(&c, &s);
        let tick = clean
            .events
            .iter()
            .find_map(|e| match &e.kind {
                EventKind::Message { msg_id, from, body, .. }
                    if from.as_str() == "fmi" && msg_id.as_str().contains("-leg-") && body["leg"] == 1 =>
                {
                    Some(e.tick)
                }
                _ => None,
            })
            .ok_or("no multi-leg cycle")?;
        let plan = vec![
            Fault::DuplicateDelivery { msg_id: "*".into() },
            Fault::CrashRestart {
                participant: "fmi".into(),
                tick,
            },
        ];
        let out = harness::run(&c.clone().with_faults(plan), &s);
        let kinds: Vec<&str> = out.report.faults.iter().map(|f| f.fault.as_str()).collect();
        ensure(kinds.contains(&"crash") && kinds.contains(&"restart"), || format!("{j}/{p}: crash did not fire"))?;
        let dups = kinds.iter().filter(|k| **k == "duplicate-delivery").count();
        let rails = clean
            .events
            .iter()
            .filter(|e| matches!(&e.kind, EventKind::Message { channel, copy: 1, .. } if channel == "rail" || channel == "ledger"))
            .count();
        ensure(dups >= rails, || format!("{j}/{p}: {dups} duplicates for {rails} rail messages"))?;
        let a = serde_json::to_string(clean.snapshot().unwrap()).unwrap();
        let b = serde_json::to_string(out.log.snapshot().unwrap()).unwrap();
        ensure(a == b, || format!("{j}/{p}: final state differs under faults"))?;
        ensure(out.report.passed, || format!("{j}/{p}: faulted run fails {:?}", failed(&out.report)))?;
        lines.push(format!("{j}/{p} crash@{tick}, {dups} duplicates"));
    }
    Ok(format!("{}; final states byte-identical", lines.join("; ")))
}

fn criterion_6() -> Verdict {
    let s = journey("limits");
    let limit = 100_000u64;
    let first = 60_000u64;
    for p in ["mixed", "option4", "option2"] {
        let world = World::run(&cfg(p), &s);
        let log = world.log();
        ensure(first < limit && 40_001 < limit && first + 40_001 > limit, || "scenario shape".into())?;
        match step_end(log, "fund-over") {
            Outcome::Rejected { reason } if reason.contains("limit") => {}
            o => return Err(format!("{p}: over-limit funding {o}")),
        }
        let moved = step_range(log, "fund-over").iter().any(|e| matches!(e.kind, EventKind::Entry { .. }));
        ensure(!moved, || format!("{p}: rejected funding moved value"))?;
        ensure(matches!(step_end(log, "fund-exact"), Outcome::Ok { .. }), || format!("{p}: boundary funding refused"))?;
        let snap = log.snapshot().unwrap();
        let held = balance(&world, snap, "laura-dp") + balance(&world, snap, "laura-dp2");
        ensure(held == limit, || format!("{p}: holds {held}"))?;
    }
    Ok("60000 + 40001 refused at funding, 60000 + 40000 accepted at the 100000 limit".into())
}

fn registration() -> impl Strategy<Value = Registration> {
    (0usize..3, 0usize..4, 0usize..3, 0u64..5).prop_map(|(a, w, p, t)| Registration {
        alias: ["+447700900001", "@shop", "4123450000000001"][a].to_owned(),
        wallet: AccountId::new(format!("core:{:04}", w + 1)),
        pip: ParticipantId::new(["pip1", "pip2", "pip3"][p]),
        tick: t,
    })
}

fn directory(mode: &DirectoryMode) -> AliasDirectory {
    let mut d = AliasDirectory::new(mode.clone());
    for p in ["pip1", "pip2", "pip3"] {
        d.add_pip(p);
        d.set_card_prefix(p, "412345");
    }
    d
}

fn criterion_7() -> Verdict {
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let modes = [
        DirectoryMode::Central { host: "fmi".into() },
        DirectoryMode::Federated { sequencer: "tsp".into() },
    ];
    let cases = std::cell::Cell::new(0u32);
    let strategy = (proptest::collection::vec(proptest::collection::vec(registration(), 1..6), 1..6), any::<u64>());
    runner
        .run(&strategy, |(batches, seed)| {
            cases.set(cases.get() + 1);
            for mode in &modes {
                let mut a = directory(mode);
                let mut b = directory(mode);
                let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
                for batch in &batches {
                    let mut shuffled = batch.clone();
                    rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
                    a.register_batch(batch);
                    b.register_batch(&shuffled);
                    prop_assert!(a.active_counts().values().all(|n| *n <= 1));
                }
                let ra: Vec<_> = a.records().collect();
                let rb: Vec<_> = b.records().collect();
                prop_assert_eq!(ra, rb);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    // Federated conflict at harness level, across seeds.
    let fed = with(cfg("mixed"), Capability::C3, Provider::Tsp);
    let mut outcomes = BTreeMap::new();
    for seed in 1..=16u64 {
        let log = harness::simulate(&fed.clone().with_seed(seed), &journey("laura"));
        let out = step_end(&log, "reuse-alias").clone();
        let active: Vec<_> = log
            .events
            .iter()
            .filter_map(|e| match &e.kind {
                EventKind::AliasActive { alias, pip, .. } => Some((alias.clone(), pip.clone())),
                _ => None,
            })
            .collect();
        outcomes.insert(format!("{out}|{active:?}"), seed);
    }
    ensure(outcomes.len() == 1, || format!("{} different federation outcomes", outcomes.len()))?;
    Ok(format!("{} randomized interleavings, never two active records; same federated outcome over 16 seeds", cases.get()))
}

fn criterion_8() -> Verdict {
    let s = journey("bob");
    let walk: [WalkStep; 4] = [
        ("pop-deposit", 20_000, &[("bob", -20_000), ("pop", 20_000)]),
        ("pos-purchase", -3_000, &[]),
        ("atm-withdraw", -6_000, &[("bob", 6_000), ("atm-op", -6_000)]),
        ("pay-farmer", 0, &[("bob", -6_000), ("farmer", 6_000)]),
    ];
    for p in ["mixed", "option2"] {
        let world = World::run(&cfg(p), &s);
        let log = world.log();
        let wallet = world.account_ref("bob-dp").unwrap().account.clone();
        for (id, dw, dcash) in walk {
            ensure(matches!(step_end(log, id), Outcome::Ok { .. }), || format!("{p}: {id} failed"))?;
            let events = step_range(log, id);
            let (mut core, mut banks, mut reserves, mut w) = (0i64, 0i64, 0i64, 0i64);
            let mut cash: BTreeMap<String, i64> = BTreeMap::new();
            for e in &events {
                match &e.kind {
                    EventKind::Entry { receipt } => {
                        for l in &receipt.legs {
                            match receipt.ledger.as_str() {
                                "core" => core += l.total(),
                                "rsv" => reserves += l.total(),
                                _ => banks += l.total(),
                            }
                            if l.account == wallet {
                                w += l.total();
                            }
                        }
                    }
                    EventKind::CashMove { receipt } => {
                        *cash.entry(receipt.from.to_string()).or_default() -= receipt.amount.pence() as i64;
                        *cash.entry(receipt.to.to_string()).or_default() += receipt.amount.pence() as i64;
                    }
                    _ => {}
                }
            }
            ensure(core + banks == 0 && core + reserves == 0, || format!("{p}/{id}: core {core} banks {banks} reserves {reserves}"))?;
            ensure(w == dw, || format!("{p}/{id}: wallet moved {w}, walk says {dw}"))?;
            let want: BTreeMap<String, i64> = dcash.iter().map(|(k, v)| ((*k).to_owned(), *v)).collect();
            ensure(cash == want, || format!("{p}/{id}: cash {cash:?}, walk {want:?}"))?;
        }
        let release = step_range(log, "pos-purchase")
            .into_iter()
            .find_map(|e| match e.kind {
                EventKind::Entry { receipt } if receipt.op == "release" => Some(receipt.amount.pence()),
                _ => None,
            });
        ensure(release == Some(3_500 - 3_000), || format!("{p}: residual release {release:?}"))?;
        let refused = step_range(log, "atm-deposit");
        ensure(
            !refused.iter().any(|e| matches!(e.kind, EventKind::Entry { .. } | EventKind::CashMove { .. })),
            || format!("{p}: declined deposit moved value"),
        )?;
        let r = audit(log);
        for c in ["hold-discipline", "four-party-conservation", "scheme-layering"] {
            ensure(r.check(c).unwrap().passed, || format!("{p}: {c} failed"))?;
        }
    }
    Ok("deposit, purchase, withdrawal and cash payment zero-sum; 500 residual released".into())
}

fn criterion_9() -> Verdict {
    let mut n = 0;
    let faults = vec![
        Fault::DuplicateDelivery { msg_id: "*-rail-*".into() },
        Fault::CrashRestart {
            participant: "fmi".into(),
            tick: 705,
        },
    ];
    for p in PRESETS {
        for j in script::BUILTINS {
            for c in [cfg(p), cfg(p).with_faults(faults.clone()), cfg(p).with_seed(7)] {
                let a = harness::run(&c, &journey(j));
                let b = harness::run(&c, &journey(j));
                ensure(a.log.to_jsonl() == b.log.to_jsonl(), || format!("{j}/{p}: logs differ"))?;
                ensure(report::json(&a.report) == report::json(&b.report), || format!("{j}/{p}: json reports differ"))?;
                ensure(report::text(&a.report) == report::text(&b.report), || format!("{j}/{p}: text reports differ"))?;
                let stored = EventLog::parse(&a.log.to_jsonl()).map_err(|e| e.to_string())?;
                ensure(audit(&stored) == a.report, || format!("{j}/{p}: re-audit differs"))?;
                n += 1;
            }
        }
    }
    Ok(format!("{n} (config, scenario, seed) triples reproduced byte for byte"))
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 9] = [
        ("conservation", criterion_1),
        ("privacy partition", criterion_2),
        ("no single option", criterion_3),
        ("pay-on-delivery lock lifecycle", criterion_4),
        ("settlement finality and exactly-once", criterion_5),
        ("holding limits across PIPs", criterion_6),
        ("alias uniqueness", criterion_7),
        ("scheme conservation", criterion_8),
        ("determinism", criterion_9),
    ];
    let mut failures = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                println!("criterion {} {name}: FAIL ({why})", i + 1);
                failures.push(i + 1);
            }
        }
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
