"""Smoke test for the cbdc_sim extension module.

Build and install first:
    maturin build -m crates/python/Cargo.toml --release -o target/wheels
    pip install target/wheels/cbdc_sim-*.whl
"""

import json
import tempfile
from pathlib import Path

import cbdc_sim


def check_presets():
    assert cbdc_sim.presets() == ["option1", "option2", "option3", "option4", "mixed"]
    assert set(cbdc_sim.scenarios()) == {"laura", "bob", "limits"}
    cfg = cbdc_sim.Config.preset("option4")
    topo = dict(cfg.topology())
    assert topo["C5"] == "fmi" and topo["C4"] == "fmi" and topo["C1"] == "pip"
    again = cbdc_sim.Config.from_json(cfg.to_json())
    assert again.to_json() == cfg.to_json()
    try:
        cfg.with_provider("C1", "tsp")
    except ValueError:
        pass
    else:
        raise AssertionError("C1 must stay fixed")
    bad = json.loads(cfg.to_json())
    del bad["seed"]
    try:
        cbdc_sim.Config.from_json(json.dumps(bad))
    except ValueError as e:
        assert "seed" in str(e)
    else:
        raise AssertionError("missing seed accepted")


def check_matrix():
    laura = cbdc_sim.Scenario.builtin("laura")
    bob = cbdc_sim.Scenario.builtin("bob")
    for name in ["option1", "option2", "option3", "option4"]:
        cfg = cbdc_sim.Config.preset(name)
        runs = [cbdc_sim.run(cfg, s) for s in (laura, bob)]
        assert not all(r.passed for r in runs), name
    mixed = cbdc_sim.Config.preset("mixed")
    for s in (laura, bob, cbdc_sim.Scenario.builtin("limits")):
        r = cbdc_sim.run(mixed, s)
        assert r.passed, (s.name, r.failed_checks())

    cb = mixed.with_provider("C2", "central-bank")
    r = cbdc_sim.run(cb, laura)
    assert "pii-isolation" in r.failed_checks()
    assert "C2" in r.unsuitable()


def check_determinism_and_reaudit():
    cfg = cbdc_sim.Config.preset("mixed").with_seed(7)
    bob = cbdc_sim.Scenario.builtin("bob")
    a, b = cbdc_sim.run(cfg, bob), cbdc_sim.run(cfg, bob)
    assert a.events_jsonl() == b.events_jsonl()
    assert a.report_json() == b.report_json()
    stored = cbdc_sim.audit(a.events_jsonl(), cfg)
    assert stored == a.report()
    snap = a.snapshot()
    total = sum(acct["total"] for acct in snap["core"]["accounts"])
    assert total > 0
    with tempfile.TemporaryDirectory() as d:
        a.write(d)
        assert sorted(p.name for p in Path(d).iterdir()) == [
            "events.jsonl",
            "observations.log",
            "report.json",
            "report.txt",
        ]


def check_faults():
    cfg = cbdc_sim.Config.preset("mixed")
    laura = cbdc_sim.Scenario.builtin("laura")
    clean = cbdc_sim.run(cfg, laura)
    faulty = cfg.with_faults(json.dumps([{"kind": "duplicate-delivery", "msg_id": "*"}]))
    r = cbdc_sim.run(faulty, laura)
    assert r.passed
    assert r.snapshot() == clean.snapshot()
    assert len(r.report()["faults"]) > 0


def check_ledger():
    led = cbdc_sim.Ledger("bank", "bank", ["alice", "bob"])
    a = led.open("o1", "alice", "commercial-bank-money", 10000)
    b = led.open("o2", "bob", "commercial-bank-money")
    r1 = led.transfer("t1", a, b, 4000)
    assert led.transfer("t1", a, b, 4000) == r1
    assert led.balance(a) == (6000, 0)
    lock = led.lock("l1", a, 3000, b, "delivered", 10)["lock"]
    assert led.balance(a) == (3000, 3000)
    try:
        led.transfer("t2", a, b, 4000)
    except ValueError:
        pass
    else:
        raise AssertionError("locked funds were spent")
    led.drawdown("d1", lock, 1000, "delivered")
    led.release("r1", lock)
    assert led.balance(a) == (5000, 0)
    assert led.balance(b) == (5000, 0)
    assert led.total() == 10000


def main():
    check_presets()
    check_matrix()
    check_determinism_and_reaudit()
    check_faults()
    check_ledger()
    print("python smoke test: ok")


if __name__ == "__main__":
    main()
