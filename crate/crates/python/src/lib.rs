//! Python bindings: topology configs, scenarios, runs with audit reports,
//! and direct access to a single ledger.

use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;

use cbdc_sim::harness::config::{self, Capability, Provider, TopologyConfig};
use cbdc_sim::harness::script::{self, Scenario};
use cbdc_sim::harness::{self as sim, report, RunOutput};
use cbdc_sim::ids::{AccountId, LockId, MoneyForm, Tick};
use cbdc_sim::ledger::{self, Beneficiary, CommandKind, EventProof, LedgerCommand, Op, Origin};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Parses JSON text into a Python object.
fn to_py(py: Python<'_>, json: &str) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (json,))?.unbind())
}

fn capability(s: &str) -> PyResult<Capability> {
    Capability::parse(s).ok_or_else(|| value_err(format!("unknown capability {s:?}")))
}

fn provider(s: &str) -> PyResult<Provider> {
    Provider::parse(s).ok_or_else(|| value_err(format!("unknown provider {s:?}")))
}

#[pyclass(name = "Config", module = "cbdc_sim", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: TopologyConfig,
}

#[pymethods]
impl PyConfig {
    /// `option1`..`option4` or `mixed`.
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        config::preset(name)
            .map(|inner| PyConfig { inner })
            .ok_or_else(|| PyKeyError::new_err(format!("unknown preset {name:?}")))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        config::parse_config_str(text).map(|inner| PyConfig { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        config::load_config(path).map(|inner| PyConfig { inner }).map_err(value_err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn provider(&self, cap: &str) -> PyResult<&'static str> {
        Ok(self.inner.provider(capability(cap)?).as_str())
    }

    /// Capability to provider for all eight capabilities.
    fn topology(&self) -> Vec<(&'static str, &'static str)> {
        Capability::ALL.iter().map(|c| (c.as_str(), self.inner.provider(*c).as_str())).collect()
    }

    fn with_seed(&self, seed: u64) -> Self {
        PyConfig {
            inner: self.inner.clone().with_seed(seed),
        }
    }

    /// Copy with one configurable capability reassigned.
    fn with_provider(&self, cap: &str, prov: &str) -> PyResult<Self> {
        let cap = capability(cap)?;
        if !Capability::CONFIGURABLE.contains(&cap) {
            return Err(value_err(format!("{cap} has a fixed provider")));
        }
        let mut inner = self.inner.clone();
        inner.topology.insert(cap, provider(prov)?);
        Ok(PyConfig { inner })
    }

    /// Copy with a fault plan given as a JSON array.
    fn with_faults(&self, faults_json: &str) -> PyResult<Self> {
        let mut v: serde_json::Value = serde_json::from_str(&self.inner.to_json()).map_err(value_err)?;
        v["faults"] = serde_json::from_str(faults_json).map_err(value_err)?;
        config::parse_config(&v).map(|inner| PyConfig { inner }).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("Config({:?}, seed={})", self.inner.name, self.inner.seed)
    }
}

#[pyclass(name = "Scenario", module = "cbdc_sim", skip_from_py_object)]
struct PyScenario {
    inner: Scenario,
}

#[pymethods]
impl PyScenario {
    /// `laura`, `bob` or `limits`.
    #[staticmethod]
    fn builtin(name: &str) -> PyResult<Self> {
        script::builtin(name)
            .map(|inner| PyScenario { inner })
            .ok_or_else(|| PyKeyError::new_err(format!("unknown scenario {name:?}")))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(|inner| PyScenario { inner }).map_err(value_err)
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner).expect("scenario serializes")
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    fn step_ids(&self) -> Vec<String> {
        self.inner.steps.iter().map(|s| s.id.clone()).collect()
    }
}

#[pyclass(name = "Run", module = "cbdc_sim", skip_from_py_object)]
struct PyRun {
    inner: RunOutput,
}

#[pymethods]
impl PyRun {
    #[getter]
    fn passed(&self) -> bool {
        self.inner.report.passed
    }

    fn failed_checks(&self) -> Vec<String> {
        self.inner.report.failed_checks().into_iter().map(str::to_owned).collect()
    }

    /// Capabilities judged unsuitable under this topology.
    fn unsuitable(&self) -> Vec<String> {
        self.inner
            .report
            .capabilities
            .iter()
            .filter(|c| !c.suitable)
            .map(|c| c.capability.to_string())
            .collect()
    }

    fn events_jsonl(&self) -> String {
        self.inner.log.to_jsonl()
    }

    fn observations(&self) -> String {
        self.inner.log.observations()
    }

    fn report_text(&self) -> String {
        report::text(&self.inner.report)
    }

    fn report_json(&self) -> String {
        report::json(&self.inner.report)
    }

    fn report(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &report::json(&self.inner.report))
    }

    /// Final ledger and cash state.
    fn snapshot(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let snap = self.inner.log.snapshot().expect("completed run has a snapshot");
        to_py(py, &serde_json::to_string(snap).map_err(value_err)?)
    }

    /// Writes events, observations and both report forms into `dir`.
    fn write(&self, dir: &str) -> PyResult<()> {
        self.inner.write(std::path::Path::new(dir)).map_err(value_err)
    }
}

/// Runs a scenario under a topology and audits the log.
#[pyfunction]
#[pyo3(signature = (config, scenario, seed=None))]
fn run(config: &PyConfig, scenario: &PyScenario, seed: Option<u64>) -> PyRun {
    let cfg = match seed {
        Some(s) => config.inner.clone().with_seed(s),
        None => config.inner.clone(),
    };
    PyRun {
        inner: sim::run(&cfg, &scenario.inner),
    }
}

/// Re-audits a stored JSONL log; returns the report as a dict.
#[pyfunction]
fn audit(py: Python<'_>, log: &str, config: &PyConfig) -> PyResult<Py<PyAny>> {
    let r = sim::audit_stored(log, &config.inner).map_err(value_err)?;
    to_py(py, &report::json(&r))
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    config::PRESETS.to_vec()
}

#[pyfunction]
fn scenarios() -> Vec<&'static str> {
    script::BUILTINS.to_vec()
}

fn form(s: &str) -> PyResult<MoneyForm> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|_| value_err(format!("unknown money form {s:?}")))
}

/// A single double-entry ledger. The operator may do everything; other
/// callers need grants. Every command carries an idempotency key.
#[pyclass(name = "Ledger", module = "cbdc_sim", skip_from_py_object)]
struct PyLedger {
    inner: ledger::Ledger,
    operator: String,
}

impl PyLedger {
    fn apply(&mut self, py: Python<'_>, key: &str, kind: CommandKind) -> PyResult<Py<PyAny>> {
        let cmd = LedgerCommand::new(key, self.operator.as_str(), Origin::Harness, kind);
        let receipt = self.inner.apply(cmd).map_err(value_err)?;
        to_py(py, &serde_json::to_string(&receipt).map_err(value_err)?)
    }
}

#[pymethods]
impl PyLedger {
    #[new]
    #[pyo3(signature = (id, operator, participants=Vec::new()))]
    fn new(id: &str, operator: &str, participants: Vec<String>) -> Self {
        let mut inner = ledger::Ledger::new(id, operator);
        inner.register(operator);
        for p in participants {
            inner.register(p);
        }
        PyLedger {
            inner,
            operator: operator.to_owned(),
        }
    }

    fn register(&mut self, participant: &str) {
        self.inner.register(participant);
    }

    fn set_tick(&mut self, tick: Tick) {
        self.inner.set_tick(tick);
    }

    /// Opens an account; returns its id. Wallets must open empty.
    #[pyo3(signature = (key, owner, form_name, initial=0))]
    fn open(&mut self, key: &str, owner: &str, form_name: &str, initial: u64) -> PyResult<String> {
        let kind = CommandKind::Open {
            owner: owner.into(),
            form: form(form_name)?,
            initial: initial.into(),
        };
        let cmd = LedgerCommand::new(key, self.operator.as_str(), Origin::Setup, kind);
        let receipt = self.inner.apply(cmd).map_err(value_err)?;
        Ok(receipt.account.expect("open names its account").as_str().to_owned())
    }

    fn transfer(&mut self, py: Python<'_>, key: &str, src: &str, dst: &str, amount: u64) -> PyResult<Py<PyAny>> {
        let kind = CommandKind::Transfer {
            from: AccountId::new(src),
            to: AccountId::new(dst),
            amount: amount.into(),
        };
        self.apply(py, key, kind)
    }

    /// Locks funds for a local beneficiary; the receipt names the lock.
    #[allow(clippy::too_many_arguments)]
    fn lock(
        &mut self,
        py: Python<'_>,
        key: &str,
        account: &str,
        amount: u64,
        beneficiary: &str,
        condition: &str,
        expiry: Tick,
    ) -> PyResult<Py<PyAny>> {
        let kind = CommandKind::Lock {
            account: AccountId::new(account),
            amount: amount.into(),
            beneficiary: Beneficiary::Local(AccountId::new(beneficiary)),
            condition_tag: condition.to_owned(),
            expiry,
        };
        self.apply(py, key, kind)
    }

    fn drawdown(&mut self, py: Python<'_>, key: &str, lock: &str, amount: u64, proof: &str) -> PyResult<Py<PyAny>> {
        let kind = CommandKind::Drawdown {
            lock: LockId::new(lock),
            amount: amount.into(),
            proof: EventProof::new(proof),
            bridge: None,
        };
        self.apply(py, key, kind)
    }

    fn release(&mut self, py: Python<'_>, key: &str, lock: &str) -> PyResult<Py<PyAny>> {
        self.apply(py, key, CommandKind::Release { lock: LockId::new(lock) })
    }

    /// Releases every lock past its expiry; returns the receipts.
    fn expire_due(&mut self, py: Python<'_>) -> PyResult<Vec<Py<PyAny>>> {
        let due = self.inner.expired_locks();
        due.into_iter()
            .map(|l| {
                let key = format!("expire/{}", l.as_str());
                self.apply(py, &key, CommandKind::Expire { lock: l })
            })
            .collect()
    }

    /// (available, locked) in pence.
    fn balance(&self, account: &str) -> PyResult<(u64, u64)> {
        let id = AccountId::new(account);
        let available = self.inner.available(&id).map_err(value_err)?;
        let locked = self.inner.locked(&id).map_err(value_err)?;
        Ok((available.pence(), locked.pence()))
    }

    fn total(&self) -> u128 {
        self.inner.sum_of_balances()
    }

    fn grant(&mut self, participant: &str, ops: Vec<String>) -> PyResult<()> {
        let ops = ops
            .iter()
            .map(|o| serde_json::from_value::<Op>(serde_json::Value::String(o.clone())).map_err(|_| value_err(format!("unknown op {o:?}"))))
            .collect::<PyResult<Vec<_>>>()?;
        self.inner.grant(participant, &ops, ledger::GrantScope::AllAccounts);
        Ok(())
    }

    fn snapshot(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &serde_json::to_string(&self.inner.snapshot()).map_err(value_err)?)
    }
}

#[pymodule]
#[pyo3(name = "cbdc_sim")]
fn cbdc_sim_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PyRun>()?;
    m.add_class::<PyLedger>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(audit, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(scenarios, m)?)?;
    Ok(())
}
