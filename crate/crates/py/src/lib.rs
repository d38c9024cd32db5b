//! Python bindings: corpus generation, training, evaluation and the
//! divergence checks. Results come back as plain dicts and lists.

use std::path::PathBuf;

use ganpo::checkpoint::Checkpoint;
use ganpo::evalsuite::{eval_prompts, temperature_sweep, SweepConfig, DEFAULT_TEMPERATURES};
use ganpo::nanolm::NanoLm;
use ganpo::prefdata::{gen_corpus, read_records, write_records, CorpusConfig, Task};
use ganpo::trainer::{TrainConfig, TrainState};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList};
use serde::Serialize;
use serde_json::Value;

fn py_err(e: ganpo::Error) -> PyErr {
    match e {
        ganpo::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        ganpo::Error::Config(_) | ganpo::Error::Parse { .. } | ganpo::Error::Shape(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(xs) => {
            let list = PyList::empty(py);
            for x in xs {
                list.append(to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(m) => {
            let d = PyDict::new(py);
            for (k, x) in m {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn ser<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::to_value(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &value)
}

fn from_py(v: &Bound<'_, PyAny>) -> PyResult<Value> {
    if v.is_instance_of::<PyBool>() {
        return Ok(Value::Bool(v.extract::<bool>()?));
    }
    if let Ok(i) = v.extract::<i64>() {
        return Ok(Value::from(i));
    }
    if let Ok(x) = v.extract::<f64>() {
        return Ok(Value::from(x));
    }
    if let Ok(s) = v.extract::<String>() {
        return Ok(Value::String(s));
    }
    Err(PyValueError::new_err(format!("unsupported override value {v}")))
}

fn parse_task(task: &str) -> PyResult<Task> {
    task.parse().map_err(py_err)
}

/// Config from optional TOML text plus keyword overrides.
fn build_config(toml_text: Option<&str>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<TrainConfig> {
    let base = match toml_text {
        Some(t) => TrainConfig::from_toml_str(t).map_err(py_err)?,
        None => TrainConfig::default(),
    };
    let Some(over) = overrides else {
        base.validate().map_err(py_err)?;
        return Ok(base);
    };
    let mut v = serde_json::to_value(&base).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let obj = v.as_object_mut().expect("config serializes to an object");
    for (k, x) in over.iter() {
        obj.insert(k.extract::<String>()?, from_py(&x)?);
    }
    let cfg: TrainConfig = serde_json::from_value(v).map_err(|e| PyValueError::new_err(format!("invalid config: {e}")))?;
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

fn load_lm(path: &PathBuf, prefer_reference: bool) -> PyResult<NanoLm> {
    let ck = Checkpoint::load(path).map_err(py_err)?;
    if ck.kind == "train_state" {
        let st = TrainState::from_checkpoint(&ck).map_err(py_err)?;
        Ok(if prefer_reference { st.reference } else { st.policy })
    } else {
        NanoLm::from_checkpoint(&ck).map_err(py_err)
    }
}

/// Default training configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    TrainConfig::default().to_toml_string()
}

/// Oracle reward of a response under a task.
#[pyfunction]
fn oracle_reward(task: &str, response: &str) -> PyResult<f64> {
    Ok(ganpo::prefdata::oracle_reward(parse_task(task)?, response))
}

/// Sample a preference corpus into `path` from a freshly initialized seed
/// model; returns the corpus statistics.
#[pyfunction]
#[pyo3(signature = (path, task="sorted-run", n_records=200, seed=0, temperature=1.0, max_response_len=10, config=None, **overrides))]
#[allow(clippy::too_many_arguments)]
fn gen_data<'py>(
    py: Python<'py>,
    path: PathBuf,
    task: &str,
    n_records: usize,
    seed: u64,
    temperature: f64,
    max_response_len: usize,
    config: Option<&str>,
    overrides: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = build_config(config, overrides)?;
    let cc = CorpusConfig {
        task: parse_task(task)?,
        n_records,
        temperature,
        seed,
        max_response_len,
        ..CorpusConfig::default()
    };
    let stats = py
        .detach(|| {
            let lm = NanoLm::init(&cfg.lm_config())?;
            let (records, stats) = gen_corpus(&lm, &cc)?;
            write_records(&path, &records)?;
            Ok(stats)
        })
        .map_err(py_err)?;
    ser(py, &stats)
}

/// Train on a corpus; keyword arguments override configuration fields.
/// Returns the run summary.
#[pyfunction]
#[pyo3(signature = (data, out_dir, config=None, **overrides))]
fn train<'py>(
    py: Python<'py>,
    data: PathBuf,
    out_dir: PathBuf,
    config: Option<&str>,
    overrides: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = build_config(config, overrides)?;
    let summary = py
        .detach(|| {
            let records = read_records(&data)?;
            ganpo::trainer::run(&cfg, &records, &out_dir, None, &mut |_| {})
        })
        .map_err(py_err)?;
    ser(py, &summary)
}

/// Per-step metrics of a training log.
#[pyfunction]
fn read_metrics<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    ser(py, &ganpo::trainer::read_metrics(&path).map_err(py_err)?)
}

/// Reward-margin curve with start/end summaries.
#[pyfunction]
fn margin_curve<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    ser(py, &ganpo::evalsuite::margin_curve(&path).map_err(py_err)?)
}

/// Win rate of model A over model B across temperatures. Without
/// `model_b`, A must be a train state and B is its reference.
#[pyfunction]
#[pyo3(signature = (model_a, model_b=None, task="sorted-run", n_prompts=200, temperatures=None, seed=0, prompt_seed=99))]
#[allow(clippy::too_many_arguments)]
fn sweep<'py>(
    py: Python<'py>,
    model_a: PathBuf,
    model_b: Option<PathBuf>,
    task: &str,
    n_prompts: usize,
    temperatures: Option<Vec<f64>>,
    seed: u64,
    prompt_seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let task = parse_task(task)?;
    let a = load_lm(&model_a, false)?;
    let b = match &model_b {
        Some(p) => load_lm(p, false)?,
        None => load_lm(&model_a, true)?,
    };
    let cfg = SweepConfig {
        temperatures: temperatures.unwrap_or_else(|| DEFAULT_TEMPERATURES.to_vec()),
        ..SweepConfig::new(task, seed)
    };
    let prompts = eval_prompts(task, n_prompts, prompt_seed);
    let result = py.detach(|| temperature_sweep(&a, &b, &prompts, &cfg)).map_err(py_err)?;
    ser(py, &result)
}

/// Numerical checks of the divergence properties.
#[pyfunction]
#[pyo3(signature = (support=4, trials=50, seed=0))]
fn verify_divergence<'py>(py: Python<'py>, support: usize, trials: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let checks = py.detach(|| ganpo::divoracle::verify_properties(support, trials, seed)).map_err(py_err)?;
    ser(py, &checks)
}

/// Pearson correlation; `None` when an input is constant.
#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> Option<f64> {
    ganpo::evalsuite::pearson(&x, &y)
}

#[pymodule]
fn ganpo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_reward, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(read_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(margin_curve, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(verify_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    Ok(())
}
