use std::fmt::Display;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vectormorph::codec::{self, EncodeMode};
use vectormorph::gauntlet;
use vectormorph::generator::{self, GenerationMode, GenerationRequest, Obfuscation, DEFAULT_BODY};
use vectormorph::learner::{self, LearnerConfig, LikelihoodMode};
use vectormorph::locator;
use vectormorph::profile::{self, AttackVectorProfile, ProfileError, Provenance};
use vectormorph::tokenizer::{self, RawCorpus};

fn value_err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn profile_err(e: ProfileError) -> PyErr {
    match e {
        ProfileError::Io { .. } => PyIOError::new_err(e.to_string()),
        ProfileError::Format(_) => value_err(e),
    }
}

/// Canonical form of `s` as `(output, passes, layers)`.
#[pyfunction]
#[pyo3(signature = (s, max_passes = codec::DEFAULT_MAX_PASSES))]
fn decode(s: &str, max_passes: usize) -> PyResult<(String, usize, Vec<String>)> {
    let t = codec::decode_fixpoint(s.as_bytes(), max_passes).map_err(value_err)?;
    Ok((
        t.output,
        t.passes,
        t.layers.iter().map(ToString::to_string).collect(),
    ))
}

#[pyfunction]
fn encode(s: &str, mode: &str) -> PyResult<String> {
    let mode: EncodeMode = mode.parse().map_err(value_err)?;
    Ok(codec::encode(s, mode))
}

/// Tokens as `(kind, name, raw, start, end)` tuples.
#[pyfunction]
fn tokenize(s: &str) -> Vec<(String, String, String, usize, usize)> {
    tokenizer::tokenize(s)
        .tokens
        .into_iter()
        .map(|t| {
            (
                t.symbol.kind().as_str().to_string(),
                t.symbol.name().to_string(),
                t.raw,
                t.span.start,
                t.span.end,
            )
        })
        .collect()
}

/// Best injection candidate of `url` as a dict.
#[pyfunction]
fn locate<'py>(py: Python<'py>, url: &str) -> PyResult<Bound<'py, PyDict>> {
    let found = locator::locate_attack(url).map_err(value_err)?;
    let c = found.candidate;
    let d = PyDict::new(py);
    d.set_item("param_name", c.param_name)?;
    d.set_item("raw", c.raw)?;
    d.set_item("decoded", c.decoded)?;
    d.set_item("score", c.score)?;
    d.set_item("candidates", found.all_candidates.len())?;
    Ok(d)
}

#[pyclass(name = "Profile", frozen)]
struct PyProfile {
    inner: AttackVectorProfile,
}

#[pymethods]
impl PyProfile {
    /// Learn a profile from decoded attack strings.
    #[staticmethod]
    #[pyo3(signature = (attacks, alpha = 0.5, beta = 0.5, structure_lambda = 1.0, mode = "viterbi"))]
    fn learn(
        attacks: Vec<String>,
        alpha: f64,
        beta: f64,
        structure_lambda: f64,
        mode: &str,
    ) -> PyResult<Self> {
        let likelihood_mode: LikelihoodMode = mode.parse().map_err(value_err)?;
        let config = LearnerConfig {
            dirichlet_alpha: alpha,
            dirichlet_beta: beta,
            structure_lambda,
            likelihood_mode,
            ..LearnerConfig::default()
        };
        let mut corpus = RawCorpus::new();
        let mut seqs = Vec::new();
        for a in &attacks {
            let seq = tokenizer::tokenize(a);
            if seq.is_empty() {
                continue;
            }
            corpus.absorb(&seq);
            seqs.push(seq.symbols());
        }
        let model = learner::learn(&seqs, &config).map_err(value_err)?;
        Ok(PyProfile {
            inner: AttackVectorProfile {
                model,
                corpus,
                config,
                provenance: Provenance {
                    sequence_count: seqs.len() as u64,
                    ingest_unix_seconds: 0,
                },
            },
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyProfile {
            inner: profile::load(&path).map_err(profile_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        profile::save(&self.inner, &path).map_err(profile_err)
    }

    #[getter]
    fn num_states(&self) -> usize {
        self.inner.model.num_states()
    }

    #[getter]
    fn alphabet(&self) -> Vec<String> {
        self.inner
            .alphabet()
            .iter()
            .map(ToString::to_string)
            .collect()
    }

    /// Log-likelihood of an attack string; `-inf` when the model cannot
    /// produce it.
    fn log_likelihood(&self, attack: &str) -> PyResult<f64> {
        let symbols = tokenizer::tokenize(attack).symbols();
        self.inner
            .model
            .sequence_log_likelihood(&symbols)
            .map_err(value_err)
    }

    #[pyo3(signature = (seed, count = 10, body = DEFAULT_BODY, mode = "path", obfuscation = "none", rng_seed = 0))]
    fn generate(
        &self,
        seed: &str,
        count: usize,
        body: &str,
        mode: &str,
        obfuscation: &str,
        rng_seed: u64,
    ) -> PyResult<Vec<String>> {
        let mut req = GenerationRequest::new(seed);
        req.count = count;
        req.body = body.to_string();
        req.mode = mode.parse::<GenerationMode>().map_err(value_err)?;
        req.obfuscation = obfuscation.parse::<Obfuscation>().map_err(value_err)?;
        req.rng_seed = rng_seed;
        let out = generator::generate(&self.inner, &req).map_err(value_err)?;
        Ok(out.into_iter().map(|a| a.text).collect())
    }
}

/// Run payloads through a sink suite (the built-in one by default).
#[pyfunction]
#[pyo3(signature = (payloads, body = DEFAULT_BODY, sinks = None))]
fn evaluate<'py>(
    py: Python<'py>,
    payloads: Vec<String>,
    body: &str,
    sinks: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let suite = match sinks {
        Some(path) => gauntlet::load_suite(&path).map_err(value_err)?,
        None => gauntlet::default_suite(),
    };
    let r = gauntlet::evaluate(&payloads, &suite, body).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("tp", r.tp)?;
    d.set_item("fp", r.fp)?;
    d.set_item("reported_successful", r.reported_successful)?;
    d.set_item("fp_rate", r.fp_rate)?;
    d.set_item("found_vulnerabilities", r.found_vulnerabilities)?;
    d.set_item("total_vulnerabilities", r.total_vulnerabilities)?;
    d.set_item("recall", r.recall)?;
    let per_sink: Vec<(String, usize, usize)> = r
        .sinks
        .into_iter()
        .map(|s| (s.id, s.reported, s.executed))
        .collect();
    d.set_item("sinks", per_sink)?;
    Ok(d)
}

#[pymodule(name = "vectormorph")]
fn vectormorph_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DEFAULT_BODY", DEFAULT_BODY)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(locate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<PyProfile>()?;
    Ok(())
}
