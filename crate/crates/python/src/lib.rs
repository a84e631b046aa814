//! Python bindings: models, features, scoring back ends, metrics, the cost
//! profiler, the toy corpus and the embedding store.

use std::collections::HashMap;
use std::path::PathBuf;

use ::amcrn as core;
use core::dsp::{features as lms_features, AudioBuffer, FrameSpec, CMVN_WINDOW_S, SAMPLE_RATE};
use core::model::{load_checkpoint, save_checkpoint, Amcrn, AmcrnConfig};
use core::scoring::{compute_eer, compute_mindcf, csm as cosine, plda_score, plda_train, PldaModel, P_TARGET};
use core::store::{EmbeddingStore, StoreRecord};
use core::train::{make_toy_dataset, train, ToySpeakerSpec, TrainConfig};
use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;

fn err(e: core::Error) -> PyErr {
    match e {
        core::Error::Io(_) | core::Error::Wav(_) => PyIOError::new_err(e.to_string()),
        core::Error::UnknownId(_) => PyKeyError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn audio(samples: Vec<f32>, sample_rate: u32) -> PyResult<AudioBuffer> {
    AudioBuffer::new(samples, sample_rate).map_err(err)
}

fn config(tiny: bool, n_classes: usize) -> AmcrnConfig {
    if tiny {
        AmcrnConfig::tiny(n_classes)
    } else {
        AmcrnConfig {
            n_classes,
            ..AmcrnConfig::default()
        }
    }
}

/// Embedding network with its AAM-softmax training head.
#[pyclass(name = "Model", module = "amcrn")]
struct PyModel {
    inner: Amcrn,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (tiny = false, n_classes = 2, seed = 0))]
    fn new(tiny: bool, n_classes: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: Amcrn::new(config(tiny, n_classes), seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(err)
    }

    #[pyo3(signature = (include_head = false))]
    fn num_params(&self, include_head: bool) -> usize {
        self.inner.num_params(include_head)
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.inner.config().embedding_dim
    }

    /// Speaker embedding of a mono waveform.
    #[pyo3(signature = (samples, sample_rate = SAMPLE_RATE))]
    fn embed(&self, py: Python<'_>, samples: Vec<f32>, sample_rate: u32) -> PyResult<Vec<f32>> {
        let a = audio(samples, sample_rate)?;
        let e = py.detach(|| self.inner.embed_audio(&a)).map_err(err)?;
        Ok(e.values)
    }

    /// Trains on a synthetic corpus and replaces the weights with the
    /// best-validation snapshot. Returns `(train_loss, val_loss)` per epoch.
    #[pyo3(signature = (speakers = 4, utterances = 6, seconds = 2.0, epochs = 2, batch_size = 8, seed = 0))]
    fn train_toy(
        &mut self,
        py: Python<'_>,
        speakers: usize,
        utterances: usize,
        seconds: f64,
        epochs: usize,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<Vec<(f64, f64)>> {
        let spec = ToySpeakerSpec {
            n_speakers: speakers,
            utterances_per_speaker: utterances,
            utterance_seconds: seconds,
            seed,
        };
        let cfg = TrainConfig {
            epochs,
            batch_size,
            seed,
            ..TrainConfig::default()
        };
        let model = self.inner.clone();
        let out = py
            .detach(|| make_toy_dataset(&spec).and_then(|ds| train(model, &ds, &cfg)))
            .map_err(err)?;
        self.inner = out.best;
        Ok(out.history.iter().map(|r| (r.train_loss, r.val_loss)).collect())
    }
}

/// Two-covariance PLDA back end.
#[pyclass(name = "Plda", module = "amcrn")]
struct PyPlda {
    inner: PldaModel,
}

#[pymethods]
impl PyPlda {
    /// Fits on `(speaker, embedding)` pairs.
    #[staticmethod]
    fn train(labeled: Vec<(String, Vec<f64>)>) -> PyResult<Self> {
        Ok(Self {
            inner: plda_train(&labeled).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: PldaModel::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// Log-likelihood ratio of the same-speaker hypothesis.
    fn score(&self, a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
        plda_score(&self.inner, &a, &b).map_err(err)
    }
}

/// Enrolled speaker embeddings backed by a text file.
#[pyclass(name = "EmbeddingStore", module = "amcrn")]
struct PyStore {
    inner: EmbeddingStore,
    path: PathBuf,
}

#[pymethods]
impl PyStore {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: EmbeddingStore::load(&path).map_err(err)?,
            path,
        })
    }

    #[pyo3(signature = (speaker, values, n_utterances = 1, overwrite = false))]
    fn insert(&mut self, speaker: &str, values: Vec<f32>, n_utterances: usize, overwrite: bool) -> PyResult<()> {
        let rec = StoreRecord { n_utterances, values };
        self.inner.insert(speaker, rec, overwrite).map_err(err)
    }

    fn get(&self, speaker: &str) -> PyResult<Vec<f32>> {
        Ok(self.inner.get(speaker).map_err(err)?.values.clone())
    }

    fn speakers(&self) -> Vec<String> {
        self.inner.iter().map(|(id, _)| id.to_string()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn save(&self) -> PyResult<()> {
        self.inner.save(&self.path).map_err(err)
    }
}

/// Normalized log-mel features, one row per frame.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate = SAMPLE_RATE))]
fn features(samples: Vec<f32>, sample_rate: u32) -> PyResult<Vec<Vec<f64>>> {
    let f = lms_features(&audio(samples, sample_rate)?, &FrameSpec::default(), CMVN_WINDOW_S).map_err(err)?;
    Ok((0..f.n_frames()).map(|t| f.values.row(t).to_vec()).collect())
}

/// Cosine similarity of two embeddings.
#[pyfunction]
fn csm(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    cosine(&a, &b).map_err(err)
}

/// Equal error rate and its threshold from `(is_target, score)` pairs.
#[pyfunction]
fn eer(scores: Vec<(bool, f64)>) -> PyResult<(f64, f64)> {
    compute_eer(&scores).map_err(err)
}

/// Normalized minimum detection cost.
#[pyfunction]
#[pyo3(signature = (scores, p_target = P_TARGET, c_miss = 1.0, c_fa = 1.0))]
fn min_dcf(scores: Vec<(bool, f64)>, p_target: f64, c_miss: f64, c_fa: f64) -> PyResult<f64> {
    compute_mindcf(&scores, p_target, c_miss, c_fa).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (tiny = false, include_head = false, n_classes = 2))]
fn count_params(tiny: bool, include_head: bool, n_classes: usize) -> PyResult<u64> {
    core::profiler::count_params(&config(tiny, n_classes), include_head).map_err(err)
}

/// Multiply-accumulates of one embedding pass over `seconds` of audio.
#[pyfunction]
#[pyo3(signature = (seconds, tiny = false))]
fn count_macs(seconds: f64, tiny: bool) -> PyResult<u64> {
    core::profiler::count_macs(&config(tiny, 2), seconds).map_err(err)
}

/// Synthetic corpus as `{utterance_id: (speaker_index, samples)}`.
#[pyfunction]
#[pyo3(signature = (speakers, utterances, seconds, seed = 0))]
fn toy_dataset(
    speakers: usize,
    utterances: usize,
    seconds: f64,
    seed: u64,
) -> PyResult<HashMap<String, (usize, Vec<f32>)>> {
    let ds = make_toy_dataset(&ToySpeakerSpec {
        n_speakers: speakers,
        utterances_per_speaker: utterances,
        utterance_seconds: seconds,
        seed,
    })
    .map_err(err)?;
    Ok(ds
        .items
        .into_iter()
        .map(|i| (i.id, (i.speaker, i.audio.into_samples())))
        .collect())
}

#[pymodule]
fn amcrn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SAMPLE_RATE", SAMPLE_RATE)?;
    m.add("P_TARGET", P_TARGET)?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPlda>()?;
    m.add_class::<PyStore>()?;
    m.add_function(wrap_pyfunction!(features, m)?)?;
    m.add_function(wrap_pyfunction!(csm, m)?)?;
    m.add_function(wrap_pyfunction!(eer, m)?)?;
    m.add_function(wrap_pyfunction!(min_dcf, m)?)?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(count_macs, m)?)?;
    m.add_function(wrap_pyfunction!(toy_dataset, m)?)?;
    Ok(())
}
