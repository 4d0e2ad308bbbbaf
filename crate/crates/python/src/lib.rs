//! Python bindings for `motionstyle_core`.

use candle_core::{Device, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyValueError};
use pyo3::prelude::*;

use motionstyle_core::diffusion::{self, DiffusionSchedule};
use motionstyle_core::error::Error;
use motionstyle_core::eval::{self, FeatureLabel, FeatureSet};
use motionstyle_core::{checkpoint, motion_io, skeleton};

create_exception!(motionstyle, MotionStyleError, PyException);

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Shape(_) | Error::InvalidLength(_) | Error::Index(_) => PyValueError::new_err(e.to_string()),
        other => MotionStyleError::new_err(other.to_string()),
    }
}

fn tensor_err(e: candle_core::Error) -> PyErr {
    err(Error::from(e))
}

#[pyclass(name = "Skeleton", module = "motionstyle", from_py_object)]
#[derive(Clone)]
struct PySkeleton(skeleton::Skeleton);

#[pymethods]
impl PySkeleton {
    #[new]
    #[pyo3(signature = (names, parents, offsets, parts=None))]
    fn new(names: Vec<String>, parents: Vec<Option<usize>>, offsets: Vec<[f64; 3]>, parts: Option<Vec<String>>) -> PyResult<Self> {
        let mut s = skeleton::Skeleton::new(names, parents, offsets).map_err(err)?;
        if let Some(parts) = parts {
            let parsed = parts
                .iter()
                .map(|p| serde_json::from_value(serde_json::Value::String(p.clone())).map_err(|_| PyValueError::new_err(format!("unknown body part `{p}`"))))
                .collect::<PyResult<Vec<skeleton::BodyPart>>>()?;
            s = s.with_part_map(parsed).map_err(err)?;
        }
        Ok(Self(s))
    }

    /// The built-in 24-joint SMPL skeleton with its part map.
    #[staticmethod]
    fn smpl() -> Self {
        Self(skeleton::Skeleton::smpl())
    }

    #[getter]
    fn num_joints(&self) -> usize {
        self.0.num_joints()
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.0.joint_names().to_vec()
    }

    #[getter]
    fn parents(&self) -> Vec<Option<usize>> {
        self.0.parents().to_vec()
    }

    #[getter]
    fn offsets(&self) -> Vec<[f64; 3]> {
        self.0.offsets().to_vec()
    }

    #[getter]
    fn parts(&self) -> Option<Vec<String>> {
        self.0.part_map().map(|p| p.iter().map(|b| b.label().to_string()).collect())
    }

    fn normalized_adjacency(&self, self_loops: bool) -> PyResult<Vec<Vec<f64>>> {
        normalized_adjacency(self.0.parents().to_vec(), self_loops)
    }

    fn __repr__(&self) -> String {
        format!("Skeleton({} joints, root `{}`)", self.0.num_joints(), self.0.joint_names()[0])
    }
}

#[pyclass(name = "MotionClip", module = "motionstyle", from_py_object)]
#[derive(Clone)]
struct PyMotionClip(skeleton::MotionClip);

#[pymethods]
impl PyMotionClip {
    /// `rotations` is `[frame][joint][6]`, `translation` is `[frame][3]`.
    #[new]
    #[pyo3(signature = (rotations, translation, fps=30.0))]
    fn new(rotations: Vec<Vec<[f64; 6]>>, translation: Vec<[f64; 3]>, fps: f64) -> PyResult<Self> {
        let joints = rotations.first().map_or(0, Vec::len);
        if rotations.iter().any(|f| f.len() != joints) {
            return Err(PyValueError::new_err("every frame needs the same joint count"));
        }
        let rot = rotations.into_iter().flatten().map(skeleton::Rotation6D).collect();
        Ok(Self(skeleton::MotionClip::new(joints, rot, translation, fps).map_err(err)?))
    }

    #[getter]
    fn frames(&self) -> usize {
        self.0.frames()
    }

    #[getter]
    fn num_joints(&self) -> usize {
        self.0.num_joints()
    }

    #[getter]
    fn fps(&self) -> f64 {
        self.0.fps()
    }

    #[getter]
    fn rotations(&self) -> Vec<Vec<[f64; 6]>> {
        self.0.rotations().chunks(self.0.num_joints()).map(|f| f.iter().map(|r| r.0).collect()).collect()
    }

    #[getter]
    fn translation(&self) -> Vec<[f64; 3]> {
        self.0.translation().to_vec()
    }

    /// Linear resampling to `frames` frames.
    fn resample(&self, frames: usize) -> PyResult<Self> {
        Ok(Self(motion_io::resample(&self.0, frames).map_err(err)?))
    }

    fn __repr__(&self) -> String {
        format!("MotionClip({} frames, {} joints, {} fps)", self.0.frames(), self.0.num_joints(), self.0.fps())
    }
}

#[pyfunction]
fn rot6d_to_matrix(r: [f64; 6]) -> PyResult<[[f64; 3]; 3]> {
    let m = skeleton::rot6d_to_matrix(&skeleton::Rotation6D(r)).map_err(err)?;
    Ok(std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)])))
}

#[pyfunction]
fn matrix_to_rot6d(m: [[f64; 3]; 3]) -> PyResult<[f64; 6]> {
    let m = nalgebra::Matrix3::from_fn(|i, j| m[i][j]);
    Ok(skeleton::matrix_to_rot6d(&m).map_err(err)?.0)
}

#[pyfunction]
#[pyo3(signature = (parents, self_loops=true))]
fn normalized_adjacency(parents: Vec<Option<usize>>, self_loops: bool) -> PyResult<Vec<Vec<f64>>> {
    let a = skeleton::build_normalized_adjacency(&parents, self_loops).map_err(err)?;
    Ok((0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect())
}

/// Global joint positions `[frame][joint][3]`.
#[pyfunction]
fn forward_kinematics(skeleton: &PySkeleton, clip: &PyMotionClip) -> PyResult<Vec<Vec<[f64; 3]>>> {
    let track = skeleton::forward_kinematics(&skeleton.0, &clip.0).map_err(err)?;
    Ok((0..clip.0.frames()).map(|t| (0..clip.0.num_joints()).map(|j| track.get(t, j)).collect()).collect())
}

#[pyfunction]
fn read_bvh(path: std::path::PathBuf) -> PyResult<(PySkeleton, PyMotionClip)> {
    let (s, c) = motion_io::read_bvh_file(path).map_err(err)?;
    Ok((PySkeleton(s), PyMotionClip(c)))
}

#[pyfunction]
fn parse_bvh(text: &str) -> PyResult<(PySkeleton, PyMotionClip)> {
    let (s, c) = motion_io::parse_bvh(text).map_err(err)?;
    Ok((PySkeleton(s), PyMotionClip(c)))
}

#[pyfunction]
fn write_bvh(skeleton: &PySkeleton, clip: &PyMotionClip) -> PyResult<String> {
    motion_io::write_bvh(&skeleton.0, &clip.0).map_err(err)
}

/// Fréchet distance between two feature sets given as lists of rows.
#[pyfunction]
fn fmd(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let a = FeatureSet::from_rows(&a, FeatureLabel::Style).map_err(err)?;
    let b = FeatureSet::from_rows(&b, FeatureLabel::Style).map_err(err)?;
    eval::fmd(&a, &b).map_err(err)
}

/// `(glo_d, loc_d)` of generated samples against their source motion.
#[pyfunction]
#[pyo3(signature = (samples, source, window=eval::DEFAULT_WINDOW))]
fn diversity(samples: Vec<PyMotionClip>, source: &PyMotionClip, window: usize) -> PyResult<(f64, f64)> {
    let samples: Vec<_> = samples.into_iter().map(|c| c.0).collect();
    let d = eval::diversity(&samples, &source.0, window).map_err(err)?;
    Ok((d.glo_d, d.loc_d))
}

#[pyclass(name = "Schedule", module = "motionstyle", skip_from_py_object)]
struct PySchedule(DiffusionSchedule);

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps, beta_start=1e-4, beta_end=0.02))]
    fn new(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        Ok(Self(diffusion::build_schedule(steps, beta_start, beta_end).map_err(err)?))
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps()
    }

    #[getter]
    fn betas(&self) -> Vec<f64> {
        self.0.betas().to_vec()
    }

    #[getter]
    fn alpha_bar(&self) -> Vec<f64> {
        self.0.alpha_bar().to_vec()
    }

    /// Noise a flat signal `x0` to step `s` with the given `noise`.
    fn q_sample(&self, x0: Vec<f64>, s: usize, noise: Vec<f64>) -> PyResult<Vec<f64>> {
        if x0.len() != noise.len() {
            return Err(PyValueError::new_err("x0 and noise lengths differ"));
        }
        let n = x0.len();
        let x0 = Tensor::from_vec(x0, n, &Device::Cpu).map_err(tensor_err)?;
        let noise = Tensor::from_vec(noise, n, &Device::Cpu).map_err(tensor_err)?;
        let x = diffusion::q_sample(&self.0, &x0, s, &noise).map_err(err)?;
        x.to_vec1::<f64>().map_err(tensor_err)
    }
}

/// A trained stylization model loaded from a TSD checkpoint.
#[pyclass(name = "TsdModel", module = "motionstyle", skip_from_py_object)]
struct PyTsdModel {
    model: diffusion::TsdModel,
    source_frames: usize,
}

#[pymethods]
impl PyTsdModel {
    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        let (model, manifest) = checkpoint::load_tsd(path).map_err(err)?;
        Ok(Self { model, source_frames: manifest.source_frames })
    }

    #[getter]
    fn skeleton(&self) -> PySkeleton {
        PySkeleton(self.model.skeleton().clone())
    }

    #[getter]
    fn source_frames(&self) -> usize {
        self.source_frames
    }

    /// Sample a stylized clip. The style comes from a canonical prompt clip or an
    /// external embedding vector; exactly one must be given.
    #[pyo3(signature = (prompt=None, embedding=None, alpha=1.0, seed=0, length=None))]
    fn sample(
        &self,
        py: Python<'_>,
        prompt: Option<PyMotionClip>,
        embedding: Option<Vec<f64>>,
        alpha: f64,
        seed: u64,
        length: Option<usize>,
    ) -> PyResult<PyMotionClip> {
        let style = match (prompt, embedding) {
            (Some(p), None) => self.model.prompt_style(&p.0),
            (None, Some(v)) => self.model.stage1().external_style(&v),
            _ => return Err(PyValueError::new_err("give exactly one of `prompt` or `embedding`")),
        }
        .map_err(err)?;
        let length = length.unwrap_or(self.source_frames);
        let clip = py.detach(|| self.model.sample(length, &style, alpha, seed)).map_err(err)?;
        Ok(PyMotionClip(clip))
    }
}

#[pymodule]
fn motionstyle(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MotionStyleError", m.py().get_type::<MotionStyleError>())?;
    m.add_class::<PySkeleton>()?;
    m.add_class::<PyMotionClip>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyTsdModel>()?;
    m.add_function(wrap_pyfunction!(rot6d_to_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(matrix_to_rot6d, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_adjacency, m)?)?;
    m.add_function(wrap_pyfunction!(forward_kinematics, m)?)?;
    m.add_function(wrap_pyfunction!(read_bvh, m)?)?;
    m.add_function(wrap_pyfunction!(parse_bvh, m)?)?;
    m.add_function(wrap_pyfunction!(write_bvh, m)?)?;
    m.add_function(wrap_pyfunction!(fmd, m)?)?;
    m.add_function(wrap_pyfunction!(diversity, m)?)?;
    Ok(())
}
