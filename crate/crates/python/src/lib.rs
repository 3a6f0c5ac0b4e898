//! Python module exposing the pieces that are useful from notebooks: the
//! distillation losses, the learning-rate schedule, the analytic cost model,
//! synthetic clip generation and a forward pass over any preset.

use pyo3::exceptions::{PyIndexError, PyValueError};
use pyo3::prelude::*;

use vflnet_core::data::synth::{generate_in_memory, MotionClass, SyntheticSpec};
use vflnet_core::distill::{self, DistillConfig};
use vflnet_core::eval::read_pgm as read_pgm_file;
use vflnet_core::network::{build_model, expected_param_count, flop_count, ModelConfig};
use vflnet_core::optim::ScheduleSpec;
use vflnet_core::params::ParamStore;
use vflnet_core::tensor::Tape;
use vflnet_core::{Tensor, TensorError};

fn val_err(e: TensorError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn preset(name: &str) -> PyResult<ModelConfig> {
    match name {
        "teacher" => Ok(ModelConfig::teacher()),
        "student" => Ok(ModelConfig::student()),
        "desk-teacher" => Ok(ModelConfig::desk_teacher()),
        "desk-student" => Ok(ModelConfig::desk_student()),
        other => Err(PyValueError::new_err(format!(
            "unknown preset {other:?}; expected teacher, student, desk-teacher or desk-student"
        ))),
    }
}

/// Softmax of `logits / tau`.
#[pyfunction]
fn soften(logits: Vec<f64>, tau: f64) -> PyResult<Vec<f64>> {
    distill::soften(&logits, tau).map_err(val_err)
}

/// KL(p || q) over two distributions.
#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    distill::kl_divergence(&p, &q).map_err(val_err)
}

/// tau^2-scaled KL between softened teacher and student logits.
#[pyfunction]
fn kd_loss(teacher: Vec<f64>, student: Vec<f64>, tau: f64) -> PyResult<f64> {
    let cfg = DistillConfig::new(0.5, tau).map_err(val_err)?;
    distill::kd_loss_value(&teacher, &student, &cfg).map_err(val_err)
}

/// Cross-entropy of softmaxed logits against an integer label.
#[pyfunction]
fn ce_loss(logits: Vec<f64>, label: usize) -> PyResult<f64> {
    distill::ce_loss_value(&logits, label).map_err(val_err)
}

/// Returns (kd, ce, total) where total = alpha * kd + (1 - alpha) * ce.
#[pyfunction]
fn total_loss(
    teacher: Vec<f64>,
    student: Vec<f64>,
    label: usize,
    alpha: f64,
    tau: f64,
) -> PyResult<(f64, f64, f64)> {
    let cfg = DistillConfig::new(alpha, tau).map_err(val_err)?;
    let b = distill::total_loss_value(&teacher, &student, label, &cfg).map_err(val_err)?;
    Ok((b.kd, b.ce, b.total))
}

/// Learning rate at `step`: linear warmup, cosine decay, batch-scaled.
#[pyfunction]
#[pyo3(signature = (step, batch_size, warmup_steps, total_steps, base_lr=0.1, warmup_lr=1e-3, min_lr=0.0))]
fn lr_at(
    step: u64,
    batch_size: usize,
    warmup_steps: u64,
    total_steps: u64,
    base_lr: f64,
    warmup_lr: f64,
    min_lr: f64,
) -> PyResult<f64> {
    let spec = ScheduleSpec {
        base_lr,
        warmup_lr,
        min_lr,
        batch_size,
        warmup_steps,
        total_steps,
    };
    spec.validate().map_err(val_err)?;
    Ok(spec.lr_at(step))
}

/// The model preset names accepted everywhere in this module.
#[pyfunction]
fn presets() -> Vec<&'static str> {
    vec!["teacher", "student", "desk-teacher", "desk-student"]
}

/// Exact trainable parameter count of a preset.
#[pyfunction]
fn param_count(name: &str) -> PyResult<u64> {
    Ok(expected_param_count(&preset(name)?))
}

/// Analytic MAC/FLOP cost of one forward pass at (t, h, w).
#[pyfunction]
#[pyo3(signature = (name, t=8, h=224, w=224))]
fn cost(name: &str, t: usize, h: usize, w: usize) -> PyResult<(u64, u64)> {
    let report = flop_count(&preset(name)?, t, h, w).map_err(val_err)?;
    Ok((report.macs, report.flops()))
}

/// One synthetic motion clip: (flat rgb data, (t, h, w, c) shape, label).
#[pyfunction]
#[pyo3(signature = (class_name, seed=7, t=8, canvas=32))]
fn generate_clip(
    class_name: &str,
    seed: u64,
    t: usize,
    canvas: usize,
) -> PyResult<(Vec<f32>, (usize, usize, usize, usize), usize)> {
    let class = MotionClass::parse(class_name)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let spec = SyntheticSpec {
        classes: vec![class],
        samples_per_class: 1,
        canvas,
        t_raw: t,
        seed,
        ..SyntheticSpec::default()
    };
    let samples = generate_in_memory(&spec).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let clip = &samples[0].sample;
    let s = clip.frames.shape();
    Ok((clip.frames.data().to_vec(), (s[0], s[1], s[2], s[3]), clip.label))
}

/// Class names the synthetic corpus knows, in label order.
#[pyfunction]
fn motion_classes() -> Vec<&'static str> {
    MotionClass::MOTION.iter().map(|c| c.name()).collect()
}

/// Reads a binary PGM written by the heatmap exporter: (width, height, bytes).
#[pyfunction]
fn read_pgm(path: &str) -> PyResult<(usize, usize, Vec<u8>)> {
    read_pgm_file(std::path::Path::new(path))
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// A built model with seeded weights; forward runs without gradients.
#[pyclass]
struct Model {
    model: vflnet_core::network::Model,
    store: ParamStore<f32>,
    classes: usize,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (preset_name, seed=0))]
    fn new(preset_name: &str, seed: u64) -> PyResult<Self> {
        let cfg = preset(preset_name)?;
        let classes = cfg.num_classes;
        let (model, store) = build_model::<f32>(&cfg, seed).map_err(val_err)?;
        Ok(Model { model, store, classes })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn param_count(&self) -> u64 {
        self.store.count()
    }

    /// Logits for one clip given as flat data plus its (t, h, w, c) shape.
    fn forward(
        &self,
        data: Vec<f32>,
        shape: (usize, usize, usize, usize),
    ) -> PyResult<Vec<f32>> {
        let (t, h, w, c) = shape;
        if data.len() != t * h * w * c {
            return Err(PyIndexError::new_err(format!(
                "data has {} values but shape {shape:?} needs {}",
                data.len(),
                t * h * w * c
            )));
        }
        let x = Tensor::new(vec![t, h, w, c], data).map_err(val_err)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let logits = self
            .model
            .forward(&mut tape, &self.store, xv, None)
            .map_err(val_err)?;
        Ok(tape.value(logits).data().to_vec())
    }
}

#[pymodule]
fn vflnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(soften, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(kd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(cost, m)?)?;
    m.add_function(wrap_pyfunction!(generate_clip, m)?)?;
    m.add_function(wrap_pyfunction!(motion_classes, m)?)?;
    m.add_function(wrap_pyfunction!(read_pgm, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
