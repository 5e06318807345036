//! Python bindings: dataset generation, training, relighting inference,
//! rotation sweeps and image metrics, wrapped thinly over the `relight`
//! crate.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use relight::error::Error;
use relight::evaluation;
use relight::imaging;
use relight::losses::LossWeights;
use relight::model::ModelConfig;
use relight::renderer::RenderMode;
use relight::synthdata::{generate_dataset, open_split, DatasetConfig};
use relight::training::{relight_once, SceneCache, Trainer, TrainingConfig};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

fn to_py(e: Error) -> PyErr {
    match &e {
        Error::Io(_) | Error::Image(_) | Error::Json(_) => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Shape(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn load_pair(img: &str, mask: &str) -> PyResult<(imaging::PortraitImage, imaging::SegMask)> {
    let image = imaging::read_image(Path::new(img)).map_err(to_py)?;
    let mask = imaging::read_mask(Path::new(mask)).map_err(to_py)?.binarized();
    Ok((image, mask))
}

/// Generate the synthetic dataset (train and test splits) under `out`.
#[pyfunction]
#[pyo3(signature = (out, subjects=8, envs=6, test_subjects=2, test_envs=2, res=64, seed=0, env_width=96))]
#[allow(clippy::too_many_arguments)]
fn gen_dataset(
    out: String,
    subjects: usize,
    envs: usize,
    test_subjects: usize,
    test_envs: usize,
    res: usize,
    seed: u64,
    env_width: usize,
) -> PyResult<HashMap<String, usize>> {
    let cfg = DatasetConfig {
        root: PathBuf::from(out),
        seed,
        resolution: res,
        train_subjects: subjects,
        train_envs: envs,
        test_subjects,
        test_envs,
        env_width,
        sample_grid: 16,
        explicit_seeds: None,
    };
    let bundle = generate_dataset(&cfg).map_err(to_py)?;
    let mut out = HashMap::new();
    out.insert("train_scenes".to_string(), bundle.train.manifest.records.len());
    out.insert(
        "test_scenes".to_string(),
        bundle.test.map(|t| t.manifest.records.len()).unwrap_or(0),
    );
    Ok(out)
}

/// Train a model on a generated dataset and write a checkpoint plus a loss
/// CSV (`<out>.losses.csv`). Returns the first and last loss rows.
#[pyfunction]
#[pyo3(signature = (data, out, steps, lr=1e-3, batch=2, cs=32, trunk_hidden=64, seed=0, mode="MNR", ot3=true, bg=true, feat=true, cons=true))]
#[allow(clippy::too_many_arguments)]
fn train(
    data: String,
    out: String,
    steps: u64,
    lr: f32,
    batch: usize,
    cs: usize,
    trunk_hidden: usize,
    seed: u64,
    mode: &str,
    ot3: bool,
    bg: bool,
    feat: bool,
    cons: bool,
) -> PyResult<HashMap<String, f64>> {
    let render_mode = match mode.to_ascii_lowercase().as_str() {
        "mnr" => RenderMode::Mnr,
        "concat" => RenderMode::Concat,
        "mul" => RenderMode::Mul,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown render mode '{other}'"
            )))
        }
    };
    let dataset = open_split(Path::new(&data), "train").map_err(to_py)?;
    let cache = SceneCache::load(dataset).map_err(to_py)?;
    let cfg = TrainingConfig {
        model: ModelConfig {
            resolution: cache.dataset.manifest.resolution,
            subject_channels: cs,
            render_mode,
            ot3: ot3 && render_mode == RenderMode::Mnr,
            bg_split: bg,
            trunk_hidden,
            seed,
        },
        lr,
        batch_size: batch,
        epochs: 0,
        steps: Some(steps),
        seed,
        weights: LossWeights::default(),
        feat,
        cons,
        checkpoint_every: 0,
    };
    let mut trainer = Trainer::new(cfg).map_err(to_py)?;
    let summary = trainer.run(&cache, steps).map_err(to_py)?;
    trainer.save(Path::new(&out)).map_err(to_py)?;
    relight::training::write_csv(Path::new(&format!("{out}.losses.csv")), &summary.rows)
        .map_err(to_py)?;
    let mut result = HashMap::new();
    if let (Some(first), Some(last)) = (summary.first, summary.last) {
        result.insert("first_total".to_string(), first.total as f64);
        result.insert("last_total".to_string(), last.total as f64);
        result.insert("first_relight".to_string(), first.relight as f64);
        result.insert("last_relight".to_string(), last.relight as f64);
    }
    result.insert("steps".to_string(), summary.steps_run as f64);
    Ok(result)
}

/// A trained relighting model loaded from a checkpoint.
#[pyclass]
struct Model {
    trainer: Trainer,
}

#[pymethods]
impl Model {
    /// Load a checkpoint written by `train`.
    #[staticmethod]
    fn load(path: String) -> PyResult<Model> {
        Ok(Model {
            trainer: Trainer::load(Path::new(&path)).map_err(to_py)?,
        })
    }

    /// Total number of scalar parameters.
    #[getter]
    fn param_count(&self) -> usize {
        self.trainer.model.params.num_scalars()
    }

    /// Training configuration as a JSON string.
    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json_string(&self.trainer.cfg)
    }

    /// Relight `source` under the illumination of `target`, optionally at an
    /// interpolated rotation angle, and write the result to `out`.
    #[pyo3(signature = (source, source_mask, target, target_mask, out, angle=None, composite=true))]
    #[allow(clippy::too_many_arguments)]
    fn relight(
        &self,
        source: String,
        source_mask: String,
        target: String,
        target_mask: String,
        out: String,
        angle: Option<f64>,
        composite: bool,
    ) -> PyResult<()> {
        let (src, src_m) = load_pair(&source, &source_mask)?;
        let (tgt, tgt_m) = load_pair(&target, &target_mask)?;
        let img = relight_once(&self.trainer.model, &src, &src_m, &tgt, &tgt_m, angle, composite)
            .map_err(to_py)?;
        imaging::write_image(Path::new(&out), &img).map_err(to_py)?;
        Ok(())
    }

    /// Render a full rotation sweep (frames at -180, -180+step, ..) into
    /// `out_dir`; returns the written file names in angle order.
    #[pyo3(signature = (source, source_mask, target, target_mask, out_dir, step=30.0, composite=true))]
    #[allow(clippy::too_many_arguments)]
    fn rotate_sweep(
        &self,
        source: String,
        source_mask: String,
        target: String,
        target_mask: String,
        out_dir: String,
        step: f64,
        composite: bool,
    ) -> PyResult<Vec<String>> {
        if !(1.0..=180.0).contains(&step) {
            return Err(PyValueError::new_err("step must be in [1, 180] degrees"));
        }
        let (src, src_m) = load_pair(&source, &source_mask)?;
        let (tgt, tgt_m) = load_pair(&target, &target_mask)?;
        std::fs::create_dir_all(&out_dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let mut names = Vec::new();
        let mut angle = -180.0f64;
        while angle < 180.0 - 1e-9 {
            let frame = relight_once(
                &self.trainer.model,
                &src,
                &src_m,
                &tgt,
                &tgt_m,
                Some(angle),
                composite,
            )
            .map_err(to_py)?;
            let name = format!("angle_{}.png", format!("{angle}").replace('-', "m").replace('.', "_"));
            imaging::write_image(&Path::new(&out_dir).join(&name), &frame).map_err(to_py)?;
            names.push(name);
            angle += step;
        }
        Ok(names)
    }

    /// Single-image evaluation protocol over a test split directory;
    /// returns model and identity-baseline metrics.
    #[pyo3(signature = (data, seed=0))]
    fn eval_single(&self, data: String, seed: u64) -> PyResult<HashMap<String, f64>> {
        let dataset = open_split(Path::new(&data), "test").map_err(to_py)?;
        let cache = SceneCache::load(dataset).map_err(to_py)?;
        let report = evaluation::eval_single(&self.trainer.model, &cache, seed).map_err(to_py)?;
        let mut out = HashMap::new();
        out.insert("rmse".to_string(), report.model.rmse);
        out.insert("psnr".to_string(), report.model.psnr);
        out.insert("ssim".to_string(), report.model.ssim);
        out.insert("identity_rmse".to_string(), report.identity.rmse);
        out.insert("identity_psnr".to_string(), report.identity.psnr);
        out.insert("identity_ssim".to_string(), report.identity.ssim);
        Ok(out)
    }
}

fn serde_json_string<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// RMSE / PSNR / SSIM of two images over a mask, all given as file paths.
#[pyfunction]
fn image_metrics(a: String, b: String, mask: String) -> PyResult<HashMap<String, f64>> {
    let ia = imaging::read_image(Path::new(&a)).map_err(to_py)?;
    let ib = imaging::read_image(Path::new(&b)).map_err(to_py)?;
    let m = imaging::read_mask(Path::new(&mask)).map_err(to_py)?.binarized();
    let (r, p, s) = evaluation::metrics(&ia, &ib, &m).map_err(to_py)?;
    let mut out = HashMap::new();
    out.insert("rmse".to_string(), r);
    out.insert("psnr".to_string(), p);
    out.insert("ssim".to_string(), s);
    Ok(out)
}

/// Telea fast-marching inpainting of the masked region of an image.
#[pyfunction]
#[pyo3(signature = (image, hole_mask, out, radius=5))]
fn inpaint(image: String, hole_mask: String, out: String, radius: usize) -> PyResult<()> {
    let img = imaging::read_image(Path::new(&image)).map_err(to_py)?;
    let hole = imaging::read_mask(Path::new(&hole_mask)).map_err(to_py)?.binarized();
    let filled = imaging::inpaint_fast_marching(&img, &hole, radius).map_err(to_py)?;
    imaging::write_image(Path::new(&out), &filled).map_err(to_py)?;
    Ok(())
}

#[pymodule]
fn relight_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(gen_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(image_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(inpaint, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
