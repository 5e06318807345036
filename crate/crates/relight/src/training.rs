//! Batch sampling over (source, target) scene pairs, the Adam training
//! loop, checkpointing and reproducibility.
//!
//! Every random draw in a step comes from an RNG derived from (seed, step),
//! so a run interrupted at any checkpoint and resumed produces bit-identical
//! results to an uninterrupted one.

use crate::backbone::{BoundParams, Grads, ParamSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::imaging::{composite, inpaint_fast_marching, PortraitImage, SegMask};
use crate::losses::{pair_losses, LossFlags, LossValues, LossWeights, PairSample};
use crate::model::{Model, ModelConfig};
use crate::synthdata::{Dataset, ROTATIONS};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

pub const DEFAULT_INPAINT_RADIUS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub model: ModelConfig,
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides the epoch-derived step count when set.
    pub steps: Option<u64>,
    /// Seed for pair sampling and the feature-cycle noise.
    pub seed: u64,
    pub weights: LossWeights,
    pub feat: bool,
    pub cons: bool,
    /// Periodic checkpoint interval in steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            model: ModelConfig::default(),
            lr: 1.5e-5,
            batch_size: 2,
            epochs: 5,
            steps: None,
            seed: 0,
            weights: LossWeights::default(),
            feat: true,
            cons: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }

    pub fn total_steps(&self, records: usize) -> u64 {
        match self.steps {
            Some(s) => s,
            None => (self.epochs as u64) * (records as u64).div_ceil(self.batch_size as u64),
        }
    }

    /// Stable 64-bit FNV-1a hash of the JSON form, for run provenance.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

// --- Adam ---------------------------------------------------------------

pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet<f32>, lr: f32) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            v: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// One update over all parameters that received gradients.
    pub fn step(&mut self, params: &mut ParamSet<f32>, bp: &BoundParams, grads: &Grads<f32>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, var) in bp.iter().enumerate() {
            let Some(g) = grads.get(var) else { continue };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = params.get_mut(crate::backbone::ParamId::from_index(idx));
            let (md, vd, pd, gd) = (m.data_mut(), v.data_mut(), p.data_mut(), g.data());
            for i in 0..gd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// --- scene cache and pair sampling ---------------------------------------

/// All scenes of one split loaded into memory, indexed by (subject, env,
/// rotation).
pub struct SceneCache {
    pub dataset: Dataset,
    images: Vec<PortraitImage>,
    masks: Vec<SegMask>,
    index: HashMap<(u32, u32, u8), usize>,
}

impl SceneCache {
    pub fn load(dataset: Dataset) -> Result<SceneCache> {
        let mut images = Vec::with_capacity(dataset.manifest.records.len());
        let mut masks = Vec::with_capacity(dataset.manifest.records.len());
        let mut index = HashMap::new();
        for (i, rec) in dataset.manifest.records.iter().enumerate() {
            let (img, mask) = dataset.load_scene(rec)?;
            if mask.foreground_count() == 0 {
                return Err(Error::config(format!(
                    "scene {} has an empty mask",
                    rec.image
                )));
            }
            images.push(img);
            masks.push(mask);
            index.insert((rec.subject_id, rec.env_id, rec.rotation), i);
        }
        Ok(SceneCache {
            dataset,
            images,
            masks,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn scene(&self, idx: usize) -> (&PortraitImage, &SegMask) {
        (&self.images[idx], &self.masks[idx])
    }

    pub fn record(&self, idx: usize) -> &crate::synthdata::SceneRecord {
        &self.dataset.manifest.records[idx]
    }

    pub fn find(&self, subject: u32, env: u32, rotation_steps: i32) -> Result<usize> {
        let rot = rotation_steps.rem_euclid(ROTATIONS as i32) as u8;
        self.index.get(&(subject, env, rot)).copied().ok_or_else(|| {
            Error::MissingRecord(format!("scene ({subject}, {env}, {rot}) not cached"))
        })
    }
}

/// Uniformly sample a (source x, target y) pair and resolve every ground
/// truth via the full cross product: the relit references live at
/// (subject_x, env_y, rot_y + offset).
pub fn sample_pair(cache: &SceneCache, rng: &mut ChaCha8Rng) -> Result<(PairSample, [usize; 2])> {
    let xi = rng.random_range(0..cache.len());
    let yi = rng.random_range(0..cache.len());
    let rx = cache.record(xi).clone();
    let ry = cache.record(yi).clone();

    let gt0 = cache.find(rx.subject_id, ry.env_id, ry.rotation as i32)?;
    let gtp = cache.find(rx.subject_id, ry.env_id, ry.rotation as i32 + 3)?;
    let gtm = cache.find(rx.subject_id, ry.env_id, ry.rotation as i32 - 3)?;
    let ryp = cache.find(ry.subject_id, ry.env_id, ry.rotation as i32 + 3)?;
    let rym = cache.find(ry.subject_id, ry.env_id, ry.rotation as i32 - 3)?;

    let sample = PairSample::new(
        cache.scene(xi),
        cache.scene(yi),
        cache.scene(gt0).0,
        cache.scene(gtp).0,
        cache.scene(gtm).0,
        cache.scene(ryp),
        cache.scene(rym),
    )?;
    Ok((sample, [xi, yi]))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Per-step RNG: a function of (seed, step) only, so resumed runs replay the
/// identical stream.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(step)))
}

// --- trainer ---------------------------------------------------------------

pub struct Trainer {
    pub cfg: TrainingConfig,
    pub model: Model,
    pub adam: Adam,
    pub step: u64,
}

/// Per-step loss row for the CSV log.
#[derive(Clone, Copy, Debug)]
pub struct LossRow {
    pub step: u64,
    pub values: LossValues,
}

pub fn csv_header() -> &'static str {
    "step,recon,relight,auglight,feat,cons,total"
}

impl LossRow {
    pub fn to_csv(&self) -> String {
        let v = &self.values;
        format!(
            "{},{},{},{},{},{},{}",
            self.step, v.recon, v.relight, v.auglight, v.feat, v.cons, v.total
        )
    }
}

#[derive(Debug)]
pub struct TrainSummary {
    pub steps_run: u64,
    pub first: Option<LossValues>,
    pub last: Option<LossValues>,
    pub rows: Vec<LossRow>,
}

impl Trainer {
    pub fn new(cfg: TrainingConfig) -> Result<Trainer> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone())?;
        let adam = Adam::new(&model.params, cfg.lr);
        Ok(Trainer {
            cfg,
            model,
            adam,
            step: 0,
        })
    }

    /// Run `steps` optimization steps over the cached dataset, appending one
    /// CSV row per step. A non-finite loss aborts with a diagnostic naming
    /// the offending batch.
    pub fn run(&mut self, cache: &SceneCache, steps: u64) -> Result<TrainSummary> {
        if self.model.cfg.resolution != cache.dataset.manifest.resolution {
            return Err(Error::config(format!(
                "model resolution {} vs dataset resolution {}",
                self.model.cfg.resolution, cache.dataset.manifest.resolution
            )));
        }
        let flags = LossFlags::for_model(&self.model, self.cfg.feat, self.cfg.cons);
        let mut rows = Vec::with_capacity(steps as usize);
        let mut first = None;
        let mut last = None;
        for _ in 0..steps {
            self.step += 1;
            let mut rng = step_rng(self.cfg.seed, self.step);

            let mut tape = Tape::new();
            let bp = self.model.params.bind(&mut tape);
            let mut batch_total = None;
            let mut batch_values = LossValues::default();
            let mut batch_records: Vec<[usize; 2]> = Vec::with_capacity(self.cfg.batch_size);
            for _ in 0..self.cfg.batch_size {
                let (sample, recs) = sample_pair(cache, &mut rng)?;
                batch_records.push(recs);
                let terms = pair_losses(
                    &self.model,
                    &mut tape,
                    &bp,
                    &sample,
                    &self.cfg.weights,
                    &flags,
                    &mut rng,
                );
                batch_values.add(&LossValues::from_terms(&tape, &terms));
                batch_total = Some(match batch_total {
                    None => terms.total,
                    Some(acc) => tape.add(acc, terms.total),
                });
            }
            let inv = 1.0 / self.cfg.batch_size as f32;
            batch_values.scale(inv);
            let loss = tape.scale(batch_total.expect("batch not empty"), inv);

            if !batch_values.all_finite() {
                let detail: Vec<String> = batch_records
                    .iter()
                    .map(|[x, y]| {
                        format!(
                            "(x={}, y={})",
                            cache.record(*x).image,
                            cache.record(*y).image
                        )
                    })
                    .collect();
                return Err(Error::numeric(format!(
                    "non-finite loss at step {}: {:?}; batch {}",
                    self.step,
                    batch_values,
                    detail.join(" ")
                )));
            }

            let grads = tape.backward(loss);
            self.adam.step(&mut self.model.params, &bp, &grads);

            let row = LossRow {
                step: self.step,
                values: batch_values,
            };
            if first.is_none() {
                first = Some(batch_values);
            }
            last = Some(batch_values);
            rows.push(row);
        }
        Ok(TrainSummary {
            steps_run: steps,
            first,
            last,
            rows,
        })
    }

    // --- checkpoint format ---------------------------------------------------
    //
    //   magic "RLITCKPT", u32 version,
    //   u64 json length + TrainingConfig JSON (UTF-8),
    //   u64 step, u64 adam_t,
    //   three named-array sections (params, adam m, adam v):
    //     u64 count, then per array: u64 name length, name bytes,
    //     u8 dtype tag (0 = f32), u8 ndim, u64 dims..., f32 LE data.

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"RLITCKPT");
        buf.extend_from_slice(&1u32.to_le_bytes());
        let json = serde_json::to_string(&self.cfg)?;
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(json.as_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.adam.t.to_le_bytes());

        let write_section = |buf: &mut Vec<u8>, entries: Vec<(&str, &Tensor<f32>)>| {
            buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
            for (name, t) in entries {
                buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
                buf.extend_from_slice(name.as_bytes());
                buf.push(0u8); // dtype f32
                buf.push(t.shape().len() as u8);
                for &d in t.shape() {
                    buf.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        write_section(&mut buf, self.model.params.iter().collect());
        let names: Vec<&str> = self.model.params.iter().map(|(n, _)| n).collect();
        write_section(
            &mut buf,
            names.iter().copied().zip(self.adam.m.iter()).collect(),
        );
        write_section(
            &mut buf,
            names.iter().copied().zip(self.adam.v.iter()).collect(),
        );

        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Trainer> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { b: &bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != b"RLITCKPT" {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let json_len = r.u64()? as usize;
        let json = std::str::from_utf8(r.take(json_len)?)
            .map_err(|e| Error::Checkpoint(format!("config not UTF-8: {e}")))?;
        let cfg: TrainingConfig =
            serde_json::from_str(json).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let step = r.u64()?;
        let adam_t = r.u64()?;

        let mut trainer = Trainer::new(cfg)?;
        trainer.step = step;
        trainer.adam.t = adam_t;

        let read_section = |r: &mut Reader| -> Result<Vec<(String, Tensor<f32>)>> {
            let count = r.u64()? as usize;
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let name_len = r.u64()? as usize;
                let name = std::str::from_utf8(r.take(name_len)?)
                    .map_err(|e| Error::Checkpoint(format!("name not UTF-8: {e}")))?
                    .to_string();
                let dtype = r.u8()?;
                if dtype != 0 {
                    return Err(Error::Checkpoint(format!("unknown dtype tag {dtype}")));
                }
                let ndim = r.u8()? as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(r.u64()? as usize);
                }
                let n: usize = shape.iter().product();
                let raw = r.take(4 * n)?;
                let data: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                out.push((name, Tensor::from_vec(&shape, data).unwrap()));
            }
            Ok(out)
        };

        let apply = |params: &mut ParamSet<f32>, entries: Vec<(String, Tensor<f32>)>| -> Result<Vec<Tensor<f32>>> {
            if entries.len() != params.len() {
                return Err(Error::Checkpoint(format!(
                    "section has {} arrays, model wants {}",
                    entries.len(),
                    params.len()
                )));
            }
            let mut ordered = Vec::with_capacity(entries.len());
            for (name, tensor) in entries {
                let id = params.id_of(&name).ok_or_else(|| {
                    Error::Checkpoint(format!("checkpoint parameter '{name}' not in model"))
                })?;
                if params.get(id).shape() != tensor.shape() {
                    return Err(Error::Checkpoint(format!(
                        "parameter '{name}' shape {:?} vs model {:?}",
                        tensor.shape(),
                        params.get(id).shape()
                    )));
                }
                ordered.push((id, tensor));
            }
            ordered.sort_by_key(|(id, _)| id.index());
            Ok(ordered
                .into_iter()
                .map(|(id, tensor)| {
                    *params.get_mut(id) = tensor.clone();
                    tensor
                })
                .collect())
        };

        let params = read_section(&mut r)?;
        if params.len() != trainer.model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model wants {}",
                params.len(),
                trainer.model.params.len()
            )));
        }
        apply(&mut trainer.model.params, params)?;
        let m = read_section(&mut r)?;
        trainer.adam.m = apply(&mut trainer.model.params.clone(), m)?;
        let v = read_section(&mut r)?;
        trainer.adam.v = apply(&mut trainer.model.params.clone(), v)?;
        Ok(trainer)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        let s = self.take(4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }
    fn u64(&mut self) -> Result<u64> {
        let s = self.take(8)?;
        Ok(u64::from_le_bytes(s.try_into().unwrap()))
    }
}

/// Write the loss log: `step,recon,relight,auglight,feat,cons,total`.
pub fn write_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut out = String::with_capacity(rows.len() * 64);
    out.push_str(csv_header());
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Full inference path: encode source subject and target lighting, render
/// (optionally at an interpolated rotation angle), and composite the relit
/// foreground over the inpainted target background.
pub fn relight_once(
    model: &Model,
    source: &PortraitImage,
    source_mask: &SegMask,
    target: &PortraitImage,
    target_mask: &SegMask,
    angle: Option<f64>,
    composite_output: bool,
) -> Result<PortraitImage> {
    let raw = model.relight(source, source_mask, target, target_mask, angle)?;
    if !composite_output {
        return Ok(raw);
    }
    let bg = inpaint_fast_marching(target, &target_mask.binarized(), DEFAULT_INPAINT_RADIUS)?;
    composite(&raw, &source_mask.binarized(), &bg, false)
}
