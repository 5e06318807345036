//! Procedural stand-in for a rendered relighting dataset: subjects times
//! environments times 12 lighting rotations in 30-degree steps, with masks
//! and a manifest. The background strip of every image is a deterministic
//! function of the same environment map that lights the subject, so the
//! background carries usable illumination evidence.

pub mod envmap;
pub mod manifest;
pub mod subject;

pub use envmap::EnvMap;
pub use manifest::{
    rotation_steps, save_manifest, Dataset, DatasetManifest, SceneRecord, DEGREES_PER_STEP,
    GENERATOR_VERSION, ROTATIONS,
};
pub use subject::{diffuse_irradiance, shade_subject, SamplePattern, SubjectSpec};

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub seed: u64,
    pub resolution: usize,
    pub train_subjects: usize,
    pub train_envs: usize,
    pub test_subjects: usize,
    pub test_envs: usize,
    /// Equirectangular env map width (height is half).
    pub env_width: usize,
    /// Irradiance sample grid side; samples = grid^2.
    pub sample_grid: usize,
    /// Explicit per-split seeds; derived from `seed` when absent.
    pub explicit_seeds: Option<ExplicitSeeds>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExplicitSeeds {
    pub train_subjects: Vec<u64>,
    pub train_envs: Vec<u64>,
    pub test_subjects: Vec<u64>,
    pub test_envs: Vec<u64>,
}

impl DatasetConfig {
    pub fn desk_default(root: PathBuf, seed: u64) -> DatasetConfig {
        DatasetConfig {
            root,
            seed,
            resolution: 64,
            train_subjects: 8,
            train_envs: 6,
            test_subjects: 2,
            test_envs: 2,
            env_width: 96,
            sample_grid: 16,
            explicit_seeds: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.resolution < 8 || self.resolution % 4 != 0 {
            return Err(Error::config(format!(
                "resolution {} must be >= 8 and divisible by 4",
                self.resolution
            )));
        }
        if self.train_subjects == 0 || self.train_envs == 0 {
            return Err(Error::config("train split must not be empty"));
        }
        if self.env_width % 2 != 0 || self.env_width < 4 {
            return Err(Error::config("env width must be even and >= 4"));
        }
        if self.sample_grid == 0 {
            return Err(Error::config("sample grid must be positive"));
        }
        Ok(())
    }
}

/// The two generated splits.
#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

/// Draw `n` seeds from an already-deduplicating stream.
fn draw_seeds(rng: &mut ChaCha8Rng, used: &mut HashSet<u64>, n: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s: u64 = rng.random();
        if used.insert(s) {
            out.push(s);
        }
    }
    out
}

/// Generate both splits under `<root>/train` and `<root>/test`, returning
/// their manifests. Deterministic per seed: identical config produces
/// byte-identical images and manifests.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let (tr_subj, tr_env, te_subj, te_env) = match &cfg.explicit_seeds {
        Some(seeds) => {
            let mut all = HashSet::new();
            for s in seeds
                .train_subjects
                .iter()
                .chain(&seeds.test_subjects)
                .chain(&seeds.train_envs)
                .chain(&seeds.test_envs)
            {
                if !all.insert(*s) {
                    return Err(Error::config(format!(
                        "non-disjoint split seeds: {s} appears twice"
                    )));
                }
            }
            (
                seeds.train_subjects.clone(),
                seeds.train_envs.clone(),
                seeds.test_subjects.clone(),
                seeds.test_envs.clone(),
            )
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut used = HashSet::new();
            let tr_subj = draw_seeds(&mut rng, &mut used, cfg.train_subjects);
            let te_subj = draw_seeds(&mut rng, &mut used, cfg.test_subjects);
            let tr_env = draw_seeds(&mut rng, &mut used, cfg.train_envs);
            let te_env = draw_seeds(&mut rng, &mut used, cfg.test_envs);
            (tr_subj, tr_env, te_subj, te_env)
        }
    };

    let pattern = SamplePattern::stratified(cfg.sample_grid, cfg.seed ^ 0x9e3779b97f4a7c15);
    let train = generate_split(cfg, "train", &tr_subj, &tr_env, &pattern)?;
    let test = if te_subj.is_empty() || te_env.is_empty() {
        None
    } else {
        Some(generate_split(cfg, "test", &te_subj, &te_env, &pattern)?)
    };
    Ok(DatasetBundle { train, test })
}

fn generate_split(
    cfg: &DatasetConfig,
    split: &str,
    subject_seeds: &[u64],
    env_seeds: &[u64],
    pattern: &SamplePattern,
) -> Result<Dataset> {
    let dir = cfg.root.join(split);
    std::fs::create_dir_all(&dir)?;

    let subjects: Vec<SubjectSpec> = subject_seeds
        .iter()
        .map(|&s| SubjectSpec::from_seed(s))
        .collect();
    let envs: Vec<EnvMap> = env_seeds
        .iter()
        .map(|&s| EnvMap::from_seed(s, cfg.env_width))
        .collect();

    let mut records = Vec::with_capacity(subjects.len() * envs.len() * ROTATIONS);
    for (sid, _) in subjects.iter().enumerate() {
        for (eid, _) in envs.iter().enumerate() {
            for d in 0..ROTATIONS as u8 {
                records.push(SceneRecord {
                    subject_id: sid as u32,
                    env_id: eid as u32,
                    rotation: d,
                    image: format!("s{sid}_e{eid}_r{d}.png"),
                    mask: format!("s{sid}_e{eid}_r{d}_mask.png"),
                });
            }
        }
    }

    // Scenes are independent; render and write them in parallel.
    records
        .par_iter()
        .try_for_each(|rec| -> Result<()> {
            let subject = &subjects[rec.subject_id as usize];
            let env = envs[rec.env_id as usize]
                .rotated(rec.rotation as f64 * DEGREES_PER_STEP);
            let (img, mask) = shade_subject(subject, &env, cfg.resolution, pattern);
            crate::imaging::write_image(&dir.join(&rec.image), &img)?;
            crate::imaging::write_mask(&dir.join(&rec.mask), &mask)?;
            Ok(())
        })?;

    let manifest = DatasetManifest {
        split: split.to_string(),
        generator_version: GENERATOR_VERSION,
        resolution: cfg.resolution,
        subject_seeds: subject_seeds.to_vec(),
        env_seeds: env_seeds.to_vec(),
        records,
    };
    manifest.validate()?;
    save_manifest(&manifest, &dir)?;
    Ok(Dataset { manifest, dir })
}

/// Check that two manifests share no subject or environment seeds.
pub fn splits_disjoint(a: &DatasetManifest, b: &DatasetManifest) -> bool {
    let subj: HashSet<u64> = a.subject_seeds.iter().copied().collect();
    let env: HashSet<u64> = a.env_seeds.iter().copied().collect();
    b.subject_seeds.iter().all(|s| !subj.contains(s))
        && b.env_seeds.iter().all(|e| !env.contains(e))
}

/// Load a previously generated split directory.
pub fn open_split(root: &Path, split: &str) -> Result<Dataset> {
    Dataset::load(&root.join(split))
}
