//! Dataset manifest: the index of the full subject x environment x rotation
//! cross product, plus rotated ground-truth lookup.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const ROTATIONS: usize = 12;
pub const DEGREES_PER_STEP: f64 = 30.0;
pub const GENERATOR_VERSION: u32 = 1;

/// One rendered scene: a subject under one environment rotation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub subject_id: u32,
    pub env_id: u32,
    /// Rotation index d in 0..12; the environment is rotated by 30 * d degrees.
    pub rotation: u8,
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub generator_version: u32,
    pub resolution: usize,
    pub subject_seeds: Vec<u64>,
    pub env_seeds: Vec<u64>,
    pub records: Vec<SceneRecord>,
}

impl DatasetManifest {
    pub fn subjects(&self) -> usize {
        self.subject_seeds.len()
    }

    pub fn envs(&self) -> usize {
        self.env_seeds.len()
    }

    /// Full-cross-product sanity checks.
    pub fn validate(&self) -> Result<()> {
        let want = self.subjects() * self.envs() * ROTATIONS;
        if self.records.len() != want {
            return Err(Error::config(format!(
                "manifest '{}' has {} records, expected {}x{}x{} = {}",
                self.split,
                self.records.len(),
                self.subjects(),
                self.envs(),
                ROTATIONS,
                want
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if r.rotation as usize >= ROTATIONS {
                return Err(Error::config(format!("rotation {} out of range", r.rotation)));
            }
            if !seen.insert((r.subject_id, r.env_id, r.rotation)) {
                return Err(Error::config(format!(
                    "duplicate record ({}, {}, {})",
                    r.subject_id, r.env_id, r.rotation
                )));
            }
        }
        Ok(())
    }

    pub fn find(&self, subject_id: u32, env_id: u32, rotation: u8) -> Result<&SceneRecord> {
        // Records are written in (subject, env, rotation) order; index directly
        // when the layout matches, scan otherwise.
        let envs = self.envs();
        let idx = (subject_id as usize * envs + env_id as usize) * ROTATIONS + rotation as usize;
        if let Some(r) = self.records.get(idx) {
            if r.subject_id == subject_id && r.env_id == env_id && r.rotation == rotation {
                return Ok(r);
            }
        }
        self.records
            .iter()
            .find(|r| r.subject_id == subject_id && r.env_id == env_id && r.rotation == rotation)
            .ok_or_else(|| {
                Error::MissingRecord(format!(
                    "scene (subject {subject_id}, env {env_id}, rotation {rotation}) not in manifest '{}'",
                    self.split
                ))
            })
    }

    /// Record at rotation index `(d + offset_steps) mod 12`: the scene whose
    /// environment is turned a further `offset_steps * 30` degrees.
    pub fn lookup_rotated(
        &self,
        subject_id: u32,
        env_id: u32,
        d: u8,
        offset_steps: i32,
    ) -> Result<&SceneRecord> {
        let rot = (d as i32 + offset_steps).rem_euclid(ROTATIONS as i32) as u8;
        self.find(subject_id, env_id, rot)
    }
}

/// Number of 30-degree rotation steps for an angle, when it is an exact
/// multiple.
pub fn rotation_steps(angle_degrees: f64) -> Option<i32> {
    let steps = angle_degrees / DEGREES_PER_STEP;
    let rounded = steps.round();
    if (steps - rounded).abs() < 1e-9 {
        Some(rounded as i32)
    } else {
        None
    }
}

/// A manifest plus the directory its record paths are relative to.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub dir: PathBuf,
}

impl Dataset {
    /// Load `<dir>/manifest.json`.
    pub fn load(split_dir: &Path) -> Result<Dataset> {
        let path = split_dir.join("manifest.json");
        let text = std::fs::read_to_string(&path)?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(Dataset {
            manifest,
            dir: split_dir.to_path_buf(),
        })
    }

    pub fn image_path(&self, r: &SceneRecord) -> PathBuf {
        self.dir.join(&r.image)
    }

    pub fn mask_path(&self, r: &SceneRecord) -> PathBuf {
        self.dir.join(&r.mask)
    }

    pub fn load_scene(&self, r: &SceneRecord) -> Result<(crate::imaging::PortraitImage, crate::imaging::SegMask)> {
        let img = crate::imaging::read_image(&self.image_path(r))?;
        let mask = crate::imaging::read_mask(&self.mask_path(r))?.binarized();
        Ok((img, mask))
    }
}

pub fn save_manifest(manifest: &DatasetManifest, split_dir: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(split_dir.join("manifest.json"), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_manifest() -> DatasetManifest {
        let mut records = Vec::new();
        for s in 0..2u32 {
            for e in 0..1u32 {
                for d in 0..ROTATIONS as u8 {
                    records.push(SceneRecord {
                        subject_id: s,
                        env_id: e,
                        rotation: d,
                        image: format!("s{s}_e{e}_r{d}.png"),
                        mask: format!("s{s}_e{e}_r{d}_mask.png"),
                    });
                }
            }
        }
        DatasetManifest {
            split: "train".into(),
            generator_version: GENERATOR_VERSION,
            resolution: 64,
            subject_seeds: vec![1, 2],
            env_seeds: vec![3],
            records,
        }
    }

    #[test]
    fn validate_accepts_full_cross_product_and_rejects_duplicates() {
        let mut m = tiny_manifest();
        assert!(m.validate().is_ok());
        m.records[1] = m.records[0].clone();
        assert!(m.validate().is_err());
    }

    #[test]
    fn lookup_rotated_follows_thirty_degree_steps() {
        let m = tiny_manifest();
        // +90 degrees = +3 steps.
        assert_eq!(m.lookup_rotated(0, 0, 0, 3).unwrap().rotation, 3);
        // +30 degrees from d=11 wraps to 0.
        assert_eq!(m.lookup_rotated(0, 0, 11, 1).unwrap().rotation, 0);
        // -180 degrees from d=5 lands on 11.
        assert_eq!(m.lookup_rotated(0, 0, 5, -6).unwrap().rotation, 11);
    }

    #[test]
    fn rotation_steps_accepts_only_exact_multiples() {
        assert_eq!(rotation_steps(90.0), Some(3));
        assert_eq!(rotation_steps(-90.0), Some(-3));
        assert_eq!(rotation_steps(-180.0), Some(-6));
        assert_eq!(rotation_steps(45.0), None);
    }

    #[test]
    fn missing_record_is_reported() {
        let m = tiny_manifest();
        assert!(matches!(
            m.find(5, 0, 0),
            Err(Error::MissingRecord(_))
        ));
    }
}
