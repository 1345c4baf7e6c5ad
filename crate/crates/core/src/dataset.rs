//! On-disk datasets: one container per phantom, sinogram, SBP tensor and FBP
//! image, indexed by a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{invalid, Error, Result};
use crate::geometry::Image;
use crate::io::{
    image_container, image_from_container, sbp_container, sbp_from_container, sinogram_container,
    sinogram_from_container, Container, ExperimentConfig,
};
use crate::nn::{ModelVariant, Tensor};
use crate::phantom::{generate_dataset, noise_seed, Phantom};
use crate::physics::{simulate_sinogram, NoiseSpec};
use crate::sbp::{build_sbp, fbp_hu, normalize_for_network};
use crate::train::TrainingPair;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    /// Seed of the measurement noise, absent for noiseless data.
    pub noise_seed: Option<u64>,
    pub phantom: String,
    pub sinogram: String,
    pub sbp: String,
    pub fbp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub config: ExperimentConfig,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

fn provenance(cfg: &ExperimentConfig, split: Split, index: usize, seed: u64) -> serde_json::Value {
    json!({
        "geometry": cfg.geometry,
        "split": split.name(),
        "index": index,
        "seed": seed,
    })
}

fn tagged(mut c: Container, extra: &serde_json::Value) -> Container {
    if let (Some(m), Some(e)) = (c.metadata.as_object_mut(), extra.as_object()) {
        m.extend(e.iter().map(|(k, v)| (k.clone(), v.clone())));
    }
    c
}

fn write_entry(
    dir: &Path,
    cfg: &ExperimentConfig,
    split: Split,
    index: usize,
    p: &Phantom,
) -> Result<ManifestEntry> {
    let geom = cfg.view_geometry()?;
    let phys = cfg.physics.constants()?;
    let noise = cfg.physics.noise.then(|| noise_seed(p.seed));
    let spec = noise.map_or_else(NoiseSpec::off, NoiseSpec::seeded);
    let sino = simulate_sinogram(&p.image, &geom, &phys, spec)?;
    let sbp = build_sbp(&sino, &geom, &phys, cfg.model.sbp_options())?;
    let fbp = fbp_hu(&sino, &geom, &phys)?;
    let tags = provenance(cfg, split, index, p.seed);
    let stem = format!("{}/{index:04}", split.name());
    let entry = ManifestEntry {
        index,
        seed: p.seed,
        noise_seed: noise,
        phantom: format!("{stem}_phantom.rsbp"),
        sinogram: format!("{stem}_sinogram.rsbp"),
        sbp: format!("{stem}_sbp.rsbp"),
        fbp: format!("{stem}_fbp.rsbp"),
    };
    tagged(image_container(&p.image), &tags).write(dir.join(&entry.phantom))?;
    tagged(sinogram_container(&sino), &tags).write(dir.join(&entry.sinogram))?;
    tagged(sbp_container(&sbp), &tags).write(dir.join(&entry.sbp))?;
    tagged(image_container(&fbp), &tags).write(dir.join(&entry.fbp))?;
    Ok(entry)
}

/// Generates the phantom split of `cfg`, simulates every item and writes
/// the files plus the manifest under `dir`. The configuration is validated
/// before anything is written.
pub fn generate(cfg: &ExperimentConfig, dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let dir = dir.as_ref();
    let split = generate_dataset(
        &cfg.phantom.spec(cfg.geometry.n_pixels),
        cfg.phantom.count,
        cfg.phantom.split_ratio,
    )?;
    for s in [Split::Train, Split::Test] {
        let sub = dir.join(s.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    }
    let write_split = |s: Split, items: &[Phantom]| -> Result<Vec<ManifestEntry>> {
        items
            .iter()
            .enumerate()
            .map(|(i, p)| write_entry(dir, cfg, s, i, p))
            .collect()
    };
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config: cfg.clone(),
        train: write_split(Split::Train, &split.train)?,
        test: write_split(Split::Test, &split.test)?,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A dataset directory opened through its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        Ok(Dataset { dir, manifest })
    }

    pub fn entries(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::Train => &self.manifest.train,
            Split::Test => &self.manifest.test,
        }
    }

    /// Fails unless the stored data was simulated with the geometry, physics
    /// and SBP flavour of `cfg`.
    pub fn check_compatible(&self, cfg: &ExperimentConfig) -> Result<()> {
        let ours = &self.manifest.config;
        if ours.geometry != cfg.geometry {
            return Err(invalid!(
                "dataset geometry {}x{} pixels with {} views does not match config {}x{} pixels with {} views",
                ours.geometry.n_pixels,
                ours.geometry.n_pixels,
                ours.geometry.n_views,
                cfg.geometry.n_pixels,
                cfg.geometry.n_pixels,
                cfg.geometry.n_views
            ));
        }
        if ours.physics != cfg.physics {
            return Err(invalid!(
                "dataset physics {:?} does not match config {:?}",
                ours.physics,
                cfg.physics
            ));
        }
        if ours.model.filtered_sbp != cfg.model.filtered_sbp {
            return Err(invalid!(
                "dataset filtered_sbp={} does not match config filtered_sbp={}",
                ours.model.filtered_sbp,
                cfg.model.filtered_sbp
            ));
        }
        Ok(())
    }

    fn read(&self, rel: &str) -> Result<Container> {
        Container::read(self.dir.join(rel))
    }

    pub fn phantoms(&self, split: Split) -> Result<Vec<Phantom>> {
        self.entries(split)
            .iter()
            .map(|e| {
                Ok(Phantom {
                    seed: e.seed,
                    image: image_from_container(&self.read(&e.phantom)?)?,
                })
            })
            .collect()
    }

    pub fn sinogram(&self, entry: &ManifestEntry) -> Result<crate::geometry::Sinogram> {
        sinogram_from_container(&self.read(&entry.sinogram)?)
    }

    pub fn fbp(&self, entry: &ManifestEntry) -> Result<Image> {
        image_from_container(&self.read(&entry.fbp)?)
    }

    pub fn sbp(&self, entry: &ManifestEntry) -> Result<crate::sbp::SbpTensor> {
        sbp_from_container(&self.read(&entry.sbp)?)
    }

    /// Training pairs read from the stored FBP or SBP inputs, identical to
    /// [`crate::train::prepare_pairs`] on the same phantoms.
    pub fn training_pairs(&self, variant: ModelVariant) -> Result<Vec<TrainingPair>> {
        self.entries(Split::Train)
            .iter()
            .map(|e| {
                let input = match variant {
                    ModelVariant::FbpCnn => {
                        let img = normalize_for_network(&self.fbp(e)?)?;
                        let n = img.side();
                        Tensor::try_from_vec(vec![n, n, 1], img.into_data())?
                    }
                    _ => normalize_for_network(&self.sbp(e)?)?.to_channels(),
                };
                Ok(TrainingPair {
                    input,
                    target: image_from_container(&self.read(&e.phantom)?)?,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::prepare_pairs;

    fn small() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{"geometry": {"n_pixels": 24, "n_views": 4},
                "phantom": {"count": 3, "split_ratio": 0.6, "seed": 5},
                "train": {"patch_in": 24, "patch_out": 6}}"#,
        )
        .unwrap()
    }

    #[test]
    fn stored_pairs_match_on_the_fly_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let m = generate(&cfg, dir.path()).unwrap();
        assert_eq!((m.train.len(), m.test.len()), (2, 1));
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        let phantoms = ds.phantoms(Split::Train).unwrap();
        let geom = cfg.view_geometry().unwrap();
        let phys = cfg.physics.constants().unwrap();
        for v in ModelVariant::ALL {
            let direct = prepare_pairs(&phantoms, v, &geom, &phys, true, cfg.model.sbp_options()).unwrap();
            assert_eq!(ds.training_pairs(v).unwrap(), direct);
        }
    }

    #[test]
    fn incompatible_config_names_both_geometries() {
        let dir = tempfile::tempdir().unwrap();
        generate(&small(), dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let mut other = small();
        other.geometry.n_views = 8;
        let msg = ds.check_compatible(&other).unwrap_err().to_string();
        assert!(msg.contains("4 views") && msg.contains("8 views"), "{msg}");
    }
}
