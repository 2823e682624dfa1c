//! Synthetic benchmark: generation, on-disk layout and the DMAP codec.

mod bench;
mod dmap;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use bench::{
    boundary_distance, flip_labels, generate_sample, generate_split, noise_field_from_distance,
    BenchConfig, Dataset, OodRule, ShapeClass, Split, SplitCounts, SyntheticSample,
};
pub use dmap::{
    decode_dmap, encode_dmap, encode_pgm, read_dmap, write_dmap, write_pgm, DMAP_MAGIC,
    DMAP_VERSION,
};

use crate::error::{DuqError, Result};

pub const CONFIG_FILE: &str = "bench_config.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// File names of one sample, relative to its split directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub image: String,
    pub clean_mask: String,
    pub noisy_label: String,
    pub noise_field: String,
}

impl SampleFiles {
    fn for_index(i: usize) -> Self {
        SampleFiles {
            image: format!("{i:05}_image.dmap"),
            clean_mask: format!("{i:05}_clean_mask.dmap"),
            noisy_label: format!("{i:05}_noisy_label.dmap"),
            noise_field: format!("{i:05}_noise_field.dmap"),
        }
    }

    fn all(&self) -> [&str; 4] {
        [
            &self.image,
            &self.clean_mask,
            &self.noisy_label,
            &self.noise_field,
        ]
    }
}

/// Per-split manifest; the four arrays are index-aligned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: Split,
    pub files: Vec<SampleFiles>,
    pub shape_class: Vec<ShapeClass>,
    pub center_offset: Vec<[f64; 2]>,
    pub ood: Vec<bool>,
}

impl SplitManifest {
    fn from_samples(split: Split, samples: &[SyntheticSample]) -> Self {
        SplitManifest {
            split,
            files: samples
                .iter()
                .map(|s| SampleFiles::for_index(s.index))
                .collect(),
            shape_class: samples.iter().map(|s| s.shape_class).collect(),
            center_offset: samples.iter().map(|s| s.center_offset).collect(),
            ood: samples.iter().map(|s| s.ood).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    fn check_aligned(&self) -> Result<()> {
        let n = self.files.len();
        if self.shape_class.len() != n || self.center_offset.len() != n || self.ood.len() != n {
            return Err(DuqError::Validation(format!(
                "{} manifest arrays have different lengths",
                self.split.dir_name()
            )));
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| DuqError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| DuqError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes every split of `dataset` under `out`.
pub fn write_dataset(dataset: &Dataset, out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| DuqError::io(out, e))?;
    write_json(&out.join(CONFIG_FILE), &dataset.config)?;
    for split in Split::ALL {
        let dir = out.join(split.dir_name());
        fs::create_dir_all(&dir).map_err(|e| DuqError::io(&dir, e))?;
        let samples = dataset.split(split);
        let manifest = SplitManifest::from_samples(split, samples);
        for (s, f) in samples.iter().zip(&manifest.files) {
            write_dmap(dir.join(&f.image), &s.image)?;
            write_dmap(dir.join(&f.clean_mask), &s.clean_mask)?;
            write_dmap(dir.join(&f.noisy_label), &s.noisy_label)?;
            write_dmap(dir.join(&f.noise_field), &s.noise_field)?;
        }
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    }
    Ok(())
}

/// Generates the dataset for `cfg` and persists it under `out`.
pub fn generate_dataset(cfg: &BenchConfig, out: impl AsRef<Path>) -> Result<Dataset> {
    let dataset = Dataset::generate(cfg)?;
    write_dataset(&dataset, out)?;
    Ok(dataset)
}

fn count_dmap_files(dir: &Path) -> Result<usize> {
    let entries = fs::read_dir(dir).map_err(|e| DuqError::io(dir, e))?;
    let mut n = 0;
    for e in entries {
        let e = e.map_err(|e| DuqError::io(dir, e))?;
        if e.path().extension().is_some_and(|x| x == "dmap") {
            n += 1;
        }
    }
    Ok(n)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<SplitManifest> {
    let m: SplitManifest = read_json(&dir.as_ref().join(MANIFEST_FILE))?;
    m.check_aligned()?;
    Ok(m)
}

/// Loads a dataset written by [`generate_dataset`], checking manifests
/// against directory contents and the stored config.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let config: BenchConfig = read_json(&root.join(CONFIG_FILE))?;
    let mut dataset = Dataset {
        config,
        train: Vec::new(),
        val: Vec::new(),
        test_id: Vec::new(),
        test_ood: Vec::new(),
    };
    for split in Split::ALL {
        let dir: PathBuf = root.join(split.dir_name());
        let manifest = read_manifest(&dir)?;
        let expected = dataset.config.counts.get(split);
        if manifest.len() != expected {
            return Err(DuqError::Validation(format!(
                "{}: manifest lists {} samples, config says {expected}",
                dir.display(),
                manifest.len()
            )));
        }
        let on_disk = count_dmap_files(&dir)?;
        if on_disk != 4 * manifest.len() {
            return Err(DuqError::Validation(format!(
                "{}: manifest lists {} files, directory holds {on_disk}",
                dir.display(),
                4 * manifest.len()
            )));
        }
        let mut samples = Vec::with_capacity(manifest.len());
        for (i, f) in manifest.files.iter().enumerate() {
            for name in f.all() {
                if !dir.join(name).is_file() {
                    return Err(DuqError::Validation(format!(
                        "{}: missing {name}",
                        dir.display()
                    )));
                }
            }
            samples.push(SyntheticSample {
                index: i,
                split,
                image: read_dmap(dir.join(&f.image))?,
                clean_mask: read_dmap(dir.join(&f.clean_mask))?,
                noisy_label: read_dmap(dir.join(&f.noisy_label))?,
                noise_field: read_dmap(dir.join(&f.noise_field))?,
                shape_class: manifest.shape_class[i],
                center_offset: manifest.center_offset[i],
                ood: manifest.ood[i],
            });
        }
        *dataset.split_mut(split) = samples;
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BenchConfig {
        BenchConfig {
            counts: SplitCounts {
                train: 3,
                val: 2,
                test_id: 2,
                test_ood: 2,
            },
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_dataset(&tiny(), dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.config, d.config);
        for split in Split::ALL {
            for (a, b) in d.split(split).iter().zip(back.split(split)) {
                assert_eq!(a.image.to_f32_precision(), b.image);
                assert_eq!(a.noisy_label, b.noisy_label);
                assert_eq!(a.ood, b.ood);
            }
        }
    }

    #[test]
    fn missing_file_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&tiny(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("val").join("00001_noise_field.dmap")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, DuqError::Validation(_)), "{err}");
    }
}
