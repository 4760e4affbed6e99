//! Dataset ingestion, deterministic splits and per-class shot subsampling.
//!
//! Datasets are immutable after construction and every operation here is a
//! pure function of its inputs and seed, so repeated calls are byte-identical
//! and results can be shared freely across parallel workers.

pub mod augment;
mod raster;

pub use augment::{augment, AugmentSpec, JitterStrengths};
pub use raster::Raster;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::util::{self, Fingerprint};
use crate::{Error, Result};

/// One ingested image with its class label and optional tone metadata.
#[derive(Debug, Clone)]
pub struct ImageSample {
    /// Stable identifier: path of the file relative to the dataset root.
    pub id: String,
    pub pixels: Raster,
    /// Index into the owning dataset's `class_names`.
    pub label: usize,
    pub class_name: String,
    /// Skin-tone category from sidecar metadata, when provided.
    pub tone_bin: Option<String>,
    pub source_path: PathBuf,
}

/// Which stage of the pipeline a dataset instance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Full,
    Train,
    Test,
    ShotSubset,
}

/// An ordered collection of labeled samples.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    samples: Vec<ImageSample>,
    class_names: Vec<String>,
    split_tag: SplitTag,
}

impl LabeledDataset {
    /// Validates the dataset invariants: unique ids, non-empty class list,
    /// labels in range and consistent with their class names.
    pub fn new(samples: Vec<ImageSample>, class_names: Vec<String>, split_tag: SplitTag) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::Data("class_names must be non-empty".into()));
        }
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id {:?}", s.id)));
            }
            match class_names.get(s.label) {
                Some(name) if *name == s.class_name => {}
                Some(name) => {
                    return Err(Error::Data(format!(
                        "sample {:?} labeled {} ({:?}) but class {} is {:?}",
                        s.id, s.label, s.class_name, s.label, name
                    )))
                }
                None => {
                    return Err(Error::Data(format!(
                        "sample {:?} label {} out of range for {} classes",
                        s.id,
                        s.label,
                        class_names.len()
                    )))
                }
            }
        }
        Ok(LabeledDataset {
            samples,
            class_names,
            split_tag,
        })
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn split_tag(&self) -> SplitTag {
        self.split_tag
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Sample indices per class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.class_names.len()];
        for (i, s) in self.samples.iter().enumerate() {
            by_class[s.label].push(i);
        }
        by_class
    }

    /// Size of the smallest class (0 when some class has no samples).
    pub fn min_class_size(&self) -> usize {
        self.indices_by_class().iter().map(Vec::len).min().unwrap_or(0)
    }

    /// Keep the samples whose ids are in `keep`, preserving dataset order.
    pub fn filter_by_ids(&self, keep: &HashSet<&str>, tag: SplitTag) -> LabeledDataset {
        let samples = self
            .samples
            .iter()
            .filter(|s| keep.contains(s.id.as_str()))
            .cloned()
            .collect();
        LabeledDataset {
            samples,
            class_names: self.class_names.clone(),
            split_tag: tag,
        }
    }

    /// True when no sample id appears in both datasets.
    pub fn disjoint_from(&self, other: &LabeledDataset) -> bool {
        let ids: HashSet<&str> = self.samples.iter().map(|s| s.id.as_str()).collect();
        other.samples.iter().all(|s| !ids.contains(s.id.as_str()))
    }

    /// Content fingerprint covering ids, labels and pixel data.
    pub fn fingerprint(&self) -> String {
        let mut fp = Fingerprint::new("dataset-v1");
        for name in &self.class_names {
            fp.add_str(name);
        }
        for s in &self.samples {
            fp.add_str(&s.id);
            fp.add_u64(s.label as u64);
            fp.add_u64(s.pixels.height() as u64);
            fp.add_u64(s.pixels.width() as u64);
            fp.add_bytes(s.pixels.data());
        }
        fp.finish()
    }
}

/// The shot counts and RNG seeds a sweep iterates over.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSchedule {
    pub shots_per_class: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl ShotSchedule {
    /// The default schedule sweeps from 5120 shots per class down to 10.
    pub fn default_shots() -> Vec<usize> {
        vec![5120, 639, 79, 40, 20, 10]
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots_per_class.is_empty() {
            return Err(Error::Data("shot schedule must be non-empty".into()));
        }
        if self.shots_per_class.iter().any(|&n| n == 0) {
            return Err(Error::Data("shots must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Data("seed list must be non-empty".into()));
        }
        Ok(())
    }

    pub fn max_shots(&self) -> usize {
        self.shots_per_class.iter().copied().max().unwrap_or(0)
    }
}

/// Sidecar file name mapping sample ids to tone categories.
pub const TONES_FILE: &str = "tones.csv";

/// Ingest a `<root>/<class_name>/<image files>` directory tree.
///
/// Class names are the sorted sub-directory names; samples are ordered by
/// path. Undecodable files are hard errors naming the file, never skipped.
/// An optional `tones.csv` (`id,tone` per line) at the root attaches tone
/// metadata to matching samples.
pub fn load_image_directory(root: &Path) -> Result<LabeledDataset> {
    if !root.is_dir() {
        return Err(Error::Data(format!(
            "dataset root {} does not exist or is not a directory",
            root.display()
        )));
    }
    let mut class_dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if !name.starts_with('.') {
                class_dirs.push((name, path));
            }
        }
    }
    if class_dirs.is_empty() {
        return Err(Error::Data(format!(
            "no class subdirectories under {}",
            root.display()
        )));
    }
    class_dirs.sort_by(|a, b| a.0.cmp(&b.0));

    let tones = load_tone_sidecar(root)?;

    let class_names: Vec<String> = class_dirs.iter().map(|(n, _)| n.clone()).collect();
    let mut samples = Vec::new();
    for (label, (class_name, dir)) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            let name = entry.file_name().to_string_lossy().into_owned();
            if path.is_file() && !name.starts_with('.') {
                files.push(path);
            }
        }
        files.sort();
        for path in files {
            let pixels = Raster::decode_file(&path)?;
            let id = format!(
                "{}/{}",
                class_name,
                path.file_name().expect("regular file has a name").to_string_lossy()
            );
            samples.push(ImageSample {
                tone_bin: tones.get(&id).cloned(),
                id,
                pixels,
                label,
                class_name: class_name.clone(),
                source_path: path,
            });
        }
    }
    LabeledDataset::new(samples, class_names, SplitTag::Full)
}

fn load_tone_sidecar(root: &Path) -> Result<HashMap<String, String>> {
    let path = root.join(TONES_FILE);
    let mut map = HashMap::new();
    if !path.is_file() {
        return Ok(map);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.eq_ignore_ascii_case("id,tone")) {
            continue;
        }
        let (id, tone) = line.split_once(',').ok_or_else(|| {
            Error::Data(format!(
                "{}:{}: expected `id,tone`, got {:?}",
                path.display(),
                lineno + 1,
                line
            ))
        })?;
        map.insert(id.trim().to_string(), tone.trim().to_string());
    }
    Ok(map)
}

/// Split every class with `round(test_fraction * class_size)` samples going
/// to the test side. Identical inputs and seed give identical splits.
pub fn stratified_split(
    ds: &LabeledDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Data(format!(
            "test_fraction must lie strictly in (0, 1), got {test_fraction}"
        )));
    }
    let by_class = ds.indices_by_class();
    for (label, idxs) in by_class.iter().enumerate() {
        if idxs.len() < 2 {
            return Err(Error::Data(format!(
                "class {:?} has {} samples; need at least 2 to split",
                ds.class_names()[label],
                idxs.len()
            )));
        }
    }

    let mut test_ids: HashSet<&str> = HashSet::new();
    for (label, idxs) in by_class.iter().enumerate() {
        let mut order = idxs.clone();
        let mut rng = util::rng_for(seed, &[0x53504c49, label as u64]);
        order.shuffle(&mut rng);
        let n_test = (test_fraction * idxs.len() as f64).round() as usize;
        for &i in order.iter().take(n_test) {
            test_ids.insert(ds.samples()[i].id.as_str());
        }
    }

    let test = ds.filter_by_ids(&test_ids, SplitTag::Test);
    let train_ids: HashSet<&str> = ds
        .samples()
        .iter()
        .map(|s| s.id.as_str())
        .filter(|id| !test_ids.contains(id))
        .collect();
    let train = ds.filter_by_ids(&train_ids, SplitTag::Train);
    Ok((train, test))
}

/// Pick exactly `n_per_class` samples per class from `train`.
///
/// One shuffled order per (class, seed) is truncated at `n`, so for a fixed
/// seed the subsets are nested across shot counts.
pub fn subsample_shots(train: &LabeledDataset, n_per_class: usize, seed: u64) -> Result<LabeledDataset> {
    if n_per_class == 0 {
        return Err(Error::Data("n_per_class must be >= 1".into()));
    }
    let by_class = train.indices_by_class();
    let mut keep: HashSet<&str> = HashSet::new();
    for (label, idxs) in by_class.iter().enumerate() {
        if idxs.len() < n_per_class {
            return Err(Error::Data(format!(
                "class {:?} has only {} samples, cannot draw {} shots",
                train.class_names()[label],
                idxs.len(),
                n_per_class
            )));
        }
        let mut order = idxs.clone();
        let mut rng = util::rng_for(seed, &[0x5807, label as u64]);
        order.shuffle(&mut rng);
        for &i in order.iter().take(n_per_class) {
            keep.insert(train.samples()[i].id.as_str());
        }
    }
    Ok(train.filter_by_ids(&keep, SplitTag::ShotSubset))
}

/// Persist a newline-delimited id list (the replayable split manifest format).
pub fn write_id_manifest(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = String::new();
    for id in ids {
        text.push_str(id);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read a newline-delimited id list.
pub fn read_id_manifest(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

/// Per-class sample counts, keyed by class name.
pub fn class_counts(ds: &LabeledDataset) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for name in ds.class_names() {
        counts.insert(name.clone(), 0);
    }
    for s in ds.samples() {
        *counts.get_mut(&s.class_name).expect("label consistency") += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(per_class: &[usize]) -> LabeledDataset {
        let class_names: Vec<String> = (0..per_class.len()).map(|c| format!("class{c}")).collect();
        let mut samples = Vec::new();
        for (label, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                samples.push(ImageSample {
                    id: format!("class{label}/img{i:03}.png"),
                    pixels: Raster::filled(4, 4, [label as u8, i as u8, 0]),
                    label,
                    class_name: class_names[label].clone(),
                    tone_bin: None,
                    source_path: PathBuf::from(format!("class{label}/img{i:03}.png")),
                });
            }
        }
        LabeledDataset::new(samples, class_names, SplitTag::Full).unwrap()
    }

    #[test]
    fn duplicate_ids_rejected() {
        let ds = toy_dataset(&[2]);
        let mut samples = ds.samples().to_vec();
        samples[1].id = samples[0].id.clone();
        assert!(LabeledDataset::new(samples, ds.class_names().to_vec(), SplitTag::Full).is_err());
    }

    #[test]
    fn split_counts_match_rounding() {
        let ds = toy_dataset(&[100, 100]);
        let (train, test) = stratified_split(&ds, 0.2, 3).unwrap();
        let test_counts = class_counts(&test);
        let train_counts = class_counts(&train);
        for c in ["class0", "class1"] {
            assert_eq!(test_counts[c], 20);
            assert_eq!(train_counts[c], 80);
        }
        assert!(train.disjoint_from(&test));
        assert_eq!(train.len() + test.len(), ds.len());
    }

    #[test]
    fn split_is_deterministic() {
        let ds = toy_dataset(&[30, 50]);
        let (tr1, te1) = stratified_split(&ds, 0.25, 11).unwrap();
        let (tr2, te2) = stratified_split(&ds, 0.25, 11).unwrap();
        assert_eq!(tr1.ids(), tr2.ids());
        assert_eq!(te1.ids(), te2.ids());
        let (tr3, _) = stratified_split(&ds, 0.25, 12).unwrap();
        assert_ne!(tr1.ids(), tr3.ids());
    }

    #[test]
    fn split_rejects_bad_fraction_and_tiny_classes() {
        let ds = toy_dataset(&[10, 10]);
        assert!(stratified_split(&ds, 0.0, 1).is_err());
        assert!(stratified_split(&ds, 1.0, 1).is_err());
        let tiny = toy_dataset(&[10, 1]);
        assert!(stratified_split(&tiny, 0.2, 1).is_err());
    }

    #[test]
    fn subsample_full_class_is_identity() {
        let ds = toy_dataset(&[8, 8]);
        let sub = subsample_shots(&ds, 8, 7).unwrap();
        assert_eq!(sub.ids(), ds.ids());
    }

    #[test]
    fn subsample_counts_and_membership() {
        let ds = toy_dataset(&[80, 80]);
        let sub = subsample_shots(&ds, 10, 5).unwrap();
        let counts = class_counts(&sub);
        assert_eq!(counts["class0"], 10);
        assert_eq!(counts["class1"], 10);
        let parent: HashSet<String> = ds.ids().into_iter().collect();
        assert!(sub.ids().iter().all(|id| parent.contains(id)));
    }

    #[test]
    fn subsample_nesting_for_fixed_seed() {
        let ds = toy_dataset(&[40, 40]);
        let small: HashSet<String> = subsample_shots(&ds, 10, 9).unwrap().ids().into_iter().collect();
        let large: HashSet<String> = subsample_shots(&ds, 20, 9).unwrap().ids().into_iter().collect();
        assert!(small.is_subset(&large));
    }

    #[test]
    fn subsample_rejects_oversized_requests() {
        let ds = toy_dataset(&[5, 9]);
        let err = subsample_shots(&ds, 6, 0).unwrap_err();
        assert!(err.to_string().contains("class0"), "{err}");
    }

    #[test]
    fn schedule_validation() {
        let ok = ShotSchedule {
            shots_per_class: vec![40, 20, 10],
            seeds: vec![0],
        };
        ok.validate().unwrap();
        let zero = ShotSchedule {
            shots_per_class: vec![10, 0],
            seeds: vec![0],
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn ingest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for (class, names) in [("lyme", vec!["a", "b", "c"]), ("healthy", vec!["d", "e"])] {
            std::fs::create_dir(root.join(class)).unwrap();
            for n in names {
                Raster::filled(6, 5, [1, 2, 3])
                    .save_png(&root.join(class).join(format!("{n}.png")))
                    .unwrap();
            }
        }
        std::fs::write(root.join(TONES_FILE), "id,tone\nlyme/a.png,very_light\n").unwrap();

        let ds = load_image_directory(root).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.class_names(), &["healthy".to_string(), "lyme".to_string()]);
        let lyme_a = ds.samples().iter().find(|s| s.id == "lyme/a.png").unwrap();
        assert_eq!(lyme_a.tone_bin.as_deref(), Some("very_light"));
        assert_eq!(lyme_a.label, 1);
    }

    #[test]
    fn ingest_empty_root_errors() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_image_directory(dir.path()).unwrap_err();
        assert!(err.to_string().contains("no class subdirectories"), "{err}");
    }

    #[test]
    fn ingest_truncated_image_errors_with_name() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir(root.join("lyme")).unwrap();
        Raster::filled(6, 5, [1, 2, 3])
            .save_png(&root.join("lyme").join("good.png"))
            .unwrap();
        std::fs::write(root.join("lyme").join("broken.png"), b"not a png").unwrap();
        let err = load_image_directory(root).unwrap_err();
        assert!(err.to_string().contains("broken.png"), "{err}");
    }

    #[test]
    fn id_manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ids.txt");
        let ids = vec!["a/1.png".to_string(), "b/2.png".to_string()];
        write_id_manifest(&path, &ids).unwrap();
        assert_eq!(read_id_manifest(&path).unwrap(), ids);
    }
}
