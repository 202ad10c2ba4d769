//! Dataset representation: family labels, sample manifests, stratified
//! sampling, train/test splits and a deterministic synthetic corpus.
//!
//! A corpus on disk is laid out as `root/<family>/<file>`. Manifests are
//! persisted as CSV with the header `path,family,realness,byte_length`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::convert;
use crate::error::{Error, Result};

/// Suffix that turns a family name into its generated-counterpart class name.
pub const FAKE_SUFFIX: &str = "_fake";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Realness {
    Real,
    Fake,
}

impl fmt::Display for Realness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Realness::Real => "real",
            Realness::Fake => "fake",
        })
    }
}

impl FromStr for Realness {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Realness::Real),
            "fake" => Ok(Realness::Fake),
            other => Err(Error::Config(format!("unknown realness `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FamilyLabel {
    pub name: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub family: FamilyLabel,
    pub realness: Realness,
    pub byte_length: u64,
}

impl SampleRecord {
    /// Record whose family index is assigned later by [`DatasetManifest::from_records`].
    pub fn new(path: impl Into<PathBuf>, family: impl Into<String>, realness: Realness, byte_length: u64) -> Self {
        SampleRecord { path: path.into(), family: FamilyLabel { name: family.into(), index: 0 }, realness, byte_length }
    }
}

/// An ordered, reproducible list of samples sharing one image size.
///
/// Class indices are assigned by sorting classes on (realness, name): real
/// families first in lexicographic order, then fake classes. For a purely
/// real corpus this is plain lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    records: Vec<SampleRecord>,
    classes: Vec<FamilyLabel>,
    class_realness: Vec<Realness>,
    image_size: usize,
    seed: u64,
}

impl DatasetManifest {
    pub fn from_records(mut records: Vec<SampleRecord>, image_size: usize, seed: u64) -> Result<Self> {
        let mut kinds: BTreeMap<String, Realness> = BTreeMap::new();
        for r in &records {
            match kinds.get(&r.family.name) {
                Some(k) if *k != r.realness => {
                    return Err(Error::Config(format!("class `{}` appears as both real and fake", r.family.name)))
                }
                Some(_) => {}
                None => {
                    kinds.insert(r.family.name.clone(), r.realness);
                }
            }
        }
        let mut ordered: Vec<(Realness, String)> = kinds.into_iter().map(|(n, k)| (k, n)).collect();
        ordered.sort();
        let classes: Vec<FamilyLabel> =
            ordered.iter().enumerate().map(|(index, (_, name))| FamilyLabel { name: name.clone(), index }).collect();
        let class_realness = ordered.iter().map(|(k, _)| *k).collect();
        let lookup: BTreeMap<&str, usize> = classes.iter().map(|c| (c.name.as_str(), c.index)).collect();
        for r in &mut records {
            r.family.index = lookup[r.family.name.as_str()];
        }
        records.sort_by(|a, b| a.path.cmp(&b.path).then_with(|| a.family.name.cmp(&b.family.name)));
        Ok(DatasetManifest { records, classes, class_realness, image_size, seed })
    }

    pub fn empty(image_size: usize, seed: u64) -> Self {
        DatasetManifest { records: Vec::new(), classes: Vec::new(), class_realness: Vec::new(), image_size, seed }
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<SampleRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn classes(&self) -> &[FamilyLabel] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn class_realness(&self, index: usize) -> Option<Realness> {
        self.class_realness.get(index).copied()
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().find(|c| c.name == name).map(|c| c.index)
    }

    pub fn label_name(&self, index: usize) -> Option<&str> {
        self.classes.get(index).map(|c| c.name.as_str())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.family.index).collect()
    }

    /// Record count per class index.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for r in &self.records {
            counts[r.family.index] += 1;
        }
        counts
    }

    /// Records grouped by class index, each group in manifest order.
    fn by_class(&self) -> Vec<Vec<&SampleRecord>> {
        let mut groups = vec![Vec::new(); self.classes.len()];
        for r in &self.records {
            groups[r.family.index].push(r);
        }
        groups
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(file)
    }

    pub fn write_csv_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(["path", "family", "realness", "byte_length"])?;
        for r in &self.records {
            w.write_record([
                r.path.to_string_lossy().as_ref(),
                r.family.name.as_str(),
                &r.realness.to_string(),
                &r.byte_length.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<manifest>", e))?;
        Ok(())
    }

    /// Reads a manifest CSV. Image size and seed are not part of the file.
    pub fn read_csv(path: &Path, image_size: usize, seed: u64) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "family", "realness", "byte_length"] {
            return Err(Error::Config(format!("{}: unexpected manifest header", path.display())));
        }
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row?;
            let byte_length = row[3]
                .parse::<u64>()
                .map_err(|e| Error::Config(format!("{}: bad byte_length: {e}", path.display())))?;
            records.push(SampleRecord::new(&row[0], &row[1], row[2].parse()?, byte_length));
        }
        Self::from_records(records, image_size, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: DatasetManifest,
    pub test: DatasetManifest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// Result of scanning an image corpus.
#[derive(Debug, Clone)]
pub struct CorpusLoad {
    pub manifest: DatasetManifest,
    pub skipped: Vec<SkippedFile>,
}

/// Sorted `(family_name, family_dir)` pairs under a corpus root.
pub(crate) fn family_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !root.is_dir() {
        return Err(Error::Config(format!("corpus directory {} does not exist", root.display())));
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            dirs.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Sorted regular files directly inside `dir`.
pub(crate) fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Scans `root/<family>/<image>` and lists every decodable 8-bit grayscale image.
pub fn load_image_corpus(root: &Path, image_size: usize) -> Result<CorpusLoad> {
    if image_size == 0 {
        return Err(Error::field("image_size", "must be positive"));
    }
    let families = family_dirs(root)?;
    if families.is_empty() {
        return Err(Error::Config(format!("no families found in {}", root.display())));
    }
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (family, dir) in families {
        for path in sorted_files(&dir)? {
            match convert::read_gray_resized(&path, image_size) {
                Ok(_) => {
                    let len = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
                    records.push(SampleRecord::new(path, family.clone(), Realness::Real, len));
                }
                Err(e) => {
                    warn!("skipping {}: {e}", path.display());
                    skipped.push(SkippedFile { path, reason: e.to_string() });
                }
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Empty(format!("no readable images under {}", root.display())));
    }
    Ok(CorpusLoad { manifest: DatasetManifest::from_records(records, image_size, 0)?, skipped })
}

/// Draws exactly `per_class` records from every class.
pub fn stratified_sample(manifest: &DatasetManifest, per_class: usize, seed: u64) -> Result<DatasetManifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(per_class * manifest.num_classes());
    for (class, group) in manifest.by_class().into_iter().enumerate() {
        if group.len() < per_class {
            return Err(Error::NotEnoughSamples {
                family: manifest.classes[class].name.clone(),
                available: group.len(),
                requested: per_class,
            });
        }
        let mut group = group;
        group.shuffle(&mut rng);
        picked.extend(group.into_iter().take(per_class).cloned());
    }
    DatasetManifest::from_records(picked, manifest.image_size, seed)
}

/// Per-class stratified split with `round(train_fraction * N_c)` training records per class.
pub fn split_train_test(manifest: &DatasetManifest, train_fraction: f64, seed: u64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::field("train_fraction", format!("{train_fraction} is not in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, group) in manifest.by_class().into_iter().enumerate() {
        if group.len() < 2 {
            return Err(Error::NotEnoughSamples {
                family: manifest.classes[class].name.clone(),
                available: group.len(),
                requested: 2,
            });
        }
        let n_train = (train_fraction * group.len() as f64).round() as usize;
        let mut group = group;
        group.shuffle(&mut rng);
        for (i, r) in group.into_iter().enumerate() {
            if i < n_train {
                train.push(r.clone());
            } else {
                test.push(r.clone());
            }
        }
    }
    Ok(Split {
        train: DatasetManifest::from_records(train, manifest.image_size, seed)?,
        test: DatasetManifest::from_records(test, manifest.image_size, seed)?,
    })
}

/// Byte-generation constants for one synthetic family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FamilyPattern {
    /// Per-byte slope; odd so the pattern cycles through all byte values.
    pub slope: u8,
    /// Per-sample shift.
    pub shift: u8,
    pub offset: u8,
    /// Probability (in 1/256 units) that a byte is replaced by noise.
    pub noise: u8,
}

impl FamilyPattern {
    pub fn byte(&self, sample: usize, i: usize) -> u8 {
        (self.slope as usize * i + self.shift as usize * sample + self.offset as usize) as u8
    }
}

/// Family patterns derived from the seed; slopes are distinct odd values below 64.
pub fn synth_patterns(families: usize, seed: u64) -> Vec<FamilyPattern> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slopes: Vec<u8> = (1..64u8).step_by(2).collect();
    slopes.shuffle(&mut rng);
    (0..families)
        .map(|f| FamilyPattern {
            // beyond 32 families slopes repeat; offsets still differ
            slope: slopes[f % slopes.len()],
            shift: rng.gen(),
            offset: rng.gen(),
            noise: rng.gen_range(8..24),
        })
        .collect()
}

pub fn synth_family_name(f: usize) -> String {
    format!("fam{f:02}")
}

/// Writes `families × samples_per_family` binary files of `bytes_per_sample`
/// bytes under `out_dir/<family>/sample_<s>.bin`; returns `out_dir`.
pub fn synth_corpus(
    out_dir: &Path,
    families: usize,
    samples_per_family: usize,
    bytes_per_sample: usize,
    seed: u64,
) -> Result<PathBuf> {
    if bytes_per_sample == 0 {
        return Err(Error::field("bytes_per_sample", "must be at least 1"));
    }
    let patterns = synth_patterns(families, seed);
    for (f, pattern) in patterns.iter().enumerate() {
        let dir = out_dir.join(synth_family_name(f));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for s in 0..samples_per_family {
            let mut noise_rng =
                ChaCha8Rng::seed_from_u64(seed ^ ((f as u64) << 32 | s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let bytes: Vec<u8> = (0..bytes_per_sample)
                .map(|i| {
                    let noisy: u8 = noise_rng.gen();
                    let value: u8 = noise_rng.gen();
                    if noisy < pattern.noise {
                        value
                    } else {
                        pattern.byte(s, i)
                    }
                })
                .collect();
            let path = dir.join(format!("sample_{s:04}.bin"));
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(out_dir.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(per_class: &[(&str, usize)]) -> DatasetManifest {
        let mut records = Vec::new();
        for (family, n) in per_class {
            for i in 0..*n {
                records.push(SampleRecord::new(format!("{family}/{i:04}.png"), *family, Realness::Real, 1024));
            }
        }
        DatasetManifest::from_records(records, 32, 0).unwrap()
    }

    #[test]
    fn label_bijection() {
        let m = manifest(&[("Zbot", 2), ("Alureon", 2), ("Rbot", 2)]);
        assert_eq!(m.class_names(), ["Alureon", "Rbot", "Zbot"]);
        for i in 0..m.num_classes() {
            assert_eq!(m.label_index(m.label_name(i).unwrap()), Some(i));
        }
    }

    #[test]
    fn real_classes_sort_before_fake() {
        let records = vec![
            SampleRecord::new("a", "B_fake", Realness::Fake, 1),
            SampleRecord::new("b", "A_fake", Realness::Fake, 1),
            SampleRecord::new("c", "B", Realness::Real, 1),
            SampleRecord::new("d", "A", Realness::Real, 1),
        ];
        let m = DatasetManifest::from_records(records, 32, 0).unwrap();
        assert_eq!(m.class_names(), ["A", "B", "A_fake", "B_fake"]);
    }

    #[test]
    fn mixed_realness_for_one_name_is_rejected() {
        let records =
            vec![SampleRecord::new("a", "A", Realness::Fake, 1), SampleRecord::new("b", "A", Realness::Real, 1)];
        assert!(DatasetManifest::from_records(records, 32, 0).is_err());
    }

    #[test]
    fn stratified_counts() {
        let names: Vec<String> = (0..18).map(|i| format!("f{i:02}")).collect();
        let spec: Vec<(&str, usize)> = names.iter().map(|n| (n.as_str(), 150)).collect();
        let m = manifest(&spec);
        let s = stratified_sample(&m, 100, 7).unwrap();
        assert_eq!(s.len(), 1800);
        assert!(s.class_counts().iter().all(|&c| c == 100));
        assert_eq!(s, stratified_sample(&m, 100, 7).unwrap());
        assert!(stratified_sample(&m, 0, 7).unwrap().is_empty());
    }

    #[test]
    fn stratified_names_short_family() {
        let m = manifest(&[("big", 10), ("tiny", 3)]);
        match stratified_sample(&m, 5, 0) {
            Err(Error::NotEnoughSamples { family, .. }) => assert_eq!(family, "tiny"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_counts_and_partition() {
        let m = manifest(&[("a", 100), ("b", 100)]);
        let split = split_train_test(&m, 0.7, 1).unwrap();
        assert_eq!(split.train.class_counts(), [70, 70]);
        assert_eq!(split.test.class_counts(), [30, 30]);
        let mut all: Vec<_> = split.train.records().iter().chain(split.test.records()).cloned().collect();
        all.sort_by(|a, b| a.path.cmp(&b.path));
        assert_eq!(all, m.records());

        let two = manifest(&[("a", 2), ("b", 2)]);
        let s = split_train_test(&two, 0.5, 0).unwrap();
        assert_eq!(s.train.class_counts(), [1, 1]);
    }

    #[test]
    fn split_seed_changes_membership_not_counts() {
        let m = manifest(&[("a", 100), ("b", 100)]);
        let s1 = split_train_test(&m, 0.7, 1).unwrap();
        let s2 = split_train_test(&m, 0.7, 2).unwrap();
        assert_eq!(s1.train.class_counts(), s2.train.class_counts());
        assert_ne!(s1.train.records(), s2.train.records());
    }

    #[test]
    fn split_rejects_singleton_class_and_bad_fraction() {
        let m = manifest(&[("a", 5), ("b", 1)]);
        assert!(split_train_test(&m, 0.7, 0).is_err());
        let ok = manifest(&[("a", 5)]);
        assert!(split_train_test(&ok, 0.0, 0).is_err());
        assert!(split_train_test(&ok, 1.0, 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = manifest(&[("a", 3), ("b", 2)]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        m.write_csv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("path,family,realness,byte_length\na/0000.png,a,real,1024\n"));
        assert_eq!(DatasetManifest::read_csv(&path, 32, 0).unwrap(), m);
    }

    #[test]
    fn synth_counts_and_determinism() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_corpus(a.path(), 4, 10, 1024, 3).unwrap();
        synth_corpus(b.path(), 4, 10, 1024, 3).unwrap();
        let mut count = 0;
        for (family, dir) in family_dirs(a.path()).unwrap() {
            for file in sorted_files(&dir).unwrap() {
                let bytes = fs::read(&file).unwrap();
                assert_eq!(bytes.len(), 1024);
                let twin = b.path().join(&family).join(file.file_name().unwrap());
                assert_eq!(bytes, fs::read(twin).unwrap());
                count += 1;
            }
        }
        assert_eq!(count, 40);
    }

    #[test]
    fn synth_families_differ() {
        let dir = tempfile::tempdir().unwrap();
        synth_corpus(dir.path(), 4, 2, 1024, 11).unwrap();
        let first: Vec<Vec<u8>> =
            (0..4).map(|f| fs::read(dir.path().join(synth_family_name(f)).join("sample_0000.bin")).unwrap()).collect();
        for i in 0..4 {
            for j in (i + 1)..4 {
                let differing = first[i].iter().zip(&first[j]).filter(|(a, b)| a != b).count();
                assert!(differing * 4 >= 1024, "families {i},{j}: only {differing} differing bytes");
            }
        }
    }

    #[test]
    fn synth_rejects_zero_bytes() {
        let dir = tempfile::tempdir().unwrap();
        assert!(synth_corpus(dir.path(), 1, 1, 0, 0).is_err());
    }
}
