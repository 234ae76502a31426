//! Dataset assembly, storage and verification.
//!
//! A dataset directory holds three files:
//!
//! * `manifest.json`: source and split configuration, vocabulary, image
//!   geometry, per-instance byte offsets into `images.bin`, and SHA-256
//!   checksums of the two data files.
//! * `records.jsonl`: one JSON object per instance (train, then val, then
//!   test), see [`InstanceRecord`].
//! * `images.bin`: raw `u8` RGB frames, row-major `H × W × 3`; instance `i`
//!   occupies bytes `[offset[i], offset[i] + H·W·3)`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::semantics::{self, Caption, Vocabulary};
use crate::worldgen::{
    self, ColorName, Scene, SceneSpec, ShapeKind, WITHHELD_COMBOS, WITHHELD_COUNTS,
};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const IMAGES_FILE: &str = "images.bin";

/// Whole-scene resamples per instance when captions cannot hit the target.
const SCENE_RESAMPLES: usize = 200;
/// Consecutive placement failures tolerated before reporting infeasibility.
const INFEASIBLE_RETRIES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFamily {
    Existential,
    SingleShape,
    Logical,
    Numbers,
    Quantifiers,
    Relational,
    SimpleSpatial,
    RelationalNegation,
    ImplicitRelational,
    Superlatives,
}

impl DatasetFamily {
    pub const ALL: [DatasetFamily; 10] = [
        DatasetFamily::Existential,
        DatasetFamily::SingleShape,
        DatasetFamily::Logical,
        DatasetFamily::Numbers,
        DatasetFamily::Quantifiers,
        DatasetFamily::Relational,
        DatasetFamily::SimpleSpatial,
        DatasetFamily::RelationalNegation,
        DatasetFamily::ImplicitRelational,
        DatasetFamily::Superlatives,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetFamily::Existential => "existential",
            DatasetFamily::SingleShape => "single-shape",
            DatasetFamily::Logical => "logical",
            DatasetFamily::Numbers => "numbers",
            DatasetFamily::Quantifiers => "quantifiers",
            DatasetFamily::Relational => "relational",
            DatasetFamily::SimpleSpatial => "simple-spatial",
            DatasetFamily::RelationalNegation => "relational-negation",
            DatasetFamily::ImplicitRelational => "implicit-relational",
            DatasetFamily::Superlatives => "superlatives",
        }
    }

    /// Fixed object count imposed by the family, if any.
    pub fn fixed_count(self) -> Option<usize> {
        match self {
            DatasetFamily::SingleShape => Some(1),
            DatasetFamily::SimpleSpatial => Some(2),
            _ => None,
        }
    }

    /// Families whose captions talk about at least two objects.
    pub fn needs_pairs(self) -> bool {
        matches!(
            self,
            DatasetFamily::Relational
                | DatasetFamily::SimpleSpatial
                | DatasetFamily::RelationalNegation
                | DatasetFamily::ImplicitRelational
                | DatasetFamily::Superlatives
        )
    }

    /// Specialize a base scene spec to this family.
    pub fn scene_spec(self, base: &SceneSpec) -> SceneSpec {
        let mut spec = base.clone();
        if let Some(n) = self.fixed_count() {
            spec.count_sets = [n].into();
        } else if self.needs_pairs() {
            spec.count_sets.retain(|&n| n >= 2);
        }
        spec
    }
}

impl fmt::Display for DatasetFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = DatasetFamily::ALL.iter().map(|f| f.name()).collect();
                Error::ConfigInvalid(format!(
                    "unknown family '{s}' (expected one of: {})",
                    names.join(", ")
                ))
            })
    }
}

/// Weighted mixture of families; each instance draws its family i.i.d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    pub components: Vec<(DatasetFamily, f64)>,
}

impl MixSpec {
    /// Validate and normalize weights to sum to one.
    pub fn new(components: Vec<(DatasetFamily, f64)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::ConfigInvalid("mix has no components".into()));
        }
        if components.iter().any(|(_, w)| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::ConfigInvalid("mix weights must be positive".into()));
        }
        let total: f64 = components.iter().map(|(_, w)| w).sum();
        Ok(MixSpec {
            components: components.into_iter().map(|(f, w)| (f, w / total)).collect(),
        })
    }

    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let mut u: f64 = rng.gen();
        for (i, (_, w)) in self.components.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        self.components.len() - 1
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DatasetFamily {
        self.components[self.sample_index(rng)].0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Family(DatasetFamily),
    Mix(MixSpec),
}

impl Source {
    fn family_for<R: Rng + ?Sized>(&self, rng: &mut R) -> DatasetFamily {
        match self {
            Source::Family(f) => *f,
            Source::Mix(m) => m.sample(rng),
        }
    }

    pub fn families(&self) -> Vec<DatasetFamily> {
        match self {
            Source::Family(f) => vec![*f],
            Source::Mix(m) => m.components.iter().map(|(f, _)| *f).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown split '{s}'")))
    }
}

/// Split sizes, withholding and image settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub withheld_counts: Vec<usize>,
    pub withheld_combos: Vec<(ShapeKind, ColorName)>,
    /// Fraction of test instances forced to contain a withheld feature.
    pub test_withheld_rate: f64,
    pub max_overlap: f64,
    /// Object width/height range as fractions of the canvas.
    pub object_size: (f64, f64),
    pub seed: u64,
    pub resolution: usize,
    pub supersample: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 20_000,
            val: 2_000,
            test: 2_000,
            withheld_counts: WITHHELD_COUNTS.to_vec(),
            withheld_combos: WITHHELD_COMBOS.to_vec(),
            test_withheld_rate: 0.5,
            max_overlap: 0.25,
            object_size: (0.1, 0.25),
            seed: 0,
            resolution: 64,
            supersample: 2,
        }
    }
}

impl SplitSpec {
    /// The full-size configuration: 500k / 10k / 10k.
    pub fn full_scale() -> Self {
        SplitSpec {
            train: 500_000,
            val: 10_000,
            test: 10_000,
            ..SplitSpec::default()
        }
    }

    pub fn sizes(train: usize, val: usize, test: usize) -> Self {
        SplitSpec {
            train,
            val,
            test,
            ..SplitSpec::default()
        }
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        for split in Split::ALL {
            if self.size(split) < 2 {
                return bad(format!("{split} size must be at least 2"));
            }
        }
        if !(0.0..=1.0).contains(&self.test_withheld_rate) {
            return bad("test_withheld_rate must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return bad("max_overlap must lie in [0, 1]".into());
        }
        let (lo, hi) = self.object_size;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return bad("object_size must satisfy 0 < min <= max <= 0.5".into());
        }
        if self.resolution < 16 || self.supersample < 1 {
            return bad("resolution must be >= 16 and supersample >= 1".into());
        }
        Ok(())
    }

    /// Base scene spec for train/val (no withheld features).
    pub fn base_scene_spec(&self) -> SceneSpec {
        let mut spec = SceneSpec {
            max_overlap: self.max_overlap,
            withheld_combos: self.withheld_combos.clone(),
            min_size: self.object_size.0,
            max_size: self.object_size.1,
            ..SceneSpec::default()
        };
        spec.count_sets.retain(|c| !self.withheld_counts.contains(c));
        spec
    }

    fn injected_test_count(&self) -> usize {
        (self.test_withheld_rate * self.test as f64).round() as usize
    }
}

/// One stored instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub index: usize,
    pub split: Split,
    pub family: DatasetFamily,
    pub label: u8,
    pub caption_surface: String,
    pub paraphrase: u8,
    pub caption_ast: Caption,
    pub token_ids: Vec<u32>,
    pub scene: Scene,
    pub seed: u64,
    /// Scene contains a withheld count or combination.
    pub withheld: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRange {
    pub start: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checksums {
    pub records_sha256: String,
    pub images_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub source: Source,
    pub split_spec: SplitSpec,
    pub scene_spec: SceneSpec,
    pub vocabulary: Vec<String>,
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    pub splits: BTreeMap<Split, SplitRange>,
    pub image_offsets: Vec<u64>,
    pub checksums: Checksums,
}

impl Manifest {
    pub fn frame_len(&self) -> usize {
        self.image_height * self.image_width * self.image_channels
    }
}

/// Deterministic sub-seed for `(master, stream, index)` (splitmix64 finalizer).
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// True if the scene has a withheld object count or (shape, color) pair.
pub fn has_withheld_feature(scene: &Scene, split: &SplitSpec) -> bool {
    split.withheld_counts.contains(&scene.len()) || scene.has_combo(&split.withheld_combos)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Injection {
    Count(usize),
    Combo(ShapeKind, ColorName),
}

fn choose_injection<R: Rng + ?Sized>(
    family: DatasetFamily,
    split: &SplitSpec,
    rng: &mut R,
) -> Injection {
    let counts: Vec<usize> = if family.fixed_count().is_some() {
        Vec::new()
    } else {
        split
            .withheld_counts
            .iter()
            .copied()
            .filter(|&n| !family.needs_pairs() || n >= 2)
            .collect()
    };
    let options = counts.len() + split.withheld_combos.len();
    let pick = rng.gen_range(0..options.max(1));
    if pick < counts.len() {
        Injection::Count(counts[pick])
    } else {
        let (s, c) = split.withheld_combos[pick - counts.len()];
        Injection::Combo(s, c)
    }
}

struct Generated {
    record: InstanceRecord,
    image: Vec<u8>,
}

fn generate_instance(
    source: &Source,
    split_spec: &SplitSpec,
    base: &SceneSpec,
    split: Split,
    index: usize,
    global_index: usize,
    inject: bool,
) -> Result<Generated> {
    let seed = derive_seed(split_spec.seed, split.stream(), index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let family = source.family_for(&mut rng);
    let target = index % 2 == 0;
    let mut spec = family.scene_spec(base);
    if inject && !(split_spec.withheld_counts.is_empty() && split_spec.withheld_combos.is_empty()) {
        match choose_injection(family, split_spec, &mut rng) {
            Injection::Count(n) => {
                spec.count_sets = [n].into();
                spec.allow_withheld_counts = true;
            }
            Injection::Combo(s, c) => spec.required = vec![(s, c)],
        }
    }
    let wrap = |e: Error| Error::FamilyGeneration {
        family: family.to_string(),
        source: Box::new(e),
    };
    let mut infeasible = 0;
    for _ in 0..SCENE_RESAMPLES {
        let scene = match worldgen::sample_scene(&spec, &mut rng) {
            Ok(s) => s,
            Err(e @ Error::SceneInfeasible { .. }) => {
                infeasible += 1;
                if infeasible >= INFEASIBLE_RETRIES {
                    return Err(wrap(e));
                }
                continue;
            }
            Err(e) => return Err(wrap(e)),
        };
        let caption = match semantics::sample_caption(family, &scene, target, &mut rng) {
            Ok(c) => c,
            Err(Error::SceneUnusable { .. }) => continue,
            Err(e) => return Err(wrap(e)),
        };
        assert_eq!(
            semantics::evaluate(&caption, &scene).as_bool(),
            Some(target),
            "sampled caption must recheck to its target"
        );
        let realization = semantics::realize(&caption, &mut rng);
        let vocab = semantics::build_vocabulary();
        let image = worldgen::rasterize(&scene, split_spec.resolution, split_spec.supersample);
        let withheld = has_withheld_feature(&scene, split_spec);
        return Ok(Generated {
            record: InstanceRecord {
                index: global_index,
                split,
                family,
                label: target as u8,
                token_ids: vocab.encode(&realization.surface),
                caption_surface: realization.surface,
                paraphrase: realization.paraphrase,
                caption_ast: caption,
                scene,
                seed,
                withheld,
            },
            image: image.to_bytes(),
        });
    }
    Err(wrap(Error::SceneUnusable {
        family: family.to_string(),
        attempts: SCENE_RESAMPLES,
    }))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Generate and persist a dataset under `out`, returning the directory.
pub fn build_dataset(source: &Source, split_spec: &SplitSpec, out: &Path) -> Result<PathBuf> {
    split_spec.validate()?;
    if let Source::Mix(m) = source {
        MixSpec::new(m.components.clone())?;
    }
    let base = split_spec.base_scene_spec();
    for family in source.families() {
        family.scene_spec(&base).validate()?;
    }

    // test instances that must exhibit a withheld feature
    let mut inject = vec![false; split_spec.test];
    let mut order: Vec<usize> = (0..split_spec.test).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(split_spec.seed, 4, 0)));
    for &i in order.iter().take(split_spec.injected_test_count()) {
        inject[i] = true;
    }

    let mut jobs = Vec::new();
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let start = jobs.len();
        for i in 0..split_spec.size(split) {
            jobs.push((split, i, split == Split::Test && inject[i]));
        }
        splits.insert(
            split,
            SplitRange {
                start,
                count: split_spec.size(split),
            },
        );
    }
    let generated: Vec<Generated> = jobs
        .par_iter()
        .enumerate()
        .map(|(g, &(split, i, inj))| generate_instance(source, split_spec, &base, split, i, g, inj))
        .collect::<Result<_>>()?;

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let frame = split_spec.resolution * split_spec.resolution * 3;
    let mut records = Vec::new();
    let mut images = Vec::with_capacity(generated.len() * frame);
    let mut offsets = Vec::with_capacity(generated.len());
    for g in &generated {
        serde_json::to_writer(&mut records, &g.record)?;
        records.push(b'\n');
        offsets.push(images.len() as u64);
        images.extend_from_slice(&g.image);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        source: source.clone(),
        split_spec: split_spec.clone(),
        scene_spec: base,
        vocabulary: semantics::build_vocabulary().tokens().to_vec(),
        image_height: split_spec.resolution,
        image_width: split_spec.resolution,
        image_channels: 3,
        splits,
        image_offsets: offsets,
        checksums: Checksums {
            records_sha256: sha256_hex(&records),
            images_sha256: sha256_hex(&images),
        },
    };
    write_file(&out.join(RECORDS_FILE), &records)?;
    write_file(&out.join(IMAGES_FILE), &images)?;
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_file(&out.join(MANIFEST_FILE), &json)?;
    Ok(out.to_path_buf())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// A dataset loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub records: Vec<InstanceRecord>,
    images: Vec<u8>,
    raw_records: Vec<u8>,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest_path = root.join(MANIFEST_FILE);
        let manifest: Manifest = serde_json::from_slice(
            &fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
        )?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::ConfigInvalid(format!(
                "unsupported dataset format version {}",
                manifest.format_version
            )));
        }
        let records_path = root.join(RECORDS_FILE);
        let raw_records = fs::read(&records_path).map_err(|e| Error::io(&records_path, e))?;
        let images_path = root.join(IMAGES_FILE);
        let images = fs::read(&images_path).map_err(|e| Error::io(&images_path, e))?;
        let vocab_len = manifest.vocabulary.len() as u32;
        let frame = manifest.frame_len();
        let mut records = Vec::new();
        for (i, line) in BufReader::new(raw_records.as_slice()).lines().enumerate() {
            let line = line.map_err(|e| Error::CorruptRecord {
                index: i,
                detail: e.to_string(),
            })?;
            let rec: InstanceRecord =
                serde_json::from_str(&line).map_err(|e| Error::CorruptRecord {
                    index: i,
                    detail: e.to_string(),
                })?;
            let corrupt = |detail: &str| Error::CorruptRecord {
                index: i,
                detail: detail.to_string(),
            };
            if rec.index != i {
                return Err(corrupt("index out of sequence"));
            }
            if rec.label > 1 {
                return Err(corrupt("label must be 0 or 1"));
            }
            if rec.token_ids.iter().any(|&t| t >= vocab_len) {
                return Err(corrupt("token id outside vocabulary"));
            }
            match manifest.image_offsets.get(i) {
                Some(&o) if o as usize + frame <= images.len() => {}
                _ => return Err(corrupt("image offset out of range")),
            }
            records.push(rec);
        }
        if records.len() != manifest.image_offsets.len() {
            return Err(Error::CorruptRecord {
                index: records.len(),
                detail: "record count differs from manifest".into(),
            });
        }
        Ok(Dataset {
            root,
            manifest,
            records,
            images,
            raw_records,
        })
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_tokens(self.manifest.vocabulary.clone())
    }

    pub fn split(&self, split: Split) -> &[InstanceRecord] {
        match self.manifest.splits.get(&split) {
            Some(r) => &self.records[r.start..r.start + r.count],
            None => &[],
        }
    }

    /// Raw HWC bytes of the instance with the given global index.
    pub fn image(&self, index: usize) -> &[u8] {
        let o = self.manifest.image_offsets[index] as usize;
        &self.images[o..o + self.manifest.frame_len()]
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.manifest.image_height, self.manifest.image_width)
    }

    /// Gather the given global indices into a model batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let (h, w) = self.image_size();
        let n = indices.len();
        let max_len = indices
            .iter()
            .map(|&i| self.records[i].token_ids.len())
            .max()
            .unwrap_or(0);
        let mut images = vec![0f32; n * 3 * h * w];
        let mut tokens = vec![semantics::PAD_ID; n * max_len];
        let mut lengths = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for (b, &idx) in indices.iter().enumerate() {
            let src = self.image(idx);
            let dst = &mut images[b * 3 * h * w..(b + 1) * 3 * h * w];
            for p in 0..h * w {
                for c in 0..3 {
                    dst[c * h * w + p] = src[p * 3 + c] as f32 / 255.0;
                }
            }
            let rec = &self.records[idx];
            tokens[b * max_len..b * max_len + rec.token_ids.len()].copy_from_slice(&rec.token_ids);
            lengths.push(rec.token_ids.len());
            labels.push(rec.label as usize);
        }
        Batch {
            images,
            image_height: h,
            image_width: w,
            tokens,
            max_len,
            lengths,
            labels,
            indices: indices.to_vec(),
        }
    }

    /// Iterate over shuffled batches of one split. With `epochs = None` the
    /// stream never ends and every batch is full.
    pub fn iterate_batches(
        &self,
        split: Split,
        batch_size: usize,
        seed: u64,
        epochs: Option<usize>,
    ) -> BatchIter<'_> {
        assert!(batch_size >= 1, "batch_size must be positive");
        let range = self.manifest.splits.get(&split);
        let pool: Vec<usize> = match range {
            Some(r) => (r.start..r.start + r.count).collect(),
            None => Vec::new(),
        };
        BatchIter {
            dataset: self,
            pool,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            epochs,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// A padded model batch. Images are `N × 3 × H × W` in `[0, 1]`; tokens are
/// `N × max_len`, right-padded with id 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Vec<f32>,
    pub image_height: usize,
    pub image_width: usize,
    pub tokens: Vec<u32>,
    pub max_len: usize,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Batch {
    /// Stack batches of equal image size, re-padding tokens to the longest.
    pub fn concat(parts: &[Batch]) -> Batch {
        let max_len = parts.iter().map(|b| b.max_len).max().unwrap_or(0);
        let first = parts.first();
        let mut out = Batch {
            images: Vec::new(),
            image_height: first.map_or(0, |b| b.image_height),
            image_width: first.map_or(0, |b| b.image_width),
            tokens: Vec::new(),
            max_len,
            lengths: Vec::new(),
            labels: Vec::new(),
            indices: Vec::new(),
        };
        for b in parts {
            assert_eq!((b.image_height, b.image_width), (out.image_height, out.image_width));
            out.images.extend_from_slice(&b.images);
            for row in 0..b.len() {
                out.tokens.extend_from_slice(&b.tokens[row * b.max_len..(row + 1) * b.max_len]);
                out.tokens.extend(std::iter::repeat(semantics::PAD_ID).take(max_len - b.max_len));
            }
            out.lengths.extend_from_slice(&b.lengths);
            out.labels.extend_from_slice(&b.labels);
            out.indices.extend_from_slice(&b.indices);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    pool: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    epochs: Option<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchIter<'_> {
    /// Restrict the stream to the given global indices.
    pub fn with_pool(mut self, pool: Vec<usize>) -> Self {
        self.pool = pool;
        self.order.clear();
        self.cursor = 0;
        self
    }

    fn reshuffle(&mut self) {
        self.order = self.pool.clone();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    /// Next global instance index in the stream.
    pub fn next_index(&mut self) -> Option<usize> {
        if self.pool.is_empty() {
            return None;
        }
        if self.cursor >= self.order.len() {
            if !self.order.is_empty() {
                self.epoch += 1;
            }
            if self.epochs.is_some_and(|e| self.epoch >= e) {
                return None;
            }
            self.reshuffle();
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        Some(i)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let mut idx = Vec::with_capacity(self.batch_size);
        while idx.len() < self.batch_size {
            // epoch mode ends batches at the epoch boundary
            if self.epochs.is_some() && !idx.is_empty() && self.cursor >= self.order.len() {
                break;
            }
            match self.next_index() {
                Some(i) => idx.push(i),
                None => break,
            }
        }
        if idx.is_empty() {
            None
        } else {
            Some(self.dataset.batch(&idx))
        }
    }
}

// ---------------------------------------------------------------------------
// Verification

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    Checksum,
    LabelMismatch,
    UndefinedTruth,
    SurfaceMismatch,
    TokenMismatch,
    ImageMismatch,
    Balance,
    WithheldInTraining,
    WithheldRate,
    Overlap,
    FamilyConstraint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub count: usize,
    pub positives: usize,
    pub withheld: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub path: PathBuf,
    pub instances: usize,
    pub splits: BTreeMap<Split, SplitSummary>,
    pub violations: Vec<Violation>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "dataset {}: {} instances", self.path.display(), self.instances)?;
        for (split, s) in &self.splits {
            writeln!(
                f,
                "  {split:<5} {:>7} instances, {:>7} true, {:>7} false, {:>6} withheld",
                s.count,
                s.positives,
                s.count - s.positives,
                s.withheld
            )?;
        }
        if self.violations.is_empty() {
            write!(f, "  ok: no violations")
        } else {
            writeln!(f, "  {} violation(s):", self.violations.len())?;
            for v in self.violations.iter().take(50) {
                match v.index {
                    Some(i) => writeln!(f, "    [{:?}] #{i}: {}", v.kind, v.detail)?,
                    None => writeln!(f, "    [{:?}] {}", v.kind, v.detail)?,
                }
            }
            Ok(())
        }
    }
}

/// Re-derive labels, tokens, surfaces and pixels from the stored scenes and
/// captions, and check balance, withholding, overlap and checksums.
pub fn verify_dataset(path: impl AsRef<Path>) -> Result<VerifyReport> {
    let ds = Dataset::open(path.as_ref())?;
    Ok(verify_loaded(&ds))
}

pub fn verify_loaded(ds: &Dataset) -> VerifyReport {
    let m = &ds.manifest;
    let spec = &m.split_spec;
    let mut violations = Vec::new();
    let v = |kind, index: Option<usize>, detail: String| Violation {
        kind,
        index,
        detail,
    };

    if sha256_hex(&ds.raw_records) != m.checksums.records_sha256 {
        violations.push(v(ViolationKind::Checksum, None, "records.jsonl checksum differs".into()));
    }
    if sha256_hex(&ds.images) != m.checksums.images_sha256 {
        violations.push(v(ViolationKind::Checksum, None, "images.bin checksum differs".into()));
    }
    let vocab = match ds.vocabulary() {
        Ok(v) => v,
        Err(e) => {
            violations.push(v(ViolationKind::TokenMismatch, None, e.to_string()));
            semantics::build_vocabulary()
        }
    };

    let per_record: Vec<Vec<Violation>> = ds
        .records
        .par_iter()
        .map(|rec| {
            let mut out = Vec::new();
            let i = Some(rec.index);
            match semantics::evaluate(&rec.caption_ast, &rec.scene).as_bool() {
                Some(t) if t as u8 == rec.label => {}
                Some(t) => out.push(v(
                    ViolationKind::LabelMismatch,
                    i,
                    format!("stored label {} but caption evaluates to {t}", rec.label),
                )),
                None => out.push(v(ViolationKind::UndefinedTruth, i, "caption has no truth value".into())),
            }
            if semantics::realize_with(&rec.caption_ast, rec.paraphrase) != rec.caption_surface {
                out.push(v(ViolationKind::SurfaceMismatch, i, rec.caption_surface.clone()));
            }
            if vocab.encode(&rec.caption_surface) != rec.token_ids {
                out.push(v(ViolationKind::TokenMismatch, i, rec.caption_surface.clone()));
            }
            let image = worldgen::rasterize(&rec.scene, m.image_height, spec.supersample).to_bytes();
            if image != ds.image(rec.index) {
                out.push(v(ViolationKind::ImageMismatch, i, "pixels differ from re-render".into()));
            }
            let overlap = rec.scene.max_overlap();
            if overlap > spec.max_overlap {
                out.push(v(
                    ViolationKind::Overlap,
                    i,
                    format!("pair overlap {overlap:.4} exceeds {}", spec.max_overlap),
                ));
            }
            if let Some(n) = rec.family.fixed_count() {
                if rec.scene.len() != n {
                    out.push(v(
                        ViolationKind::FamilyConstraint,
                        i,
                        format!("{} requires {n} objects, found {}", rec.family, rec.scene.len()),
                    ));
                }
            }
            let withheld = has_withheld_feature(&rec.scene, spec);
            if withheld != rec.withheld {
                out.push(v(ViolationKind::WithheldRate, i, "withheld flag disagrees with scene".into()));
            }
            if withheld && rec.split != Split::Test {
                out.push(v(
                    ViolationKind::WithheldInTraining,
                    i,
                    format!("{} scene has a withheld count or combination", rec.split),
                ));
            }
            out
        })
        .collect();
    violations.extend(per_record.into_iter().flatten());

    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let recs = ds.split(split);
        let positives = recs.iter().filter(|r| r.label == 1).count();
        let withheld = recs.iter().filter(|r| r.withheld).count();
        let negatives = recs.len() - positives;
        if positives.abs_diff(negatives) > 1 {
            violations.push(v(
                ViolationKind::Balance,
                None,
                format!("{split}: {positives} true vs {negatives} false"),
            ));
        }
        if split == Split::Test && !recs.is_empty() {
            let rate = withheld as f64 / recs.len() as f64;
            let tol = 0.02 + 0.5 / recs.len() as f64;
            if (rate - spec.test_withheld_rate).abs() > tol {
                violations.push(v(
                    ViolationKind::WithheldRate,
                    None,
                    format!("test withheld rate {rate:.4} vs configured {}", spec.test_withheld_rate),
                ));
            }
        }
        splits.insert(
            split,
            SplitSummary {
                count: recs.len(),
                positives,
                withheld,
            },
        );
    }
    VerifyReport {
        path: ds.root.clone(),
        instances: ds.records.len(),
        splits,
        violations,
    }
}
