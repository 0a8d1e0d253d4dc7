//! Synthetic primary/auxiliary task pair built on shared latent units.
//!
//! Every sample has a latent binary pattern `z` over `J` units. Features are
//! `z M + group_offset + noise` for a fixed mixing matrix `M`. Primary
//! samples are labelled with `z` itself. Auxiliary samples get the class of
//! the prototype nearest to `z` (Hamming distance, lowest index on ties).
//! Ambiguous auxiliary samples get a label drawn from the class prior,
//! independent of their units. Their features add one shared cue vector,
//! which marks them as ambiguous but carries no label information.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{Shape, Tensor};
use crate::batch::{AuxBatch, PrimaryBatch};
use crate::error::{Error, Result};

/// A `J`-bit unit pattern, serialized as a string such as `"000101000000"`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Prototype(pub Vec<bool>);

impl Prototype {
    pub fn from_active(num_units: usize, active: &[usize]) -> Self {
        let mut bits = vec![false; num_units];
        for &a in active {
            bits[a] = true;
        }
        Self(bits)
    }

    pub fn hamming(&self, z: &[bool]) -> usize {
        self.0.iter().zip(z).filter(|(a, b)| a != b).count()
    }
}

impl fmt::Display for Prototype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for Prototype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Prototype({self})")
    }
}

impl Serialize for Prototype {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Prototype {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_bits(&s).map(Prototype).map_err(serde::de::Error::custom)
    }
}

fn parse_bits(s: &str) -> std::result::Result<Vec<bool>, String> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(format!("invalid bit {other:?} in {s:?}")),
        })
        .collect()
}

/// Seven expression-like prototypes over twelve units laid out as BP4D's
/// AUs 1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24.
pub fn default_prototypes() -> Vec<Prototype> {
    let p = |a: &[usize]| Prototype::from_active(12, a);
    vec![
        p(&[]),              // neutral
        p(&[3, 6]),          // happy: 6 + 12
        p(&[0, 2, 8]),       // sad: 1 + 4 + 15
        p(&[0, 1]),          // surprise: 1 + 2
        p(&[0, 1, 2, 4]),    // fear: 1 + 2 + 4 + 7
        p(&[2, 4, 10, 11]),  // anger: 4 + 7 + 23 + 24
        p(&[5, 9]),          // disgust: 10 + 17
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    /// J: latent units, one primary label each.
    pub num_labels: usize,
    /// Q: auxiliary classes, one per prototype.
    pub num_classes: usize,
    pub input_dim: usize,
    pub n_primary: usize,
    pub n_aux: usize,
    /// Size of the held-out primary evaluation set.
    pub n_test: usize,
    pub ambiguous_fraction: f64,
    pub noise_sigma: f64,
    pub prototypes: Vec<Prototype>,
    /// Groups ("subjects") of the primary training data.
    pub n_groups: usize,
    /// Groups of the auxiliary data, disjoint from the primary groups.
    pub n_aux_groups: usize,
    /// Groups of the evaluation set, disjoint from both.
    pub n_test_groups: usize,
    /// Standard deviation of each coordinate of a group offset.
    pub group_offset_scale: f64,
    /// Scale of the cue vector added to every ambiguous auxiliary sample.
    /// The cue is shared by all classes, so it flags ambiguity without
    /// revealing the label.
    pub cue_scale: f64,
    /// Per-unit activation probabilities are drawn uniformly from this range.
    pub unit_prob_range: (f64, f64),
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            num_labels: 12,
            num_classes: 7,
            input_dim: 32,
            n_primary: 2000,
            n_aux: 4000,
            n_test: 2000,
            ambiguous_fraction: 0.0,
            noise_sigma: 0.5,
            prototypes: default_prototypes(),
            n_groups: 10,
            n_aux_groups: 40,
            n_test_groups: 10,
            group_offset_scale: 0.5,
            cue_scale: 1.0,
            unit_prob_range: (0.1, 0.4),
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_labels == 0 || self.num_classes < 2 || self.input_dim == 0 {
            return err("task needs at least one label, two classes and one feature".into());
        }
        if self.prototypes.len() != self.num_classes {
            return err(format!("{} prototypes for {} classes", self.prototypes.len(), self.num_classes));
        }
        if let Some(p) = self.prototypes.iter().find(|p| p.0.len() != self.num_labels) {
            return err(format!("prototype {p} does not have {} units", self.num_labels));
        }
        let distinct: BTreeSet<String> = self.prototypes.iter().map(|p| p.to_string()).collect();
        if distinct.len() != self.prototypes.len() {
            return err("prototype rows must be pairwise distinct".into());
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return err(format!("ambiguous_fraction {} outside [0, 1]", self.ambiguous_fraction));
        }
        if self.noise_sigma < 0.0 || self.group_offset_scale < 0.0 || self.cue_scale < 0.0 {
            return err("noise, offset and cue scales must be non-negative".into());
        }
        let (lo, hi) = self.unit_prob_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return err(format!("unit_prob_range ({lo}, {hi}) is not a sub-interval of [0, 1]"));
        }
        for (name, groups, n) in [
            ("primary", self.n_groups, self.n_primary),
            ("auxiliary", self.n_aux_groups, self.n_aux),
            ("test", self.n_test_groups, self.n_test),
        ] {
            if groups == 0 && n > 0 {
                return err(format!("{name} data needs at least one group"));
            }
            if groups > n {
                return err(format!("{groups} {name} groups for only {n} samples"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Primary,
    Aux,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Primary => "primary",
            Task::Aux => "aux",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Split::Train, Split::Val, Split::Test].into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SampleLabel {
    Primary(Vec<bool>),
    Aux(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: u64,
    pub group: u32,
    pub split: Split,
    pub ambiguous: bool,
    pub features: Vec<f64>,
    pub label: SampleLabel,
}

impl LabeledSample {
    pub fn task(&self) -> Task {
        match self.label {
            SampleLabel::Primary(_) => Task::Primary,
            SampleLabel::Aux(_) => Task::Aux,
        }
    }
}

/// Samples of one task. Counts how many samples have been gathered into
/// batches, which lets tests prove a trainer never touched a dataset.
#[derive(Debug)]
pub struct Dataset {
    task: Task,
    input_dim: usize,
    num_labels: usize,
    num_classes: usize,
    samples: Vec<LabeledSample>,
    reads: AtomicU64,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self {
            task: self.task,
            input_dim: self.input_dim,
            num_labels: self.num_labels,
            num_classes: self.num_classes,
            samples: self.samples.clone(),
            reads: AtomicU64::new(0),
        }
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.task == other.task
            && self.input_dim == other.input_dim
            && self.num_labels == other.num_labels
            && self.num_classes == other.num_classes
            && self.samples == other.samples
    }
}

impl Dataset {
    /// `num_labels` is J for primary data; `num_classes` is Q for auxiliary
    /// data. The other count is ignored.
    pub fn new(
        task: Task,
        input_dim: usize,
        num_labels: usize,
        num_classes: usize,
        samples: Vec<LabeledSample>,
    ) -> Result<Self> {
        for s in &samples {
            if s.task() != task {
                return Err(Error::Data(format!("sample {} is not a {} sample", s.id, task.name())));
            }
            if s.features.len() != input_dim {
                return Err(Error::Data(format!(
                    "sample {} has {} features, expected {input_dim}",
                    s.id,
                    s.features.len()
                )));
            }
            match &s.label {
                SampleLabel::Primary(bits) if bits.len() != num_labels => {
                    return Err(Error::Data(format!("sample {} has {} labels, expected {num_labels}", s.id, bits.len())));
                }
                SampleLabel::Aux(c) if *c >= num_classes => {
                    return Err(Error::Data(format!("sample {} has class {c} of {num_classes}", s.id)));
                }
                _ => {}
            }
            if s.ambiguous && task != Task::Aux {
                return Err(Error::Data(format!("primary sample {} is flagged ambiguous", s.id)));
            }
        }
        Ok(Self { task, input_dim, num_labels, num_classes, samples, reads: AtomicU64::new(0) })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn ids(&self) -> BTreeSet<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }

    /// Number of samples gathered into batches so far.
    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    fn gather(&self, indices: &[usize]) -> (Tensor, Vec<u64>) {
        self.reads.fetch_add(indices.len() as u64, Ordering::Relaxed);
        let mut data = Vec::with_capacity(indices.len() * self.input_dim);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.samples[i].features);
            ids.push(self.samples[i].id);
        }
        (Tensor::new(Shape::new(indices.len(), self.input_dim), data), ids)
    }

    pub fn primary_batch(&self, indices: &[usize]) -> Result<PrimaryBatch> {
        if self.task != Task::Primary {
            return Err(Error::Data("primary batch requested from auxiliary data".into()));
        }
        let (features, ids) = self.gather(indices);
        let mut labels = Tensor::zeros(Shape::new(indices.len(), self.num_labels));
        for (r, &i) in indices.iter().enumerate() {
            if let SampleLabel::Primary(bits) = &self.samples[i].label {
                for (j, &b) in bits.iter().enumerate() {
                    labels.set(r, j, if b { 1.0 } else { 0.0 });
                }
            }
        }
        PrimaryBatch::new(features, labels, ids)
    }

    pub fn aux_batch(&self, indices: &[usize]) -> Result<AuxBatch> {
        if self.task != Task::Aux {
            return Err(Error::Data("auxiliary batch requested from primary data".into()));
        }
        let (features, ids) = self.gather(indices);
        let classes: Vec<usize> = indices
            .iter()
            .map(|&i| match self.samples[i].label {
                SampleLabel::Aux(c) => c,
                SampleLabel::Primary(_) => unreachable!(),
            })
            .collect();
        AuxBatch::from_class_ids(features, &classes, self.num_classes, ids)
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Multi-hot label matrix of a primary dataset.
    pub fn label_matrix(&self) -> Tensor {
        let mut labels = Tensor::zeros(Shape::new(self.len(), self.num_labels));
        for (r, s) in self.samples.iter().enumerate() {
            if let SampleLabel::Primary(bits) = &s.label {
                for (j, &b) in bits.iter().enumerate() {
                    labels.set(r, j, if b { 1.0 } else { 0.0 });
                }
            }
        }
        labels
    }

    pub fn feature_matrix(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.len() * self.input_dim);
        for s in &self.samples {
            data.extend_from_slice(&s.features);
        }
        Tensor::new(Shape::new(self.len(), self.input_dim), data)
    }

    fn with_samples(&self, samples: Vec<LabeledSample>) -> Self {
        Self {
            task: self.task,
            input_dim: self.input_dim,
            num_labels: self.num_labels,
            num_classes: self.num_classes,
            samples,
            reads: AtomicU64::new(0),
        }
    }
}

/// Fixed random structure shared by every sample of one task spec.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub unit_probs: Vec<f64>,
    /// `J x D_in`; row `j` is unit `j`'s feature direction.
    pub mixing: Tensor,
    /// Offsets of every group id, primary groups first, then auxiliary, then test.
    pub offsets: Vec<Vec<f64>>,
    /// Added to the features of ambiguous auxiliary samples.
    pub cue: Vec<f64>,
}

const WORLD_STREAM: u64 = 0;
const PRIMARY_STREAM: u64 = 1;
const AUX_STREAM: u64 = 2;
const TEST_STREAM: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

impl SyntheticWorld {
    pub fn new(spec: &TaskSpec) -> Self {
        let mut rng = stream_rng(spec.seed, WORLD_STREAM);
        let (lo, hi) = spec.unit_prob_range;
        let unit_probs = (0..spec.num_labels).map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo }).collect();
        let mixing = Tensor::new(
            Shape::new(spec.num_labels, spec.input_dim),
            gaussian_vec(&mut rng, spec.num_labels * spec.input_dim, 1.0),
        );
        let total_groups = spec.n_groups + spec.n_aux_groups + spec.n_test_groups;
        let offsets = (0..total_groups).map(|_| gaussian_vec(&mut rng, spec.input_dim, spec.group_offset_scale)).collect();
        let cue = gaussian_vec(&mut rng, spec.input_dim, spec.cue_scale);
        Self { unit_probs, mixing, offsets, cue }
    }

    pub fn draw_pattern<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<bool> {
        self.unit_probs.iter().map(|&p| rng.random_bool(p)).collect()
    }

    /// `z M + offset`, without noise.
    pub fn clean_features(&self, z: &[bool], group: usize) -> Vec<f64> {
        let d = self.mixing.cols();
        let mut x = self.offsets[group].clone();
        for (j, &on) in z.iter().enumerate() {
            if on {
                for (xi, m) in x.iter_mut().zip(&self.mixing.data()[j * d..(j + 1) * d]) {
                    *xi += m;
                }
            }
        }
        x
    }
}

/// Class of the prototype nearest to `z`; ties go to the lowest index.
pub fn nearest_prototype(prototypes: &[Prototype], z: &[bool]) -> usize {
    let mut best = (usize::MAX, 0);
    for (c, p) in prototypes.iter().enumerate() {
        let d = p.hamming(z);
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

fn add_noise(x: &mut [f64], rng: &mut ChaCha8Rng, sigma: f64) {
    if sigma > 0.0 {
        for v in x.iter_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn primary_samples(
    spec: &TaskSpec,
    world: &SyntheticWorld,
    n: usize,
    groups: std::ops::Range<usize>,
    first_id: u64,
    split: Split,
    rng: &mut ChaCha8Rng,
) -> Vec<LabeledSample> {
    let n_groups = groups.len();
    (0..n)
        .map(|i| {
            let group = groups.start + i % n_groups;
            let z = world.draw_pattern(rng);
            let mut features = world.clean_features(&z, group);
            add_noise(&mut features, rng, spec.noise_sigma);
            LabeledSample {
                id: first_id + i as u64,
                group: group as u32,
                split,
                ambiguous: false,
                features,
                label: SampleLabel::Primary(z),
            }
        })
        .collect()
}

/// Primary and auxiliary training sets for `spec`. A pure function of `spec`.
pub fn generate(spec: &TaskSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let world = SyntheticWorld::new(spec);

    let mut rng = stream_rng(spec.seed, PRIMARY_STREAM);
    let primary = primary_samples(spec, &world, spec.n_primary, 0..spec.n_groups, 0, Split::Train, &mut rng);

    let mut rng = stream_rng(spec.seed, AUX_STREAM);
    let n_ambiguous = (spec.ambiguous_fraction * spec.n_aux as f64).round() as usize;
    let mut ambiguous = vec![false; spec.n_aux];
    ambiguous[..n_ambiguous].iter_mut().for_each(|a| *a = true);
    ambiguous.shuffle(&mut rng);
    let first_id = spec.n_primary as u64;
    let aux = (0..spec.n_aux)
        .map(|i| {
            let group = spec.n_groups + i % spec.n_aux_groups;
            let z = world.draw_pattern(&mut rng);
            let (mut features, class) = if ambiguous[i] {
                let unrelated = world.draw_pattern(&mut rng);
                let class = nearest_prototype(&spec.prototypes, &unrelated);
                let mut x = world.clean_features(&z, group);
                for (xi, c) in x.iter_mut().zip(&world.cue) {
                    *xi += c;
                }
                (x, class)
            } else {
                (world.clean_features(&z, group), nearest_prototype(&spec.prototypes, &z))
            };
            add_noise(&mut features, &mut rng, spec.noise_sigma);
            LabeledSample {
                id: first_id + i as u64,
                group: group as u32,
                split: Split::Train,
                ambiguous: ambiguous[i],
                features,
                label: SampleLabel::Aux(class),
            }
        })
        .collect();

    Ok((
        Dataset::new(Task::Primary, spec.input_dim, spec.num_labels, spec.num_classes, primary)?,
        Dataset::new(Task::Aux, spec.input_dim, spec.num_labels, spec.num_classes, aux)?,
    ))
}

/// Held-out primary evaluation set drawn from groups unseen in training.
pub fn generate_test(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let world = SyntheticWorld::new(spec);
    let mut rng = stream_rng(spec.seed, TEST_STREAM);
    let start = spec.n_groups + spec.n_aux_groups;
    let first_id = (spec.n_primary + spec.n_aux) as u64;
    let samples = primary_samples(spec, &world, spec.n_test, start..start + spec.n_test_groups, first_id, Split::Test, &mut rng);
    Dataset::new(Task::Primary, spec.input_dim, spec.num_labels, spec.num_classes, samples)
}

/// Splits a validation set off `primary`.
///
/// With `per_group_uniform`, each group contributes `round(fraction * n_g)`
/// samples chosen uniformly within the group; a group whose share rounds to
/// zero is skipped with a warning. Otherwise `round(fraction * n)` samples
/// are drawn from the whole set.
pub fn reserve_validation(
    primary: &Dataset,
    fraction: f64,
    per_group_uniform: bool,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction {fraction} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; primary.len()];
    if per_group_uniform {
        let mut by_group: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in primary.samples.iter().enumerate() {
            by_group.entry(s.group).or_default().push(i);
        }
        for (group, mut members) in by_group {
            let k = (fraction * members.len() as f64).round() as usize;
            if k == 0 {
                log::warn!("group {group}: no samples eligible for validation at fraction {fraction}, skipping");
                continue;
            }
            members.shuffle(&mut rng);
            for &i in &members[..k] {
                chosen[i] = true;
            }
        }
    } else {
        let k = (fraction * primary.len() as f64).round() as usize;
        let mut all = primary.all_indices();
        all.shuffle(&mut rng);
        for &i in &all[..k.min(all.len())] {
            chosen[i] = true;
        }
    }
    let mut rest = Vec::new();
    let mut val = Vec::new();
    for (s, c) in primary.samples.iter().zip(chosen) {
        if c {
            val.push(LabeledSample { split: Split::Val, ..s.clone() });
        } else {
            rest.push(s.clone());
        }
    }
    Ok((primary.with_samples(rest), primary.with_samples(val)))
}

/// Per-label re-balancing weights for a validation set; see
/// [`crate::losses::class_balance_weights`].
pub fn class_balance_weights(validation: &Dataset) -> Result<Vec<f64>> {
    crate::losses::class_balance_weights(&validation.label_matrix())
}

/// Writes datasets to one CSV with columns
/// `sample_id,group_id,split,task,ambiguous,labels,f_0..f_{D-1}`.
///
/// Primary labels are written as a bit string, auxiliary labels as the class
/// id.
pub fn write_csv(path: &Path, datasets: &[&Dataset]) -> Result<usize> {
    let input_dim = datasets.first().map_or(0, |d| d.input_dim);
    if datasets.iter().any(|d| d.input_dim != input_dim) {
        return Err(Error::Data("datasets in one dump must share a feature dimension".into()));
    }
    let mut out = String::from("sample_id,group_id,split,task,ambiguous,labels");
    for f in 0..input_dim {
        out.push_str(&format!(",f_{f}"));
    }
    out.push('\n');
    let mut rows = 0;
    for d in datasets {
        for s in &d.samples {
            let label = match &s.label {
                SampleLabel::Primary(bits) => Prototype(bits.clone()).to_string(),
                SampleLabel::Aux(c) => c.to_string(),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{}",
                s.id,
                s.group,
                s.split.name(),
                s.task().name(),
                u8::from(s.ambiguous),
                label
            ));
            for v in &s.features {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
            rows += 1;
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

/// Reads a dump written by [`write_csv`], one [`Dataset`] per
/// `(task, split)` pair present, validating every row. Auxiliary class
/// counts are inferred as one past the largest class id.
pub fn read_csv(path: &Path) -> Result<BTreeMap<(Task, Split), Dataset>> {
    let parse_err = |line: usize, message: String| Error::Parse { path: path.to_owned(), line, message };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => parse_err(0, format!("{other:?}")),
    })?;
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let fixed = ["sample_id", "group_id", "split", "task", "ambiguous", "labels"];
    if header.len() < fixed.len() || header.iter().zip(fixed).any(|(h, f)| h != f) {
        return Err(parse_err(1, format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let input_dim = header.len() - fixed.len();
    for (k, h) in header.iter().skip(fixed.len()).enumerate() {
        if h != format!("f_{k}") {
            return Err(parse_err(1, format!("feature column {k} is named {h:?}")));
        }
    }

    let mut groups: BTreeMap<(Task, Split), Vec<LabeledSample>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let id: u64 = field(0).parse().map_err(|_| parse_err(line, format!("bad sample_id {:?}", field(0))))?;
        if !seen.insert(id) {
            return Err(parse_err(line, format!("duplicate sample_id {id}")));
        }
        let group: u32 = field(1).parse().map_err(|_| parse_err(line, format!("bad group_id {:?}", field(1))))?;
        let split = Split::from_name(field(2)).ok_or_else(|| parse_err(line, format!("unknown split {:?}", field(2))))?;
        let ambiguous = match field(4) {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(line, format!("bad ambiguous flag {other:?}"))),
        };
        let label = match field(3) {
            "primary" => SampleLabel::Primary(parse_bits(field(5)).map_err(|m| parse_err(line, m))?),
            "aux" => SampleLabel::Aux(field(5).parse().map_err(|_| parse_err(line, format!("bad class {:?}", field(5))))?),
            other => return Err(parse_err(line, format!("unknown task {other:?}"))),
        };
        let features = (0..input_dim)
            .map(|k| {
                let s = field(fixed.len() + k);
                s.parse::<f64>().map_err(|_| parse_err(line, format!("bad feature f_{k} = {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let sample = LabeledSample { id, group, split, ambiguous, features, label };
        groups.entry((sample.task(), split)).or_default().push(sample);
    }

    let mut out = BTreeMap::new();
    for ((task, split), samples) in groups {
        let num_labels = samples
            .iter()
            .find_map(|s| match &s.label {
                SampleLabel::Primary(b) => Some(b.len()),
                SampleLabel::Aux(_) => None,
            })
            .unwrap_or(0);
        let num_classes = samples
            .iter()
            .filter_map(|s| match s.label {
                SampleLabel::Aux(c) => Some(c + 1),
                SampleLabel::Primary(_) => None,
            })
            .max()
            .unwrap_or(0);
        let d = Dataset::new(task, input_dim, num_labels, num_classes, samples)
            .map_err(|e| parse_err(0, e.to_string()))?;
        out.insert((task, split), d);
    }
    Ok(out)
}
