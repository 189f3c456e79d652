//! Synthetic two-camera source.
//!
//! Each identity is a latent prototype `r ~ N(0, I_d)`. Camera `i` sees
//! `s_i = A_i r + ε`, with a fixed mixing matrix `A_i ∈ R^{n×d}` (entries
//! `N(0, 1/d)`) and `ε ~ N(0, σ_view² I_n)`. The two views of an identity
//! are therefore correlated through `r` and nothing else.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which of the two edge devices.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum View {
    One,
    Two,
}

impl View {
    pub const BOTH: [View; 2] = [View::One, View::Two];

    pub fn index(self) -> usize {
        match self {
            View::One => 0,
            View::Two => 1,
        }
    }

    /// The 1-based index used in files.
    pub fn number(self) -> usize {
        self.index() + 1
    }

    pub fn from_number(n: usize) -> Option<View> {
        match n {
            1 => Some(View::One),
            2 => Some(View::Two),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_identities: usize,
    pub train_ids: usize,
    pub test_ids: usize,
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub sigma_view: f64,
    pub pairs_per_id: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_identities: 200,
            train_ids: 120,
            test_ids: 80,
            latent_dim: 16,
            obs_dim: 64,
            sigma_view: 0.5,
            pairs_per_id: 20,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::config("world.num_identities", "need at least 2 identities"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("world.latent_dim", "must be positive"));
        }
        if self.obs_dim == 0 {
            return Err(Error::config("world.obs_dim", "must be positive"));
        }
        if !(self.sigma_view > 0.0 && self.sigma_view.is_finite()) {
            return Err(Error::config("world.sigma_view", "must be positive"));
        }
        if self.train_ids == 0 || self.test_ids == 0 {
            return Err(Error::config("world.train_ids", "train and test sets must be non-empty"));
        }
        if self.train_ids + self.test_ids > self.num_identities {
            return Err(Error::config(
                "world.test_ids",
                format!(
                    "{} train + {} test identities exceed the {} available",
                    self.train_ids, self.test_ids, self.num_identities
                ),
            ));
        }
        if self.pairs_per_id == 0 {
            return Err(Error::config("world.pairs_per_id", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityPrototype {
    pub label: usize,
    pub latent: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewTransform {
    pub view: View,
    /// `[obs_dim, latent_dim]`
    pub mixing: Tensor,
    pub sigma: f64,
}

impl ViewTransform {
    /// `A r`, the noiseless observation.
    pub fn project(&self, latent: &[f64]) -> Vec<f64> {
        let d = self.mixing.cols();
        self.mixing
            .data()
            .chunks(d)
            .map(|row| crate::tensor::dot(row, latent))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewSample {
    pub label: usize,
    pub view: View,
    pub obs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub prototypes: Vec<IdentityPrototype>,
    pub transforms: [ViewTransform; 2],
}

impl World {
    pub fn obs_dim(&self) -> usize {
        self.transforms[0].mixing.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.transforms[0].mixing.cols()
    }
}

/// Draws prototypes and both view transforms from `seed`.
pub fn generate_world(
    num_identities: usize,
    latent_dim: usize,
    obs_dim: usize,
    sigma_view: f64,
    seed: u64,
) -> Result<World> {
    if num_identities < 2 {
        return Err(Error::config("num_identities", "need at least 2 identities"));
    }
    if latent_dim == 0 || obs_dim == 0 {
        return Err(Error::config("latent_dim", "dimensions must be positive"));
    }
    if !(sigma_view > 0.0 && sigma_view.is_finite()) {
        return Err(Error::config("sigma_view", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes = (0..num_identities)
        .map(|label| IdentityPrototype {
            label,
            latent: (0..latent_dim).map(|_| rng.sample(StandardNormal)).collect(),
        })
        .collect();
    let std = (1.0 / latent_dim as f64).sqrt();
    let mut transform = |view| ViewTransform {
        view,
        mixing: Tensor::randn(&[obs_dim, latent_dim], std, &mut rng),
        sigma: sigma_view,
    };
    let transforms = [transform(View::One), transform(View::Two)];
    Ok(World {
        prototypes,
        transforms,
    })
}

/// `s = A r + ε` with `ε ~ N(0, σ² I)`.
pub fn render_view<R: Rng + ?Sized>(
    prototype: &IdentityPrototype,
    transform: &ViewTransform,
    rng: &mut R,
) -> ViewSample {
    let mut obs = transform.project(&prototype.latent);
    for v in &mut obs {
        *v += transform.sigma * rng.sample::<f64, _>(StandardNormal);
    }
    ViewSample {
        label: prototype.label,
        view: transform.view,
        obs,
    }
}

/// Simultaneous observations of one identity by both devices.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub label: usize,
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
}

impl Pair {
    pub fn view(&self, v: View) -> &[f64] {
        match v {
            View::One => &self.s1,
            View::Two => &self.s2,
        }
    }
}

/// Open-set split: training identities never appear among queries or
/// in the gallery.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub obs_dim: usize,
    pub train: Vec<Pair>,
    pub queries: Vec<Pair>,
    pub gallery: Vec<Pair>,
}

pub fn build_splits<R: Rng + ?Sized>(
    world: &World,
    train_ids: usize,
    test_ids: usize,
    pairs_per_id: usize,
    rng: &mut R,
) -> Result<DatasetSplit> {
    let available = world.prototypes.len();
    if train_ids + test_ids > available {
        return Err(Error::config(
            "test_ids",
            format!("{train_ids} train + {test_ids} test identities exceed the {available} available"),
        ));
    }
    if train_ids == 0 || test_ids == 0 || pairs_per_id == 0 {
        return Err(Error::config("pairs_per_id", "split sizes must be positive"));
    }
    let mut order: Vec<usize> = (0..available).collect();
    order.shuffle(rng);
    let mut train_set = order[..train_ids].to_vec();
    let mut test_set = order[train_ids..train_ids + test_ids].to_vec();
    train_set.sort_unstable();
    test_set.sort_unstable();

    let [t1, t2] = &world.transforms;
    let pair = |label: usize, rng: &mut R| {
        let proto = &world.prototypes[label];
        Pair {
            label: proto.label,
            s1: render_view(proto, t1, rng).obs,
            s2: render_view(proto, t2, rng).obs,
        }
    };
    let mut train = Vec::with_capacity(train_ids * pairs_per_id);
    for &id in &train_set {
        for _ in 0..pairs_per_id {
            train.push(pair(id, rng));
        }
    }
    let mut gallery = Vec::with_capacity(test_ids);
    let mut queries = Vec::with_capacity(test_ids * pairs_per_id);
    for &id in &test_set {
        gallery.push(pair(id, rng));
        for _ in 0..pairs_per_id {
            queries.push(pair(id, rng));
        }
    }
    Ok(DatasetSplit {
        obs_dim: world.obs_dim(),
        train,
        queries,
        gallery,
    })
}

/// Generates the world and split for one seed.
pub fn build_dataset(cfg: &WorldConfig, seed: u64) -> Result<DatasetSplit> {
    cfg.validate()?;
    let world = generate_world(cfg.num_identities, cfg.latent_dim, cfg.obs_dim, cfg.sigma_view, seed)?;
    let mut rng = crate::rng::stream(seed, crate::rng::streams::SPLIT);
    build_splits(&world, cfg.train_ids, cfg.test_ids, cfg.pairs_per_id, &mut rng)
}

/// Training pairs as dense matrices with class indices `0..num_classes`.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub s1: Tensor,
    pub s2: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn view(&self, v: View) -> &Tensor {
        match v {
            View::One => &self.s1,
            View::Two => &self.s2,
        }
    }
}

impl DatasetSplit {
    /// Sorted distinct training identity labels.
    pub fn train_labels(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.train.iter().map(|p| p.label).collect();
        set.into_iter().collect()
    }

    pub fn num_train_classes(&self) -> usize {
        self.train_labels().len()
    }

    pub fn train_set(&self) -> TrainSet {
        let classes: BTreeMap<usize, usize> = self
            .train_labels()
            .into_iter()
            .enumerate()
            .map(|(i, l)| (l, i))
            .collect();
        let rows1: Vec<&[f64]> = self.train.iter().map(|p| p.s1.as_slice()).collect();
        let rows2: Vec<&[f64]> = self.train.iter().map(|p| p.s2.as_slice()).collect();
        TrainSet {
            s1: Tensor::from_rows(&rows1).expect("uniform observations"),
            s2: Tensor::from_rows(&rows2).expect("uniform observations"),
            labels: self.train.iter().map(|p| classes[&p.label]).collect(),
            num_classes: classes.len(),
        }
    }

    /// Checks the open-set invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::config("split", reason));
        if self.train.is_empty() || self.queries.is_empty() || self.gallery.is_empty() {
            return bad("train, query and gallery sets must all be non-empty".into());
        }
        let all = self.train.iter().chain(&self.queries).chain(&self.gallery);
        for p in all {
            if p.s1.len() != self.obs_dim || p.s2.len() != self.obs_dim {
                return bad(format!("identity {} has a view of the wrong dimension", p.label));
            }
            if p.s1.iter().chain(&p.s2).any(|v| !v.is_finite()) {
                return bad(format!("identity {} has a non-finite observation", p.label));
            }
        }
        let train: BTreeSet<usize> = self.train.iter().map(|p| p.label).collect();
        let mut gallery = BTreeSet::new();
        for p in &self.gallery {
            if !gallery.insert(p.label) {
                return bad(format!("gallery label {} appears twice", p.label));
            }
        }
        if let Some(l) = gallery.iter().find(|l| train.contains(l)) {
            return bad(format!("label {l} is both a training and a test identity"));
        }
        if let Some(q) = self.queries.iter().find(|q| !gallery.contains(&q.label)) {
            return bad(format!("query label {} has no gallery entry", q.label));
        }
        Ok(())
    }
}

const FEATURE_MAGIC: &str = "foa-features";

/// Serializes a split in the line-oriented feature format.
///
/// ```text
/// foa-features v1 <dim>
/// @train
/// <label>,1,<f1>,...,<fdim>
/// <label>,2,<f1>,...,<fdim>
/// @query
/// ...
/// @gallery
/// ...
/// ```
///
/// Records come in consecutive view-1/view-2 pairs of one label. Section
/// markers (`@train`, `@query`, `@gallery`) assign the pairs that follow.
pub fn write_features(split: &DatasetSplit) -> String {
    let mut out = format!("{FEATURE_MAGIC} v1 {}\n", split.obs_dim);
    for (name, pairs) in [("train", &split.train), ("query", &split.queries), ("gallery", &split.gallery)] {
        let _ = writeln!(out, "@{name}");
        for p in pairs {
            for view in View::BOTH {
                let _ = write!(out, "{},{}", p.label, view.number());
                for v in p.view(view) {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
    }
    out
}

pub fn save_features(split: &DatasetSplit, path: &Path) -> Result<()> {
    fs::write(path, write_features(split)).map_err(|e| Error::io(path, e))
}

pub fn load_external_features(path: &Path) -> Result<DatasetSplit> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_features(&text)
}

pub fn parse_features(text: &str) -> Result<DatasetSplit> {
    let err = |line: usize, reason: String| Error::Parse {
        what: "feature file",
        line,
        reason,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(FEATURE_MAGIC) {
        return Err(err(1, format!("expected `{FEATURE_MAGIC} v1 <dim>` header")));
    }
    match parts.next() {
        Some("v1") => {}
        Some(v) => return Err(err(1, format!("unknown version `{v}`"))),
        None => return Err(err(1, "missing version".into())),
    }
    let dim: usize = parts
        .next()
        .and_then(|d| d.parse().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| err(1, "missing or invalid feature dimension".into()))?;

    #[derive(Copy, Clone)]
    enum Section {
        Train,
        Query,
        Gallery,
    }
    let mut section = None;
    let mut split = DatasetSplit {
        obs_dim: dim,
        train: Vec::new(),
        queries: Vec::new(),
        gallery: Vec::new(),
    };
    let mut pending: Option<(usize, usize, Vec<f64>)> = None;
    let mut records = 0usize;
    for (no, line) in lines {
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('@') {
            if pending.is_some() {
                return Err(err(no, "section ends in the middle of a pair".into()));
            }
            section = Some(match name {
                "train" => Section::Train,
                "query" => Section::Query,
                "gallery" => Section::Gallery,
                other => return Err(err(no, format!("unknown section `@{other}`"))),
            });
            continue;
        }
        let section = section.ok_or_else(|| err(no, "record before any section marker".into()))?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(err(
                no,
                format!("expected {} fields for dimension {dim}, found {}", dim + 2, fields.len()),
            ));
        }
        let label: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| err(no, format!("bad label `{}`", fields[0])))?;
        let view: usize = fields[1]
            .trim()
            .parse()
            .map_err(|_| err(no, format!("bad view index `{}`", fields[1])))?;
        let values = fields[2..]
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(no, format!("bad value `{f}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        records += 1;
        match (pending.take(), view) {
            (None, 1) => pending = Some((no, label, values)),
            (None, v) => return Err(err(no, format!("expected view 1 to start a pair, found view {v}"))),
            (Some((_, l1, s1)), 2) if l1 == label => {
                let pair = Pair { label, s1, s2: values };
                match section {
                    Section::Train => split.train.push(pair),
                    Section::Query => split.queries.push(pair),
                    Section::Gallery => split.gallery.push(pair),
                }
            }
            (Some((_, l1, _)), 2) => {
                return Err(err(no, format!("view 2 has label {label} but its view 1 has label {l1}")))
            }
            (Some(_), v) => return Err(err(no, format!("expected view 2 to complete a pair, found view {v}"))),
        }
    }
    if let Some((no, _, _)) = pending {
        return Err(err(no, "unpaired view 1 record at end of file".into()));
    }
    if records == 0 {
        return Err(err(1, "no records".into()));
    }
    split.validate().map_err(|e| err(0, e.to_string()))?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_split(seed: u64) -> DatasetSplit {
        let w = generate_world(10, 3, 5, 0.5, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_splits(&w, 6, 4, 2, &mut rng).unwrap()
    }

    #[test]
    fn world_is_deterministic_in_seed() {
        let a = generate_world(50, 4, 8, 0.5, 7).unwrap();
        let b = generate_world(50, 4, 8, 0.5, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_world(50, 4, 8, 0.5, 8).unwrap());
    }

    #[test]
    fn world_shapes() {
        let w = generate_world(50, 4, 8, 0.5, 7).unwrap();
        assert_eq!(w.prototypes.len(), 50);
        assert!(w.prototypes.iter().all(|p| p.latent.len() == 4));
        for t in &w.transforms {
            assert_eq!(t.mixing.shape(), &[8, 4]);
        }
    }

    #[test]
    fn invalid_worlds_are_rejected() {
        assert!(generate_world(1, 4, 8, 0.5, 0).is_err());
        assert!(generate_world(5, 0, 8, 0.5, 0).is_err());
        assert!(generate_world(5, 4, 8, 0.0, 0).is_err());
    }

    #[test]
    fn noiseless_limit_is_the_projection() {
        let w = generate_world(3, 4, 6, 1e-300, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = &w.prototypes[0];
        let s = render_view(p, &w.transforms[0], &mut rng);
        assert_eq!(s.obs, w.transforms[0].project(&p.latent));
    }

    #[test]
    fn repeated_renders_differ_but_share_label() {
        let w = generate_world(3, 4, 6, 0.5, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = render_view(&w.prototypes[1], &w.transforms[1], &mut rng);
        let b = render_view(&w.prototypes[1], &w.transforms[1], &mut rng);
        assert_ne!(a.obs, b.obs);
        assert_eq!((a.label, a.view), (b.label, b.view));
    }

    #[test]
    fn split_counts_and_partition() {
        let w = generate_world(50, 4, 8, 0.5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = build_splits(&w, 30, 20, 5, &mut rng).unwrap();
        assert_eq!(s.queries.len(), 100);
        assert_eq!(s.gallery.len(), 20);
        assert_eq!(s.train.len(), 150);
        let train: BTreeSet<_> = s.train.iter().map(|p| p.label).collect();
        assert!(s.gallery.iter().all(|g| !train.contains(&g.label)));
        let gallery: BTreeSet<_> = s.gallery.iter().map(|p| p.label).collect();
        assert!(s.queries.iter().all(|q| gallery.contains(&q.label)));
        s.validate().unwrap();
    }

    #[test]
    fn too_many_identities_is_rejected() {
        let w = generate_world(10, 2, 3, 0.5, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(build_splits(&w, 6, 5, 1, &mut rng), Err(Error::Config { .. })));
    }

    #[test]
    fn train_set_maps_labels_to_dense_classes() {
        let s = small_split(4);
        let t = s.train_set();
        assert_eq!(t.num_classes, 6);
        assert_eq!(t.s1.shape(), &[12, 5]);
        assert!(t.labels.iter().all(|&l| l < 6));
    }

    #[test]
    fn feature_file_round_trips() {
        let s = small_split(5);
        let text = write_features(&s);
        assert_eq!(parse_features(&text).unwrap(), s);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.txt");
        save_features(&s, &path).unwrap();
        assert_eq!(load_external_features(&path).unwrap(), s);
    }

    fn line_of(e: Error) -> usize {
        match e {
            Error::Parse { line, .. } => line,
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn feature_file_errors() {
        // no records
        assert!(parse_features("foa-features v1 2\n@train\n").is_err());
        // unknown version
        assert_eq!(line_of(parse_features("foa-features v9 2\n").unwrap_err()), 1);
        // mismatched record dimension on line 4
        let text = "foa-features v1 2\n@train\n0,1,1.0,2.0\n0,2,1.0\n";
        assert_eq!(line_of(parse_features(text).unwrap_err()), 4);
        // label mismatch within a pair
        let text = "foa-features v1 1\n@train\n0,1,1.0\n1,2,1.0\n";
        assert_eq!(line_of(parse_features(text).unwrap_err()), 4);
        // a record before any section
        assert_eq!(line_of(parse_features("foa-features v1 1\n0,1,1\n").unwrap_err()), 2);
    }

    #[test]
    fn feature_file_rejects_overlapping_identities() {
        let mut s = small_split(6);
        s.gallery[0].label = s.train[0].label;
        assert!(parse_features(&write_features(&s)).is_err());
    }
}
