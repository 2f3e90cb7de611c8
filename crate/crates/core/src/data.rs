//! Seeded synthetic multi-view datasets, the line-delimited dataset file
//! format, and mini-batch ordering.
//!
//! Objects are generated from a latent Gaussian hierarchy
//! (class prototype → sub-category prototype → object) and observed through
//! fixed per-view linear maps. The optional second domain sees every object
//! through a single, noisier map.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// How the per-view observation maps are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewMaps {
    /// Entries i.i.d. `N(0, 1/D)`.
    #[default]
    Random,
    /// Every map is the identity.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub subcats_per_class: usize,
    pub views_per_object: usize,
    pub view_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub sigma_proto: f64,
    pub sigma_subcat: f64,
    pub sigma_object: f64,
    pub sigma_view: f64,
    pub domains: usize,
    pub sigma_domain2: f64,
    pub view_maps: ViewMaps,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            subcats_per_class: 2,
            views_per_object: 4,
            view_dim: 32,
            train_per_class: 25,
            test_per_class: 10,
            sigma_proto: 1.0,
            sigma_subcat: 0.3,
            sigma_object: 0.1,
            sigma_view: 0.05,
            domains: 1,
            sigma_domain2: 0.1,
            view_maps: ViewMaps::Random,
            seed: 2018,
        }
    }
}

impl DatasetSpec {
    /// The default spec with a second, single-view domain.
    pub fn two_domain() -> Self {
        Self {
            domains: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("dataset: {msg}")));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.subcats_per_class == 0 || self.views_per_object == 0 || self.view_dim == 0 {
            return bad("subcats_per_class, views_per_object and view_dim must be >= 1".into());
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("every class needs train and test objects".into());
        }
        if !(1..=2).contains(&self.domains) {
            return bad(format!("domains must be 1 or 2, got {}", self.domains));
        }
        for (name, v) in [
            ("sigma_proto", self.sigma_proto),
            ("sigma_subcat", self.sigma_subcat),
            ("sigma_object", self.sigma_object),
            ("sigma_view", self.sigma_view),
            ("sigma_domain2", self.sigma_domain2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    /// Total number of objects across splits and domains.
    pub fn total_objects(&self) -> usize {
        self.num_classes * (self.train_per_class + self.test_per_class) * self.domains
    }

    /// Views per object of the given domain.
    pub fn views_for_domain(&self, domain: usize) -> usize {
        if domain == 0 {
            self.views_per_object
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiViewObject {
    pub id: String,
    pub class: usize,
    pub subcat: usize,
    /// 0 = multi-view shapes, 1 = single-view sketch-like domain.
    pub domain: usize,
    pub views: Matrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub spec: DatasetSpec,
    pub train: Vec<MultiViewObject>,
    pub test: Vec<MultiViewObject>,
}

impl Split {
    /// Checks label ranges, view shapes, id uniqueness and class coverage.
    pub fn validate(&self) -> Result<()> {
        let spec = &self.spec;
        spec.validate()?;
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::InvalidArgument(
                "split needs non-empty train and test sides".into(),
            ));
        }
        let mut ids = HashSet::new();
        for o in self.train.iter().chain(&self.test) {
            validate_object(o, spec)?;
            if !ids.insert(o.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate object id `{}`", o.id)));
            }
        }
        for (side, objs) in [("train", &self.train), ("test", &self.test)] {
            let present: HashSet<usize> = objs.iter().map(|o| o.class).collect();
            if present.len() != spec.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "{side} split covers {} of {} classes",
                    present.len(),
                    spec.num_classes
                )));
            }
        }
        Ok(())
    }
}

fn validate_object(o: &MultiViewObject, spec: &DatasetSpec) -> Result<()> {
    if o.class >= spec.num_classes {
        return Err(Error::LabelOutOfRange {
            label: o.class,
            num_classes: spec.num_classes,
        });
    }
    if o.subcat >= spec.subcats_per_class {
        return Err(Error::InvalidArgument(format!(
            "object `{}`: subcat {} >= {}",
            o.id, o.subcat, spec.subcats_per_class
        )));
    }
    if o.domain >= spec.domains {
        return Err(Error::InvalidArgument(format!(
            "object `{}`: domain {} >= {}",
            o.id, o.domain, spec.domains
        )));
    }
    let expected = (spec.views_for_domain(o.domain), spec.view_dim);
    if o.views.shape() != expected {
        return Err(Error::InvalidArgument(format!(
            "object `{}`: views shape {:?}, expected {:?}",
            o.id,
            o.views.shape(),
            expected
        )));
    }
    if !o.views.is_finite() {
        return Err(Error::NonFinite(format!("views of object `{}`", o.id)));
    }
    Ok(())
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

fn observation_map(rng: &mut ChaCha8Rng, d: usize, kind: ViewMaps) -> Matrix<f64> {
    match kind {
        ViewMaps::Identity => Matrix::identity(d),
        ViewMaps::Random => {
            let std = (1.0 / d as f64).sqrt();
            Matrix::from_vec(d, d, gaussian_vec(rng, d * d, std)).expect("square map")
        }
    }
}

fn observe(map: &Matrix<f64>, z: &[f64], rng: &mut ChaCha8Rng, sigma: f64) -> Vec<f64> {
    let mut x = map.matvec(z);
    for (v, n) in x.iter_mut().zip(gaussian_vec(rng, z.len(), sigma)) {
        *v += n;
    }
    x
}

/// Draws a dataset; the result is a pure function of `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<Split> {
    spec.validate()?;
    let d = spec.view_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let protos: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| gaussian_vec(&mut rng, d, spec.sigma_proto))
        .collect();
    let subcats: Vec<Vec<Vec<f64>>> = protos
        .iter()
        .map(|mu| {
            (0..spec.subcats_per_class)
                .map(|_| {
                    let off = gaussian_vec(&mut rng, d, spec.sigma_subcat);
                    mu.iter().zip(off).map(|(a, b)| a + b).collect()
                })
                .collect()
        })
        .collect();
    let view_maps: Vec<Matrix<f64>> = (0..spec.views_per_object)
        .map(|_| observation_map(&mut rng, d, spec.view_maps))
        .collect();
    let sketch_map = observation_map(&mut rng, d, spec.view_maps);

    let mut split = Split {
        spec: spec.clone(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for domain in 0..spec.domains {
        for (side, count) in [("train", spec.train_per_class), ("test", spec.test_per_class)] {
            for (class, protos) in subcats.iter().enumerate() {
                for i in 0..count {
                    let subcat = i % spec.subcats_per_class;
                    let z: Vec<f64> = protos[subcat]
                        .iter()
                        .zip(gaussian_vec(&mut rng, d, spec.sigma_object))
                        .map(|(a, b)| a + b)
                        .collect();
                    let rows: Vec<Vec<f64>> = if domain == 0 {
                        view_maps
                            .iter()
                            .map(|a| observe(a, &z, &mut rng, spec.sigma_view))
                            .collect()
                    } else {
                        vec![observe(&sketch_map, &z, &mut rng, spec.sigma_domain2)]
                    };
                    let obj = MultiViewObject {
                        id: format!("{side}-d{domain}-c{class:03}-{i:04}"),
                        class,
                        subcat,
                        domain,
                        views: Matrix::from_rows(&rows)?,
                    };
                    if side == "train" {
                        split.train.push(obj);
                    } else {
                        split.test.push(obj);
                    }
                }
            }
        }
    }
    Ok(split)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    manifest: DatasetSpec,
    format: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectLine {
    id: String,
    split: SplitSide,
    class: usize,
    subcat: usize,
    domain: usize,
    views: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum SplitSide {
    Train,
    Test,
}

pub const DATASET_FORMAT: &str = "tclab-dataset/1";

/// Writes one JSON record per line, preceded by a manifest line.
pub fn save(split: &Split, path: &Path) -> Result<()> {
    split.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let manifest = ManifestLine {
        manifest: split.spec.clone(),
        format: DATASET_FORMAT.to_string(),
    };
    writeln!(w, "{}", serde_json::to_string(&manifest).expect("serialisable")).map_err(io)?;
    for (side, objs) in [(SplitSide::Train, &split.train), (SplitSide::Test, &split.test)] {
        for o in objs {
            let line = ObjectLine {
                id: o.id.clone(),
                split: side,
                class: o.class,
                subcat: o.subcat,
                domain: o.domain,
                views: o.views.row_iter().map(<[f64]>::to_vec).collect(),
            };
            writeln!(w, "{}", serde_json::to_string(&line).expect("serialisable")).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load(path: &Path) -> Result<Split> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty dataset file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let manifest: ManifestLine = serde_json::from_str(&first).map_err(|e| parse_err(1, format!("manifest: {e}")))?;
    if manifest.format != DATASET_FORMAT {
        return Err(parse_err(1, format!("unsupported format `{}`", manifest.format)));
    }
    let spec = manifest.manifest;
    spec.validate().map_err(|e| parse_err(1, e.to_string()))?;

    let mut split = Split {
        spec,
        train: Vec::new(),
        test: Vec::new(),
    };
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ObjectLine = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let views = Matrix::from_rows(&rec.views).map_err(|e| parse_err(lineno, e.to_string()))?;
        let obj = MultiViewObject {
            id: rec.id,
            class: rec.class,
            subcat: rec.subcat,
            domain: rec.domain,
            views,
        };
        validate_object(&obj, &split.spec).map_err(|e| parse_err(lineno, e.to_string()))?;
        match rec.split {
            SplitSide::Train => split.train.push(obj),
            SplitSide::Test => split.test.push(obj),
        }
    }
    split.validate().map_err(|e| parse_err(0, e.to_string()))?;
    Ok(split)
}

/// Shuffles `0..n` with a stream keyed by `(seed, epoch)` and cuts it into
/// contiguous chunks; the last chunk may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            num_classes: 4,
            subcats_per_class: 2,
            views_per_object: 3,
            view_dim: 5,
            train_per_class: 3,
            test_per_class: 2,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn zero_noise_objects_equal_prototypes() {
        let spec = DatasetSpec {
            subcats_per_class: 1,
            views_per_object: 1,
            sigma_subcat: 0.0,
            sigma_object: 0.0,
            sigma_view: 0.0,
            view_maps: ViewMaps::Identity,
            ..small()
        };
        let split = generate(&spec).unwrap();
        for class in 0..spec.num_classes {
            let members: Vec<_> = split
                .train
                .iter()
                .chain(&split.test)
                .filter(|o| o.class == class)
                .collect();
            assert!(members.windows(2).all(|w| w[0].views == w[1].views));
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        let c = generate(&DatasetSpec { seed: 99, ..small() }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train[0].views, c.train[0].views);
    }

    #[test]
    fn shapes_and_counts() {
        let spec = DatasetSpec { domains: 2, ..small() };
        let split = generate(&spec).unwrap();
        split.validate().unwrap();
        assert_eq!(split.train.len() + split.test.len(), spec.total_objects());
        assert!(split
            .train
            .iter()
            .filter(|o| o.domain == 1)
            .all(|o| o.views.rows() == 1));
        assert!(split
            .train
            .iter()
            .filter(|o| o.domain == 0)
            .all(|o| o.views.rows() == 3));
    }

    #[test]
    fn degenerate_spec_rejected() {
        assert!(generate(&DatasetSpec {
            num_classes: 1,
            ..small()
        })
        .is_err());
        assert!(generate(&DatasetSpec {
            views_per_object: 0,
            ..small()
        })
        .is_err());
        assert!(generate(&DatasetSpec {
            sigma_view: -1.0,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn batch_sizes() {
        let b = batches(5, 2, 1, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn batch_order_depends_on_epoch_only_through_the_key() {
        assert_eq!(batches(200, 16, 3, 4).unwrap(), batches(200, 16, 3, 4).unwrap());
        assert_ne!(batches(200, 16, 3, 4).unwrap(), batches(200, 16, 3, 5).unwrap());
        assert!(batches(10, 0, 3, 4).is_err());
    }
}
