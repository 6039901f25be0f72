//! Synthetic long-tailed bags, the `.mibg` file format, and batch sampling.
//!
//! # Generation
//!
//! With `rng = Rng::new(seed)`:
//!
//! 1. For each class `c` draw `C_in` normals and scale them to unit norm: the prototype `p_c`.
//! 2. Class `c` gets `round(head_count · ratio^(−c/(K−1)))` bags.
//! 3. Bags are emitted class by class. For each bag, a partial Fisher–Yates
//!    over `0..T` (`j = i + below(T − i)` for `i < M`) picks the `M` key slots;
//!    then, row-major over `(t, j)`, the value is `noise_sigma · normal()`,
//!    plus `p_c[j]` when `t` is a key slot.
//!
//! # File layout (little-endian)
//!
//! ```text
//! "MIBG" | u32 version = 1 | u32 num_bags | u32 K | u32 T | u32 C_in
//! per bag: u32 label | T·C_in f32 values, row-major
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MIBG_MAGIC: &[u8; 4] = b"MIBG";
pub const MIBG_VERSION: u32 = 1;
pub const MIBG_HEADER_LEN: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    /// `[T × C_in]`
    pub instances: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub instances: usize,
    pub feat_dim: usize,
    pub bags: Vec<Bag>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub instances: usize,
    pub feat_dim: usize,
    pub head_count: usize,
    pub imbalance_ratio: f64,
    pub key_instances: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 7,
            instances: 16,
            feat_dim: 12,
            head_count: 320,
            imbalance_ratio: 16.0,
            key_instances: 4,
            noise_sigma: 0.4,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Exponential long-tail profile, head first.
    pub fn class_counts(&self) -> Result<Vec<usize>> {
        self.validate_shape()?;
        let k = self.num_classes;
        let counts: Vec<usize> = (0..k)
            .map(|c| {
                let exp = -(c as f64) / (k - 1) as f64;
                (self.head_count as f64 * self.imbalance_ratio.powf(exp)).round() as usize
            })
            .collect();
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!(
                "class {c} rounds to zero bags (head_count {}, ratio {})",
                self.head_count, self.imbalance_ratio
            )));
        }
        Ok(counts)
    }

    fn validate_shape(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.instances == 0 || self.feat_dim == 0 || self.head_count == 0 {
            return bad("instances, feat_dim and head_count must be positive".into());
        }
        if !(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite()) {
            return bad(format!(
                "imbalance ratio must be >= 1, got {}",
                self.imbalance_ratio
            ));
        }
        if self.key_instances == 0 || self.key_instances > self.instances {
            return bad(format!(
                "key instances {} must lie in [1, {}]",
                self.key_instances, self.instances
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise sigma must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        Ok(())
    }
}

pub fn gen_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let counts = spec.class_counts()?;
    let (t_len, c_in) = (spec.instances, spec.feat_dim);
    let mut rng = Rng::new(spec.seed);

    let prototypes: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..c_in).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();

    let mut bags = Vec::with_capacity(counts.iter().sum());
    for (label, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let mut slots: Vec<usize> = (0..t_len).collect();
            for i in 0..spec.key_instances {
                let j = i + rng.below(t_len - i);
                slots.swap(i, j);
            }
            let mut is_key = vec![false; t_len];
            for &s in &slots[..spec.key_instances] {
                is_key[s] = true;
            }
            let mut data = Vec::with_capacity(t_len * c_in);
            for key in is_key {
                for p in &prototypes[label] {
                    let mut v = spec.noise_sigma * rng.normal();
                    if key {
                        v += p;
                    }
                    data.push(v);
                }
            }
            bags.push(Bag {
                instances: Tensor::new(vec![t_len, c_in], data)?,
                label,
            });
        }
    }
    Ok(Dataset {
        num_classes: spec.num_classes,
        instances: t_len,
        feat_dim: c_in,
        bags,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.bags.iter().map(|b| b.label).collect()
    }

    /// Stacks the selected bags into `[B × T × C_in]` and returns their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.instances * self.feat_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.bags[i].instances.data());
            labels.push(self.bags[i].label);
        }
        let t = Tensor::new(vec![indices.len(), self.instances, self.feat_dim], data)
            .expect("bag shapes are uniform");
        (t, labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            num_classes: self.num_classes,
            instances: self.instances,
            feat_dim: self.feat_dim,
            bags: indices.iter().map(|&i| self.bags[i].clone()).collect(),
        }
    }

    /// Per-class held-out split: each class with at least two bags sends
    /// `max(1, round(fraction · n))` of them (but never all) to the test side.
    pub fn stratified_split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::InvalidArgument(format!(
                "test fraction {test_fraction} must lie in [0, 1)"
            )));
        }
        let mut rng = Rng::new(seed);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for class in 0..self.num_classes {
            let mut members: Vec<usize> = (0..self.len())
                .filter(|&i| self.bags[i].label == class)
                .collect();
            rng.shuffle(&mut members);
            let n = members.len();
            let n_test = if n >= 2 && test_fraction > 0.0 {
                ((test_fraction * n as f64).round() as usize).clamp(1, n - 1)
            } else {
                0
            };
            test.extend_from_slice(&members[..n_test]);
            train.extend_from_slice(&members[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }

    pub fn encode(&self) -> Vec<u8> {
        let per_bag = 4 + 4 * self.instances * self.feat_dim;
        let mut out = Vec::with_capacity(MIBG_HEADER_LEN + self.len() * per_bag);
        out.extend_from_slice(MIBG_MAGIC);
        for v in [
            MIBG_VERSION,
            self.len() as u32,
            self.num_classes as u32,
            self.instances as u32,
            self.feat_dim as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for bag in &self.bags {
            out.extend_from_slice(&(bag.label as u32).to_le_bytes());
            for &v in bag.instances.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Dataset> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MIBG_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {magic:?}, expected \"MIBG\""),
            });
        }
        let version = r.u32("version")?;
        if version != MIBG_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let num_bags = r.u32("bag count")? as usize;
        let k = r.u32("class count")? as usize;
        let t = r.u32("instance count")? as usize;
        let c = r.u32("feature width")? as usize;
        if k < 2 || t == 0 || c == 0 {
            return Err(Error::Format {
                offset: 12,
                msg: format!("invalid dimensions K={k}, T={t}, C_in={c}"),
            });
        }
        let mut bags = Vec::with_capacity(num_bags.min(1 << 20));
        for _ in 0..num_bags {
            let at = r.pos as u64;
            let label = r.u32("label")? as usize;
            if label >= k {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("label {label} out of range for {k} classes"),
                });
            }
            let raw = r.take(4 * t * c, "instance data")?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            bags.push(Bag {
                instances: Tensor::new(vec![t, c], data)?,
                label,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Dataset {
            num_classes: k,
            instances: t,
            feat_dim: c,
            bags,
        })
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, dataset.encode())?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::decode(&std::fs::read(path)?)
}

/// Exact label histogram, length `K`.
pub fn class_counts(dataset: &Dataset) -> Vec<usize> {
    let mut counts = vec![0; dataset.num_classes];
    for b in &dataset.bags {
        counts[b.label] += 1;
    }
    counts
}

/// Seeded shuffle cut into batches; a final batch smaller than 2 is dropped.
pub fn make_batches(len: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch size must be at least 2, got {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    Rng::new(epoch_seed).shuffle(&mut order);
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}
