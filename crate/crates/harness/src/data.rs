//! Datasets: synthetic moons and spirals, and CIFAR-10 in its binary format.
//!
//! Synthetic points are mapped into the unit square. Optionally each example
//! carries `distractors` extra features `0.5 + shift·s_{y,j} + N(0, noise²)`
//! with a fixed per-class sign code `s`: individually weak, jointly
//! predictive, and flippable by a perturbation slightly larger than `shift`.

use std::path::PathBuf;

use autograd::{StreamKey, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, io_err, HarnessError, Result};

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    SyntheticSpiral,
    SyntheticMoons,
    Cifar10Binary,
}

/// How synthetic points become model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum Layout {
    /// `[D, 1, 1]` feature vectors.
    Flat,
    /// One-channel `side × side` image: a Gaussian blob at the point plus a
    /// faint per-pixel texture carrying the distractor code.
    Image { side: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub n_train: usize,
    /// Defaults to `n_train / 9`.
    pub n_val: Option<usize>,
    pub n_test: usize,
    pub seed: u64,
    pub layout: Layout,
    /// Spiral arms; moons always has two classes.
    pub classes: usize,
    /// Gaussian jitter of the synthetic point cloud, in generator units.
    pub point_noise: f64,
    pub distractors: usize,
    pub distractor_shift: f64,
    pub distractor_noise: f64,
    /// Training-batch files (`data_batch_*.bin`) for CIFAR-10.
    pub cifar_train: Vec<PathBuf>,
    pub cifar_test: Option<PathBuf>,
    /// Keep only these classes, relabelled `0..`.
    pub cifar_classes: Option<Vec<usize>>,
    /// Average-pool factor applied to the 32×32 images.
    pub downscale: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::SyntheticMoons,
            n_train: 1000,
            n_val: None,
            n_test: 500,
            seed: 0,
            layout: Layout::Flat,
            classes: 2,
            point_noise: 0.1,
            distractors: 0,
            distractor_shift: 0.02,
            distractor_noise: 0.05,
            cifar_train: Vec::new(),
            cifar_test: None,
            cifar_classes: None,
            downscale: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// `[N, C, H, W]`
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Result<Split> {
        Ok(Split {
            x: self.x.select_rows(idx)?,
            y: idx.iter().map(|&i| self.y[i]).collect(),
        })
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<Split> {
        Ok(Split {
            x: self.x.slice_rows(start, end)?,
            y: self.y[start..end].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub input: [usize; 3],
    pub classes: usize,
    /// Whether pad-and-crop/flip augmentation applies.
    pub image: bool,
    /// Indices into the generated pool, for checking split hygiene.
    pub indices: SplitIndices,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSpec {
    pub fn val_count(&self) -> usize {
        self.n_val.unwrap_or(self.n_train / 9)
    }

    fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return config("data: n_train and n_test must be positive");
        }
        if self.source == DataSource::SyntheticSpiral && self.classes < 2 {
            return config("data: a spiral needs at least two arms");
        }
        if let Layout::Image { side } = self.layout {
            if side < 4 {
                return config("data: image side must be >= 4");
            }
        }
        if !(self.point_noise >= 0.0
            && self.distractor_noise >= 0.0
            && self.distractor_shift >= 0.0)
        {
            return config("data: noise levels and shift must be >= 0");
        }
        if self.downscale == 0 || 32 % self.downscale != 0 {
            return config("data: downscale must divide 32");
        }
        Ok(())
    }
}

/// Builds the dataset described by `spec`; deterministic per seed.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    match spec.source {
        DataSource::SyntheticMoons | DataSource::SyntheticSpiral => synthetic(spec),
        DataSource::Cifar10Binary => cifar(spec),
    }
}

/// One synthetic example: point in generator units and label.
fn moons_point(rng: &mut impl Rng, label: usize, noise: f64) -> [f64; 2] {
    let t = rng.gen_range(0.0..std::f64::consts::PI);
    let (x, y) = if label == 0 {
        (t.cos(), t.sin())
    } else {
        (1.0 - t.cos(), 0.5 - t.sin())
    };
    [
        x + noise * rng.sample::<f64, _>(StandardNormal),
        y + noise * rng.sample::<f64, _>(StandardNormal),
    ]
}

fn spiral_point(rng: &mut impl Rng, label: usize, classes: usize, noise: f64) -> [f64; 2] {
    let r: f64 = rng.gen_range(0.05..1.0);
    let theta = std::f64::consts::TAU * (label as f64 / classes as f64 + 0.75 * r);
    [
        r * theta.cos() + noise * rng.sample::<f64, _>(StandardNormal),
        r * theta.sin() + noise * rng.sample::<f64, _>(StandardNormal),
    ]
}

/// Generator units to the unit square.
fn normalize(p: [f64; 2], source: DataSource) -> [f64; 2] {
    let (u, v) = match source {
        DataSource::SyntheticMoons => ((p[0] + 1.5) / 4.0, (p[1] + 1.25) / 3.0),
        _ => ((p[0] + 1.25) / 2.5, (p[1] + 1.25) / 2.5),
    };
    [u.clamp(0.0, 1.0), v.clamp(0.0, 1.0)]
}

fn synthetic(spec: &DatasetSpec) -> Result<Dataset> {
    let classes = if spec.source == DataSource::SyntheticMoons {
        2
    } else {
        spec.classes
    };
    let total = spec.n_train + spec.val_count() + spec.n_test;
    let root = StreamKey(spec.seed);
    let mut rng = root.derive(0).rng();
    let code_len = match spec.layout {
        Layout::Flat => spec.distractors,
        Layout::Image { side } => side * side,
    };
    // Binary tasks use opposite codes so every distractor separates the classes.
    let mut code_rng = root.derive(1).rng();
    let base: Vec<f64> = (0..code_len)
        .map(|_| if code_rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let codes: Vec<Vec<f64>> = (0..classes)
        .map(|c| match (classes, c) {
            (2, 0) => base.clone(),
            (2, _) => base.iter().map(|s| -s).collect(),
            _ => (0..code_len)
                .map(|_| if code_rng.gen::<bool>() { 1.0 } else { -1.0 })
                .collect(),
        })
        .collect();

    let (input, image) = match spec.layout {
        Layout::Flat => ([2 + spec.distractors, 1, 1], false),
        Layout::Image { side } => ([1, side, side], true),
    };
    let dim = input.iter().product::<usize>();
    let mut xs = Vec::with_capacity(total * dim);
    let mut ys = Vec::with_capacity(total);
    for i in 0..total {
        let label = i % classes;
        let p = match spec.source {
            DataSource::SyntheticMoons => moons_point(&mut rng, label, spec.point_noise),
            _ => spiral_point(&mut rng, label, classes, spec.point_noise),
        };
        let [u, v] = normalize(p, spec.source);
        let distractor = |j: usize, rng: &mut dyn rand::RngCore| {
            0.5 + spec.distractor_shift * codes[label][j]
                + spec.distractor_noise * rng.sample::<f64, _>(StandardNormal)
        };
        match spec.layout {
            Layout::Flat => {
                xs.extend([u, v]);
                for j in 0..spec.distractors {
                    xs.push(distractor(j, &mut rng).clamp(0.0, 1.0));
                }
            }
            Layout::Image { side } => {
                let width = 1.5 / side as f64;
                let texture = spec.distractors > 0;
                for r in 0..side {
                    for c in 0..side {
                        let (py, px) = (
                            (r as f64 + 0.5) / side as f64,
                            (c as f64 + 0.5) / side as f64,
                        );
                        let blob =
                            (-((px - u).powi(2) + (py - v).powi(2)) / (2.0 * width * width)).exp();
                        let tex = if texture {
                            distractor(r * side + c, &mut rng) - 0.5
                        } else {
                            0.0
                        };
                        xs.push((0.8 * blob + 0.1 + tex).clamp(0.0, 1.0));
                    }
                }
            }
        }
        ys.push(label);
    }
    let pool = Split {
        x: Tensor::new(&[total, input[0], input[1], input[2]], xs)?,
        y: ys,
    };
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut root.derive(2).rng());
    let n_val = spec.val_count();
    let indices = SplitIndices {
        train: order[..spec.n_train].to_vec(),
        val: order[spec.n_train..spec.n_train + n_val].to_vec(),
        test: order[spec.n_train + n_val..].to_vec(),
    };
    Ok(Dataset {
        train: pool.select(&indices.train)?,
        val: pool.select(&indices.val)?,
        test: pool.select(&indices.test)?,
        input,
        classes,
        image,
        indices,
    })
}

/// Parses CIFAR-10 binary records: one label byte then 3072 pixel bytes
/// (red, green, blue planes, row-major).
pub fn parse_cifar(bytes: &[u8], what: &str) -> Result<(Vec<u8>, Vec<u8>)> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(HarnessError::Format {
            what: what.to_string(),
            offset: whole as u64,
            detail: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD} bytes",
                bytes.len() - whole
            ),
        });
    }
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut pixels = Vec::with_capacity(bytes.len() / CIFAR_RECORD * (CIFAR_RECORD - 1));
    for (r, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(HarnessError::Format {
                what: what.to_string(),
                offset: (r * CIFAR_RECORD) as u64,
                detail: format!("label byte {} outside 0..{CIFAR_CLASSES}", rec[0]),
            });
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

fn read_cifar(path: &PathBuf) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    parse_cifar(&bytes, &path.display().to_string())
}

/// Keeps the requested classes, downscales, and scales bytes to `[0, 1]`.
fn cifar_split(labels: &[u8], pixels: &[u8], spec: &DatasetSpec) -> Result<(Vec<f64>, Vec<usize>)> {
    let f = spec.downscale;
    let side = 32 / f;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (r, &l) in labels.iter().enumerate() {
        let label = match &spec.cifar_classes {
            Some(keep) => match keep.iter().position(|&c| c == l as usize) {
                Some(p) => p,
                None => continue,
            },
            None => l as usize,
        };
        let img = &pixels[r * 3072..(r + 1) * 3072];
        for ch in 0..3 {
            for i in 0..side {
                for j in 0..side {
                    let mut s = 0u32;
                    for a in 0..f {
                        for b in 0..f {
                            s += img[ch * 1024 + (i * f + a) * 32 + j * f + b] as u32;
                        }
                    }
                    xs.push(s as f64 / (255.0 * (f * f) as f64));
                }
            }
        }
        ys.push(label);
    }
    Ok((xs, ys))
}

fn cifar(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.cifar_train.is_empty() || spec.cifar_test.is_none() {
        return config("data: cifar10-binary needs cifar_train files and a cifar_test file");
    }
    let side = 32 / spec.downscale;
    let classes = spec.cifar_classes.as_ref().map_or(CIFAR_CLASSES, Vec::len);
    if classes < 2 {
        return config("data: keep at least two CIFAR classes");
    }
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for path in &spec.cifar_train {
        let (l, p) = read_cifar(path)?;
        labels.extend(l);
        pixels.extend(p);
    }
    let (xs, ys) = cifar_split(&labels, &pixels, spec)?;
    let dim = 3 * side * side;
    let pool = Split {
        x: Tensor::new(&[ys.len(), 3, side, side], xs)?,
        y: ys,
    };
    let n_val = spec.val_count();
    if spec.n_train + n_val > pool.len() {
        return config(format!(
            "data: {} train + {n_val} val requested, {} available",
            spec.n_train,
            pool.len()
        ));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut StreamKey(spec.seed).derive(2).rng());
    let train_idx = order[..spec.n_train].to_vec();
    let val_idx = order[spec.n_train..spec.n_train + n_val].to_vec();

    let test_path = spec.cifar_test.as_ref().expect("checked above");
    let (tl, tp) = read_cifar(test_path)?;
    let (txs, tys) = cifar_split(&tl, &tp, spec)?;
    let n_test = spec.n_test.min(tys.len());
    let test = Split {
        x: Tensor::new(&[n_test, 3, side, side], txs[..n_test * dim].to_vec())?,
        y: tys[..n_test].to_vec(),
    };
    // Test examples come from a separate file, so their indices start after the pool.
    let test_idx = (pool.len()..pool.len() + n_test).collect();
    Ok(Dataset {
        train: pool.select(&train_idx)?,
        val: pool.select(&val_idx)?,
        test,
        input: [3, side, side],
        classes,
        image: true,
        indices: SplitIndices {
            train: train_idx,
            val: val_idx,
            test: test_idx,
        },
    })
}

/// Mirrors an image `[C, H, W]` left to right.
pub fn flip_horizontal(img: &mut [f64], c: usize, h: usize, w: usize) {
    for row in img[..c * h * w].chunks_mut(w) {
        row.reverse();
    }
}

/// Crops `[C, H, W]` at offset `(dy, dx)` out of the image zero-padded by
/// `pad` on every side; `(pad, pad)` is the identity.
pub fn crop_padded(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    pad: usize,
    dy: usize,
    dx: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            let si = (i + dy) as isize - pad as isize;
            if si < 0 || si as usize >= h {
                continue;
            }
            for j in 0..w {
                let sj = (j + dx) as isize - pad as isize;
                if sj >= 0 && (sj as usize) < w {
                    out[(ch * h + i) * w + j] = img[(ch * h + si as usize) * w + sj as usize];
                }
            }
        }
    }
    out
}

pub const CROP_PAD: usize = 4;

/// Random horizontal flip (p = ½) and random crop after zero-padding by
/// [`CROP_PAD`]; the identity for flat inputs.
pub fn augment(batch: &Tensor, key: StreamKey) -> Result<Tensor> {
    let &[n, c, h, w] = batch.shape() else {
        return config(format!(
            "augment expects [N,C,H,W], got {:?}",
            batch.shape()
        ));
    };
    if h == 1 && w == 1 {
        return Ok(batch.clone());
    }
    let len = c * h * w;
    let mut out = Vec::with_capacity(batch.numel());
    for i in 0..n {
        let mut rng = key.derive(i as u64).rng();
        let mut img = batch.data()[i * len..(i + 1) * len].to_vec();
        if rng.gen::<bool>() {
            flip_horizontal(&mut img, c, h, w);
        }
        let (dy, dx) = (
            rng.gen_range(0..=2 * CROP_PAD),
            rng.gen_range(0..=2 * CROP_PAD),
        );
        out.extend(crop_padded(&img, c, h, w, CROP_PAD, dy, dx));
    }
    Ok(Tensor::new(batch.shape(), out)?)
}
