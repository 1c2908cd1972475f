//! Spurious-correlation classification data: a binary shape label that is
//! only 75% reliable, and a color that agrees with the label at an
//! environment-dependent rate (90% / 80% / 10%).
//!
//! Two sources share the environment logic: synthetic "blobs" (a noisy
//! scalar shape score plus a color bit) and IDX digit images, downsampled to
//! 14x14 and placed in one of two color channels.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataio::idx::{read_idx, IdxArray};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const LABEL_NOISE: f64 = 0.25;
pub const BLOB_SPREAD: f64 = 0.3;

/// Color-label agreement per environment.
pub fn default_agreement() -> BTreeMap<u8, f64> {
    BTreeMap::from([(1, 0.9), (2, 0.8), (3, 0.1)])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorMode {
    /// Features `[shape..., +-1]`.
    Bit,
    /// Features `[shape * (color == 0), shape * (color == 1)]`.
    Channels,
}

/// Color-free samples: shape features and the clean binary shape label.
#[derive(Clone, Debug, PartialEq)]
pub struct ColoredBase {
    pub shape: Tensor,
    pub shape_label: Vec<u8>,
}

impl ColoredBase {
    pub fn blobs(n: usize, rng: &mut impl Rng) -> Self {
        let noise = Normal::new(0.0, BLOB_SPREAD).expect("valid spread");
        let mut shape = Tensor::zeros(n, 1);
        let mut shape_label = Vec::with_capacity(n);
        for i in 0..n {
            let b: u8 = rng.random_range(0..2);
            shape.set(i, 0, 2.0 * b as f64 - 1.0 + noise.sample(rng));
            shape_label.push(b);
        }
        Self { shape, shape_label }
    }

    /// Digits `>= 5` get shape label 1. Images are 2x2-average downsampled
    /// and scaled to `[0, 1]`.
    pub fn from_idx(images: &IdxArray, labels: &IdxArray) -> Result<Self> {
        if images.dims.len() != 3 || labels.dims.len() != 1 || images.dims[0] != labels.dims[0] {
            return Err(Error::invalid(format!(
                "expected images [n, h, w] and labels [n], got {:?} and {:?}",
                images.dims, labels.dims
            )));
        }
        let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
        let (h2, w2) = (h / 2, w / 2);
        let mut shape = Tensor::zeros(n, h2 * w2);
        for i in 0..n {
            let img = images.item(i);
            for r in 0..h2 {
                for c in 0..w2 {
                    let s: u32 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dr, dc)| img[(2 * r + dr) * w + 2 * c + dc] as u32)
                        .sum();
                    shape.set(i, r * w2 + c, s as f64 / (4.0 * 255.0));
                }
            }
        }
        let shape_label = labels.data.iter().map(|&d| u8::from(d >= 5)).collect();
        Ok(Self { shape, shape_label })
    }

    pub fn len(&self) -> usize {
        self.shape_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape_label.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            shape: self.shape.select_rows(idx),
            shape_label: idx.iter().map(|&i| self.shape_label[i]).collect(),
        }
    }
}

/// One environment's colored samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ColoredEnv {
    pub env_id: u8,
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub colors: Vec<u8>,
}

/// Flips the shape label with probability `label_noise`, then picks a color
/// that agrees with the noisy label with probability `agreement`.
pub fn make_colored_env(
    base: &ColoredBase,
    env_id: u8,
    agreement: f64,
    label_noise: f64,
    mode: ColorMode,
    rng: &mut impl Rng,
) -> ColoredEnv {
    let n = base.len();
    let p = base.shape.cols();
    let width = match mode {
        ColorMode::Bit => p + 1,
        ColorMode::Channels => 2 * p,
    };
    let mut x = Tensor::zeros(n, width);
    let mut labels = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for i in 0..n {
        let mut label = base.shape_label[i];
        if rng.random::<f64>() < label_noise {
            label = 1 - label;
        }
        let color = if rng.random::<f64>() < agreement { label } else { 1 - label };
        let row = base.shape.row(i);
        match mode {
            ColorMode::Bit => {
                for (j, &v) in row.iter().enumerate() {
                    x.set(i, j, v);
                }
                x.set(i, p, 2.0 * color as f64 - 1.0);
            }
            ColorMode::Channels => {
                let off = color as usize * p;
                for (j, &v) in row.iter().enumerate() {
                    x.set(i, off + j, v);
                }
            }
        }
        labels.push(label as usize);
        colors.push(color);
    }
    ColoredEnv {
        env_id,
        x,
        labels,
        colors,
    }
}

/// Train/test bases per environment plus the coloring recipe. Draws are a
/// pure function of `(seed, split, env, epoch)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColoredTask {
    pub seed: u64,
    pub mode: ColorMode,
    pub agreement: BTreeMap<u8, f64>,
    pub label_noise: f64,
    pub seen: Vec<u8>,
    pub unseen: Vec<u8>,
    pub train: BTreeMap<u8, ColoredBase>,
    pub test: BTreeMap<u8, ColoredBase>,
}

impl ColoredTask {
    fn with_bases(seed: u64, mode: ColorMode, train: BTreeMap<u8, ColoredBase>, test: BTreeMap<u8, ColoredBase>) -> Self {
        Self {
            seed,
            mode,
            agreement: default_agreement(),
            label_noise: LABEL_NOISE,
            seen: vec![1, 2],
            unseen: vec![3],
            train,
            test,
        }
    }

    /// Synthetic blobs; environment 3 gets training rows too so it can be
    /// used as a seen environment in other protocols.
    pub fn blobs(n_train: usize, n_test: usize, seed: u64) -> Self {
        let mut train = BTreeMap::new();
        let mut test = BTreeMap::new();
        for env in 1..=3u8 {
            let mut r = rng::stream(seed, 200 + env as u64);
            train.insert(env, ColoredBase::blobs(n_train, &mut r));
            test.insert(env, ColoredBase::blobs(n_test, &mut r));
        }
        Self::with_bases(seed, ColorMode::Bit, train, test)
    }

    /// Digit images: the training file is dealt round-robin into the three
    /// environments, likewise the test file.
    pub fn from_idx_files(
        train_images: &Path,
        train_labels: &Path,
        test_images: &Path,
        test_labels: &Path,
        seed: u64,
    ) -> Result<Self> {
        let deal = |img: &Path, lab: &Path| -> Result<BTreeMap<u8, ColoredBase>> {
            let base = ColoredBase::from_idx(&read_idx(img)?, &read_idx(lab)?)?;
            Ok((1..=3u8)
                .map(|e| {
                    let idx: Vec<usize> = (e as usize - 1..base.len()).step_by(3).collect();
                    (e, base.subset(&idx))
                })
                .collect())
        };
        Ok(Self::with_bases(
            seed,
            ColorMode::Channels,
            deal(train_images, train_labels)?,
            deal(test_images, test_labels)?,
        ))
    }

    pub fn seen_envs(&self) -> &[u8] {
        &self.seen
    }

    pub fn all_envs(&self) -> Vec<u8> {
        let mut v: Vec<u8> = self.seen.iter().chain(&self.unseen).copied().collect();
        v.sort_unstable();
        v
    }

    pub fn input_dim(&self) -> usize {
        let p = self.train.values().next().map(|b| b.shape.cols()).unwrap_or(0);
        match self.mode {
            ColorMode::Bit => p + 1,
            ColorMode::Channels => 2 * p,
        }
    }

    pub fn draw(&self, split: Split, env_id: u8, epoch: u64) -> Result<ColoredEnv> {
        let bases = match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        };
        let base = bases
            .get(&env_id)
            .ok_or_else(|| Error::invalid(format!("no colored environment {env_id}")))?;
        let agreement = *self
            .agreement
            .get(&env_id)
            .ok_or_else(|| Error::invalid(format!("no color agreement for environment {env_id}")))?;
        let split_salt = match split {
            Split::Train => 0,
            Split::Test => 1,
        };
        let mut r = rng::stream(rng::mix(self.seed, 300 + 10 * env_id as u64 + split_salt), epoch);
        Ok(make_colored_env(base, env_id, agreement, self.label_noise, self.mode, &mut r))
    }
}
