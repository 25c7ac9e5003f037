//! Two-colour digit data with a planted label/colour correlation.
//!
//! Raw grayscale digits come from IDX files or from a procedural generator
//! (bars vs. discs). Each example gets a binary target `y` (digit bucket,
//! flipped with probability `p_d`) and a colour `c` (equal to `y`, flipped
//! with probability `p_c`). Intensity goes to the green channel for `c = 0`
//! and to red for `c = 1`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{keyed_uniform, purpose};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Grayscale digits with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDigits {
    pub height: usize,
    pub width: usize,
    /// `n * height * width` bytes.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    /// Namespaces per-example random keys so different source files never
    /// share draws.
    pub source: u64,
}

impl RawDigits {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.height * self.width;
        &self.pixels[i * p..(i + 1) * p]
    }

    /// Image `i` scaled to `[0, 1]`.
    pub fn image_unit(&self, i: usize) -> Vec<f64> {
        self.image(i).iter().map(|&b| f64::from(b) / 255.0).collect()
    }
}

/// Contents of one IDX file.
#[derive(Clone, Debug, PartialEq)]
pub enum Idx {
    Images { n: usize, height: usize, width: usize, pixels: Vec<u8> },
    Labels(Vec<u8>),
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("idx: truncated while reading {what}")))
}

pub fn parse_idx(bytes: &[u8]) -> Result<Idx> {
    let magic = be_u32(bytes, 0, "magic")?;
    match magic {
        IDX_IMAGES_MAGIC => {
            let n = be_u32(bytes, 4, "image count")? as usize;
            let h = be_u32(bytes, 8, "rows")? as usize;
            let w = be_u32(bytes, 12, "columns")? as usize;
            let body = &bytes[16..];
            let want = n * h * w;
            if body.len() != want {
                return Err(Error::Format(format!("idx images: header says {n}x{h}x{w} = {want} bytes, body has {}", body.len())));
            }
            Ok(Idx::Images { n, height: h, width: w, pixels: body.to_vec() })
        }
        IDX_LABELS_MAGIC => {
            let n = be_u32(bytes, 4, "label count")? as usize;
            let body = &bytes[8..];
            if body.len() != n {
                return Err(Error::Format(format!("idx labels: header says {n}, body has {}", body.len())));
            }
            Ok(Idx::Labels(body.to_vec()))
        }
        other => Err(Error::Format(format!("idx: unknown magic {other:#010x}"))),
    }
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<Idx> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    parse_idx(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn encode_idx(idx: &Idx) -> Vec<u8> {
    let mut out = Vec::new();
    match idx {
        Idx::Images { n, height, width, pixels } => {
            out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
            for d in [n, height, width] {
                out.extend_from_slice(&(*d as u32).to_be_bytes());
            }
            out.extend_from_slice(pixels);
        }
        Idx::Labels(l) => {
            out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
            out.extend_from_slice(&(l.len() as u32).to_be_bytes());
            out.extend_from_slice(l);
        }
    }
    out
}

/// Pairs an images file with a labels file.
pub fn load_digits(images: impl AsRef<Path>, labels: impl AsRef<Path>, source: u64) -> Result<RawDigits> {
    let Idx::Images { n, height, width, pixels } = load_idx(&images)? else {
        return Err(Error::Format(format!("{}: expected an images file", images.as_ref().display())));
    };
    let Idx::Labels(labels_v) = load_idx(&labels)? else {
        return Err(Error::Format(format!("{}: expected a labels file", labels.as_ref().display())));
    };
    if labels_v.len() != n {
        return Err(Error::Format(format!("{n} images but {} labels", labels_v.len())));
    }
    if let Some(bad) = labels_v.iter().find(|&&l| l > 9) {
        return Err(Error::Format(format!("label {bad} outside 0..=9")));
    }
    Ok(RawDigits { height, width, pixels, labels: labels_v, source })
}

/// The standard MNIST file pair inside `dir`; `train` selects which one.
pub fn load_mnist(dir: impl AsRef<Path>, train: bool) -> Result<RawDigits> {
    let dir = dir.as_ref();
    let prefix = if train { "train" } else { "t10k" };
    let find = |kind: &str| {
        [format!("{prefix}-{kind}-idx{}-ubyte", if kind == "images" { 3 } else { 1 }), format!("{prefix}-{kind}.idx{}-ubyte", if kind == "images" { 3 } else { 1 })]
            .into_iter()
            .map(|name| dir.join(name))
            .find(|p| p.exists())
            .ok_or_else(|| Error::Format(format!("no {prefix} {kind} file in {}", dir.display())))
    };
    load_digits(find("images")?, find("labels")?, if train { 0 } else { 1 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Val,
    TestIn,
    TestOod,
}

impl SplitKind {
    pub const ALL: [SplitKind; 4] = [SplitKind::Train, SplitKind::Val, SplitKind::TestIn, SplitKind::TestOod];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::TestIn => "test_in",
            SplitKind::TestOod => "test_ood",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Result<Self> {
        Self::ALL.get(c as usize).copied().ok_or_else(|| Error::Format(format!("unknown split code {c}")))
    }

    pub fn is_ood(self) -> bool {
        self == SplitKind::TestOod
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorMnistConfig {
    pub p_d: f64,
    pub p_c_in: f64,
    pub p_c_out: f64,
    pub seed: u64,
}

impl Default for ColorMnistConfig {
    fn default() -> Self {
        Self { p_d: 0.25, p_c_in: 0.1, p_c_out: 0.9, seed: 0 }
    }
}

impl ColorMnistConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_d", self.p_d), ("p_c_in", self.p_c_in), ("p_c_out", self.p_c_out)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid("colormnist", format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }

    pub fn p_c(&self, kind: SplitKind) -> f64 {
        if kind.is_ood() {
            self.p_c_out
        } else {
            self.p_c_in
        }
    }
}

/// Three-channel images with target and colour labels.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedDataset {
    pub height: usize,
    pub width: usize,
    /// `n * 3 * height * width` bytes, channel-major per image.
    pub images: Vec<u8>,
    pub y: Vec<u8>,
    pub c: Vec<u8>,
    pub split: SplitKind,
    pub p_d: f64,
    pub p_c: f64,
    pub seed: u64,
}

pub const CHANNELS: usize = 3;

impl GroupedDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn image_len(&self) -> usize {
        CHANNELS * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.image_len();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn group(&self, i: usize) -> (u8, u8) {
        (self.y[i], self.c[i])
    }

    pub fn labels(&self) -> Vec<usize> {
        self.y.iter().map(|&l| l as usize).collect()
    }

    /// Rows `idx` as an `n x 3 x h x w` tensor in `[0, 1]`.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> Tensor<T> {
        let p = self.image_len();
        let scale = T::lit(1.0 / 255.0);
        let mut data = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            data.extend(self.image(i).iter().map(|&b| T::lit(f64::from(b)) * scale));
        }
        Tensor::new(&[idx.len(), CHANNELS, self.height, self.width], data).expect("batch shape")
    }

    pub fn subset(&self, idx: &[usize], split: SplitKind) -> Self {
        let mut images = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        Self {
            images,
            y: idx.iter().map(|&i| self.y[i]).collect(),
            c: idx.iter().map(|&i| self.c[i]).collect(),
            split,
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Self {
        Self { images: Vec::new(), y: Vec::new(), c: Vec::new(), ..*self }
    }

    pub fn group_counts(&self) -> [[usize; 2]; 2] {
        let mut g = [[0; 2]; 2];
        for i in 0..self.len() {
            g[self.y[i] as usize][self.c[i] as usize] += 1;
        }
        g
    }

    pub fn agreement(&self) -> f64 {
        self.y.iter().zip(&self.c).filter(|(a, b)| a == b).count() as f64 / self.len().max(1) as f64
    }

    /// Pearson correlation of `y` and `c`.
    pub fn label_color_correlation(&self) -> f64 {
        let n = self.len() as f64;
        let my = self.y.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let mc = self.c.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let (mut cov, mut vy, mut vc) = (0.0, 0.0, 0.0);
        for (&a, &b) in self.y.iter().zip(&self.c) {
            let (da, db) = (f64::from(a) - my, f64::from(b) - mc);
            cov += da * db;
            vy += da * da;
            vc += db * db;
        }
        cov / (vy * vc).sqrt()
    }
}

fn color_purpose(kind: SplitKind) -> u64 {
    (purpose::COLOR_FLIP << 8) | u64::from(kind.code())
}

fn example_key(source: u64, index: usize) -> u64 {
    (source << 32) | index as u64
}

/// Colours every raw digit. Label-noise draws depend only on the source
/// example; colour draws are fresh for each split kind.
pub fn build_colormnist(raw: &RawDigits, config: &ColorMnistConfig, kind: SplitKind) -> Result<GroupedDataset> {
    config.validate()?;
    let p_c = config.p_c(kind);
    let plane = raw.height * raw.width;
    let n = raw.len();
    let mut images = vec![0u8; n * CHANNELS * plane];
    let mut y = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    for i in 0..n {
        let key = example_key(raw.source, i);
        let bucket = u8::from(raw.labels[i] >= 5);
        let yi = bucket ^ u8::from(keyed_uniform(config.seed, purpose::LABEL_FLIP, key) < config.p_d);
        let ci = yi ^ u8::from(keyed_uniform(config.seed, color_purpose(kind), key) < p_c);
        let channel = if ci == 0 { 1 } else { 0 };
        let dst = i * CHANNELS * plane + channel * plane;
        images[dst..dst + plane].copy_from_slice(raw.image(i));
        y.push(yi);
        c.push(ci);
    }
    Ok(GroupedDataset { height: raw.height, width: raw.width, images, y, c, split: kind, p_d: config.p_d, p_c, seed: config.seed })
}

/// Moves a seeded `fraction` of `data` into a validation split.
pub fn split_validation(data: &GroupedDataset, fraction: f64, seed: u64) -> (GroupedDataset, GroupedDataset) {
    let (mut keep, mut held) = (Vec::new(), Vec::new());
    for i in 0..data.len() {
        if keyed_uniform(seed, purpose::SPLIT, i as u64) < fraction {
            held.push(i);
        } else {
            keep.push(i);
        }
    }
    (data.subset(&keep, data.split), data.subset(&held, SplitKind::Val))
}

pub const GLYPH_SIZE: usize = 28;

/// Procedural stand-ins for digits, centred like handwriting: labels 0 are
/// near-vertical bars, labels 9 are round discs. Position, size, tilt and
/// ink vary slightly per example.
pub fn synth_digits(n: usize, seed: u64, source: u64) -> RawDigits {
    let s = GLYPH_SIZE;
    let mut pixels = vec![0u8; n * s * s];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let key = example_key(source, i) << 5;
        let mut k = 0u64;
        let mut u = || {
            k += 1;
            keyed_uniform(seed, purpose::GLYPH, key + k)
        };
        let blob = u() < 0.5;
        let (cx, cy) = (14.0 + 2.0 * (u() - 0.5), 14.0 + 2.0 * (u() - 0.5));
        let (angle, half_len, half_w) = if blob {
            let r = 5.5 + u();
            (0.0, r, r)
        } else {
            (std::f64::consts::FRAC_PI_2 + 0.3 * (u() - 0.5), 9.0 + 2.0 * u(), 1.75 + 0.5 * u())
        };
        let (sin, cos) = f64::sin_cos(angle);
        let ink = 0.85 + 0.15 * u();
        let mut canvas = vec![0f64; s * s];
        for py in 0..s {
            for px in 0..s {
                let (dx, dy) = (px as f64 + 0.5 - cx, py as f64 + 0.5 - cy);
                let along = dx * cos + dy * sin;
                let across = -dx * sin + dy * cos;
                let dist = if blob { (dx * dx + dy * dy).sqrt() - half_len } else { (along.abs() - half_len).max(across.abs() - half_w) };
                // one-pixel soft edge
                canvas[py * s + px] = ink * (0.5 - dist).clamp(0.0, 1.0);
            }
        }
        for (dst, &v) in pixels[i * s * s..(i + 1) * s * s].iter_mut().zip(&canvas) {
            *dst = (v * 255.0).round() as u8;
        }
        labels.push(if blob { 9 } else { 0 });
    }
    RawDigits { height: s, width: s, pixels, labels, source }
}

/// Synthetic counterpart of [`build_colormnist`] on generated glyphs.
pub fn synth_colorshapes(n: usize, config: &ColorMnistConfig, kind: SplitKind) -> Result<GroupedDataset> {
    if n == 0 {
        return Err(Error::invalid("synth_colorshapes", "n must be at least 1"));
    }
    let source = if matches!(kind, SplitKind::TestIn | SplitKind::TestOod) { 3 } else { 2 };
    build_colormnist(&synth_digits(n, config.seed, source), config, kind)
}

/// All four splits from raw train and test digits.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: GroupedDataset,
    pub val: GroupedDataset,
    pub test_in: GroupedDataset,
    pub test_ood: GroupedDataset,
}

impl Splits {
    pub fn build(train_raw: &RawDigits, test_raw: &RawDigits, config: &ColorMnistConfig, val_fraction: f64) -> Result<Self> {
        let full = build_colormnist(train_raw, config, SplitKind::Train)?;
        let (train, val) = split_validation(&full, val_fraction, config.seed);
        Ok(Self {
            train,
            val,
            test_in: build_colormnist(test_raw, config, SplitKind::TestIn)?,
            test_ood: build_colormnist(test_raw, config, SplitKind::TestOod)?,
        })
    }

    pub fn synthetic(n_train: usize, n_test: usize, config: &ColorMnistConfig, val_fraction: f64) -> Result<Self> {
        Self::build(&synth_digits(n_train, config.seed, 2), &synth_digits(n_test, config.seed, 3), config, val_fraction)
    }

    pub fn get(&self, kind: SplitKind) -> &GroupedDataset {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::TestIn => &self.test_in,
            SplitKind::TestOod => &self.test_ood,
        }
    }

    /// Container file name of one split inside a dataset directory.
    pub fn file_name(kind: SplitKind) -> String {
        format!("{}.bin", kind.name())
    }

    /// Writes the four containers into `dir`, which must exist.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        for kind in SplitKind::ALL {
            self.get(kind).save(dir.as_ref().join(Self::file_name(kind)))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let get = |kind| GroupedDataset::load(dir.as_ref().join(Self::file_name(kind)));
        Ok(Self {
            train: get(SplitKind::Train)?,
            val: get(SplitKind::Val)?,
            test_in: get(SplitKind::TestIn)?,
            test_ood: get(SplitKind::TestOod)?,
        })
    }

    /// Per-split group counts as CSV.
    pub fn stats_csv(&self) -> String {
        let mut out = String::from("split,n,y0_c0,y0_c1,y1_c0,y1_c1,p_c\n");
        for kind in SplitKind::ALL {
            let d = self.get(kind);
            let g = d.group_counts();
            out.push_str(&format!("{},{},{},{},{},{},{}\n", kind.name(), d.len(), g[0][0], g[0][1], g[1][0], g[1][1], d.p_c));
        }
        out
    }
}

/// Keeps only the two groups with `y == c`.
pub fn majority_only_split(data: &GroupedDataset) -> Result<GroupedDataset> {
    let idx: Vec<usize> = (0..data.len()).filter(|&i| data.y[i] == data.c[i]).collect();
    if idx.is_empty() {
        return Err(Error::invalid("majority_only_split", "no example has y == c"));
    }
    Ok(data.subset(&idx, data.split))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GroupStat {
    pub y: u8,
    pub c: u8,
    pub count: usize,
    pub correct: usize,
}

impl GroupStat {
    pub fn accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.correct as f64 / self.count as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupMetrics {
    pub micro: f64,
    /// Mean of per-class accuracies over classes that occur.
    pub balanced: f64,
    /// Minimum over the groups that occur.
    pub worst_group: f64,
    /// Ordered `(0,0), (0,1), (1,0), (1,1)`.
    pub groups: [GroupStat; 4],
    pub missing: Vec<(u8, u8)>,
}

pub fn group_metrics(predictions: &[usize], data: &GroupedDataset) -> Result<GroupMetrics> {
    if predictions.len() != data.len() {
        return Err(Error::shape("group_metrics", &[&[predictions.len()], &[data.len()]]));
    }
    if data.is_empty() {
        return Err(Error::invalid("group_metrics", "empty split"));
    }
    let mut groups = [(0u8, 0u8), (0, 1), (1, 0), (1, 1)].map(|(y, c)| GroupStat { y, c, count: 0, correct: 0 });
    for (i, &p) in predictions.iter().enumerate() {
        let g = &mut groups[2 * data.y[i] as usize + data.c[i] as usize];
        g.count += 1;
        g.correct += usize::from(p == data.y[i] as usize);
    }
    let total: usize = groups.iter().map(|g| g.count).sum();
    let correct: usize = groups.iter().map(|g| g.correct).sum();
    let class_acc: Vec<f64> = (0..2)
        .filter_map(|y| {
            let (n, k) = groups[2 * y..2 * y + 2].iter().fold((0, 0), |(n, k), g| (n + g.count, k + g.correct));
            (n > 0).then(|| k as f64 / n as f64)
        })
        .collect();
    let worst = groups.iter().filter_map(GroupStat::accuracy).fold(f64::INFINITY, f64::min);
    Ok(GroupMetrics {
        micro: correct as f64 / total as f64,
        balanced: class_acc.iter().sum::<f64>() / class_acc.len() as f64,
        worst_group: worst,
        missing: groups.iter().filter(|g| g.count == 0).map(|g| (g.y, g.c)).collect(),
        groups,
    })
}

impl GroupMetrics {
    pub const CSV_HEADER: &'static str = "split,micro,balanced,worst_group,acc_y0_c0,acc_y0_c1,acc_y1_c0,acc_y1_c1,n_y0_c0,n_y0_c1,n_y1_c0,n_y1_c1";

    pub fn csv_row(&self, split: &str) -> String {
        let acc = self.groups.map(|g| g.accuracy().map_or(String::from("nan"), |a| a.to_string()));
        let n = self.groups.map(|g| g.count);
        format!(
            "{split},{},{},{},{},{},{},{},{},{},{},{}",
            self.micro, self.balanced, self.worst_group, acc[0], acc[1], acc[2], acc[3], n[0], n[1], n[2], n[3]
        )
    }
}

const CONTAINER_MAGIC: &[u8; 8] = b"SITARDS1";

impl GroupedDataset {
    /// Header (magic, split, n, h, w, p_d, p_c, seed), then image bytes,
    /// then `y` bytes, then `c` bytes. Little-endian throughout.
    pub fn write_container(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CONTAINER_MAGIC)?;
        w.write_all(&[self.split.code()])?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&self.p_d.to_le_bytes())?;
        w.write_all(&self.p_c.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.images)?;
        w.write_all(&self.y)?;
        w.write_all(&self.c)?;
        Ok(())
    }

    pub fn read_container(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let header = 8 + 1 + 8 + 4 + 4 + 8 + 8 + 8;
        if bytes.len() < header || &bytes[..8] != CONTAINER_MAGIC {
            return Err(Error::Format("dataset: bad magic or short header".into()));
        }
        let split = SplitKind::from_code(bytes[8])?;
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let n = u64_at(9) as usize;
        let (height, width) = (u32_at(17) as usize, u32_at(21) as usize);
        let p_d = f64::from_bits(u64_at(25));
        let p_c = f64::from_bits(u64_at(33));
        let seed = u64_at(41);
        let img = n * CHANNELS * height * width;
        if bytes.len() != header + img + 2 * n {
            return Err(Error::Format(format!("dataset: expected {} bytes, found {}", header + img + 2 * n, bytes.len())));
        }
        let body = &bytes[header..];
        let y = body[img..img + n].to_vec();
        let c = body[img + n..].to_vec();
        if y.iter().chain(&c).any(|&b| b > 1) {
            return Err(Error::Format("dataset: labels must be 0 or 1".into()));
        }
        Ok(Self { height, width, images: body[..img].to_vec(), y, c, split, p_d, p_c, seed })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_container(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = fs::File::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Self::read_container(&mut f)
    }
}
