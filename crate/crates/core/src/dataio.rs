//! Dataset ingestion: MNIST IDX files, a seeded Gaussian-blob generator, and
//! stratified train/validation/test splits.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn indices(&self, kind: SplitKind) -> &[usize] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }
}

/// Features are `N x d` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Option<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn split_indices(&self, kind: SplitKind) -> Result<&[usize]> {
        self.split
            .as_ref()
            .map(|s| s.indices(kind))
            .ok_or_else(|| Error::invalid("dataset has no split"))
    }

    /// Copies the selected rows into a contiguous batch.
    pub fn gather(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        let x = self.features.select(Axis(0), idx);
        let y = idx.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    /// SHA-256 over shape, labels, split and the 32-bit feature bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        h.update((self.classes as u64).to_le_bytes());
        for &l in &self.labels {
            h.update((l as u32).to_le_bytes());
        }
        for x in self.features.iter() {
            h.update((*x as f32).to_le_bytes());
        }
        if let Some(s) = &self.split {
            for part in [&s.train, &s.val, &s.test] {
                h.update((part.len() as u64).to_le_bytes());
                for &i in part {
                    h.update((i as u64).to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_invariants(&self) -> Result<()> {
        if self.features.nrows() != self.labels.len() {
            return Err(Error::invalid("features and labels disagree on N"));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::invalid(format!("label {bad} >= classes {}", self.classes)));
        }
        Ok(())
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image/label file pair. Pixels are divided by 255.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = read_file(ip)?;
    let labels = read_file(lp)?;

    let magic = read_u32(&images, 0).ok_or_else(|| Error::format(ip, "truncated header"))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(ip, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let (count, rows, cols) = match (read_u32(&images, 4), read_u32(&images, 8), read_u32(&images, 12)) {
        (Some(c), Some(r), Some(k)) => (c as usize, r as usize, k as usize),
        _ => return Err(Error::format(ip, "truncated header")),
    };
    let d = rows * cols;
    let body = &images[16..];
    if body.len() != count * d {
        return Err(Error::format(
            ip,
            format!("expected {} pixel bytes for {count} images of {rows}x{cols}, found {}", count * d, body.len()),
        ));
    }

    let lmagic = read_u32(&labels, 0).ok_or_else(|| Error::format(lp, "truncated header"))?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::format(lp, format!("bad magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let lcount = read_u32(&labels, 4).ok_or_else(|| Error::format(lp, "truncated header"))? as usize;
    if lcount != count {
        return Err(Error::format(lp, format!("{lcount} labels but {count} images")));
    }
    let lbody = &labels[8..];
    if lbody.len() != lcount {
        return Err(Error::format(lp, format!("expected {lcount} label bytes, found {}", lbody.len())));
    }
    if let Some(bad) = lbody.iter().find(|&&b| b >= 10) {
        return Err(Error::format(lp, format!("label {bad} out of range")));
    }

    let features = Array2::from_shape_fn((count, d), |(i, j)| f64::from(body[i * d + j]) / 255.0);
    Ok(Dataset {
        features,
        labels: lbody.iter().map(|&b| b as usize).collect(),
        classes: 10,
        split: None,
    })
}

/// Writes features (rounded back to bytes) and labels as an IDX pair.
/// `rows * cols` must equal the feature width.
pub fn write_mnist_idx(
    ds: &Dataset,
    rows: usize,
    cols: usize,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    if rows * cols != ds.dim() {
        return Err(Error::invalid(format!("{rows}x{cols} does not match width {}", ds.dim())));
    }
    let mut img = Vec::with_capacity(16 + ds.features.len());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.features.iter().map(|x| (x * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS_MAGIC, ds.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    fs::write(ip, img).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, lab).map_err(|e| Error::io(lp, e))?;
    Ok(())
}

/// Official MNIST with the desk split: 55000 train / 5000 validation drawn
/// stratified from the training file, and the 10000 official test images.
pub fn mnist_desk(dir: impl AsRef<Path>, seed: u64) -> Result<Dataset> {
    let dir = dir.as_ref();
    let train = load_mnist_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
    let test = load_mnist_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
    if train.dim() != test.dim() {
        return Err(Error::format(dir, "train and test image sizes differ"));
    }
    let n_train = train.len();
    let val_frac = 5000.0 / 60000.0;
    let parts = stratified_partition(&train.labels, train.classes, &[1.0 - val_frac, val_frac], seed)?;

    let features = ndarray::concatenate(Axis(0), &[train.features.view(), test.features.view()])
        .expect("same width");
    let mut labels = train.labels;
    labels.extend(test.labels);
    let mut parts = parts.into_iter();
    let split = Split {
        train: parts.next().unwrap_or_default(),
        val: parts.next().unwrap_or_default(),
        test: (n_train..labels.len()).collect(),
    };
    Ok(Dataset {
        features,
        labels,
        classes: 10,
        split: Some(split),
    })
}

/// Gaussian clusters around class means placed on a grid in `[0.2, 0.8]^d`.
/// Noise is one sixth of the grid gap, values clamped to `[0, 1]`.
pub fn synth_blobs(classes: usize, per_class: usize, d: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || d < 2 || per_class == 0 {
        return Err(Error::invalid(format!(
            "synth_blobs needs classes >= 2, d >= 2, per_class >= 1 (got {classes}, {d}, {per_class})"
        )));
    }
    let mut levels = 2usize;
    while (levels as f64).powi(d.min(64) as i32) < classes as f64 {
        levels += 1;
    }
    let gap = 0.6 / (levels - 1) as f64;
    let sigma = gap / 6.0;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let level_dist = rand::distr::Uniform::new(0, levels).expect("levels >= 2");
    let mut means: Vec<Vec<usize>> = Vec::with_capacity(classes);
    while means.len() < classes {
        let cand: Vec<usize> = (0..d).map(|_| level_dist.sample(&mut rng)).collect();
        if !means.contains(&cand) {
            means.push(cand);
        }
    }
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    let n = classes * per_class;
    let mut features = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for i in 0..per_class {
        for (c, mean) in means.iter().enumerate() {
            let row = i * classes + c;
            for j in 0..d {
                let mu = 0.2 + gap * mean[j] as f64;
                features[[row, j]] = (mu + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
            labels.push(c);
        }
    }
    Ok(Dataset {
        features,
        labels,
        classes,
        split: None,
    })
}

/// Stratified three-way split (train, val, test).
pub fn split(mut ds: Dataset, fractions: [f64; 3], seed: u64) -> Result<Dataset> {
    ds.check_invariants()?;
    let mut parts = stratified_partition(&ds.labels, ds.classes, &fractions, seed)?.into_iter();
    ds.split = Some(Split {
        train: parts.next().unwrap_or_default(),
        val: parts.next().unwrap_or_default(),
        test: parts.next().unwrap_or_default(),
    });
    Ok(ds)
}

/// Partitions sample indices by label into `fractions.len()` groups.
///
/// Per-split totals are `round(N * cumulative fraction)` differences; each
/// class contributes `floor(n_c * f)` or one more to every split. Within a
/// class the assignment follows a seeded shuffle; output lists are sorted.
pub(crate) fn stratified_partition(
    labels: &[usize],
    classes: usize,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let k = fractions.len();
    if k == 0 || fractions.iter().any(|f| f.is_nan() || *f <= 0.0) {
        return Err(Error::Split("fractions must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!("fractions sum to {total}, not 1")));
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class.get_mut(l).ok_or_else(|| Error::Split(format!("label {l} out of range")))?.push(i);
    }
    let n = labels.len();
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < k {
            return Err(Error::Split(format!(
                "class {c} has {} examples, fewer than {k} splits",
                members.len()
            )));
        }
    }

    // Global targets from cumulative rounding.
    let mut cum = 0.0;
    let mut prev = 0usize;
    let mut deficit: Vec<i64> = Vec::with_capacity(k);
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        let edge = if i + 1 == k { n } else { (cum * n as f64).round() as usize };
        deficit.push(edge as i64 - prev as i64);
        prev = edge;
    }

    let mut counts: Vec<Vec<usize>> = Vec::with_capacity(classes);
    let mut leftovers: Vec<(usize, usize)> = Vec::new();
    for (c, members) in by_class.iter().enumerate() {
        let nc = members.len();
        let row: Vec<usize> = fractions.iter().map(|f| (nc as f64 * f).floor() as usize).collect();
        for (i, &v) in row.iter().enumerate() {
            deficit[i] -= v as i64;
        }
        leftovers.push((nc - row.iter().sum::<usize>(), c));
        counts.push(row);
    }
    // Larger leftovers first; each leftover unit goes to a distinct split
    // with the largest remaining deficit (fractional part, then index, breaks ties).
    leftovers.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (extra, c) in leftovers {
        let nc = by_class[c].len() as f64;
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            deficit[b]
                .cmp(&deficit[a])
                .then((nc * fractions[b]).fract().total_cmp(&(nc * fractions[a]).fract()))
                .then(a.cmp(&b))
        });
        for &i in order.iter().take(extra) {
            counts[c][i] += 1;
            deficit[i] -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Vec::new(); k];
    for (c, members) in by_class.iter().enumerate() {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        let mut at = 0;
        for (i, &cnt) in counts[c].iter().enumerate() {
            if cnt == 0 {
                return Err(Error::Split(format!("class {c} would be absent from split {i}")));
            }
            out[i].extend_from_slice(&shuffled[at..at + cnt]);
            at += cnt;
        }
    }
    for part in &mut out {
        part.sort_unstable();
    }
    Ok(out)
}
