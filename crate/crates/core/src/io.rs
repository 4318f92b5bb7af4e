//! IDX image ingestion, image transforms, checkpoints and config files.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DeepTensorNetwork, Topology};
use crate::tensor::Tensor;
use crate::training::{Dataset, TrainConfig};

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// Grayscale images in `[0, 1]`, row-major `height × width` each.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub height: usize,
    pub width: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl ImageDataset {
    pub fn new(height: usize, width: usize, images: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Format(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        for (i, img) in images.iter().enumerate() {
            if img.len() != height * width {
                return Err(Error::Shape(format!(
                    "image {i} has {} pixels, expected {}",
                    img.len(),
                    height * width
                )));
            }
            if let Some(v) = img.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidArgument(format!(
                    "image {i} has pixel {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            height: self.height,
            width: self.width,
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Up to `per_class` images of every label, picked after a seeded
    /// shuffle and returned in label-interleaved order.
    pub fn stratified(&self, per_class: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        for c in &mut by_class {
            c.shuffle(&mut rng);
            c.truncate(per_class);
        }
        let idx: Vec<usize> = (0..per_class)
            .flat_map(|k| by_class.iter().filter_map(move |c| c.get(k).copied()))
            .collect();
        self.subset(&idx)
    }

    /// Flattened rows for training.
    pub fn to_dataset(&self) -> Dataset {
        Dataset::classification(self.images.clone(), self.labels.clone()).expect("counts match")
    }
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let file = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file).read_to_end(&mut bytes)?;
    } else {
        BufReader::new(file).read_to_end(&mut bytes)?;
    }
    Ok(bytes)
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Images from an IDX3 buffer: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, "image file")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "image file magic {magic}, expected {IMAGE_MAGIC}"
        )));
    }
    let n = be_u32(bytes, 4, "image file")? as usize;
    let rows = be_u32(bytes, 8, "image file")? as usize;
    let cols = be_u32(bytes, 12, "image file")? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "image file truncated: {} of {need} bytes",
            bytes.len()
        )));
    }
    Ok((n, rows, cols, bytes[16..need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "label file")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!(
            "label file magic {magic}, expected {LABEL_MAGIC}"
        )));
    }
    let n = be_u32(bytes, 4, "label file")? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::Format(format!(
            "label file truncated: {} of {} bytes",
            bytes.len(),
            8 + n
        )));
    }
    Ok(bytes[8..8 + n].to_vec())
}

/// Reads an IDX image/label pair (optionally gzipped); pixels scale by 1/255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<ImageDataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&open_maybe_gz(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&open_maybe_gz(labels_path.as_ref())?)?;
    if labels.len() != n {
        return Err(Error::Format(format!("{n} images but {} labels", labels.len())));
    }
    let images = pixels
        .chunks(rows * cols.max(1))
        .take(n)
        .map(|c| c.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect();
    ImageDataset::new(rows, cols, images, labels.into_iter().map(usize::from).collect())
}

/// Serializes to IDX buffers, quantizing pixels to bytes.
pub fn to_idx(data: &ImageDataset) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + data.len() * data.height * data.width);
    for v in [IMAGE_MAGIC, data.len() as u32, data.height as u32, data.width as u32] {
        img.extend(v.to_be_bytes());
    }
    for im in &data.images {
        img.extend(im.iter().map(|v| (v * 255.0).round() as u8));
    }
    let mut lab = Vec::with_capacity(8 + data.len());
    lab.extend(LABEL_MAGIC.to_be_bytes());
    lab.extend((data.len() as u32).to_be_bytes());
    lab.extend(data.labels.iter().map(|&l| l as u8));
    (img, lab)
}

/// Seed value that leaves the pixel order untouched.
pub const IDENTITY_PERMUTATION_SEED: u64 = 0;

/// Fixed pixel permutation drawn from `seed` with ChaCha8.
pub fn permutation(len: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..len).collect();
    if seed != IDENTITY_PERMUTATION_SEED {
        p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    p
}

pub fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Pixel `k` of every output image is pixel `perm[k]` of the input.
pub fn permute_pixels(data: &ImageDataset, perm: &[usize]) -> Result<ImageDataset> {
    if perm.len() != data.height * data.width {
        return Err(Error::Shape(format!(
            "permutation of length {} for {} pixels",
            perm.len(),
            data.height * data.width
        )));
    }
    let images = data
        .images
        .iter()
        .map(|im| perm.iter().map(|&k| im[k]).collect())
        .collect();
    Ok(ImageDataset { images, ..data.clone() })
}

pub fn apply_permutation(data: &ImageDataset, seed: u64) -> ImageDataset {
    permute_pixels(data, &permutation(data.height * data.width, seed)).expect("length matches")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Crop {
    None,
    Center {
        height: usize,
        width: usize,
    },
    /// Independent random offset per image.
    Random {
        height: usize,
        width: usize,
        seed: u64,
    },
}

/// Bilinear sample at half-pixel centers with edge clamping.
fn resize_one(img: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let src = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(th * tw);
    for i in 0..th {
        let (y0, y1, fy) = src(i, th, h);
        for j in 0..tw {
            let (x0, x1, fx) = src(j, tw, w);
            let top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
            let bottom = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
            out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    out
}

/// Bilinear resize to `target_h × target_w`, then an optional crop.
pub fn resize_crop(data: &ImageDataset, target_h: usize, target_w: usize, crop: Crop) -> Result<ImageDataset> {
    if target_h < 4 || target_w < 4 {
        return Err(Error::InvalidArgument(format!(
            "target size {target_h}x{target_w} is below 4"
        )));
    }
    let (ch, cw) = match crop {
        Crop::None => (target_h, target_w),
        Crop::Center { height, width } | Crop::Random { height, width, .. } => (height, width),
    };
    if ch > target_h || cw > target_w || ch == 0 || cw == 0 {
        return Err(Error::InvalidArgument(format!(
            "crop {ch}x{cw} does not fit the resized {target_h}x{target_w} image"
        )));
    }
    let mut rng = match crop {
        Crop::Random { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let images = data
        .images
        .iter()
        .map(|im| {
            let big = resize_one(im, data.height, data.width, target_h, target_w);
            let (oy, ox) = match rng.as_mut() {
                Some(r) => (r.random_range(0..=target_h - ch), r.random_range(0..=target_w - cw)),
                None => ((target_h - ch) / 2, (target_w - cw) / 2),
            };
            (0..ch)
                .flat_map(|i| {
                    big[(oy + i) * target_w + ox..(oy + i) * target_w + ox + cw]
                        .iter()
                        .copied()
                })
                .collect()
        })
        .collect();
    Ok(ImageDataset {
        height: ch,
        width: cw,
        images,
        labels: data.labels.clone(),
    })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DTNC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    topology: Topology,
    config: Option<TrainConfig>,
    seed: u64,
}

/// A model with the training settings that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: DeepTensorNetwork,
    pub config: Option<TrainConfig>,
    pub seed: u64,
}

/// Layout: magic, version (u32 LE), header length (u64 LE) and JSON header,
/// tensor count (u32 LE), then for each tensor its name, rank and dims,
/// followed by all parameter data as little-endian f64.
pub fn write_checkpoint(ck: &Checkpoint, mut out: impl Write) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        topology: ck.net.topology(),
        config: ck.config.clone(),
        seed: ck.seed,
    })?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let params = ck.net.parameters();
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in &params {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for (_, t) in &params {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("corrupt length: need {n} bytes at offset {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("corrupt length".into()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = c.len()?;
    let header: Header =
        serde_json::from_slice(c.take(hlen)?).map_err(|e| Error::Format(format!("unknown topology: {e}")))?;
    let count = c.u32()? as usize;
    let mut shapes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = c.u32()? as usize;
        c.take(nlen)?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.len()).collect::<Result<Vec<usize>>>()?;
        shapes.push(shape);
    }
    let mut tensors = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::Format("corrupt length".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("eight bytes")))
            .collect();
        tensors.push(Tensor::new(&shape, data)?);
    }
    if c.at != bytes.len() {
        return Err(Error::Format(format!(
            "corrupt length: {} trailing bytes",
            bytes.len() - c.at
        )));
    }
    let net = DeepTensorNetwork::from_tensors(&header.topology, tensors)
        .map_err(|e| Error::Format(format!("unknown topology: {e}")))?;
    Ok(Checkpoint {
        net,
        config: header.config,
        seed: header.seed,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(ck, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(&std::fs::read(path)?)
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {}: expected key = value", i + 1)))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

/// Applies a config file on top of `config`.
pub fn load_train_config(path: impl AsRef<Path>, config: &mut TrainConfig) -> Result<()> {
    for (k, v) in parse_config(&std::fs::read_to_string(path)?)? {
        config.set(&k, &v)?;
    }
    config.validate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpo::{Activation, MpoConfig, MpoInit, MpoLayer};
    use crate::mps::{MpsHead, MpsHeadConfig};

    /// Three 2x3 images, hand-assembled byte by byte.
    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 3];
        img.extend([0, 255, 0, 255, 0, 255]);
        img.extend([1, 2, 3, 4, 5, 6]);
        img.extend([255, 255, 255, 0, 0, 0]);
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 3, 7, 0, 9];
        (img, lab)
    }

    fn write_fixture(dir: &Path, gz: bool) -> (std::path::PathBuf, std::path::PathBuf) {
        let (img, lab) = fixture();
        let ext = if gz { ".gz" } else { "" };
        let (pi, pl) = (dir.join(format!("img{ext}")), dir.join(format!("lab{ext}")));
        for (p, b) in [(&pi, img), (&pl, lab)] {
            if gz {
                let mut e = flate2::write::GzEncoder::new(File::create(p).unwrap(), flate2::Compression::default());
                e.write_all(&b).unwrap();
                e.finish().unwrap();
            } else {
                std::fs::write(p, b).unwrap();
            }
        }
        (pi, pl)
    }

    #[test]
    fn idx_fixture_parses_exactly() {
        let dir = tempfile::tempdir().unwrap();
        for gz in [false, true] {
            let (pi, pl) = write_fixture(dir.path(), gz);
            let d = load_idx(&pi, &pl).unwrap();
            assert_eq!((d.len(), d.height, d.width), (3, 2, 3));
            assert_eq!(d.labels, vec![7, 0, 9]);
            assert_eq!(d.images[0], vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
            assert_eq!(d.images[1][3], 4.0 / 255.0);
            assert_eq!(d.images[2], vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn idx_errors() {
        let (img, lab) = fixture();
        let mut bad = img.clone();
        bad[3] = 1;
        assert!(parse_idx_images(&bad).is_err());
        assert!(parse_idx_images(&img[..img.len() - 1]).is_err());
        assert!(parse_idx_labels(&lab[..9]).is_err());
        assert!(parse_idx_labels(&img).is_err());
        let dir = tempfile::tempdir().unwrap();
        let (pi, _) = write_fixture(dir.path(), false);
        let pl = dir.path().join("short");
        std::fs::write(&pl, [0, 0, 8, 1, 0, 0, 0, 2, 1, 2]).unwrap();
        assert!(load_idx(&pi, &pl).is_err());
    }

    #[test]
    fn idx_round_trip() {
        let (img, lab) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let (pi, pl) = write_fixture(dir.path(), false);
        let d = load_idx(pi, pl).unwrap();
        assert_eq!(to_idx(&d), (img, lab));
    }

    fn random_images(n: usize, h: usize, w: usize, seed: u64) -> ImageDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..n)
            .map(|_| (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        ImageDataset::new(h, w, images, (0..n).map(|i| i % 3).collect()).unwrap()
    }

    #[test]
    fn permutations() {
        let d = random_images(5, 4, 5, 1);
        assert_eq!(apply_permutation(&d, IDENTITY_PERMUTATION_SEED), d);
        let p = permutation(20, 42);
        assert_eq!(p, permutation(20, 42));
        let there = permute_pixels(&d, &p).unwrap();
        assert_ne!(there, d);
        assert_eq!(permute_pixels(&there, &invert_permutation(&p)).unwrap(), d);
        for (a, b) in d.images.iter().zip(&there.images) {
            let (mut a, mut b) = (a.clone(), b.clone());
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn resize_identity_and_constants() {
        let d = random_images(3, 6, 7, 2);
        let same = resize_crop(&d, 6, 7, Crop::None).unwrap();
        for (a, b) in d.images.iter().zip(&same.images) {
            assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12));
        }
        let c = ImageDataset::new(5, 5, vec![vec![0.3; 25]], vec![0]).unwrap();
        for (h, w) in [(4, 4), (9, 13), (5, 8)] {
            let r = resize_crop(&c, h, w, Crop::None).unwrap();
            assert!(r.images[0].iter().all(|v| (v - 0.3).abs() < 1e-15));
        }
        assert!(resize_crop(&c, 3, 8, Crop::None).is_err());
        assert!(resize_crop(&c, 6, 6, Crop::Center { height: 7, width: 2 }).is_err());
    }

    #[test]
    fn checkerboard_bilinear_by_hand() {
        let c = ImageDataset::new(2, 2, vec![vec![0.0, 1.0, 1.0, 0.0]], vec![0]).unwrap();
        let r = resize_crop(&c, 4, 4, Crop::None).unwrap();
        // source coordinates (i + 0.5)/2 - 0.5 clamp to 0, 0.25, 0.75, 1
        let f = [0.0, 0.25, 0.75, 1.0];
        for i in 0..4 {
            for j in 0..4 {
                let (y, x) = (f[i], f[j]);
                let want = (1.0 - y) * x + y * (1.0 - x);
                assert!((r.images[0][i * 4 + j] - want).abs() < 1e-15);
            }
        }
        assert!((r.images[0][5] - 0.375).abs() < 1e-15);
    }

    #[test]
    fn crops() {
        let d = random_images(4, 8, 8, 3);
        let c = resize_crop(&d, 8, 8, Crop::Center { height: 4, width: 6 }).unwrap();
        assert_eq!((c.height, c.width), (4, 6));
        assert_eq!(c.images[0][0], d.images[0][2 * 8 + 1]);
        let r1 = resize_crop(
            &d,
            10,
            10,
            Crop::Random {
                height: 8,
                width: 8,
                seed: 5,
            },
        )
        .unwrap();
        let r2 = resize_crop(
            &d,
            10,
            10,
            Crop::Random {
                height: 8,
                width: 8,
                seed: 5,
            },
        )
        .unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn stratified_subset() {
        let d = random_images(30, 2, 2, 4);
        let s = d.stratified(4, 0);
        assert_eq!(s.len(), 12);
        for c in 0..3 {
            assert_eq!(s.labels.iter().filter(|&&l| l == c).count(), 4);
        }
        assert_eq!(s, d.stratified(4, 0));
    }

    fn sample_net() -> DeepTensorNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = MpoLayer::init(
            MpoConfig {
                sites: Some(4),
                ..MpoConfig::uniform(3, Activation::MatrixExp)
            },
            MpoInit::default(),
            &mut rng,
        )
        .unwrap();
        let head = MpsHead::init(MpsHeadConfig::new(4, 3, Some(4)), 0.1, &mut rng).unwrap();
        DeepTensorNetwork::classifier(vec![layer], head).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let ck = Checkpoint {
            net: sample_net(),
            config: Some(TrainConfig::default()),
            seed: 17,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dtnc");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        for ((_, a), (_, b)) in ck.net.parameters().iter().zip(back.net.parameters()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn checkpoint_errors() {
        let ck = Checkpoint {
            net: sample_net(),
            config: None,
            seed: 0,
        };
        let mut buf = Vec::new();
        write_checkpoint(&ck, &mut buf).unwrap();
        assert!(
            matches!(read_checkpoint(&buf[..buf.len() - 3]), Err(Error::Format(m)) if m.contains("corrupt length"))
        );
        let mut foreign = buf.clone();
        foreign[..4].copy_from_slice(b"NOPE");
        assert!(read_checkpoint(&foreign).is_err());
        let mut newer = buf.clone();
        newer[4] = 2;
        assert!(matches!(read_checkpoint(&newer), Err(Error::Version { found: 2, .. })));
        let mut extra = buf;
        extra.push(0);
        assert!(read_checkpoint(&extra).is_err());
    }

    #[test]
    fn config_file() {
        let text = "# training\nlr = 0.01\n\nepochs=3  # short\noptimizer = adam\n";
        let kv = parse_config(text).unwrap();
        assert_eq!(kv[0], ("lr".to_string(), "0.01".to_string()));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, text).unwrap();
        let mut c = TrainConfig::default();
        load_train_config(&p, &mut c).unwrap();
        assert_eq!((c.lr, c.epochs), (0.01, 3));
        assert!(parse_config("lr 0.1").is_err());
        std::fs::write(&p, "bogus = 1").unwrap();
        assert!(load_train_config(&p, &mut c).is_err());
    }
}
