//! IDX ingestion, rotated variants and seeded mini-batch iteration.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::NUM_CLASSES;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Rotation angles used to build drifted variants, in degrees.
pub const ROTATION_ANGLES: [u32; 7] = [0, 15, 30, 45, 60, 75, 90];

/// In-memory image-classification dataset. Index `i` is a stable identifier
/// for the lifetime of the value (forward-cache keys depend on it).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    shape: [usize; 3],
    images: Vec<f32>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        shape: [usize; 3],
        images: Vec<f32>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::CountMismatch {
                images: images.len().checked_div(per).unwrap_or(0),
                labels: labels.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange {
                label: *bad as usize,
                classes: NUM_CLASSES,
            });
        }
        Ok(Self {
            name: name.into(),
            shape,
            images,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[channels, height, width]`
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    fn per_image(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.per_image();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn image_tensor(&self, i: usize) -> Tensor<f32> {
        Tensor::new(&self.shape, self.image(i).to_vec()).expect("sized")
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// New dataset holding `indices` in the given order, re-indexed from 0.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Result<Self> {
        let mut images = Vec::with_capacity(indices.len() * self.per_image());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "subset index {i} out of range for {} samples",
                    self.len()
                )));
            }
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(name, self.shape, images, labels)
    }

    /// Seeded prefix of a seeded permutation.
    pub fn sample(&self, name: impl Into<String>, count: usize, seed: u64) -> Result<Self> {
        if count > self.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot sample {count} of {} samples",
                self.len()
            )));
        }
        let perm = permutation(self.len(), seed);
        self.subset(name, &perm[..count])
    }

    /// Mini-batches for one epoch, shuffled by `(seed, epoch)`.
    pub fn batches(&self, batch: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
        Ok(batch_order(self.len(), batch, seed, epoch)?
            .into_iter()
            .map(|indices| Batch {
                labels: indices.iter().map(|&i| self.label(i)).collect(),
                indices,
            })
            .collect())
    }
}

/// One mini-batch: original dataset indices (the cache keys) and labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn images(&self, ds: &Dataset) -> Vec<Tensor<f32>> {
        self.indices.iter().map(|&i| ds.image_tensor(i)).collect()
    }
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Fisher-Yates shuffle of `0..n` for the given epoch, chunked into batches.
/// The final batch may be short.
pub fn batch_order(n: usize, batch: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch).map(<[usize]>::to_vec).collect())
}

fn read_header(r: &mut impl Read, path: &Path, expected: u32, dims: usize) -> Result<Vec<usize>> {
    let truncated = |e: std::io::Error| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated {
            path: path.to_path_buf(),
            detail: "header".into(),
        },
        _ => Error::io(path, e),
    };
    let magic = r.read_u32::<BigEndian>().map_err(truncated)?;
    if magic != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected,
        });
    }
    (0..dims)
        .map(|_| {
            r.read_u32::<BigEndian>()
                .map(|d| d as usize)
                .map_err(truncated)
        })
        .collect()
}

fn read_body(r: &mut impl Read, path: &Path, len: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(len);
    r.take(len as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    if buf.len() != len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("expected {len} payload bytes, found {}", buf.len()),
        });
    }
    Ok(buf)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).map_err(|e| Error::io(path, e))?,
    ))
}

/// Reads an IDX image/label pair. Pixels are scaled to `[0, 1]`.
///
/// Image files may be `N x H x W` (one channel) or `N x C x H x W`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut r = open(images_path)?;
    let magic = {
        let mut peek = [0u8; 4];
        r.read_exact(&mut peek).map_err(|_| Error::Truncated {
            path: images_path.to_path_buf(),
            detail: "header".into(),
        })?;
        u32::from_be_bytes(peek)
    };
    // 0x0803 for rank-3 files, 0x0804 for rank-4 (channelled) files.
    let dims = match magic {
        IDX_IMAGES_MAGIC => 3,
        0x0000_0804 => 4,
        found => {
            return Err(Error::BadMagic {
                path: images_path.to_path_buf(),
                found,
                expected: IDX_IMAGES_MAGIC,
            })
        }
    };
    let shape = (0..dims)
        .map(|_| {
            r.read_u32::<BigEndian>()
                .map(|d| d as usize)
                .map_err(|_| Error::Truncated {
                    path: images_path.to_path_buf(),
                    detail: "header".into(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let (n, chw) = match shape[..] {
        [n, h, w] => (n, [1, h, w]),
        [n, c, h, w] => (n, [c, h, w]),
        _ => unreachable!(),
    };
    let pixels = read_body(&mut r, images_path, n * chw.iter().product::<usize>())?;

    let mut r = open(labels_path)?;
    let ldims = read_header(&mut r, labels_path, IDX_LABELS_MAGIC, 1)?;
    let labels = read_body(&mut r, labels_path, ldims[0])?;
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let images = pixels.into_iter().map(|p| p as f32 / 255.0).collect();
    Dataset::new(name, chw, images, labels)
}

/// Writes a dataset as an IDX pair (pixels rounded back to bytes).
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let create = |p: &Path| {
        File::create(p)
            .map(BufWriter::new)
            .map_err(|e| Error::io(p, e))
    };
    let mut w = create(images_path)?;
    let [c, h, wd] = ds.shape();
    let io = |e| Error::io(images_path, e);
    if c == 1 {
        w.write_u32::<BigEndian>(IDX_IMAGES_MAGIC).map_err(io)?;
        for d in [ds.len(), h, wd] {
            w.write_u32::<BigEndian>(d as u32).map_err(io)?;
        }
    } else {
        w.write_u32::<BigEndian>(0x0000_0804).map_err(io)?;
        for d in [ds.len(), c, h, wd] {
            w.write_u32::<BigEndian>(d as u32).map_err(io)?;
        }
    }
    let bytes: Vec<u8> = ds
        .images
        .iter()
        .map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&bytes).map_err(io)?;
    w.flush().map_err(io)?;

    let mut w = create(labels_path)?;
    let io = |e| Error::io(labels_path, e);
    w.write_u32::<BigEndian>(IDX_LABELS_MAGIC).map_err(io)?;
    w.write_u32::<BigEndian>(ds.len() as u32).map_err(io)?;
    w.write_all(&ds.labels).map_err(io)?;
    w.flush().map_err(io)
}

/// Standard IDX file names inside a dataset directory.
pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let (img, lbl) = match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    load_idx(&dir.join(img), &dir.join(lbl))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RotationSpec {
    pub degrees: u32,
    pub sample_count: usize,
    pub seed: u64,
}

impl RotationSpec {
    pub fn new(degrees: u32, sample_count: usize, seed: u64) -> Result<Self> {
        if !ROTATION_ANGLES.contains(&degrees) {
            return Err(Error::InvalidArgument(format!(
                "rotation angle {degrees} not in {ROTATION_ANGLES:?}"
            )));
        }
        Ok(Self {
            degrees,
            sample_count,
            seed,
        })
    }
}

/// Samples `spec.sample_count` images without replacement and rotates each
/// by `spec.degrees`.
pub fn rotate_dataset(ds: &Dataset, spec: &RotationSpec) -> Result<Dataset> {
    let picked = ds.sample(
        format!("{}-rot{}", ds.name(), spec.degrees),
        spec.sample_count,
        spec.seed,
    )?;
    rotate_all(&picked, spec.degrees)
}

/// Disjoint fine-tuning and evaluation sets, both rotated by `degrees`.
pub fn rotated_split(
    ds: &Dataset,
    degrees: u32,
    train_count: usize,
    eval_count: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    RotationSpec::new(degrees, train_count, seed)?;
    if train_count + eval_count > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "need {} samples, dataset has {}",
            train_count + eval_count,
            ds.len()
        )));
    }
    let perm = permutation(ds.len(), seed);
    let train = ds.subset(format!("{}-rot{degrees}", ds.name()), &perm[..train_count])?;
    let eval = ds.subset(
        format!("{}-rot{degrees}-eval", ds.name()),
        &perm[train_count..train_count + eval_count],
    )?;
    Ok((rotate_all(&train, degrees)?, rotate_all(&eval, degrees)?))
}

fn rotate_all(ds: &Dataset, degrees: u32) -> Result<Dataset> {
    let [c, h, w] = ds.shape();
    if h != w {
        return Err(Error::InvalidArgument(format!(
            "rotation needs square images, got {h}x{w}"
        )));
    }
    let mut images = Vec::with_capacity(ds.images.len());
    for i in 0..ds.len() {
        let img = ds.image(i);
        for ch in 0..c {
            images.extend(rotate_plane(
                &img[ch * h * w..(ch + 1) * h * w],
                h,
                w,
                degrees,
            ));
        }
    }
    Dataset::new(ds.name(), ds.shape(), images, ds.labels.clone())
}

fn sin_cos_degrees(degrees: u32) -> (f64, f64) {
    match degrees % 360 {
        0 => (0.0, 1.0),
        90 => (1.0, 0.0),
        180 => (0.0, -1.0),
        270 => (-1.0, 0.0),
        d => (d as f64).to_radians().sin_cos(),
    }
}

/// Counter-clockwise rotation about `((h-1)/2, (w-1)/2)` with bilinear
/// sampling; source pixels outside the image read as zero.
pub fn rotate_plane(src: &[f32], h: usize, w: usize, degrees: u32) -> Vec<f32> {
    let (s, c) = sin_cos_degrees(degrees);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let at = |r: isize, col: isize| -> f64 {
        if r < 0 || col < 0 || r >= h as isize || col >= w as isize {
            0.0
        } else {
            src[r as usize * w + col as usize] as f64
        }
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let u = x as f64 - cx;
            let v = y as f64 - cy;
            let sc = cx + c * u - s * v;
            let sr = cy + s * u + c * v;
            let r0 = sr.floor();
            let c0 = sc.floor();
            let fr = sr - r0;
            let fc = sc - c0;
            let (r0, c0) = (r0 as isize, c0 as isize);
            let mut val = 0.0;
            // Skip zero-weight taps so integer-grid rotations copy exactly.
            for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
                for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
                    let wt = wr * wc;
                    if wt != 0.0 {
                        val += wt * at(r0 + dr, c0 + dc);
                    }
                }
            }
            out.push(val.clamp(0.0, 1.0) as f32);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(n: usize) -> Dataset {
        let images = (0..n * 784)
            .map(|i| ((i * 37) % 256) as f32 / 255.0)
            .collect();
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        Dataset::new("fixture", [1, 28, 28], images, labels).unwrap()
    }

    #[test]
    fn idx_round_trip_recovers_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let images = vec![0.0, 1.0, 128.0 / 255.0, 3.0 / 255.0];
        let ds = Dataset::new("t", [1, 1, 2], images.clone(), vec![3, 7]).unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.shape(), [1, 1, 2]);
        assert_eq!(back.image(0), &images[..2]);
        assert_eq!(back.image(1), &images[2..]);
        assert_eq!(back.labels(), &[3, 7]);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let ds = fixture(3);
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&ds, &ip, &lp).unwrap();

        // Wrong magic: a labels file passed as images.
        assert!(matches!(load_idx(&lp, &lp), Err(Error::BadMagic { .. })));

        // Truncated payload.
        let bytes = std::fs::read(&ip).unwrap();
        let cut = dir.path().join("cut");
        std::fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_idx(&cut, &lp), Err(Error::Truncated { .. })));

        // Label count mismatch.
        let short = ds.subset("short", &[0, 1]).unwrap();
        let (ip2, lp2) = (dir.path().join("i2"), dir.path().join("l2"));
        write_idx(&short, &ip2, &lp2).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp2),
            Err(Error::CountMismatch {
                images: 3,
                labels: 2
            })
        ));

        assert!(matches!(
            load_idx(&dir.path().join("missing"), &lp),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn zero_rotation_is_identity() {
        let ds = fixture(40);
        let rot = rotate_dataset(&ds, &RotationSpec::new(0, 16, 5).unwrap()).unwrap();
        let picked = ds.sample("p", 16, 5).unwrap();
        assert_eq!(rot.labels(), picked.labels());
        for i in 0..16 {
            assert_eq!(rot.image(i), picked.image(i));
        }
    }

    #[test]
    fn quarter_turn_is_transpose_then_row_flip() {
        let ds = fixture(4);
        let img = ds.image(2);
        let rot = rotate_plane(img, 28, 28, 90);
        for y in 0..28 {
            for x in 0..28 {
                // transpose T(y, x) = img(x, y); flip rows V(y, x) = T(27 - y, x)
                assert_eq!(rot[y * 28 + x], img[x * 28 + (27 - y)], "({y},{x})");
            }
        }
    }

    #[test]
    fn rotation_keeps_shape_and_range() {
        let ds = fixture(8);
        for deg in ROTATION_ANGLES {
            let r = rotate_dataset(&ds, &RotationSpec::new(deg, 8, 1).unwrap()).unwrap();
            assert_eq!(r.shape(), ds.shape());
            assert!(r.images.iter().all(|p| (0.0..=1.0).contains(p)));
        }
        assert!(RotationSpec::new(20, 8, 1).is_err());
    }

    #[test]
    fn rotation_is_deterministic() {
        let ds = fixture(50);
        let spec = RotationSpec::new(45, 20, 9).unwrap();
        assert_eq!(
            rotate_dataset(&ds, &spec).unwrap(),
            rotate_dataset(&ds, &spec).unwrap()
        );
    }

    #[test]
    fn batch_arithmetic_and_permutation() {
        let order = batch_order(1024, 20, 3, 0).unwrap();
        assert_eq!(order.len(), 52);
        assert_eq!(order.last().unwrap().len(), 4);
        let mut all: Vec<usize> = order.concat();
        all.sort_unstable();
        assert_eq!(all, (0..1024).collect::<Vec<_>>());
        assert_ne!(order, batch_order(1024, 20, 3, 1).unwrap());
        assert_eq!(order, batch_order(1024, 20, 3, 0).unwrap());
        assert!(batch_order(10, 0, 0, 0).is_err());
    }

    #[test]
    fn batches_carry_original_indices() {
        let ds = fixture(45);
        let batches = ds.batches(20, 1, 0).unwrap();
        assert_eq!(
            batches.iter().map(Batch::len).collect::<Vec<_>>(),
            vec![20, 20, 5]
        );
        for b in &batches {
            for (i, l) in b.indices.iter().zip(&b.labels) {
                assert_eq!(ds.label(*i), *l);
            }
        }
    }

    #[test]
    fn rotated_split_is_disjoint() {
        let ds = fixture(100);
        let (tr, ev) = rotated_split(&ds, 0, 30, 20, 4).unwrap();
        let perm = permutation(100, 4);
        assert_eq!(tr.image(0), ds.image(perm[0]));
        assert_eq!(ev.image(0), ds.image(perm[30]));
        assert!(rotated_split(&ds, 0, 90, 20, 4).is_err());
    }
}
