//! Synthetic paired-translation tasks, PNG folder ingestion, and batching.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_rng, streams};
use crate::tensor::{Scalar, Tensor};

/// Target colors of the three-mode task: red, green, blue.
pub const PALETTE: [[f64; 3]; 3] = [[1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];

#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    ThreeModeColor,
    FixedTexture,
    PngFolder(PathBuf),
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::ThreeModeColor => "three-mode-color",
            TaskKind::FixedTexture => "fixed-texture",
            TaskKind::PngFolder(_) => "png-folder",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Square image side in pixels.
    pub size: usize,
    /// Shapes drawn over the background of each label layout.
    pub regions: usize,
    pub classes: usize,
    /// Number of samples in the dataset.
    pub count: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::ThreeModeColor,
            size: 32,
            regions: 4,
            classes: 3,
            count: 512,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind != TaskKind::ThreeModeColor && self.kind != TaskKind::FixedTexture {
            return Ok(());
        }
        if self.size < 8 || self.size % 4 != 0 {
            return Err(Error::Config(format!("task.size must be a multiple of 4 and at least 8, got {}", self.size)));
        }
        if self.classes < 2 {
            return Err(Error::Config("task.classes must be at least 2".into()));
        }
        if self.count == 0 {
            return Err(Error::Config("task.count must be positive".into()));
        }
        Ok(())
    }
}

/// One (condition, target) pair. Images are HWC in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: usize,
    pub x: Tensor<f64>,
    pub y: Tensor<f64>,
    /// Palette index drawn for each class (three-mode task only).
    pub modes: Vec<usize>,
}

enum Shape {
    Rect { cy: f64, cx: f64, hy: f64, hx: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { cy, cx, hy, hx } => (y - cy).abs() <= hy && (x - cx).abs() <= hx,
            Shape::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
        }
    }
}

/// Class id of every pixel: background 0 with `regions` random shapes of
/// classes `1..classes` painted on top in order.
fn label_layout(spec: &TaskSpec, rng: &mut impl Rng) -> Vec<usize> {
    let s = spec.size as f64;
    let mut labels = vec![0usize; spec.size * spec.size];
    for _ in 0..spec.regions {
        let class = rng.gen_range(1..spec.classes);
        let (cy, cx) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let (a, b) = (rng.gen_range(s / 8.0..s / 3.0), rng.gen_range(s / 8.0..s / 3.0));
        let shape = if rng.gen_bool(0.5) {
            Shape::Rect { cy, cx, hy: a, hx: b }
        } else {
            Shape::Ellipse { cy, cx, ry: a, rx: b }
        };
        for i in 0..spec.size {
            for j in 0..spec.size {
                if shape.contains(i as f64 + 0.5, j as f64 + 0.5) {
                    labels[i * spec.size + j] = class;
                }
            }
        }
    }
    labels
}

fn one_hot(labels: &[usize], size: usize, classes: usize) -> Tensor<f64> {
    let mut data = vec![-1.0; labels.len() * classes];
    for (p, &c) in labels.iter().enumerate() {
        data[p * classes + c] = 1.0;
    }
    Tensor::new(&[size, size, classes], data).expect("label shape")
}

/// Deterministic texture of class `c` at pixel `(i, j)` for channel `k`:
/// a class base color plus a low-frequency plane wave.
pub fn texture_value(c: usize, i: usize, j: usize, k: usize, size: usize) -> f64 {
    let base = 0.45 * (((c * 3 + k) as f64) * 2.399).cos();
    let fy = (c % 3) as f64;
    let fx = (1 + c / 3 % 2) as f64;
    let phase = (c * 7 + k * 3) as f64 * 0.9;
    let arg = 2.0 * std::f64::consts::PI * (fy * i as f64 + fx * j as f64) / size as f64 + phase;
    base + 0.4 * arg.sin()
}

/// Generates sample `id` of a synthetic task. Pure in `(spec, id)`.
pub fn make_sample(spec: &TaskSpec, id: usize) -> Result<PairedSample> {
    spec.validate()?;
    if id >= spec.count {
        return Err(Error::invalid("make_sample", format!("id {id} >= dataset size {}", spec.count)));
    }
    let mut rng = derive_rng(spec.seed, streams::DATA, id as u64);
    let labels = label_layout(spec, &mut rng);
    let n = spec.size;
    let x = one_hot(&labels, n, spec.classes);
    let (y, modes) = match spec.kind {
        TaskKind::ThreeModeColor => {
            let modes: Vec<usize> = (0..spec.classes).map(|_| rng.gen_range(0..3)).collect();
            let data = labels.iter().flat_map(|&c| PALETTE[modes[c]]).collect();
            (Tensor::new(&[n, n, 3], data)?, modes)
        }
        TaskKind::FixedTexture => {
            let mut data = Vec::with_capacity(n * n * 3);
            for (p, &c) in labels.iter().enumerate() {
                for k in 0..3 {
                    data.push(texture_value(c, p / n, p % n, k, n));
                }
            }
            (Tensor::new(&[n, n, 3], data)?, Vec::new())
        }
        TaskKind::PngFolder(_) => {
            return Err(Error::invalid("make_sample", "png-folder samples are loaded, not generated"));
        }
    };
    Ok(PairedSample { id, x, y, modes })
}

/// Maps an 8-bit channel value to [-1, 1].
pub fn byte_to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

pub fn unit_to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn image_error(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Reads an 8-bit RGB PNG as an HWC tensor in [-1, 1].
pub fn read_png(path: &Path) -> Result<Tensor<f64>> {
    let file = fs::File::open(path).map_err(|e| image_error(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| image_error(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_error(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_error(path, e))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(image_error(
            path,
            format!("expected 8-bit RGB, found {:?} {:?}", info.color_type, info.bit_depth),
        ));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let data = buf[..h * w * 3].iter().map(|&b| byte_to_unit(b)).collect();
    Tensor::new(&[h, w, 3], data)
}

/// Writes an HWC tensor with three channels as an 8-bit RGB PNG.
pub fn write_png(path: &Path, img: &Tensor<f64>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(image_error(path, format!("expected (H, W, 3) image, got {s:?}")));
    }
    let file = fs::File::create(path).map_err(|e| image_error(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), s[1] as u32, s[0] as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| image_error(path, e))?;
    let bytes: Vec<u8> = img.data().iter().map(|&v| unit_to_byte(v)).collect();
    writer.write_image_data(&bytes).map_err(|e| image_error(path, e))?;
    writer.finish().map_err(|e| image_error(path, e))
}

/// In-memory paired dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<PairedSample>,
    pub x_channels: usize,
    pub y_channels: usize,
}

impl Dataset {
    /// Generates a synthetic task or loads a PNG folder.
    pub fn from_task(spec: &TaskSpec) -> Result<Self> {
        match &spec.kind {
            TaskKind::PngFolder(root) => Self::load_png_folder(root),
            _ => {
                let samples = (0..spec.count).map(|id| make_sample(spec, id)).collect::<Result<Vec<_>>>()?;
                Ok(Dataset {
                    samples,
                    x_channels: spec.classes,
                    y_channels: 3,
                })
            }
        }
    }

    /// Loads `root/A/<id>.png` (condition) and `root/B/<id>.png` (target).
    pub fn load_png_folder(root: &Path) -> Result<Self> {
        let dir_a = root.join("A");
        let mut ids = Vec::new();
        let entries = fs::read_dir(&dir_a).map_err(|e| image_error(&dir_a, e))?;
        for entry in entries {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let id: usize = stem
                .parse()
                .map_err(|_| image_error(&path, "file name is not a decimal id"))?;
            ids.push((id, stem));
        }
        ids.sort();
        if ids.is_empty() {
            return Err(Error::invalid("dataset", format!("no PNG files in {}", dir_a.display())));
        }
        let mut samples = Vec::with_capacity(ids.len());
        for (id, stem) in ids {
            let pa = dir_a.join(format!("{stem}.png"));
            let pb = root.join("B").join(format!("{stem}.png"));
            let x = read_png(&pa)?;
            let y = read_png(&pb)?;
            if x.shape() != y.shape() {
                return Err(image_error(
                    &pb,
                    format!("size {:?} differs from {:?} of {}", y.shape(), x.shape(), pa.display()),
                ));
            }
            samples.push(PairedSample {
                id,
                x,
                y,
                modes: Vec::new(),
            });
        }
        Ok(Dataset {
            samples,
            x_channels: 3,
            y_channels: 3,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks samples into NHWC batches, flipping the flagged ones.
    pub fn gather<T: Scalar>(&self, indices: &[usize], flips: &[bool]) -> Result<Batch<T>> {
        let mut xs = Vec::with_capacity(indices.len());
        let mut ys = Vec::with_capacity(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            let s = &self.samples[i];
            let flip = flips.get(k).copied().unwrap_or(false);
            xs.push(maybe_flip(&s.x, flip).cast());
            ys.push(maybe_flip(&s.y, flip).cast());
        }
        Ok(Batch {
            indices: indices.to_vec(),
            flips: flips.to_vec(),
            x: Tensor::stack(&xs)?,
            y: Tensor::stack(&ys)?,
        })
    }

    /// Writes the dataset in folder layout plus a manifest.
    pub fn write_folder(&self, root: &Path, spec: &TaskSpec) -> Result<()> {
        if self.x_channels != 3 {
            return Err(Error::Config(format!(
                "PNG export needs 3 label channels, task has {}",
                self.x_channels
            )));
        }
        fs::create_dir_all(root.join("A"))?;
        fs::create_dir_all(root.join("B"))?;
        let width = self.len().saturating_sub(1).to_string().len();
        let mut manifest = format!(
            "task = \"{}\"\nsize = {}\nregions = {}\nclasses = {}\ncount = {}\nseed = {}\n",
            spec.kind.name(),
            spec.size,
            spec.regions,
            spec.classes,
            spec.count,
            spec.seed
        );
        for s in &self.samples {
            let name = format!("{:0width$}.png", s.id);
            write_png(&root.join("A").join(&name), &s.x)?;
            write_png(&root.join("B").join(&name), &s.y)?;
            if !s.modes.is_empty() {
                let modes: Vec<String> = s.modes.iter().map(usize::to_string).collect();
                manifest.push_str(&format!("modes.{} = \"{}\"\n", s.id, modes.join(",")));
            }
        }
        fs::write(root.join("manifest.txt"), manifest)?;
        Ok(())
    }
}

fn maybe_flip(img: &Tensor<f64>, flip: bool) -> Tensor<f64> {
    if !flip {
        return img.clone();
    }
    let s = img.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for i in 0..h {
        for j in (0..w).rev() {
            out.extend_from_slice(&src[(i * w + j) * c..(i * w + j + 1) * c]);
        }
    }
    Tensor::new(s, out).expect("flip keeps shape")
}

#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    pub flips: Vec<bool>,
    /// (N, H, W, C_X)
    pub x: Tensor<T>,
    /// (N, H, W, C_Y)
    pub y: Tensor<T>,
}

/// Deterministic batch schedule: epoch `e` visits a permutation drawn from
/// `(seed, e)`, and each iteration's flips come from `(seed, iteration)`.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    pub len: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hflip: bool,
}

impl BatchSchedule {
    pub fn new(len: usize, batch_size: usize, seed: u64, hflip: bool) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("batch_iter", "empty dataset"));
        }
        if batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if batch_size > len {
            log::warn!("batch size {batch_size} exceeds dataset size {len}; using single batches of {len}");
        }
        Ok(BatchSchedule {
            len,
            batch_size,
            seed,
            hflip,
        })
    }

    /// Samples per emitted batch.
    pub fn effective_batch(&self) -> usize {
        self.batch_size.min(self.len)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.effective_batch()
    }

    /// Dataset order of epoch `epoch`.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut derive_rng(self.seed, streams::SHUFFLE, epoch));
        order
    }

    /// Indices and flip flags of the batch used at `iteration`.
    pub fn batch_at(&self, iteration: u64) -> (Vec<usize>, Vec<bool>) {
        let per_epoch = self.batches_per_epoch() as u64;
        let epoch = iteration / per_epoch;
        let slot = (iteration % per_epoch) as usize;
        let b = self.effective_batch();
        let indices = self.epoch_order(epoch)[slot * b..(slot + 1) * b].to_vec();
        let mut rng = derive_rng(self.seed, streams::FLIP, iteration);
        let flips = (0..b).map(|_| self.hflip && rng.gen_bool(0.5)).collect();
        (indices, flips)
    }
}

/// Endless stream of batches starting at iteration 0.
pub struct BatchIter<'a, T> {
    data: &'a Dataset,
    schedule: BatchSchedule,
    next: u64,
    _marker: std::marker::PhantomData<T>,
}

/// Iterates batches of `data` under the schedule of [`BatchSchedule`].
pub fn batch_iter<T: Scalar>(data: &Dataset, batch_size: usize, seed: u64, hflip: bool) -> Result<BatchIter<'_, T>> {
    let schedule = BatchSchedule::new(data.len(), batch_size, seed, hflip)?;
    Ok(BatchIter {
        data,
        schedule,
        next: 0,
        _marker: std::marker::PhantomData,
    })
}

impl<T: Scalar> Iterator for BatchIter<'_, T> {
    type Item = Result<Batch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        let (indices, flips) = self.schedule.batch_at(self.next);
        self.next += 1;
        Some(self.data.gather(&indices, &flips))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            count: 64,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn samples_are_pure_functions_of_spec_and_id() {
        for kind in [TaskKind::ThreeModeColor, TaskKind::FixedTexture] {
            let s = spec(kind);
            assert_eq!(make_sample(&s, 7).unwrap(), make_sample(&s, 7).unwrap());
            assert_ne!(make_sample(&s, 7).unwrap().x, make_sample(&s, 8).unwrap().x);
        }
    }

    #[test]
    fn values_in_range_and_labels_exact() {
        for kind in [TaskKind::ThreeModeColor, TaskKind::FixedTexture] {
            let s = spec(kind);
            for id in 0..16 {
                let p = make_sample(&s, id).unwrap();
                assert!(p.x.data().iter().all(|&v| v == 1.0 || v == -1.0));
                assert!(p.x.data().chunks(3).all(|c| c.iter().filter(|&&v| v == 1.0).count() == 1));
                assert!(p.y.data().iter().all(|v| v.abs() <= 1.0));
            }
        }
    }

    #[test]
    fn three_mode_targets_follow_modes() {
        let s = spec(TaskKind::ThreeModeColor);
        let p = make_sample(&s, 3).unwrap();
        for (xc, yc) in p.x.data().chunks(3).zip(p.y.data().chunks(3)) {
            let class = xc.iter().position(|&v| v == 1.0).unwrap();
            assert_eq!(yc, &PALETTE[p.modes[class]]);
        }
    }

    #[test]
    fn id_out_of_range() {
        assert!(make_sample(&spec(TaskKind::FixedTexture), 64).is_err());
    }

    #[test]
    fn byte_mapping() {
        assert_eq!(byte_to_unit(255), 1.0);
        assert_eq!(byte_to_unit(0), -1.0);
        assert!((byte_to_unit(128) - 0.00392).abs() < 1e-5);
        for b in [0u8, 1, 127, 128, 254, 255] {
            assert_eq!(unit_to_byte(byte_to_unit(b)), b);
        }
    }

    #[test]
    fn png_folder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = TaskSpec {
            count: 5,
            ..spec(TaskKind::ThreeModeColor)
        };
        let data = Dataset::from_task(&s).unwrap();
        data.write_folder(dir.path(), &s).unwrap();
        let back = Dataset::load_png_folder(dir.path()).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in data.samples.iter().zip(&back.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.x, b.x);
            assert_eq!(a.y, b.y);
        }
        assert!(fs::read_to_string(dir.path().join("manifest.txt")).unwrap().contains("modes.0"));
    }

    #[test]
    fn png_size_mismatch_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("A")).unwrap();
        fs::create_dir_all(dir.path().join("B")).unwrap();
        write_png(&dir.path().join("A/0.png"), &Tensor::zeros(&[4, 4, 3])).unwrap();
        write_png(&dir.path().join("B/0.png"), &Tensor::zeros(&[4, 8, 3])).unwrap();
        assert!(Dataset::load_png_folder(dir.path()).is_err());
        fs::write(dir.path().join("B/0.png"), b"not a png").unwrap();
        let err = Dataset::load_png_folder(dir.path()).unwrap_err();
        assert!(err.to_string().contains("0.png"));
    }

    #[test]
    fn flip_is_shared_by_input_and_target() {
        let s = spec(TaskKind::FixedTexture);
        let data = Dataset::from_task(&s).unwrap();
        let plain = data.gather::<f64>(&[2], &[false]).unwrap();
        let flipped = data.gather::<f64>(&[2], &[true]).unwrap();
        let n = 32;
        for t in [(&plain.x, &flipped.x, s.classes), (&plain.y, &flipped.y, 3)] {
            let (a, b, c) = t;
            for i in 0..n {
                for j in 0..n {
                    let p = (i * n + j) * c;
                    let q = (i * n + n - 1 - j) * c;
                    assert_eq!(a.data()[p..p + c], b.data()[q..q + c]);
                }
            }
        }
    }

    #[test]
    fn schedule_is_deterministic_and_covers_epochs() {
        let a = BatchSchedule::new(10, 3, 4, true).unwrap();
        let b = BatchSchedule::new(10, 3, 4, true).unwrap();
        assert_eq!(a.batch_at(5), b.batch_at(5));
        let mut seen: Vec<usize> = (0..3).flat_map(|i| a.batch_at(i).0).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_ne!(a.epoch_order(0), a.epoch_order(1));
    }

    #[test]
    fn oversized_batch_is_truncated() {
        let s = BatchSchedule::new(5, 16, 0, false).unwrap();
        let (idx, flips) = s.batch_at(0);
        assert_eq!(idx.len(), 5);
        assert!(flips.iter().all(|f| !f));
        assert!(BatchSchedule::new(0, 1, 0, false).is_err());
    }

    #[test]
    fn mode_frequencies_are_uniform() {
        let s = TaskSpec {
            count: 1000,
            ..TaskSpec::default()
        };
        let mut counts = [0usize; 3];
        for id in 0..s.count {
            for m in make_sample(&s, id).unwrap().modes {
                counts[m] += 1;
            }
        }
        let total = (s.count * s.classes) as f64;
        let p = 1.0 / 3.0;
        let sigma = (total * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - total * p).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn iterator_yields_batches() {
        let data = Dataset::from_task(&spec(TaskKind::ThreeModeColor)).unwrap();
        let batches: Vec<_> = batch_iter::<f32>(&data, 8, 1, true).unwrap().take(3).collect();
        assert_eq!(batches[2].as_ref().unwrap().x.shape(), &[8, 32, 32, 3]);
    }
}
