//! Image/mask files, manifests, and seeded mini-batch schedules.

pub mod netpbm;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use netpbm::Image8;

pub use synth::{generate_synthetic, SynthConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative paths are resolved against the manifest's directory.
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["id", "image_path", "mask_path"])
        .map_err(csv_err)?;
    for e in entries {
        let image = e.image_path.to_string_lossy();
        let mask = e.mask_path.to_string_lossy();
        w.write_record([e.id.as_str(), &image, &mask])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(bytes.as_slice());
    let mut entries = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: e.position().map_or(0, |p| p.byte() as usize),
            msg: e.to_string(),
        })?;
        let offset = rec.position().map_or(0, |p| p.byte() as usize);
        if rec.len() != 3 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset,
                msg: format!(
                    "expected id,image_path,mask_path, found {} fields",
                    rec.len()
                ),
            });
        }
        entries.push(ManifestEntry {
            id: rec[0].to_owned(),
            image_path: rec[1].into(),
            mask_path: rec[2].into(),
        });
    }
    Ok(entries)
}

/// One image/mask pair as single-item tensors `[1,3,H,W]` and `[1,1,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
}

impl Sample {
    pub fn extent(&self) -> [usize; 2] {
        let s = self.image.shape();
        [s.h, s.w]
    }
}

/// Interleaved RGB bytes to a `[1,3,H,W]` tensor scaled by 1/255.
pub fn image_tensor(img: &Image8) -> Tensor {
    let (w, h) = (img.width, img.height);
    let plane = w * h;
    let mut data = vec![0.0f32; plane * img.channels];
    for (i, px) in img.data.chunks_exact(img.channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * plane + i] = v as f32 / 255.0;
        }
    }
    Tensor::from_vec([1, img.channels, h, w], data).expect("sizes agree")
}

/// Gray bytes to a binary `[1,1,H,W]` mask, foreground where the value is at
/// least 128.
pub fn mask_tensor(img: &Image8) -> Tensor {
    let data = img
        .data
        .iter()
        .map(|&v| if v >= 128 { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec([1, 1, img.height, img.width], data).expect("sizes agree")
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = Image8::read(path)?;
    if img.channels != 3 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: "expected a colour (P6) image".into(),
        });
    }
    Ok(image_tensor(&img))
}

pub fn load_sample(id: &str, image_path: &Path, mask_path: &Path) -> Result<Sample> {
    let image = read_image(image_path)?;
    let m = Image8::read(mask_path)?;
    if m.channels != 1 {
        return Err(Error::Format {
            path: mask_path.to_path_buf(),
            offset: 0,
            msg: "expected a gray (P5) mask".into(),
        });
    }
    let s = image.shape();
    if (s.w, s.h) != (m.width, m.height) {
        return Err(Error::ExtentMismatch {
            image: image_path.to_path_buf(),
            mask: mask_path.to_path_buf(),
            image_dims: (s.w, s.h),
            mask_dims: (m.width, m.height),
        });
    }
    Ok(Sample {
        id: id.to_owned(),
        image,
        mask: mask_tensor(&m),
    })
}

/// Saliency map `[1,1,H,W]` in [0, 1] to P5 bytes `round(255·S)`.
pub fn saliency_image(map: &Tensor) -> Image8 {
    let s = map.shape();
    let data = map
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Image8::new(s.w, s.h, 1, data)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Loads `dir/manifest.csv`.
    pub fn load(dir: &Path) -> Result<Self> {
        let entries = read_manifest(&dir.join("manifest.csv"))?;
        let samples = entries
            .iter()
            .map(|e| load_sample(&e.id, &dir.join(&e.image_path), &dir.join(&e.mask_path)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// One batch entry: sample index and augmentation variant in 0..8.
pub type BatchItem = (usize, u8);

/// Mini-batch order as a pure function of `(seed, epoch)`, so a run can be
/// resumed from its iteration count alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSchedule {
    pub len: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
}

impl BatchSchedule {
    pub fn new(len: usize, batch_size: usize, seed: u64, augment: bool) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config("dataset is empty".into()));
        }
        if batch_size == 0 || batch_size > len {
            return Err(Error::Config(format!(
                "batch size {batch_size} must be between 1 and the dataset size {len}"
            )));
        }
        Ok(BatchSchedule {
            len,
            batch_size,
            seed,
            augment,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.batch_size
    }

    /// Generator for `epoch`: seeded from `seed`, one stream per epoch.
    pub fn rng(&self, epoch: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        rng
    }

    /// Full shuffled order of one epoch, each index exactly once.
    pub fn epoch_order(&self, epoch: u64) -> Vec<BatchItem> {
        self.draw_epoch(epoch).0
    }

    /// The epoch order and the generator left after drawing it.
    pub fn draw_epoch(&self, epoch: u64) -> (Vec<BatchItem>, ChaCha8Rng) {
        let mut rng = self.rng(epoch);
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut rng);
        let items = order
            .into_iter()
            .map(|i| {
                (
                    i,
                    if self.augment {
                        rng.random_range(0..8u8)
                    } else {
                        0
                    },
                )
            })
            .collect();
        (items, rng)
    }

    pub fn epoch_of(&self, iteration: u64) -> u64 {
        iteration / self.batches_per_epoch() as u64
    }

    /// Batches of one epoch with the trailing partial batch dropped.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<BatchItem>> {
        self.epoch_order(epoch)
            .chunks_exact(self.batch_size)
            .map(<[_]>::to_vec)
            .collect()
    }

    /// The batch consumed at zero-based training iteration `iteration`.
    pub fn batch_at(&self, iteration: u64) -> Vec<BatchItem> {
        let k = (iteration % self.batches_per_epoch() as u64) as usize;
        let order = self.epoch_order(self.epoch_of(iteration));
        order[k * self.batch_size..(k + 1) * self.batch_size].to_vec()
    }
}
