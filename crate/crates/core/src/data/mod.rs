//! Synthetic samples, the 7:1:2 split and the on-disk dataset layout.
//!
//! A dataset directory holds `images/<id>.ppm`, `masks/<id>.pgm` and
//! `manifest.csv` with an `id,split` header.

mod pnm;
mod synth;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use pnm::{
    decode_pnm, encode_pnm, image_to_tensor, read_image, read_mask, tensor_to_image, write_image, write_mask, Pnm,
};
pub use synth::{synth_dataset, synth_sample, Sample, MAX_FOREGROUND, MIN_FOREGROUND};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl SplitManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `id,split` rows in train, val, test order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,split\n");
        for split in [Split::Train, Split::Val, Split::Test] {
            for id in self.ids(split) {
                s.push_str(&format!("{id},{split}\n"));
            }
        }
        s
    }

    pub fn from_csv(text: &str, seed: u64) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("id,split") {
            return Err(Error::Config("manifest must start with the header 'id,split'".into()));
        }
        let mut m = SplitManifest {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            seed,
        };
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, split) = line
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("manifest line {}: expected id,split", i + 2)))?;
            let list = match split.trim().parse::<Split>()? {
                Split::Train => &mut m.train,
                Split::Val => &mut m.val,
                Split::Test => &mut m.test,
            };
            list.push(id.trim().to_string());
        }
        Ok(m)
    }
}

/// Shuffles positions with `seed`, then cuts `floor(n/10)` validation and
/// `floor(2n/10)` test ids; the remainder trains.
pub fn split_dataset(ids: &[String], seed: u64) -> Result<SplitManifest> {
    let n = ids.len();
    if n < 10 {
        return Err(Error::Config(format!("need at least 10 ids to split, got {n}")));
    }
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(b"splitmnf");
    let mut rng = ChaCha8Rng::from_seed(key);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (n_val, n_test) = (n / 10, 2 * n / 10);
    let n_train = n - n_val - n_test;
    let pick = |r: &[usize]| r.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();
    Ok(SplitManifest {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
        seed,
    })
}

/// Writes samples and manifest in the dataset directory layout.
pub fn save_dataset(dir: impl AsRef<Path>, samples: &[Sample], manifest: &SplitManifest) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for s in samples {
        write_image(dir.join("images").join(format!("{}.ppm", s.id)), &s.image)?;
        write_mask(dir.join("masks").join(format!("{}.pgm", s.id)), &s.mask)?;
    }
    let p = dir.join("manifest.csv");
    fs::write(&p, manifest.to_csv()).map_err(|e| Error::io(&p, e))
}

/// A dataset directory loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: SplitManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        let ids = self.manifest.ids(split);
        ids.iter()
            .filter_map(|id| self.samples.iter().find(|s| &s.id == id))
            .collect()
    }
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let p = dir.join("manifest.csv");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let manifest = SplitManifest::from_csv(&text, 0)?;
    let mut samples = Vec::with_capacity(manifest.len());
    for split in [Split::Train, Split::Val, Split::Test] {
        for id in manifest.ids(split) {
            let image = read_image(dir.join("images").join(format!("{id}.ppm")))?;
            let mask = read_mask(dir.join("masks").join(format!("{id}.pgm")))?;
            if (image.shape().h, image.shape().w) != (mask.shape().h, mask.shape().w) {
                return Err(Error::Config(format!("image and mask of '{id}' differ in size")));
            }
            samples.push(Sample {
                id: id.clone(),
                image,
                mask,
            });
        }
    }
    Ok(Dataset { manifest, samples })
}
