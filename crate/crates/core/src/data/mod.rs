//! Synthetic shape-segmentation data: generation, splits, augmentation and
//! the on-disk layout.

pub mod augment;
pub mod netpbm;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result, Tensor};

/// One image with its dense label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// `[3, H, W]`, values in [0, 1].
    pub image: Tensor,
    /// Row-major `H·W` class indices.
    pub label: Vec<usize>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Rounds pixels to the 8-bit grid the on-disk format stores.
    pub fn quantized(mut self) -> Self {
        for v in self.image.data_mut() {
            *v = (*v * 255.0).round() / 255.0;
        }
        self
    }
}

/// Generation parameters, stored as `spec.txt` next to a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub size: usize,
    /// Background plus up to four shape classes.
    pub classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec { size: 64, classes: 4, min_shapes: 1, max_shapes: 4 }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.classes) {
            return Err(Error::Config { key: "classes".into(), detail: format!("{} not in 2..=5", self.classes) });
        }
        if self.size < 8 {
            return Err(Error::Config { key: "size".into(), detail: format!("{} below 8", self.size) });
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::Config {
                key: "min_shapes".into(),
                detail: format!("{} exceeds max_shapes {}", self.min_shapes, self.max_shapes),
            });
        }
        Ok(())
    }
}

/// Label-ratio split of `n` sample indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Picks `round(ratio·n)` labelled indices with a seeded shuffle. Both lists
/// come back sorted.
pub fn split(n: usize, ratio: f64, seed: u64) -> Result<Split> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config { key: "label_ratio".into(), detail: format!("{ratio} outside (0, 1]") });
    }
    let n_l = (ratio * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labeled = idx[..n_l].to_vec();
    let mut unlabeled = idx[n_l..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(Split { labeled, unlabeled })
}

/// Parses ratios written as `0.125` or `1/8`.
pub fn parse_ratio(s: &str) -> Result<f64> {
    let bad = || Error::Config { key: "label_ratio".into(), detail: format!("cannot parse `{s}`") };
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            a / b
        }
        None => s.trim().parse().map_err(|_| bad())?,
    };
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::Config { key: "label_ratio".into(), detail: format!("{s} outside (0, 1]") });
    }
    Ok(v)
}

/// A generated dataset with its labelled/unlabelled partition.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: GenSpec,
    pub seed: u64,
    pub samples: Vec<Sample>,
    pub split: Split,
}

fn id_name(id: u64) -> String {
    format!("{id:06}")
}

impl Dataset {
    /// Samples `0..count` from `seed`, quantized as if read back from disk.
    pub fn generate(spec: &GenSpec, count: usize, ratio: f64, seed: u64) -> Result<Self> {
        spec.validate()?;
        let samples = (0..count as u64).map(|id| synth::generate_sample(seed, id, spec).quantized()).collect();
        Ok(Dataset { spec: spec.clone(), seed, samples, split: split(count, ratio, seed)? })
    }

    /// Held-out samples drawn from ids after the training range.
    pub fn held_out(&self, count: usize) -> Vec<Sample> {
        let start = self.samples.iter().map(|s| s.id + 1).max().unwrap_or(0);
        (start..start + count as u64).map(|id| synth::generate_sample(self.seed, id, &self.spec).quantized()).collect()
    }

    pub fn labeled(&self) -> Vec<&Sample> {
        self.split.labeled.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn unlabeled(&self) -> Vec<&Sample> {
        self.split.unlabeled.iter().map(|&i| &self.samples[i]).collect()
    }

    /// Pixel counts per class over all samples.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.spec.classes];
        for s in &self.samples {
            for &l in &s.label {
                h[l] += 1;
            }
        }
        h
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let io = |what: &str, e| Error::io(format!("{what} in {}", dir.display()), e);
        fs::create_dir_all(dir.join("images")).map_err(|e| io("creating images/", e))?;
        fs::create_dir_all(dir.join("labels")).map_err(|e| io("creating labels/", e))?;
        let labeled: std::collections::BTreeSet<usize> = self.split.labeled.iter().copied().collect();
        let mut manifest = String::new();
        for (i, s) in self.samples.iter().enumerate() {
            let name = id_name(s.id);
            let (h, w) = (s.height(), s.width());
            let hw = h * w;
            let d = s.image.data();
            let mut rgb = Vec::with_capacity(3 * hw);
            for p in 0..hw {
                for c in 0..3 {
                    rgb.push((d[c * hw + p] * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
            let mut buf = Vec::new();
            netpbm::write_ppm(&mut buf, w, h, &rgb)?;
            fs::write(dir.join("images").join(format!("{name}.ppm")), buf).map_err(|e| io("writing image", e))?;
            let gray: Vec<u8> = s.label.iter().map(|&l| l as u8).collect();
            let mut buf = Vec::new();
            netpbm::write_pgm(&mut buf, w, h, &gray)?;
            fs::write(dir.join("labels").join(format!("{name}.pgm")), buf).map_err(|e| io("writing label", e))?;
            let kind = if labeled.contains(&i) { "labeled" } else { "unlabeled" };
            let _ = writeln!(manifest, "{name} {kind}");
        }
        fs::write(dir.join("manifest.txt"), manifest).map_err(|e| io("writing manifest.txt", e))?;
        let spec = format!(
            "size={}\nclasses={}\nmin_shapes={}\nmax_shapes={}\nseed={}\ncount={}\n",
            self.spec.size,
            self.spec.classes,
            self.spec.min_shapes,
            self.spec.max_shapes,
            self.seed,
            self.samples.len()
        );
        fs::write(dir.join("spec.txt"), spec).map_err(|e| io("writing spec.txt", e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            fs::read_to_string(dir.join(name)).map_err(|e| Error::io(format!("reading {}", dir.join(name).display()), e))
        };
        let kv: BTreeMap<String, String> = read("spec.txt")?
            .lines()
            .filter_map(|l| l.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string())))
            .collect();
        let get = |k: &str| -> Result<u64> {
            kv.get(k)
                .ok_or_else(|| Error::Data(format!("spec.txt lacks `{k}`")))?
                .parse()
                .map_err(|_| Error::Data(format!("spec.txt `{k}` is not an integer")))
        };
        let spec = GenSpec {
            size: get("size")? as usize,
            classes: get("classes")? as usize,
            min_shapes: get("min_shapes")? as usize,
            max_shapes: get("max_shapes")? as usize,
        };
        spec.validate()?;
        let seed = get("seed")?;

        let mut samples = Vec::new();
        let mut split = Split { labeled: Vec::new(), unlabeled: Vec::new() };
        for (lineno, line) in read("manifest.txt")?.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (name, kind) = line
                .split_once(' ')
                .ok_or_else(|| Error::Data(format!("manifest.txt:{}: expected `<id> labeled|unlabeled`", lineno + 1)))?;
            let id: u64 = name.parse().map_err(|_| Error::Data(format!("manifest.txt:{}: bad id `{name}`", lineno + 1)))?;
            match kind.trim() {
                "labeled" => split.labeled.push(samples.len()),
                "unlabeled" => split.unlabeled.push(samples.len()),
                k => return Err(Error::Data(format!("manifest.txt:{}: unknown kind `{k}`", lineno + 1))),
            }
            let img = netpbm::read_file(&dir.join("images").join(format!("{name}.ppm")))?;
            let lab = netpbm::read_file(&dir.join("labels").join(format!("{name}.pgm")))?;
            if img.channels != 3 || lab.channels != 1 || (img.width, img.height) != (lab.width, lab.height) {
                return Err(Error::Data(format!("sample {name}: image and label rasters disagree")));
            }
            let hw = img.width * img.height;
            let mut data = vec![0.0; 3 * hw];
            for p in 0..hw {
                for c in 0..3 {
                    data[c * hw + p] = img.data[3 * p + c] as f64 / 255.0;
                }
            }
            let label: Vec<usize> = lab.data.iter().map(|&v| v as usize).collect();
            if let Some(&bad) = label.iter().find(|&&l| l >= spec.classes) {
                return Err(Error::Data(format!("sample {name}: label {bad} outside {} classes", spec.classes)));
            }
            samples.push(Sample { id, image: Tensor::new(&[3, img.height, img.width], data)?, label });
        }
        Ok(Dataset { spec, seed, samples, split })
    }
}
