//! Aligned (video, audio, text) triples: synthetic generation and storage.

mod features;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InputDims, Modality};
use crate::rng::{self, Rng};
use crate::tensor::Tensor2D;

pub use features::{read_feature_file, write_feature_file, FeatureFile, UNLABELED};

/// Row-aligned features of the three modalities with optional concept labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub video: Tensor2D,
    pub audio: Tensor2D,
    pub text: Tensor2D,
    pub labels: Vec<Option<u32>>,
}

/// A batch drawn from a [`Dataset`].
pub type TripleBatch = Dataset;

impl Dataset {
    pub fn new(video: Tensor2D, audio: Tensor2D, text: Tensor2D, labels: Vec<Option<u32>>) -> Result<Self> {
        let n = video.rows();
        for (m, t) in [(Modality::Audio, &audio), (Modality::Text, &text)] {
            if t.rows() != n {
                return Err(Error::Format(format!("{m} has {} rows, video has {n}", t.rows())));
            }
        }
        if labels.len() != n {
            return Err(Error::Format(format!("{} labels for {n} rows", labels.len())));
        }
        Ok(Self { video, audio, text, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, m: Modality) -> &Tensor2D {
        match m {
            Modality::Video => &self.video,
            Modality::Audio => &self.audio,
            Modality::Text => &self.text,
        }
    }

    pub fn dims(&self) -> InputDims {
        InputDims {
            video: self.video.cols(),
            audio: self.audio.cols(),
            text: self.text.cols(),
        }
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<TripleBatch> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Range(format!("row {bad} of a {}-row dataset", self.len())));
        }
        let pick = |t: &Tensor2D| Tensor2D::from_fn(indices.len(), t.cols(), |r, c| t.get(indices[r], c));
        Ok(Self {
            video: pick(&self.video),
            audio: pick(&self.audio),
            text: pick(&self.text),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Writes `video.mmcf`, `audio.mmcf` and `text.mmcf` into `dir`.
    pub fn save_dir(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for m in Modality::ALL {
            write_feature_file(&dir.join(format!("{m}.mmcf")), m, self.get(m), &self.labels)?;
        }
        Ok(())
    }

    /// Reads the three files written by [`Dataset::save_dir`]. Labels are
    /// taken from the video file and must agree across files.
    pub fn load_dir(dir: &std::path::Path) -> Result<Self> {
        let mut files = Vec::new();
        for m in Modality::ALL {
            let f = read_feature_file(&dir.join(format!("{m}.mmcf")))?;
            if f.modality != m {
                return Err(Error::Format(format!("{m}.mmcf is tagged as {}", f.modality)));
            }
            files.push(f);
        }
        if files[1].labels != files[0].labels || files[2].labels != files[0].labels {
            return Err(Error::Format("feature files disagree on labels".into()));
        }
        let [video, audio, text] = <[FeatureFile; 3]>::try_from(files).expect("three files");
        Self::new(video.features, audio.features, text.features, video.labels)
    }
}

/// Parameters of the synthetic concept data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_concepts: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub dims: InputDims,
    pub noise_sigma: f64,
    pub cross_modal_offset_sigma: f64,
    pub clips_per_video: usize,
    /// Width of the latent that carries the per-clip jitter shared by all
    /// modalities.
    pub shared_latent_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_concepts: 8,
            n_train: 2048,
            n_test: 256,
            dims: InputDims {
                video: 64,
                audio: 48,
                text: 32,
            },
            noise_sigma: 0.25,
            cross_modal_offset_sigma: 0.1,
            clips_per_video: 4,
            shared_latent_dim: 8,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_concepts < 2 {
            return Err(Error::config("n_concepts", "must be at least 2"));
        }
        for (key, v) in [
            ("dim_video", self.dims.video),
            ("dim_audio", self.dims.audio),
            ("dim_text", self.dims.text),
            ("clips_per_video", self.clips_per_video),
            ("shared_latent_dim", self.shared_latent_dim),
        ] {
            if v < 1 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        for (key, v) in [("noise_sigma", self.noise_sigma), ("cross_modal_offset_sigma", self.cross_modal_offset_sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn normal_matrix(rows: usize, cols: usize, sigma: f64, rng: &mut Rng) -> Tensor2D {
    let dist = Normal::new(0.0, sigma).expect("validated sigma");
    Tensor2D::from_fn(rows, cols, |_, _| dist.sample(rng))
}

/// Draws concept prototypes once, then independent train and test clips.
///
/// Each clip's modality-`m` feature is `μ_{c,m} + P_m z + ε` where
/// `z ~ N(0, σ_off² I)` is one latent per clip shared by all modalities,
/// `P_m` is a fixed random map with `E[P_m P_mᵀ] = I`, and `ε ~ N(0, σ² I)`
/// is independent per modality. Clips come in videos of `clips_per_video`
/// consecutive rows sharing a concept; concept counts are balanced within one.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, rng::streams::DATA);
    let dims = [spec.dims.video, spec.dims.audio, spec.dims.text];
    let prototypes: Vec<Tensor2D> = dims.iter().map(|&d| normal_matrix(spec.n_concepts, d, 1.0, &mut rng)).collect();
    let ds = spec.shared_latent_dim;
    let maps: Vec<Tensor2D> = dims
        .iter()
        .map(|&d| normal_matrix(ds, d, 1.0 / (ds as f64).sqrt(), &mut rng))
        .collect();
    let mut split = |n: usize| -> Result<Dataset> {
        let labels = video_labels(n, spec.n_concepts, spec.clips_per_video, &mut rng);
        let latent = normal_matrix(n, ds, spec.cross_modal_offset_sigma.max(f64::MIN_POSITIVE), &mut rng);
        let mut feats = Vec::with_capacity(3);
        for m in 0..3 {
            let mut x = latent.matmul(&maps[m])?;
            if spec.cross_modal_offset_sigma == 0.0 {
                x.fill(0.0);
            }
            if spec.noise_sigma > 0.0 {
                x.add_assign(&normal_matrix(n, dims[m], spec.noise_sigma, &mut rng))?;
            }
            for (r, &c) in labels.iter().enumerate() {
                for (v, p) in x.row_mut(r).iter_mut().zip(prototypes[m].row(c as usize)) {
                    *v += p;
                }
            }
            feats.push(x);
        }
        let [video, audio, text] = <[Tensor2D; 3]>::try_from(feats).expect("three modalities");
        Dataset::new(video, audio, text, labels.into_iter().map(Some).collect())
    };
    let train = split(spec.n_train)?;
    let test = split(spec.n_test)?;
    Ok((train, test))
}

/// Balanced labels grouped into videos of consecutive clips, videos shuffled.
fn video_labels(n: usize, n_concepts: usize, clips_per_video: usize, rng: &mut Rng) -> Vec<u32> {
    let mut videos: Vec<Vec<u32>> = Vec::new();
    for c in 0..n_concepts {
        let count = n / n_concepts + usize::from(c < n % n_concepts);
        let clips = vec![c as u32; count];
        videos.extend(clips.chunks(clips_per_video).map(<[u32]>::to_vec));
    }
    videos.shuffle(rng);
    videos.concat()
}

/// Standard-normal `rows×cols` matrix, handy for benchmarks and tests.
pub fn standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> Tensor2D {
    Tensor2D::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}
