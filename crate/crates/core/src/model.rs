//! Assembly of the three branches around the shared temporal encoder.

use serde::{Deserialize, Serialize};

use crate::classify::{self, AlignmentMap, PrototypePair, VisionTextFusion};
use crate::detection::{DetectionHead, DEFAULT_K_FRACTION};
use crate::diff::{Graph, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::rng::ChaCha8Rng;
use crate::scalar::Scalar;
use crate::sgnm::{Sgnm, SgnmConfig};
use crate::temporal::{TemporalConfig, TemporalEncoder};
use crate::tensor::Matrix;
use crate::textenc::{separation_loss, TextConfig, ToyTextEncoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionConfig {
    pub k_fraction: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            k_fraction: DEFAULT_K_FRACTION,
        }
    }
}

/// Branch switches for ablations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub sgnm: bool,
    pub dcsa: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { sgnm: true, dcsa: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub temporal: TemporalConfig,
    pub detection: DetectionConfig,
    pub sgnm: SgnmConfig,
    pub text: TextConfig,
    pub ablation: AblationConfig,
}

/// Where `T_text` comes from.
#[derive(Clone, Debug)]
pub enum TextSource {
    Toy(ToyTextEncoder),
    /// Fixed base embeddings (rows need not be normalized).
    Fixed(Matrix<f64>),
}

#[derive(Clone, Debug)]
pub struct DsaNet {
    pub config: ModelConfig,
    pub dim: usize,
    pub classes: Vec<String>,
    pub temporal: TemporalEncoder,
    pub detection: DetectionHead,
    pub sgnm: Option<Sgnm>,
    pub text: TextSource,
    pub fusion: VisionTextFusion,
}

/// Activations of one video at inference.
#[derive(Clone, Copy, Debug)]
pub struct VideoScores {
    pub f_video: Var,
    pub s_det: Var,
    pub t_enh: Var,
    pub align: AlignmentMap,
}

impl DsaNet {
    /// Registers every parameter in a fixed order. `fixed_text` replaces the
    /// toy encoder when given.
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        dim: usize,
        classes: &[String],
        config: &ModelConfig,
        fixed_text: Option<Matrix<f64>>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", classes.len())));
        }
        if let Some(i) = classes.iter().position(|c| c.is_empty()) {
            return Err(Error::EmptyClassName(i));
        }
        let temporal = TemporalEncoder::new(store, dim, &config.temporal, rng)?;
        let detection = DetectionHead::new(store, dim, config.detection.k_fraction, rng)?;
        let sgnm = if config.ablation.sgnm {
            Some(Sgnm::new(store, dim, &config.sgnm, rng)?)
        } else {
            config.sgnm.validate()?;
            None
        };
        let text = match fixed_text {
            Some(m) => {
                if m.shape() != (classes.len(), dim) {
                    return Err(Error::Config(format!(
                        "text embeddings are {:?}, expected {:?}",
                        m.shape(),
                        (classes.len(), dim)
                    )));
                }
                TextSource::Fixed(m)
            }
            None => TextSource::Toy(ToyTextEncoder::new(store, dim, &config.text, rng)?),
        };
        let fusion = VisionTextFusion::new(store, dim, rng)?;
        Ok(Self {
            config: config.clone(),
            dim,
            classes: classes.to_vec(),
            temporal,
            detection,
            sgnm,
            text,
            fusion,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// `T_text`, `C×D` unit rows.
    pub fn class_embeddings<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>) -> Result<Var> {
        match &self.text {
            TextSource::Toy(enc) => enc.encode_classes(g, store, &self.classes),
            TextSource::Fixed(m) => {
                let t = g.constant(m.cast());
                g.l2_normalize(t)
            }
        }
    }

    pub fn separation<T: Scalar>(&self, g: &mut Graph<T>, t_text: Var) -> Result<Var> {
        separation_loss(g, t_text)
    }

    /// `(F_video, S_det)`; this is the whole inference path for coarse scores.
    pub fn coarse<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, frames: Var) -> Result<(Var, Var)> {
        let f_video = self.temporal.forward(g, store, frames)?;
        let s_det = self.detection.score_frames(g, store, f_video)?;
        Ok((f_video, s_det))
    }

    pub fn scores<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, frames: Var, t_text: Var) -> Result<VideoScores> {
        let (f_video, s_det) = self.coarse(g, store, frames)?;
        let t_enh = self.fusion.enhance(g, store, t_text, f_video, s_det)?;
        let n = g.shape(f_video).0;
        let align = classify::alignment_map(g, f_video, t_enh, self.detection.k(n))?;
        Ok(VideoScores {
            f_video,
            s_det,
            t_enh,
            align,
        })
    }

    /// Event/background prototypes of one video, for inspection.
    pub fn prototypes<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, frames: Var) -> Result<PrototypePair> {
        let (f_video, s_det) = self.coarse(g, store, frames)?;
        classify::decouple_prototypes(g, f_video, s_det)
    }
}
