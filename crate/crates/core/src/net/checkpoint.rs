use std::path::Path;

use super::{NetConfig, Params};
use crate::attractor::MaskHead;
use crate::data::{norm_stats_from_file, norm_stats_to_file};
use crate::signal::NormStats;
use crate::tensor_file::TensorFile;
use crate::{Error, Result};

/// A trained network together with what inference needs to use it.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: NetConfig,
    pub params: Params,
    pub stats: NormStats,
    pub head: MaskHead,
    /// Salience threshold the model was trained with.
    pub threshold_pct: u32,
}

impl Model {
    pub fn to_tensor_file(&self) -> TensorFile {
        let mut tf = TensorFile::new();
        tf.set_meta("kind", "checkpoint")
            .set_meta("n_layers", self.cfg.n_layers)
            .set_meta("hidden", self.cfg.hidden)
            .set_meta("embed_dim", self.cfg.embed_dim)
            .set_meta("n_freq", self.cfg.n_freq)
            .set_meta("activation", self.cfg.activation)
            .set_meta("head", self.head)
            .set_meta("threshold_pct", self.threshold_pct);
        for (name, t) in self.params.named() {
            let data: Vec<f64> = t.iter().copied().collect();
            tf.push(&name, t.shape(), &data);
        }
        norm_stats_to_file(&self.stats, &mut tf);
        tf
    }

    pub fn from_tensor_file(tf: &TensorFile) -> Result<Self> {
        let kind = tf.meta("kind")?;
        if kind != "checkpoint" {
            return Err(Error::Format {
                format: "checkpoint",
                msg: format!("file holds a {kind:?}, not a checkpoint"),
            });
        }
        let cfg = NetConfig {
            n_layers: tf.meta_parse("n_layers")?,
            hidden: tf.meta_parse("hidden")?,
            embed_dim: tf.meta_parse("embed_dim")?,
            n_freq: tf.meta_parse("n_freq")?,
            activation: tf.meta("activation")?.parse()?,
        };
        cfg.validate()?;
        let mut params = Params::zeros(&cfg);
        for (name, mut dst) in params.named_mut() {
            let src = tf.get(&name)?;
            src.expect_shape(dst.shape())?;
            for (d, &s) in dst.iter_mut().zip(&src.data) {
                *d = s as f64;
            }
        }
        let stats = norm_stats_from_file(tf)?;
        if stats.mean.len() != cfg.n_freq {
            return Err(Error::shape(format!(
                "checkpoint stats cover {} bands, config has {}",
                stats.mean.len(),
                cfg.n_freq
            )));
        }
        Ok(Model {
            cfg,
            params,
            stats,
            head: tf.meta("head")?.parse()?,
            threshold_pct: tf.meta_parse("threshold_pct")?,
        })
    }
}

/// Parameters are written at 32-bit precision.
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    model.to_tensor_file().write(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    Model::from_tensor_file(&TensorFile::read(path)?)
}
