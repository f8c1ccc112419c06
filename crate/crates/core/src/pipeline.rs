//! The assembled model set and its checkpoint format.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::DType;

use crate::autoencoder::Autoencoder;
use crate::config::ModelConfig;
use crate::denoiser::Denoiser;
use crate::diffusion::NoiseSchedule;
use crate::params::{Adam, Checkpoint, ParamGroup, ParamStore};
use crate::prompt::PromptEncoder;
use crate::semantic::SemanticExtractor;
use crate::{Error, Result};

pub struct Models {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub autoencoder: Autoencoder,
    pub extractor: SemanticExtractor,
    pub denoiser: Denoiser,
    pub prompts: PromptEncoder,
    pub schedule: NoiseSchedule,
    param_seed: u64,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F64 => "f64",
        _ => "f32",
    }
}

fn meta<'a>(ckpt: &'a Checkpoint, key: &str) -> Result<&'a str> {
    ckpt.metadata
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))
}

impl Models {
    /// Fresh, seeded networks. Every group starts frozen.
    pub fn new(config: &ModelConfig, dtype: DType, param_seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(dtype, param_seed);
        let autoencoder = Autoencoder::new(&store, &config.autoencoder)?;
        let extractor = SemanticExtractor::new(&store, &config.extractor)?;
        let denoiser = Denoiser::new(&store, &config.denoiser)?;
        store.set_trainable(&[]);
        Ok(Self {
            config: config.clone(),
            prompts: PromptEncoder::new(config.denoiser.prompt_dim, param_seed),
            schedule: config.schedule.build()?,
            store,
            autoencoder,
            extractor,
            denoiser,
            param_seed,
        })
    }

    pub fn param_seed(&self) -> u64 {
        self.param_seed
    }

    /// Weights and model metadata; callers add training state as needed.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint {
            tensors: self.store.snapshot(),
            metadata: BTreeMap::new(),
        };
        let m = &mut ckpt.metadata;
        m.insert("model_config".into(), serde_json::to_string(&self.config)?);
        m.insert("dtype".into(), dtype_name(self.store.dtype()).into());
        m.insert("param_seed".into(), self.param_seed.to_string());
        m.insert("latent_scale".into(), format!("{:e}", self.autoencoder.latent_scale()));
        for g in ParamGroup::ALL {
            m.insert(format!("checksum.{}", g.as_str()), self.store.checksum(&[g])?);
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>, adam: Option<&Adam>) -> Result<()> {
        let mut ckpt = self.to_checkpoint()?;
        ckpt.metadata.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        if let Some(a) = adam {
            a.write_state(&mut ckpt);
        }
        ckpt.save(path)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(meta(ckpt, "model_config")?)?;
        let dtype = match meta(ckpt, "dtype")? {
            "f64" => DType::F64,
            "f32" => DType::F32,
            other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
        };
        let seed = meta(ckpt, "param_seed")?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad param_seed: {e}")))?;
        let models = Self::new(&config, dtype, seed)?;
        models.store.load_from(&ckpt.tensors)?;
        let scale: f64 = meta(ckpt, "latent_scale")?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad latent_scale: {e}")))?;
        models.autoencoder.set_latent_scale(scale)?;
        for g in ParamGroup::ALL {
            if let Some(expect) = ckpt.metadata.get(&format!("checksum.{}", g.as_str())) {
                let got = models.store.checksum(&[g])?;
                if &got != expect {
                    return Err(Error::Checkpoint(format!("checksum mismatch for group {g}")));
                }
            }
        }
        Ok(models)
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let ckpt = Checkpoint::load(path)?;
        let models = Self::from_checkpoint(&ckpt)?;
        Ok((models, ckpt))
    }
}
