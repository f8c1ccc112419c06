//! Sweep grids over sampler hyperparameters.

use std::path::Path;

use anyhow::{bail, Context, Result};
use semsr::prompt::PromptSet;
use semsr::sampler::{Preset, SamplerConfig, StartPoint};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Axes {
    pub guidance_scale: Vec<f64>,
    pub prompt_set: Vec<PromptSet>,
    pub start_point: Vec<StartPoint>,
}

/// Sampler fields held fixed across the grid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Fixed {
    pub num_steps: Option<usize>,
    pub seed: Option<u64>,
    pub start_timestep: Option<usize>,
    pub use_control: Option<bool>,
    pub use_semantic: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default = "default_preset")]
    pub preset: Preset,
    #[serde(default)]
    pub axes: Axes,
    #[serde(default)]
    pub fixed: Fixed,
}

fn default_preset() -> Preset {
    Preset::Wild
}

/// One cartesian-product point. Unset axes keep the preset value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub guidance_scale: Option<f64>,
    pub prompt_set: Option<PromptSet>,
    pub start_point: Option<StartPoint>,
}

impl GridPoint {
    /// Stable label such as `gs=8.5;prompt=negative`; `base` for the empty grid.
    pub fn key(&self) -> String {
        let mut parts = Vec::new();
        if let Some(g) = self.guidance_scale {
            parts.push(format!("gs={g}"));
        }
        if let Some(p) = self.prompt_set {
            parts.push(format!("prompt={}", p.as_str()));
        }
        if let Some(s) = self.start_point {
            parts.push(format!("start={}", s.as_str()));
        }
        if parts.is_empty() {
            "base".into()
        } else {
            parts.join(";")
        }
    }

    /// File-system friendly form of [`GridPoint::key`].
    pub fn slug(&self) -> String {
        self.key().replace(';', "_").replace('=', "-")
    }

    pub fn axis_value(&self, axis: &str) -> Option<String> {
        match axis {
            "guidance_scale" => self.guidance_scale.map(|g| g.to_string()),
            "prompt_set" => self.prompt_set.map(|p| p.as_str().to_string()),
            "start_point" => self.start_point.map(|s| s.as_str().to_string()),
            _ => None,
        }
    }
}

pub const AXES: [&str; 3] = ["guidance_scale", "prompt_set", "start_point"];

impl SweepGrid {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let g: SweepGrid = toml::from_str(s)?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml_str(&s).with_context(|| format!("parsing grid {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(g) = self.axes.guidance_scale.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
            bail!("guidance_scale values must be finite and non-negative, got {g}");
        }
        Ok(())
    }

    /// Axes with at least one value, in canonical order.
    pub fn active_axes(&self) -> Vec<&'static str> {
        AXES.iter()
            .copied()
            .filter(|a| match *a {
                "guidance_scale" => !self.axes.guidance_scale.is_empty(),
                "prompt_set" => !self.axes.prompt_set.is_empty(),
                _ => !self.axes.start_point.is_empty(),
            })
            .collect()
    }

    /// Cartesian product, guidance scale varying slowest.
    pub fn points(&self) -> Vec<GridPoint> {
        fn opts<T: Copy>(v: &[T]) -> Vec<Option<T>> {
            if v.is_empty() {
                vec![None]
            } else {
                v.iter().copied().map(Some).collect()
            }
        }
        let mut out = Vec::new();
        for g in opts(&self.axes.guidance_scale) {
            for p in opts(&self.axes.prompt_set) {
                for s in opts(&self.axes.start_point) {
                    out.push(GridPoint {
                        guidance_scale: g,
                        prompt_set: p,
                        start_point: s,
                    });
                }
            }
        }
        out
    }

    /// Effective sampler settings at `point`, starting from `base` (normally
    /// the preset merged with run-level settings).
    pub fn sampler_config(&self, base: &SamplerConfig, point: &GridPoint) -> SamplerConfig {
        let mut cfg = base.clone();
        let f = &self.fixed;
        if let Some(v) = f.num_steps {
            cfg.num_steps = v;
        }
        if let Some(v) = f.seed {
            cfg.seed = v;
        }
        if let Some(v) = f.start_timestep {
            cfg.start_timestep = Some(v);
        }
        if let Some(v) = f.use_control {
            cfg.use_control = v;
        }
        if let Some(v) = f.use_semantic {
            cfg.use_semantic = v;
        }
        if let Some(p) = point.prompt_set {
            cfg = cfg.with_prompt_set(p);
        }
        if let Some(g) = point.guidance_scale {
            cfg.guidance_scale = g;
        }
        if let Some(s) = point.start_point {
            cfg.start_point = s;
        }
        cfg
    }
}
