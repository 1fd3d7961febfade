//! Run configuration: dataset generation and training parameters, parsed
//! from `key=value` text files with command-line overrides.

use crate::density::DensifyConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use std::collections::BTreeMap;
use std::path::Path;

/// Ablation switches mirroring the study rows: each disables exactly one
/// path of the pipeline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AblationSwitches {
    pub disable_topo_geo: bool,
    pub disable_semantic_loss: bool,
    pub disable_sg_densify: bool,
    pub disable_neighborhood_loss: bool,
    pub unet_as_mlp: bool,
}

impl AblationSwitches {
    pub fn apply(&mut self, name: &str) -> Result<()> {
        match name {
            "topo-geo" => self.disable_topo_geo = true,
            "semantic" => self.disable_semantic_loss = true,
            "sgd" => self.disable_sg_densify = true,
            "neighborhood" => self.disable_neighborhood_loss = true,
            "mlp" => self.unet_as_mlp = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation '{other}' (expected topo-geo, semantic, sgd, neighborhood, mlp)"
                )))
            }
        }
        Ok(())
    }
}

/// Parsed `key=value` pairs, insertion-order independent.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    pub values: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got '{}'",
                    lineno + 1,
                    raw
                )));
            };
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(KvConfig { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn set(&mut self, pair: &str) -> Result<()> {
        let Some((k, v)) = pair.split_once('=') else {
            return Err(Error::Config(format!("override '{pair}' is not key=value")));
        };
        self.values.insert(k.trim().to_string(), v.trim().to_string());
        Ok(())
    }

    fn take<T: std::str::FromStr>(&mut self, key: &str, into: &mut T) -> Result<()> {
        if let Some(v) = self.values.remove(key) {
            *into = v
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: '{v}'")))?;
        }
        Ok(())
    }

    fn finish(self, context: &str) -> Result<()> {
        if let Some(k) = self.values.keys().next() {
            return Err(Error::Config(format!("unknown {context} key '{k}'")));
        }
        Ok(())
    }
}

/// Synthetic dataset generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub width: usize,
    pub height: usize,
    pub cameras: usize,
    pub frames: usize,
    pub seed: u64,
    pub vertex_count: usize,
    /// Supersampling factor for the ground-truth point rasterizer.
    pub supersample: usize,
    /// Point disc radius at supersampled resolution, in pixels.
    pub point_radius: f64,
    pub camera_distance: f64,
    /// Focal length as a multiple of the image height.
    pub focal_factor: f64,
    pub motion_amplitude: f64,
    /// Camera index whose frames form the held-out test split.
    pub test_camera: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            width: 128,
            height: 128,
            cameras: 3,
            frames: 45,
            seed: 0,
            vertex_count: 6890,
            supersample: 4,
            point_radius: 3.0,
            camera_distance: 3.2,
            focal_factor: 1.4,
            motion_amplitude: 1.0,
            test_camera: 2,
        }
    }
}

impl GenConfig {
    pub fn from_kv(mut kv: KvConfig) -> Result<Self> {
        let mut c = GenConfig::default();
        kv.take("width", &mut c.width)?;
        kv.take("height", &mut c.height)?;
        kv.take("cameras", &mut c.cameras)?;
        kv.take("frames", &mut c.frames)?;
        kv.take("seed", &mut c.seed)?;
        kv.take("vertex_count", &mut c.vertex_count)?;
        kv.take("supersample", &mut c.supersample)?;
        kv.take("point_radius", &mut c.point_radius)?;
        kv.take("camera_distance", &mut c.camera_distance)?;
        kv.take("focal_factor", &mut c.focal_factor)?;
        kv.take("motion_amplitude", &mut c.motion_amplitude)?;
        kv.take("test_camera", &mut c.test_camera)?;
        kv.finish("gen-data")?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras == 0 || self.frames == 0 {
            return Err(Error::Config("need at least one camera and one frame".into()));
        }
        if self.test_camera >= self.cameras && self.cameras > 1 {
            return Err(Error::Config(format!(
                "test camera {} out of range for {} cameras",
                self.test_camera, self.cameras
            )));
        }
        if self.supersample == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config("resolution and supersample must be positive".into()));
        }
        if self.motion_amplitude < 0.0 || self.point_radius <= 0.0 {
            return Err(Error::Config("bad motion amplitude or point radius".into()));
        }
        Ok(())
    }
}

/// Training parameters. Learning rates follow per-group defaults; the
/// position rate decays exponentially to `lr_position_final_factor` of its
/// initial value over the run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub seed: u64,
    /// Forces ordered single-stream reductions for bit-exact repeatability.
    pub deterministic: bool,

    pub lr_position: f64,
    pub lr_position_final_factor: f64,
    pub lr_color: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_semantic: f64,
    pub lr_networks: f64,

    pub weights: LossWeights,

    pub densify_from: u64,
    pub densify_until_frac: f64,
    pub densify_every: u64,
    pub sg_densify_every: u64,
    pub densify: DensifyConfig,

    pub sh_degree: usize,
    pub pe_octaves: usize,
    pub nonrigid_hidden: usize,
    pub nonrigid_layers: usize,
    pub skin_hidden: usize,
    pub skin_layers: usize,
    pub fusion_hidden: usize,
    pub fusion_layers: usize,
    pub unet_channels0: usize,
    pub unet_channels1: usize,
    pub unet_feature_width: usize,
    pub voxel_size: f64,
    pub neighborhood_k: usize,
    pub isopos_k: usize,
    pub ssim_window: usize,

    pub ablations: AblationSwitches,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            seed: 0,
            deterministic: false,
            lr_position: 1.6e-4,
            lr_position_final_factor: 0.01,
            lr_color: 2.5e-3,
            lr_opacity: 5e-2,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_semantic: 2.5e-3,
            lr_networks: 1e-3,
            weights: LossWeights::default(),
            densify_from: 500,
            densify_until_frac: 0.6,
            densify_every: 100,
            sg_densify_every: 500,
            densify: DensifyConfig::default(),
            sh_degree: 0,
            pe_octaves: 4,
            nonrigid_hidden: 128,
            nonrigid_layers: 3,
            skin_hidden: 64,
            skin_layers: 2,
            fusion_hidden: 64,
            fusion_layers: 2,
            unet_channels0: 16,
            unet_channels1: 32,
            unet_feature_width: 16,
            voxel_size: 0.05,
            neighborhood_k: 5,
            isopos_k: 5,
            ssim_window: 11,
            ablations: AblationSwitches::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_kv(mut kv: KvConfig) -> Result<Self> {
        let mut c = TrainConfig::default();
        kv.take("iterations", &mut c.iterations)?;
        kv.take("seed", &mut c.seed)?;
        kv.take("deterministic", &mut c.deterministic)?;
        kv.take("lr.position", &mut c.lr_position)?;
        kv.take("lr.position_final_factor", &mut c.lr_position_final_factor)?;
        kv.take("lr.color", &mut c.lr_color)?;
        kv.take("lr.opacity", &mut c.lr_opacity)?;
        kv.take("lr.scale", &mut c.lr_scale)?;
        kv.take("lr.rotation", &mut c.lr_rotation)?;
        kv.take("lr.semantic", &mut c.lr_semantic)?;
        kv.take("lr.networks", &mut c.lr_networks)?;
        kv.take("loss.mask", &mut c.weights.mask)?;
        kv.take("loss.ssim", &mut c.weights.ssim)?;
        kv.take("loss.lpips", &mut c.weights.lpips)?;
        kv.take("loss.skin", &mut c.weights.skin)?;
        kv.take("loss.isopos", &mut c.weights.isopos)?;
        kv.take("loss.semantic", &mut c.weights.semantic)?;
        kv.take("loss.neighborhood", &mut c.weights.neighborhood)?;
        kv.take("densify.from", &mut c.densify_from)?;
        kv.take("densify.until_frac", &mut c.densify_until_frac)?;
        kv.take("densify.every", &mut c.densify_every)?;
        kv.take("densify.sg_every", &mut c.sg_densify_every)?;
        kv.take("densify.grad_threshold", &mut c.densify.grad_threshold)?;
        kv.take("densify.opacity_threshold", &mut c.densify.opacity_threshold)?;
        kv.take("densify.scale_threshold", &mut c.densify.scale_split_threshold)?;
        kv.take("densify.split_shrink", &mut c.densify.split_shrink)?;
        kv.take("sh_degree", &mut c.sh_degree)?;
        kv.take("pe_octaves", &mut c.pe_octaves)?;
        kv.take("net.nonrigid_hidden", &mut c.nonrigid_hidden)?;
        kv.take("net.nonrigid_layers", &mut c.nonrigid_layers)?;
        kv.take("net.skin_hidden", &mut c.skin_hidden)?;
        kv.take("net.skin_layers", &mut c.skin_layers)?;
        kv.take("net.fusion_hidden", &mut c.fusion_hidden)?;
        kv.take("net.fusion_layers", &mut c.fusion_layers)?;
        kv.take("unet.c0", &mut c.unet_channels0)?;
        kv.take("unet.c1", &mut c.unet_channels1)?;
        kv.take("unet.feature_width", &mut c.unet_feature_width)?;
        kv.take("voxel.size", &mut c.voxel_size)?;
        kv.take("neighborhood.k", &mut c.neighborhood_k)?;
        kv.take("isopos.k", &mut c.isopos_k)?;
        kv.take("ssim.window", &mut c.ssim_window)?;
        kv.finish("train")?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iteration count must be positive".into()));
        }
        let rates = [
            self.lr_position,
            self.lr_color,
            self.lr_opacity,
            self.lr_scale,
            self.lr_rotation,
            self.lr_semantic,
            self.lr_networks,
        ];
        if rates.iter().any(|r| *r < 0.0 || !r.is_finite()) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        let ws = [
            self.weights.mask,
            self.weights.ssim,
            self.weights.lpips,
            self.weights.skin,
            self.weights.isopos,
            self.weights.semantic,
            self.weights.neighborhood,
        ];
        if ws.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.weights.lpips != 0.0 {
            return Err(Error::Config(
                "the perceptual loss slot is unimplemented; loss.lpips must stay 0".into(),
            ));
        }
        if self.voxel_size <= 0.0 {
            return Err(Error::Config("voxel size must be positive".into()));
        }
        if self.sh_degree > 2 {
            return Err(Error::Config("SH degree capped at 2".into()));
        }
        Ok(())
    }

    /// Canonical serialization used for the checkpoint's config hash.
    pub fn canonical_string(&self) -> String {
        format!("{self:?}")
    }

    /// FNV-1a hash of the canonical serialization.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.canonical_string().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values_and_rejects_unknown_keys() {
        let kv = KvConfig::parse("iterations = 500\nlr.color=1e-2\n# comment\nsh_degree=1\n").unwrap();
        let cfg = TrainConfig::from_kv(kv).unwrap();
        assert_eq!(cfg.iterations, 500);
        assert_eq!(cfg.lr_color, 1e-2);
        assert_eq!(cfg.sh_degree, 1);

        let kv = KvConfig::parse("no_such_key=1\n").unwrap();
        assert!(TrainConfig::from_kv(kv).is_err());
    }

    #[test]
    fn overrides_win() {
        let mut kv = KvConfig::parse("iterations=100\n").unwrap();
        kv.set("iterations=250").unwrap();
        let cfg = TrainConfig::from_kv(kv).unwrap();
        assert_eq!(cfg.iterations, 250);
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut kv = KvConfig::default();
        kv.set("iterations=0").unwrap();
        assert!(TrainConfig::from_kv(kv).is_err());
        let mut kv = KvConfig::default();
        kv.set("loss.lpips=0.5").unwrap();
        assert!(TrainConfig::from_kv(kv).is_err());
    }

    #[test]
    fn ablation_names_resolve() {
        let mut a = AblationSwitches::default();
        for name in ["topo-geo", "semantic", "sgd", "neighborhood", "mlp"] {
            a.apply(name).unwrap();
        }
        assert!(a.disable_topo_geo && a.unet_as_mlp);
        assert!(a.apply("bogus").is_err());
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = TrainConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.iterations += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
