//! Bit-exact binary persistence: a small little-endian codec plus the
//! training checkpoint format (cloud, networks, optimizer moments).

use crate::error::{Error, Result};
use crate::gaussian::{GaussianCloud, GaussianPoint};
use crate::math::Quat;
use crate::mlp::TinyMlp;
use crate::unet::{SparseUNet, UNetConfig};
use nalgebra::Vector3;
use std::path::Path;

/// Little-endian binary writer/reader shared by the versioned file formats.
pub(crate) mod codec {
    use super::*;

    #[derive(Default)]
    pub struct BinWriter {
        pub buf: Vec<u8>,
    }

    impl BinWriter {
        pub fn new() -> Self {
            Self::default()
        }

        pub fn magic(&mut self, m: &[u8; 4]) {
            self.buf.extend_from_slice(m);
        }

        pub fn u8(&mut self, v: u8) {
            self.buf.push(v);
        }

        pub fn u32(&mut self, v: u32) {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }

        pub fn u64(&mut self, v: u64) {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }

        pub fn i64(&mut self, v: i64) {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }

        pub fn f64(&mut self, v: f64) {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }

        pub fn f64_slice(&mut self, vs: &[f64]) {
            self.u64(vs.len() as u64);
            for v in vs {
                self.f64(*v);
            }
        }
    }

    pub struct BinReader<'a> {
        data: &'a [u8],
        pos: usize,
        path: String,
    }

    impl<'a> BinReader<'a> {
        pub fn new(data: &'a [u8], path: &str) -> Self {
            BinReader {
                data,
                pos: 0,
                path: path.to_string(),
            }
        }

        fn err(&self, msg: &str) -> Error {
            Error::Format {
                path: self.path.clone(),
                msg: msg.to_string(),
            }
        }

        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            if self.pos + n > self.data.len() {
                return Err(self.err("unexpected end of file"));
            }
            let s = &self.data[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }

        pub fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
            let got = self.take(4)?;
            if got != m {
                return Err(self.err("bad magic"));
            }
            Ok(())
        }

        pub fn u8(&mut self) -> Result<u8> {
            Ok(self.take(1)?[0])
        }

        pub fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }

        pub fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }

        pub fn i64(&mut self) -> Result<i64> {
            Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }

        pub fn f64(&mut self) -> Result<f64> {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }

        pub fn f64_vec(&mut self) -> Result<Vec<f64>> {
            let n = self.u64()? as usize;
            if n > self.data.len() / 8 + 1 {
                return Err(self.err("length field exceeds file size"));
            }
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                out.push(self.f64()?);
            }
            Ok(out)
        }

        pub fn done(&self) -> Result<()> {
            if self.pos != self.data.len() {
                return Err(self.err("trailing bytes"));
            }
            Ok(())
        }
    }
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"SPCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Adam moments of one parameter group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamRecord {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Full training state: cloud parameters, every network, optimizer moments,
/// iteration counter, and the configuration hash. Round-trips bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config_hash: u64,
    pub parts: usize,
    pub sh_degree: usize,
    pub voxel_size: f64,
    pub cloud: GaussianCloud,
    pub nonrigid: TinyMlp,
    pub skin: TinyMlp,
    pub fusion: TinyMlp,
    pub topo_unet: Option<SparseUNet>,
    pub topo_mlp: Option<TinyMlp>,
    /// Groups in fixed order: positions, sh, opacity, scale, rotation,
    /// semantic, nonrigid, skin, fusion, topo.
    pub adam: Vec<AdamRecord>,
}

fn write_mlp(w: &mut codec::BinWriter, net: &TinyMlp) {
    w.u64(net.widths.len() as u64);
    for width in &net.widths {
        w.u64(*width as u64);
    }
    w.f64_slice(&net.flat_params());
}

fn read_mlp(r: &mut codec::BinReader) -> Result<TinyMlp> {
    let n = r.u64()? as usize;
    let mut widths = Vec::with_capacity(n);
    for _ in 0..n {
        widths.push(r.u64()? as usize);
    }
    let mut net = TinyMlp::new(&widths, 0, false);
    let flat = r.f64_vec()?;
    if flat.len() != net.param_count() {
        return Err(Error::Format {
            path: "<checkpoint>".into(),
            msg: "network parameter count mismatch".into(),
        });
    }
    net.set_flat_params(&flat);
    Ok(net)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut w = codec::BinWriter::new();
    w.magic(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(ck.iteration);
    w.u64(ck.config_hash);
    w.u64(ck.parts as u64);
    w.u64(ck.sh_degree as u64);
    w.f64(ck.voxel_size);

    let n = ck.cloud.len();
    let sh_len = ck.cloud.sh_coeffs() * 3;
    w.u64(n as u64);
    w.u64(sh_len as u64);
    for p in &ck.cloud.points {
        w.f64(p.position.x);
        w.f64(p.position.y);
        w.f64(p.position.z);
        for v in &p.sh {
            w.f64(*v);
        }
        w.f64(p.opacity_logit);
        for k in 0..3 {
            w.f64(p.log_scale[k]);
        }
        for v in p.rotation.to_array() {
            w.f64(v);
        }
        for v in &p.semantic_logits {
            w.f64(*v);
        }
    }
    for src in &ck.cloud.parent_index {
        w.i64(src.map(|v| v as i64).unwrap_or(-1));
    }

    write_mlp(&mut w, &ck.nonrigid);
    write_mlp(&mut w, &ck.skin);
    write_mlp(&mut w, &ck.fusion);
    match (&ck.topo_unet, &ck.topo_mlp) {
        (Some(unet), None) => {
            w.u8(0);
            w.u64(unet.enc0.in_c as u64);
            w.u64(unet.enc0.out_c as u64);
            w.u64(unet.enc1.out_c as u64);
            w.u64(unet.feature_width() as u64);
            w.f64_slice(&unet.flat_params());
        }
        (None, Some(mlp)) => {
            w.u8(1);
            write_mlp(&mut w, mlp);
        }
        _ => {
            return Err(Error::Usage(
                "checkpoint needs exactly one topology network".into(),
            ))
        }
    }
    w.u64(ck.adam.len() as u64);
    for rec in &ck.adam {
        w.f64_slice(&rec.m);
        w.f64_slice(&rec.v);
        w.u64(rec.t);
    }
    std::fs::write(path, w.buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = std::fs::read(path)?;
    let mut r = codec::BinReader::new(&data, &path.display().to_string());
    r.magic(&CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            path: path.display().to_string(),
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let iteration = r.u64()?;
    let config_hash = r.u64()?;
    let parts = r.u64()? as usize;
    let sh_degree = r.u64()? as usize;
    let voxel_size = r.f64()?;
    let n = r.u64()? as usize;
    let sh_len = r.u64()? as usize;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let position = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        let mut sh = Vec::with_capacity(sh_len);
        for _ in 0..sh_len {
            sh.push(r.f64()?);
        }
        let opacity_logit = r.f64()?;
        let log_scale = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        let rotation = Quat::new(r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let mut semantic_logits = Vec::with_capacity(parts);
        for _ in 0..parts {
            semantic_logits.push(r.f64()?);
        }
        points.push(GaussianPoint {
            position,
            sh,
            opacity_logit,
            log_scale,
            rotation,
            semantic_logits,
        });
    }
    let mut parent_index = Vec::with_capacity(n);
    for _ in 0..n {
        let v = r.i64()?;
        parent_index.push(if v < 0 { None } else { Some(v as usize) });
    }
    let nonrigid = read_mlp(&mut r)?;
    let skin = read_mlp(&mut r)?;
    let fusion = read_mlp(&mut r)?;
    let (topo_unet, topo_mlp) = match r.u8()? {
        0 => {
            let in_c = r.u64()? as usize;
            let c0 = r.u64()? as usize;
            let c1 = r.u64()? as usize;
            let fw = r.u64()? as usize;
            let mut unet = SparseUNet::new(
                in_c,
                &UNetConfig {
                    channels0: c0,
                    channels1: c1,
                    feature_width: fw,
                    seed: 0,
                },
            );
            let flat = r.f64_vec()?;
            if flat.len() != unet.param_count() {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    msg: "U-Net parameter count mismatch".into(),
                });
            }
            unet.set_flat_params(&flat);
            (Some(unet), None)
        }
        1 => (None, Some(read_mlp(&mut r)?)),
        other => {
            return Err(Error::Format {
                path: path.display().to_string(),
                msg: format!("bad topology network tag {other}"),
            })
        }
    };
    let groups = r.u64()? as usize;
    let mut adam = Vec::with_capacity(groups);
    for _ in 0..groups {
        let m = r.f64_vec()?;
        let v = r.f64_vec()?;
        let t = r.u64()?;
        adam.push(AdamRecord { m, v, t });
    }
    r.done()?;
    Ok(Checkpoint {
        iteration,
        config_hash,
        parts,
        sh_degree,
        voxel_size,
        cloud: GaussianCloud {
            points,
            parent_index,
        },
        nonrigid,
        skin,
        fusion,
        topo_unet,
        topo_mlp,
        adam,
    })
}
