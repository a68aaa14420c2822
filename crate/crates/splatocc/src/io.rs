//! File formats: PFM float images (depth and RGB), binary PGM masks, the
//! GSPL Gaussian-set container, the VOXG voxel-grid container, camera-rig
//! JSON, and generic JSON helpers with a canonical config hash.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write as IoWrite};
use std::path::Path;

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gaussians::{GaussianSet, quat_to_rotation};
use crate::geometry::{Camera, CameraRig, Intrinsics, Pose};
use crate::image::{DepthMap, Image, Mask};
use crate::voxel::VoxelGrid;

// ---------------------------------------------------------------------------
// PFM

fn read_pfm_token(r: &mut impl Read) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::Format("unexpected end of PFM header".into()));
        }
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(byte[0]);
    }
    String::from_utf8(tok).map_err(|_| Error::Format("non-ascii PFM header".into()))
}

/// Writes a 1- or 3-channel float image as PFM (little-endian, scale -1.0,
/// bottom-up row order).
pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    let magic = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Config(format!("PFM supports 1 or 3 channels, got {c}"))),
    };
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "{magic}\n{} {}\n-1.0\n", img.width, img.height)?;
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            for c in 0..img.channels {
                w.write_f32::<LittleEndian>(img.get(x, y, c) as f32)?;
            }
        }
    }
    Ok(())
}

/// Reads a PFM image. Positive scale means big-endian payload.
pub fn read_pfm(path: &Path) -> Result<Image> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_pfm_token(&mut r)?;
    let channels = match magic.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::Format(format!("bad PFM magic {other:?}"))),
    };
    let width: usize = read_pfm_token(&mut r)?
        .parse()
        .map_err(|_| Error::Format("bad PFM width".into()))?;
    let height: usize = read_pfm_token(&mut r)?
        .parse()
        .map_err(|_| Error::Format("bad PFM height".into()))?;
    let scale: f64 = read_pfm_token(&mut r)?
        .parse()
        .map_err(|_| Error::Format("bad PFM scale".into()))?;
    if width == 0 || height == 0 {
        return Err(Error::Format("empty PFM image".into()));
    }
    let little = scale < 0.0;
    let mut img = Image::zeros(width, height, channels);
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..channels {
                let v = if little {
                    r.read_f32::<LittleEndian>()
                } else {
                    r.read_f32::<BigEndian>()
                }
                .map_err(|_| Error::Format("truncated PFM payload".into()))?;
                img.set(x, y, c, v as f64);
            }
        }
    }
    Ok(img)
}

/// Depth maps are stored as 1-channel PFM with invalid pixels encoded as 0.
pub fn write_depth_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let img = Image::from_fn(depth.width, depth.height, 1, |x, y, _| {
        depth.get(x, y).unwrap_or(0.0)
    });
    write_pfm(path, &img)
}

pub fn read_depth_pfm(path: &Path) -> Result<DepthMap> {
    let img = read_pfm(path)?;
    if img.channels != 1 {
        return Err(Error::Format("depth PFM must be single channel".into()));
    }
    let valid: Vec<bool> = img.data.iter().map(|&v| v > 0.0 && v.is_finite()).collect();
    Ok(DepthMap { width: img.width, height: img.height, values: img.data, valid })
}

// ---------------------------------------------------------------------------
// PGM

/// Binary (P5) 8-bit PGM; mask pixels become 0 or 255.
pub fn write_pgm_mask(path: &Path, mask: &Mask) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", mask.width, mask.height)?;
    let bytes: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_pgm_mask(path: &Path) -> Result<Mask> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_pfm_token(&mut r)?;
    if magic != "P5" {
        return Err(Error::Format(format!("bad PGM magic {magic:?}")));
    }
    let width: usize = read_pfm_token(&mut r)?.parse().map_err(|_| Error::Format("bad PGM width".into()))?;
    let height: usize = read_pfm_token(&mut r)?.parse().map_err(|_| Error::Format("bad PGM height".into()))?;
    let maxval: usize = read_pfm_token(&mut r)?.parse().map_err(|_| Error::Format("bad PGM maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Format("only 8-bit PGM supported".into()));
    }
    let mut bytes = vec![0u8; width * height];
    r.read_exact(&mut bytes).map_err(|_| Error::Format("truncated PGM payload".into()))?;
    Ok(Mask { width, height, data: bytes.iter().map(|&b| b >= 128).collect() })
}

/// Grayscale image in [0, 1] quantized to 8-bit PGM.
pub fn write_pgm_gray(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::Config("PGM grayscale output needs a 1-channel image".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// GSPL — Gaussian set container

const GSPL_MAGIC: &[u8; 4] = b"GSPL";

/// Layout: magic, u32 count, u32 feature dim, then per Gaussian little-endian
/// f32s: mean xyz, scale xyz, quaternion wxyz, opacity, feature values.
pub fn write_gspl(path: &Path, set: &GaussianSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(GSPL_MAGIC)?;
    w.write_u32::<LittleEndian>(set.len() as u32)?;
    w.write_u32::<LittleEndian>(set.feature_dim as u32)?;
    for i in 0..set.len() {
        let m = set.means[i];
        let s = set.scales[i];
        let q = set.rotations[i].into_inner();
        for v in [m.x, m.y, m.z, s.x, s.y, s.z, q.w, q.i, q.j, q.k, set.opacities[i]] {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        for &f in set.feature(i) {
            w.write_f32::<LittleEndian>(f as f32)?;
        }
    }
    Ok(())
}

pub fn read_gspl(path: &Path) -> Result<GaussianSet> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated GSPL header".into()))?;
    if &magic != GSPL_MAGIC {
        return Err(Error::Format("bad GSPL magic".into()));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let feature_dim = r.read_u32::<LittleEndian>()? as usize;
    let mut set = GaussianSet::with_feature_dim(feature_dim);
    let mut buf = vec![0f32; 11 + feature_dim];
    for _ in 0..count {
        for v in buf.iter_mut() {
            *v = r
                .read_f32::<LittleEndian>()
                .map_err(|_| Error::Format("truncated GSPL payload".into()))?;
        }
        let q = Quaternion::new(buf[6] as f64, buf[7] as f64, buf[8] as f64, buf[9] as f64);
        quat_to_rotation(&q)?;
        set.push(crate::gaussians::Gaussian3D {
            mean: Vector3::new(buf[0] as f64, buf[1] as f64, buf[2] as f64),
            scale: Vector3::new(buf[3] as f64, buf[4] as f64, buf[5] as f64),
            rotation: UnitQuaternion::from_quaternion(q),
            opacity: buf[10] as f64,
            feature: buf[11..].iter().map(|&v| v as f64).collect(),
        });
    }
    Ok(set)
}

// ---------------------------------------------------------------------------
// VOXG — voxel grid container

const VOXG_MAGIC: &[u8; 4] = b"VOXG";
const VOXG_VERSION: u32 = 1;

/// Layout: magic, u32 version, u32 nx ny nz classes, f64 bounds (min xyz,
/// max xyz), f32 opacity logits x-fastest, f32 semantic logits vertex-major.
pub fn write_voxg(path: &Path, grid: &VoxelGrid) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(VOXG_MAGIC)?;
    w.write_u32::<LittleEndian>(VOXG_VERSION)?;
    for d in grid.dims {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    w.write_u32::<LittleEndian>(grid.classes as u32)?;
    for v in grid.bounds_min.iter().chain(grid.bounds_max.iter()) {
        w.write_f64::<LittleEndian>(*v)?;
    }
    for &l in &grid.opacity_logits {
        w.write_f32::<LittleEndian>(l as f32)?;
    }
    for &l in &grid.semantic_logits {
        w.write_f32::<LittleEndian>(l as f32)?;
    }
    Ok(())
}

pub fn read_voxg(path: &Path) -> Result<VoxelGrid> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated VOXG header".into()))?;
    if &magic != VOXG_MAGIC {
        return Err(Error::Format("bad VOXG magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VOXG_VERSION {
        return Err(Error::Format(format!("unsupported VOXG version {version}")));
    }
    let dims = [
        r.read_u32::<LittleEndian>()? as usize,
        r.read_u32::<LittleEndian>()? as usize,
        r.read_u32::<LittleEndian>()? as usize,
    ];
    let classes = r.read_u32::<LittleEndian>()? as usize;
    let mut bounds_min = [0.0; 3];
    let mut bounds_max = [0.0; 3];
    for v in bounds_min.iter_mut().chain(bounds_max.iter_mut()) {
        *v = r.read_f64::<LittleEndian>()?;
    }
    let mut grid = VoxelGrid::new(bounds_min, bounds_max, dims, classes)?;
    for l in grid.opacity_logits.iter_mut() {
        *l = r
            .read_f32::<LittleEndian>()
            .map_err(|_| Error::Format("truncated VOXG opacity payload".into()))? as f64;
    }
    for l in grid.semantic_logits.iter_mut() {
        *l = r
            .read_f32::<LittleEndian>()
            .map_err(|_| Error::Format("truncated VOXG semantic payload".into()))? as f64;
    }
    Ok(grid)
}

// ---------------------------------------------------------------------------
// Camera rig JSON

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera-to-world rotation, row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigRecord {
    pub cameras: Vec<CameraRecord>,
    pub adjacency: Vec<(usize, usize)>,
}

impl RigRecord {
    pub fn from_rig(rig: &CameraRig) -> Self {
        let cameras = rig
            .cameras
            .iter()
            .map(|c| {
                let r = c.pose.rotation.matrix();
                CameraRecord {
                    fx: c.intrinsics.fx,
                    fy: c.intrinsics.fy,
                    cx: c.intrinsics.cx,
                    cy: c.intrinsics.cy,
                    width: c.intrinsics.width,
                    height: c.intrinsics.height,
                    rotation: [
                        r[(0, 0)],
                        r[(0, 1)],
                        r[(0, 2)],
                        r[(1, 0)],
                        r[(1, 1)],
                        r[(1, 2)],
                        r[(2, 0)],
                        r[(2, 1)],
                        r[(2, 2)],
                    ],
                    translation: [c.pose.translation.x, c.pose.translation.y, c.pose.translation.z],
                }
            })
            .collect();
        Self { cameras, adjacency: rig.adjacency.clone() }
    }

    pub fn into_rig(self) -> Result<CameraRig> {
        let mut cameras = Vec::with_capacity(self.cameras.len());
        for rec in &self.cameras {
            let intr = Intrinsics::new(rec.fx, rec.fy, rec.cx, rec.cy, rec.width, rec.height)?;
            let pose = Pose::from_matrix(rec.rotation, rec.translation)?;
            cameras.push(Camera::new(intr, pose));
        }
        CameraRig::new(cameras, self.adjacency)
    }
}

pub fn write_rig_json(path: &Path, rig: &CameraRig) -> Result<()> {
    write_json(path, &RigRecord::from_rig(rig))
}

pub fn read_rig_json(path: &Path) -> Result<CameraRig> {
    let rec: RigRecord = read_json(path)?;
    rec.into_rig()
}

// ---------------------------------------------------------------------------
// JSON helpers

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}

/// Hex SHA-256 of a value's canonical (compact) JSON serialization; used to
/// tie output manifests to the exact configuration that produced them.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
