//! Binary array container and on-disk dataset layout.
//!
//! Container layout (little endian):
//! `"ADSL1" | u8 element type | u8 ndim | u32 dims[ndim] | f64 sx, sy, thickness | data`
//! with element type 1 = i16, 2 = u8, data in row-major order.
//!
//! A dataset directory holds `volumes/<id>.hu.adsl`, `volumes/<id>.labels.adsl`,
//! `phantom.json` and `manifest.jsonl` (one record per slice).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::domain::{DatasetSplit, ImageClass, PixelSpacing, HU_MAX, HU_MIN};
use crate::error::{Error, Result};
use crate::phantom::{dataset_from_volumes, select_centers, PhantomSpec, PhantomVolume, SplitRole};

const MAGIC: &[u8; 5] = b"ADSL1";

#[derive(Debug, Clone, PartialEq)]
pub enum ContainerData {
    I16(ArrayD<i16>),
    U8(ArrayD<u8>),
}

impl ContainerData {
    fn code(&self) -> u8 {
        match self {
            ContainerData::I16(_) => 1,
            ContainerData::U8(_) => 2,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            ContainerData::I16(a) => a.shape(),
            ContainerData::U8(a) => a.shape(),
        }
    }
}

pub fn encode_container(data: &ContainerData, spacing: PixelSpacing) -> Vec<u8> {
    let shape = data.shape();
    let mut out = Vec::with_capacity(64 + shape.iter().product::<usize>() * 2);
    out.extend_from_slice(MAGIC);
    out.push(data.code());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in [spacing.sx, spacing.sy, spacing.slice_thickness] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match data {
        ContainerData::I16(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        ContainerData::U8(a) => out.extend(a.iter().copied()),
    }
    out
}

pub fn decode_container(path: &Path, bytes: &[u8]) -> Result<(ContainerData, PixelSpacing)> {
    let bad = |reason: &str| Error::format(path, reason);
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(bad("truncated"));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(5)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let code = take(1)?[0];
    let ndim = take(1)?[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
    }
    let mut sp = [0.0; 3];
    for v in &mut sp {
        *v = f64::from_le_bytes(take(8)?.try_into().unwrap());
    }
    let spacing = PixelSpacing::new(sp[0], sp[1], sp[2]).map_err(|e| bad(&e.to_string()))?;
    let n: usize = shape.iter().product();
    let data = match code {
        1 => {
            let raw = take(n * 2)?;
            let vals = raw.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
            ContainerData::I16(ArrayD::from_shape_vec(IxDyn(&shape), vals).map_err(|e| bad(&e.to_string()))?)
        }
        2 => ContainerData::U8(
            ArrayD::from_shape_vec(IxDyn(&shape), take(n)?.to_vec()).map_err(|e| bad(&e.to_string()))?,
        ),
        other => return Err(bad(&format!("unknown element type {other}"))),
    };
    if !cur.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok((data, spacing))
}

pub fn write_container(path: &Path, data: &ContainerData, spacing: PixelSpacing) -> Result<()> {
    fs::write(path, encode_container(data, spacing)).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<(ContainerData, PixelSpacing)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(path, &bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceRole {
    Labeled,
    Adjacent,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub volume_id: String,
    pub z_index: usize,
    pub role: SliceRole,
    /// Absent for unlabeled slices.
    pub image_class: Option<ImageClass>,
    pub spacing: PixelSpacing,
}

/// Manifest records for every slice a dataset uses, in dataset order.
pub fn manifest_records(spec: &PhantomSpec, train: &[PhantomVolume], test: &[PhantomVolume]) -> Vec<ManifestRecord> {
    let k = spec.neighbors_per_side;
    let mut out = Vec::new();
    for (role, vols) in [(SplitRole::Train, train), (SplitRole::Test, test)] {
        for v in vols {
            for z in select_centers(v, spec.centers_per_volume, k) {
                let labeled = ManifestRecord {
                    volume_id: v.volume_id.clone(),
                    z_index: z,
                    role: if role == SplitRole::Train { SliceRole::Labeled } else { SliceRole::Test },
                    image_class: Some(v.annotated(z).image_class),
                    spacing: v.spacing,
                };
                out.push(labeled);
                if role == SplitRole::Train {
                    for zz in (1..=k).flat_map(|d| [z - d, z + d]) {
                        out.push(ManifestRecord {
                            volume_id: v.volume_id.clone(),
                            z_index: zz,
                            role: SliceRole::Adjacent,
                            image_class: None,
                            spacing: v.spacing,
                        });
                    }
                }
            }
        }
    }
    out
}

fn volume_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    let vdir = dir.join("volumes");
    (vdir.join(format!("{id}.hu.adsl")), vdir.join(format!("{id}.labels.adsl")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    spec: PhantomSpec,
    train_volumes: Vec<VolumeEntry>,
    test_volumes: Vec<VolumeEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VolumeEntry {
    volume_id: String,
    kind: ImageClass,
    planned_centers: Vec<usize>,
}

impl VolumeEntry {
    fn of(v: &PhantomVolume) -> Self {
        Self {
            volume_id: v.volume_id.clone(),
            kind: v.kind,
            planned_centers: v.planned_centers.clone(),
        }
    }
}

pub fn save_dataset(dir: &Path, spec: &PhantomSpec, train: &[PhantomVolume], test: &[PhantomVolume]) -> Result<()> {
    let vdir = dir.join("volumes");
    fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
    for v in train.iter().chain(test) {
        let (hu_path, lab_path) = volume_paths(dir, &v.volume_id);
        let hu = v.hu.mapv(|x| x as i16).into_dyn();
        write_container(&hu_path, &ContainerData::I16(hu), v.spacing)?;
        write_container(&lab_path, &ContainerData::U8(v.labels.clone().into_dyn()), v.spacing)?;
    }
    let header = DatasetHeader {
        spec: spec.clone(),
        train_volumes: train.iter().map(VolumeEntry::of).collect(),
        test_volumes: test.iter().map(VolumeEntry::of).collect(),
    };
    let header_path = dir.join("phantom.json");
    fs::write(&header_path, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&header_path, e))?;

    let manifest_path = dir.join("manifest.jsonl");
    let file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut w = BufWriter::new(file);
    for rec in manifest_records(spec, train, test) {
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(&manifest_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest_path, e))
}

fn load_volume(dir: &Path, entry: &VolumeEntry) -> Result<PhantomVolume> {
    let (hu_path, lab_path) = volume_paths(dir, &entry.volume_id);
    let (hu, spacing) = read_container(&hu_path)?;
    let (labels, _) = read_container(&lab_path)?;
    let (ContainerData::I16(hu), ContainerData::U8(labels)) = (hu, labels) else {
        return Err(Error::format(&hu_path, "unexpected element types"));
    };
    let hu = hu
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|e| Error::format(&hu_path, e.to_string()))?
        .mapv(|v| f32::from(v).clamp(HU_MIN, HU_MAX));
    let labels = labels
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|e| Error::format(&lab_path, e.to_string()))?;
    if hu.dim() != labels.dim() {
        return Err(Error::format(&lab_path, "label volume does not match image volume"));
    }
    if labels.iter().any(|&c| c as usize >= crate::domain::NUM_CLASSES) {
        return Err(Error::format(&lab_path, "invalid class code"));
    }
    Ok(PhantomVolume {
        hu,
        labels,
        spacing,
        volume_id: entry.volume_id.clone(),
        kind: entry.kind,
        planned_centers: entry.planned_centers.clone(),
    })
}

/// Spec plus train and test volumes of a saved dataset.
pub fn load_volumes(dir: &Path) -> Result<(PhantomSpec, Vec<PhantomVolume>, Vec<PhantomVolume>)> {
    let header_path = dir.join("phantom.json");
    let text = fs::read(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: DatasetHeader = serde_json::from_slice(&text)?;
    let train = header.train_volumes.iter().map(|e| load_volume(dir, e)).collect::<Result<Vec<_>>>()?;
    let test = header.test_volumes.iter().map(|e| load_volume(dir, e)).collect::<Result<Vec<_>>>()?;
    Ok((header.spec, train, test))
}

pub fn load_dataset(dir: &Path) -> Result<DatasetSplit> {
    let (spec, train, test) = load_volumes(dir)?;
    dataset_from_volumes(&spec, &train, &test)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join("manifest.jsonl");
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    BufReader::new(file)
        .lines()
        .map(|line| {
            let line = line.map_err(|e| Error::io(&path, e))?;
            Ok(serde_json::from_str(&line)?)
        })
        .collect()
}
