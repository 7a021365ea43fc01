//! On-disk task exports.
//!
//! Two layouts load to the same [`TaskExport`]:
//!
//! * a single little-endian container file:
//!   `"OTSEGV1\0"`, six `u32` (`n, H, W, C, class_count, ignore_count`),
//!   `ignore_count` `u16` ignore ids, `n*H*W*C` `f32` features, `n*H*W` `u16` labels;
//! * a directory holding `features.npy`, `labels.npy` and `meta.json`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy;
use crate::pixelset::TaskExport;

pub const MAGIC: &[u8; 8] = b"OTSEGV1\0";
const HEADER_LEN: usize = 8 + 6 * 4;
const IO_CHUNK: usize = 1 << 16;

/// Contents of `meta.json` in the directory layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportMeta {
    pub class_count: u32,
    pub ignore_labels: Vec<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

/// Loads either layout, dispatching on whether `path` is a directory.
pub fn load_task_export(path: impl AsRef<Path>) -> Result<TaskExport> {
    let path = path.as_ref();
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_dir() {
        load_directory(path)
    } else {
        load_container(path)
    }
}

fn read_u32s<R: Read>(reader: &mut R, out: &mut [u32]) -> std::io::Result<()> {
    let mut buf = vec![0u8; out.len() * 4];
    reader.read_exact(&mut buf)?;
    for (v, b) in out.iter_mut().zip(buf.chunks_exact(4)) {
        *v = u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    }
    Ok(())
}

fn load_container(path: &Path) -> Result<TaskExport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut reader = BufReader::new(file);

    let mut magic = [0u8; 8];
    reader
        .read_exact(&mut magic)
        .map_err(|_| Error::Format(format!("{}: too short for magic", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a task-export container (bad magic)",
            path.display()
        )));
    }
    let mut dims = [0u32; 6];
    read_u32s(&mut reader, &mut dims)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    let [n, h, w, c, class_count, ignore_count] = dims.map(|d| d as usize);

    let pixels = n
        .checked_mul(h)
        .and_then(|p| p.checked_mul(w))
        .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
    let floats = pixels
        .checked_mul(c)
        .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
    let expected = (HEADER_LEN + 2 * ignore_count + 4 * floats + 2 * pixels) as u64;
    if file_len != expected {
        return Err(Error::Format(format!(
            "{}: header implies {expected} bytes but file has {file_len}",
            path.display()
        )));
    }

    let truncated = |_| Error::Format(format!("{}: truncated payload", path.display()));
    let mut ignore = vec![0u8; 2 * ignore_count];
    reader.read_exact(&mut ignore).map_err(truncated)?;
    let ignore_labels: Vec<u16> = ignore
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();

    let mut features = Vec::with_capacity(floats);
    let mut buf = vec![0u8; IO_CHUNK * 4];
    let mut remaining = floats;
    while remaining > 0 {
        let take = remaining.min(IO_CHUNK);
        reader.read_exact(&mut buf[..take * 4]).map_err(truncated)?;
        features.extend(
            buf[..take * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
        );
        remaining -= take;
    }

    let mut labels = Vec::with_capacity(pixels);
    remaining = pixels;
    while remaining > 0 {
        let take = remaining.min(IO_CHUNK);
        reader.read_exact(&mut buf[..take * 2]).map_err(truncated)?;
        labels.extend(
            buf[..take * 2]
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes([b[0], b[1]])),
        );
        remaining -= take;
    }

    let features =
        Array4::from_shape_vec((n, h, w, c), features).map_err(|e| Error::Format(e.to_string()))?;
    let labels =
        Array3::from_shape_vec((n, h, w), labels).map_err(|e| Error::Format(e.to_string()))?;
    TaskExport::with_ignore_labels(features, labels, class_count as u32, ignore_labels)
}

fn load_directory(dir: &Path) -> Result<TaskExport> {
    let meta = read_meta(dir)?;

    let features_path = dir.join("features.npy");
    let mut f =
        BufReader::new(File::open(&features_path).map_err(|e| Error::io(&features_path, e))?);
    let (fshape, features) = npy::read_f32(&mut f)?;
    let labels_path = dir.join("labels.npy");
    let mut l = BufReader::new(File::open(&labels_path).map_err(|e| Error::io(&labels_path, e))?);
    let (lshape, labels) = npy::read_u16(&mut l)?;

    let features = match fshape[..] {
        [n, h, w, c] => Array4::from_shape_vec((n, h, w, c), features)
            .map_err(|e| Error::Format(e.to_string()))?,
        _ => {
            return Err(Error::Validation(format!(
                "features.npy must be 4-D, got shape {fshape:?}"
            )))
        }
    };
    let labels = match lshape[..] {
        [n, h, w] => {
            Array3::from_shape_vec((n, h, w), labels).map_err(|e| Error::Format(e.to_string()))?
        }
        _ => {
            return Err(Error::Validation(format!(
                "labels.npy must be 3-D, got shape {lshape:?}"
            )))
        }
    };
    TaskExport::with_ignore_labels(features, labels, meta.class_count, meta.ignore_labels)
}

fn read_meta(dir: &Path) -> Result<ExportMeta> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(meta_path.display().to_string(), e))
}

/// Model id recorded by the exporter, if the export is a directory that has one.
pub fn read_model_id(path: impl AsRef<Path>) -> Option<String> {
    let path = path.as_ref();
    if path.is_dir() {
        read_meta(path).ok().and_then(|m| m.model_id)
    } else {
        None
    }
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes the single-file container. The export is validated before anything
/// touches the disk.
pub fn save_task_export(export: &TaskExport, path: impl AsRef<Path>) -> Result<()> {
    export.validate()?;
    let path = path.as_ref();
    let tmp = tmp_sibling(path);
    write_container(export, &tmp).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_container(export: &TaskExport, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let (n, h, w, c) = export.dims();
    let io = |e| Error::io(path, e);

    out.write_all(MAGIC).map_err(io)?;
    let header = [
        n,
        h,
        w,
        c,
        export.class_count as usize,
        export.ignore_labels.len(),
    ];
    for v in header {
        out.write_all(&(v as u32).to_le_bytes()).map_err(io)?;
    }
    for l in &export.ignore_labels {
        out.write_all(&l.to_le_bytes()).map_err(io)?;
    }
    for v in export.features.iter() {
        out.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    for l in export.labels.iter() {
        out.write_all(&l.to_le_bytes()).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Writes the directory layout (`features.npy`, `labels.npy`, `meta.json`).
pub fn save_task_export_dir(
    export: &TaskExport,
    dir: impl AsRef<Path>,
    model_id: Option<&str>,
) -> Result<()> {
    export.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let features: Vec<f32> = export.features.iter().copied().collect();
    let labels: Vec<u16> = export.labels.iter().copied().collect();
    let fpath = dir.join("features.npy");
    let mut f = BufWriter::new(File::create(&fpath).map_err(|e| Error::io(&fpath, e))?);
    npy::write_f32(&mut f, export.features.shape(), &features).map_err(|e| Error::io(&fpath, e))?;
    f.flush().map_err(|e| Error::io(&fpath, e))?;

    let lpath = dir.join("labels.npy");
    let mut l = BufWriter::new(File::create(&lpath).map_err(|e| Error::io(&lpath, e))?);
    npy::write_u16(&mut l, export.labels.shape(), &labels).map_err(|e| Error::io(&lpath, e))?;
    l.flush().map_err(|e| Error::io(&lpath, e))?;

    let meta = ExportMeta {
        class_count: export.class_count,
        ignore_labels: export.ignore_labels.iter().copied().collect(),
        model_id: model_id.map(str::to_owned),
    };
    let mpath = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json("meta.json", e))?;
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}
