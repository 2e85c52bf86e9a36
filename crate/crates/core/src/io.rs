//! File formats: PFM images, parameter checkpoints, atomic writes.
//!
//! PFM follows the portable-float-map convention: `Pf`/`PF` header, negative
//! scale for little-endian, rows stored bottom-to-top. Checkpoints are a flat
//! JSON manifest (name → shape) next to a little-endian float32 blob whose
//! tensors follow the manifest's name-sorted order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{Model, ParamStore, ParamTensor};

/// Writes `bytes` via a temp file in the target directory plus rename, so an
/// interrupted run never leaves a truncated file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Encodes a 1- or 3-channel grid as PFM bytes.
pub fn pfm_bytes(grid: &Grid) -> Result<Vec<u8>> {
    let header = match grid.channels {
        1 => "Pf",
        3 => "PF",
        c => {
            return Err(Error::Format {
                format: "pfm",
                detail: format!("{c} channels; PFM holds 1 or 3"),
            })
        }
    };
    let mut out = format!("{header}\n{} {}\n-1.0\n", grid.width, grid.height).into_bytes();
    // Bottom-to-top rows, channels interleaved.
    for row in (0..grid.height).rev() {
        for col in 0..grid.width {
            for ch in 0..grid.channels {
                let v = grid.get(ch, row, col) as f32;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn write_pfm(path: &Path, grid: &Grid) -> Result<()> {
    write_atomic(path, &pfm_bytes(grid)?)
}

pub fn read_pfm(path: &Path) -> Result<Grid> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_pfm(&bytes).map_err(|detail| Error::Format {
        format: "pfm",
        detail: format!("{}: {detail}", path.display()),
    })
}

fn parse_pfm(bytes: &[u8]) -> std::result::Result<Grid, String> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> std::result::Result<String, String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        let t = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        pos += 1; // single whitespace after each token
        Ok(t)
    };
    let magic = token(bytes)?;
    let channels = match magic.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(format!("bad magic '{other}'")),
    };
    let width: usize = token(bytes)?.parse().map_err(|_| "bad width".to_string())?;
    let height: usize = token(bytes)?
        .parse()
        .map_err(|_| "bad height".to_string())?;
    let scale: f64 = token(bytes)?.parse().map_err(|_| "bad scale".to_string())?;
    let little_endian = scale < 0.0;
    let n = channels * height * width;
    if bytes.len() < pos + 4 * n {
        return Err(format!(
            "payload holds {} bytes, need {}",
            bytes.len() - pos,
            4 * n
        ));
    }
    let mut grid = Grid::new(channels, height, width);
    let mut off = pos;
    for row in (0..height).rev() {
        for col in 0..width {
            for ch in 0..channels {
                let raw: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
                let v = if little_endian {
                    f32::from_le_bytes(raw)
                } else {
                    f32::from_be_bytes(raw)
                };
                grid.set(ch, row, col, v as f64);
                off += 4;
            }
        }
    }
    Ok(grid)
}

/// Writes `manifest.json` (name → shape, name-sorted) and `weights.bin`
/// (float32 little-endian, tensors in manifest order) under `dir`.
pub fn save_checkpoint(dir: &Path, params: &ParamStore) -> Result<()> {
    let manifest: BTreeMap<&str, &[usize]> = params
        .iter()
        .map(|(name, t)| (name, t.shape.as_slice()))
        .collect();
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&dir.join("manifest.json"), &json)?;

    let mut blob = Vec::new();
    for (name, _) in &manifest {
        let t = params.get(name).unwrap();
        for &v in &t.values {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_atomic(&dir.join("weights.bin"), &blob)?;
    Ok(())
}

/// Reads a checkpoint directory back into name → tensor form.
pub fn load_checkpoint(dir: &Path) -> Result<BTreeMap<String, ParamTensor>> {
    let manifest: BTreeMap<String, Vec<usize>> =
        serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let blob = fs::read(dir.join("weights.bin"))?;
    let total: usize = manifest.values().map(|s| s.iter().product::<usize>()).sum();
    if blob.len() != 4 * total {
        return Err(Error::Format {
            format: "checkpoint",
            detail: format!("weights.bin holds {} bytes, manifest wants {}", blob.len(), 4 * total),
        });
    }
    let mut out = BTreeMap::new();
    let mut off = 0usize;
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n)
            .map(|i| {
                let raw: [u8; 4] = blob[off + 4 * i..off + 4 * i + 4].try_into().unwrap();
                f32::from_le_bytes(raw) as f64
            })
            .collect();
        off += 4 * n;
        out.insert(name, ParamTensor { shape, values });
    }
    Ok(out)
}

/// Builds a parameter store for `model` from loaded checkpoint tensors,
/// erroring with the full diff when names or shapes disagree.
pub fn params_from_checkpoint(
    model: &Model,
    loaded: &BTreeMap<String, ParamTensor>,
) -> Result<ParamStore> {
    let expected = model.manifest();
    let mut problems = Vec::new();
    for (name, shape) in &expected {
        match loaded.get(name) {
            None => problems.push(format!("missing {name}")),
            Some(t) if &t.shape != shape => problems.push(format!(
                "{name}: checkpoint {:?} vs model {:?}",
                t.shape, shape
            )),
            _ => {}
        }
    }
    for name in loaded.keys() {
        if !expected.contains_key(name) {
            problems.push(format!("unexpected {name}"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::CheckpointMismatch(problems.join("; ")));
    }
    // Template store fixes the creation order; fill with loaded values.
    let mut store = model.init_params();
    for (name, t) in store.iter_mut() {
        t.values.copy_from_slice(&loaded[name].values);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pfm_round_trip_is_f32_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..3 * 4 * 6)
            .map(|_| rng.random_range(-10.0..10.0f32) as f64)
            .collect();
        let grid = Grid::from_data(3, 4, 6, data, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pfm");
        write_pfm(&path, &grid).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(back.channels, 3);
        assert_eq!(back.height, 4);
        assert_eq!(back.width, 6);
        for (a, b) in grid.data.iter().zip(&back.data) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn pfm_rejects_garbage() {
        assert!(parse_pfm(b"P5\n2 2\n255\n").is_err());
        assert!(parse_pfm(b"Pf\n4 4\n-1.0\nxx").is_err());
    }

    fn tiny_model() -> Model {
        Model::new(ModelConfig {
            scales: 2,
            channels: vec![4, 4],
            patch_resolutions: vec![2],
            heads: 2,
            height: 8,
            width: 16,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = tiny_model();
        let params = model.init_params();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        let restored = params_from_checkpoint(&model, &loaded).unwrap();
        for ((an, at), (bn, bt)) in params.iter().zip(restored.iter()) {
            assert_eq!(an, bn);
            for (x, y) in at.values.iter().zip(&bt.values) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn checkpoint_shape_diff_is_reported() {
        let model = tiny_model();
        let params = model.init_params();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params).unwrap();
        let mut loaded = load_checkpoint(dir.path()).unwrap();
        let first = loaded.keys().next().unwrap().clone();
        loaded.get_mut(&first).unwrap().shape = vec![1, 2, 3];
        let err = params_from_checkpoint(&model, &loaded).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&first), "diff names the tensor: {msg}");
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"second");
        // No temp litter left behind.
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
