//! Dataset persistence and ingestion: top/bottom image pairs with sparse and
//! completed disparity ground truth, split manifests, and dataset statistics.
//!
//! Directory layout per split:
//! `root/{split}/{images_top,images_bottom,disparity_sparse,disparity_completed}/NNNN.png`
//! plus `root/{split}/manifest.json`. Images are 8-bit RGB. Disparities are
//! 16-bit grayscale fixed point: raw value u decodes to u / scale degrees and
//! u = 0 marks an invalid pixel.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::geometry::{CameraRig, DisparityMap, MaskedMap};
use crate::synthdata::RenderedPair;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CoreError::config(format!(
                "unknown split {other:?}; expected train, val, or test"
            ))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneTag {
    Indoor,
    OutdoorDay,
    OutdoorNight,
    Synthetic,
}

/// Fixed-point disparity codec. Raw u16 value u decodes to u / scale
/// degrees; 0 is reserved for invalid pixels.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DisparityEncoding {
    pub scale: f64,
    pub bit_depth: u8,
}

impl Default for DisparityEncoding {
    fn default() -> Self {
        DisparityEncoding {
            scale: 512.0,
            bit_depth: 16,
        }
    }
}

impl DisparityEncoding {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(CoreError::config("disparity scale must be positive"));
        }
        if self.bit_depth != 16 {
            return Err(CoreError::config("only 16-bit disparity files are supported"));
        }
        Ok(())
    }

    /// Largest encodable disparity in degrees.
    pub fn max_deg(&self) -> f64 {
        u16::MAX as f64 / self.scale
    }

    pub fn encode(&self, map: &DisparityMap) -> Result<Array2<u16>> {
        let mut out = Array2::zeros(map.values.dim());
        for (idx, &v) in map.valid.indexed_iter() {
            if !v {
                continue;
            }
            let d = map.values[idx];
            if !(d >= 0.0 && d <= self.max_deg()) {
                return Err(CoreError::data(format!(
                    "disparity {d} deg at {idx:?} outside encodable range [0, {}]",
                    self.max_deg()
                )));
            }
            // 0 is the invalid marker, so valid pixels floor at 1.
            out[idx] = ((d * self.scale).round() as u16).max(1);
        }
        Ok(out)
    }

    pub fn decode(&self, raw: &Array2<u16>) -> Result<DisparityMap> {
        let values = raw.mapv(|u| u as f64 / self.scale);
        let valid = raw.mapv(|u| u != 0);
        MaskedMap::new(values, valid)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub top: String,
    pub bottom: String,
    pub sparse: String,
    pub completed: String,
    pub tag: SceneTag,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub d_deg_min: f64,
    pub d_deg_max: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub rig: CameraRig,
    pub encoding: DisparityEncoding,
    pub entries: Vec<ManifestEntry>,
    pub stats: Option<DatasetStats>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CoreError::io(path, e))
}

impl DatasetManifest {
    pub fn split_dir(root: &Path, split: Split) -> PathBuf {
        root.join(split.to_string())
    }

    fn manifest_path(root: &Path, split: Split) -> PathBuf {
        Self::split_dir(root, split).join("manifest.json")
    }

    /// Load a split manifest and verify every referenced file exists.
    pub fn load(root: &Path, split: Split) -> Result<Self> {
        let path = Self::manifest_path(root, split);
        let text = read_file(&path)?;
        let manifest: DatasetManifest = serde_json::from_slice(&text)
            .map_err(|e| CoreError::data(format!("malformed manifest {}: {e}", path.display())))?;
        manifest.encoding.validate()?;
        if manifest.split != split {
            return Err(CoreError::data(format!(
                "manifest at {} declares split {}, expected {split}",
                path.display(),
                manifest.split
            )));
        }
        let dir = Self::split_dir(root, split);
        for (i, e) in manifest.entries.iter().enumerate() {
            for rel in [&e.top, &e.bottom, &e.sparse, &e.completed] {
                let p = dir.join(rel);
                if !p.is_file() {
                    return Err(CoreError::data(format!(
                        "entry {i}: missing file {}",
                        p.display()
                    )));
                }
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        self.encoding.validate()?;
        let dir = Self::split_dir(root, self.split);
        fs::create_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
        let path = Self::manifest_path(root, self.split);
        let text = serde_json::to_vec_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| CoreError::io(&path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Hex digest over the manifest serialization and every referenced file,
    /// in entry order. Identifies dataset content for run manifests.
    pub fn fingerprint(&self, root: &Path) -> Result<String> {
        let dir = Self::split_dir(root, self.split);
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(self).expect("manifest serializes"));
        for e in &self.entries {
            for rel in [&e.top, &e.bottom, &e.sparse, &e.completed] {
                let p = dir.join(rel);
                let f = fs::File::open(&p).map_err(|err| CoreError::io(&p, err))?;
                let mut reader = std::io::BufReader::new(f);
                let mut buf = [0u8; 8192];
                loop {
                    let n = reader.read(&mut buf).map_err(|err| CoreError::io(&p, err))?;
                    if n == 0 {
                        break;
                    }
                    hasher.update(&buf[..n]);
                }
            }
        }
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(digest.len() * 2);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        Ok(hex)
    }
}

/// One decoded dataset entry. Images are (3, H, W) in [0, 1].
#[derive(Clone)]
pub struct LoadedPair {
    pub image_top: Array3<f64>,
    pub image_bottom: Array3<f64>,
    pub gt_sparse: DisparityMap,
    pub gt_complete: DisparityMap,
    pub tag: SceneTag,
}

/// Decodes an 8-bit RGB image into a (3, H, W) array in [0, 1].
pub fn load_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| CoreError::data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[ch, y as usize, x as usize]] = px.0[ch] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Writes a (3, H, W) array in [0, 1] as an 8-bit RGB image.
pub fn save_rgb(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (c, h, w) = img.dim();
    debug_assert_eq!(c, 3);
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            (img[[ch, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path)
        .map_err(|e| CoreError::data(format!("cannot write {}: {e}", path.display())))
}

/// Decodes a fixed-point 16-bit disparity image.
pub fn load_disparity(path: &Path, encoding: &DisparityEncoding) -> Result<DisparityMap> {
    let img = image::open(path)
        .map_err(|e| CoreError::data(format!("cannot decode {}: {e}", path.display())))?
        .to_luma16();
    let (w, h) = img.dimensions();
    let raw = Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32).0[0]
    });
    encoding.decode(&raw)
}

/// Writes a disparity map as a fixed-point 16-bit image.
pub fn save_disparity(path: &Path, map: &DisparityMap, encoding: &DisparityEncoding) -> Result<()> {
    let raw = encoding.encode(map)?;
    let (h, w) = raw.dim();
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(
        w as u32,
        h as u32,
        |x, y| image::Luma([raw[[y as usize, x as usize]]]),
    );
    buf.save(path)
        .map_err(|e| CoreError::data(format!("cannot write {}: {e}", path.display())))
}

/// Decode one entry, enforcing map invariants and sparse-within-completed
/// mask containment.
pub fn load_pair(root: &Path, manifest: &DatasetManifest, index: usize) -> Result<LoadedPair> {
    let entry = manifest.entries.get(index).ok_or_else(|| {
        CoreError::config(format!(
            "entry index {index} out of range for {} entries",
            manifest.len()
        ))
    })?;
    let dir = DatasetManifest::split_dir(root, manifest.split);
    let image_top = load_rgb(&dir.join(&entry.top))?;
    let image_bottom = load_rgb(&dir.join(&entry.bottom))?;
    let gt_sparse = load_disparity(&dir.join(&entry.sparse), &manifest.encoding)?;
    let gt_complete = load_disparity(&dir.join(&entry.completed), &manifest.encoding)?;

    let dims = (manifest.rig.height_px, manifest.rig.width_px);
    for (name, got) in [
        ("top image", (image_top.dim().1, image_top.dim().2)),
        ("bottom image", (image_bottom.dim().1, image_bottom.dim().2)),
        ("sparse disparity", gt_sparse.values.dim()),
        ("completed disparity", gt_complete.values.dim()),
    ] {
        if got != dims {
            return Err(CoreError::data(format!(
                "entry {index}: {name} is {got:?}, rig expects {dims:?}"
            )));
        }
    }
    for (idx, &s) in gt_sparse.valid.indexed_iter() {
        if s && !gt_complete.valid[idx] {
            return Err(CoreError::data(format!(
                "entry {index}: sparse ground truth valid at {idx:?} but completed is not"
            )));
        }
    }
    Ok(LoadedPair {
        image_top,
        image_bottom,
        gt_sparse,
        gt_complete,
        tag: entry.tag,
    })
}

/// Min/max disparity in degrees over valid pixels of the completed ground
/// truth, across the whole split.
pub fn compute_stats(root: &Path, manifest: &DatasetManifest) -> Result<DatasetStats> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for index in 0..manifest.len() {
        let pair = load_pair(root, manifest, index)?;
        for (idx, &v) in pair.gt_complete.valid.indexed_iter() {
            if v {
                lo = lo.min(pair.gt_complete.values[idx]);
                hi = hi.max(pair.gt_complete.values[idx]);
            }
        }
    }
    if !lo.is_finite() {
        return Err(CoreError::data("no valid ground-truth pixels in dataset"));
    }
    Ok(DatasetStats {
        d_deg_min: lo,
        d_deg_max: hi,
    })
}

/// Persist rendered pairs as one split. The completed channel is the dense
/// rendered disparity; the sparse channel keeps even rows only, a
/// deterministic stand-in for partial sensor coverage.
pub fn write_dataset(
    root: &Path,
    split: Split,
    rig: &CameraRig,
    pairs: &[RenderedPair],
    encoding: DisparityEncoding,
) -> Result<DatasetManifest> {
    encoding.validate()?;
    let dir = DatasetManifest::split_dir(root, split);
    for sub in [
        "images_top",
        "images_bottom",
        "disparity_sparse",
        "disparity_completed",
    ] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| CoreError::io(&p, e))?;
    }

    let mut entries = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let name = format!("{i:04}.png");
        let completed = &pair.disparity;
        let mut sparse_valid = completed.valid.clone();
        for ((r, _), v) in sparse_valid.indexed_iter_mut() {
            *v = *v && r % 2 == 0;
        }
        let sparse = MaskedMap::new(completed.values.clone(), sparse_valid)?;

        save_rgb(&dir.join("images_top").join(&name), &pair.image_top)?;
        save_rgb(&dir.join("images_bottom").join(&name), &pair.image_bottom)?;
        save_disparity(&dir.join("disparity_sparse").join(&name), &sparse, &encoding)?;
        save_disparity(
            &dir.join("disparity_completed").join(&name),
            completed,
            &encoding,
        )?;
        entries.push(ManifestEntry {
            top: format!("images_top/{name}"),
            bottom: format!("images_bottom/{name}"),
            sparse: format!("disparity_sparse/{name}"),
            completed: format!("disparity_completed/{name}"),
            tag: SceneTag::Synthetic,
        });
    }

    let mut manifest = DatasetManifest {
        split,
        rig: rig.clone(),
        encoding,
        entries,
        stats: None,
    };
    manifest.save(root)?;
    let stats = compute_stats(root, &manifest)?;
    manifest.stats = Some(stats);
    manifest.save(root)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{make_random_scene, render, Difficulty};

    fn small_dataset(n: usize) -> (tempfile::TempDir, CameraRig, DatasetManifest) {
        let rig = CameraRig::new(0.2, 20, 48).unwrap();
        let pairs: Vec<RenderedPair> = (0..n as u64)
            .map(|s| render(&make_random_scene(s, Difficulty::Easy), &rig).unwrap())
            .collect();
        let tmp = tempfile::tempdir().unwrap();
        let manifest = write_dataset(
            tmp.path(),
            Split::Train,
            &rig,
            &pairs,
            DisparityEncoding::default(),
        )
        .unwrap();
        (tmp, rig, manifest)
    }

    #[test]
    fn codec_decodes_raw_over_scale_and_zero_invalid() {
        let enc = DisparityEncoding::default();
        let raw = ndarray::array![[0u16, 1, 512, 1024], [2048, 0, 7, 65535]];
        let map = enc.decode(&raw).unwrap();
        for (idx, &u) in raw.indexed_iter() {
            assert_eq!(map.valid[idx], u != 0);
            assert_eq!(map.values[idx], u as f64 / 512.0);
        }
    }

    #[test]
    fn roundtrip_within_quantization_bound() {
        let (tmp, rig, manifest) = small_dataset(3);
        assert_eq!(manifest.len(), 3);
        let step = 1.0 / manifest.encoding.scale;
        for i in 0..3 {
            let scene = make_random_scene(i as u64, Difficulty::Easy);
            let rendered = render(&scene, &rig).unwrap();
            let loaded = load_pair(tmp.path(), &manifest, i).unwrap();

            // Images quantized to 8 bits, then bit-exact.
            for (a, b) in loaded.image_top.iter().zip(rendered.image_top.iter()) {
                let q = (b * 255.0).round() / 255.0;
                assert!((a - q).abs() < 1e-12);
            }
            // Disparity within half a quantization step.
            for (idx, &v) in loaded.gt_complete.valid.indexed_iter() {
                assert!(v);
                let err = (loaded.gt_complete.values[idx] - rendered.disparity.values[idx]).abs();
                assert!(err <= step / 2.0 + 1e-12, "{err} at {idx:?}");
            }
        }
    }

    #[test]
    fn sparse_mask_is_contained_and_smaller() {
        let (tmp, _rig, manifest) = small_dataset(1);
        let pair = load_pair(tmp.path(), &manifest, 0).unwrap();
        assert!(pair.gt_sparse.valid_count() < pair.gt_complete.valid_count());
        for (idx, &s) in pair.gt_sparse.valid.indexed_iter() {
            assert!(!s || pair.gt_complete.valid[idx]);
        }
    }

    #[test]
    fn loader_rejects_violated_containment() {
        let (tmp, _rig, manifest) = small_dataset(1);
        // Completed file with an invalid pixel where sparse is valid.
        let dir = DatasetManifest::split_dir(tmp.path(), Split::Train);
        let enc = manifest.encoding;
        let completed = load_disparity(&dir.join("disparity_completed/0000.png"), &enc).unwrap();
        let mut broken = completed.clone();
        broken.valid[[0, 0]] = false; // row 0 is valid in the sparse channel
        save_disparity(&dir.join("disparity_completed/0000.png"), &broken, &enc).unwrap();
        assert!(load_pair(tmp.path(), &manifest, 0).is_err());
    }

    #[test]
    fn missing_file_rejected_at_manifest_load() {
        let (tmp, _rig, _manifest) = small_dataset(1);
        let victim =
            DatasetManifest::split_dir(tmp.path(), Split::Train).join("images_top/0000.png");
        fs::remove_file(&victim).unwrap();
        let err = DatasetManifest::load(tmp.path(), Split::Train);
        assert!(err.is_err());
        assert!(format!("{}", err.err().unwrap()).contains("missing file"));
    }

    #[test]
    fn stats_match_loaded_extremes_and_ignore_order() {
        let (tmp, _rig, mut manifest) = small_dataset(2);
        let stats = manifest.stats.unwrap();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..2 {
            let pair = load_pair(tmp.path(), &manifest, i).unwrap();
            for (idx, &v) in pair.gt_complete.valid.indexed_iter() {
                if v {
                    lo = lo.min(pair.gt_complete.values[idx]);
                    hi = hi.max(pair.gt_complete.values[idx]);
                }
            }
        }
        assert_eq!(stats.d_deg_min, lo);
        assert_eq!(stats.d_deg_max, hi);

        manifest.entries.reverse();
        let flipped = compute_stats(tmp.path(), &manifest).unwrap();
        assert_eq!(flipped, stats);
    }

    #[test]
    fn fingerprint_tracks_content() {
        let (tmp, _rig, manifest) = small_dataset(1);
        let a = manifest.fingerprint(tmp.path()).unwrap();
        let b = manifest.fingerprint(tmp.path()).unwrap();
        assert_eq!(a, b);
        let victim =
            DatasetManifest::split_dir(tmp.path(), Split::Train).join("images_top/0000.png");
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&victim, bytes).unwrap();
        let c = manifest.fingerprint(tmp.path()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn manifest_roundtrips_through_load() {
        let (tmp, _rig, manifest) = small_dataset(2);
        let loaded = DatasetManifest::load(tmp.path(), Split::Train).unwrap();
        assert_eq!(loaded.len(), manifest.len());
        assert_eq!(loaded.stats, manifest.stats);
        assert!(DatasetManifest::load(tmp.path(), Split::Val).is_err());
    }
}
