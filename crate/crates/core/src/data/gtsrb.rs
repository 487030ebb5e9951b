//! Reader for GTSRB-style trees: one subdirectory per class holding images
//! and a semicolon-delimited annotation CSV
//! (`Filename;Width;Height;Roi.X1;Roi.Y1;Roi.X2;Roi.Y2;ClassId`).
//!
//! A split directory may instead be flat (images plus one CSV whose `ClassId`
//! column names the class), which is how the official test set ships.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::resize::resize_bilinear;
use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_EXTENSIONS: [&str; 6] = ["ppm", "pgm", "png", "jpg", "jpeg", "bmp"];

/// Fraction of each class held out when no official split exists.
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: usize,
    /// Images that could not be decoded.
    pub skipped: Vec<PathBuf>,
}

impl LoadReport {
    fn merge(&mut self, other: LoadReport) {
        self.loaded += other.loaded;
        self.skipped.extend(other.skipped);
    }
}

#[derive(Clone, Debug)]
pub struct LoadedSplits {
    pub train: Dataset,
    pub val: Dataset,
    /// True when `train/` and `test/` (or `val/`) directories were found.
    pub official: bool,
    pub report: LoadReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Roi {
    x1: usize,
    y1: usize,
    x2: usize,
    y2: usize,
}

#[derive(Clone, Debug)]
struct Annotation {
    roi: Option<Roi>,
    class_id: Option<usize>,
}

fn load_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| load_err(dir, format!("cannot read directory: {e}")))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort();
    Ok(entries)
}

fn has_ext(path: &Path, exts: &[&str]) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| exts.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn read_annotations(csv_path: &Path, table: &mut HashMap<String, Annotation>) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b';')
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(csv_path)
        .map_err(|e| load_err(csv_path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| load_err(csv_path, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let filename = col("Filename").ok_or_else(|| load_err(csv_path, "missing Filename column"))?;
    let roi_cols = [col("Roi.X1"), col("Roi.Y1"), col("Roi.X2"), col("Roi.Y2")];
    let class_col = col("ClassId");
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| load_err(csv_path, e.to_string()))?;
        let row = line + 2;
        let field = |i: usize| record.get(i).unwrap_or("");
        let number = |i: usize, what: &str| {
            field(i)
                .parse::<usize>()
                .map_err(|_| load_err(csv_path, format!("row {row}: bad {what} {:?}", field(i))))
        };
        let name = field(filename).to_string();
        if name.is_empty() {
            return Err(load_err(csv_path, format!("row {row}: empty Filename")));
        }
        let roi = match roi_cols {
            [Some(a), Some(b), Some(c), Some(d)] => {
                let roi = Roi {
                    x1: number(a, "Roi.X1")?,
                    y1: number(b, "Roi.Y1")?,
                    x2: number(c, "Roi.X2")?,
                    y2: number(d, "Roi.Y2")?,
                };
                if roi.x1 > roi.x2 || roi.y1 > roi.y2 {
                    return Err(load_err(csv_path, format!("row {row}: empty ROI for {name}")));
                }
                Some(roi)
            }
            _ => None,
        };
        let class_id = class_col.map(|c| number(c, "ClassId")).transpose()?;
        if table.insert(name.clone(), Annotation { roi, class_id }).is_some() {
            return Err(load_err(csv_path, format!("duplicate annotation row for {name}")));
        }
    }
    Ok(())
}

/// Decodes, crops to the ROI (inclusive corners, clamped to the image) and
/// resizes to `r x r`, returning planar RGB in `[0,1]`. `None` when the file
/// cannot be decoded.
fn read_image(path: &Path, roi: Option<Roi>, r: usize) -> Option<Tensor<f32>> {
    let img = match image::open(path) {
        Ok(img) => img.to_rgb8(),
        Err(e) => {
            warn!("skipping undecodable image {}: {e}", path.display());
            return None;
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let roi = roi.unwrap_or(Roi {
        x1: 0,
        y1: 0,
        x2: w - 1,
        y2: h - 1,
    });
    let (x1, y1) = (roi.x1.min(w - 1), roi.y1.min(h - 1));
    let (x2, y2) = (roi.x2.clamp(x1, w - 1), roi.y2.clamp(y1, h - 1));
    let (cw, ch) = (x2 - x1 + 1, y2 - y1 + 1);
    let mut planar = vec![0.0f32; 3 * ch * cw];
    for y in 0..ch {
        for x in 0..cw {
            let px = img.get_pixel((x1 + x) as u32, (y1 + y) as u32);
            for c in 0..3 {
                planar[(c * ch + y) * cw + x] = f32::from(px[c]) / 255.0;
            }
        }
    }
    let data = resize_bilinear(&planar, 3, (ch, cw), (r, r))
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Some(Tensor::new([3, r, r], data).expect("resize output matches shape"))
}

/// Reads every image of one directory. With `label == None` each image's
/// class comes from the CSV's `ClassId` mapped through `class_ids`.
fn read_dir_images(
    dir: &Path,
    root: &Path,
    label: Option<usize>,
    class_ids: &HashMap<usize, usize>,
    r: usize,
    samples: &mut Vec<Sample>,
) -> Result<LoadReport> {
    let entries = sorted_entries(dir)?;
    let mut table = HashMap::new();
    let csvs: Vec<&PathBuf> = entries.iter().filter(|p| p.is_file() && has_ext(p, &["csv"])).collect();
    for csv_path in &csvs {
        read_annotations(csv_path, &mut table)?;
    }
    let annotated = !csvs.is_empty();
    if label.is_none() && !annotated {
        return Err(load_err(
            dir,
            "flat image directory needs an annotation CSV with ClassId",
        ));
    }
    let mut report = LoadReport::default();
    for path in entries.iter().filter(|p| p.is_file() && has_ext(p, &IMAGE_EXTENSIONS)) {
        let name = file_name(path);
        let ann = match table.get(&name) {
            Some(a) => Some(a),
            None if annotated => {
                return Err(load_err(path, "image has no annotation row in the directory's CSV"));
            }
            None => None,
        };
        let label = match label {
            Some(l) => l,
            None => {
                let id = ann
                    .and_then(|a| a.class_id)
                    .ok_or_else(|| load_err(path, "annotation row has no ClassId"))?;
                *class_ids
                    .get(&id)
                    .ok_or_else(|| load_err(path, format!("ClassId {id} does not match any training class")))?
            }
        };
        match read_image(path, ann.and_then(|a| a.roi), r) {
            Some(image) => {
                let source_id = path
                    .strip_prefix(root)
                    .unwrap_or(path)
                    .to_string_lossy()
                    .replace('\\', "/");
                samples.push(Sample {
                    image,
                    label,
                    source_id,
                });
                report.loaded += 1;
            }
            None => report.skipped.push(path.clone()),
        }
    }
    Ok(report)
}

fn class_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(load_err(root, "dataset directory does not exist"));
    }
    Ok(sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect())
}

fn load_with_classes(root: &Path, resolution: usize, class_names: Option<&[String]>) -> Result<(Dataset, LoadReport)> {
    let dirs = class_dirs(root)?;
    let mut samples = Vec::new();
    let mut report = LoadReport::default();
    let names: Vec<String> = match class_names {
        Some(names) => names.to_vec(),
        None => dirs.iter().map(|d| file_name(d)).collect(),
    };
    if dirs.is_empty() {
        let Some(names) = class_names else {
            return Err(load_err(root, "no class subdirectories found"));
        };
        let ids: HashMap<usize, usize> = names
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.parse::<usize>().ok().map(|id| (id, i)))
            .collect();
        report.merge(read_dir_images(root, root, None, &ids, resolution, &mut samples)?);
    } else {
        for dir in &dirs {
            let name = file_name(dir);
            let label = names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| load_err(dir, "class directory not present in the training split"))?;
            report.merge(read_dir_images(
                dir,
                root,
                Some(label),
                &HashMap::new(),
                resolution,
                &mut samples,
            )?);
        }
    }
    if samples.is_empty() {
        return Err(load_err(root, "no readable samples found"));
    }
    if !report.skipped.is_empty() {
        warn!(
            "{}: skipped {} undecodable images",
            root.display(),
            report.skipped.len()
        );
    }
    Ok((Dataset::new(samples, names, resolution)?, report))
}

/// Loads one split directory: class count and labels come from the sorted
/// class subdirectory names.
pub fn load_gtsrb_dir(root: impl AsRef<Path>, resolution: usize) -> Result<(Dataset, LoadReport)> {
    load_with_classes(root.as_ref(), resolution, None)
}

fn held_out(dataset: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_val = vec![false; dataset.len()];
    for class in 0..dataset.num_classes() {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.samples[i].label == class)
            .collect();
        idx.shuffle(&mut rng);
        let n_val = if idx.len() >= 2 {
            ((idx.len() as f64 * VAL_FRACTION).round() as usize).clamp(1, idx.len() - 1)
        } else {
            0
        };
        for &i in &idx[..n_val] {
            is_val[i] = true;
        }
    }
    let pick = |want: bool| {
        let samples = dataset
            .samples
            .iter()
            .zip(&is_val)
            .filter(|(_, &v)| v == want)
            .map(|(s, _)| s.clone())
            .collect();
        Dataset::new(samples, dataset.class_names.clone(), dataset.resolution)
    };
    Ok((pick(false)?, pick(true)?))
}

/// Uses `root/train` with `root/test` (or `root/val`) when both exist;
/// otherwise loads `root` and holds out a seeded, per-class 20% for validation.
pub fn load_splits(root: impl AsRef<Path>, resolution: usize, seed: u64) -> Result<LoadedSplits> {
    let root = root.as_ref();
    let train_dir = root.join("train");
    let eval_dir = ["test", "val"].iter().map(|d| root.join(d)).find(|d| d.is_dir());
    if let (true, Some(eval_dir)) = (train_dir.is_dir(), eval_dir) {
        let (train, mut report) = load_gtsrb_dir(&train_dir, resolution)?;
        let (val, r2) = load_with_classes(&eval_dir, resolution, Some(&train.class_names))?;
        report.merge(r2);
        return Ok(LoadedSplits {
            train,
            val,
            official: true,
            report,
        });
    }
    let (all, report) = load_gtsrb_dir(root, resolution)?;
    let (train, val) = held_out(&all, seed)?;
    Ok(LoadedSplits {
        train,
        val,
        official: false,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_ppm(path: &Path, w: usize, h: usize, rgb: [u8; 3]) {
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        for _ in 0..w * h {
            bytes.extend_from_slice(&rgb);
        }
        fs::write(path, bytes).unwrap();
    }

    fn make_tree(root: &Path, classes: usize, per_class: usize) {
        for c in 0..classes {
            let dir = root.join(format!("{c:05}"));
            fs::create_dir_all(&dir).unwrap();
            let mut csv = String::from("Filename;Width;Height;Roi.X1;Roi.Y1;Roi.X2;Roi.Y2;ClassId\n");
            for i in 0..per_class {
                let name = format!("{c:05}_{i:05}.ppm");
                write_ppm(&dir.join(&name), 6, 5, [40 * c as u8, 100, 200]);
                csv.push_str(&format!("{name};6;5;1;1;4;3;{c}\n"));
            }
            fs::write(dir.join(format!("GT-{c:05}.csv")), csv).unwrap();
        }
    }

    #[test]
    fn empty_root_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_gtsrb_dir(dir.path(), 8), Err(Error::Load { .. })));
        assert!(matches!(
            load_gtsrb_dir(dir.path().join("nope"), 8),
            Err(Error::Load { .. })
        ));
    }

    #[test]
    fn duplicate_row_names_the_csv() {
        let dir = tempfile::tempdir().unwrap();
        make_tree(dir.path(), 1, 2);
        let csv = dir.path().join("00000/GT-00000.csv");
        let mut text = fs::read_to_string(&csv).unwrap();
        text.push_str("00000_00000.ppm;6;5;0;0;5;4;0\n");
        fs::write(&csv, text).unwrap();
        match load_gtsrb_dir(dir.path(), 8) {
            Err(Error::Load { path, msg }) => {
                assert_eq!(path, csv);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn missing_row_names_the_image() {
        let dir = tempfile::tempdir().unwrap();
        make_tree(dir.path(), 1, 2);
        let extra = dir.path().join("00000/extra.ppm");
        write_ppm(&extra, 3, 3, [0, 0, 0]);
        match load_gtsrb_dir(dir.path(), 8) {
            Err(Error::Load { path, .. }) => assert_eq!(path, extra),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn undecodable_images_are_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        make_tree(dir.path(), 2, 3);
        let bad = dir.path().join("00001/00001_00000.ppm");
        fs::write(&bad, b"P6\ngarbage").unwrap();
        let (ds, report) = load_gtsrb_dir(dir.path(), 8).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(report.skipped, vec![bad]);
    }

    #[test]
    fn roi_crop_of_uniform_image_is_uniform() {
        let dir = tempfile::tempdir().unwrap();
        make_tree(dir.path(), 2, 1);
        let (ds, _) = load_gtsrb_dir(dir.path(), 4).unwrap();
        let s = &ds.samples[1];
        assert_eq!(s.label, 1);
        assert!(s.image.data()[..16].iter().all(|&v| (v - 40.0 / 255.0).abs() < 1e-6));
        assert!(s.image.data()[32..].iter().all(|&v| (v - 200.0 / 255.0).abs() < 1e-6));
    }

    #[test]
    fn held_out_split_is_stratified_and_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        make_tree(dir.path(), 3, 10);
        let a = load_splits(dir.path(), 4, 5).unwrap();
        let b = load_splits(dir.path(), 4, 5).unwrap();
        assert!(!a.official);
        assert_eq!(a.val.class_counts(), vec![2, 2, 2]);
        assert_eq!(a.train.len(), 24);
        assert_eq!(a.val, b.val);
        let train_ids: Vec<_> = a.train.samples.iter().map(|s| &s.source_id).collect();
        assert!(a.val.samples.iter().all(|s| !train_ids.contains(&&s.source_id)));
    }

    #[test]
    fn official_split_with_flat_test_dir() {
        let dir = tempfile::tempdir().unwrap();
        make_tree(&dir.path().join("train"), 3, 2);
        let test = dir.path().join("test");
        fs::create_dir_all(&test).unwrap();
        write_ppm(&test.join("a.ppm"), 4, 4, [0, 0, 0]);
        write_ppm(&test.join("b.ppm"), 4, 4, [0, 0, 0]);
        fs::write(test.join("GT-final_test.csv"), "Filename;ClassId\na.ppm;2\nb.ppm;0\n").unwrap();
        let s = load_splits(dir.path(), 4, 0).unwrap();
        assert!(s.official);
        assert_eq!(s.val.labels(), vec![2, 0]);
        assert_eq!(s.val.num_classes(), 3);
    }
}
