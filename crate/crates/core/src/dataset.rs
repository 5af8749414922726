//! On-disk benchmark layout:
//!
//! ```text
//! root/
//!   manifest.cfg      key=value lines
//!   map.pcm           PCM1 map blob
//!   poses.csv         frame_id,tx,ty,tz,qw,qx,qy,qz (header row)
//!   images/%06d.png   8-bit RGB
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{format_pose_line, format_sig9, parse_pose_line, Intrinsics, PerturbationSpec, Pose, POSE_CSV_HEADER};
use crate::projection::Clips;

pub const MANIFEST_FILE: &str = "manifest.cfg";

/// Image preprocessing recipe applied before frames reach the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Recipe {
    /// Images are stored at network resolution.
    None,
    /// Zero-pad bottom/right to 384×1280.
    Kitti,
    /// Resize by 3/4, center-crop to 640×832.
    Nuscenes,
    /// Resize by 2/3, center-crop to 640×832.
    Meijo,
}

impl Recipe {
    pub fn name(self) -> &'static str {
        match self {
            Recipe::None => "none",
            Recipe::Kitti => "kitti",
            Recipe::Nuscenes => "nuscenes",
            Recipe::Meijo => "meijo",
        }
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Recipe::None),
            "kitti" => Ok(Recipe::Kitti),
            "nuscenes" => Ok(Recipe::Nuscenes),
            "meijo" => Ok(Recipe::Meijo),
            other => Err(Error::Manifest(format!("unknown recipe {other:?}"))),
        }
    }
}

/// Inclusive frame-index ranges of the three splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: RangeInclusive<usize>,
    pub val: RangeInclusive<usize>,
    pub eval: RangeInclusive<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Eval,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

impl Splits {
    /// 70/15/15 split of `n` frames (at least one frame in each split when
    /// `n >= 3`).
    pub fn proportional(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::Manifest(format!("need at least 3 frames for three splits, got {n}")));
        }
        let val_len = ((n as f64 * 0.15).round() as usize).max(1);
        let eval_len = val_len;
        let train_len = n - val_len - eval_len;
        Ok(Self {
            train: 0..=train_len - 1,
            val: train_len..=train_len + val_len - 1,
            eval: train_len + val_len..=n - 1,
        })
    }

    pub fn range(&self, split: Split) -> RangeInclusive<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Eval => self.eval.clone(),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        let mut found: BTreeMap<&str, RangeInclusive<usize>> = BTreeMap::new();
        for part in s.split(',') {
            let (name, range) = part
                .split_once(':')
                .ok_or_else(|| Error::Manifest(format!("split entry {part:?} lacks ':'")))?;
            let (a, b) = range
                .split_once('-')
                .ok_or_else(|| Error::Manifest(format!("split range {range:?} lacks '-'")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Manifest(format!("bad split bound {v:?}")))
            };
            let (a, b) = (parse(a)?, parse(b)?);
            if a > b {
                return Err(Error::Manifest(format!("empty split range {part:?}")));
            }
            if found.insert(name.trim(), a..=b).is_some() {
                return Err(Error::Manifest(format!("split {name:?} listed twice")));
            }
        }
        let mut take = |name: &str| {
            found
                .remove(name)
                .ok_or_else(|| Error::Manifest(format!("split {name:?} missing")))
        };
        let splits = Self {
            train: take("train")?,
            val: take("val")?,
            eval: take("eval")?,
        };
        if let Some(name) = found.keys().next() {
            return Err(Error::Manifest(format!("unknown split {name:?}")));
        }
        Ok(splits)
    }

    fn render(&self) -> String {
        format!(
            "train:{}-{},val:{}-{},eval:{}-{}",
            self.train.start(),
            self.train.end(),
            self.val.start(),
            self.val.end(),
            self.eval.start(),
            self.eval.end()
        )
    }

    /// Checks disjointness and that every range lies inside `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let named = [("train", &self.train), ("val", &self.val), ("eval", &self.eval)];
        for (name, r) in named {
            if *r.end() >= n {
                return Err(Error::Manifest(format!(
                    "split {name} ends at frame {} but only {n} frames exist",
                    r.end()
                )));
            }
        }
        for i in 0..named.len() {
            for j in i + 1..named.len() {
                let (a, b) = (named[i].1, named[j].1);
                if a.start() <= b.end() && b.start() <= a.end() {
                    return Err(Error::Manifest(format!(
                        "splits {} and {} overlap",
                        named[i].0, named[j].0
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parsed `manifest.cfg`. Paths are relative to `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub map: PathBuf,
    pub poses: PathBuf,
    pub images: PathBuf,
    pub recipe: Recipe,
    pub intrinsics: Intrinsics,
    pub clips: Clips,
    pub splits: Splits,
    pub perturbation: PerturbationSpec,
}

const KEYS: &[&str] = &[
    "map",
    "poses",
    "images",
    "recipe",
    "fx",
    "fy",
    "cx",
    "cy",
    "width",
    "height",
    "near_clip",
    "far_clip",
    "splits",
    "noise_trans_m",
    "noise_rot_deg",
    "seed",
];

impl DatasetManifest {
    /// Parses manifest text. `root` is the directory the paths are relative
    /// to. Does not touch the filesystem.
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Manifest(format!("line {}: expected key=value", no + 1)))?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(Error::Manifest(format!("line {}: unknown key {k:?}", no + 1)));
            }
            if kv.insert(k, v.trim()).is_some() {
                return Err(Error::Manifest(format!("line {}: duplicate key {k:?}", no + 1)));
            }
        }
        let get = |k: &str| kv.get(k).copied();
        let req = |k: &str| get(k).ok_or_else(|| Error::Manifest(format!("missing key {k:?}")));
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Manifest(format!("key {k:?}: cannot parse {v:?}")))
        }
        let f = |k: &str| -> Result<f64> {
            let v: f64 = num(k, req(k)?)?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Manifest(format!("key {k:?} is not finite")))
            }
        };
        let f_or = |k: &str, d: f64| -> Result<f64> {
            match get(k) {
                Some(_) => f(k),
                None => Ok(d),
            }
        };
        let intrinsics = Intrinsics::new(
            f("fx")?,
            f("fy")?,
            f("cx")?,
            f("cy")?,
            num("width", req("width")?)?,
            num("height", req("height")?)?,
        )
        .map_err(|e| Error::Manifest(e.to_string()))?;
        let clips = Clips {
            near: f_or("near_clip", Clips::default().near)?,
            far: f_or("far_clip", Clips::default().far)?,
        };
        clips.validate().map_err(|e| Error::Manifest(e.to_string()))?;
        let perturbation = PerturbationSpec {
            max_trans: f_or("noise_trans_m", 0.60)?,
            max_rot_deg: f_or("noise_rot_deg", 0.0)?,
            seed: num("seed", req("seed")?)?,
        };
        perturbation.validate()?;
        let path = |k: &str| -> Result<PathBuf> {
            let p = PathBuf::from(req(k)?);
            if p.as_os_str().is_empty() {
                return Err(Error::Manifest(format!("key {k:?} is empty")));
            }
            Ok(p)
        };
        Ok(Self {
            root: root.to_path_buf(),
            map: path("map")?,
            poses: path("poses")?,
            images: path("images")?,
            recipe: get("recipe").unwrap_or("none").parse()?,
            intrinsics,
            clips,
            splits: Splits::parse(req("splits")?)?,
            perturbation,
        })
    }

    pub fn to_cfg_string(&self) -> String {
        let k = &self.intrinsics;
        let mut s = String::new();
        let mut line = |key: &str, value: String| {
            writeln!(s, "{key}={value}").expect("write to string");
        };
        line("map", self.map.display().to_string());
        line("poses", self.poses.display().to_string());
        line("images", self.images.display().to_string());
        line("recipe", self.recipe.name().to_string());
        line("fx", format_sig9(k.fx));
        line("fy", format_sig9(k.fy));
        line("cx", format_sig9(k.cx));
        line("cy", format_sig9(k.cy));
        line("width", k.width.to_string());
        line("height", k.height.to_string());
        line("near_clip", format_sig9(self.clips.near));
        line("far_clip", format_sig9(self.clips.far));
        line("splits", self.splits.render());
        line("noise_trans_m", format_sig9(self.perturbation.max_trans));
        line("noise_rot_deg", format_sig9(self.perturbation.max_rot_deg));
        line("seed", self.perturbation.seed.to_string());
        s
    }

    pub fn map_path(&self) -> PathBuf {
        self.root.join(&self.map)
    }

    pub fn poses_path(&self) -> PathBuf {
        self.root.join(&self.poses)
    }

    pub fn image_path(&self, frame: usize) -> PathBuf {
        self.root.join(&self.images).join(format!("{frame:06}.png"))
    }

    /// Reads `root/manifest.cfg` (or the given file) and checks every
    /// invariant that involves the filesystem: files exist, one image per
    /// pose row and no stray images, splits disjoint and in range.
    /// Returns the manifest together with the ground-truth poses.
    pub fn load(path: &Path) -> Result<(Self, Vec<Pose>)> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let root = file.parent().unwrap_or(Path::new(".")).to_path_buf();
        let manifest = Self::parse(&text, &root)?;
        let map = manifest.map_path();
        if !map.is_file() {
            return Err(Error::Manifest(format!("map file {} does not exist", map.display())));
        }
        let poses = read_pose_csv(&manifest.poses_path())?;
        let images_dir = manifest.root.join(&manifest.images);
        let image_count = std::fs::read_dir(&images_dir)
            .map_err(|e| Error::io(&images_dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
            .count();
        if image_count != poses.len() {
            return Err(Error::Manifest(format!(
                "{} pose rows but {image_count} images in {}",
                poses.len(),
                images_dir.display()
            )));
        }
        for i in 0..poses.len() {
            let img = manifest.image_path(i);
            if !img.is_file() {
                return Err(Error::Manifest(format!("image {} for pose row {i} is missing", img.display())));
            }
        }
        manifest.splits.validate(poses.len())?;
        Ok((manifest, poses))
    }
}

/// Reads a pose CSV. Frame ids must be `0, 1, 2, ...` in row order.
pub fn read_pose_csv(path: &Path) -> Result<Vec<Pose>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pose_csv(&text).map_err(|e| match e {
        Error::PoseRow { line, reason } => Error::PoseRow {
            line,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}

pub fn parse_pose_csv(text: &str) -> Result<Vec<Pose>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == POSE_CSV_HEADER => {}
        Some((no, _)) => {
            return Err(Error::PoseRow {
                line: no + 1,
                reason: format!("expected header {POSE_CSV_HEADER:?}"),
            })
        }
        None => {
            return Err(Error::PoseRow {
                line: 1,
                reason: "empty pose file".into(),
            })
        }
    }
    let mut poses = Vec::new();
    for (no, l) in lines {
        let (id, pose) = parse_pose_line(l, no + 1)?;
        if id != poses.len() as u64 {
            return Err(Error::PoseRow {
                line: no + 1,
                reason: format!("frame id {id} out of sequence (expected {})", poses.len()),
            });
        }
        poses.push(pose);
    }
    Ok(poses)
}

pub fn format_pose_csv(poses: &[Pose]) -> String {
    let mut s = String::with_capacity(64 * (poses.len() + 1));
    s.push_str(POSE_CSV_HEADER);
    s.push('\n');
    for (i, p) in poses.iter().enumerate() {
        s.push_str(&format_pose_line(i as u64, p));
        s.push('\n');
    }
    s
}

pub fn write_pose_csv(path: &Path, poses: &[Pose]) -> Result<()> {
    std::fs::write(path, format_pose_csv(poses)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn sample() -> DatasetManifest {
        DatasetManifest {
            root: PathBuf::from("/data/x"),
            map: "map.pcm".into(),
            poses: "poses.csv".into(),
            images: "images".into(),
            recipe: Recipe::None,
            intrinsics: Intrinsics::new(416.0, 416.0, 416.0, 320.0, 832, 640).unwrap(),
            clips: Clips::default(),
            splits: Splits::proportional(100).unwrap(),
            perturbation: PerturbationSpec {
                seed: 7,
                ..Default::default()
            },
        }
    }

    #[test]
    fn cfg_round_trip() {
        let m = sample();
        let text = m.to_cfg_string();
        assert!(text.contains("splits=train:0-69,val:70-84,eval:85-99\n"));
        assert!(text.contains("noise_trans_m=0.6\n"));
        assert_eq!(DatasetManifest::parse(&text, &m.root).unwrap(), m);
    }

    #[test]
    fn manifest_errors() {
        let text = sample().to_cfg_string();
        let root = Path::new("/");
        assert!(DatasetManifest::parse(&format!("{text}bogus=1\n"), root).is_err());
        assert!(DatasetManifest::parse(&format!("{text}seed=3\n"), root).is_err());
        assert!(DatasetManifest::parse(&text.replace("fx=416", "fx=-1"), root).is_err());
        assert!(DatasetManifest::parse(&text.replace("splits=", "#"), root).is_err());
        assert!(DatasetManifest::parse(&text.replace("recipe=none", "recipe=waymo"), root).is_err());
        assert!(DatasetManifest::parse("map\n", root).is_err());
    }

    #[test]
    fn split_rules() {
        let s = Splits::proportional(20).unwrap();
        assert_eq!((s.train, s.val, s.eval), (0..=13, 14..=16, 17..=19));
        let overlapping = Splits::parse("train:0-10,val:10-12,eval:13-15").unwrap();
        assert!(overlapping.validate(16).is_err());
        let fine = Splits::parse("train:0-9,val:10-12,eval:13-15").unwrap();
        assert!(fine.validate(16).is_ok());
        assert!(fine.validate(15).is_err());
        assert!(Splits::parse("train:0-9,val:10-12").is_err());
        assert!(Splits::parse("train:5-1,val:10-12,eval:13-15").is_err());
        assert!(Splits::parse("train:0-9,val:10-12,eval:13-15,test:16-17").is_err());
        assert!(Splits::proportional(2).is_err());
    }

    #[test]
    fn pose_csv_rules() {
        let poses = vec![
            Pose::identity(),
            Pose::new(Vector3::new(1.0, 2.0, 3.0), [0.5, 0.5, 0.5, 0.5]).unwrap(),
        ];
        let text = format_pose_csv(&poses);
        assert_eq!(parse_pose_csv(&text).unwrap(), poses);
        assert!(parse_pose_csv("").is_err());
        assert!(parse_pose_csv("frame,a\n").is_err());
        let skipped = text.replace("\n1,", "\n2,");
        assert!(matches!(parse_pose_csv(&skipped), Err(Error::PoseRow { line: 3, .. })));
    }
}
