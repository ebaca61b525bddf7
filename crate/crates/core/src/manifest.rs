//! Scene manifests: a point cloud plus posed, imaged views.
//!
//! Line-oriented text. Blank lines and `#` comments are ignored; relative
//! paths resolve against the manifest's directory.
//!
//! ```text
//! pointcloud cloud.ply
//! background 1 1 1
//! resolution 64 64
//! view
//! intrinsics fx 0 cx  0 fy cy  0 0 1
//! extrinsics r00 r01 r02 t0  r10 r11 r12 t1  r20 r21 r22 t2  0 0 0 1
//! image views/000.png
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::camera::{Camera, DEFAULT_NEAR};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::image::ImageBuffer;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct ViewEntry {
    pub camera: Camera,
    pub image: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneManifest {
    /// Location of the manifest file itself.
    pub path: PathBuf,
    pub pointcloud: PathBuf,
    pub background: [f64; 3],
    pub width: usize,
    pub height: usize,
    pub views: Vec<ViewEntry>,
}

#[derive(Default)]
struct PartialView {
    intrinsics: Option<Vec<f64>>,
    extrinsics: Option<Vec<f64>>,
    image: Option<PathBuf>,
    line: usize,
}

impl SceneManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = Self::parse(path, &text)?;
        m.check_files()?;
        Ok(m)
    }

    /// Parse and validate everything except file existence.
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new(""));
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut pointcloud = None;
        let mut background = [1.0; 3];
        let mut resolution = None;
        let mut views: Vec<PartialView> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let rest = rest.trim();
            let numbers = || -> Result<Vec<f64>> {
                rest.split_whitespace()
                    .map(|t| {
                        t.parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite())
                            .ok_or_else(|| perr(line_no, format!("`{t}` is not a finite number")))
                    })
                    .collect()
            };
            match key {
                "pointcloud" => {
                    if rest.is_empty() {
                        return Err(perr(line_no, "pointcloud needs a path".into()));
                    }
                    pointcloud = Some(base.join(rest));
                }
                "background" => {
                    let v = numbers()?;
                    if v.len() != 3 || v.iter().any(|c| !(0.0..=1.0).contains(c)) {
                        return Err(perr(line_no, "background needs three values in [0, 1]".into()));
                    }
                    background = [v[0], v[1], v[2]];
                }
                "resolution" => {
                    let v: Vec<usize> = rest.split_whitespace().filter_map(|t| t.parse().ok()).collect();
                    if v.len() != 2 || rest.split_whitespace().count() != 2 || v.contains(&0) {
                        return Err(perr(line_no, "resolution needs two positive integers".into()));
                    }
                    resolution = Some((v[0], v[1]));
                }
                "view" => views.push(PartialView {
                    line: line_no,
                    ..Default::default()
                }),
                "intrinsics" | "extrinsics" | "image" => {
                    let v = views
                        .last_mut()
                        .ok_or_else(|| perr(line_no, format!("`{key}` outside a view block")))?;
                    match key {
                        "intrinsics" => v.intrinsics = Some(numbers()?),
                        "extrinsics" => v.extrinsics = Some(numbers()?),
                        _ => {
                            if rest.is_empty() {
                                return Err(perr(line_no, "image needs a path".into()));
                            }
                            v.image = Some(base.join(rest));
                        }
                    }
                }
                other => return Err(perr(line_no, format!("unknown key `{other}`"))),
            }
        }
        let pointcloud = pointcloud.ok_or_else(|| Error::format(path, "no pointcloud entry"))?;
        let (width, height) = resolution.ok_or_else(|| Error::format(path, "no resolution entry"))?;
        if views.is_empty() {
            return Err(Error::format(path, "manifest has no views"));
        }
        let mut out = Vec::with_capacity(views.len());
        for (vi, v) in views.into_iter().enumerate() {
            let missing = |what: &str| perr(v.line, format!("view {vi} has no {what}"));
            let k = v.intrinsics.ok_or_else(|| missing("intrinsics"))?;
            let e = v.extrinsics.ok_or_else(|| missing("extrinsics"))?;
            let image = v.image.ok_or_else(|| missing("image"))?;
            let shape = |field: &'static str, expected: usize, got: usize| Error::ShapeMismatch {
                path: path.to_path_buf(),
                view: vi,
                field,
                expected,
                got,
            };
            if k.len() != 9 {
                return Err(shape("intrinsics", 9, k.len()));
            }
            if e.len() != 16 {
                return Err(shape("extrinsics", 16, e.len()));
            }
            let intr = [[k[0], k[1], k[2]], [k[3], k[4], k[5]], [k[6], k[7], k[8]]];
            let extr = std::array::from_fn(|r| std::array::from_fn(|c| e[r * 4 + c]));
            let camera = Camera::new(intr, extr, width, height, DEFAULT_NEAR)
                .map_err(|err| Error::format(path, format!("view {vi}: {err}")))?;
            out.push(ViewEntry { camera, image });
        }
        Ok(Self {
            path: path.to_path_buf(),
            pointcloud,
            background,
            width,
            height,
            views: out,
        })
    }

    fn check_files(&self) -> Result<()> {
        if !self.pointcloud.is_file() {
            return Err(Error::MissingFile {
                path: self.pointcloud.clone(),
            });
        }
        for v in &self.views {
            if !v.image.is_file() {
                return Err(Error::MissingFile { path: v.image.clone() });
            }
        }
        Ok(())
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera.clone()).collect()
    }

    pub fn load_cloud(&self) -> Result<PointCloud> {
        crate::ply::read_ply(&self.pointcloud)
    }

    /// Ground-truth image of view `i`, checked against the manifest resolution.
    pub fn load_image<T: Real>(&self, i: usize) -> Result<ImageBuffer<T>> {
        let v = self
            .views
            .get(i)
            .ok_or_else(|| Error::invalid(format!("view {i} out of range ({} views)", self.views.len())))?;
        let img: ImageBuffer<T> = crate::imageio::read_image(&v.image)?;
        if img.width != self.width || img.height != self.height {
            return Err(Error::format(
                &v.image,
                format!(
                    "image is {}x{}, manifest resolution is {}x{}",
                    img.width, img.height, self.width, self.height
                ),
            ));
        }
        Ok(img)
    }

    pub fn load_images<T: Real>(&self) -> Result<Vec<ImageBuffer<T>>> {
        (0..self.views.len()).map(|i| self.load_image(i)).collect()
    }

    /// Text form; paths under the manifest's directory are written relative.
    pub fn to_text(&self) -> String {
        let base = self.path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| -> String {
            p.strip_prefix(base)
                .ok()
                .filter(|_| !base.as_os_str().is_empty())
                .unwrap_or(p)
                .display()
                .to_string()
        };
        let mut s = String::new();
        let _ = writeln!(s, "pointcloud {}", rel(&self.pointcloud));
        let b = self.background;
        let _ = writeln!(s, "background {} {} {}", b[0], b[1], b[2]);
        let _ = writeln!(s, "resolution {} {}", self.width, self.height);
        for v in &self.views {
            let k = v.camera.intrinsics;
            let e = v.camera.extrinsics;
            s.push_str("\nview\nintrinsics");
            for r in k {
                for x in r {
                    let _ = write!(s, " {x}");
                }
            }
            s.push_str("\nextrinsics");
            for r in e {
                for x in r {
                    let _ = write!(s, " {x}");
                }
            }
            let _ = writeln!(s, "\nimage {}", rel(&v.image));
        }
        s
    }

    /// Write to `self.path`.
    pub fn save(&self) -> Result<()> {
        std::fs::write(&self.path, self.to_text()).map_err(|e| Error::io(&self.path, e))
    }
}
