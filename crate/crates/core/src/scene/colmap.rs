//! COLMAP sparse models: `cameras`, `images`, `points3D` in text or binary.
//!
//! COLMAP already stores world-to-camera rotations (as `qw qx qy qz`) and
//! translations, which is the convention used throughout this crate.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use super::camera::{CameraModel, Pose};
use super::cloud::PointCloud;
use crate::error::{Error, Result};

const MODEL_NAMES: [&str; 11] = [
    "SIMPLE_PINHOLE",
    "PINHOLE",
    "SIMPLE_RADIAL",
    "RADIAL",
    "OPENCV",
    "OPENCV_FISHEYE",
    "FULL_OPENCV",
    "FOV",
    "SIMPLE_RADIAL_FISHEYE",
    "RADIAL_FISHEYE",
    "THIN_PRISM_FISHEYE",
];
const PARAM_COUNTS: [usize; 11] = [3, 4, 4, 5, 8, 8, 12, 5, 4, 5, 12];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelFormat {
    Text,
    Binary,
}

/// One registered image of a COLMAP model (pixels are loaded separately).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: u32,
    pub camera_id: u32,
    pub name: String,
    pub pose: Pose,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ColmapModel {
    pub cameras: BTreeMap<u32, CameraModel>,
    /// Sorted by id.
    pub images: Vec<ImageRecord>,
    pub points: PointCloud,
    /// COLMAP `POINT3D_ID` per row of `points`.
    pub point_ids: Vec<u64>,
}

fn camera_from_params(camera_id: u32, model_id: i32, width: u64, height: u64, params: &[f64]) -> Result<CameraModel> {
    let (fx, fy, cx, cy) = match (model_id, params) {
        (0, [f, cx, cy]) => (*f, *f, *cx, *cy),
        (1, [fx, fy, cx, cy]) => (*fx, *fy, *cx, *cy),
        _ => return Err(Error::UnsupportedCamera { camera_id, model_id }),
    };
    let cam = CameraModel {
        fx,
        fy,
        cx,
        cy,
        width: u32::try_from(width).map_err(|_| Error::Data(format!("camera {camera_id}: width too large")))?,
        height: u32::try_from(height).map_err(|_| Error::Data(format!("camera {camera_id}: height too large")))?,
    };
    cam.validate()
        .map_err(|e| Error::Data(format!("camera {camera_id}: {e}")))?;
    Ok(cam)
}

/// Locate the three model files, preferring binary when both exist.
fn model_paths(dir: &Path) -> Result<(ModelFormat, [PathBuf; 3])> {
    let paths = |ext: &str| ["cameras", "images", "points3D"].map(|n| dir.join(format!("{n}.{ext}")));
    let bin = paths("bin");
    if bin.iter().all(|p| p.is_file()) {
        return Ok((ModelFormat::Binary, bin));
    }
    let txt = paths("txt");
    if txt.iter().all(|p| p.is_file()) {
        return Ok((ModelFormat::Text, txt));
    }
    let missing = txt
        .iter()
        .zip(&bin)
        .find(|(t, b)| !t.is_file() && !b.is_file())
        .map(|(t, _)| t.with_extension("{bin,txt}"))
        .unwrap_or_else(|| dir.to_path_buf());
    Err(Error::format(missing, "COLMAP model file not found"))
}

pub fn load_colmap_model(dir: impl AsRef<Path>) -> Result<ColmapModel> {
    let dir = dir.as_ref();
    let (format, [cams, imgs, pts]) = model_paths(dir)?;
    let read = |p: &Path| fs::read(p).map_err(|e| Error::io(p, e));
    let (cameras, images, (points, point_ids)) = match format {
        ModelFormat::Binary => (
            binary::cameras(&read(&cams)?, &cams)?,
            binary::images(&read(&imgs)?, &imgs)?,
            binary::points(&read(&pts)?, &pts)?,
        ),
        ModelFormat::Text => {
            let text = |p: &Path| -> Result<String> {
                String::from_utf8(read(p)?).map_err(|_| Error::format(p, "not valid utf-8"))
            };
            (
                text::cameras(&text(&cams)?, &cams)?,
                text::images(&text(&imgs)?, &imgs)?,
                text::points(&text(&pts)?, &pts)?,
            )
        }
    };
    for im in &images {
        if !cameras.contains_key(&im.camera_id) {
            return Err(Error::format(
                &imgs,
                format!("image {} references unknown camera {}", im.id, im.camera_id),
            ));
        }
    }
    if points.is_empty() {
        warn!("{}: model has no 3D points", dir.display());
    }
    let mut images = images;
    images.sort_by_key(|i| i.id);
    Ok(ColmapModel {
        cameras,
        images,
        points,
        point_ids,
    })
}

pub fn save_colmap_model(model: &ColmapModel, dir: impl AsRef<Path>, format: ModelFormat) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ids: Vec<u64> = if model.point_ids.len() == model.points.len() {
        model.point_ids.clone()
    } else {
        (1..=model.points.len() as u64).collect()
    };
    let files: [(&str, Vec<u8>); 3] = match format {
        ModelFormat::Text => [
            ("cameras.txt", text::write_cameras(model).into_bytes()),
            ("images.txt", text::write_images(model).into_bytes()),
            ("points3D.txt", text::write_points(&model.points, &ids).into_bytes()),
        ],
        ModelFormat::Binary => [
            ("cameras.bin", binary::write_cameras(model)),
            ("images.bin", binary::write_images(model)),
            ("points3D.bin", binary::write_points(&model.points, &ids)),
        ],
    };
    for (name, bytes) in files {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn rgb_u8(c: [f32; 3]) -> [u8; 3] {
    c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

mod text {
    use super::*;

    fn records(src: &str) -> impl Iterator<Item = (usize, &str)> {
        src.lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.starts_with('#'))
    }

    fn num<T: std::str::FromStr>(tok: Option<&str>, path: &Path, line: usize) -> Result<T> {
        let t = tok.ok_or_else(|| Error::format(path, format!("line {line}: truncated record")))?;
        t.parse()
            .map_err(|_| Error::format(path, format!("line {line}: bad number '{t}'")))
    }

    pub fn cameras(src: &str, path: &Path) -> Result<BTreeMap<u32, CameraModel>> {
        let mut out = BTreeMap::new();
        for (line, l) in records(src).filter(|(_, l)| !l.is_empty()) {
            let mut tok = l.split_whitespace();
            let id: u32 = num(tok.next(), path, line)?;
            let model = tok
                .next()
                .ok_or_else(|| Error::format(path, format!("line {line}: truncated record")))?;
            let model_id = MODEL_NAMES.iter().position(|m| *m == model).map(|i| i as i32).unwrap_or(-1);
            let width: u64 = num(tok.next(), path, line)?;
            let height: u64 = num(tok.next(), path, line)?;
            let params = tok
                .map(|t| num(Some(t), path, line))
                .collect::<Result<Vec<f64>>>()?;
            out.insert(id, camera_from_params(id, model_id, width, height, &params)?);
        }
        Ok(out)
    }

    pub fn images(src: &str, path: &Path) -> Result<Vec<ImageRecord>> {
        let mut out = Vec::new();
        let mut lines = records(src).peekable();
        while let Some((line, l)) = lines.next() {
            if l.is_empty() {
                continue;
            }
            let mut tok = l.split_whitespace();
            let id: u32 = num(tok.next(), path, line)?;
            let mut q = [0.0; 4];
            for v in &mut q {
                *v = num(tok.next(), path, line)?;
            }
            let mut t = [0.0; 3];
            for v in &mut t {
                *v = num(tok.next(), path, line)?;
            }
            let camera_id: u32 = num(tok.next(), path, line)?;
            let name = tok.collect::<Vec<_>>().join(" ");
            if name.is_empty() {
                return Err(Error::format(path, format!("line {line}: missing image name")));
            }
            // every image line is followed by its (possibly empty) 2D observation line
            if lines.next().is_none() {
                return Err(Error::format(path, format!("line {line}: missing POINTS2D line for image {id}")));
            }
            out.push(ImageRecord {
                id,
                camera_id,
                name,
                pose: Pose::from_quaternion(q, t),
            });
        }
        Ok(out)
    }

    pub fn points(src: &str, path: &Path) -> Result<(PointCloud, Vec<u64>)> {
        let mut positions = Vec::new();
        let mut colors = Vec::new();
        let mut ids = Vec::new();
        for (line, l) in records(src).filter(|(_, l)| !l.is_empty()) {
            let mut tok = l.split_whitespace();
            ids.push(num::<u64>(tok.next(), path, line)?);
            let mut p = [0.0f64; 3];
            for v in &mut p {
                *v = num(tok.next(), path, line)?;
            }
            let mut c = [0u8; 3];
            for v in &mut c {
                *v = num(tok.next(), path, line)?;
            }
            let _error: f64 = num(tok.next(), path, line)?;
            positions.push(p.map(|v| v as f32));
            colors.push(c.map(|v| v as f32 / 255.0));
        }
        let cloud = PointCloud {
            positions,
            colors: Some(colors),
        };
        cloud.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok((cloud, ids))
    }

    pub fn write_cameras(model: &ColmapModel) -> String {
        let mut s = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
        for (id, c) in &model.cameras {
            writeln!(s, "{id} PINHOLE {} {} {:?} {:?} {:?} {:?}", c.width, c.height, c.fx, c.fy, c.cx, c.cy).unwrap();
        }
        s
    }

    pub fn write_images(model: &ColmapModel) -> String {
        let mut s = String::from("# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
        for im in &model.images {
            let q = im.pose.quaternion();
            let t = im.pose.translation;
            writeln!(
                s,
                "{} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {} {}\n",
                im.id, q[0], q[1], q[2], q[3], t[0], t[1], t[2], im.camera_id, im.name
            )
            .unwrap();
        }
        s
    }

    pub fn write_points(cloud: &PointCloud, ids: &[u64]) -> String {
        let mut s = String::from("# 3D point list with one line of data per point:\n#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
        for (i, p) in cloud.positions.iter().enumerate() {
            let c = cloud.colors.as_ref().map(|c| rgb_u8(c[i])).unwrap_or([128; 3]);
            writeln!(s, "{} {} {} {} {} {} {} 0", ids[i], p[0], p[1], p[2], c[0], c[1], c[2]).unwrap();
        }
        s
    }
}

mod binary {
    use super::*;

    struct Reader<'a> {
        buf: &'a [u8],
        pos: usize,
        path: &'a Path,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            if self.pos + n > self.buf.len() {
                return Err(Error::format(
                    self.path,
                    format!("truncated at byte {} (needed {n} more)", self.pos),
                ));
            }
            let s = &self.buf[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }
        fn u8(&mut self) -> Result<u8> {
            Ok(self.take(1)?[0])
        }
        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn i32(&mut self) -> Result<i32> {
            Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
        fn f64(&mut self) -> Result<f64> {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
        fn count(&mut self, record_min: usize) -> Result<usize> {
            let n = self.u64()?;
            // a count that cannot fit in the file means truncation or garbage
            if n.saturating_mul(record_min as u64) > (self.buf.len() - self.pos) as u64 {
                return Err(Error::format(self.path, format!("record count {n} exceeds file size")));
            }
            Ok(n as usize)
        }
        fn finish(&self) -> Result<()> {
            if self.pos != self.buf.len() {
                return Err(Error::format(self.path, format!("{} trailing bytes", self.buf.len() - self.pos)));
            }
            Ok(())
        }
    }

    pub fn cameras(buf: &[u8], path: &Path) -> Result<BTreeMap<u32, CameraModel>> {
        let mut r = Reader { buf, pos: 0, path };
        let n = r.count(24)?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let id = r.u32()?;
            let model_id = r.i32()?;
            let width = r.u64()?;
            let height = r.u64()?;
            let np = usize::try_from(model_id)
                .ok()
                .and_then(|m| PARAM_COUNTS.get(m).copied())
                .ok_or(Error::UnsupportedCamera { camera_id: id, model_id })?;
            let params = (0..np).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            out.insert(id, camera_from_params(id, model_id, width, height, &params)?);
        }
        r.finish()?;
        Ok(out)
    }

    pub fn images(buf: &[u8], path: &Path) -> Result<Vec<ImageRecord>> {
        let mut r = Reader { buf, pos: 0, path };
        let n = r.count(73)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let id = r.u32()?;
            let mut q = [0.0; 4];
            for v in &mut q {
                *v = r.f64()?;
            }
            let mut t = [0.0; 3];
            for v in &mut t {
                *v = r.f64()?;
            }
            let camera_id = r.u32()?;
            let mut name = Vec::new();
            loop {
                match r.u8()? {
                    0 => break,
                    b => name.push(b),
                }
            }
            let name = String::from_utf8(name).map_err(|_| Error::format(path, format!("image {id}: non-utf8 name")))?;
            let n2d = r.count(24)?;
            r.take(n2d * 24)?;
            out.push(ImageRecord {
                id,
                camera_id,
                name,
                pose: Pose::from_quaternion(q, t),
            });
        }
        r.finish()?;
        Ok(out)
    }

    pub fn points(buf: &[u8], path: &Path) -> Result<(PointCloud, Vec<u64>)> {
        let mut r = Reader { buf, pos: 0, path };
        let n = r.count(43)?;
        let mut positions = Vec::with_capacity(n);
        let mut colors = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(r.u64()?);
            let p = [r.f64()?, r.f64()?, r.f64()?];
            let c = [r.u8()?, r.u8()?, r.u8()?];
            let _error = r.f64()?;
            let track = r.count(8)?;
            r.take(track * 8)?;
            positions.push(p.map(|v| v as f32));
            colors.push(c.map(|v| v as f32 / 255.0));
        }
        r.finish()?;
        let cloud = PointCloud {
            positions,
            colors: Some(colors),
        };
        cloud.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok((cloud, ids))
    }

    pub fn write_cameras(model: &ColmapModel) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&(model.cameras.len() as u64).to_le_bytes());
        for (id, c) in &model.cameras {
            b.extend_from_slice(&id.to_le_bytes());
            b.extend_from_slice(&1i32.to_le_bytes());
            b.extend_from_slice(&(c.width as u64).to_le_bytes());
            b.extend_from_slice(&(c.height as u64).to_le_bytes());
            for v in [c.fx, c.fy, c.cx, c.cy] {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn write_images(model: &ColmapModel) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&(model.images.len() as u64).to_le_bytes());
        for im in &model.images {
            b.extend_from_slice(&im.id.to_le_bytes());
            for v in im.pose.quaternion() {
                b.extend_from_slice(&v.to_le_bytes());
            }
            for v in im.pose.translation {
                b.extend_from_slice(&v.to_le_bytes());
            }
            b.extend_from_slice(&im.camera_id.to_le_bytes());
            b.extend_from_slice(im.name.as_bytes());
            b.push(0);
            b.extend_from_slice(&0u64.to_le_bytes());
        }
        b
    }

    pub fn write_points(cloud: &PointCloud, ids: &[u64]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
        for (i, p) in cloud.positions.iter().enumerate() {
            b.extend_from_slice(&ids[i].to_le_bytes());
            for v in p {
                b.extend_from_slice(&(*v as f64).to_le_bytes());
            }
            let c = cloud.colors.as_ref().map(|c| rgb_u8(c[i])).unwrap_or([128; 3]);
            b.extend_from_slice(&c);
            b.extend_from_slice(&0f64.to_le_bytes());
            b.extend_from_slice(&0u64.to_le_bytes());
        }
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    fn tiny_text_model(dir: &Path, points: &str) {
        write(dir, "cameras.txt", "# c\n1 PINHOLE 64 48 50.0 52.0 32.0 24.0\n");
        write(dir, "images.txt", "# i\n7 1 0 0 0 0.5 -0.25 2 1 frame 7.png\n\n");
        write(dir, "points3D.txt", points);
    }

    #[test]
    fn one_camera_one_image_no_points() {
        let d = tempfile::tempdir().unwrap();
        tiny_text_model(d.path(), "# no points\n");
        let m = load_colmap_model(d.path()).unwrap();
        assert_eq!(m.cameras.len(), 1);
        assert_eq!(m.images.len(), 1);
        assert_eq!(m.images[0].name, "frame 7.png");
        assert_eq!(m.images[0].pose.translation, [0.5, -0.25, 2.0]);
        assert!(m.points.is_empty());
    }

    #[test]
    fn text_and_binary_round_trip() {
        let d = tempfile::tempdir().unwrap();
        tiny_text_model(d.path(), "1 0.5 1.5 -2 255 0 10 0.1 7 0\n9 3 2 1 1 2 3 0.0\n");
        let m = load_colmap_model(d.path()).unwrap();
        for fmt in [ModelFormat::Text, ModelFormat::Binary] {
            let out = d.path().join(format!("{fmt:?}"));
            save_colmap_model(&m, &out, fmt).unwrap();
            let back = load_colmap_model(&out).unwrap();
            assert_eq!(back.cameras, m.cameras);
            assert_eq!(back.points, m.points);
            assert_eq!(back.point_ids, vec![1, 9]);
            for (a, b) in back.images.iter().zip(&m.images) {
                assert_eq!((a.id, a.camera_id, &a.name), (b.id, b.camera_id, &b.name));
                for i in 0..3 {
                    assert!((a.pose.translation[i] - b.pose.translation[i]).abs() < 1e-9);
                    for j in 0..3 {
                        assert!((a.pose.rotation[i][j] - b.pose.rotation[i][j]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn binary_preferred_over_text() {
        let d = tempfile::tempdir().unwrap();
        tiny_text_model(d.path(), "");
        let mut m = load_colmap_model(d.path()).unwrap();
        m.points = PointCloud::new(vec![[1.0, 2.0, 3.0]]);
        m.point_ids = vec![5];
        save_colmap_model(&m, d.path(), ModelFormat::Binary).unwrap();
        assert_eq!(load_colmap_model(d.path()).unwrap().points.len(), 1);
    }

    #[test]
    fn unsupported_model_names_the_camera() {
        let d = tempfile::tempdir().unwrap();
        tiny_text_model(d.path(), "");
        write(d.path(), "cameras.txt", "3 OPENCV 64 48 50 50 32 24 0.1 0 0 0\n");
        match load_colmap_model(d.path()) {
            Err(Error::UnsupportedCamera { camera_id: 3, model_id: 4 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_and_truncated_files_name_the_file() {
        let d = tempfile::tempdir().unwrap();
        tiny_text_model(d.path(), "");
        fs::remove_file(d.path().join("points3D.txt")).unwrap();
        let err = load_colmap_model(d.path()).unwrap_err().to_string();
        assert!(err.contains("points3D"), "{err}");

        let d = tempfile::tempdir().unwrap();
        tiny_text_model(d.path(), "1 0 0 0 1 1 1 0\n");
        let m = load_colmap_model(d.path()).unwrap();
        save_colmap_model(&m, d.path(), ModelFormat::Binary).unwrap();
        let p = d.path().join("images.bin");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        match load_colmap_model(d.path()) {
            Err(Error::Format { path, .. }) => assert_eq!(path, p),
            other => panic!("{other:?}"),
        }
    }
}
