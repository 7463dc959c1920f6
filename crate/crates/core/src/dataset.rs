//! On-disk dataset layout.
//!
//! ```text
//! images/NNNN.png      8-bit RGB
//! masks/NNNN.png       8-bit labels 0/1/2/255
//! imu.csv              frame,roll_rad,pitch_rad[,sequence]
//! gt_boxes.jsonl       {"frame": n, "boxes": [[x1, y1, x2, y2], ...]}
//! gt_edge.jsonl        {"frame": n, "edge": [[x, y], ...]}
//! intrinsics.txt       key=value camera parameters
//! manifest.json        seed, generator params, count, per-file SHA-256
//! ```
//!
//! Floats are written in shortest round-trip form, so reading a written
//! dataset reproduces it exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::horizon::{CameraIntrinsics, ImuSample};
use crate::metrics::FrameGT;
use crate::postprocess::{BBox, SegLabelMap};
use crate::scene::{SceneParams, SceneSample};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const IMU_CSV: &str = "imu.csv";
pub const GT_BOXES: &str = "gt_boxes.jsonl";
pub const GT_EDGE: &str = "gt_edge.jsonl";
pub const INTRINSICS: &str = "intrinsics.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: Option<u64>,
    pub params: Option<SceneParams>,
    pub count: usize,
    /// Relative path → SHA-256 hex digest.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImuRow {
    pub frame: usize,
    #[serde(rename = "roll_rad")]
    pub roll: f64,
    #[serde(rename = "pitch_rad")]
    pub pitch: f64,
    /// Optional column; frames without one form a single sequence.
    #[serde(default = "default_sequence")]
    pub sequence: String,
}

fn default_sequence() -> String {
    "seq00".to_string()
}

#[derive(Serialize, Deserialize)]
struct BoxesLine {
    frame: usize,
    boxes: Vec<BBox>,
}

#[derive(Serialize, Deserialize)]
struct EdgeLine {
    frame: usize,
    edge: Vec<(f64, f64)>,
}

pub fn frame_name(frame: usize) -> String {
    format!("{frame:04}.png")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// PNG bytes of a `[3, H, W]` image in `[0, 1]`.
pub fn encode_rgb(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::contract(format!("expected an RGB image, got {:?}", image.shape())));
    }
    let d = image.data();
    let plane = h * w;
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([to_u8(d[p]), to_u8(d[plane + p]), to_u8(d[2 * plane + p])])
    });
    png_bytes(img)
}

pub fn encode_gray(width: usize, height: usize, values: Vec<u8>) -> Result<Vec<u8>> {
    let img: GrayImage = ImageBuffer::from_raw(width as u32, height as u32, values)
        .ok_or_else(|| Error::contract("mask buffer does not match its dimensions"))?;
    png_bytes(img)
}

/// PNG bytes of an interleaved 8-bit RGB buffer.
pub fn encode_rgb8(width: usize, height: usize, rgb: Vec<u8>) -> Result<Vec<u8>> {
    let img: RgbImage = ImageBuffer::from_raw(width as u32, height as u32, rgb)
        .ok_or_else(|| Error::contract("rgb buffer does not match its dimensions"))?;
    png_bytes(img)
}

fn png_bytes<P: image::PixelWithColorType<Subpixel = u8>>(img: ImageBuffer<P, Vec<u8>>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| Error::Contract(format!("png encoding failed: {e}")))?;
    Ok(out)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::parse(path, 0, format!("unreadable png: {e}")))
}

pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = decode(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for k in 0..3 {
            data[k * h * w + p] = px.0[k] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn read_mask(path: &Path) -> Result<SegLabelMap> {
    let img = decode(path)?;
    let gray: ImageBuffer<Luma<u8>, Vec<u8>> = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::parse(
                path,
                0,
                format!("mask must be 8-bit single channel, got {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    SegLabelMap::from_codes(h, w, gray.as_raw()).map_err(|e| Error::parse(path, 0, e.to_string()))
}

/// Writes `samples` under `dir` and returns the manifest written alongside.
pub fn write_dataset(samples: &[SceneSample], dir: &Path, params: Option<&SceneParams>) -> Result<Manifest> {
    let first = samples
        .first()
        .ok_or_else(|| Error::contract("cannot write an empty dataset"))?;
    if samples.iter().any(|s| s.camera != first.camera) {
        return Err(Error::contract("all frames of a dataset must share one camera"));
    }
    let mut files = BTreeMap::new();
    let mut put = |rel: String, bytes: Vec<u8>| -> Result<()> {
        write_bytes(&dir.join(&rel), &bytes)?;
        files.insert(rel, sha256_hex(&bytes));
        Ok(())
    };

    let mut imu = csv::Writer::from_writer(Vec::new());
    let mut boxes = String::new();
    let mut edges = String::new();
    for s in samples {
        let name = frame_name(s.frame);
        put(format!("images/{name}"), encode_rgb(&s.image)?)?;
        put(
            format!("masks/{name}"),
            encode_gray(s.labels.width(), s.labels.height(), s.labels.to_codes())?,
        )?;
        imu.serialize(ImuRow {
            frame: s.frame,
            sequence: s.sequence.clone(),
            roll: s.imu.roll,
            pitch: s.imu.pitch,
        })
        .map_err(|e| Error::Contract(format!("csv: {e}")))?;
        boxes += &json_line(&BoxesLine {
            frame: s.frame,
            boxes: s.gt.gt_boxes.clone(),
        })?;
        edges += &json_line(&EdgeLine {
            frame: s.frame,
            edge: s.gt.gt_edge.clone(),
        })?;
    }
    let imu = imu.into_inner().map_err(|e| Error::Contract(format!("csv: {e}")))?;
    put(IMU_CSV.into(), imu)?;
    put(GT_BOXES.into(), boxes.into_bytes())?;
    put(GT_EDGE.into(), edges.into_bytes())?;
    put(INTRINSICS.into(), first.camera.to_text().into_bytes())?;

    let manifest = Manifest {
        seed: params.map(|p| p.seed),
        params: params.cloned(),
        count: samples.len(),
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Contract(e.to_string()))?;
    write_bytes(&dir.join(MANIFEST), text.as_bytes())?;
    Ok(manifest)
}

pub(crate) fn json_line<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string(v).map_err(|e| Error::Contract(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// SHA-256 of the manifest file.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn read_manifest(dir: &Path) -> Result<Option<Manifest>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(None);
    }
    let text = read_text(&path)?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::parse(&path, e.line(), e.to_string()))
}

/// Parses JSON lines, skipping blank ones; errors carry the 1-based line number.
pub(crate) fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?);
    }
    Ok(out)
}

pub fn read_imu(dir: &Path) -> Result<BTreeMap<usize, ImuRow>> {
    let path = dir.join(IMU_CSV);
    let mut reader = csv::Reader::from_path(&path).map_err(|e| csv_error(&path, e))?;
    let mut rows = BTreeMap::new();
    for row in reader.deserialize::<ImuRow>() {
        let row = row.map_err(|e| csv_error(&path, e))?;
        ImuSample::new(row.roll, row.pitch).map_err(|e| Error::parse(&path, 0, e.to_string()))?;
        let frame = row.frame;
        if rows.insert(frame, row).is_some() {
            return Err(Error::parse(&path, 0, format!("duplicate row for frame {frame}")));
        }
    }
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::parse(path, line, format!("{kind:?}")),
    }
}

pub fn read_camera(dir: &Path) -> Result<CameraIntrinsics> {
    let path = dir.join(INTRINSICS);
    CameraIntrinsics::parse(&read_text(&path)?, &path)
}

/// Ground truth per frame, read from the two JSON-lines files.
pub fn read_ground_truth(dir: &Path) -> Result<BTreeMap<usize, FrameGT>> {
    let boxes_path = dir.join(GT_BOXES);
    let edge_path = dir.join(GT_EDGE);
    let boxes: Vec<BoxesLine> = read_json_lines(&boxes_path)?;
    let edges: Vec<EdgeLine> = read_json_lines(&edge_path)?;
    let mut edge_map: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for e in edges {
        if edge_map.insert(e.frame, e.edge).is_some() {
            return Err(Error::parse(&edge_path, 0, format!("duplicate edge for frame {}", e.frame)));
        }
    }
    let mut out = BTreeMap::new();
    for b in boxes {
        let edge = edge_map
            .remove(&b.frame)
            .ok_or_else(|| Error::parse(&edge_path, 0, format!("no edge for frame {}", b.frame)))?;
        let gt = FrameGT {
            gt_boxes: b.boxes,
            gt_edge: edge,
        };
        gt.validate()
            .map_err(|e| Error::parse(&boxes_path, 0, format!("frame {}: {e}", b.frame)))?;
        if out.insert(b.frame, gt).is_some() {
            return Err(Error::parse(&boxes_path, 0, format!("duplicate boxes for frame {}", b.frame)));
        }
    }
    if let Some(frame) = edge_map.keys().next() {
        return Err(Error::parse(&boxes_path, 0, format!("no boxes for frame {frame}")));
    }
    Ok(out)
}

/// Frame ids of `images/*.png`, ascending.
pub fn list_frames(dir: &Path) -> Result<Vec<usize>> {
    let images = dir.join("images");
    let entries = fs::read_dir(&images).map_err(|e| Error::io(&images, e))?;
    let mut frames = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&images, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::parse(&path, 0, "image names must be frame numbers"))?;
        frames.push(id);
    }
    frames.sort_unstable();
    Ok(frames)
}

/// An image with its IMU reading, as needed for inference.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub frame: usize,
    pub sequence: String,
    pub image: Tensor,
    pub imu: ImuSample,
}

fn image_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join("images").join(frame_name(frame))
}

/// Images and IMU rows only; masks and ground truth may be absent.
pub fn read_inputs(dir: &Path) -> Result<(CameraIntrinsics, Vec<FrameInput>)> {
    let camera = read_camera(dir)?;
    let imu = read_imu(dir)?;
    let mut out = Vec::new();
    for frame in list_frames(dir)? {
        let row = imu.get(&frame).ok_or_else(|| {
            Error::parse(dir.join(IMU_CSV), 0, format!("missing row for frame {frame}"))
        })?;
        let path = image_path(dir, frame);
        let image = read_rgb(&path)?;
        let (_, h, w) = image.chw()?;
        if (w, h) != (camera.width, camera.height) {
            return Err(Error::parse(
                &path,
                0,
                format!("image is {w}x{h} but the intrinsics describe {}x{}", camera.width, camera.height),
            ));
        }
        out.push(FrameInput {
            frame,
            sequence: row.sequence.clone(),
            image,
            imu: ImuSample::new(row.roll, row.pitch)?,
        });
    }
    Ok((camera, out))
}

/// Every frame with its labels and ground truth.
pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let (camera, inputs) = read_inputs(dir)?;
    let mut gt = read_ground_truth(dir)?;
    inputs
        .into_iter()
        .map(|f| {
            let mask_path = dir.join("masks").join(frame_name(f.frame));
            let labels = read_mask(&mask_path)?;
            let (_, h, w) = f.image.chw()?;
            if (labels.height(), labels.width()) != (h, w) {
                return Err(Error::parse(&mask_path, 0, "mask size differs from its image"));
            }
            let gt = gt.remove(&f.frame).ok_or_else(|| {
                Error::parse(dir.join(GT_BOXES), 0, format!("missing ground truth for frame {}", f.frame))
            })?;
            Ok(SceneSample {
                frame: f.frame,
                sequence: f.sequence,
                image: f.image,
                labels,
                imu: f.imu,
                camera,
                gt,
            })
        })
        .collect()
}
