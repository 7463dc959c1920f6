//! Horizon line from an IMU reading and the below-horizon prior mask.
//!
//! The camera follows a pinhole model without distortion. Roll turns the
//! horizon about the anchor column (`slope = tan(roll)`), pitch shifts it
//! vertically (`intercept = cy + focal·tan(pitch)`). Rows grow downward, so
//! positive pitch (camera tilted up) pushes the horizon down the frame and
//! leaves less water visible.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Roll and pitch in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    /// Rotation about the optical axis; positive turns the horizon clockwise in the image.
    pub roll: f64,
    /// Positive when the camera is tilted upward.
    pub pitch: f64,
}

impl ImuSample {
    pub fn new(roll: f64, pitch: f64) -> Result<Self> {
        let s = Self { roll, pitch };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.roll.abs() < FRAC_PI_2 && self.pitch.abs() < FRAC_PI_2) {
            return Err(Error::contract(format!(
                "IMU sample out of range: roll {} pitch {}",
                self.roll, self.pitch
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    /// Principal point at the image center, so horizontal flips map the camera onto itself.
    pub fn centered(width: usize, height: usize, focal_px: f64) -> Self {
        Self {
            focal_px,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |v: f64, extent: usize| (0.0..=extent as f64 - 1.0).contains(&v);
        if !(self.focal_px > 0.0)
            || self.width == 0
            || self.height == 0
            || !inside(self.cx, self.width)
            || !inside(self.cy, self.height)
        {
            return Err(Error::contract(format!("invalid camera intrinsics {self:?}")));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "focal_px={}\ncx={}\ncy={}\nwidth={}\nheight={}\n",
            self.focal_px, self.cx, self.cy, self.width, self.height
        )
    }

    /// Parses `key=value` lines (`#` comments and blank lines allowed); `path` labels errors.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let (mut focal, mut cx, mut cy, mut width, mut height) = (None, None, None, None, None);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::parse(path, i + 1, msg);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let value = value.trim();
            let real = || value.parse::<f64>().map_err(|e| err(format!("{key}: {e}")));
            let int = || value.parse::<usize>().map_err(|e| err(format!("{key}: {e}")));
            match key.trim() {
                "focal_px" => focal = Some(real()?),
                "cx" => cx = Some(real()?),
                "cy" => cy = Some(real()?),
                "width" => width = Some(int()?),
                "height" => height = Some(int()?),
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        let missing = |k: &str| Error::parse(path, 0, format!("missing key {k}"));
        let cam = Self {
            focal_px: focal.ok_or_else(|| missing("focal_px"))?,
            cx: cx.ok_or_else(|| missing("cx"))?,
            cy: cy.ok_or_else(|| missing("cy"))?,
            width: width.ok_or_else(|| missing("width"))?,
            height: height.ok_or_else(|| missing("height"))?,
        };
        cam.validate().map_err(|e| Error::parse(path, 0, e.to_string()))?;
        Ok(cam)
    }
}

/// `row(c) = slope·(c − anchor_col) + intercept_row`, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonLine {
    pub slope: f64,
    pub intercept_row: f64,
    pub anchor_col: f64,
}

impl HorizonLine {
    pub fn row_at(&self, col: f64) -> f64 {
        self.slope * (col - self.anchor_col) + self.intercept_row
    }
}

pub fn horizon_line(imu: ImuSample, cam: &CameraIntrinsics) -> HorizonLine {
    HorizonLine {
        slope: imu.roll.tan(),
        intercept_row: cam.cy + cam.focal_px * imu.pitch.tan(),
        anchor_col: cam.cx,
    }
}

/// `[1, height, width]` mask with 1 strictly below the horizon, 0 elsewhere.
pub fn render_imu_mask(line: &HorizonLine, width: usize, height: usize) -> Result<Tensor> {
    let mut data = vec![0.0; width * height];
    for c in 0..width {
        let boundary = line.row_at(c as f64);
        for r in 0..height {
            if r as f64 > boundary {
                data[r * width + c] = 1.0;
            }
        }
    }
    Tensor::new(&[1, height, width], data)
}

/// Bilinear downsample of a `[1, H, W]` mask; fractional values are kept as a soft prior.
pub fn resize_mask(mask: &Tensor, (h, w): (usize, usize)) -> Result<Tensor> {
    let (c, sh, sw) = mask.chw()?;
    if c != 1 || h == 0 || w == 0 || h > sh || w > sw {
        return Err(Error::contract(format!(
            "resize_mask: cannot resize {:?} to {h}x{w}",
            mask.shape()
        )));
    }
    if (h, w) == (sh, sw) {
        return Ok(mask.detach());
    }
    let data = crate::tensor::resample_plane(mask.data(), (sh, sw), (h, w));
    Tensor::new(&[1, h, w], data)
}
