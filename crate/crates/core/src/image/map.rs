use iid_tensor::{resize_tensor, Tensor};

use crate::error::{Error, Result};

/// Rec.709 luma weights for linear RGB.
pub const REC709: [f32; 3] = [0.2126, 0.7152, 0.0722];

/// Planar (channel-major) float raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Map {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Invalid(format!(
                "raster of {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// Build from `f(channel, y, x)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f32) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Map {
        Map {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().cloned().fold(f32::INFINITY, f32::min)
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn same_dims(&self, other: &Map) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn ensure_dims(&self, other: &Map, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "{what}: size mismatch {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    /// Rec.709 luminance of a 3-channel raster; 1-channel rasters are returned as is.
    pub fn luminance(&self) -> Map {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.pixels();
        let mut out = vec![0.0f32; n];
        for (c, w) in REC709.iter().enumerate().take(self.channels) {
            for (o, &v) in out.iter_mut().zip(self.plane(c)) {
                *o += w * v;
            }
        }
        Map {
            width: self.width,
            height: self.height,
            channels: 1,
            data: out,
        }
    }

    /// Unweighted channel mean per pixel.
    pub fn channel_mean(&self) -> Map {
        let n = self.pixels();
        let mut out = vec![0.0f32; n];
        for c in 0..self.channels {
            for (o, &v) in out.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        let k = self.channels as f32;
        out.iter_mut().for_each(|v| *v /= k);
        Map {
            width: self.width,
            height: self.height,
            channels: 1,
            data: out,
        }
    }

    /// Channel `c` as a standalone 1-channel raster.
    pub fn channel(&self, c: usize) -> Map {
        Map {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.plane(c).to_vec(),
        }
    }

    /// Bilinear resize (align-corners = false).
    pub fn resize(&self, width: usize, height: usize) -> Result<Map> {
        if (width, height) == (self.width, self.height) {
            return Ok(self.clone());
        }
        let t = resize_tensor(&self.to_tensor(), height, width)?;
        Map::from_tensor(&t, 0)
    }

    /// `(1, channels, height, width)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, self.channels, self.height, self.width], self.data.clone())
            .expect("raster length matches its shape")
    }

    /// Batch item `n` of an NCHW tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Map> {
        let [b, c, h, w] = t.shape();
        if n >= b {
            return Err(Error::Invalid(format!("batch index {n} out of range {b}")));
        }
        let len = c * h * w;
        Map::new(w, h, c, t.data()[n * len..(n + 1) * len].to_vec())
    }

    /// Elementwise product with a 1-channel raster broadcast over channels.
    pub fn mul_broadcast(&self, s: &Map) -> Result<Map> {
        self.ensure_dims(s, "multiply")?;
        if s.channels != 1 && s.channels != self.channels {
            return Err(Error::Invalid(format!(
                "multiply: cannot broadcast {} channels over {}",
                s.channels, self.channels
            )));
        }
        let n = self.pixels();
        let mut out = self.clone();
        for c in 0..self.channels {
            let sp = s.plane(if s.channels == 1 { 0 } else { c });
            for (o, &k) in out.data[c * n..(c + 1) * n].iter_mut().zip(sp) {
                *o *= k;
            }
        }
        Ok(out)
    }

    /// Swap rows so that row 0 becomes the last row.
    pub fn flip_vertical(&self) -> Map {
        Map::from_fn(self.width, self.height, self.channels, |c, y, x| {
            self.get(c, self.height - 1 - y, x)
        })
    }

    pub fn flip_horizontal(&self) -> Map {
        Map::from_fn(self.width, self.height, self.channels, |c, y, x| {
            self.get(c, y, self.width - 1 - x)
        })
    }

    /// Sub-window starting at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Map> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Invalid(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(Map::from_fn(width, height, self.channels, |c, y, x| {
            self.get(c, y0 + y, x0 + x)
        }))
    }
}

/// Which resolution an ordinal estimate was produced at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrdinalTag {
    LowRes,
    HighRes,
}

macro_rules! raster_type {
    ($(#[$doc:meta])* $name:ident, $channels:expr, $valid:expr, $rule:literal) => {
        $(#[$doc])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(Map);

        impl $name {
            pub const CHANNELS: usize = $channels;

            pub fn new(map: Map) -> Result<Self> {
                if map.channels() != $channels {
                    return Err(Error::Invalid(format!(
                        "{} needs {} channel(s), got {}",
                        stringify!($name),
                        $channels,
                        map.channels()
                    )));
                }
                let valid: fn(f32) -> bool = $valid;
                if let Some(v) = map.data().iter().find(|&&v| !valid(v)) {
                    return Err(Error::Invalid(format!(
                        "{} values must be {}, found {v}",
                        stringify!($name),
                        $rule
                    )));
                }
                Ok(Self(map))
            }

            pub fn as_map(&self) -> &Map {
                &self.0
            }

            pub fn into_map(self) -> Map {
                self.0
            }
        }

        impl std::ops::Deref for $name {
            type Target = Map;

            fn deref(&self) -> &Map {
                &self.0
            }
        }
    };
}

raster_type!(
    /// Linear-RGB image `I`.
    LinearImage, 3, |v| v.is_finite() && v >= 0.0, "finite and non-negative"
);
raster_type!(
    /// Single-channel shading `S`.
    ShadingMap, 1, |v| v.is_finite() && v >= 0.0, "finite and non-negative"
);
raster_type!(
    /// Inverse shading `D = 1 / (S + 1)`.
    InverseShading, 1, |v| (0.0..=1.0).contains(&v), "in [0, 1]"
);
raster_type!(
    /// Lambertian reflectance `A`.
    AlbedoMap, 3, |v| v.is_finite() && v >= 0.0, "finite and non-negative"
);

/// Network ordinal output, correct up to a monotone map.
#[derive(Clone, Debug, PartialEq)]
pub struct OrdinalEstimate {
    map: Map,
    tag: OrdinalTag,
}

impl OrdinalEstimate {
    pub fn new(map: Map, tag: OrdinalTag) -> Result<Self> {
        if map.channels() != 1 {
            return Err(Error::Invalid(format!(
                "ordinal estimate needs 1 channel, got {}",
                map.channels()
            )));
        }
        if map.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("ordinal values must be in [0, 1]".into()));
        }
        Ok(Self { map, tag })
    }

    pub fn tag(&self) -> OrdinalTag {
        self.tag
    }

    pub fn as_map(&self) -> &Map {
        &self.map
    }

    pub fn into_map(self) -> Map {
        self.map
    }
}

impl std::ops::Deref for OrdinalEstimate {
    type Target = Map;

    fn deref(&self) -> &Map {
        &self.map
    }
}
