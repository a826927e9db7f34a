//! Images, masks and per-pixel maps.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Value domain of an [`ImageTensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ValueDomain {
    /// Integers in `[0, 255]`.
    #[serde(rename = "u8_0_255")]
    U8,
    /// Reals in `[0, 1]`.
    #[serde(rename = "unit_float")]
    UnitFloat,
}

impl ValueDomain {
    pub fn peak(self) -> f64 {
        match self {
            ValueDomain::U8 => 255.0,
            ValueDomain::UnitFloat => 1.0,
        }
    }

    fn admits(self, v: f64) -> bool {
        match self {
            ValueDomain::U8 => (0.0..=255.0).contains(&v) && v.fract() == 0.0,
            ValueDomain::UnitFloat => (0.0..=1.0).contains(&v),
        }
    }
}

/// A `C x h x w` image stored channel-major, row-major within a channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    channels: usize,
    width: usize,
    height: usize,
    domain: ValueDomain,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(
        channels: usize,
        width: usize,
        height: usize,
        domain: ValueDomain,
        data: Vec<f64>,
    ) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 {
            return Err(Error::ShapeMismatch(format!(
                "image dimensions must be positive, got {channels}x{width}x{height}"
            )));
        }
        if data.len() != channels * width * height {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for {channels}x{width}x{height}, got {}",
                channels * width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !domain.admits(**v)) {
            return Err(Error::InvalidValue(format!(
                "value {v} outside domain {domain:?}"
            )));
        }
        Ok(Self {
            channels,
            width,
            height,
            domain,
            data,
        })
    }

    pub fn filled(
        channels: usize,
        width: usize,
        height: usize,
        domain: ValueDomain,
        value: f64,
    ) -> Result<Self> {
        Self::new(
            channels,
            width,
            height,
            domain,
            vec![value; channels * width * height],
        )
    }

    pub fn zeros(channels: usize, width: usize, height: usize, domain: ValueDomain) -> Self {
        Self::filled(channels, width, height, domain, 0.0).expect("zero image is valid")
    }

    /// Builds an image from `f(channel, x, y)`.
    pub fn from_fn(
        channels: usize,
        width: usize,
        height: usize,
        domain: ValueDomain,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * width * height);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, x, y));
                }
            }
        }
        Self::new(channels, width, height, domain, data)
    }

    /// Clamps (and for `U8`, rounds) arbitrary reals into `domain`.
    pub fn from_real(
        channels: usize,
        width: usize,
        height: usize,
        domain: ValueDomain,
        mut data: Vec<f64>,
    ) -> Result<Self> {
        for v in &mut data {
            *v = clamp_to(domain, *v);
        }
        Self::new(channels, width, height, domain, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn domain(&self) -> ValueDomain {
        self.domain
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[self.index(c, x, y)]
    }

    /// Writes one value, clamping (and rounding for `U8`) into the domain.
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        let i = self.index(c, x, y);
        self.data[i] = clamp_to(self.domain, v);
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.pixel_count();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.width, self.height)
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    /// Converts to another domain: `u8 -> unit` is `v / 255`, `unit -> u8`
    /// rounds `v * 255` to the nearest integer.
    pub fn to_domain(&self, domain: ValueDomain) -> ImageTensor {
        let data = match (self.domain, domain) {
            (a, b) if a == b => self.data.clone(),
            (ValueDomain::U8, ValueDomain::UnitFloat) => {
                self.data.iter().map(|v| v / 255.0).collect()
            }
            _ => self
                .data
                .iter()
                .map(|v| (v * 255.0).round().clamp(0.0, 255.0))
                .collect(),
        };
        ImageTensor {
            channels: self.channels,
            width: self.width,
            height: self.height,
            domain,
            data,
        }
    }

    pub fn to_unit(&self) -> ImageTensor {
        self.to_domain(ValueDomain::UnitFloat)
    }

    pub fn to_u8(&self) -> ImageTensor {
        self.to_domain(ValueDomain::U8)
    }

    /// Values as bytes; only meaningful for the `U8` domain.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_u8().data.iter().map(|v| *v as u8).collect()
    }

    /// ITU-R 601 luminance plane in the image's own scale. Single-channel
    /// images are returned as-is.
    pub fn luminance(&self) -> Vec<f64> {
        if self.channels < 3 {
            return self.plane(0).to_vec();
        }
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    /// Adds the same per-pixel offset to every channel, clamping and
    /// rounding into the domain.
    pub fn add_to_all_channels(&self, offset: &[f64]) -> Result<ImageTensor> {
        if offset.len() != self.pixel_count() {
            return Err(Error::ShapeMismatch(format!(
                "offset has {} values, image has {} pixels",
                offset.len(),
                self.pixel_count()
            )));
        }
        let n = self.pixel_count();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| clamp_to(self.domain, v + offset[i % n]))
            .collect();
        Ok(ImageTensor {
            channels: self.channels,
            width: self.width,
            height: self.height,
            domain: self.domain,
            data,
        })
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

pub(crate) fn clamp_to(domain: ValueDomain, v: f64) -> f64 {
    match domain {
        ValueDomain::U8 => v.round().clamp(0.0, 255.0),
        ValueDomain::UnitFloat => v.clamp(0.0, 1.0),
    }
}

/// A cell coordinate; ordered row-major (by `y`, then `x`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

impl Ord for Cell {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.y, self.x).cmp(&(other.y, other.x))
    }
}

impl PartialOrd for Cell {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Pixel,
    Patch(usize),
}

impl Granularity {
    pub fn cell_size(self) -> usize {
        match self {
            Granularity::Pixel => 1,
            Granularity::Patch(p) => p,
        }
    }
}

/// Square patch tiling of an image with 4-neighbour adjacency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub cols: usize,
    pub rows: usize,
}

impl PatchGrid {
    pub fn new(width: usize, height: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || width == 0 || height == 0 {
            return Err(invalid("patch_size", "sizes must be positive"));
        }
        if width % patch_size != 0 || height % patch_size != 0 {
            return Err(invalid(
                "patch_size",
                format!("{patch_size} does not divide {width}x{height}"),
            ));
        }
        Ok(Self {
            patch_size,
            cols: width / patch_size,
            rows: height / patch_size,
        })
    }

    /// Grid of single pixels.
    pub fn pixels(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, 1)
    }

    pub fn total(&self) -> usize {
        self.rows * self.cols
    }

    pub fn granularity(&self) -> Granularity {
        if self.patch_size == 1 {
            Granularity::Pixel
        } else {
            Granularity::Patch(self.patch_size)
        }
    }

    pub fn neighbors(&self, cell: usize) -> impl Iterator<Item = usize> + '_ {
        let (x, y) = (cell % self.cols, cell / self.cols);
        let cols = self.cols;
        [
            (x > 0).then(|| cell - 1),
            (x + 1 < self.cols).then(|| cell + 1),
            (y > 0).then(|| cell - cols),
            (y + 1 < self.rows).then(|| cell + cols),
        ]
        .into_iter()
        .flatten()
    }

    /// Size of a maximum 4-adjacency independent set (grid graphs are
    /// bipartite with balanced colour classes).
    pub fn max_independent(&self) -> usize {
        self.total().div_ceil(2)
    }
}

/// Hard visibility map: 1 = visible, 0 = hidden.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    width: usize,
    height: usize,
    granularity: Granularity,
    values: Vec<u8>,
}

impl Mask {
    /// `width`/`height` count cells (patches or pixels).
    pub fn new(
        width: usize,
        height: usize,
        granularity: Granularity,
        values: Vec<u8>,
    ) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "mask {width}x{height} needs {} cells, got {}",
                width * height,
                values.len()
            )));
        }
        if values.iter().any(|v| *v > 1) {
            return Err(Error::InvalidValue("mask values must be 0 or 1".into()));
        }
        if granularity.cell_size() == 0 {
            return Err(invalid("granularity", "patch size must be positive"));
        }
        Ok(Self {
            width,
            height,
            granularity,
            values,
        })
    }

    pub fn visible(width: usize, height: usize, granularity: Granularity) -> Self {
        Self::new(width, height, granularity, vec![1; width * height]).expect("valid mask")
    }

    pub fn hidden(width: usize, height: usize, granularity: Granularity) -> Self {
        Self::new(width, height, granularity, vec![0; width * height]).expect("valid mask")
    }

    pub(crate) fn from_grid(grid: &PatchGrid, hidden: impl IntoIterator<Item = usize>) -> Self {
        let mut values = vec![1u8; grid.total()];
        for h in hidden {
            values[h] = 0;
        }
        Self {
            width: grid.cols,
            height: grid.rows,
            granularity: grid.granularity(),
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn granularity(&self) -> Granularity {
        self.granularity
    }
    pub fn values(&self) -> &[u8] {
        &self.values
    }
    pub fn total(&self) -> usize {
        self.values.len()
    }

    /// Spatial extent in pixels after patch expansion.
    pub fn pixel_extent(&self) -> (usize, usize) {
        let s = self.granularity.cell_size();
        (self.width * s, self.height * s)
    }

    pub fn is_visible(&self, cell: Cell) -> bool {
        self.values[cell.y * self.width + cell.x] == 1
    }

    pub fn pixel_visible(&self, px: usize, py: usize) -> bool {
        let s = self.granularity.cell_size();
        self.values[(py / s) * self.width + px / s] == 1
    }

    pub fn hidden_count(&self) -> usize {
        self.values.iter().filter(|v| **v == 0).count()
    }

    pub fn visible_count(&self) -> usize {
        self.total() - self.hidden_count()
    }

    /// Hidden cells in row-major order.
    pub fn hidden_cells(&self) -> Vec<Cell> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v == 0)
            .map(|(i, _)| Cell::new(i % self.width, i / self.width))
            .collect()
    }

    pub fn set_visible(&mut self, cell: Cell) {
        self.values[cell.y * self.width + cell.x] = 1;
    }

    /// Per-pixel visibility (0/1) after patch expansion.
    pub fn pixel_values(&self) -> Vec<u8> {
        let (w, h) = self.pixel_extent();
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                out.push(self.pixel_visible(x, y) as u8);
            }
        }
        out
    }

    /// Expands to a pixel-granularity mask.
    pub fn to_pixel_mask(&self) -> Mask {
        let (w, h) = self.pixel_extent();
        Mask {
            width: w,
            height: h,
            granularity: Granularity::Pixel,
            values: self.pixel_values(),
        }
    }

    /// Hidden-cell coordinate list, the JSON provenance form.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "width": self.width,
            "height": self.height,
            "granularity": self.granularity,
            "hidden": self.hidden_cells().iter().map(|c| [c.x, c.y]).collect::<Vec<_>>(),
        })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Mask> {
        #[derive(Deserialize)]
        struct Raw {
            width: usize,
            height: usize,
            granularity: Granularity,
            hidden: Vec<[usize; 2]>,
        }
        let raw: Raw = serde_json::from_value(value.clone())?;
        let mut values = vec![1u8; raw.width * raw.height];
        for [x, y] in raw.hidden {
            if x >= raw.width || y >= raw.height {
                return Err(Error::ShapeMismatch(format!(
                    "hidden cell ({x}, {y}) outside {}x{}",
                    raw.width, raw.height
                )));
            }
            values[y * raw.width + x] = 0;
        }
        Mask::new(raw.width, raw.height, raw.granularity, values)
    }
}

/// A real-valued `w x h` map (masker logits, vulnerability scores, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl RealMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "map {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Self {
            width,
            height,
            values: vec![v; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Continuous visibility map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftMask {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl SoftMask {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "soft mask {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("soft mask value {v} outside [0,1]")));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Result<Self> {
        Self::new(width, height, vec![v; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Squared Frobenius norm, the area quantity of the HIDE loss.
    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Element-wise `mask ⊙ image`: hidden cells become 0 in every channel.
pub fn apply_mask(image: &ImageTensor, mask: &Mask) -> Result<ImageTensor> {
    let (mw, mh) = mask.pixel_extent();
    if (mw, mh) != (image.width(), image.height()) {
        return Err(Error::ShapeMismatch(format!(
            "mask covers {mw}x{mh} pixels, image is {}x{}",
            image.width(),
            image.height()
        )));
    }
    let vis = mask.pixel_values();
    let n = image.pixel_count();
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if vis[i % n] == 0 {
            *v = 0.0;
        }
    }
    Ok(out)
}
