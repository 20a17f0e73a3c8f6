//! Pixel-space geometry: boxes, points and the patch grid.
//!
//! Coordinates are continuous with the origin at the top-left corner of the
//! image. A box `[x1, y1, x2, y2]` covers `[x1, x2] × [y1, y2]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned rectangle with strictly positive width and height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[T; 4]", into = "[T; 4]")]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct BoundingBox<T> {
    x1: T,
    y1: T,
    x2: T,
    y2: T,
}

impl<T: Scalar> BoundingBox<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        let invalid = |reason| Error::InvalidBox {
            x1: x1.as_f64(),
            y1: y1.as_f64(),
            x2: x2.as_f64(),
            y2: y2.as_f64(),
            reason,
        };
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if !(x1 < x2 && y1 < y2) {
            return Err(invalid("requires x1 < x2 and y1 < y2"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> T {
        self.x1
    }
    pub fn y1(&self) -> T {
        self.y1
    }
    pub fn x2(&self) -> T {
        self.x2
    }
    pub fn y2(&self) -> T {
        self.y2
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point<T> {
        bbox_center(self)
    }

    /// Boundary-inclusive containment.
    pub fn contains(&self, p: Point<T>) -> bool {
        self.x1 <= p.x && p.x <= self.x2 && self.y1 <= p.y && p.y <= self.y2
    }

    pub fn within_image(&self, width: T, height: T) -> bool {
        self.x1 >= T::zero() && self.y1 >= T::zero() && self.x2 <= width && self.y2 <= height
    }

    /// Area of the intersection with `other` (0 when disjoint or touching).
    pub fn overlap_area(&self, other: &Self) -> T {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w > T::zero() && h > T::zero() {
            w * h
        } else {
            T::zero()
        }
    }

    pub fn cast<U: Scalar>(&self) -> BoundingBox<U> {
        BoundingBox {
            x1: U::of(self.x1.as_f64()),
            y1: U::of(self.y1.as_f64()),
            x2: U::of(self.x2.as_f64()),
            y2: U::of(self.y2.as_f64()),
        }
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl<T: Scalar> TryFrom<[T; 4]> for BoundingBox<T> {
    type Error = Error;

    fn try_from(v: [T; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl<T: Scalar> From<BoundingBox<T>> for [T; 4] {
    fn from(b: BoundingBox<T>) -> Self {
        b.to_array()
    }
}

/// True iff the interiors overlap; boxes sharing only an edge do not intersect.
pub fn intersects<T: Scalar>(region: &BoundingBox<T>, b: &BoundingBox<T>) -> bool {
    region.overlap_area(b) > T::zero()
}

pub fn iou<T: Scalar>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> T {
    let inter = a.overlap_area(b);
    if inter <= T::zero() {
        return T::zero();
    }
    let union = a.area() + b.area() - inter;
    (inter / union).min(T::one())
}

pub fn bbox_center<T: Scalar>(b: &BoundingBox<T>) -> Point<T> {
    let half = T::of(0.5);
    Point::new((b.x1 + b.x2) * half, (b.y1 + b.y2) * half)
}

/// Row-major tiling of an image into `s × s` patches. Edge patches are
/// clipped to the image rather than padded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "GridDims", into = "GridDims")]
pub struct PatchGrid {
    image_width: u32,
    image_height: u32,
    patch_size: u32,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Copy, Serialize, Deserialize)]
struct GridDims {
    image_width: u32,
    image_height: u32,
    patch_size: u32,
}

impl TryFrom<GridDims> for PatchGrid {
    type Error = Error;
    fn try_from(d: GridDims) -> Result<Self> {
        PatchGrid::new(d.image_width, d.image_height, d.patch_size)
    }
}

impl From<PatchGrid> for GridDims {
    fn from(g: PatchGrid) -> Self {
        GridDims {
            image_width: g.image_width,
            image_height: g.image_height,
            patch_size: g.patch_size,
        }
    }
}

impl PatchGrid {
    pub fn new(image_width: u32, image_height: u32, patch_size: u32) -> Result<Self> {
        if image_width == 0 || image_height == 0 {
            return Err(Error::InvalidGrid(format!(
                "image must be non-empty, got {image_width}x{image_height}"
            )));
        }
        if patch_size == 0 {
            return Err(Error::InvalidGrid("patch size must be positive".into()));
        }
        Ok(Self {
            image_width,
            image_height,
            patch_size,
            rows: image_height.div_ceil(patch_size) as usize,
            cols: image_width.div_ceil(patch_size) as usize,
        })
    }

    pub fn image_width(&self) -> u32 {
        self.image_width
    }
    pub fn image_height(&self) -> u32 {
        self.image_height
    }
    pub fn patch_size(&self) -> u32 {
        self.patch_size
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of patches `M = rows × cols`.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn row_col(&self, i: usize) -> (usize, usize) {
        (i / self.cols, i % self.cols)
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            Err(Error::PatchIndex {
                index: i,
                len: self.len(),
            })
        } else {
            Ok(())
        }
    }

    /// Pixel region `R_i` of patch `i`.
    pub fn patch_region<T: Scalar>(&self, i: usize) -> Result<BoundingBox<T>> {
        self.check(i)?;
        let (r, c) = self.row_col(i);
        let s = self.patch_size as usize;
        let x0 = c * s;
        let y0 = r * s;
        let x1 = (x0 + s).min(self.image_width as usize);
        let y1 = (y0 + s).min(self.image_height as usize);
        Ok(BoundingBox {
            x1: T::from_count(x0),
            y1: T::from_count(y0),
            x2: T::from_count(x1),
            y2: T::from_count(y1),
        })
    }

    /// All patch regions in row-major order.
    pub fn regions<T: Scalar>(&self) -> Vec<BoundingBox<T>> {
        (0..self.len())
            .map(|i| self.patch_region(i).expect("index in range"))
            .collect()
    }

    pub fn patch_center<T: Scalar>(&self, i: usize) -> Result<Point<T>> {
        Ok(self.patch_region::<T>(i)?.center())
    }

    /// Patch owning the point; points on an interior patch boundary belong to
    /// the patch to the right / below, the far image edge to the last patch.
    pub fn patch_at<T: Scalar>(&self, p: Point<T>) -> Result<usize> {
        let w = T::of(self.image_width as f64);
        let h = T::of(self.image_height as f64);
        if !(p.x >= T::zero() && p.x <= w && p.y >= T::zero() && p.y <= h) {
            return Err(Error::InvalidArgument(format!(
                "point ({}, {}) outside {}x{} image",
                p.x, p.y, self.image_width, self.image_height
            )));
        }
        let s = T::of(self.patch_size as f64);
        let col = ((p.x / s).floor().as_f64() as usize).min(self.cols - 1);
        let row = ((p.y / s).floor().as_f64() as usize).min(self.rows - 1);
        Ok(self.index(row, col))
    }

    /// Errors unless `b` lies inside the image.
    pub fn check_box<T: Scalar>(&self, b: &BoundingBox<T>) -> Result<()> {
        if b.within_image(
            T::of(self.image_width as f64),
            T::of(self.image_height as f64),
        ) {
            Ok(())
        } else {
            Err(Error::InvalidBox {
                x1: b.x1.as_f64(),
                y1: b.y1.as_f64(),
                x2: b.x2.as_f64(),
                y2: b.y2.as_f64(),
                reason: "box extends outside the image",
            })
        }
    }
}
