//! Axis-aligned bounding boxes.

/// Coordinate convention of a [`BoundingBox`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Coords {
    /// Image pixels, origin at the top-left corner.
    Pixel,
    /// Fractions of image width and height, `[0, 1]`.
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("degenerate box ({x_min}, {y_min}, {x_max}, {y_max}): need x_min < x_max and y_min < y_max")]
    Degenerate { x_min: f64, y_min: f64, x_max: f64, y_max: f64 },
    #[error("box coordinates must be finite")]
    NonFinite,
    #[error("cannot compare a {0:?} box with a {1:?} box")]
    MixedCoords(Coords, Coords),
    #[error("image dimensions must be positive")]
    EmptyImage,
}

/// A box `[x_min, x_max] × [y_min, y_max]` with strictly positive extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    coords: Coords,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, coords: Coords) -> Result<Self, GeometryError> {
        if !(x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if !(x_min < x_max && y_min < y_max) {
            return Err(GeometryError::Degenerate { x_min, y_min, x_max, y_max });
        }
        Ok(Self { x_min, y_min, x_max, y_max, coords })
    }

    pub fn pixel(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        Self::new(x_min, y_min, x_max, y_max, Coords::Pixel)
    }

    pub fn normalized(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        Self::new(x_min, y_min, x_max, y_max, Coords::Normalized)
    }

    /// Builds a box from its center and size.
    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64, coords: Coords) -> Result<Self, GeometryError> {
        Self::new(cx - width / 2.0, cy - height / 2.0, cx + width / 2.0, cy + height / 2.0, coords)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn coords(&self) -> Coords {
        self.coords
    }

    /// `[x_min, y_min, x_max, y_max]`
    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Area of the overlap with `other`, zero when disjoint. Coordinate
    /// conventions are not checked.
    pub fn intersection_area(&self, other: &Self) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union. Both boxes must use the same convention.
    pub fn iou(&self, other: &Self) -> Result<f64, GeometryError> {
        if self.coords != other.coords {
            return Err(GeometryError::MixedCoords(self.coords, other.coords));
        }
        Ok(self.iou_unchecked(other))
    }

    /// Intersection over union without the convention check, for hot loops
    /// where every box is known to share one convention.
    pub fn iou_unchecked(&self, other: &Self) -> f64 {
        let inter = self.intersection_area(other);
        if inter == 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    /// True when the box lies inside `[0, width] × [0, height]`.
    pub fn lies_within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }

    /// Clips to `[0, width] × [0, height]`; `None` if nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<Self> {
        Self::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
            self.coords,
        )
        .ok()
    }

    /// Converts a pixel box to normalized coordinates of a `width × height` image.
    pub fn to_normalized(&self, width: f64, height: f64) -> Result<Self, GeometryError> {
        if width <= 0.0 || height <= 0.0 {
            return Err(GeometryError::EmptyImage);
        }
        match self.coords {
            Coords::Normalized => Ok(*self),
            Coords::Pixel => Self::normalized(self.x_min / width, self.y_min / height, self.x_max / width, self.y_max / height),
        }
    }

    /// Converts a normalized box to pixel coordinates of a `width × height` image.
    pub fn to_pixel(&self, width: f64, height: f64) -> Result<Self, GeometryError> {
        if width <= 0.0 || height <= 0.0 {
            return Err(GeometryError::EmptyImage);
        }
        match self.coords {
            Coords::Pixel => Ok(*self),
            Coords::Normalized => Self::pixel(self.x_min * width, self.y_min * height, self.x_max * width, self.y_max * height),
        }
    }
}
