//! Dense row-major H×W grids used for depth, flow, confidence and masks.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Per-pixel boolean classification.
pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    /// Wraps row-major `data`. Returns `None` when the length is not `width * height`.
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == width * height).then_some(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Pixel coordinates of a linear index.
    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i % self.width, i / self.width)
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn union(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a && b)
    }

    /// `self \ other`.
    pub fn difference(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    fn zip_with(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        assert!(self.same_shape(other), "mask shape mismatch");
        Grid {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// 3×3 dilation; pixels outside the image count as false.
    pub fn dilate3(&self) -> Mask {
        let (w, h) = (self.width as isize, self.height as isize);
        Grid::from_fn(self.width, self.height, |x, y| {
            let (x, y) = (x as isize, y as isize);
            (-1..=1).any(|dy| {
                (-1..=1).any(|dx| {
                    let (nx, ny) = (x + dx, y + dy);
                    nx >= 0 && ny >= 0 && nx < w && ny < h && *self.get(nx as usize, ny as usize)
                })
            })
        })
    }

    /// 3×3 erosion; pixels outside the image count as true, so a region
    /// touching the border is not eaten away from that side.
    pub fn erode3(&self) -> Mask {
        let (w, h) = (self.width as isize, self.height as isize);
        Grid::from_fn(self.width, self.height, |x, y| {
            let (x, y) = (x as isize, y as isize);
            (-1..=1).all(|dy| {
                (-1..=1).all(|dx| {
                    let (nx, ny) = (x + dx, y + dy);
                    !(nx >= 0 && ny >= 0 && nx < w && ny < h) || *self.get(nx as usize, ny as usize)
                })
            })
        })
    }

    /// Morphological closing (dilate then erode) with a 3×3 element.
    pub fn close3(&self) -> Mask {
        self.dilate3().erode3()
    }

    /// 8-connected component labels. Background pixels get `None`; labels
    /// are assigned in raster order of each component's first pixel.
    pub fn components(&self) -> (Grid<Option<u32>>, usize) {
        let mut labels: Grid<Option<u32>> = Grid::filled(self.width, self.height, None);
        let mut next = 0u32;
        let mut stack = Vec::new();
        for start in 0..self.data.len() {
            if !self.data[start] || labels.data[start].is_some() {
                continue;
            }
            labels.data[start] = Some(next);
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (x, y) = self.coords(i);
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let nx = x as isize + dx;
                        let ny = y as isize + dy;
                        if nx < 0 || ny < 0 || nx >= self.width as isize || ny >= self.height as isize {
                            continue;
                        }
                        let j = ny as usize * self.width + nx as usize;
                        if self.data[j] && labels.data[j].is_none() {
                            labels.data[j] = Some(next);
                            stack.push(j);
                        }
                    }
                }
            }
            next += 1;
        }
        (labels, next as usize)
    }
}
