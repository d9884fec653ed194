//! Image payloads: 2-D slices, 3-D volumes and binary voxel masks.
//!
//! Volumes are stored slice-major: voxel `(row, col, slice)` lives at
//! `(slice * h + row) * w + col`, so each transverse slice is contiguous.

use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Slice2D {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Slice2D {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(h > 0 && w > 0, "slice dimensions must be positive, got {h}x{w}");
        ensure!(data.len() == h * w, "slice {h}x{w} needs {} values, got {}", h * w, data.len());
        Ok(Slice2D { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Slice2D { h, w, data: vec![0.0; h * w] }
    }

    pub fn filled(h: usize, w: usize, value: f32) -> Self {
        Slice2D { h, w, data: vec![value; h * w] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
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

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.w + col]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    h: usize,
    w: usize,
    d: usize,
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(h > 0 && w > 0 && d > 0, "volume dimensions must be positive, got {h}x{w}x{d}");
        ensure!(
            data.len() == h * w * d,
            "volume {h}x{w}x{d} needs {} values, got {}",
            h * w * d,
            data.len()
        );
        Ok(Volume3D { h, w, d, spacing: [1.0; 3], data })
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        Volume3D { h, w, d, spacing: [1.0; 3], data: vec![0.0; h * w * d] }
    }

    pub fn from_slices(slices: &[Slice2D]) -> Result<Self> {
        ensure!(!slices.is_empty(), "cannot build a volume from zero slices");
        let (h, w) = slices[0].dims();
        let mut data = Vec::with_capacity(h * w * slices.len());
        for s in slices {
            ensure!(s.dims() == (h, w), "slice dims {:?} differ from {:?}", s.dims(), (h, w));
            data.extend_from_slice(s.data());
        }
        Volume3D::new(h, w, slices.len(), data)
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    /// `(h, w, d)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.d)
    }

    pub fn depth(&self) -> usize {
        self.d
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn index(&self, row: usize, col: usize, slice: usize) -> usize {
        (slice * self.h + row) * self.w + col
    }

    pub fn get(&self, row: usize, col: usize, slice: usize) -> f32 {
        self.data[self.index(row, col, slice)]
    }

    pub fn set(&mut self, row: usize, col: usize, slice: usize, value: f32) {
        let i = self.index(row, col, slice);
        self.data[i] = value;
    }

    pub fn slice_data(&self, k: usize) -> &[f32] {
        let n = self.h * self.w;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn slice(&self, k: usize) -> Slice2D {
        Slice2D { h: self.h, w: self.w, data: self.slice_data(k).to_vec() }
    }

    pub fn slices(&self) -> impl Iterator<Item = Slice2D> + '_ {
        (0..self.d).map(|k| self.slice(k))
    }

    pub fn same_shape(&self, other: &Volume3D) -> bool {
        self.dims() == other.dims()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    h: usize,
    w: usize,
    d: usize,
    data: Vec<u8>,
}

impl BinaryMap {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<u8>) -> Result<Self> {
        ensure!(data.len() == h * w * d, "binary map {h}x{w}x{d} needs {} values", h * w * d);
        ensure!(data.iter().all(|&v| v <= 1), "binary map entries must be 0 or 1");
        Ok(BinaryMap { h, w, d, data })
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        BinaryMap { h, w, d, data: vec![0; h * w * d] }
    }

    pub fn from_fn(h: usize, w: usize, d: usize, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w * d);
        for k in 0..d {
            for i in 0..h {
                for j in 0..w {
                    data.push(f(i, j, k) as u8);
                }
            }
        }
        BinaryMap { h, w, d, data }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.d)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, slice: usize) -> bool {
        self.data[(slice * self.h + row) * self.w + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, slice: usize, value: bool) {
        self.data[(slice * self.h + row) * self.w + col] = value as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_subset_of(&self, other: &BinaryMap) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }
}
