//! Pixel coordinates, pixel sets and 4-connected component labeling.

use std::collections::VecDeque;

/// A pixel position. Ordered row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
}

impl Pixel {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    /// 4-neighbors that fall inside a `height x width` grid.
    pub fn neighbors4(self, height: usize, width: usize) -> impl Iterator<Item = Pixel> {
        let Pixel { row, col } = self;
        let up = (row > 0).then(|| Pixel::new(row - 1, col));
        let down = (row + 1 < height).then(|| Pixel::new(row + 1, col));
        let left = (col > 0).then(|| Pixel::new(row, col - 1));
        let right = (col + 1 < width).then(|| Pixel::new(row, col + 1));
        [up, left, right, down].into_iter().flatten()
    }
}

/// Inclusive bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub xmin: usize,
    pub ymin: usize,
    pub xmax: usize,
    pub ymax: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.xmax - self.xmin + 1
    }

    pub fn height(&self) -> usize {
        self.ymax - self.ymin + 1
    }

    /// Grows by `margin` on every side, clipped to the grid.
    pub fn dilate(&self, margin: usize, height: usize, width: usize) -> BBox {
        BBox {
            xmin: self.xmin.saturating_sub(margin),
            ymin: self.ymin.saturating_sub(margin),
            xmax: (self.xmax + margin).min(width - 1),
            ymax: (self.ymax + margin).min(height - 1),
        }
    }

    pub fn contains(&self, p: Pixel) -> bool {
        (self.xmin..=self.xmax).contains(&p.col) && (self.ymin..=self.ymax).contains(&p.row)
    }

    /// Same as [`contains`](Self::contains) for a sub-pixel point `(row, col)`.
    pub fn contains_point(&self, row: f64, col: f64) -> bool {
        col >= self.xmin as f64 && col <= self.xmax as f64 && row >= self.ymin as f64 && row <= self.ymax as f64
    }
}

/// Sorted, de-duplicated set of pixels.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct PixelSet {
    pixels: Vec<Pixel>,
}

impl PixelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Pixel> + '_ {
        self.pixels.iter().copied()
    }

    pub fn as_slice(&self) -> &[Pixel] {
        &self.pixels
    }

    pub fn contains(&self, p: Pixel) -> bool {
        self.pixels.binary_search(&p).is_ok()
    }

    pub fn bbox(&self) -> Option<BBox> {
        let first = self.pixels.first()?;
        let mut b = BBox { xmin: first.col, ymin: first.row, xmax: first.col, ymax: first.row };
        for p in &self.pixels {
            b.xmin = b.xmin.min(p.col);
            b.xmax = b.xmax.max(p.col);
            b.ymin = b.ymin.min(p.row);
            b.ymax = b.ymax.max(p.row);
        }
        Some(b)
    }

    /// Mean `(row, col)` position.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        if self.is_empty() {
            return None;
        }
        let n = self.len() as f64;
        let (r, c) = self.pixels.iter().fold((0.0, 0.0), |(r, c), p| (r + p.row as f64, c + p.col as f64));
        Some((r / n, c / n))
    }

    pub fn intersection_len(&self, other: &PixelSet) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.pixels.len() && j < other.pixels.len() {
            match self.pixels[i].cmp(&other.pixels[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn intersects(&self, other: &PixelSet) -> bool {
        self.intersection_len(other) > 0
    }

    pub fn union(&self, other: &PixelSet) -> PixelSet {
        self.iter().chain(other.iter()).collect()
    }

    pub fn intersection(&self, other: &PixelSet) -> PixelSet {
        self.iter().filter(|&p| other.contains(p)).collect()
    }

    pub fn is_subset(&self, other: &PixelSet) -> bool {
        self.intersection_len(other) == self.len()
    }

    /// Row-major boolean grid.
    pub fn to_bitmap(&self, height: usize, width: usize) -> Vec<bool> {
        let mut bits = vec![false; height * width];
        for p in &self.pixels {
            bits[p.row * width + p.col] = true;
        }
        bits
    }

    pub fn from_bitmap(bits: &[bool], width: usize) -> PixelSet {
        let pixels = bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| Pixel::new(i / width, i % width)).collect();
        PixelSet { pixels }
    }

    /// True when every pixel is reachable from every other through 4-neighbors
    /// inside the set. The empty set counts as connected.
    pub fn is_connected(&self) -> bool {
        let Some(bbox) = self.bbox() else { return true };
        let (h, w) = (bbox.ymax + 1, bbox.xmax + 1);
        let bits = self.to_bitmap(h, w);
        component_of(&bits, h, w, self.pixels[0]).len() == self.len()
    }

    pub fn all_within(&self, height: usize, width: usize) -> bool {
        self.pixels.iter().all(|p| p.row < height && p.col < width)
    }
}

impl FromIterator<Pixel> for PixelSet {
    fn from_iter<I: IntoIterator<Item = Pixel>>(iter: I) -> Self {
        let mut pixels: Vec<Pixel> = iter.into_iter().collect();
        pixels.sort_unstable();
        pixels.dedup();
        PixelSet { pixels }
    }
}

/// 4-connected component of `bits` containing `seed` (empty if the seed is unset).
pub fn component_of(bits: &[bool], height: usize, width: usize, seed: Pixel) -> PixelSet {
    let mut out = Vec::new();
    if !bits[seed.row * width + seed.col] {
        return PixelSet::new();
    }
    let mut seen = vec![false; bits.len()];
    let mut queue = VecDeque::from([seed]);
    seen[seed.row * width + seed.col] = true;
    while let Some(p) = queue.pop_front() {
        out.push(p);
        for q in p.neighbors4(height, width) {
            let idx = q.row * width + q.col;
            if bits[idx] && !seen[idx] {
                seen[idx] = true;
                queue.push_back(q);
            }
        }
    }
    out.into_iter().collect()
}

/// All 4-connected components of `bits`, in row-major order of their first pixel.
pub fn connected_components(bits: &[bool], height: usize, width: usize) -> Vec<PixelSet> {
    let mut label = vec![false; bits.len()];
    let mut components = Vec::new();
    for idx in 0..bits.len() {
        if bits[idx] && !label[idx] {
            let comp = component_of(bits, height, width, Pixel::new(idx / width, idx % width));
            for p in comp.iter() {
                label[p.row * width + p.col] = true;
            }
            components.push(comp);
        }
    }
    components
}
