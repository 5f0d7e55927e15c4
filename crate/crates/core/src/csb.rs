//! Compressed sparse block (CSB) tensor codec.
//!
//! A dense 4-D tensor `[d0][d1][h][w]` is tiled into fixed-size regions over
//! its last two dimensions (a conv kernel, a square FC-matrix fragment, or an
//! activation plane tile). Each region stores:
//!
//! * a bitmask of non-zero positions (row-major within the block, bit 0 = LSB),
//! * a pointer giving the offset of its packed values, with a trailing
//!   sentinel equal to the value-array length.
//!
//! Per-block density is a pointer subtraction, blocks can be fetched with a
//! 180-degree rotation or a transposition applied on the fly, and the same
//! encoding supports both channel-major traversal orders, which is what the
//! training access patterns need and CSC-style formats cannot provide.
//!
//! Conv weights `[K][C][R][S]` use block = R x S (one kernel per block); FC
//! matrices are laid out `[1][1][K][C]` and tiled with square fragments;
//! activations `[N][C][X][Y]` use one plane tile per (n, c).

use std::io::{Read, Write};

use crate::error::Error;
use crate::tensor::Tensor4;
use crate::Result;

/// Mask width per block entry; blocks may not exceed this many positions.
pub const MASK_BITS: usize = 64;

const MAGIC: [u8; 4] = *b"CSB1";

/// Extents of the fixed dense region each block covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub rows: usize,
    pub cols: usize,
}

impl BlockShape {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols > MASK_BITS {
            return Err(Error::BlockTooLarge { rows, cols, max: MASK_BITS });
        }
        Ok(Self { rows, cols })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Position transform applied while unpacking a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockTransform {
    Identity,
    /// Reverse the row-major position order (the backward-pass filter rotation).
    Rotate180,
    /// Swap row/column within the block (FC-matrix transposition).
    Transpose,
}

/// A small dense block unpacked from the compressed stream.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl DenseBlock {
    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }
}

/// Traversal order over block coordinates. Both walk the same encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IterOrder {
    /// Lexicographic (d0, d1, block-row, block-col): K-major for weights.
    KMajor,
    /// Swapped-axis lexicographic (d1, d0, block-col, block-row): C-major.
    CMajor,
}

/// Block-sparse tensor: pointer, mask, and packed value arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct CsbTensor {
    dense_shape: [usize; 4],
    block: BlockShape,
    grid: [usize; 4],
    pointers: Vec<u32>,
    masks: Vec<u64>,
    values: Vec<f32>,
}

fn grid_for(dense_shape: [usize; 4], block: BlockShape) -> [usize; 4] {
    [
        dense_shape[0],
        dense_shape[1],
        dense_shape[2].div_ceil(block.rows),
        dense_shape[3].div_ceil(block.cols),
    ]
}

impl CsbTensor {
    /// Encode a dense tensor. Regions that do not divide the dense extents are
    /// padded logically with zeros; padded positions are never stored.
    pub fn encode(dense: &Tensor4, block: BlockShape) -> Result<Self> {
        BlockShape::new(block.rows, block.cols)?;
        let dense_shape = dense.shape();
        let grid = grid_for(dense_shape, block);
        let nblocks: usize = grid.iter().product();
        let mut pointers = Vec::with_capacity(nblocks + 1);
        let mut masks = Vec::with_capacity(nblocks);
        let mut values = Vec::new();
        pointers.push(0u32);
        for b0 in 0..grid[0] {
            for b1 in 0..grid[1] {
                for br in 0..grid[2] {
                    for bc in 0..grid[3] {
                        let mut mask = 0u64;
                        for r in 0..block.rows {
                            for c in 0..block.cols {
                                let (dr, dc) = (br * block.rows + r, bc * block.cols + c);
                                if dr >= dense_shape[2] || dc >= dense_shape[3] {
                                    continue;
                                }
                                let v = dense.at(b0, b1, dr, dc);
                                if v != 0.0 {
                                    mask |= 1u64 << (r * block.cols + c);
                                    values.push(v);
                                }
                            }
                        }
                        masks.push(mask);
                        pointers.push(values.len() as u32);
                    }
                }
            }
        }
        Ok(Self { dense_shape, block, grid, pointers, masks, values })
    }

    /// Rebuild from raw arrays, validating every structural invariant. This is
    /// the only door through which untrusted data (deserialization) enters.
    pub fn from_parts(
        dense_shape: [usize; 4],
        block: BlockShape,
        pointers: Vec<u32>,
        masks: Vec<u64>,
        values: Vec<f32>,
    ) -> Result<Self> {
        BlockShape::new(block.rows, block.cols)?;
        let grid = grid_for(dense_shape, block);
        let t = Self { dense_shape, block, grid, pointers, masks, values };
        t.validate()?;
        Ok(t)
    }

    /// Check pointer/mask/value consistency; corruption is reported, never
    /// silently ignored.
    pub fn validate(&self) -> Result<()> {
        let nblocks: usize = self.grid.iter().product();
        let corrupt = |msg: String| Err(Error::CsbCorrupt(msg));
        if self.masks.len() != nblocks {
            return corrupt(format!("{} masks for {nblocks} blocks", self.masks.len()));
        }
        if self.pointers.len() != nblocks + 1 {
            return corrupt(format!(
                "{} pointers for {nblocks} blocks (sentinel required)",
                self.pointers.len()
            ));
        }
        if self.pointers[0] != 0 {
            return corrupt("first pointer must be 0".to_string());
        }
        if *self.pointers.last().unwrap() as usize != self.values.len() {
            return corrupt(format!(
                "sentinel {} != value count {}",
                self.pointers.last().unwrap(),
                self.values.len()
            ));
        }
        let valid_bits = self.block.len();
        for (i, pair) in self.pointers.windows(2).enumerate() {
            if pair[1] < pair[0] {
                return corrupt(format!("pointer array decreases at block {i}"));
            }
            let delta = (pair[1] - pair[0]) as u32;
            if delta != self.masks[i].count_ones() {
                return corrupt(format!(
                    "block {i}: pointer delta {delta} != popcount {}",
                    self.masks[i].count_ones()
                ));
            }
            if valid_bits < MASK_BITS && self.masks[i] >> valid_bits != 0 {
                return corrupt(format!("block {i}: mask bits beyond block extent"));
            }
        }
        // Padded positions (beyond the dense extents) must stay clear.
        for (i, &mask) in self.masks.iter().enumerate() {
            let [_, _, br, bc] = self.block_coord(i);
            for bit in 0..valid_bits {
                if mask >> bit & 1 == 1 {
                    let dr = br * self.block.rows + bit / self.block.cols;
                    let dc = bc * self.block.cols + bit % self.block.cols;
                    if dr >= self.dense_shape[2] || dc >= self.dense_shape[3] {
                        return corrupt(format!("block {i}: non-zero in padded region"));
                    }
                }
            }
        }
        if self.values.iter().any(|v| *v == 0.0) {
            return corrupt("zero value stored in value array".to_string());
        }
        Ok(())
    }

    /// Exact inverse of `encode`.
    pub fn decode(&self) -> Result<Tensor4> {
        self.validate()?;
        let mut dense = Tensor4::zeros(self.dense_shape);
        for i in 0..self.num_blocks() {
            let [b0, b1, br, bc] = self.block_coord(i);
            let mut off = self.pointers[i] as usize;
            let mask = self.masks[i];
            for bit in 0..self.block.len() {
                if mask >> bit & 1 == 1 {
                    let dr = br * self.block.rows + bit / self.block.cols;
                    let dc = bc * self.block.cols + bit % self.block.cols;
                    *dense.at_mut(b0, b1, dr, dc) = self.values[off];
                    off += 1;
                }
            }
        }
        Ok(dense)
    }

    #[inline]
    pub fn dense_shape(&self) -> [usize; 4] {
        self.dense_shape
    }

    #[inline]
    pub fn block_shape(&self) -> BlockShape {
        self.block
    }

    /// Block-grid extents (d0, d1, block rows, block cols).
    #[inline]
    pub fn grid(&self) -> [usize; 4] {
        self.grid
    }

    #[inline]
    pub fn num_blocks(&self) -> usize {
        self.masks.len()
    }

    /// Total stored non-zeros.
    #[inline]
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Non-zero fraction of the dense element count.
    pub fn density(&self) -> f64 {
        let dense: usize = self.dense_shape.iter().product();
        if dense == 0 {
            0.0
        } else {
            self.nnz() as f64 / dense as f64
        }
    }

    fn linear_block(&self, coord: [usize; 4]) -> Result<usize> {
        if coord.iter().zip(self.grid.iter()).any(|(c, g)| c >= g) {
            // Report the first linearization even when out of range.
            let approx = ((coord[0] * self.grid[1] + coord[1]) * self.grid[2] + coord[2])
                * self.grid[3]
                + coord[3];
            return Err(Error::BlockOutOfRange(approx, self.num_blocks()));
        }
        Ok(((coord[0] * self.grid[1] + coord[1]) * self.grid[2] + coord[2]) * self.grid[3]
            + coord[3])
    }

    fn block_coord(&self, mut i: usize) -> [usize; 4] {
        let mut out = [0usize; 4];
        for d in (0..4).rev() {
            out[d] = i % self.grid[d];
            i /= self.grid[d];
        }
        out
    }

    /// Non-zero count of one block, by pointer subtraction (O(1), no decode).
    pub fn block_nnz(&self, coord: [usize; 4]) -> Result<usize> {
        let i = self.linear_block(coord)?;
        Ok((self.pointers[i + 1] - self.pointers[i]) as usize)
    }

    /// Unpack one block with a position transform applied while fetching;
    /// values are untouched, only positions move.
    pub fn fetch_block(&self, coord: [usize; 4], transform: BlockTransform) -> Result<DenseBlock> {
        let i = self.linear_block(coord)?;
        let (rows, cols) = (self.block.rows, self.block.cols);
        let (out_rows, out_cols) = match transform {
            BlockTransform::Transpose => (cols, rows),
            _ => (rows, cols),
        };
        let mut data = vec![0.0f32; rows * cols];
        let mask = self.masks[i];
        let mut off = self.pointers[i] as usize;
        for bit in 0..self.block.len() {
            if mask >> bit & 1 == 1 {
                let pos = match transform {
                    BlockTransform::Identity => bit,
                    BlockTransform::Rotate180 => rows * cols - 1 - bit,
                    BlockTransform::Transpose => {
                        let (r, c) = (bit / cols, bit % cols);
                        c * out_cols + r
                    }
                };
                data[pos] = self.values[off];
                off += 1;
            }
        }
        Ok(DenseBlock { rows: out_rows, cols: out_cols, data })
    }

    /// Visit every block exactly once in the requested traversal order.
    pub fn iter_blocks(&self, order: IterOrder) -> impl Iterator<Item = BlockRef<'_>> + '_ {
        let grid = self.grid;
        let coords: Vec<[usize; 4]> = match order {
            IterOrder::KMajor => {
                let mut v = Vec::with_capacity(self.num_blocks());
                for a in 0..grid[0] {
                    for b in 0..grid[1] {
                        for r in 0..grid[2] {
                            for c in 0..grid[3] {
                                v.push([a, b, r, c]);
                            }
                        }
                    }
                }
                v
            }
            IterOrder::CMajor => {
                let mut v = Vec::with_capacity(self.num_blocks());
                for b in 0..grid[1] {
                    for a in 0..grid[0] {
                        for c in 0..grid[3] {
                            for r in 0..grid[2] {
                                v.push([a, b, r, c]);
                            }
                        }
                    }
                }
                v
            }
        };
        coords.into_iter().map(move |coord| {
            let i = self.linear_block(coord).expect("enumerated coord in range");
            BlockRef {
                coord,
                mask: self.masks[i],
                values: &self.values
                    [self.pointers[i] as usize..self.pointers[i + 1] as usize],
            }
        })
    }

    /// Size of the binary serialization in bytes.
    pub fn serialized_len(&self) -> usize {
        4 + 4 * 4 + 4 * 2 + 8 + 8 + 4 * self.pointers.len() + 8 * self.masks.len()
            + 4 * self.values.len()
    }

    /// Write the versioned little-endian binary layout (see format notes in
    /// the repo README).
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&MAGIC)?;
        for d in self.dense_shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&(self.block.rows as u32).to_le_bytes())?;
        w.write_all(&(self.block.cols as u32).to_le_bytes())?;
        w.write_all(&(self.masks.len() as u64).to_le_bytes())?;
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for p in &self.pointers {
            w.write_all(&p.to_le_bytes())?;
        }
        for m in &self.masks {
            w.write_all(&m.to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Read and fully validate the binary layout.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::CsbCorrupt(format!("bad magic {magic:?}")));
        }
        let mut u32buf = [0u8; 4];
        let mut u64buf = [0u8; 8];
        let mut read_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let mut dense_shape = [0usize; 4];
        for d in &mut dense_shape {
            *d = read_u32(r)? as usize;
        }
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        r.read_exact(&mut u64buf)?;
        let nblocks = u64::from_le_bytes(u64buf) as usize;
        r.read_exact(&mut u64buf)?;
        let nvalues = u64::from_le_bytes(u64buf) as usize;
        // Guard against absurd counts before allocating.
        let expect_blocks: usize = grid_for(dense_shape, BlockShape::new(rows, cols)?)
            .iter()
            .product();
        if nblocks != expect_blocks {
            return Err(Error::CsbCorrupt(format!(
                "header claims {nblocks} blocks, shape implies {expect_blocks}"
            )));
        }
        let mut pointers = Vec::with_capacity(nblocks + 1);
        for _ in 0..=nblocks {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            pointers.push(u32::from_le_bytes(b));
        }
        let mut masks = Vec::with_capacity(nblocks);
        for _ in 0..nblocks {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            masks.push(u64::from_le_bytes(b));
        }
        let mut values = Vec::with_capacity(nvalues);
        for _ in 0..nvalues {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            values.push(f32::from_le_bytes(b));
        }
        Self::from_parts(dense_shape, BlockShape::new(rows, cols)?, pointers, masks, values)
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn read_file(path: &std::path::Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

/// One block as yielded by `iter_blocks`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRef<'a> {
    pub coord: [usize; 4],
    pub mask: u64,
    pub values: &'a [f32],
}
