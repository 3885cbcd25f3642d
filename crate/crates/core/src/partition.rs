//! Token-to-block partitions over 1D sequences and 2D token grids.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{MhlaError, Result};
use crate::tensor::{Matrix, Real};

/// How tokens are laid out before being split into blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Layout {
    /// Contiguous spans of a 1D sequence.
    Linear,
    /// Row-major `height x width` token grid cut into a
    /// `blocks_h x blocks_w` grid of rectangular tiles.
    Grid {
        height: usize,
        width: usize,
        blocks_h: usize,
        blocks_w: usize,
    },
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layout::Linear => f.write_str("linear-1d"),
            Layout::Grid {
                height,
                width,
                blocks_h,
                blocks_w,
            } => write!(f, "grid-2d {height}x{width} in {blocks_h}x{blocks_w} tiles"),
        }
    }
}

/// Assignment of every token to exactly one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockPartition {
    seq_len: usize,
    num_blocks: usize,
    layout: Layout,
    block_of_token: Vec<usize>,
    tokens: Vec<Vec<usize>>,
    centroids: Vec<Vec<f64>>,
    // Size of one block along each axis, in tokens.
    extent: Vec<f64>,
}

fn not_divisible(what: String, total: usize, parts: usize) -> MhlaError {
    let padded = if parts == 0 {
        total
    } else {
        total.div_ceil(parts) * parts
    };
    MhlaError::NotDivisible {
        what,
        parts,
        padded,
    }
}

/// Splits `seq_len` tokens into `num_blocks` equal, non-overlapping blocks.
pub fn make_partition(seq_len: usize, layout: Layout, num_blocks: usize) -> Result<BlockPartition> {
    if num_blocks == 0 || seq_len == 0 {
        return Err(MhlaError::InvalidConfig(format!(
            "a partition needs at least one token and one block (got N={seq_len}, M={num_blocks})"
        )));
    }
    match layout {
        Layout::Linear => {
            if !seq_len.is_multiple_of(num_blocks) {
                return Err(not_divisible(
                    format!("sequence length {seq_len}"),
                    seq_len,
                    num_blocks,
                ));
            }
            let size = seq_len / num_blocks;
            let block_of_token = (0..seq_len).map(|t| t / size).collect();
            let tokens = (0..num_blocks)
                .map(|b| (b * size..(b + 1) * size).collect())
                .collect();
            let centroids = (0..num_blocks)
                .map(|b| vec![b as f64 * size as f64 + (size as f64 - 1.0) / 2.0])
                .collect();
            Ok(BlockPartition {
                seq_len,
                num_blocks,
                layout,
                block_of_token,
                tokens,
                centroids,
                extent: vec![size as f64],
            })
        }
        Layout::Grid {
            height,
            width,
            blocks_h,
            blocks_w,
        } => {
            if height * width != seq_len {
                return Err(MhlaError::InvalidConfig(format!(
                    "token grid {height}x{width} does not hold {seq_len} tokens"
                )));
            }
            if blocks_h * blocks_w != num_blocks {
                return Err(MhlaError::InvalidConfig(format!(
                    "block grid {blocks_h}x{blocks_w} does not give {num_blocks} blocks"
                )));
            }
            if blocks_h == 0 || height % blocks_h != 0 {
                return Err(not_divisible(
                    format!("grid height {height}"),
                    height,
                    blocks_h,
                ));
            }
            if blocks_w == 0 || width % blocks_w != 0 {
                return Err(not_divisible(
                    format!("grid width {width}"),
                    width,
                    blocks_w,
                ));
            }
            let tile_h = height / blocks_h;
            let tile_w = width / blocks_w;
            let mut block_of_token = vec![0; seq_len];
            let mut tokens = vec![Vec::with_capacity(tile_h * tile_w); num_blocks];
            for r in 0..height {
                for c in 0..width {
                    let t = r * width + c;
                    let b = (r / tile_h) * blocks_w + c / tile_w;
                    block_of_token[t] = b;
                    tokens[b].push(t);
                }
            }
            let centroids = (0..num_blocks)
                .map(|b| {
                    let (br, bc) = (b / blocks_w, b % blocks_w);
                    vec![
                        (br * tile_h) as f64 + (tile_h as f64 - 1.0) / 2.0,
                        (bc * tile_w) as f64 + (tile_w as f64 - 1.0) / 2.0,
                    ]
                })
                .collect();
            Ok(BlockPartition {
                seq_len,
                num_blocks,
                layout,
                block_of_token,
                tokens,
                centroids,
                extent: vec![tile_h as f64, tile_w as f64],
            })
        }
    }
}

impl BlockPartition {
    pub fn linear(seq_len: usize, num_blocks: usize) -> Result<Self> {
        make_partition(seq_len, Layout::Linear, num_blocks)
    }

    /// Square grid of `side x side` tokens cut into `blocks_side x blocks_side` tiles.
    pub fn square_grid(side: usize, blocks_side: usize) -> Result<Self> {
        make_partition(
            side * side,
            Layout::Grid {
                height: side,
                width: side,
                blocks_h: blocks_side,
                blocks_w: blocks_side,
            },
            blocks_side * blocks_side,
        )
    }

    #[inline]
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    #[inline]
    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    #[inline]
    pub fn block_of(&self, token: usize) -> usize {
        self.block_of_token[token]
    }

    pub fn block_of_token(&self) -> &[usize] {
        &self.block_of_token
    }

    /// Token indices of block `b`, ascending.
    #[inline]
    pub fn tokens(&self, b: usize) -> &[usize] {
        &self.tokens[b]
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.tokens.iter().map(Vec::len).collect()
    }

    /// Tokens per block; all blocks have the same size.
    pub fn block_size(&self) -> usize {
        self.seq_len / self.num_blocks
    }

    /// Block centroid in token coordinates (one value for 1D, row/col for 2D).
    pub fn centroid(&self, b: usize) -> &[f64] {
        &self.centroids[b]
    }

    /// Euclidean distance between block centroids measured in block-grid units.
    pub fn block_distance(&self, i: usize, j: usize) -> f64 {
        self.centroids[i]
            .iter()
            .zip(&self.centroids[j])
            .zip(&self.extent)
            .map(|((a, b), e)| ((a - b) / e).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Whether each block is a contiguous run of token indices.
    pub fn is_contiguous(&self) -> bool {
        matches!(self.layout, Layout::Linear)
    }

    /// Upper bound on the rank of an MHLA attention map over this partition.
    pub fn mhla_rank_bound(&self, head_dim: usize) -> usize {
        let sum: usize = self.tokens.iter().map(|t| t.len().min(head_dim)).sum();
        sum.min(self.seq_len)
    }
}

/// Smallest length `>= len` that splits into `parts` equal blocks.
pub fn padded_len(len: usize, parts: usize) -> usize {
    if parts == 0 {
        return len;
    }
    len.div_ceil(parts) * parts
}

/// Appends zero rows until the matrix has `rows` rows.
pub fn zero_pad_rows<T: Real>(m: &Matrix<T>, rows: usize) -> Matrix<T> {
    if rows <= m.rows() {
        return m.clone();
    }
    let mut data = m.data().to_vec();
    data.resize(rows * m.cols(), T::zero());
    Matrix::from_vec(rows, m.cols(), data).expect("padded length matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_even_split() {
        let p = make_partition(4, Layout::Linear, 2).unwrap();
        assert_eq!(p.tokens(0), &[0, 1]);
        assert_eq!(p.tokens(1), &[2, 3]);
        assert_eq!(p.centroid(0), &[0.5]);
        assert_eq!(p.centroid(1), &[2.5]);
        assert_eq!(p.block_distance(0, 1), 1.0);
    }

    #[test]
    fn sixteen_tiles_on_a_16x16_grid() {
        let p = BlockPartition::square_grid(16, 4).unwrap();
        assert_eq!(p.num_blocks(), 16);
        assert!(p.block_sizes().iter().all(|&n| n == 16));
        // Tile 0 is the top-left 4x4 rectangle, not the first 16 tokens.
        let expected: Vec<usize> = (0..4)
            .flat_map(|r| (0..4).map(move |c| r * 16 + c))
            .collect();
        assert_eq!(p.tokens(0), expected.as_slice());
        assert_eq!(p.centroid(0), &[1.5, 1.5]);
        assert_eq!(p.block_distance(0, 5), 2f64.sqrt());
    }

    #[test]
    fn non_divisible_is_rejected_with_padding_hint() {
        let err = make_partition(5, Layout::Linear, 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("pad") && msg.contains('6'), "{msg}");
        let grid = Layout::Grid {
            height: 14,
            width: 14,
            blocks_h: 4,
            blocks_w: 4,
        };
        assert!(matches!(
            make_partition(196, grid, 16),
            Err(MhlaError::NotDivisible { padded: 16, .. })
        ));
    }

    #[test]
    fn rejects_inconsistent_grid() {
        let grid = Layout::Grid {
            height: 4,
            width: 4,
            blocks_h: 2,
            blocks_w: 2,
        };
        assert!(make_partition(15, grid, 4).is_err());
        assert!(make_partition(16, grid, 3).is_err());
        assert!(make_partition(0, Layout::Linear, 1).is_err());
    }

    #[test]
    fn rectangular_tiles_use_block_units() {
        let grid = Layout::Grid {
            height: 4,
            width: 8,
            blocks_h: 2,
            blocks_w: 2,
        };
        let p = make_partition(32, grid, 4).unwrap();
        assert_eq!(p.block_sizes(), vec![8; 4]);
        assert_eq!(p.block_distance(0, 1), 1.0);
        assert_eq!(p.block_distance(0, 2), 1.0);
    }

    #[test]
    fn padding_helpers() {
        assert_eq!(padded_len(224, 16), 224);
        assert_eq!(padded_len(250, 16), 256);
        let m = Matrix::<f64>::filled(2, 3, 1.0);
        let p = zero_pad_rows(&m, 4);
        assert_eq!(p.shape(), (4, 3));
        assert_eq!(p.row(3), &[0.0; 3]);
    }

    #[test]
    fn rank_bound_sums_per_block_minimum() {
        let p = BlockPartition::square_grid(16, 4).unwrap();
        assert_eq!(p.mhla_rank_bound(16), 256);
        assert_eq!(p.mhla_rank_bound(4), 64);
    }
}
