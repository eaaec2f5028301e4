//! Sequence order and attention masks for next-scale-time prediction.
//!
//! A window's tokens flatten lexicographically by (time, scale coarse to
//! fine, canonical group), so each (t, s) pair owns one contiguous block of
//! positions. The three mask builders grant or conceal visibility at block
//! granularity; within a block attention is always permitted because block
//! inputs never carry the block's own targets.

use thiserror::Error;

use crate::bth::{Hierarchy, ScaleSubset};
use crate::nn::AttnMask;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("position {pos} outside sequence of length {len}")]
    BadPosition { pos: usize, len: usize },
    #[error("bitmap is {found} bytes, a {n}x{n} mask needs {expected}")]
    BadBitmap { n: usize, expected: usize, found: usize },
    #[error("sequence needs at least one time step")]
    EmptyTime,
}

/// One (t, scale) block: positions `start..start + len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub t: usize,
    pub scale: usize,
    pub start: usize,
    pub len: usize,
}

/// Bijective layout of (t, scale, group) triples over sequence positions.
#[derive(Debug, Clone)]
pub struct FlattenOrder {
    triples: Vec<(usize, usize, usize)>,
    blocks: Vec<Block>,
    block_of: Vec<usize>,
    t_len: usize,
    scales: Vec<usize>,
    groups: Vec<usize>,
}

impl FlattenOrder {
    pub fn new(h: &Hierarchy, subset: &ScaleSubset, t_len: usize) -> Result<Self, MaskError> {
        if t_len == 0 {
            return Err(MaskError::EmptyTime);
        }
        let scales = subset.scales().to_vec();
        let groups: Vec<usize> = scales.iter().map(|&s| h.n_groups(s)).collect();
        let mut triples = Vec::new();
        let mut blocks = Vec::new();
        let mut block_of = Vec::new();
        for t in 0..t_len {
            for (si, &scale) in scales.iter().enumerate() {
                let start = triples.len();
                for g in 0..groups[si] {
                    triples.push((t, scale, g));
                    block_of.push(blocks.len());
                }
                blocks.push(Block {
                    t,
                    scale,
                    start,
                    len: groups[si],
                });
            }
        }
        Ok(FlattenOrder {
            triples,
            blocks,
            block_of,
            t_len,
            scales,
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    /// Group count per selected scale, aligned with `scales()`.
    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn triple_at(&self, pos: usize) -> Result<(usize, usize, usize), MaskError> {
        self.triples
            .get(pos)
            .copied()
            .ok_or(MaskError::BadPosition {
                pos,
                len: self.len(),
            })
    }

    /// Inverse of `triple_at`; `scale` is the hierarchy scale number.
    pub fn position_of(&self, t: usize, scale: usize, g: usize) -> Option<usize> {
        let si = self.scales.iter().position(|&s| s == scale)?;
        if t >= self.t_len || g >= self.groups[si] {
            return None;
        }
        let block = self.blocks[t * self.scales.len() + si];
        Some(block.start + g)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block_of(&self, pos: usize) -> usize {
        self.block_of[pos]
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    ScaleWise,
    TimeWise,
    ScaleTimeWise,
}

impl MaskMode {
    pub fn name(self) -> &'static str {
        match self {
            MaskMode::ScaleWise => "scale_wise",
            MaskMode::TimeWise => "time_wise",
            MaskMode::ScaleTimeWise => "scale_time_wise",
        }
    }

    fn permits(self, from: Block, to: Block, scale_index: impl Fn(usize) -> usize) -> bool {
        let (si, sj) = (scale_index(from.scale), scale_index(to.scale));
        match self {
            MaskMode::ScaleTimeWise => to.t < from.t || (to.t == from.t && sj <= si),
            MaskMode::TimeWise => to.t < from.t || (to.t == from.t && sj == si),
            MaskMode::ScaleWise => to.t == from.t && sj <= si,
        }
    }
}

/// Block-level permission matrix plus its position-level expansion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    mode: MaskMode,
    n_blocks: usize,
    permit: Vec<bool>,
    positions: AttnMask,
}

impl BlockMask {
    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn block_permits(&self, from: usize, to: usize) -> bool {
        self.permit[from * self.n_blocks + to]
    }

    /// Position-level mask for attention layers.
    pub fn positions(&self) -> &AttnMask {
        &self.positions
    }

    /// Row-major bit dump: bit `q * n + k` set iff position q may see k.
    pub fn to_bitmap(&self) -> Bitmap {
        let n = self.positions.len();
        let mut bytes = vec![0u8; (n * n).div_ceil(8)];
        for q in 0..n {
            for k in 0..n {
                if self.positions.permitted(q, k) {
                    let bit = q * n + k;
                    bytes[bit / 8] |= 1 << (bit % 8);
                }
            }
        }
        Bitmap { n, bytes }
    }
}

/// Portable row-major bitmap of a position-level mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    pub n: usize,
    pub bytes: Vec<u8>,
}

impl Bitmap {
    pub fn to_mask(&self) -> Result<AttnMask, MaskError> {
        let expected = (self.n * self.n).div_ceil(8);
        if self.bytes.len() != expected {
            return Err(MaskError::BadBitmap {
                n: self.n,
                expected,
                found: self.bytes.len(),
            });
        }
        Ok(AttnMask::from_fn(self.n, |q, k| {
            let bit = q * self.n + k;
            self.bytes[bit / 8] >> (bit % 8) & 1 == 1
        }))
    }
}

pub fn build_mask(order: &FlattenOrder, mode: MaskMode) -> BlockMask {
    let n_blocks = order.n_blocks();
    let scale_index = |scale: usize| {
        order
            .scales()
            .iter()
            .position(|&s| s == scale)
            .expect("block scale is in the order")
    };
    let mut permit = vec![false; n_blocks * n_blocks];
    for (bi, &from) in order.blocks().iter().enumerate() {
        for (bj, &to) in order.blocks().iter().enumerate() {
            permit[bi * n_blocks + bj] = mode.permits(from, to, scale_index);
        }
    }
    let positions = AttnMask::from_fn(order.len(), |q, k| {
        permit[order.block_of(q) * n_blocks + order.block_of(k)]
    });
    BlockMask {
        mode,
        n_blocks,
        permit,
        positions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bth::builtin_hierarchy;

    fn order(montage: &str, scales: &[usize], t_len: usize) -> FlattenOrder {
        let h = builtin_hierarchy(montage).unwrap();
        let subset = ScaleSubset::new(scales.to_vec(), &h).unwrap();
        FlattenOrder::new(&h, &subset, t_len).unwrap()
    }

    #[test]
    fn full_test8_window_flattens_to_75_positions() {
        let o = order("test8", &[1, 2, 3, 4], 5);
        assert_eq!(o.len(), 5 * (1 + 2 + 4 + 8));
        assert_eq!(o.n_blocks(), 20);
    }

    #[test]
    fn a_single_block_sequence_has_one_position() {
        let o = order("test8", &[1], 1);
        assert_eq!(o.len(), 1);
        assert_eq!(o.triple_at(0).unwrap(), (0, 1, 0));
    }

    #[test]
    fn order_is_lexicographic_in_time_then_scale_then_group() {
        let o = order("test8", &[2, 4], 3);
        let mut prev = None;
        for pos in 0..o.len() {
            let (t, scale, g) = o.triple_at(pos).unwrap();
            let si = o.scales().iter().position(|&s| s == scale).unwrap();
            let key = (t, si, g);
            if let Some(p) = prev {
                assert!(p < key, "{p:?} then {key:?}");
            }
            prev = Some(key);
        }
    }

    #[test]
    fn position_map_round_trips_every_position() {
        let o = order("seed62", &[1, 3, 5], 4);
        for pos in 0..o.len() {
            let (t, s, g) = o.triple_at(pos).unwrap();
            assert_eq!(o.position_of(t, s, g), Some(pos));
        }
        assert_eq!(o.position_of(0, 2, 0), None, "unselected scale");
        assert_eq!(o.position_of(4, 1, 0), None, "time out of range");
    }

    #[test]
    fn blocks_tile_the_sequence_contiguously() {
        let o = order("test8", &[1, 2, 3, 4], 5);
        let mut next = 0;
        for b in o.blocks() {
            assert_eq!(b.start, next);
            next += b.len;
            for pos in b.start..b.start + b.len {
                assert_eq!(o.block_of(pos), o.blocks().iter().position(|x| x == b).unwrap());
            }
        }
        assert_eq!(next, o.len());
    }

    #[test]
    fn two_by_two_scale_time_mask_matches_hand_enumeration() {
        let o = order("test8", &[2, 3], 2);
        let m = build_mask(&o, MaskMode::ScaleTimeWise);
        // blocks in order: (t0,s2) (t0,s3) (t1,s2) (t1,s3)
        let want = [
            [true, false, false, false],
            [true, true, false, false],
            [true, true, true, false],
            [true, true, true, true],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.block_permits(i, j), want[i][j], "block {i} -> {j}");
            }
        }
    }

    #[test]
    fn single_time_step_makes_scale_time_equal_scale_wise() {
        let o = order("test8", &[1, 2, 3, 4], 1);
        let st = build_mask(&o, MaskMode::ScaleTimeWise);
        let sc = build_mask(&o, MaskMode::ScaleWise);
        assert_eq!(st.positions(), sc.positions());
    }

    #[test]
    fn single_scale_makes_scale_time_equal_time_wise() {
        let o = order("test8", &[3], 4);
        let st = build_mask(&o, MaskMode::ScaleTimeWise);
        let tw = build_mask(&o, MaskMode::TimeWise);
        assert_eq!(st.positions(), tw.positions());
    }

    #[test]
    fn scale_time_permissions_are_the_union_of_the_other_two() {
        for (montage, scales, t_len) in [
            ("test8", vec![1, 2, 3, 4], 3),
            ("test8", vec![2, 4], 5),
            ("seed62", vec![1, 2, 3, 4, 5], 2),
            ("test12", vec![1, 2, 3], 4),
        ] {
            let o = order(montage, &scales, t_len);
            let st = build_mask(&o, MaskMode::ScaleTimeWise);
            let tw = build_mask(&o, MaskMode::TimeWise);
            let sc = build_mask(&o, MaskMode::ScaleWise);
            assert_eq!(
                st.positions(),
                &tw.positions().union(sc.positions()),
                "{montage} {scales:?} T={t_len}"
            );
            assert!(tw.positions().subset_of(st.positions()));
            assert!(sc.positions().subset_of(st.positions()));
        }
    }

    #[test]
    fn all_modes_are_acyclic_and_reflexive_at_the_block_level() {
        let o = order("test8", &[1, 2, 3, 4], 3);
        for mode in [MaskMode::ScaleWise, MaskMode::TimeWise, MaskMode::ScaleTimeWise] {
            let m = build_mask(&o, mode);
            for b in 0..m.n_blocks() {
                assert!(m.block_permits(b, b), "{} block {b} must see itself", mode.name());
                for b2 in 0..m.n_blocks() {
                    if b != b2 {
                        assert!(
                            !(m.block_permits(b, b2) && m.block_permits(b2, b)),
                            "{} cycle between {b} and {b2}",
                            mode.name()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn all_modes_expand_to_transitive_position_masks() {
        let o = order("test8", &[1, 2, 4], 3);
        for mode in [MaskMode::ScaleWise, MaskMode::TimeWise, MaskMode::ScaleTimeWise] {
            assert!(
                build_mask(&o, mode).positions().is_transitive(),
                "{} not transitive",
                mode.name()
            );
        }
    }

    #[test]
    fn expansion_preserves_block_structure_exactly() {
        let o = order("test8", &[2, 3], 3);
        let m = build_mask(&o, MaskMode::TimeWise);
        for q in 0..o.len() {
            for k in 0..o.len() {
                assert_eq!(
                    m.positions().permitted(q, k),
                    m.block_permits(o.block_of(q), o.block_of(k))
                );
            }
        }
    }

    #[test]
    fn bitmap_round_trips_and_is_byte_stable() {
        let o = order("test8", &[2, 3], 2);
        let m = build_mask(&o, MaskMode::ScaleTimeWise);
        let bm = m.to_bitmap();
        assert_eq!(bm.n, 12);
        assert_eq!(bm.bytes.len(), (12 * 12 + 7) / 8);
        assert_eq!(&bm.to_mask().unwrap(), m.positions());
        let bad = Bitmap {
            n: 12,
            bytes: vec![0; 3],
        };
        assert!(matches!(bad.to_mask(), Err(MaskError::BadBitmap { .. })));
    }

    #[test]
    fn forbidden_blocks_cannot_influence_attention_output() {
        use crate::nn::{MultiHeadAttention, StreamRng};
        let o = order("test8", &[2, 3], 2);
        let mask = build_mask(&o, MaskMode::ScaleTimeWise);
        let n = o.len();
        let dim = 8;
        let mut rng = StreamRng::new(3, "test/leak");
        let mut attn = MultiHeadAttention::new(dim, 2, &mut rng);
        let x: Vec<f64> = (0..n * dim).map(|i| ((i * 29) % 19) as f64 * 0.1 - 0.9).collect();
        let base = attn.forward(&x, mask.positions());
        // perturb the last block; every earlier position must be untouched
        let last = *o.blocks().last().unwrap();
        let mut x2 = x.clone();
        for pos in last.start..last.start + last.len {
            for c in 0..dim {
                x2[pos * dim + c] += 5.0;
            }
        }
        let out = attn.forward(&x2, mask.positions());
        let cutoff = last.start * dim;
        assert_eq!(&base[..cutoff], &out[..cutoff], "earlier positions leaked");
    }
}
