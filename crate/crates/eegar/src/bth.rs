//! Nested channel partitions and the pooling operators between scales.
//!
//! A hierarchy is an ordered list of partitions of the montage channels,
//! coarse to fine: scale 1 is the whole channel set as one group, the finest
//! scale is all singletons, and every scale refines the previous one.
//! `downscale` averages, `upscale` broadcasts; together they are exact in one
//! direction (downscale of a broadcast returns the original bits) and a
//! projection in the other.

use crate::nn::Tensor;
use crate::signalio::MontageSpec;

#[derive(Debug, thiserror::Error)]
pub enum BthError {
    #[error("scheme line {line}: {reason}")]
    SchemeParse { line: usize, reason: String },
    #[error("scheme line {line}: unknown channel {name:?}")]
    UnknownChannel { line: usize, name: String },
    #[error("unknown hierarchy scheme {0:?}")]
    UnknownScheme(String),
    #[error("hierarchy has no scales")]
    Empty,
    #[error("scale {scale}: missing channel {channel}")]
    MissingChannel { scale: usize, channel: usize },
    #[error("scale {scale}: channel {channel} appears in more than one group")]
    DuplicateChannel { scale: usize, channel: usize },
    #[error("scale 1 must be a single all-channel group, found {0} groups")]
    NotSingleRoot(usize),
    #[error("scale {scale} group {group} is not nested inside one group of scale {parent}")]
    NonNested {
        scale: usize,
        group: usize,
        parent: usize,
    },
    #[error("finest scale {0} must consist of singleton groups")]
    NotSingletons(usize),
    #[error("scale {0}: groups are not ordered by smallest member channel")]
    NonCanonical(usize),
    #[error("scale order violated: {op} goes from scale {from} to {to}")]
    ScaleOrder {
        op: &'static str,
        from: usize,
        to: usize,
    },
    #[error("scale {0} out of range 1..={1}")]
    BadScale(usize, usize),
    #[error("feature map has {found} groups, scale {scale} expects {expected}")]
    GroupMismatch {
        scale: usize,
        expected: usize,
        found: usize,
    },
    #[error("scale subset invalid: {0}")]
    BadSubset(String),
}

/// Validated nested partition structure. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hierarchy {
    montage_id: String,
    /// `partitions[s-1][g]` = sorted channel indices of group `g` at scale `s`.
    partitions: Vec<Vec<Vec<usize>>>,
    /// `parent_of[s-1][g]` = group index at scale `s-1` containing group `g`
    /// of scale `s` (empty for scale 1).
    parent_of: Vec<Vec<usize>>,
}

impl Hierarchy {
    /// Validates and canonicalizes raw partitions (1-based scales, coarse to
    /// fine). Group and member order may be arbitrary on input.
    pub fn from_partitions(
        montage_id: &str,
        mut partitions: Vec<Vec<Vec<usize>>>,
    ) -> Result<Self, BthError> {
        for scale in &mut partitions {
            for group in scale.iter_mut() {
                group.sort_unstable();
            }
            scale.sort_by_key(|g| g.first().copied().unwrap_or(usize::MAX));
        }
        let h = Hierarchy::from_partitions_unchecked(montage_id, partitions)?;
        h.validate()?;
        Ok(h)
    }

    /// No sorting, no validation beyond parent derivation. Lets tests build
    /// deliberately broken hierarchies and feed them to `validate`.
    pub fn from_partitions_unchecked(
        montage_id: &str,
        partitions: Vec<Vec<Vec<usize>>>,
    ) -> Result<Self, BthError> {
        if partitions.is_empty() {
            return Err(BthError::Empty);
        }
        let mut parent_of = vec![Vec::new()];
        for s in 1..partitions.len() {
            let coarse = &partitions[s - 1];
            let mut parents = Vec::with_capacity(partitions[s].len());
            for group in &partitions[s] {
                // Parent = any coarse group containing this group's first
                // member; nesting is verified separately.
                let first = group.first().copied();
                let p = first
                    .and_then(|ch| coarse.iter().position(|cg| cg.contains(&ch)))
                    .unwrap_or(0);
                parents.push(p);
            }
            parent_of.push(parents);
        }
        Ok(Hierarchy {
            montage_id: montage_id.to_string(),
            partitions,
            parent_of,
        })
    }

    pub fn montage_id(&self) -> &str {
        &self.montage_id
    }

    pub fn n_scales(&self) -> usize {
        self.partitions.len()
    }

    pub fn n_channels(&self) -> usize {
        self.partitions[0].iter().map(|g| g.len()).sum()
    }

    pub fn group_counts(&self) -> Vec<usize> {
        self.partitions.iter().map(|p| p.len()).collect()
    }

    /// Groups of 1-based `scale`.
    pub fn groups(&self, scale: usize) -> &[Vec<usize>] {
        &self.partitions[scale - 1]
    }

    pub fn n_groups(&self, scale: usize) -> usize {
        self.partitions[scale - 1].len()
    }

    pub fn check_scale(&self, scale: usize) -> Result<(), BthError> {
        if scale == 0 || scale > self.n_scales() {
            return Err(BthError::BadScale(scale, self.n_scales()));
        }
        Ok(())
    }

    /// Group index at coarser scale `to` containing group `g` of scale `from`.
    pub fn ancestor(&self, from: usize, g: usize, to: usize) -> usize {
        debug_assert!(to <= from);
        let mut s = from;
        let mut idx = g;
        while s > to {
            idx = self.parent_of[s - 1][idx];
            s -= 1;
        }
        idx
    }

    pub fn validate(&self) -> Result<(), BthError> {
        if self.partitions.is_empty() {
            return Err(BthError::Empty);
        }
        let n = self.n_channels();
        // Every scale is an exact cover of the channel set.
        for (si, scale) in self.partitions.iter().enumerate() {
            let s = si + 1;
            let mut seen = vec![false; n];
            for group in scale {
                for &ch in group {
                    if ch >= n {
                        return Err(BthError::MissingChannel { scale: s, channel: ch });
                    }
                    if seen[ch] {
                        return Err(BthError::DuplicateChannel { scale: s, channel: ch });
                    }
                    seen[ch] = true;
                }
            }
            if let Some(ch) = seen.iter().position(|&v| !v) {
                return Err(BthError::MissingChannel { scale: s, channel: ch });
            }
        }
        if self.partitions[0].len() != 1 {
            return Err(BthError::NotSingleRoot(self.partitions[0].len()));
        }
        // Each scale refines the previous one.
        for s in 2..=self.n_scales() {
            let coarse = &self.partitions[s - 2];
            for (gi, group) in self.partitions[s - 1].iter().enumerate() {
                let parent = coarse.iter().position(|cg| group.iter().all(|ch| cg.contains(ch)));
                if parent.is_none() {
                    return Err(BthError::NonNested {
                        scale: s,
                        group: gi,
                        parent: s - 1,
                    });
                }
            }
        }
        let finest = self.partitions.last().unwrap();
        if finest.iter().any(|g| g.len() != 1) {
            return Err(BthError::NotSingletons(self.n_scales()));
        }
        // Canonical order: groups sorted by smallest member.
        for (si, scale) in self.partitions.iter().enumerate() {
            let mins: Vec<usize> = scale.iter().map(|g| g[0]).collect();
            if mins.windows(2).any(|w| w[0] >= w[1]) && mins.len() > 1 {
                return Err(BthError::NonCanonical(si + 1));
            }
        }
        Ok(())
    }
}

/// Text of a built-in scheme, if `name` is one.
pub fn builtin_scheme(name: &str) -> Option<&'static str> {
    match name {
        "seed62-5" => Some(include_str!("../assets/seed62-5.scheme")),
        "test8-4" => Some(include_str!("../assets/test8-4.scheme")),
        "test12-3" => Some(include_str!("../assets/test12-3.scheme")),
        _ => None,
    }
}

/// Default scheme for each built-in montage.
pub fn default_scheme_for(montage_id: &str) -> Option<&'static str> {
    match montage_id {
        "seed62" => builtin_scheme("seed62-5"),
        "test8" => builtin_scheme("test8-4"),
        "test12" => builtin_scheme("test12-3"),
        _ => None,
    }
}

/// Hierarchy for a built-in montage using its default scheme.
pub fn builtin_hierarchy(montage_id: &str) -> Result<Hierarchy, BthError> {
    let montage = crate::signalio::builtin_montage(montage_id)
        .ok_or_else(|| BthError::UnknownScheme(montage_id.to_string()))?;
    let scheme = default_scheme_for(montage_id)
        .ok_or_else(|| BthError::UnknownScheme(montage_id.to_string()))?;
    build_hierarchy(&montage, scheme)
}

/// Parses scheme text (`S<scale>:<group>: ch1,ch2,...`, names resolved
/// against the montage) and validates the result. Blank lines and `#`
/// comments are ignored.
pub fn build_hierarchy(montage: &MontageSpec, scheme: &str) -> Result<Hierarchy, BthError> {
    let mut partitions: Vec<Vec<Vec<usize>>> = Vec::new();
    for (li, raw) in scheme.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(3, ':');
        let scale_tok = parts.next().unwrap_or("").trim();
        let group_tok = parts.next();
        let members_tok = parts.next();
        let (group_tok, members_tok) = match (group_tok, members_tok) {
            (Some(g), Some(m)) => (g.trim(), m.trim()),
            _ => {
                return Err(BthError::SchemeParse {
                    line: li + 1,
                    reason: "expected `S<scale>:<group>: ch1,ch2,...`".into(),
                })
            }
        };
        let scale: usize = scale_tok
            .strip_prefix('S')
            .and_then(|s| s.parse().ok())
            .filter(|&s| s >= 1)
            .ok_or_else(|| BthError::SchemeParse {
                line: li + 1,
                reason: format!("bad scale token {scale_tok:?}"),
            })?;
        let _group_index: usize = group_tok.parse().map_err(|_| BthError::SchemeParse {
            line: li + 1,
            reason: format!("bad group index {group_tok:?}"),
        })?;
        let mut members = Vec::new();
        for name in members_tok.split(',') {
            let name = name.trim();
            if name.is_empty() {
                continue;
            }
            let idx = montage
                .channel_index(name)
                .ok_or_else(|| BthError::UnknownChannel {
                    line: li + 1,
                    name: name.to_string(),
                })?;
            members.push(idx);
        }
        if members.is_empty() {
            return Err(BthError::SchemeParse {
                line: li + 1,
                reason: "group has no members".into(),
            });
        }
        while partitions.len() < scale {
            partitions.push(Vec::new());
        }
        partitions[scale - 1].push(members);
    }
    Hierarchy::from_partitions(&montage.montage_id, partitions)
}

fn check_map_shape(x: &Tensor, h: &Hierarchy, scale: usize) -> Result<(), BthError> {
    h.check_scale(scale)?;
    let g = x.shape().first().copied().unwrap_or(0);
    if x.shape().len() != 3 || g != h.n_groups(scale) {
        return Err(BthError::GroupMismatch {
            scale,
            expected: h.n_groups(scale),
            found: g,
        });
    }
    Ok(())
}

/// Pools a `[G_from, T, C]` map down to `to` (coarser or equal): each target
/// group takes the arithmetic mean over its member source groups per (t, c).
/// The mean is computed relative to the first member, so pooling a broadcast
/// map returns the original values exactly.
pub fn downscale(x: &Tensor, h: &Hierarchy, from: usize, to: usize) -> Result<Tensor, BthError> {
    check_map_shape(x, h, from)?;
    h.check_scale(to)?;
    if to > from {
        return Err(BthError::ScaleOrder {
            op: "downscale",
            from,
            to,
        });
    }
    if to == from {
        return Ok(x.clone());
    }
    let (t_len, c_len) = (x.shape()[1], x.shape()[2]);
    // members[gt] = source groups whose ancestor at `to` is gt.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); h.n_groups(to)];
    for g in 0..h.n_groups(from) {
        members[h.ancestor(from, g, to)].push(g);
    }
    let mut out = Tensor::zeros(&[h.n_groups(to), t_len, c_len]);
    for (gt, srcs) in members.iter().enumerate() {
        debug_assert!(!srcs.is_empty());
        let first = srcs[0];
        for t in 0..t_len {
            for c in 0..c_len {
                let base = x.at3(first, t, c);
                let mut acc = 0.0;
                for &g in &srcs[1..] {
                    acc += x.at3(g, t, c) - base;
                }
                out.set3(gt, t, c, base + acc / srcs.len() as f64);
            }
        }
    }
    Ok(out)
}

/// Broadcasts a `[G_from, T, C]` map up to `to` (finer or equal): each target
/// group copies its ancestor's value.
pub fn upscale(z: &Tensor, h: &Hierarchy, from: usize, to: usize) -> Result<Tensor, BthError> {
    check_map_shape(z, h, from)?;
    h.check_scale(to)?;
    if to < from {
        return Err(BthError::ScaleOrder {
            op: "upscale",
            from,
            to,
        });
    }
    if to == from {
        return Ok(z.clone());
    }
    let (t_len, c_len) = (z.shape()[1], z.shape()[2]);
    let mut out = Tensor::zeros(&[h.n_groups(to), t_len, c_len]);
    for gt in 0..h.n_groups(to) {
        let src = h.ancestor(to, gt, from);
        for t in 0..t_len {
            for c in 0..c_len {
                out.set3(gt, t, c, z.at3(src, t, c));
            }
        }
    }
    Ok(out)
}

/// Ordered subset of scales used by a run; the last (finest) entry is the
/// reconstruction target scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSubset {
    selected: Vec<usize>,
}

impl ScaleSubset {
    pub fn new(selected: Vec<usize>, h: &Hierarchy) -> Result<Self, BthError> {
        if selected.is_empty() {
            return Err(BthError::BadSubset("empty".into()));
        }
        if selected.windows(2).any(|w| w[0] >= w[1]) {
            return Err(BthError::BadSubset(format!(
                "{selected:?} is not strictly increasing"
            )));
        }
        for &s in &selected {
            if s == 0 || s > h.n_scales() {
                return Err(BthError::BadSubset(format!(
                    "scale {s} outside 1..={}",
                    h.n_scales()
                )));
            }
        }
        Ok(ScaleSubset { selected })
    }

    /// Every scale of the hierarchy, coarse to fine.
    pub fn full(h: &Hierarchy) -> Self {
        ScaleSubset {
            selected: (1..=h.n_scales()).collect(),
        }
    }

    pub fn scales(&self) -> &[usize] {
        &self.selected
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    /// Finest selected scale: the reconstruction target.
    pub fn target_scale(&self) -> usize {
        *self.selected.last().unwrap()
    }
}
