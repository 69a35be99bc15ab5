//! Skeleton graphs, motion sequences and datasets.
//!
//! A skeleton is an undirected graph over `N` joints whose edges are the
//! bones. Every graph also carries a parent map (a forest) which defines
//! the bone modality: the bone vector of a joint is its position minus the
//! position of its parent, and roots map to zero.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Builds the symmetric binary adjacency matrix of an undirected edge list.
pub fn build_adjacency(edges: &[(usize, usize)], n: usize) -> Result<Array2<f64>> {
    let mut a = Array2::zeros((n, n));
    for &(i, j) in edges {
        for index in [i, j] {
            if index >= n {
                return Err(Error::IndexOutOfRange {
                    index,
                    num_joints: n,
                });
            }
        }
        if i == j {
            return Err(Error::SelfLoop(i));
        }
        a[[i, j]] = 1.0;
        a[[j, i]] = 1.0;
    }
    Ok(a)
}

/// Symmetric normalization `D^{-1/2} (A + I) D^{-1/2}`, with `D` the degree
/// matrix of `A + I`.
pub fn normalize_adjacency(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = check_square(a)?;
    for i in 0..n {
        for j in 0..n {
            if a[[i, j]] != a[[j, i]] {
                return Err(Error::NotSymmetric(i, j));
            }
            if a[[i, j]] < 0.0 {
                return Err(Error::NegativeEntry(i, j));
            }
        }
    }
    let degrees = self_loop_degrees(a);
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        let self_loop = if i == j { 1.0 } else { 0.0 };
        (a[[i, j]] + self_loop) / (degrees[i] * degrees[j]).sqrt()
    }))
}

/// Row sums of `A + I`.
pub(crate) fn self_loop_degrees(a: &Array2<f64>) -> Vec<f64> {
    a.rows().into_iter().map(|row| row.sum() + 1.0).collect()
}

fn check_square(a: &Array2<f64>) -> Result<usize> {
    let (rows, cols) = a.dim();
    if rows != cols {
        return Err(Error::Shape(format!(
            "adjacency must be square, got {rows}x{cols}"
        )));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    num_joints: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Array2<f64>,
    parents: Vec<Option<usize>>,
}

impl SkeletonGraph {
    /// Builds a graph from an explicit edge set and parent map.
    pub fn new(
        num_joints: usize,
        edges: &[(usize, usize)],
        parents: Vec<Option<usize>>,
    ) -> Result<Self> {
        if num_joints == 0 {
            return Err(Error::InvalidParameter(
                "num_joints must be positive".into(),
            ));
        }
        let adjacency = build_adjacency(edges, num_joints)?;
        if parents.len() != num_joints {
            return Err(Error::MissingParent(format!(
                "parent map has {} entries for {} joints",
                parents.len(),
                num_joints
            )));
        }
        check_forest(&parents)?;
        let edges: BTreeSet<(usize, usize)> =
            edges.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect();
        Ok(Self {
            num_joints,
            edges: edges.into_iter().collect(),
            adjacency,
            parents,
        })
    }

    /// Builds a graph whose edges are exactly the parent links.
    pub fn from_parents(parents: Vec<Option<usize>>) -> Result<Self> {
        let edges: Vec<(usize, usize)> = parents
            .iter()
            .enumerate()
            .filter_map(|(j, p)| p.map(|p| (j, p)))
            .collect();
        Self::new(parents.len(), &edges, parents)
    }

    /// A binary tree rooted at joint 0: the parent of joint `j` is `(j - 1) / 2`.
    pub fn binary_tree(num_joints: usize) -> Result<Self> {
        let parents = (0..num_joints)
            .map(|j| if j == 0 { None } else { Some((j - 1) / 2) })
            .collect();
        Self::from_parents(parents)
    }

    /// The 25-joint Kinect v2 layout used by NTU RGB+D, rooted at the spine
    /// joint (index 20).
    pub fn ntu25() -> Self {
        // (child, parent), 1-based.
        const BONES: [(usize, usize); 24] = [
            (1, 2),
            (2, 21),
            (3, 21),
            (4, 3),
            (5, 21),
            (6, 5),
            (7, 6),
            (8, 7),
            (9, 21),
            (10, 9),
            (11, 10),
            (12, 11),
            (13, 1),
            (14, 13),
            (15, 14),
            (16, 15),
            (17, 1),
            (18, 17),
            (19, 18),
            (20, 19),
            (22, 23),
            (23, 8),
            (24, 25),
            (25, 12),
        ];
        let mut parents = vec![None; 25];
        for (child, parent) in BONES {
            parents[child - 1] = Some(parent - 1);
        }
        Self::from_parents(parents).expect("NTU topology is a tree")
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn roots(&self) -> impl Iterator<Item = usize> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter_map(|(j, p)| p.is_none().then_some(j))
    }

    pub fn normalized_adjacency(&self) -> Array2<f64> {
        normalize_adjacency(&self.adjacency).expect("graph adjacency is symmetric and binary")
    }

    /// Relabels joints so that old joint `perm[k]` becomes new joint `k`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let inverse = invert_permutation(perm, self.num_joints)?;
        let edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .map(|&(i, j)| (inverse[i], inverse[j]))
            .collect();
        let parents = perm
            .iter()
            .map(|&old| self.parents[old].map(|p| inverse[p]))
            .collect();
        Self::new(self.num_joints, &edges, parents)
    }
}

fn check_forest(parents: &[Option<usize>]) -> Result<()> {
    let n = parents.len();
    for (j, parent) in parents.iter().enumerate() {
        if let Some(p) = *parent {
            if p >= n {
                return Err(Error::IndexOutOfRange {
                    index: p,
                    num_joints: n,
                });
            }
            if p == j {
                return Err(Error::ParentCycle(j));
            }
        }
    }
    for start in 0..n {
        let mut current = start;
        let mut steps = 0;
        while let Some(p) = parents[current] {
            current = p;
            steps += 1;
            if steps > n {
                return Err(Error::ParentCycle(start));
            }
        }
    }
    Ok(())
}

pub(crate) fn invert_permutation(perm: &[usize], n: usize) -> Result<Vec<usize>> {
    if perm.len() != n {
        return Err(Error::Shape(format!(
            "permutation of length {} for {} items",
            perm.len(),
            n
        )));
    }
    let mut inverse = vec![usize::MAX; n];
    for (new, &old) in perm.iter().enumerate() {
        if old >= n || inverse[old] != usize::MAX {
            return Err(Error::InvalidParameter("not a permutation".into()));
        }
        inverse[old] = new;
    }
    Ok(inverse)
}

/// A `T x N x C` motion tensor with an optional class label.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    data: Array3<f64>,
    pub label: Option<usize>,
}

impl MotionSequence {
    pub fn new(data: Array3<f64>, label: Option<usize>) -> Result<Self> {
        let (t, n, c) = data.dim();
        if t == 0 || n == 0 || c == 0 {
            return Err(Error::Empty(format!("sequence of shape {t}x{n}x{c}")));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sequence entry {pos}")));
        }
        Ok(Self { data, label })
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn num_joints(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    /// The sequence flattened to a `(T*N) x C` matrix, row `t*N + j`.
    pub fn as_matrix(&self) -> Array2<f64> {
        let (t, n, c) = self.data.dim();
        self.data
            .to_shape((t * n, c))
            .expect("contiguous reshape")
            .to_owned()
    }

    /// Reorders joints so that old joint `perm[k]` becomes joint `k`.
    pub fn permute_joints(&self, perm: &[usize]) -> Self {
        Self {
            data: self.data.select(Axis(1), perm),
            label: self.label,
        }
    }

    /// Reorders frames so that old frame `perm[k]` becomes frame `k`.
    pub fn permute_frames(&self, perm: &[usize]) -> Self {
        Self {
            data: self.data.select(Axis(0), perm),
            label: self.label,
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// Parent-relative bone vectors; root joints map to zero.
pub fn to_bone_stream(seq: &MotionSequence, graph: &SkeletonGraph) -> Result<MotionSequence> {
    check_joints(seq, graph)?;
    let mut bones = Array3::zeros(seq.data.dim());
    for (j, parent) in graph.parents().iter().enumerate() {
        let Some(p) = *parent else { continue };
        let diff = &seq.data.index_axis(Axis(1), j) - &seq.data.index_axis(Axis(1), p);
        bones.index_axis_mut(Axis(1), j).assign(&diff);
    }
    MotionSequence::new(bones, seq.label)
}

/// Inverse of [`to_bone_stream`]: accumulates bones from the roots outward.
/// `roots` supplies the absolute position of each root joint per frame
/// (the remaining joints in it are ignored).
pub fn reconstruct_from_bones(
    bones: &MotionSequence,
    roots: &MotionSequence,
    graph: &SkeletonGraph,
) -> Result<MotionSequence> {
    check_joints(bones, graph)?;
    if bones.data.dim() != roots.data.dim() {
        return Err(Error::Shape("bone and root tensors differ in shape".into()));
    }
    let n = graph.num_joints();
    let mut out = Array3::zeros(bones.data.dim());
    let mut done = vec![false; n];
    let mut remaining = n;
    while remaining > 0 {
        for j in 0..n {
            if done[j] {
                continue;
            }
            match graph.parents()[j] {
                None => {
                    out.index_axis_mut(Axis(1), j)
                        .assign(&roots.data.index_axis(Axis(1), j));
                }
                Some(p) if done[p] => {
                    let pos = &out.index_axis(Axis(1), p) + &bones.data.index_axis(Axis(1), j);
                    out.index_axis_mut(Axis(1), j).assign(&pos);
                }
                Some(_) => continue,
            }
            done[j] = true;
            remaining -= 1;
        }
    }
    MotionSequence::new(out, bones.label)
}

/// Translates the sequence so the first root joint sits at the origin in frame 0.
pub fn center_on_root(seq: &MotionSequence, graph: &SkeletonGraph) -> Result<MotionSequence> {
    check_joints(seq, graph)?;
    let root = graph
        .roots()
        .next()
        .ok_or_else(|| Error::MissingParent("graph has no root".into()))?;
    let origin = seq.data.slice(ndarray::s![0, root, ..]).to_owned();
    let mut data = seq.data.clone();
    for mut v in data.lanes_mut(Axis(2)) {
        v -= &origin;
    }
    MotionSequence::new(data, seq.label)
}

fn check_joints(seq: &MotionSequence, graph: &SkeletonGraph) -> Result<()> {
    if seq.num_joints() != graph.num_joints() {
        return Err(Error::Shape(format!(
            "sequence has {} joints, graph has {}",
            seq.num_joints(),
            graph.num_joints()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidParameter(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<MotionSequence>,
    pub num_classes: usize,
    pub split: Split,
    pub graph: SkeletonGraph,
}

impl Dataset {
    pub fn new(
        sequences: Vec<MotionSequence>,
        num_classes: usize,
        split: Split,
        graph: SkeletonGraph,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidParameter(
                "num_classes must be positive".into(),
            ));
        }
        for seq in &sequences {
            check_joints(seq, &graph)?;
            if let Some(label) = seq.label {
                if label >= num_classes {
                    return Err(Error::LabelOutOfRange { label, num_classes });
                }
            }
        }
        Ok(Self {
            sequences,
            num_classes,
            split,
            graph,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        self.sequences
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.label
                    .ok_or_else(|| Error::InvalidParameter(format!("sequence {i} is unlabeled")))
            })
            .collect()
    }

    pub fn to_bone_stream(&self) -> Result<Self> {
        let sequences = self
            .sequences
            .iter()
            .map(|s| to_bone_stream(s, &self.graph))
            .collect::<Result<_>>()?;
        Ok(Self {
            sequences,
            ..self.clone()
        })
    }

    pub fn centered(&self) -> Result<Self> {
        let sequences = self
            .sequences
            .iter()
            .map(|s| center_on_root(s, &self.graph))
            .collect::<Result<_>>()?;
        Ok(Self {
            sequences,
            ..self.clone()
        })
    }
}
