use serde::{Deserialize, Serialize};

use crate::numerics::{Real, Tensor};
use crate::{Error, Result};

/// Class label of every series. Labels are opaque: only equality matters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassAssignment {
    labels: Vec<String>,
}

impl ClassAssignment {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::EmptyInput("class assignment has no series"));
        }
        Ok(ClassAssignment { labels })
    }

    /// Every series in one class.
    pub fn single(n: usize) -> Result<Self> {
        Self::new(std::iter::repeat_n("all", n))
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Distinct labels in order of first appearance.
    pub fn classes(&self) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for l in &self.labels {
            if !seen.contains(&l.as_str()) {
                seen.push(l);
            }
        }
        seen
    }

    /// Labels reordered so that position `i` holds the label of series
    /// `order[i]`.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() || order.iter().any(|&i| i >= self.len()) {
            return Err(Error::shape("reordered", format!("{} indices for {} labels", order.len(), self.len())));
        }
        Ok(ClassAssignment {
            labels: order.iter().map(|&i| self.labels[i].clone()).collect(),
        })
    }

    /// Subset of series `keep`, in that order.
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        if keep.iter().any(|&i| i >= self.len()) {
            return Err(Error::shape("subset", "series index out of range"));
        }
        Self::new(keep.iter().map(|&i| self.labels[i].clone()))
    }

    pub fn layout(&self) -> ClassLayout {
        ClassLayout::from_assignment(self)
    }
}

/// How series are arranged into classes: `members[c][j]` is the original
/// index of the series in slot `j` of class `c`. Classes follow order of
/// first appearance and series keep their relative input order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassLayout {
    members: Vec<Vec<usize>>,
    n_series: usize,
}

impl ClassLayout {
    pub fn from_assignment(c: &ClassAssignment) -> Self {
        let classes = c.classes();
        let mut members = vec![Vec::new(); classes.len()];
        for (i, l) in c.labels().iter().enumerate() {
            let k = classes.iter().position(|x| x == l).expect("label listed");
            members[k].push(i);
        }
        ClassLayout {
            members,
            n_series: c.len(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.members.len()
    }

    pub fn n_series(&self) -> usize {
        self.n_series
    }

    /// One class holding every series, in this layout's compact order.
    pub fn merged(&self) -> Self {
        ClassLayout {
            members: vec![self.compact_order()],
            n_series: self.n_series,
        }
    }

    /// Largest class size `S_c`.
    pub fn max_class_size(&self) -> usize {
        self.members.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }

    /// Original series indices in compact (class-major) order.
    pub fn compact_order(&self) -> Vec<usize> {
        self.members.iter().flatten().copied().collect()
    }

    /// Row ranges of each class within the compact order.
    pub fn class_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.members
            .iter()
            .map(|m| {
                let r = start..start + m.len();
                start += m.len();
                r
            })
            .collect()
    }

    /// Class index of each compact row.
    pub fn class_of_compact_row(&self) -> Vec<usize> {
        self.members
            .iter()
            .enumerate()
            .flat_map(|(c, m)| std::iter::repeat_n(c, m.len()))
            .collect()
    }

    /// For each original series, its row in the compact order.
    pub fn compact_row_of_series(&self) -> Vec<usize> {
        let mut pos = vec![0; self.n_series];
        for (row, s) in self.compact_order().into_iter().enumerate() {
            pos[s] = row;
        }
        pos
    }

    /// Flat padded slot index (`c · S_c + j`) of every real slot, in compact
    /// order.
    pub fn real_slots(&self) -> Vec<usize> {
        let sc = self.max_class_size();
        self.members
            .iter()
            .enumerate()
            .flat_map(|(c, m)| (0..m.len()).map(move |j| c * sc + j))
            .collect()
    }
}

/// Series arranged as `[C, S_c, T, D]` with a validity mask over `[C, S_c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedSeriesTensor<F = f64> {
    pub values: Tensor<F>,
    /// `mask[c · S_c + j]` is true when slot `(c, j)` holds a real series.
    pub mask: Vec<bool>,
    pub layout: ClassLayout,
}

/// Arranges `x: [S, T, D]` by class, padding short classes with zeros.
pub fn group_and_pad<F: Real>(x: &Tensor<F>, c: &ClassAssignment) -> Result<GroupedSeriesTensor<F>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::shape("group_and_pad", format!("expected [S, T, D], got {s:?}")));
    }
    if s[0] == 0 {
        return Err(Error::EmptyInput("group_and_pad: no series"));
    }
    if s[0] != c.len() {
        return Err(Error::shape(
            "group_and_pad",
            format!("{} series but {} labels", s[0], c.len()),
        ));
    }
    let layout = c.layout();
    let (cn, sc) = (layout.n_classes(), layout.max_class_size());
    let row = s[1] * s[2];
    let mut values = vec![F::zero(); cn * sc * row];
    let mut mask = vec![false; cn * sc];
    for (k, members) in layout.members().iter().enumerate() {
        for (j, &i) in members.iter().enumerate() {
            let slot = k * sc + j;
            mask[slot] = true;
            values[slot * row..(slot + 1) * row].copy_from_slice(&x.data()[i * row..(i + 1) * row]);
        }
    }
    Ok(GroupedSeriesTensor {
        values: Tensor::new(vec![cn, sc, s[1], s[2]], values)?,
        mask,
        layout,
    })
}

impl<F: Real> GroupedSeriesTensor<F> {
    pub fn n_classes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn max_class_size(&self) -> usize {
        self.values.shape()[1]
    }

    /// Back to `[S, T, D]` in the original series order.
    pub fn ungroup(&self) -> Result<Tensor<F>> {
        let s = self.values.shape();
        let row = s[2] * s[3];
        let n = self.layout.n_series();
        let mut out = vec![F::zero(); n * row];
        for (k, members) in self.layout.members().iter().enumerate() {
            for (j, &i) in members.iter().enumerate() {
                let slot = k * s[1] + j;
                out[i * row..(i + 1) * row].copy_from_slice(&self.values.data()[slot * row..(slot + 1) * row]);
            }
        }
        Tensor::new(vec![n, s[2], s[3]], out)
    }

    /// Overwrites every padded slot with values from `fill`.
    pub fn fill_padding(&mut self, mut fill: impl FnMut() -> F) {
        let s = self.values.shape();
        let row = s[2] * s[3];
        let mask = self.mask.clone();
        let data = self.values.data_mut();
        for (slot, real) in mask.iter().enumerate() {
            if !real {
                for v in &mut data[slot * row..(slot + 1) * row] {
                    *v = fill();
                }
            }
        }
    }
}
