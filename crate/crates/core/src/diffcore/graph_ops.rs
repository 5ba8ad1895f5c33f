/// Fixed sparse linear map over graph nodes in CSR layout.
///
/// Applied to a `(blocks · n_nodes) × cols` matrix, every block of
/// `n_nodes` consecutive rows is propagated independently.
#[derive(Clone, Debug, PartialEq)]
pub struct Propagation {
    n_nodes: usize,
    offsets: Vec<usize>,
    targets: Vec<usize>,
    weights: Vec<f64>,
}

impl Propagation {
    /// `lists[v]` holds `(u, w)` pairs: row `v` of the output receives `w · h[u]`.
    pub fn from_lists(lists: &[Vec<(usize, f64)>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for row in lists {
            for &(u, w) in row {
                targets.push(u);
                weights.push(w);
            }
            offsets.push(targets.len());
        }
        Self {
            n_nodes: lists.len(),
            offsets,
            targets,
            weights,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn row(&self, v: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[v]..self.offsets[v + 1];
        self.targets[r.clone()].iter().copied().zip(self.weights[r].iter().copied())
    }

    /// Dense `n_nodes × n_nodes` matrix, for tests.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.n_nodes]; self.n_nodes];
        for (v, row) in m.iter_mut().enumerate() {
            for (u, w) in self.row(v) {
                row[u] += w;
            }
        }
        m
    }

    pub(crate) fn apply(&self, h: &[f64], cols: usize, out: &mut [f64]) {
        let n = self.n_nodes;
        let blocks = h.len() / (n * cols);
        for b in 0..blocks {
            let base = b * n;
            for v in 0..n {
                let o = &mut out[(base + v) * cols..(base + v + 1) * cols];
                for (u, w) in self.row(v) {
                    let src = &h[(base + u) * cols..(base + u + 1) * cols];
                    for (oc, sc) in o.iter_mut().zip(src) {
                        *oc += w * sc;
                    }
                }
            }
        }
    }

    pub(crate) fn apply_transpose(&self, g: &[f64], cols: usize, out: &mut [f64]) {
        let n = self.n_nodes;
        let blocks = g.len() / (n * cols);
        for b in 0..blocks {
            let base = b * n;
            for v in 0..n {
                let gv = &g[(base + v) * cols..(base + v + 1) * cols];
                for (u, w) in self.row(v) {
                    let o = &mut out[(base + u) * cols..(base + u + 1) * cols];
                    for (oc, gc) in o.iter_mut().zip(gv) {
                        *oc += w * gc;
                    }
                }
            }
        }
    }
}

/// Per-node neighbor index sets in CSR layout (used by attention).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborSets {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl NeighborSets {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = vec![0];
        let mut targets = Vec::new();
        for row in lists {
            targets.extend_from_slice(row);
            offsets.push(targets.len());
        }
        Self { offsets, targets }
    }

    pub fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }
}
