//! Relation tensor over stocks and its grouping into attention-head masks.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::DataError;

/// Binary N x N x G relation tensor. The diagonal of every slice is forced to
/// 1: a mask row with no admissible position would make the masked softmax
/// denominator vanish, so every stock always attends at least to itself.
#[derive(Debug, Clone)]
pub struct RelationTensor {
    n: usize,
    names: Vec<String>,
    bits: Vec<u8>, // layout [g][i][j]
}

impl RelationTensor {
    pub fn new(n: usize, names: Vec<String>) -> Self {
        let g = names.len();
        let mut bits = vec![0u8; n * n * g];
        for gi in 0..g {
            for i in 0..n {
                bits[(gi * n + i) * n + i] = 1;
            }
        }
        RelationTensor { n, names, bits }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn g(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn set(&mut self, g: usize, i: usize, j: usize) {
        self.bits[(g * self.n + i) * self.n + j] = 1;
    }

    pub fn get(&self, g: usize, i: usize, j: usize) -> bool {
        self.bits[(g * self.n + i) * self.n + j] != 0
    }

    /// One N x N slice as 0/1 values.
    pub fn slice(&self, g: usize) -> &[u8] {
        &self.bits[g * self.n * self.n..(g + 1) * self.n * self.n]
    }

    /// Count of off-diagonal set bits in one slice.
    pub fn count_offdiag(&self, g: usize) -> usize {
        let mut c = 0;
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j && self.get(g, i, j) {
                    c += 1;
                }
            }
        }
        c
    }

    /// Elementwise OR over the selected slices.
    pub fn union(&self, subset: &[usize]) -> Vec<u8> {
        let nn = self.n * self.n;
        let mut out = vec![0u8; nn];
        for &g in subset {
            for (o, b) in out.iter_mut().zip(self.slice(g)) {
                *o |= b;
            }
        }
        out
    }

    /// Loads `relation_name,symbol_a,symbol_b` lines; each directed edge also
    /// adds its reverse.
    pub fn from_file(path: &Path, symbols: &[String]) -> Result<Self, DataError> {
        let fname = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
            file: fname.clone(),
            source: e,
        })?;
        let index_of = |sym: &str, line: usize| -> Result<usize, DataError> {
            symbols
                .iter()
                .position(|s| s == sym)
                .ok_or_else(|| DataError::BadRow {
                    file: fname.clone(),
                    line,
                    reason: format!("unknown symbol {sym:?}"),
                })
        };
        let mut names: Vec<String> = Vec::new();
        let mut edges: Vec<(usize, usize, usize)> = Vec::new();
        for (li, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(|s| s.trim()).collect();
            if parts.len() != 3 {
                return Err(DataError::BadRow {
                    file: fname.clone(),
                    line: li + 1,
                    reason: "expected relation_name,symbol_a,symbol_b".into(),
                });
            }
            let g = match names.iter().position(|n| n == parts[0]) {
                Some(g) => g,
                None => {
                    names.push(parts[0].to_string());
                    names.len() - 1
                }
            };
            let a = index_of(parts[1], li + 1)?;
            let b = index_of(parts[2], li + 1)?;
            edges.push((g, a, b));
        }
        let mut rel = RelationTensor::new(symbols.len(), names);
        for (g, a, b) in edges {
            rel.set(g, a, b);
            rel.set(g, b, a);
        }
        Ok(rel)
    }

    pub fn to_file(&self, path: &Path, symbols: &[String]) -> Result<(), DataError> {
        let mut out = String::new();
        for g in 0..self.g() {
            for i in 0..self.n {
                for j in 0..self.n {
                    if i != j && self.get(g, i, j) {
                        out.push_str(&format!(
                            "{},{},{}\n",
                            self.names[g], symbols[i], symbols[j]
                        ));
                    }
                }
            }
        }
        std::fs::write(path, out).map_err(|e| DataError::Io {
            file: path.display().to_string(),
            source: e,
        })
    }
}

/// Per-attention-head masks derived from grouping the G relations.
#[derive(Debug, Clone)]
pub struct HeadMaskSet {
    /// One N x N mask (0.0 / 1.0 values, all-ones diagonal) per masked head.
    pub masks: Vec<Vec<f64>>,
    pub n: usize,
    pub unmasked_heads: usize,
    /// relation index -> head index
    pub group_assignment: Vec<usize>,
    pub relation_names: Vec<String>,
}

impl HeadMaskSet {
    pub fn masked_heads(&self) -> usize {
        self.masks.len()
    }

    /// Single mask covering the union of all relations (aggregated-relations
    /// ablation).
    pub fn aggregated(&self) -> HeadMaskSet {
        let nn = self.n * self.n;
        let mut union = vec![0.0; nn];
        for m in &self.masks {
            for (u, v) in union.iter_mut().zip(m) {
                if *v > 0.0 {
                    *u = 1.0;
                }
            }
        }
        HeadMaskSet {
            masks: vec![union],
            n: self.n,
            unmasked_heads: self.unmasked_heads,
            group_assignment: vec![0; self.group_assignment.len()],
            relation_names: self.relation_names.clone(),
        }
    }

    /// JSON report mapping relation name to its head index.
    pub fn grouping_report(&self) -> serde_json::Value {
        let mut map = BTreeMap::new();
        for (ri, name) in self.relation_names.iter().enumerate() {
            map.insert(name.clone(), self.group_assignment[ri]);
        }
        serde_json::json!({
            "masked_heads": self.masked_heads(),
            "unmasked_heads": self.unmasked_heads,
            "assignment": map,
        })
    }
}

fn jaccard(a: &[u8], b: &[u8], n: usize) -> f64 {
    // off-diagonal edge sets; the forced diagonal is shared by construction
    let mut inter = 0usize;
    let mut uni = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (x, y) = (a[i * n + j] != 0, b[i * n + j] != 0);
            if x && y {
                inter += 1;
            }
            if x || y {
                uni += 1;
            }
        }
    }
    if uni == 0 {
        1.0 // two empty relations are identical
    } else {
        inter as f64 / uni as f64
    }
}

/// Groups the G relations onto at most `max_heads` masked attention heads.
/// With G <= max_heads each relation keeps its own head; otherwise relations
/// are merged agglomeratively by greatest Jaccard similarity of their edge
/// sets (ties broken toward lower relation indices), and each head mask is
/// the OR of its group.
pub fn group_relations(c: &RelationTensor, max_heads: usize, unmasked_heads: usize) -> HeadMaskSet {
    let n = c.n();
    let g = c.g();
    assert!(g >= 1, "need at least one relation");
    let max_heads = max_heads.max(1);

    // groups as sorted relation-index lists with cached union slices
    let mut groups: Vec<(Vec<usize>, Vec<u8>)> =
        (0..g).map(|gi| (vec![gi], c.slice(gi).to_vec())).collect();
    while groups.len() > max_heads {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..groups.len() {
            for b in (a + 1)..groups.len() {
                let sim = jaccard(&groups[a].1, &groups[b].1, n);
                let better = match best {
                    None => true,
                    Some((ba, bb, bs)) => {
                        sim > bs
                            || (sim == bs
                                && (groups[a].0[0], groups[b].0[0])
                                    < (groups[ba].0[0], groups[bb].0[0]))
                    }
                };
                if better {
                    best = Some((a, b, sim));
                }
            }
        }
        let (a, b, _) = best.expect("at least two groups");
        let (rb, sb) = groups.remove(b);
        groups[a].0.extend(rb);
        groups[a].0.sort_unstable();
        for (x, y) in groups[a].1.iter_mut().zip(sb) {
            *x |= y;
        }
    }
    groups.sort_by_key(|(rels, _)| rels[0]);

    let mut assignment = vec![0usize; g];
    let mut masks = Vec::with_capacity(groups.len());
    for (hi, (rels, slice)) in groups.iter().enumerate() {
        for &r in rels {
            assignment[r] = hi;
        }
        let mut m: Vec<f64> = slice.iter().map(|b| f64::from(*b)).collect();
        for i in 0..n {
            m[i * n + i] = 1.0;
        }
        masks.push(m);
    }
    HeadMaskSet {
        masks,
        n,
        unmasked_heads,
        group_assignment: assignment,
        relation_names: c.names().to_vec(),
    }
}

/// Cluster labels from the connected components of the undirected union graph
/// of the selected relation slices. Labels are assigned in order of first
/// appearance; singletons are allowed.
pub fn clusters_from_relations(c: &RelationTensor, relation_subset: &[usize]) -> Vec<usize> {
    assert!(!relation_subset.is_empty(), "relation subset must be non-empty");
    let n = c.n();
    let union = c.union(relation_subset);

    // union-find
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for j in 0..n {
            if i != j && (union[i * n + j] != 0 || union[j * n + i] != 0) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut label_of_root: BTreeMap<usize, usize> = BTreeMap::new();
    let mut labels = vec![0usize; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        let next = label_of_root.len();
        labels[i] = *label_of_root.entry(r).or_insert(next);
    }
    labels
}
