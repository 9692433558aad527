//! Weighted rooted label trees.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// A rooted tree of labels. Every non-root node has exactly one parent and a
/// positive weight on the edge to it.
#[derive(Clone, Debug, PartialEq)]
pub struct TaxonomyGraph {
    labels: Vec<String>,
    index: HashMap<String, usize>,
    parent: Vec<Option<usize>>,
    weight: Vec<f64>,
    children: Vec<Vec<usize>>,
    depth: Vec<usize>,
    weighted_depth: Vec<f64>,
    root: usize,
}

impl TaxonomyGraph {
    /// Builds a tree from `(parent, child, weight)` edges. Every node must be
    /// reachable from `root`.
    pub fn from_edges<S: AsRef<str>>(root: &str, edges: &[(S, S, f64)]) -> Result<Self> {
        let mut labels = vec![root.to_string()];
        let mut index = HashMap::from([(root.to_string(), 0usize)]);
        let mut intern = |s: &str, labels: &mut Vec<String>| -> usize {
            *index.entry(s.to_string()).or_insert_with(|| {
                labels.push(s.to_string());
                labels.len() - 1
            })
        };
        let mut parent_of: Vec<(usize, usize, f64)> = Vec::with_capacity(edges.len());
        for (p, c, w) in edges {
            let (p, c) = (p.as_ref(), c.as_ref());
            if !(*w > 0.0) || !w.is_finite() {
                return Err(Error::Taxonomy(format!("edge {p} -> {c} has non-positive weight {w}")));
            }
            let pi = intern(p, &mut labels);
            let ci = intern(c, &mut labels);
            parent_of.push((pi, ci, *w));
        }
        let n = labels.len();
        let mut parent = vec![None; n];
        let mut weight = vec![0.0; n];
        let mut children = vec![Vec::new(); n];
        for (p, c, w) in parent_of {
            if c == 0 {
                return Err(Error::Taxonomy(format!("root `{root}` cannot have a parent")));
            }
            if parent[c].is_some() {
                return Err(Error::Taxonomy(format!("`{}` has more than one parent", labels[c])));
            }
            parent[c] = Some(p);
            weight[c] = w;
            children[p].push(c);
        }
        let mut depth = vec![usize::MAX; n];
        let mut weighted_depth = vec![0.0; n];
        depth[0] = 0;
        let mut stack = vec![0usize];
        while let Some(u) = stack.pop() {
            for &c in &children[u] {
                depth[c] = depth[u] + 1;
                weighted_depth[c] = weighted_depth[u] + weight[c];
                stack.push(c);
            }
        }
        if let Some(bad) = depth.iter().position(|&d| d == usize::MAX) {
            return Err(Error::Taxonomy(format!("`{}` is not reachable from the root", labels[bad])));
        }
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Ok(Self {
            labels,
            index,
            parent,
            weight,
            children,
            depth,
            weighted_depth,
            root: 0,
        })
    }

    /// Parses the text format: first line names the root, then one
    /// `parent<TAB>child[<TAB>weight]` edge per line. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        let (_, root) = lines.next().ok_or_else(|| perr(1, "empty taxonomy file".into()))?;
        let root = root.trim();
        if root.contains('\t') {
            return Err(perr(1, "first line must name the root".into()));
        }
        let mut edges = Vec::new();
        for (no, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            let w = match f.len() {
                2 => 1.0,
                3 => f[2]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| perr(no, format!("bad weight `{}`: {e}", f[2])))?,
                _ => return Err(perr(no, "expected `parent<TAB>child[<TAB>weight]`".into())),
            };
            edges.push((f[0].trim().to_string(), f[1].trim().to_string(), w));
        }
        Self::from_edges(root, &edges)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.labels[self.root]);
        let mut stack = vec![self.root];
        while let Some(u) = stack.pop() {
            for &c in &self.children[u] {
                if self.weight[c] == 1.0 {
                    writeln!(out, "{}\t{}", self.labels[u], self.labels[c]).expect("string write");
                } else {
                    writeln!(out, "{}\t{}\t{}", self.labels[u], self.labels[c], self.weight[c]).expect("string write");
                }
            }
            stack.extend(self.children[u].iter().rev());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn id(&self, label: &str) -> Result<usize> {
        self.index.get(label).copied().ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn parent(&self, id: usize) -> Option<usize> {
        self.parent[id]
    }

    /// Weight of the edge from `id` to its parent (0 for the root).
    pub fn edge_weight(&self, id: usize) -> f64 {
        self.weight[id]
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.children[id]
    }

    /// Number of edges between `id` and the root.
    pub fn depth(&self, id: usize) -> usize {
        self.depth[id]
    }

    /// Sum of edge weights between `id` and the root.
    pub fn weighted_depth(&self, id: usize) -> f64 {
        self.weighted_depth[id]
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.children[id].is_empty()
    }

    /// Leaves in depth-first order.
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![self.root];
        while let Some(u) = stack.pop() {
            if self.is_leaf(u) {
                out.push(u);
            }
            stack.extend(self.children[u].iter().rev());
        }
        out
    }

    /// `id` followed by its ancestors up to and including the root.
    pub fn path_to_root(&self, id: usize) -> Vec<usize> {
        let mut out = vec![id];
        let mut u = id;
        while let Some(p) = self.parent[u] {
            out.push(p);
            u = p;
        }
        out
    }

    /// Proper ancestors of `id` excluding the root, nearest first.
    pub fn proper_ancestors_below_root(&self, id: usize) -> Vec<usize> {
        let path = self.path_to_root(id);
        path[1..path.len().saturating_sub(1).max(1)].to_vec()
    }

    pub fn is_ancestor(&self, anc: usize, node: usize) -> bool {
        let mut u = node;
        while let Some(p) = self.parent[u] {
            if p == anc {
                return true;
            }
            u = p;
        }
        false
    }

    /// Deepest common ancestor.
    pub fn lca(&self, a: usize, b: usize) -> usize {
        let (mut a, mut b) = (a, b);
        while self.depth[a] > self.depth[b] {
            a = self.parent[a].expect("non-root");
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b].expect("non-root");
        }
        while a != b {
            a = self.parent[a].expect("non-root");
            b = self.parent[b].expect("non-root");
        }
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TaxonomyGraph {
        TaxonomyGraph::from_edges(
            "root",
            &[
                ("root", "a", 1.0),
                ("root", "b", 2.0),
                ("a", "a1", 1.0),
                ("a", "a2", 1.0),
                ("b", "b1", 3.0),
            ],
        )
        .unwrap()
    }

    #[test]
    fn structure() {
        let g = sample();
        let (a1, a2, b1) = (g.id("a1").unwrap(), g.id("a2").unwrap(), g.id("b1").unwrap());
        assert_eq!(g.lca(a1, a2), g.id("a").unwrap());
        assert_eq!(g.lca(a1, b1), g.root());
        assert_eq!(g.depth(b1), 2);
        assert_eq!(g.weighted_depth(b1), 5.0);
        assert_eq!(g.proper_ancestors_below_root(a1), vec![g.id("a").unwrap()]);
        assert!(g.proper_ancestors_below_root(g.id("a").unwrap()).is_empty());
        assert!(g.is_ancestor(g.root(), a1));
        assert!(!g.is_ancestor(a1, a1));
        assert_eq!(g.leaves().len(), 3);
        assert!(matches!(g.id("zzz"), Err(Error::UnknownLabel(_))));
    }

    #[test]
    fn text_roundtrip() {
        let g = sample();
        let back = TaxonomyGraph::parse(&g.to_text(), Path::new("t")).unwrap();
        assert_eq!(back.to_text(), g.to_text());
        assert_eq!(back.len(), g.len());
    }

    #[test]
    fn parse_reports_line_numbers() {
        let err = TaxonomyGraph::parse("root\nroot\ta\nroot\tb\tx\n", Path::new("t")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn rejects_invalid_graphs() {
        assert!(TaxonomyGraph::from_edges("r", &[("r", "a", 0.0)]).is_err());
        assert!(TaxonomyGraph::from_edges("r", &[("r", "a", 1.0), ("r", "a", 1.0)]).is_err());
        assert!(TaxonomyGraph::from_edges("r", &[("r", "a", 1.0), ("x", "y", 1.0)]).is_err());
        assert!(TaxonomyGraph::from_edges("r", &[("a", "r", 1.0)]).is_err());
    }
}
