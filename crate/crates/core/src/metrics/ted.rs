//! Ordered-tree edit distance (Zhang & Shasha) with unit costs.
//!
//! Nodes are numbered in postorder; for each node the leftmost leaf of its
//! subtree is recorded. Keyroots — nodes whose leftmost leaf differs from
//! their parent's — anchor the forest-distance DP; every other subtree
//! distance falls out of a keyroot's table for free.

use super::FieldTree;

struct PostOrder {
    /// Node labels in postorder (1-based slot 0 unused).
    labels: Vec<String>,
    /// lld[i] = postorder index of the leftmost leaf under node i.
    lld: Vec<usize>,
    /// Keyroot indices, ascending.
    keyroots: Vec<usize>,
}

fn postorder(tree: &FieldTree) -> PostOrder {
    fn walk(
        tree: &FieldTree,
        node: usize,
        labels: &mut Vec<String>,
        lld: &mut Vec<usize>,
    ) -> usize {
        let mut leftmost = 0;
        for (i, &child) in tree.children(node).iter().enumerate() {
            let child_idx = walk(tree, child, labels, lld);
            if i == 0 {
                leftmost = lld[child_idx];
            }
        }
        labels.push(tree.label(node).to_string());
        let idx = labels.len() - 1; // 1-based thanks to the sentinel below
        if tree.children(node).is_empty() {
            leftmost = idx;
        }
        lld.push(leftmost);
        idx
    }

    let mut labels = vec![String::new()]; // 1-based sentinel
    let mut lld = vec![0];
    walk(tree, FieldTree::ROOT, &mut labels, &mut lld);

    let n = labels.len() - 1;
    // Keyroot: no proper ancestor shares its leftmost leaf, i.e. the
    // highest node for each distinct lld value.
    let mut keyroots = Vec::new();
    for i in 1..=n {
        if !(i + 1..=n).any(|j| lld[j] == lld[i]) {
            keyroots.push(i);
        }
    }
    PostOrder { labels, lld, keyroots }
}

/// Minimum number of node insertions, deletions, and relabels turning one
/// ordered labeled tree into the other. Unit cost each; matches are free.
pub fn tree_edit_distance(t1: &FieldTree, t2: &FieldTree) -> usize {
    let a = postorder(t1);
    let b = postorder(t2);
    let (n1, n2) = (a.labels.len() - 1, b.labels.len() - 1);
    let mut td = vec![vec![0usize; n2 + 1]; n1 + 1];

    for &i in &a.keyroots {
        for &j in &b.keyroots {
            // Forest distance over postorder ranges [lld(i)..=i] × [lld(j)..=j].
            let (li, lj) = (a.lld[i], b.lld[j]);
            let (w, h) = (i - li + 2, j - lj + 2);
            // fd[x][y] indexes forests ending at li+x-1 / lj+y-1; row/col 0 = empty.
            let mut fd = vec![vec![0usize; h]; w];
            for x in 1..w {
                fd[x][0] = fd[x - 1][0] + 1;
            }
            for y in 1..h {
                fd[0][y] = fd[0][y - 1] + 1;
            }
            for x in 1..w {
                for y in 1..h {
                    let (ni, nj) = (li + x - 1, lj + y - 1);
                    if a.lld[ni] == li && b.lld[nj] == lj {
                        // Both prefixes are whole subtrees: allow relabel.
                        let relabel = usize::from(a.labels[ni] != b.labels[nj]);
                        fd[x][y] = (fd[x - 1][y] + 1)
                            .min(fd[x][y - 1] + 1)
                            .min(fd[x - 1][y - 1] + relabel);
                        td[ni][nj] = fd[x][y];
                    } else {
                        // Splice in the memoized subtree distance.
                        let (px, py) = (a.lld[ni] - li, b.lld[nj] - lj);
                        fd[x][y] = (fd[x - 1][y] + 1)
                            .min(fd[x][y - 1] + 1)
                            .min(fd[px][py] + td[ni][nj]);
                    }
                }
            }
        }
    }
    td[n1][n2]
}
