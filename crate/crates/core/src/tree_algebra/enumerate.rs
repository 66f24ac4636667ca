use crate::error::{Error, Result};

/// An undirected edge `(j, k)` with `j < k`.
pub type Edge = (usize, usize);

pub const MAX_ENUMERATION_NODES: usize = 8;

/// All spanning trees of the complete graph on `q` nodes, by Prüfer decoding.
///
/// Each tree is returned once as a sorted list of `q - 1` edges.
pub fn enumerate_trees(q: usize) -> Result<Vec<Vec<Edge>>> {
    if !(2..=MAX_ENUMERATION_NODES).contains(&q) {
        return Err(Error::InvalidInput(format!(
            "tree enumeration supports 2 <= q <= {MAX_ENUMERATION_NODES}, got {q}"
        )));
    }
    if q == 2 {
        return Ok(vec![vec![(0, 1)]]);
    }
    let len = q - 2;
    let total = q.pow(len as u32);
    let mut trees = Vec::with_capacity(total);
    let mut seq = vec![0usize; len];
    for code in 0..total {
        let mut c = code;
        for slot in seq.iter_mut() {
            *slot = c % q;
            c /= q;
        }
        trees.push(prufer_decode(&seq, q));
    }
    Ok(trees)
}

fn prufer_decode(seq: &[usize], q: usize) -> Vec<Edge> {
    let mut degree = vec![1usize; q];
    for &s in seq {
        degree[s] += 1;
    }
    let mut edges = Vec::with_capacity(q - 1);
    for &s in seq {
        let leaf = (0..q).find(|&v| degree[v] == 1).expect("prufer leaf");
        edges.push(ordered(leaf, s));
        degree[leaf] -= 1;
        degree[s] -= 1;
    }
    let rest: Vec<usize> = (0..q).filter(|&v| degree[v] == 1).collect();
    edges.push(ordered(rest[0], rest[1]));
    edges.sort_unstable();
    edges
}

#[inline]
pub(crate) fn ordered(a: usize, b: usize) -> Edge {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Checks that `edges` forms a spanning tree on `q` nodes.
pub fn is_spanning_tree(edges: &[Edge], q: usize) -> bool {
    if edges.len() + 1 != q {
        return false;
    }
    let mut parent: Vec<usize> = (0..q).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(a, b) in edges {
        if a >= q || b >= q || a == b {
            return false;
        }
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra == rb {
            return false;
        }
        parent[ra] = rb;
    }
    true
}
