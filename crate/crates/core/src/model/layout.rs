//! Attention layouts for one window.
//!
//! Positions are time-major: position `τ·N + i` is node `i` at step `τ`.

use crate::error::Result;
use crate::graph::SensorGraph;
use crate::tensor::AttentionLayout;

/// Key positions per node: the observed steps when `masked`, else all steps.
pub fn node_key_lists(mask: &[bool], w: usize, n: usize, masked: bool) -> Vec<Vec<usize>> {
    (0..n)
        .map(|i| {
            (0..w)
                .map(|s| s * n + i)
                .filter(|&p| !masked || mask[p])
                .collect()
        })
        .collect()
}

fn with_lists(n_query: usize, n_key: usize, n_out: usize, lists: &[Vec<usize>]) -> Result<AttentionLayout> {
    let mut layout = AttentionLayout::new(n_query, n_key, n_out);
    for l in lists {
        layout.add_key_list(l.iter().copied())?;
    }
    Ok(layout)
}

/// Every position attends over its own node's key list.
pub fn self_layout(w: usize, n: usize, lists: &[Vec<usize>]) -> Result<AttentionLayout> {
    let mut layout = with_lists(w * n, w * n, w * n, lists)?;
    for t in 0..w {
        for i in 0..n {
            let p = t * n + i;
            layout.add_segment(p, p, i as u32)?;
        }
    }
    Ok(layout)
}

/// Every position of node `i` attends over the key list of each in-neighbor
/// `j` separately; the per-edge contexts are summed into the output row.
pub fn cross_layout(w: usize, graph: &SensorGraph, lists: &[Vec<usize>]) -> Result<AttentionLayout> {
    let n = graph.n_nodes();
    let mut layout = with_lists(w * n, w * n, w * n, lists)?;
    for t in 0..w {
        for i in 0..n {
            let p = t * n + i;
            for &(j, _) in &graph.in_adj()[i] {
                layout.add_segment(p, p, j as u32)?;
            }
        }
    }
    Ok(layout)
}

/// Hub `k` of node `i` (row `i·K + k`) attends over node `i`'s key list.
pub fn hub_update_layout(w: usize, n: usize, k: usize, lists: &[Vec<usize>]) -> Result<AttentionLayout> {
    let mut layout = with_lists(n * k, w * n, n * k, lists)?;
    for i in 0..n {
        for h in 0..k {
            layout.add_segment(i * k + h, i * k + h, i as u32)?;
        }
    }
    Ok(layout)
}

fn hub_lists(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0..n).map(|i| (i * k..(i + 1) * k).collect()).collect()
}

/// Every position of node `i` attends over node `i`'s hubs.
pub fn hub_self_layout(w: usize, n: usize, k: usize) -> Result<AttentionLayout> {
    let mut layout = with_lists(w * n, n * k, w * n, &hub_lists(n, k))?;
    for t in 0..w {
        for i in 0..n {
            let p = t * n + i;
            layout.add_segment(p, p, i as u32)?;
        }
    }
    Ok(layout)
}

/// Every position of node `i` attends over the hubs of each in-neighbor.
pub fn hub_cross_layout(w: usize, graph: &SensorGraph, k: usize) -> Result<AttentionLayout> {
    let n = graph.n_nodes();
    let mut layout = with_lists(w * n, n * k, w * n, &hub_lists(n, k))?;
    for t in 0..w {
        for i in 0..n {
            let p = t * n + i;
            for &(j, _) in &graph.in_adj()[i] {
                layout.add_segment(p, p, j as u32)?;
            }
        }
    }
    Ok(layout)
}
