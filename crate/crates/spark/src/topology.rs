//! Time-variant kappa-regular communication graphs.
//!
//! Each round draws a fresh random regular graph from the pairing
//! (configuration) model: every client gets kappa stubs, stubs are shuffled
//! and matched pairwise, and draws with self-loops or duplicate edges are
//! rejected. After a bounded number of retries the last draw is repaired by
//! edge swaps, so generation always terminates. Graphs are deterministic in
//! `(M, kappa, round, base_seed)`.

use std::collections::BTreeSet;

use crate::error::{Result, SparkError};
use crate::rng::{derive_seed, Xoshiro256pp};

/// One round's communication graph.
#[derive(Clone, Debug)]
pub struct RoundGraph {
    pub round: usize,
    /// Sorted neighbor ids per client; every list has length `kappa`.
    pub adjacency: Vec<Vec<usize>>,
    pub kappa: usize,
    pub seed: u64,
}

const PAIRING_RETRIES: usize = 200;

/// Generates a random kappa-regular simple graph on `m` clients.
pub fn generate(m: usize, kappa: usize, round: usize, base_seed: u64) -> Result<RoundGraph> {
    if kappa >= m {
        return Err(SparkError::config(format!(
            "degree {kappa} requires more than {m} clients"
        )));
    }
    if m * kappa % 2 != 0 {
        return Err(SparkError::config(format!(
            "no {kappa}-regular graph exists on {m} vertices (odd stub count)"
        )));
    }
    let seed = derive_seed(base_seed, "topology", round as u64, 0);
    let mut rng = Xoshiro256pp::from_seed_u64(seed);

    // The pairing model collapses for dense graphs (few simple matchings),
    // so above half density sample the complement graph instead: the
    // complement of a (m-1-kappa)-regular simple graph is kappa-regular
    // and simple, and its stub count is automatically even.
    let complement = 2 * kappa > m - 1;
    let gen_kappa = if complement { m - 1 - kappa } else { kappa };

    let edges = if gen_kappa == 0 {
        BTreeSet::new()
    } else {
        let mut found: Option<BTreeSet<(usize, usize)>> = None;
        for _ in 0..PAIRING_RETRIES {
            if let Some(simple) = simple_edges(&draw_pairing(m, gen_kappa, &mut rng)) {
                found = Some(simple);
                break;
            }
        }
        match found {
            Some(e) => e,
            // Fall back to repairing a defective matching with
            // degree-preserving edge swaps.
            None => repair(draw_pairing(m, gen_kappa, &mut rng), &mut rng)?,
        }
    };

    let mut adjacency = vec![Vec::with_capacity(kappa); m];
    if complement {
        for a in 0..m {
            for b in a + 1..m {
                if !edges.contains(&(a, b)) {
                    adjacency[a].push(b);
                    adjacency[b].push(a);
                }
            }
        }
    } else {
        for &(a, b) in &edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
    }
    for list in &mut adjacency {
        list.sort_unstable();
    }
    debug_assert!(adjacency.iter().all(|l| l.len() == kappa));
    Ok(RoundGraph { round, adjacency, kappa, seed })
}

/// One pairing-model draw: shuffled stubs matched pairwise, kept as raw
/// pairs so self-loops and duplicates survive for possible repair.
fn draw_pairing(m: usize, kappa: usize, rng: &mut Xoshiro256pp) -> Vec<(usize, usize)> {
    let mut stubs: Vec<usize> = (0..m).flat_map(|v| std::iter::repeat_n(v, kappa)).collect();
    rng.shuffle(&mut stubs);
    stubs
        .chunks_exact(2)
        .map(|p| (p[0].min(p[1]), p[0].max(p[1])))
        .collect()
}

/// Returns the edge set when the raw pairing is already simple.
fn simple_edges(pairs: &[(usize, usize)]) -> Option<BTreeSet<(usize, usize)>> {
    let mut edges = BTreeSet::new();
    for &(a, b) in pairs {
        if a == b || !edges.insert((a, b)) {
            return None;
        }
    }
    Some(edges)
}

/// Repairs a defective pairing with degree-preserving edge swaps: a bad
/// pair (self-loop or duplicate) `(u, v)` and a disjoint good pair `(a, b)`
/// are rewired to `(u, a)` and `(v, b)`, keeping every degree at kappa.
fn repair(
    mut pairs: Vec<(usize, usize)>,
    rng: &mut Xoshiro256pp,
) -> Result<BTreeSet<(usize, usize)>> {
    let multiplicity = |pairs: &[(usize, usize)]| {
        let mut counts = std::collections::HashMap::new();
        for &p in pairs {
            *counts.entry(p).or_insert(0usize) += 1;
        }
        counts
    };
    for _ in 0..100_000 {
        let counts = multiplicity(&pairs);
        let Some(i) = pairs
            .iter()
            .position(|&(a, b)| a == b || counts[&(a, b)] > 1)
        else {
            return Ok(pairs.into_iter().collect());
        };
        let (u, v) = pairs[i];
        // random disjoint partner pair whose rewiring creates no new defect
        let mut swapped = false;
        for _ in 0..4 * pairs.len() {
            let j = rng.next_below(pairs.len());
            if j == i {
                continue;
            }
            let (a, b) = pairs[j];
            if a == u || a == v || b == u || b == v || a == b {
                continue;
            }
            let e1 = (u.min(a), u.max(a));
            let e2 = (v.min(b), v.max(b));
            if counts.contains_key(&e1) || counts.contains_key(&e2) || e1 == e2 {
                continue;
            }
            pairs[i] = e1;
            pairs[j] = e2;
            swapped = true;
            break;
        }
        if !swapped {
            return Err(SparkError::config(
                "edge-swap repair stalled; graph too dense to rewire".to_string(),
            ));
        }
    }
    Err(SparkError::config("edge-swap repair did not converge".to_string()))
}

/// Sorted neighbor list of client `i`.
pub fn neighbors(g: &RoundGraph, i: usize) -> Result<&[usize]> {
    g.adjacency
        .get(i)
        .map(|v| v.as_slice())
        .ok_or_else(|| {
            SparkError::contract(format!(
                "client {i} outside graph of {} clients",
                g.adjacency.len()
            ))
        })
}

/// Whether the graph is connected (diagnostic only; never enforced).
pub fn is_connected(g: &RoundGraph) -> bool {
    let m = g.adjacency.len();
    if m == 0 {
        return true;
    }
    let mut seen = vec![false; m];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1;
    while let Some(v) = stack.pop() {
        for &w in &g.adjacency[v] {
            if !seen[w] {
                seen[w] = true;
                count += 1;
                stack.push(w);
            }
        }
    }
    count == m
}

/// Edge list as `a b` lines, for debugging dumps.
pub fn edge_list(g: &RoundGraph) -> String {
    let mut out = String::new();
    for (a, nbrs) in g.adjacency.iter().enumerate() {
        for &b in nbrs {
            if a < b {
                out.push_str(&format!("{a} {b}\n"));
            }
        }
    }
    out
}
