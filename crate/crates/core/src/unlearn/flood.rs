//! Flooding broadcast: forward on first receipt, discard duplicates.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::Graph;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryReport {
    pub origin: usize,
    /// Hop count at first receipt, per node.
    pub hops: Vec<usize>,
    /// Copies discarded after the first receipt, per node.
    pub duplicates: Vec<usize>,
    pub messages: usize,
}

/// Simulates one broadcast from `origin`; `apply` runs exactly once per node, in receipt order.
pub fn flood_broadcast(graph: &Graph, origin: usize, mut apply: impl FnMut(usize)) -> Result<DeliveryReport> {
    let n = graph.n_nodes();
    if origin >= n {
        return Err(Error::Protocol(format!("origin {origin} is not a node")));
    }
    if !graph.is_connected() {
        return Err(Error::Protocol("flooding cannot reach every client on a disconnected graph".into()));
    }
    let mut hops: Vec<Option<usize>> = vec![None; n];
    let mut duplicates = vec![0; n];
    let mut messages = 0;
    let mut queue = VecDeque::new();
    hops[origin] = Some(0);
    apply(origin);
    for &v in graph.neighbors(origin) {
        queue.push_back((v, origin, 1));
    }
    while let Some((to, from, hop)) = queue.pop_front() {
        messages += 1;
        if hops[to].is_some() {
            duplicates[to] += 1;
            continue;
        }
        hops[to] = Some(hop);
        apply(to);
        for &v in graph.neighbors(to) {
            if v != from {
                queue.push_back((v, to, hop + 1));
            }
        }
    }
    let hops = hops
        .into_iter()
        .enumerate()
        .map(|(i, h)| h.ok_or_else(|| Error::Protocol(format!("client {i} never received the update"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(DeliveryReport { origin, hops, duplicates, messages })
}
