//! List scheduling of a step graph on per-device compute and comm channels.
//!
//! Nodes are taken in topological order with the lowest ready id first and
//! each channel serves its nodes in that order without backfilling. Every
//! start time is then a max of dependency ends and the channel's previous
//! end, so dropping a dependency edge can only move events earlier.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::graph::{CommDomain, MeshKind, OpKind, Phase, StepGraph};
use crate::comm::{collective_time, GroupTopology};
use crate::config::ClusterSpec;
use crate::error::{Error, Result};
use crate::plan::ParallelPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Compute,
    Comm,
}

impl Channel {
    fn index(self) -> usize {
        match self {
            Channel::Compute => 0,
            Channel::Comm => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub node: u32,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub device: u32,
    pub channel: Channel,
    pub node: u32,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    world: u32,
    /// Events per `(device, channel)`, in start order.
    lanes: Vec<Vec<Event>>,
    names: Vec<String>,
    phases: Vec<Phase>,
}

impl Timeline {
    pub fn world(&self) -> u32 {
        self.world
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn node_name(&self, node: u32) -> &str {
        &self.names[node as usize]
    }

    pub fn node_phase(&self, node: u32) -> Phase {
        self.phases[node as usize]
    }

    pub fn lane(&self, device: u32, channel: Channel) -> &[Event] {
        &self.lanes[device as usize * 2 + channel.index()]
    }

    pub fn events(&self) -> impl Iterator<Item = TimelineEvent> + '_ {
        (0..self.world).flat_map(move |device| {
            [Channel::Compute, Channel::Comm].into_iter().flat_map(move |channel| {
                self.lane(device, channel).iter().map(move |e| TimelineEvent {
                    device,
                    channel,
                    node: e.node,
                    start: e.start,
                    end: e.end,
                })
            })
        })
    }

    /// Latest event end over all devices.
    pub fn step_time(&self) -> f64 {
        self.lanes.iter().filter_map(|l| l.last()).map(|e| e.end).fold(0.0, f64::max)
    }

    /// Busy time on one channel of one device.
    pub fn busy(&self, device: u32, channel: Channel) -> f64 {
        self.lane(device, channel).iter().map(|e| e.end - e.start).sum()
    }

    /// Comm time on `device` not covered by any compute event.
    pub fn exposed_comm(&self, device: u32) -> f64 {
        let compute = self.lane(device, Channel::Compute);
        let mut exposed = 0.0;
        let mut j = 0;
        for c in self.lane(device, Channel::Comm) {
            while j < compute.len() && compute[j].end <= c.start {
                j += 1;
            }
            let mut covered = 0.0;
            let mut k = j;
            while k < compute.len() && compute[k].start < c.end {
                covered += compute[k].end.min(c.end) - compute[k].start.max(c.start);
                k += 1;
            }
            exposed += (c.end - c.start) - covered;
        }
        exposed
    }
}

/// Concrete groups of one communication domain.
struct DomainGroups {
    groups: Vec<(Vec<u32>, GroupTopology)>,
}

fn resolve_domain(domain: CommDomain, plan: &ParallelPlan, cluster: &ClusterSpec) -> Result<DomainGroups> {
    let (kind, dims) = domain.mesh_dims(plan);
    let mesh = match kind {
        MeshKind::Main => plan.mesh()?,
        MeshKind::Expert => plan.expert_mesh()?,
    };
    let groups = mesh.groups_along(&dims)?;
    let mut out = Vec::with_capacity(groups.len());
    for g in groups {
        let topo = GroupTopology { size: g.size(), spans_nodes: g.spans_nodes(cluster.gpus_per_node) };
        out.push((g.members, topo));
    }
    Ok(DomainGroups { groups: out })
}

/// Topological order, lowest ready id first.
fn topo_order(graph: &StepGraph) -> Result<Vec<usize>> {
    let n = graph.nodes.len();
    let mut indegree = vec![0usize; n];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for node in &graph.nodes {
        for &d in &node.deps {
            indegree[node.id] += 1;
            succ[d].push(node.id);
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(i)) = ready.pop() {
        order.push(i);
        for &s in &succ[i] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.push(Reverse(s));
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap_or(0);
        return Err(Error::Graph(format!("dependency cycle through node {stuck} ({})", graph.nodes[stuck].name)));
    }
    Ok(order)
}

pub fn simulate(graph: &StepGraph, plan: &ParallelPlan, cluster: &ClusterSpec) -> Result<Timeline> {
    let lanes = run(graph, plan, cluster, true)?.1;
    Ok(Timeline {
        world: cluster.world_size(),
        lanes,
        names: graph.nodes.iter().map(|n| n.name.clone()).collect(),
        phases: graph.nodes.iter().map(|n| n.phase).collect(),
    })
}

/// Step time with unlimited channels: every node starts as soon as its
/// dependencies (and, for collectives, those of its group peers) are done.
/// A lower bound for [`simulate`].
pub fn critical_path(graph: &StepGraph, plan: &ParallelPlan, cluster: &ClusterSpec) -> Result<f64> {
    Ok(run(graph, plan, cluster, false)?.0.into_iter().fold(0.0, f64::max))
}

/// Returns per-`(node, device)` end times and, when `exclusive`, the lanes.
fn run(graph: &StepGraph, plan: &ParallelPlan, cluster: &ClusterSpec, exclusive: bool) -> Result<(Vec<f64>, Vec<Vec<Event>>)> {
    graph.check()?;
    let world = cluster.world_size();
    if plan.world() != world as u64 {
        return Err(Error::Graph(format!("plan spans {} ranks, cluster has {world}", plan.world())));
    }
    let order = topo_order(graph)?;

    let mut domains: Vec<Option<DomainGroups>> = CommDomain::ALL.iter().map(|_| None).collect();
    for node in &graph.nodes {
        if let OpKind::Collective { domain, .. } = node.kind {
            let slot = CommDomain::ALL.iter().position(|d| *d == domain).expect("known domain");
            if domains[slot].is_none() {
                let groups = resolve_domain(domain, plan, cluster)?;
                if groups.groups.iter().any(|(m, _)| m.len() < 2) {
                    return Err(Error::Graph(format!("collective node {} ({}) runs over a trivial group", node.id, node.name)));
                }
                domains[slot] = Some(groups);
            }
        }
    }

    let w = world as usize;
    let rate = cluster.gpu.peak_flops * cluster.assumptions.compute_efficiency;
    let mut end = vec![0.0f64; graph.nodes.len() * w];
    let mut free = vec![0.0f64; 2 * w];
    let mut lanes: Vec<Vec<Event>> = vec![Vec::new(); if exclusive { 2 * w } else { 0 }];

    let dep_ready = |end: &[f64], deps: &[usize], device: usize| -> f64 {
        deps.iter().map(|&d| end[d * w + device]).fold(0.0, f64::max)
    };

    for i in order {
        let node = &graph.nodes[i];
        match node.kind {
            OpKind::Compute { flops } => {
                let dur = flops as f64 / rate;
                for dev in 0..w {
                    let mut start = dep_ready(&end, &node.deps, dev);
                    if exclusive {
                        start = start.max(free[dev * 2]);
                    }
                    let stop = start + dur;
                    end[i * w + dev] = stop;
                    if exclusive {
                        free[dev * 2] = stop;
                        lanes[dev * 2].push(Event { node: i as u32, start, end: stop });
                    }
                }
            }
            OpKind::Collective { kind, domain, bytes } => {
                let slot = CommDomain::ALL.iter().position(|d| *d == domain).expect("known domain");
                let groups = domains[slot].as_ref().expect("resolved above");
                for (members, topo) in &groups.groups {
                    let start = members
                        .iter()
                        .map(|&m| {
                            let r = dep_ready(&end, &node.deps, m as usize);
                            if exclusive {
                                r.max(free[m as usize * 2 + 1])
                            } else {
                                r
                            }
                        })
                        .fold(0.0, f64::max);
                    let stop = start + collective_time(kind, bytes, *topo, &cluster.link);
                    for &m in members {
                        let m = m as usize;
                        end[i * w + m] = stop;
                        if exclusive {
                            free[m * 2 + 1] = stop;
                            lanes[m * 2 + 1].push(Event { node: i as u32, start, end: stop });
                        }
                    }
                }
            }
        }
    }
    Ok((end, lanes))
}
