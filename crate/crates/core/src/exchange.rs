//! Simulated multi-node transport: M-data packets, the data manager that
//! routes them, and the final per-unit evaluation.
//!
//! Nodes never read each other's memory. Everything that crosses a node
//! boundary is encoded to bytes, metered in a [`TrafficLedger`], and decoded
//! on the other side.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;

use crate::boxtype::{crit_holders, TypedBoxList};
use crate::error::{domain, FmmError, Result};
use crate::fmm::operators::l2p;
use crate::fmm::{accumulate_kernel, ChargedPoint};
use crate::lists::{build_neighbor_table, LevelDirectory};
use crate::morton::Point3;
use crate::partition::PartitionPlan;
use crate::pseudosort::{pseudo_sort, SortConfig};

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub enum MStatus {
    #[default]
    Missing,
    /// Sum over the children held by this node only.
    Partial,
    Complete,
}

/// Coefficients and status of one level.
pub type LevelMut<'a> = (&'a mut [f64], &'a mut [MStatus]);
pub type LevelRef<'a> = (&'a [f64], &'a [MStatus]);

/// Boxes a node uploads at one level, sorted by box index.
type Outbox = Vec<(u64, Vec<f64>)>;

/// Multipole coefficients of one node, dense over the global non-empty
/// source boxes of every level.
#[derive(Clone, Debug, PartialEq)]
pub struct MStore {
    pub p: usize,
    coeffs: Vec<Vec<f64>>,
    status: Vec<Vec<MStatus>>,
}

impl MStore {
    pub fn new(dir: &LevelDirectory, p: usize) -> Self {
        let p2 = p * p;
        Self {
            p,
            coeffs: dir.sources.iter().map(|b| vec![0.0; b.len() * p2]).collect(),
            status: dir.sources.iter().map(|b| vec![MStatus::Missing; b.len()]).collect(),
        }
    }

    fn p2(&self) -> usize {
        self.p * self.p
    }

    pub fn status(&self, level: u32, rank: usize) -> MStatus {
        self.status[level as usize][rank]
    }

    pub fn set_status(&mut self, level: u32, rank: usize, s: MStatus) {
        self.status[level as usize][rank] = s;
    }

    pub fn coeffs(&self, level: u32, rank: usize) -> &[f64] {
        let p2 = self.p2();
        &self.coeffs[level as usize][rank * p2..(rank + 1) * p2]
    }

    pub fn coeffs_mut(&mut self, level: u32, rank: usize) -> &mut [f64] {
        let p2 = self.p2();
        &mut self.coeffs[level as usize][rank * p2..(rank + 1) * p2]
    }

    /// Coefficients of a box whose M-data is complete.
    pub fn complete(&self, level: u32, rank: usize) -> Option<&[f64]> {
        (self.status(level, rank) == MStatus::Complete).then(|| self.coeffs(level, rank))
    }

    /// All coefficients and statuses of one level.
    pub fn level_mut(&mut self, level: u32) -> (&mut [f64], &mut [MStatus]) {
        (&mut self.coeffs[level as usize], &mut self.status[level as usize])
    }

    pub fn level(&self, level: u32) -> (&[f64], &[MStatus]) {
        (&self.coeffs[level as usize], &self.status[level as usize])
    }

    /// Mutable `level` alongside read-only `level + 1`.
    pub fn parent_and_children(&mut self, level: u32) -> (LevelMut<'_>, LevelRef<'_>) {
        let l = level as usize;
        let (c_lo, c_hi) = self.coeffs.split_at_mut(l + 1);
        let (s_lo, s_hi) = self.status.split_at_mut(l + 1);
        ((&mut c_lo[l], &mut s_lo[l]), (&c_hi[0], &s_hi[0]))
    }
}

/// Points one compute unit holds after scattering.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UnitData {
    pub unit: usize,
    /// Owned sources plus halo copies, in ascending original index.
    pub sources: Vec<ChargedPoint>,
    pub source_ids: Vec<u32>,
    pub receivers: Vec<Point3>,
    /// Original index of each receiver.
    pub receiver_ids: Vec<u32>,
}

/// Local coefficients of the finest-level receiver boxes a node owns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LeafLocals {
    /// Ascending ranks into the global finest-level receiver boxes.
    pub ranks: Vec<usize>,
    pub coeffs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeState {
    pub id: usize,
    pub units: Vec<UnitData>,
    pub store: MStore,
    pub locals: LeafLocals,
}

/// One box's M-data on the wire: `{level u8, box u64, p^2 f64}`, little
/// endian. The top bit of the level byte carries the completeness flag.
#[derive(Clone, Debug, PartialEq)]
pub struct MDataPacket {
    pub level: u32,
    pub box_index: u64,
    pub complete: bool,
    pub coeffs: Vec<f64>,
}

pub const HEADER_BYTES: usize = 9;
const COMPLETE_BIT: u8 = 0x80;

impl MDataPacket {
    pub fn wire_len(p: usize) -> usize {
        HEADER_BYTES + 8 * p * p
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + 8 * self.coeffs.len());
        out.push(self.level as u8 | if self.complete { COMPLETE_BIT } else { 0 });
        out.write_u64::<LittleEndian>(self.box_index).expect("vec write");
        for &c in &self.coeffs {
            out.write_f64::<LittleEndian>(c).expect("vec write");
        }
        out
    }

    pub fn decode(bytes: &[u8], p: usize) -> Result<Self> {
        if bytes.len() != Self::wire_len(p) {
            return Err(FmmError::Format(format!(
                "packet of {} bytes, expected {} for p={p}",
                bytes.len(),
                Self::wire_len(p)
            )));
        }
        let mut r = bytes;
        let tag = r.read_u8()?;
        let box_index = r.read_u64::<LittleEndian>()?;
        let mut coeffs = vec![0.0; p * p];
        r.read_f64_into::<LittleEndian>(&mut coeffs)?;
        Ok(Self { level: (tag & !COMPLETE_BIT) as u32, box_index, complete: tag & COMPLETE_BIT != 0, coeffs })
    }
}

/// Import request on the wire: `{level u8, box u64}`.
fn encode_request(level: u32, box_index: u64) -> [u8; HEADER_BYTES] {
    let mut out = [0u8; HEADER_BYTES];
    out[0] = level as u8;
    out[1..].copy_from_slice(&box_index.to_le_bytes());
    out
}

fn decode_request(bytes: &[u8; HEADER_BYTES]) -> (u32, u64) {
    (bytes[0] as u32, u64::from_le_bytes(bytes[1..].try_into().expect("8 bytes")))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NodeTraffic {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub packets_sent: u64,
    pub packets_received: u64,
    pub requests_sent: u64,
    pub request_bytes_sent: u64,
    /// Per level.
    pub exported_boxes: Vec<u64>,
    pub imported_boxes: Vec<u64>,
}

/// Byte and packet counters for one upward exchange.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrafficLedger {
    pub nodes: Vec<NodeTraffic>,
    pub manager_bytes_received: u64,
    pub manager_bytes_sent: u64,
    pub manager_packets_received: u64,
    pub manager_packets_sent: u64,
    pub manager_requests_received: u64,
    pub manager_request_bytes_received: u64,
    pub merged_roots: u64,
    /// Data bytes sent by nodes for boxes at `l_crit`.
    pub crit_bytes: u64,
}

impl TrafficLedger {
    fn new(nodes: usize, levels: usize) -> Self {
        let node =
            NodeTraffic { exported_boxes: vec![0; levels], imported_boxes: vec![0; levels], ..NodeTraffic::default() };
        Self { nodes: vec![node; nodes], ..Self::default() }
    }

    /// Everything nodes sent arrived at the manager and vice versa.
    pub fn is_conserved(&self) -> bool {
        let sum = |f: fn(&NodeTraffic) -> u64| self.nodes.iter().map(f).sum::<u64>();
        sum(|n| n.bytes_sent) == self.manager_bytes_received
            && sum(|n| n.packets_sent) == self.manager_packets_received
            && sum(|n| n.bytes_received) == self.manager_bytes_sent
            && sum(|n| n.packets_received) == self.manager_packets_sent
            && sum(|n| n.requests_sent) == self.manager_requests_received
            && sum(|n| n.request_bytes_sent) == self.manager_request_bytes_received
    }

    pub fn total_bytes(&self) -> u64 {
        self.manager_bytes_received + self.manager_bytes_sent + self.manager_request_bytes_received
    }

    pub fn exported_at(&self, level: u32) -> u64 {
        self.nodes.iter().map(|n| n.exported_boxes.get(level as usize).copied().unwrap_or(0)).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.total_bytes() == 0 && self.merged_roots == 0
    }
}

/// One line of the optional packet trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub phase: &'static str,
    pub from: String,
    pub to: String,
    pub level: u32,
    pub box_index: u64,
    pub bytes: u64,
}

const MANAGER: &str = "manager";

fn node_name(id: usize) -> String {
    format!("node{id}")
}

/// The master role: collects export and root packets, merges roots and
/// answers import requests.
#[derive(Clone, Debug, Default)]
pub struct DataManager {
    ledger: TrafficLedger,
    trace: Option<Vec<TraceRecord>>,
}

impl DataManager {
    pub fn new(record_trace: bool) -> Self {
        Self { ledger: TrafficLedger::default(), trace: record_trace.then(Vec::new) }
    }

    /// Snapshot of the counters.
    pub fn meter(&self) -> TrafficLedger {
        self.ledger.clone()
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "phase,from,to,level,box,bytes")?;
        for t in self.trace() {
            writeln!(w, "{},{},{},{},{},{}", t.phase, t.from, t.to, t.level, t.box_index, t.bytes)?;
        }
        w.flush()?;
        Ok(())
    }

    fn record(&mut self, phase: &'static str, from: String, to: String, level: u32, box_index: u64, bytes: usize) {
        if let Some(t) = self.trace.as_mut() {
            t.push(TraceRecord { phase, from, to, level, box_index, bytes: bytes as u64 });
        }
    }

    /// Completes every node's IMPORT and ROOT boxes.
    ///
    /// Expects each node's EXPORT boxes complete and its ROOT boxes at least
    /// partial. Root partials are summed in ascending node order; a packet
    /// already flagged complete is taken as is.
    pub fn run_upward_exchange(
        &mut self,
        nodes: &mut [NodeState],
        typed: &[TypedBoxList],
        plan: &PartitionPlan,
        dir: &LevelDirectory,
    ) -> Result<()> {
        if nodes.len() != plan.nodes || typed.len() != plan.nodes {
            return domain(format!(
                "{} node states and {} typed lists for {} nodes",
                nodes.len(),
                typed.len(),
                plan.nodes
            ));
        }
        let p = nodes.first().map_or(1, |n| n.store.p);
        let levels = dir.l_max as usize + 1;
        self.ledger = TrafficLedger::new(nodes.len(), levels);
        let (l_crit, l_par) = (plan.l_crit, plan.l_par);

        // collect: each node's outbox, decoded by the manager
        // exports[node][level] is sorted by box index
        let mut exports: Vec<Vec<Outbox>> = vec![vec![Vec::new(); levels]; nodes.len()];
        let mut roots: HashMap<(u32, u64), (bool, Vec<f64>)> = HashMap::new();
        let mut requests: Vec<Vec<[u8; HEADER_BYTES]>> = vec![Vec::new(); nodes.len()];
        for (j, (node, t)) in nodes.iter().zip(typed).enumerate() {
            for l in l_crit..=dir.l_max {
                for (&b, is_root) in
                    t.export_list(l).iter().map(|b| (b, false)).chain(t.root_list(l).iter().map(|b| (b, true)))
                {
                    let rank = dir.source_rank(l, b).expect("typed boxes come from the directory");
                    let status = node.store.status(l, rank);
                    let complete = status == MStatus::Complete;
                    if status == MStatus::Missing || (!is_root && !complete) {
                        return domain(format!("node {j} has no M-data for its box {b} at level {l}"));
                    }
                    let bytes =
                        MDataPacket { level: l, box_index: b, complete, coeffs: node.store.coeffs(l, rank).to_vec() }
                            .encode();
                    self.meter_to_manager(j, l, b, bytes.len(), l == l_crit);
                    let pkt = MDataPacket::decode(&bytes, p)?;
                    if is_root {
                        match roots.get_mut(&(l, b)) {
                            Some((true, _)) => {}
                            Some(entry) if pkt.complete => *entry = (true, pkt.coeffs),
                            Some((false, acc)) => acc.iter_mut().zip(&pkt.coeffs).for_each(|(a, c)| *a += c),
                            None => {
                                roots.insert((l, b), (pkt.complete, pkt.coeffs));
                            }
                        }
                    } else {
                        self.ledger.nodes[j].exported_boxes[l as usize] += 1;
                        exports[j][l as usize].push((b, pkt.coeffs));
                    }
                }
                for &b in t.import_list(l) {
                    let req = encode_request(l, b);
                    let n = &mut self.ledger.nodes[j];
                    n.requests_sent += 1;
                    n.request_bytes_sent += req.len() as u64;
                    self.ledger.manager_requests_received += 1;
                    self.ledger.manager_request_bytes_received += req.len() as u64;
                    self.record("request", node_name(j), MANAGER.into(), l, b, req.len());
                    requests[j].push(req);
                }
            }
        }
        self.ledger.merged_roots = roots.len() as u64;

        // route: answer every request from the owner's export array
        let mut replies: Vec<Vec<Vec<u8>>> = vec![Vec::new(); nodes.len()];
        for (j, reqs) in requests.iter().enumerate() {
            for req in reqs {
                let (l, b) = decode_request(req);
                let unroutable = FmmError::Routing { node: j as u32, level: l, index: b };
                let coeffs = if l >= l_par {
                    let owner = plan.node_of_index(l, b);
                    let table = &exports[owner][l as usize];
                    let pos = table.binary_search_by_key(&b, |e| e.0).map_err(|_| unroutable)?;
                    &table[pos].1
                } else if l == l_crit {
                    let rank = dir.source_rank(l, b).ok_or(unroutable)?;
                    match crit_holders(dir, plan, rank).as_slice() {
                        [single] => {
                            let table = &exports[*single][l as usize];
                            let pos = table.binary_search_by_key(&b, |e| e.0).map_err(|_| FmmError::Routing {
                                node: j as u32,
                                level: l,
                                index: b,
                            })?;
                            &table[pos].1
                        }
                        _ => &roots.get(&(l, b)).ok_or(FmmError::Routing { node: j as u32, level: l, index: b })?.1,
                    }
                } else {
                    return Err(unroutable);
                };
                let bytes = MDataPacket { level: l, box_index: b, complete: true, coeffs: coeffs.clone() }.encode();
                self.meter_to_node(j, l, b, bytes.len());
                self.ledger.nodes[j].imported_boxes[l as usize] += 1;
                replies[j].push(bytes);
            }
            for l in l_crit..=dir.l_max {
                for &b in typed[j].root_list(l) {
                    let (_, sum) = &roots[&(l, b)];
                    let bytes = MDataPacket { level: l, box_index: b, complete: true, coeffs: sum.clone() }.encode();
                    self.meter_to_node(j, l, b, bytes.len());
                    replies[j].push(bytes);
                }
            }
        }

        // deliver
        for (node, inbox) in nodes.iter_mut().zip(replies) {
            for bytes in inbox {
                let pkt = MDataPacket::decode(&bytes, p)?;
                let rank = dir.source_rank(pkt.level, pkt.box_index).expect("reply for a directory box");
                node.store.coeffs_mut(pkt.level, rank).copy_from_slice(&pkt.coeffs);
                node.store.set_status(pkt.level, rank, MStatus::Complete);
            }
        }
        debug_assert!(self.ledger.is_conserved());
        Ok(())
    }

    fn meter_to_manager(&mut self, j: usize, level: u32, b: u64, bytes: usize, crit: bool) {
        let n = &mut self.ledger.nodes[j];
        n.bytes_sent += bytes as u64;
        n.packets_sent += 1;
        self.ledger.manager_bytes_received += bytes as u64;
        self.ledger.manager_packets_received += 1;
        if crit {
            self.ledger.crit_bytes += bytes as u64;
        }
        self.record("upload", node_name(j), MANAGER.into(), level, b, bytes);
    }

    fn meter_to_node(&mut self, j: usize, level: u32, b: u64, bytes: usize) {
        let n = &mut self.ledger.nodes[j];
        n.bytes_received += bytes as u64;
        n.packets_received += 1;
        self.ledger.manager_bytes_sent += bytes as u64;
        self.ledger.manager_packets_sent += 1;
        self.record("reply", MANAGER.into(), node_name(j), level, b, bytes);
    }
}

/// Final summation on every unit: L2P from the node's finest-level local
/// coefficients plus the near field over the unit's own and halo sources.
/// Returns potentials in original receiver order.
pub fn run_downward_redistribution(
    nodes: &[NodeState],
    dir: &LevelDirectory,
    receiver_count: usize,
) -> Result<Vec<f64>> {
    let l_max = dir.l_max;
    let p = nodes.first().map_or(1, |n| n.store.p);
    let p2 = p * p;
    let config = SortConfig::deterministic();
    let per_unit: Vec<Vec<(u32, f64)>> = nodes
        .par_iter()
        .flat_map_iter(|node| node.units.iter().map(move |u| (node, u)))
        .map(|(node, unit)| -> Result<Vec<(u32, f64)>> {
            let (src, src_marks) = pseudo_sort(&unit.sources, l_max, &config)?;
            let (recv, _) = pseudo_sort(&unit.receivers, l_max, &config)?;
            let table = build_neighbor_table(&src_marks, &recv.non_empty_index, l_max)?;
            let mut scratch = Vec::new();
            let mut out = Vec::with_capacity(recv.len());
            for i in 0..recv.box_count() {
                let key = recv.box_key(i);
                let center = key.center();
                let global = dir.receiver_rank(l_max, key.index()).expect("unit receivers are in the directory");
                let pos = node.locals.ranks.binary_search(&global).map_err(|_| {
                    FmmError::Domain(format!(
                        "node {} has no local expansion for receiver box {}",
                        node.id,
                        key.index()
                    ))
                })?;
                let local = &node.locals.coeffs[pos * p2..(pos + 1) * p2];
                let near: Vec<&[ChargedPoint]> = table.segment(i).iter().map(|&s| src.box_points(s as usize)).collect();
                for (k, y) in recv.box_points(i).iter().enumerate() {
                    let mut acc = 0.0;
                    for slice in &near {
                        accumulate_kernel(&mut acc, y, slice);
                    }
                    let orig = recv.permutation[recv.box_range(i).start + k];
                    out.push((unit.receiver_ids[orig as usize], acc + l2p(local, &center, y, p, &mut scratch)));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut potentials = vec![f64::NAN; receiver_count];
    let mut written = 0usize;
    for (id, v) in per_unit.into_iter().flatten() {
        potentials[id as usize] = v;
        written += 1;
    }
    if written != receiver_count {
        return domain(format!("{written} of {receiver_count} receivers evaluated"));
    }
    Ok(potentials)
}
