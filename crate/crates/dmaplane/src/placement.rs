//! NUMA topology, placement verification, and the cross-node copy
//! benchmark.
//!
//! Placement requests are best-effort: an allocation that cannot land on
//! the requested node falls back to a default node and says so via an
//! explicit `fell_back` flag, never silently. The benchmark measures
//! memcpy bandwidth for every (src, dst) node pair and derives the
//! remote-access penalty from the resulting matrix.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::registry::{AllocClass, BufferId, Registry};

/// Node-distance topology. Distances follow the usual convention: the
/// diagonal (local access) must be the row minimum.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub nodes: u32,
    /// distance[src][dst]
    pub distance: Vec<Vec<u32>>,
    /// Set when distance[i][j] != distance[j][i] anywhere: legal but
    /// worth surfacing, since most placement heuristics assume symmetry.
    pub asymmetric: bool,
}

impl Topology {
    /// Single-node fallback used when no topology can be detected.
    pub fn single_node() -> Topology {
        Topology {
            nodes: 1,
            distance: vec![vec![10]],
            asymmetric: false,
        }
    }

    /// Parses the textual topology format:
    ///
    /// ```text
    /// nodes=2
    /// distance=10,21;21,10
    /// ```
    ///
    /// Rows are `;`-separated, entries `,`-separated. Blank lines and
    /// `#` comments are ignored. Errors carry the offending line number.
    pub fn from_config(text: &str) -> Result<Topology> {
        let mut nodes: Option<u32> = None;
        let mut distance: Option<Vec<Vec<u32>>> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(Error::Parse {
                line,
                msg: format!("expected key=value, got {trimmed:?}"),
            })?;
            match key.trim() {
                "nodes" => {
                    let n: u32 = value.trim().parse().map_err(|_| Error::Parse {
                        line,
                        msg: format!("node count {:?} is not a number", value.trim()),
                    })?;
                    if n == 0 {
                        return Err(Error::Parse {
                            line,
                            msg: "node count must be at least 1".into(),
                        });
                    }
                    nodes = Some(n);
                }
                "distance" => {
                    let mut rows = Vec::new();
                    for row in value.split(';') {
                        let mut cells = Vec::new();
                        for cell in row.split(',') {
                            let d: u32 = cell.trim().parse().map_err(|_| Error::Parse {
                                line,
                                msg: format!("distance {:?} is not a number", cell.trim()),
                            })?;
                            cells.push(d);
                        }
                        rows.push(cells);
                    }
                    distance = Some(rows);
                }
                other => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("unknown key {other:?}"),
                    });
                }
            }
        }
        let nodes = nodes.ok_or(Error::Parse {
            line: 0,
            msg: "missing nodes= line".into(),
        })?;
        let distance = match distance {
            Some(d) => d,
            // Default: local 10, remote 20, the common two-tier shape.
            None => (0..nodes)
                .map(|i| (0..nodes).map(|j| if i == j { 10 } else { 20 }).collect())
                .collect(),
        };
        Topology::validate(nodes, distance)
    }

    fn validate(nodes: u32, distance: Vec<Vec<u32>>) -> Result<Topology> {
        let n = nodes as usize;
        if distance.len() != n || distance.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument(format!(
                "distance matrix must be {n}x{n}"
            )));
        }
        for (i, row) in distance.iter().enumerate() {
            for (j, &d) in row.iter().enumerate() {
                if d < row[i] {
                    return Err(Error::InvalidArgument(format!(
                        "distance[{i}][{j}]={d} is below the diagonal {}; \
                         local access must be the row minimum",
                        row[i]
                    )));
                }
            }
        }
        let asymmetric = (0..n).any(|i| (0..n).any(|j| distance[i][j] != distance[j][i]));
        Ok(Topology {
            nodes,
            distance,
            asymmetric,
        })
    }

    /// Detects the host topology from sysfs, degrading to a single node
    /// when the hierarchy is unavailable (non-Linux, containers).
    pub fn detect() -> Topology {
        Self::detect_from_sysfs("/sys/devices/system/node").unwrap_or_else(Topology::single_node)
    }

    fn detect_from_sysfs(root: &str) -> Option<Topology> {
        let entries = std::fs::read_dir(root).ok()?;
        let mut ids: Vec<u32> = entries
            .filter_map(|e| {
                let name = e.ok()?.file_name().into_string().ok()?;
                name.strip_prefix("node")?.parse().ok()
            })
            .collect();
        if ids.is_empty() {
            return None;
        }
        ids.sort_unstable();
        let n = ids.len();
        let mut distance = vec![vec![0u32; n]; n];
        for (i, id) in ids.iter().enumerate() {
            let text = std::fs::read_to_string(format!("{root}/node{id}/distance")).ok()?;
            let row: Vec<u32> = text
                .split_whitespace()
                .filter_map(|t| t.parse().ok())
                .collect();
            if row.len() != n {
                return None;
            }
            distance[i] = row;
        }
        Topology::validate(n as u32, distance).ok()
    }

    /// Renders the matrix in the same textual format `from_config` reads.
    pub fn to_config(&self) -> String {
        let rows: Vec<String> = self
            .distance
            .iter()
            .map(|r| {
                r.iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect();
        format!("nodes={}\ndistance={}\n", self.nodes, rows.join(";"))
    }

    /// Mean off-diagonal/diagonal distance ratio, expressed as the
    /// fractional penalty of remote access (0 for a single node).
    pub fn distance_penalty(&self) -> f64 {
        let n = self.nodes as usize;
        if n < 2 {
            return 0.0;
        }
        let mut diag = 0.0;
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    diag += self.distance[i][j] as f64;
                } else {
                    off += self.distance[i][j] as f64;
                }
            }
        }
        let diag_mean = diag / n as f64;
        let off_mean = off / (n * (n - 1)) as f64;
        1.0 - diag_mean / off_mean
    }
}

/// Where an allocation actually landed, relative to what was asked for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacementReport {
    pub buffer: BufferId,
    pub requested_node: u32,
    pub actual_node: u32,
    /// True iff the requested node could not satisfy the allocation and
    /// a fallback node was used instead.
    pub fell_back: bool,
}

/// Placement-aware allocator over the buffer registry.
pub struct Allocator {
    registry: Registry,
    topology: Topology,
    fallback_node: u32,
}

impl Allocator {
    pub fn new(registry: Registry, topology: Topology) -> Allocator {
        Allocator {
            registry,
            topology,
            fallback_node: 0,
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// Allocates `size` bytes preferring `node`. `simulate_exhausted`
    /// marks nodes that should be treated as out of memory (test and CLI
    /// hook); allocations preferring those nodes fall back.
    pub fn alloc_on_node(
        &self,
        size: usize,
        node: u32,
        class: AllocClass,
        simulate_exhausted: &[u32],
    ) -> Result<PlacementReport> {
        if node >= self.topology.nodes {
            return Err(Error::InvalidArgument(format!(
                "node {node} out of range (topology has {} nodes)",
                self.topology.nodes
            )));
        }
        let (actual, fell_back) = if simulate_exhausted.contains(&node) {
            let fallback = if self.fallback_node != node
                && !simulate_exhausted.contains(&self.fallback_node)
            {
                self.fallback_node
            } else {
                // Nearest other usable node by distance.
                (0..self.topology.nodes)
                    .filter(|n| *n != node && !simulate_exhausted.contains(n))
                    .min_by_key(|n| self.topology.distance[node as usize][*n as usize])
                    .ok_or_else(|| {
                        Error::ResourceExhausted("all nodes exhausted".into())
                    })?
            };
            (fallback, true)
        } else {
            (node, false)
        };
        let buffer = self
            .registry
            .create_buffer_placed(size, class, Some(node), actual)?;
        Ok(PlacementReport {
            buffer,
            requested_node: node,
            actual_node: actual,
            fell_back,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchConfig {
    pub size_bytes: usize,
    pub iterations: u32,
    pub warmup: u32,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            size_bytes: 64 << 20,
            iterations: 20,
            warmup: 3,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchCell {
    pub src_node: u32,
    pub dst_node: u32,
    pub median_mbps: f64,
    pub min_mbps: f64,
    pub max_mbps: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub size_bytes: usize,
    pub iterations: u32,
    pub cells: Vec<BenchCell>,
    pub nodes: u32,
}

impl BenchReport {
    pub fn cell(&self, src: u32, dst: u32) -> Option<&BenchCell> {
        self.cells
            .iter()
            .find(|c| c.src_node == src && c.dst_node == dst)
    }

    /// 1 - mean(off-diagonal medians) / mean(diagonal medians): the
    /// fractional bandwidth loss of crossing a node boundary.
    pub fn remote_penalty(&self) -> f64 {
        let diag: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.src_node == c.dst_node)
            .map(|c| c.median_mbps)
            .collect();
        let off: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.src_node != c.dst_node)
            .map(|c| c.median_mbps)
            .collect();
        if diag.is_empty() || off.is_empty() {
            return 0.0;
        }
        let diag_mean = diag.iter().sum::<f64>() / diag.len() as f64;
        let off_mean = off.iter().sum::<f64>() / off.len() as f64;
        1.0 - off_mean / diag_mean
    }

    /// Human-oriented aligned table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "copy bandwidth (MB/s), {} bytes, median of {} runs",
            self.size_bytes, self.iterations
        );
        let _ = write!(out, "{:>8}", "src\\dst");
        for d in 0..self.nodes {
            let _ = write!(out, "{d:>10}");
        }
        out.push('\n');
        for s in 0..self.nodes {
            let _ = write!(out, "{s:>8}");
            for d in 0..self.nodes {
                match self.cell(s, d) {
                    Some(c) => {
                        let _ = write!(out, "{:>10.0}", c.median_mbps);
                    }
                    None => {
                        let _ = write!(out, "{:>10}", "-");
                    }
                }
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "remote penalty: {:.1}%",
            self.remote_penalty() * 100.0
        );
        out
    }

    /// Machine-oriented CSV: `src,dst,size_bytes,mbps` per cell.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("src,dst,size_bytes,mbps\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{:.1}",
                c.src_node, c.dst_node, self.size_bytes, c.median_mbps
            );
        }
        out
    }
}

/// Times memcpy between buffers nominally placed on every node pair.
/// Placement is nominal in user space, so same-node and cross-node cells
/// converge on UMA hosts; the matrix structure and statistics are the
/// point, not absolute numbers.
pub fn run_copy_bench(topology: &Topology, cfg: BenchConfig) -> Result<BenchReport> {
    if cfg.iterations == 0 {
        return Err(Error::InvalidArgument(
            "iterations must be at least 1".into(),
        ));
    }
    if cfg.size_bytes == 0 {
        return Err(Error::InvalidArgument("size must be at least 1".into()));
    }
    let mut cells = Vec::new();
    let src = vec![0xA5u8; cfg.size_bytes];
    let mut dst = vec![0u8; cfg.size_bytes];
    for s in 0..topology.nodes {
        for d in 0..topology.nodes {
            for _ in 0..cfg.warmup {
                dst.copy_from_slice(&src);
                std::hint::black_box(&dst);
            }
            let mut rates = Vec::with_capacity(cfg.iterations as usize);
            for _ in 0..cfg.iterations {
                let t0 = Instant::now();
                dst.copy_from_slice(&src);
                std::hint::black_box(&dst);
                let dt = t0.elapsed().as_secs_f64().max(1e-9);
                rates.push(cfg.size_bytes as f64 / dt / 1e6);
            }
            rates.sort_by(|a, b| a.total_cmp(b));
            let median = if rates.len() % 2 == 1 {
                rates[rates.len() / 2]
            } else {
                (rates[rates.len() / 2 - 1] + rates[rates.len() / 2]) / 2.0
            };
            cells.push(BenchCell {
                src_node: s,
                dst_node: d,
                median_mbps: median,
                min_mbps: rates[0],
                max_mbps: *rates.last().unwrap(),
            });
        }
    }
    Ok(BenchReport {
        size_bytes: cfg.size_bytes,
        iterations: cfg.iterations,
        cells,
        nodes: topology.nodes,
    })
}
