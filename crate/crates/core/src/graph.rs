//! Directed communication graphs: anchors, edge-probability matrices,
//! thresholding, cycle repair and topological scheduling.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CardError, Result};

pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorKind {
    Chain,
    Star,
    FullyConnected,
}

impl FromStr for AnchorKind {
    type Err = CardError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chain" => Ok(AnchorKind::Chain),
            "star" => Ok(AnchorKind::Star),
            "fully-connected" | "full" => Ok(AnchorKind::FullyConnected),
            other => Err(CardError::Invalid(format!("unknown anchor kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for AnchorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AnchorKind::Chain => "chain",
            AnchorKind::Star => "star",
            AnchorKind::FullyConnected => "fully-connected",
        })
    }
}

/// Prior connectivity pattern the encoders propagate over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AnchorTopology {
    pub kind: AnchorKind,
    pub n: usize,
}

impl AnchorTopology {
    pub fn new(kind: AnchorKind, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(CardError::Invalid("anchor needs at least one agent".into()));
        }
        Ok(AnchorTopology { kind, n })
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        if i == j || i >= self.n || j >= self.n {
            return false;
        }
        match self.kind {
            AnchorKind::Chain => j == i + 1,
            AnchorKind::Star => i == 0,
            AnchorKind::FullyConnected => true,
        }
    }
}

pub fn anchor_adjacency(anchor: &AnchorTopology) -> EdgeProbabilityMatrix {
    let mut m = EdgeProbabilityMatrix::zeros(anchor.n);
    for i in 0..anchor.n {
        for j in 0..anchor.n {
            if anchor.has_edge(i, j) {
                m.values[i * anchor.n + j] = 1.0;
            }
        }
    }
    m
}

/// Square matrix of link probabilities with an exactly-zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeProbabilityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl EdgeProbabilityMatrix {
    pub fn zeros(n: usize) -> Self {
        EdgeProbabilityMatrix { n, values: vec![0.0; n * n] }
    }

    /// Builds from row-major values. Diagonal entries must be zero; every
    /// entry must lie in `[0, 1]`.
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(CardError::ShapeMismatch(format!("{} values for a {n}x{n} matrix", values.len())));
        }
        for (k, &v) in values.iter().enumerate() {
            let (i, j) = (k / n, k % n);
            if !(0.0..=1.0).contains(&v) {
                return Err(CardError::Invalid(format!("entry ({i},{j}) = {v} is not a probability")));
            }
            if i == j && v != 0.0 {
                return Err(CardError::Invalid(format!("diagonal entry ({i},{i}) must be masked")));
            }
        }
        Ok(EdgeProbabilityMatrix { n, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(CardError::ShapeMismatch("matrix is not square".into()));
        }
        Self::from_values(n, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Off-diagonal entries in row-major order.
    pub fn off_diagonal(&self) -> Vec<f64> {
        let n = self.n;
        (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| self.get(i, j)).collect()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.n;
        (0..n).flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub p: f64,
}

impl Edge {
    pub fn new(from: usize, to: usize, p: f64) -> Self {
        Edge { from, to, p }
    }

    fn key(&self) -> (usize, usize) {
        (self.from, self.to)
    }
}

/// Edges with `s[i][j] > tau`, in row-major order.
pub fn threshold(s: &EdgeProbabilityMatrix, tau: f64) -> Result<Vec<Edge>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(CardError::InvalidThreshold(tau));
    }
    Ok(s.pairs().filter(|&(i, j)| s.get(i, j) > tau).map(|(i, j)| Edge::new(i, j, s.get(i, j))).collect())
}

fn node_count(edges: &[Edge]) -> usize {
    edges.iter().map(|e| e.from.max(e.to) + 1).max().unwrap_or(0)
}

fn adjacency_lists(n: usize, edges: &[Edge]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for (k, e) in edges.iter().enumerate() {
        adj[e.from].push(k);
    }
    for list in &mut adj {
        list.sort_by_key(|&k| edges[k].to);
    }
    adj
}

/// Returns the edge indices of one cycle, or `None` if the graph is acyclic.
/// Search order is by node index then target index, so the result is
/// deterministic.
fn find_cycle(n: usize, edges: &[Edge]) -> Option<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let adj = adjacency_lists(n, edges);
    let mut mark = vec![Mark::New; n];
    // (node, next adjacency slot); `via` holds the edge used to enter each frame.
    let mut stack: Vec<(usize, usize)> = Vec::new();
    let mut via: Vec<usize> = Vec::new();
    for root in 0..n {
        if mark[root] != Mark::New {
            continue;
        }
        mark[root] = Mark::Active;
        stack.push((root, 0));
        while let Some(&mut (node, ref mut slot)) = stack.last_mut() {
            if let Some(&k) = adj[node].get(*slot) {
                *slot += 1;
                let next = edges[k].to;
                match mark[next] {
                    Mark::New => {
                        mark[next] = Mark::Active;
                        stack.push((next, 0));
                        via.push(k);
                    }
                    Mark::Active => {
                        let start = stack.iter().position(|&(v, _)| v == next).unwrap();
                        let mut cycle: Vec<usize> = via[start..].to_vec();
                        cycle.push(k);
                        return Some(cycle);
                    }
                    Mark::Done => {}
                }
            } else {
                mark[node] = Mark::Done;
                stack.pop();
                via.pop();
            }
        }
    }
    None
}

fn weakest(edges: &[Edge], candidates: &[usize]) -> usize {
    *candidates
        .iter()
        .min_by(|&&a, &&b| {
            let (ea, eb) = (&edges[a], &edges[b]);
            ea.p.partial_cmp(&eb.p).unwrap_or(Ordering::Equal).then(ea.key().cmp(&eb.key()))
        })
        .expect("a cycle has at least one edge")
}

fn reaches(n: usize, edges: &[Edge], from: usize, to: usize) -> bool {
    let adj = adjacency_lists(n, edges);
    let mut seen = vec![false; n];
    let mut todo = vec![from];
    while let Some(v) = todo.pop() {
        if v == to {
            return true;
        }
        if std::mem::replace(&mut seen[v], true) {
            continue;
        }
        todo.extend(adj[v].iter().map(|&k| edges[k].to));
    }
    false
}

/// Repairs a thresholded edge set into a DAG.
///
/// While a cycle exists, its lowest-probability edge is dropped (ties go to
/// the lexicographically smallest `(from, to)`). Dropped edges are then
/// offered back in descending probability order and kept whenever they no
/// longer close a cycle, so the result is a maximal acyclic subset.
pub fn break_cycles(edges: &[Edge]) -> Vec<Edge> {
    let n = node_count(edges);
    let mut kept: Vec<Edge> = edges.to_vec();
    let mut removed = Vec::new();
    while let Some(cycle) = find_cycle(n, &kept) {
        let k = weakest(&kept, &cycle);
        removed.push(kept.remove(k));
    }
    removed.sort_by(|a, b| b.p.partial_cmp(&a.p).unwrap_or(Ordering::Equal).then(a.key().cmp(&b.key())));
    for e in removed {
        if !reaches(n, &kept, e.to, e.from) {
            kept.push(e);
        }
    }
    kept.sort_by_key(Edge::key);
    kept
}

/// Kahn's algorithm, always releasing the smallest ready index first.
pub fn schedule(edges: &[Edge], n: usize) -> Result<Vec<usize>> {
    let mut indegree = vec![0usize; n];
    let mut out = vec![Vec::new(); n];
    for e in edges {
        if e.from >= n || e.to >= n {
            return Err(CardError::IndexOutOfRange { index: e.from.max(e.to), n });
        }
        if e.from == e.to {
            return Err(CardError::CycleDetected);
        }
        indegree[e.to] += 1;
        out[e.from].push(e.to);
    }
    let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&v| indegree[v] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(v)) = ready.pop() {
        order.push(v);
        for &w in &out[v] {
            indegree[w] -= 1;
            if indegree[w] == 0 {
                ready.push(Reverse(w));
            }
        }
    }
    if order.len() != n {
        return Err(CardError::CycleDetected);
    }
    Ok(order)
}

/// Executable, acyclic communication graph with its schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct CommTopology {
    n: usize,
    edges: Vec<Edge>,
    schedule: Vec<usize>,
}

impl CommTopology {
    /// Fails with `CycleDetected` if `edges` is not a DAG.
    pub fn new(n: usize, mut edges: Vec<Edge>) -> Result<Self> {
        edges.sort_by_key(Edge::key);
        if edges.windows(2).any(|w| w[0].key() == w[1].key()) {
            return Err(CardError::Invalid("duplicate edge".into()));
        }
        let schedule = schedule(&edges, n)?;
        Ok(CommTopology { n, edges, schedule })
    }

    pub fn empty(n: usize) -> Self {
        CommTopology { n, edges: Vec::new(), schedule: (0..n).collect() }
    }

    /// threshold, then repair, then schedule.
    pub fn from_matrix(s: &EdgeProbabilityMatrix, tau: f64) -> Result<Self> {
        let edges = break_cycles(&threshold(s, tau)?);
        Self::new(s.n(), edges)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn schedule(&self) -> &[usize] {
        &self.schedule
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.binary_search_by_key(&(from, to), Edge::key).is_ok()
    }

    pub fn in_neighbors(&self, j: usize) -> Result<Vec<usize>> {
        if j >= self.n {
            return Err(CardError::IndexOutOfRange { index: j, n: self.n });
        }
        Ok(self.edges.iter().filter(|e| e.to == j).map(|e| e.from).collect())
    }

    /// Stable text rendering: edge list then schedule.
    pub fn render(&self, labels: Option<&[String]>) -> String {
        let name = |i: usize| match labels {
            Some(l) => l[i].clone(),
            None => i.to_string(),
        };
        let mut out = String::new();
        writeln!(out, "edges {}", self.edges.len()).unwrap();
        for e in &self.edges {
            writeln!(out, "{} -> {} {:.2}", name(e.from), name(e.to), e.p).unwrap();
        }
        let order: Vec<String> = self.schedule.iter().map(|&i| name(i)).collect();
        writeln!(out, "schedule {}", order.join(", ")).unwrap();
        out
    }
}

pub fn in_neighbors(topology: &CommTopology, j: usize) -> Result<Vec<usize>> {
    topology.in_neighbors(j)
}

/// Matrix plus optional agent labels, as stored in the text formats.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledMatrix {
    pub labels: Vec<String>,
    pub matrix: EdgeProbabilityMatrix,
}

impl LabeledMatrix {
    pub fn unlabeled(matrix: EdgeProbabilityMatrix) -> Self {
        let labels = (0..matrix.n()).map(|i| format!("Agent {i}")).collect();
        LabeledMatrix { labels, matrix }
    }
}

/// Table layout: `&`-separated cells, `\\` row terminators, 2-decimal
/// probabilities and `Masked` on the diagonal.
pub fn to_grid(m: &LabeledMatrix) -> String {
    let n = m.matrix.n();
    let mut out = String::new();
    out.push(' ');
    for l in &m.labels {
        write!(out, " & {l}").unwrap();
    }
    out.push_str(" \\\\\n");
    for i in 0..n {
        out.push_str(&m.labels[i]);
        for j in 0..n {
            if i == j {
                out.push_str(" & Masked");
            } else {
                write!(out, " & {:.2}", m.matrix.get(i, j)).unwrap();
            }
        }
        out.push_str(" \\\\\n");
    }
    out
}

/// Machine layout: whitespace-separated row-major decimals at full
/// precision, diagonal written as `0.00`.
pub fn to_machine(m: &EdgeProbabilityMatrix) -> String {
    let n = m.n();
    let mut out = String::new();
    for i in 0..n {
        let row: Vec<String> =
            (0..n).map(|j| if i == j { "0.00".to_string() } else { format!("{}", m.get(i, j)) }).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

fn strip_markup(cell: &str) -> &str {
    let c = cell.trim();
    c.strip_prefix("\\textbf{").and_then(|r| r.strip_suffix('}')).map(str::trim).unwrap_or(c)
}

/// Parses either layout. Blank lines and `#` comments are skipped.
pub fn parse_matrix(text: &str, origin: &str) -> Result<LabeledMatrix> {
    let mut labels: Option<Vec<String>> = None;
    let mut row_labels = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let body = line.strip_suffix("\\\\").unwrap_or(line).trim_end();
        let (label, cells): (Option<String>, Vec<(usize, &str)>) = if body.contains('&') {
            let mut parts = Vec::new();
            let mut offset = raw.len() - raw.trim_start().len();
            for piece in body.split('&') {
                parts.push((offset + 1 + piece.len() - piece.trim_start().len(), piece));
                offset += piece.len() + 1;
            }
            let first = strip_markup(parts[0].1).to_string();
            if first.is_empty() && rows.is_empty() && labels.is_none() {
                labels = Some(parts[1..].iter().map(|(_, c)| strip_markup(c).to_string()).collect());
                continue;
            }
            (Some(first), parts[1..].to_vec())
        } else {
            let mut cells = Vec::new();
            let mut pos = 0;
            for tok in body.split_whitespace() {
                let at = body[pos..].find(tok).unwrap() + pos;
                cells.push((at + 1 + (raw.len() - raw.trim_start().len()), tok));
                pos = at + tok.len();
            }
            (None, cells)
        };
        let i = rows.len();
        let mut row = Vec::with_capacity(cells.len());
        for (j, (col, cell)) in cells.iter().enumerate() {
            let cell = strip_markup(cell);
            if cell.eq_ignore_ascii_case("masked") {
                if i != j {
                    return Err(CardError::parse(origin, line_no, *col, "`Masked` off the diagonal"));
                }
                row.push(0.0);
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| CardError::parse(origin, line_no, *col, format!("`{cell}` is not a number")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(CardError::parse(origin, line_no, *col, format!("{v} is not a probability")));
            }
            if i == j && v != 0.0 {
                return Err(CardError::parse(origin, line_no, *col, "diagonal must be masked or zero"));
            }
            row.push(v);
        }
        row_labels.push(label.unwrap_or_else(|| format!("Agent {i}")));
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 {
        return Err(CardError::parse(origin, 1, 1, "no matrix rows"));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != n {
            return Err(CardError::parse(
                origin,
                i + 1,
                1,
                format!("row {} has {} cells, expected {n}", i + 1, r.len()),
            ));
        }
    }
    let labels = match labels {
        Some(l) if l.len() == n => l,
        Some(l) => return Err(CardError::parse(origin, 1, 1, format!("{} header labels for {n} rows", l.len()))),
        None => row_labels,
    };
    let matrix = EdgeProbabilityMatrix::from_rows(&rows)?;
    Ok(LabeledMatrix { labels, matrix })
}
