//! Ordinal structure over the class set.
//!
//! A [`ClassOrder`] is either the total order `0 ≺ 1 ≺ … ≺ K-1` or a partial
//! order given by its Hasse diagram (edge `(m, n)` means `m` is immediately
//! below `n`). Everything the losses and metrics need from the order is
//! derived here: shortest path lengths, the contact cost matrix, the
//! ascending/descending pair sets used by the unimodality margin term and
//! the maximal chains used by the unimodal-pixel metric.
//!
//! Class indices are 0-based.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassOrder {
    num_classes: usize,
    edges: Vec<(usize, usize)>,
    chain: bool,
    class_names: Option<Vec<String>>,
    lengths: PathLengthTable,
}

/// `lengths[m][n]` is the shortest directed path length from `m` to `n`,
/// or 0 when `n` is not reachable from `m`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathLengthTable {
    num_classes: usize,
    lengths: Vec<usize>,
}

impl PathLengthTable {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, from: usize, to: usize) -> usize {
        self.lengths[from * self.num_classes + to]
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        self.lengths
            .chunks(self.num_classes)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// Symmetric K×K penalty for two classes meeting at neighbouring pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    num_classes: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.costs[a * self.num_classes + b]
    }

    pub fn max_cost(&self) -> f64 {
        self.costs.iter().copied().fold(0.0, f64::max)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.costs
            .chunks(self.num_classes)
            .map(<[f64]>::to_vec)
            .collect()
    }
}

/// Pairs `(k, k')` penalised as `ReLU(margin + p_k - p_k')` for one
/// ground-truth class.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OrdinalPairs {
    /// Edges below the ground truth, oriented upwards.
    pub ascending: Vec<(usize, usize)>,
    /// Edges above the ground truth, oriented downwards.
    pub descending: Vec<(usize, usize)>,
}

impl ClassOrder {
    /// The total order over `num_classes` classes.
    pub fn chain(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("class order", "at least one class is required"));
        }
        let edges = (1..num_classes).map(|k| (k - 1, k)).collect();
        let lengths = (0..num_classes * num_classes)
            .map(|idx| {
                let (m, n) = (idx / num_classes, idx % num_classes);
                n.saturating_sub(m)
            })
            .collect();
        Ok(ClassOrder {
            num_classes,
            edges,
            chain: true,
            class_names: None,
            lengths: PathLengthTable {
                num_classes,
                lengths,
            },
        })
    }

    /// A partial order given by the edges of its Hasse diagram.
    ///
    /// Edges are stored sorted; duplicate edges, out-of-range classes and
    /// cycles are rejected. The resulting order always goes through the
    /// graph routines, even when the edges happen to form a chain.
    pub fn from_edges<I>(num_classes: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        if num_classes == 0 {
            return Err(Error::invalid("class order", "at least one class is required"));
        }
        let mut seen = BTreeSet::new();
        for (m, n) in edges {
            if m >= num_classes || n >= num_classes {
                return Err(Error::invalid(
                    "class order",
                    format!("edge ({m}, {n}) references a class outside 0..{num_classes}"),
                ));
            }
            if !seen.insert((m, n)) {
                return Err(Error::invalid(
                    "class order",
                    format!("duplicate edge ({m}, {n})"),
                ));
            }
        }
        let edges: Vec<_> = seen.into_iter().collect();
        let adjacency = adjacency(num_classes, &edges);
        if let Some(cycle) = find_cycle(&adjacency) {
            return Err(Error::Cycle(cycle));
        }
        let lengths = bfs_lengths(&adjacency);
        Ok(ClassOrder {
            num_classes,
            edges,
            chain: false,
            class_names: None,
            lengths,
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_classes {
            return Err(Error::invalid(
                "class names",
                format!("expected {} names, got {}", self.num_classes, names.len()),
            ));
        }
        self.class_names = Some(names);
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn is_chain(&self) -> bool {
        self.chain
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn class_name(&self, class: usize) -> String {
        match &self.class_names {
            Some(names) => names[class].clone(),
            None => class.to_string(),
        }
    }

    pub fn path_lengths(&self) -> &PathLengthTable {
        &self.lengths
    }

    /// `true` when `to` is reachable from `from` (reflexive).
    pub fn reaches(&self, from: usize, to: usize) -> bool {
        from == to || self.lengths.get(from, to) > 0
    }

    pub fn cost_matrix(&self) -> CostMatrix {
        let k = self.num_classes;
        let costs = (0..k * k)
            .map(|idx| {
                let (a, b) = (idx / k, idx % k);
                let distance = if self.chain {
                    a.abs_diff(b)
                } else {
                    self.lengths.get(a, b).max(self.lengths.get(b, a))
                };
                distance.saturating_sub(1) as f64
            })
            .collect();
        CostMatrix {
            num_classes: k,
            costs,
        }
    }

    /// Ordinal distance between two labels, `None` for distinct
    /// incomparable labels.
    pub fn jump(&self, a: usize, b: usize) -> Option<usize> {
        if a == b {
            return Some(0);
        }
        if self.chain {
            return Some(a.abs_diff(b));
        }
        match self.lengths.get(a, b).max(self.lengths.get(b, a)) {
            0 => None,
            d => Some(d),
        }
    }

    /// A neighbouring pair of labels is ordinally valid when they are equal
    /// or one step apart.
    pub fn is_valid_jump(&self, a: usize, b: usize) -> bool {
        matches!(self.jump(a, b), Some(d) if d <= 1)
    }

    pub fn ordinal_pair_sets(&self, ground_truth: usize) -> Result<OrdinalPairs> {
        if ground_truth >= self.num_classes {
            return Err(Error::invalid(
                "ground truth",
                format!("class {ground_truth} outside 0..{}", self.num_classes),
            ));
        }
        let y = ground_truth;
        if self.chain {
            return Ok(OrdinalPairs {
                ascending: (0..y).map(|k| (k, k + 1)).collect(),
                descending: (y..self.num_classes - 1).map(|k| (k + 1, k)).collect(),
            });
        }
        // An edge lies on a maximal path through y iff its head reaches y or
        // y reaches its tail; both cannot hold in an acyclic graph.
        let mut pairs = OrdinalPairs::default();
        for &(m, n) in &self.edges {
            if self.reaches(n, y) {
                pairs.ascending.push((m, n));
            } else if self.reaches(y, m) {
                pairs.descending.push((n, m));
            }
        }
        Ok(pairs)
    }

    /// Every source-to-sink path of the Hasse diagram, in lexicographic order.
    pub fn maximal_chains(&self) -> Vec<Vec<usize>> {
        if self.chain {
            return vec![(0..self.num_classes).collect()];
        }
        let adjacency = adjacency(self.num_classes, &self.edges);
        let mut has_parent = vec![false; self.num_classes];
        for &(_, n) in &self.edges {
            has_parent[n] = true;
        }
        let mut chains = Vec::new();
        let mut path = Vec::new();
        for source in (0..self.num_classes).filter(|&c| !has_parent[c]) {
            walk_paths(source, &adjacency, &mut path, &mut chains);
        }
        chains
    }

    pub fn to_order_file(&self) -> String {
        self.to_string()
    }

    /// Either `chain:K` or the text of an order file.
    pub fn from_spec(spec: &str) -> Result<Self> {
        match spec.trim().strip_prefix("chain:") {
            Some(k) => {
                let k = k.trim().parse::<usize>().map_err(|_| {
                    Error::invalid("order spec", format!("`{k}` is not a class count"))
                })?;
                ClassOrder::chain(k)
            }
            None => spec.parse(),
        }
    }
}

fn walk_paths(
    node: usize,
    adjacency: &[Vec<usize>],
    path: &mut Vec<usize>,
    out: &mut Vec<Vec<usize>>,
) {
    path.push(node);
    if adjacency[node].is_empty() {
        out.push(path.clone());
    } else {
        for &next in &adjacency[node] {
            walk_paths(next, adjacency, path, out);
        }
    }
    path.pop();
}

fn adjacency(num_classes: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adjacency = vec![Vec::new(); num_classes];
    for &(m, n) in edges {
        adjacency[m].push(n);
    }
    for targets in &mut adjacency {
        targets.sort_unstable();
    }
    adjacency
}

fn find_cycle(adjacency: &[Vec<usize>]) -> Option<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Open,
        Done,
    }
    let mut marks = vec![Mark::New; adjacency.len()];
    for root in 0..adjacency.len() {
        if marks[root] != Mark::New {
            continue;
        }
        // (node, index of next child to visit)
        let mut stack = vec![(root, 0usize)];
        marks[root] = Mark::Open;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            if let Some(&child) = adjacency[node].get(*next) {
                *next += 1;
                match marks[child] {
                    Mark::New => {
                        marks[child] = Mark::Open;
                        stack.push((child, 0));
                    }
                    Mark::Open => {
                        let start = stack.iter().position(|&(n, _)| n == child).unwrap();
                        return Some(stack[start..].iter().map(|&(n, _)| n).collect());
                    }
                    Mark::Done => {}
                }
            } else {
                marks[node] = Mark::Done;
                stack.pop();
            }
        }
    }
    None
}

fn bfs_lengths(adjacency: &[Vec<usize>]) -> PathLengthTable {
    let k = adjacency.len();
    let mut lengths = vec![0; k * k];
    let mut queue = VecDeque::new();
    for source in 0..k {
        let mut dist = vec![usize::MAX; k];
        dist[source] = 0;
        queue.push_back(source);
        while let Some(node) = queue.pop_front() {
            for &next in &adjacency[node] {
                if dist[next] == usize::MAX {
                    dist[next] = dist[node] + 1;
                    queue.push_back(next);
                }
            }
        }
        for (target, &d) in dist.iter().enumerate() {
            if d != usize::MAX {
                lengths[source * k + target] = d;
            }
        }
    }
    PathLengthTable {
        num_classes: k,
        lengths,
    }
}

impl fmt::Display for ClassOrder {
    /// Canonical order-file text.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "classes {}", self.num_classes)?;
        if let Some(names) = &self.class_names {
            for (idx, name) in names.iter().enumerate() {
                writeln!(f, "name {idx} {name}")?;
            }
        }
        if !self.chain {
            for (m, n) in &self.edges {
                writeln!(f, "edge {m} {n}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for ClassOrder {
    type Err = Error;

    /// Parses the order file format:
    ///
    /// ```text
    /// classes 4
    /// name 0 background
    /// edge 0 1
    /// ```
    ///
    /// Blank lines and `#` comments are ignored. A file without `edge` lines
    /// is the chain order. Names are optional but must cover every class
    /// when present.
    fn from_str(text: &str) -> Result<Self> {
        let syntax = |line: usize, message: String| Error::OrderSyntax { line, message };
        let parse_index = |line: usize, token: Option<&str>, what: &str| -> Result<usize> {
            let token = token.ok_or_else(|| syntax(line, format!("missing {what}")))?;
            token
                .parse::<usize>()
                .map_err(|_| syntax(line, format!("{what} `{token}` is not a non-negative integer")))
        };

        let mut num_classes = None;
        let mut names: Vec<Option<String>> = Vec::new();
        let mut edges = Vec::new();
        let mut edge_set = BTreeSet::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (keyword, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let rest = rest.trim_start();
            match keyword {
                "classes" => {
                    if num_classes.is_some() {
                        return Err(syntax(line_no, "repeated `classes` line".into()));
                    }
                    let k = parse_index(line_no, rest.split_whitespace().next(), "class count")?;
                    if k == 0 {
                        return Err(syntax(line_no, "class count must be positive".into()));
                    }
                    num_classes = Some(k);
                    names = vec![None; k];
                }
                "name" | "edge" => {
                    let k = num_classes
                        .ok_or_else(|| syntax(line_no, "`classes` must come first".into()))?;
                    if keyword == "name" {
                        let (idx_tok, name) =
                            rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
                        let class = parse_index(line_no, Some(idx_tok).filter(|t| !t.is_empty()), "class index")?;
                        if class >= k {
                            return Err(syntax(line_no, format!("class {class} outside 0..{k}")));
                        }
                        if names[class].is_some() {
                            return Err(syntax(line_no, format!("class {class} named twice")));
                        }
                        names[class] = Some(name.trim().to_string());
                    } else {
                        let mut tokens = rest.split_whitespace();
                        let m = parse_index(line_no, tokens.next(), "edge source")?;
                        let n = parse_index(line_no, tokens.next(), "edge target")?;
                        if tokens.next().is_some() {
                            return Err(syntax(line_no, "trailing tokens after edge".into()));
                        }
                        if m >= k || n >= k {
                            return Err(syntax(line_no, format!("edge ({m}, {n}) outside 0..{k}")));
                        }
                        if !edge_set.insert((m, n)) {
                            return Err(syntax(line_no, format!("duplicate edge ({m}, {n})")));
                        }
                        edges.push((m, n));
                    }
                }
                other => return Err(syntax(line_no, format!("unknown keyword `{other}`"))),
            }
        }

        let k = num_classes.ok_or_else(|| syntax(0, "missing `classes` line".into()))?;
        let order = if edges.is_empty() {
            ClassOrder::chain(k)?
        } else {
            ClassOrder::from_edges(k, edges)?
        };
        if names.iter().all(Option::is_none) {
            return Ok(order);
        }
        let names = names
            .into_iter()
            .enumerate()
            .map(|(class, name)| {
                name.ok_or_else(|| syntax(0, format!("class {class} has no name while others do")))
            })
            .collect::<Result<Vec<_>>>()?;
        order.with_names(names)
    }
}
