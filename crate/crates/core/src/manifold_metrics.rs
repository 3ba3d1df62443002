//! Estimates of the data-manifold metric: Isomap distances over a k-NN
//! graph, and a composite sequence metric built from edit distance and
//! residue properties.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::euclidean;
use crate::numerics::Tensor;
use crate::persist;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Isomap { k: usize },
    Custom { terms: Vec<String> },
    File { path: String },
}

/// Dense symmetric matrix of non-negative distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
    pub provenance: Provenance,
}

/// Metadata written next to the binary matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSidecar {
    pub n: usize,
    pub provenance: Provenance,
    pub dataset_hash: Option<String>,
    pub payload_sha256: String,
}

impl DistanceMatrix {
    pub fn from_dense(n: usize, data: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::shape("distance_matrix", format!("{} entries for n = {n}", data.len())));
        }
        let m = Self { n, data, provenance };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let n = self.n;
        for i in 0..n {
            if self.get(i, i) != 0.0 {
                return Err(Error::Input(format!("nonzero diagonal at {i}")));
            }
            for j in 0..i {
                let v = self.get(i, j);
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Input(format!("invalid distance {v} at ({i}, {j})")));
                }
                if v != self.get(j, i) {
                    return Err(Error::Input(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::from_rows(self.n, self.n, self.data.clone()).expect("square")
    }

    /// Block `D[idx, idx]`.
    pub fn restrict(&self, idx: &[usize]) -> Tensor {
        let b = idx.len();
        let mut out = Vec::with_capacity(b * b);
        for &i in idx {
            for &j in idx {
                out.push(self.get(i, j));
            }
        }
        Tensor::from_rows(b, b, out).expect("square")
    }

    /// Little-endian `u64` n followed by the strictly lower triangle, row by
    /// row.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.n * self.n);
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        for i in 1..self.n {
            for j in 0..i {
                out.extend_from_slice(&self.get(i, j).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], provenance: Provenance) -> Result<Self> {
        let bad = |m: &str| Error::Input(format!("distance matrix bytes: {m}"));
        if bytes.len() < 8 {
            return Err(bad("missing header"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let tri = n * n.saturating_sub(1) / 2;
        if bytes.len() != 8 + 8 * tri {
            return Err(bad("length does not match n"));
        }
        let mut data = vec![0.0; n * n];
        let mut off = 8;
        for i in 1..n {
            for j in 0..i {
                let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
                off += 8;
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        Self::from_dense(n, data, provenance)
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".json");
        path.with_file_name(name)
    }

    pub fn save(&self, path: impl AsRef<Path>, dataset_hash: Option<String>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes();
        let side = DistanceSidecar {
            n: self.n,
            provenance: self.provenance.clone(),
            dataset_hash,
            payload_sha256: persist::sha256_hex(&bytes),
        };
        persist::write_atomic(path, &bytes)?;
        persist::write_json(Self::sidecar_path(path), &side)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, DistanceSidecar)> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let side: DistanceSidecar = persist::read_json(Self::sidecar_path(path))?;
        if persist::sha256_hex(&bytes) != side.payload_sha256 {
            return Err(Error::format(path, "payload hash does not match sidecar"));
        }
        let m = Self::from_bytes(&bytes, side.provenance.clone())?;
        if m.n != side.n {
            return Err(Error::format(path, "sidecar n does not match payload"));
        }
        Ok((m, side))
    }
}

/// Symmetrised k-nearest-neighbour graph with Euclidean edge weights.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub k: usize,
    /// Sorted by neighbour index.
    pub neighbors: Vec<Vec<(usize, f64)>>,
}

impl KnnGraph {
    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search_by(|e| e.0.cmp(&j)).is_ok()
    }

    /// Connected components, each listed in ascending node order.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.n();
        let mut label = vec![usize::MAX; n];
        let mut comps = Vec::new();
        for s in 0..n {
            if label[s] != usize::MAX {
                continue;
            }
            let c = comps.len();
            let mut stack = vec![s];
            let mut members = Vec::new();
            label[s] = c;
            while let Some(u) = stack.pop() {
                members.push(u);
                for &(v, _) in &self.neighbors[u] {
                    if label[v] == usize::MAX {
                        label[v] = c;
                        stack.push(v);
                    }
                }
            }
            members.sort_unstable();
            comps.push(members);
        }
        comps
    }
}

/// The `k` nearest other points of each row, ties broken by lower index; an
/// edge is kept when either endpoint lists the other.
pub fn knn_graph(points: &Tensor, k: usize) -> Result<KnnGraph> {
    let n = points.rows();
    if k < 1 || k >= n {
        return Err(Error::Domain(format!("k must be in 1..{n}, got {k}")));
    }
    let mut adj: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
    for i in 0..n {
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (euclidean(points.row(i), points.row(j)), j))
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(w, j) in &cand[..k] {
            adj[i].insert(j, w);
            adj[j].insert(i, w);
        }
    }
    Ok(KnnGraph {
        k,
        neighbors: adj.into_iter().map(|m| m.into_iter().collect()).collect(),
    })
}

#[derive(Copy, Clone, PartialEq)]
struct Frontier {
    dist: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dijkstra(graph: &KnnGraph, source: usize) -> (Vec<f64>, Vec<usize>) {
    let n = graph.n();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    pred[source] = source;
    heap.push(Frontier { dist: 0.0, node: source });
    while let Some(Frontier { dist: d, node: u }) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &graph.neighbors[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                pred[v] = u;
                heap.push(Frontier { dist: nd, node: v });
            }
        }
    }
    (dist, pred)
}

/// All-pairs shortest paths with predecessor rows for path recovery.
#[derive(Debug, Clone)]
pub struct ShortestPaths {
    pub distances: DistanceMatrix,
    pred: Vec<Vec<usize>>,
}

impl ShortestPaths {
    /// Vertices from `i` to `j` inclusive.
    pub fn path(&self, i: usize, j: usize) -> Vec<usize> {
        let row = &self.pred[i];
        let mut out = vec![j];
        let mut v = j;
        while v != i {
            v = row[v];
            out.push(v);
        }
        out.reverse();
        out
    }
}

fn check_connected(graph: &KnnGraph) -> Result<()> {
    let comps = graph.components();
    if comps.len() > 1 {
        return Err(Error::Disconnected {
            n_components: comps.len(),
            sizes: comps.iter().map(Vec::len).collect(),
            k: graph.k,
        });
    }
    Ok(())
}

pub fn shortest_paths(graph: &KnnGraph) -> Result<ShortestPaths> {
    check_connected(graph)?;
    let n = graph.n();
    let rows: Vec<(Vec<f64>, Vec<usize>)> =
        (0..n).into_par_iter().map(|s| dijkstra(graph, s)).collect();
    let mut data = Vec::with_capacity(n * n);
    let mut pred = Vec::with_capacity(n);
    for (d, p) in rows {
        data.extend(d);
        pred.push(p);
    }
    // Floating-point path sums can differ by an ulp between directions.
    for i in 0..n {
        for j in 0..i {
            let v = data[i * n + j].min(data[j * n + i]);
            data[i * n + j] = v;
            data[j * n + i] = v;
        }
    }
    let distances = DistanceMatrix::from_dense(n, data, Provenance::Isomap { k: graph.k })?;
    Ok(ShortestPaths { distances, pred })
}

/// All-pairs graph distances (Dijkstra from every source).
pub fn graph_geodesics(graph: &KnnGraph) -> Result<DistanceMatrix> {
    Ok(shortest_paths(graph)?.distances)
}

/// Unit-cost edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Ionisable-group constants for charge calculations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PkaTable {
    pub n_term: f64,
    pub c_term: f64,
    pub positive: BTreeMap<char, f64>,
    pub negative: BTreeMap<char, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyTables {
    pub hydrophobicity: BTreeMap<char, f64>,
    pub moment_angle_deg: f64,
    pub ph: f64,
    pub pka: PkaTable,
}

const CANONICAL: &str = "ACDEFGHIKLMNPQRSTVWY";

impl PropertyTables {
    /// Tables shipped in `configs/properties.json`.
    pub fn standard() -> Self {
        serde_json::from_str(include_str!("../../../configs/properties.json"))
            .expect("bundled property tables parse")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let t: Self = persist::read_json(&path)?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for c in CANONICAL.chars() {
            if !self.hydrophobicity.contains_key(&c) {
                return Err(Error::Config {
                    field: "hydrophobicity".into(),
                    reason: format!("missing residue {c}"),
                });
            }
        }
        let all = self
            .hydrophobicity
            .values()
            .chain(self.pka.positive.values())
            .chain(self.pka.negative.values())
            .chain([&self.pka.n_term, &self.pka.c_term, &self.ph, &self.moment_angle_deg]);
        for v in all {
            if !v.is_finite() {
                return Err(Error::Config {
                    field: "properties".into(),
                    reason: "non-finite table entry".into(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropertyKind {
    TableMean,
    HydrophobicMoment,
    NetCharge,
    IsoelectricPoint,
}

impl PropertyKind {
    pub const ALL: [PropertyKind; 4] = [
        PropertyKind::TableMean,
        PropertyKind::HydrophobicMoment,
        PropertyKind::NetCharge,
        PropertyKind::IsoelectricPoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PropertyKind::TableMean => "hydrophobicity",
            PropertyKind::HydrophobicMoment => "hydrophobic_moment",
            PropertyKind::NetCharge => "charge",
            PropertyKind::IsoelectricPoint => "isoelectric_point",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyEvaluator {
    pub kind: PropertyKind,
    pub tables: PropertyTables,
}

const PI_TOLERANCE: f64 = 1e-4;

impl PropertyEvaluator {
    pub fn new(kind: PropertyKind, tables: PropertyTables) -> Self {
        Self { kind, tables }
    }

    pub fn standard_set(tables: &PropertyTables) -> Vec<PropertyEvaluator> {
        PropertyKind::ALL
            .iter()
            .map(|&k| PropertyEvaluator::new(k, tables.clone()))
            .collect()
    }

    fn scale(&self, seq: &str) -> Result<Vec<f64>> {
        seq.chars()
            .map(|c| {
                self.tables
                    .hydrophobicity
                    .get(&c)
                    .copied()
                    .ok_or_else(|| Error::Input(format!("unknown residue `{c}`")))
            })
            .collect()
    }

    fn charge_at(&self, seq: &str, ph: f64) -> f64 {
        let p = &self.tables.pka;
        let pos = |pka: f64| 1.0 / (1.0 + 10f64.powf(ph - pka));
        let neg = |pka: f64| 1.0 / (1.0 + 10f64.powf(pka - ph));
        let mut q = pos(p.n_term) - neg(p.c_term);
        for c in seq.chars() {
            if let Some(&v) = p.positive.get(&c) {
                q += pos(v);
            }
            if let Some(&v) = p.negative.get(&c) {
                q -= neg(v);
            }
        }
        q
    }

    pub fn evaluate(&self, seq: &str) -> Result<f64> {
        let h = self.scale(seq)?;
        Ok(match self.kind {
            PropertyKind::TableMean => {
                if h.is_empty() {
                    0.0
                } else {
                    h.iter().sum::<f64>() / h.len() as f64
                }
            }
            PropertyKind::HydrophobicMoment => {
                let delta = self.tables.moment_angle_deg.to_radians();
                let (mut re, mut im) = (0.0, 0.0);
                for (n, v) in h.iter().enumerate() {
                    let a = n as f64 * delta;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                re.hypot(im)
            }
            PropertyKind::NetCharge => self.charge_at(seq, self.tables.ph),
            PropertyKind::IsoelectricPoint => {
                // Net charge decreases monotonically in pH.
                let (mut lo, mut hi) = (0.0, 14.0);
                while hi - lo > PI_TOLERANCE {
                    let mid = 0.5 * (lo + hi);
                    if self.charge_at(seq, mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        })
    }
}

pub fn property_distance(ev: &PropertyEvaluator, a: &str, b: &str) -> Result<f64> {
    Ok((ev.evaluate(a)? - ev.evaluate(b)?).abs())
}

/// Edit distance plus property differences, each divided by its maximum over
/// all training pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeMetric {
    evaluators: Vec<PropertyEvaluator>,
    levenshtein_max: Option<f64>,
    property_max: Vec<Option<f64>>,
}

impl CompositeMetric {
    pub fn fit(evaluators: Vec<PropertyEvaluator>, train: &[String]) -> Result<Self> {
        let n = train.len();
        let chars: Vec<Vec<char>> = train.iter().map(|s| s.chars().collect()).collect();
        let lev_max = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..i)
                    .map(|j| levenshtein(&chars[i], &chars[j]))
                    .max()
                    .unwrap_or(0)
            })
            .max()
            .unwrap_or(0) as f64;
        let mut property_max = Vec::with_capacity(evaluators.len());
        for ev in &evaluators {
            let vals = train
                .iter()
                .map(|s| ev.evaluate(s))
                .collect::<Result<Vec<_>>>()?;
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let span = if vals.is_empty() { 0.0 } else { hi - lo };
            property_max.push(nonzero(span, ev.kind.name()));
        }
        Ok(Self {
            evaluators,
            levenshtein_max: nonzero(lev_max, "levenshtein"),
            property_max,
        })
    }

    pub fn term_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.levenshtein_max.is_some() {
            names.push("levenshtein".to_string());
        }
        for (ev, m) in self.evaluators.iter().zip(&self.property_max) {
            if m.is_some() {
                names.push(ev.kind.name().to_string());
            }
        }
        names
    }

    /// Standardised values of the active terms, in [`Self::term_names`]
    /// order.
    pub fn terms(&self, a: &str, b: &str) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        if let Some(m) = self.levenshtein_max {
            let ca: Vec<char> = a.chars().collect();
            let cb: Vec<char> = b.chars().collect();
            out.push(levenshtein(&ca, &cb) as f64 / m);
        }
        for (ev, m) in self.evaluators.iter().zip(&self.property_max) {
            if let Some(m) = m {
                out.push(property_distance(ev, a, b)? / m);
            }
        }
        Ok(out)
    }

    pub fn distance(&self, a: &str, b: &str) -> Result<f64> {
        Ok(self.terms(a, b)?.iter().sum())
    }

    pub fn distance_matrix(&self, seqs: &[String]) -> Result<DistanceMatrix> {
        let n = seqs.len();
        let rows = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..i)
                    .map(|j| self.distance(&seqs[i], &seqs[j]))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut data = vec![0.0; n * n];
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        DistanceMatrix::from_dense(n, data, Provenance::Custom { terms: self.term_names() })
    }
}

fn nonzero(max: f64, name: &str) -> Option<f64> {
    if max > 0.0 {
        Some(max)
    } else {
        log::warn!("metric term `{name}` is constant on the training set; skipping it");
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn line(n: usize) -> Tensor {
        Tensor::from_rows(n, 1, (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn collinear_k1() {
        let g = knn_graph(&line(3), 1).unwrap();
        assert!(g.has_edge(0, 1) && g.has_edge(1, 2) && !g.has_edge(0, 2));
        assert_eq!(graph_geodesics(&g).unwrap().get(0, 2), 2.0);
    }

    #[test]
    fn full_k_is_complete() {
        let mut rng = Rng::new(1);
        let x = rng.normal_tensor(6, 2);
        let g = knn_graph(&x, 5).unwrap();
        for i in 0..6 {
            assert_eq!(g.neighbors[i].len(), 5);
        }
        let d = graph_geodesics(&g).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let e = euclidean(x.row(i), x.row(j));
                assert!((d.get(i, j) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn knn_matches_brute_force_sort() {
        let mut rng = Rng::new(2);
        let x = rng.normal_tensor(20, 2);
        let g = knn_graph(&x, 3).unwrap();
        let mut want = vec![std::collections::BTreeSet::new(); 20];
        for i in 0..20 {
            let mut all: Vec<(f64, usize)> = Vec::new();
            for j in 0..20 {
                if j != i {
                    let dx = x.get(i, 0) - x.get(j, 0);
                    let dy = x.get(i, 1) - x.get(j, 1);
                    all.push(((dx * dx + dy * dy).sqrt(), j));
                }
            }
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for &(_, j) in &all[..3] {
                want[i].insert(j);
                want[j].insert(i);
            }
        }
        for i in 0..20 {
            let got: std::collections::BTreeSet<usize> = g.neighbors[i].iter().map(|e| e.0).collect();
            assert_eq!(got, want[i]);
        }
    }

    #[test]
    fn ties_prefer_lower_index() {
        // Points 0 and 2 are both at distance 1 from point 1.
        let g = knn_graph(&line(3), 1).unwrap();
        assert_eq!(g.neighbors[1], vec![(0, 1.0), (2, 1.0)]);
        let x = Tensor::from_rows(3, 1, vec![0.0, -1.0, 1.0]).unwrap();
        let g = knn_graph(&x, 1).unwrap();
        assert!(g.has_edge(0, 1) && !g.has_edge(1, 2));
        assert!(g.has_edge(2, 0));
    }

    #[test]
    fn disconnected_is_an_error() {
        let x = Tensor::from_rows(4, 1, vec![0.0, 1.0, 100.0, 101.0]).unwrap();
        let g = knn_graph(&x, 1).unwrap();
        match graph_geodesics(&g) {
            Err(Error::Disconnected { n_components, sizes, k }) => {
                assert_eq!((n_components, k), (2, 1));
                assert_eq!(sizes, vec![2, 2]);
            }
            other => panic!("{other:?}"),
        }
    }

    fn floyd_warshall(g: &KnnGraph) -> Vec<Vec<f64>> {
        let n = g.n();
        let mut d = vec![vec![f64::INFINITY; n]; n];
        for i in 0..n {
            d[i][i] = 0.0;
            for &(j, w) in &g.neighbors[i] {
                d[i][j] = w;
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if d[i][k] + d[k][j] < d[i][j] {
                        d[i][j] = d[i][k] + d[k][j];
                    }
                }
            }
        }
        d
    }

    #[test]
    fn dijkstra_equals_floyd_warshall() {
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            let x = rng.normal_tensor(15, 2);
            let g = knn_graph(&x, 4).unwrap();
            if g.components().len() > 1 {
                continue;
            }
            let sp = shortest_paths(&g).unwrap();
            let fw = floyd_warshall(&g);
            for i in 0..15 {
                for j in 0..15 {
                    assert!((sp.distances.get(i, j) - fw[i][j]).abs() <= 1e-12 * fw[i][j].max(1.0));
                    let path = sp.path(i, j);
                    assert_eq!((path[0], *path.last().unwrap()), (i, j));
                    let len: f64 = path.windows(2).map(|w| euclidean(x.row(w[0]), x.row(w[1]))).sum();
                    assert!((len - fw[i][j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn isomap_dominates_euclidean_and_is_metric() {
        let mut rng = Rng::new(11);
        let x = rng.normal_tensor(30, 2);
        let d = graph_geodesics(&knn_graph(&x, 6).unwrap()).unwrap();
        for i in 0..30 {
            for j in 0..30 {
                assert!(d.get(i, j) >= euclidean(x.row(i), x.row(j)) - 1e-12);
                for k in 0..30 {
                    assert!(d.get(i, k) <= d.get(i, j) + d.get(j, k) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn matrix_bytes_round_trip() {
        let mut rng = Rng::new(3);
        let x = rng.normal_tensor(9, 2);
        let d = graph_geodesics(&knn_graph(&x, 8).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        d.save(&p, Some("abc".into())).unwrap();
        let (back, side) = DistanceMatrix::load(&p).unwrap();
        assert_eq!(back, d);
        assert_eq!(side.dataset_hash.as_deref(), Some("abc"));
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 8 + 8 * 36);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[20] ^= 1;
        std::fs::write(&p, bytes).unwrap();
        assert!(DistanceMatrix::load(&p).is_err());
    }

    #[test]
    fn restrict_takes_block() {
        let d = DistanceMatrix::from_dense(
            3,
            vec![0.0, 1.0, 2.0, 1.0, 0.0, 3.0, 2.0, 3.0, 0.0],
            Provenance::File { path: "x".into() },
        )
        .unwrap();
        assert_eq!(d.restrict(&[2, 0]).data(), &[0.0, 2.0, 2.0, 0.0]);
        assert!(DistanceMatrix::from_dense(2, vec![0.0, 1.0, 2.0, 0.0], Provenance::Custom { terms: vec![] }).is_err());
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein(b"ACDE", b"ACDE"), 0);
        assert_eq!(levenshtein(b"", b"ACD"), 3);
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
    }

    /// Full DP table plus a traceback that replays the edit script on `a`.
    fn dp_oracle(a: &[u8], b: &[u8]) -> usize {
        let (n, m) = (a.len(), b.len());
        let mut t = vec![vec![0usize; m + 1]; n + 1];
        for i in 0..=n {
            t[i][0] = i;
        }
        for j in 0..=m {
            t[0][j] = j;
        }
        for i in 1..=n {
            for j in 1..=m {
                let c = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                t[i][j] = (t[i - 1][j - 1] + c).min(t[i - 1][j] + 1).min(t[i][j - 1] + 1);
            }
        }
        let (mut i, mut j) = (n, m);
        let mut ops = 0;
        let mut out: Vec<u8> = Vec::new();
        while i > 0 || j > 0 {
            if i > 0 && j > 0 && t[i][j] == t[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]) {
                ops += usize::from(a[i - 1] != b[j - 1]);
                out.push(b[j - 1]);
                i -= 1;
                j -= 1;
            } else if i > 0 && t[i][j] == t[i - 1][j] + 1 {
                ops += 1;
                i -= 1;
            } else {
                ops += 1;
                out.push(b[j - 1]);
                j -= 1;
            }
        }
        out.reverse();
        assert_eq!(out, b, "traceback must rebuild the target");
        assert_eq!(ops, t[n][m], "traceback cost must equal the table");
        t[n][m]
    }

    #[test]
    fn levenshtein_matches_dp_oracle() {
        let mut rng = Rng::new(5);
        let alpha = b"ACDE";
        for _ in 0..50 {
            let la = rng.below(13);
            let lb = rng.below(13);
            let a: Vec<u8> = (0..la).map(|_| alpha[rng.below(4)]).collect();
            let b: Vec<u8> = (0..lb).map(|_| alpha[rng.below(4)]).collect();
            assert_eq!(levenshtein(&a, &b), dp_oracle(&a, &b));
        }
    }

    fn toy_tables(entries: &[(char, f64)]) -> PropertyTables {
        let mut t = PropertyTables::standard();
        t.hydrophobicity = entries.iter().cloned().collect();
        t
    }

    #[test]
    fn table_mean_hand_value() {
        let ev = PropertyEvaluator::new(PropertyKind::TableMean, toy_tables(&[('A', 1.0), ('G', 0.0)]));
        assert_eq!(property_distance(&ev, "AA", "AG").unwrap(), 0.5);
        assert_eq!(property_distance(&ev, "AG", "AG").unwrap(), 0.0);
        assert!(matches!(ev.evaluate("AX"), Err(Error::Input(_))));
        let flat = PropertyEvaluator::new(PropertyKind::TableMean, toy_tables(&[('A', 2.0), ('G', 2.0)]));
        assert_eq!(property_distance(&flat, "AAG", "GGA").unwrap(), 0.0);
    }

    #[test]
    fn moment_of_two_residues() {
        // |h0 + h1 e^{i delta}| with h = (1, 1), delta = 100 deg.
        let ev = PropertyEvaluator::new(PropertyKind::HydrophobicMoment, toy_tables(&[('A', 1.0)]));
        let d = 100f64.to_radians();
        let want = ((1.0 + d.cos()).powi(2) + d.sin().powi(2)).sqrt();
        assert!((ev.evaluate("AA").unwrap() - want).abs() < 1e-14);
        assert_eq!(ev.evaluate("").unwrap(), 0.0);
    }

    #[test]
    fn charge_and_isoelectric_point() {
        let t = PropertyTables::standard();
        t.validate().unwrap();
        let q = PropertyEvaluator::new(PropertyKind::NetCharge, t.clone());
        let pi = PropertyEvaluator::new(PropertyKind::IsoelectricPoint, t.clone());
        // Lysines are positive at neutral pH, glutamates negative.
        assert!(q.evaluate("KKKK").unwrap() > 3.0);
        assert!(q.evaluate("EEEE").unwrap() < -3.0);
        assert!(pi.evaluate("KKKK").unwrap() > 10.0);
        assert!(pi.evaluate("EEEE").unwrap() < 4.5);
        for s in ["", "AKLE", "GGGG", "DEKRH"] {
            let p = pi.evaluate(s).unwrap();
            assert!(q.charge_at(s, p - 1e-3) > 0.0 && q.charge_at(s, p + 1e-3) < 0.0, "{s}");
        }
        // Henderson-Hasselbalch by hand for a lone lysine at pH 7.
        let pos = |pka: f64| 1.0 / (1.0 + 10f64.powf(7.0 - pka));
        let neg = |pka: f64| 1.0 / (1.0 + 10f64.powf(pka - 7.0));
        let want = pos(t.pka.n_term) - neg(t.pka.c_term) + pos(10.8);
        assert!((q.evaluate("K").unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn composite_standardisation() {
        let train: Vec<String> = ["AK", "LLE", "K", "AELK"].iter().map(|s| s.to_string()).collect();
        let t = PropertyTables::standard();
        let m = CompositeMetric::fit(PropertyEvaluator::standard_set(&t), &train).unwrap();
        let n_terms = m.term_names().len();
        assert_eq!(n_terms, 5);
        let mut hit = vec![false; n_terms];
        for a in &train {
            assert_eq!(m.distance(a, a).unwrap(), 0.0);
            for b in &train {
                let terms = m.terms(a, b).unwrap();
                for (k, v) in terms.iter().enumerate() {
                    assert!(*v <= 1.0 + 1e-12);
                    if (*v - 1.0).abs() < 1e-12 {
                        hit[k] = true;
                    }
                }
                assert_eq!(m.distance(a, b).unwrap(), m.distance(b, a).unwrap());
            }
        }
        assert!(hit.iter().all(|h| *h));
    }

    #[test]
    fn constant_term_is_skipped() {
        let train: Vec<String> = ["AA", "AA"].iter().map(|s| s.to_string()).collect();
        let t = PropertyTables::standard();
        let m = CompositeMetric::fit(PropertyEvaluator::standard_set(&t), &train).unwrap();
        assert!(m.term_names().is_empty());
        assert_eq!(m.distance("AA", "KKK").unwrap(), 0.0);
    }
}
