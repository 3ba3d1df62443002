//! Synthetic generators, CSV loaders, the sequence codec and splitting.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::persist;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub data: Tensor,
    pub ids: Option<Vec<String>>,
}

impl PointCloud {
    pub fn new(data: Tensor) -> Result<Self> {
        if !data.is_finite() {
            return Err(Error::Input("point cloud has non-finite entries".into()));
        }
        Ok(Self { data, ids: None })
    }

    pub fn n(&self) -> usize {
        self.data.rows()
    }

    pub fn d(&self) -> usize {
        self.data.cols()
    }

    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            data: self.data.select_rows(idx),
            ids: self
                .ids
                .as_ref()
                .map(|ids| idx.iter().map(|&i| ids[i].clone()).collect()),
        }
    }

    /// Header `[id,]x_1..x_d`, one sample per row. Floats use the shortest
    /// representation that round-trips.
    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = Vec::new();
        if self.ids.is_some() {
            header.push("id".into());
        }
        header.extend((1..=self.d()).map(|k| format!("x_{k}")));
        w.write_record(&header).expect("in-memory write");
        for r in 0..self.n() {
            let mut rec: Vec<String> = Vec::new();
            if let Some(ids) = &self.ids {
                rec.push(ids[r].clone());
            }
            rec.extend(self.data.row(r).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::write_atomic(path, &self.to_csv_bytes())
    }

    /// Reads a CSV with or without a header row. A leading `id` column is
    /// kept as sample ids.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let fmt = |m: String| Error::format(path, m);
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| fmt(e.to_string()))?;
        let mut rows: Vec<csv::StringRecord> = Vec::new();
        for rec in rdr.records() {
            rows.push(rec.map_err(|e| fmt(e.to_string()))?);
        }
        if rows.is_empty() {
            return Err(fmt("empty file".into()));
        }
        let numeric = |s: &str| s.trim().parse::<f64>().is_ok();
        let has_header = !rows[0].iter().all(numeric);
        let has_ids = has_header && rows[0].get(0).map(str::trim) == Some("id");
        let body = if has_header { &rows[1..] } else { &rows[..] };
        let skip = usize::from(has_ids);
        let d = rows[0].len() - skip;
        let mut data = Vec::with_capacity(body.len() * d);
        let mut ids = Vec::new();
        for (line, rec) in body.iter().enumerate() {
            if rec.len() != d + skip {
                return Err(fmt(format!("row {} has {} fields, expected {}", line + 1, rec.len(), d + skip)));
            }
            if has_ids {
                ids.push(rec[0].to_string());
            }
            for f in rec.iter().skip(skip) {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| fmt(format!("row {}: `{f}` is not a number", line + 1)))?;
                data.push(v);
            }
        }
        let mut pc = PointCloud::new(Tensor::from_rows(body.len(), d, data)?)?;
        if has_ids {
            pc.ids = Some(ids);
        }
        Ok(pc)
    }
}

/// Noisy unit half circle: `x ~ U(-1, 1)`, `y = (sin(pi x / 2), cos(pi x / 2)) + a`,
/// `a ~ N(0, sigma^2 I)`.
pub fn gen_arch(n: usize, noise_sigma: f64, rng: &mut Rng) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::Domain("n must be at least 1".into()));
    }
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let x = rng.uniform_range(-1.0, 1.0);
        let (a1, a2) = (rng.normal(), rng.normal());
        data.push((0.5 * PI * x).sin() + noise_sigma * a1);
        data.push((0.5 * PI * x).cos() + noise_sigma * a2);
    }
    PointCloud::new(Tensor::from_rows(n, 2, data)?)
}

pub fn arch_point(x: f64) -> [f64; 2] {
    [(0.5 * PI * x).sin(), (0.5 * PI * x).cos()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwissRollParams {
    pub t_min: f64,
    pub t_max: f64,
    pub height: f64,
    /// Uniform scale applied after rotation.
    pub scale: f64,
    /// Row-major 3x3 rotation.
    pub rotation: [[f64; 3]; 3],
}

impl Default for SwissRollParams {
    fn default() -> Self {
        Self {
            t_min: 1.5 * PI,
            t_max: 4.5 * PI,
            height: 10.0,
            scale: 0.1,
            rotation: default_rotation(),
        }
    }
}

/// `R_z(pi/4) R_x(pi/6)`.
pub fn default_rotation() -> [[f64; 3]; 3] {
    let (a, b) = (PI / 4.0, PI / 6.0);
    let rz = [[a.cos(), -a.sin(), 0.0], [a.sin(), a.cos(), 0.0], [0.0, 0.0, 1.0]];
    let rx = [[1.0, 0.0, 0.0], [0.0, b.cos(), -b.sin()], [0.0, b.sin(), b.cos()]];
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = (0..3).map(|k| rz[i][k] * rx[k][j]).sum();
        }
    }
    r
}

pub const IDENTITY3: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Unrotated, unscaled surface point `(t cos t, h, t sin t)`.
pub fn swiss_roll_point(t: f64, h: f64) -> [f64; 3] {
    [t * t.cos(), h, t * t.sin()]
}

fn rotate(r: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = (0..3).map(|k| r[i][k] * p[k]).sum();
    }
    out
}

/// Samples `(t, h)` uniformly, maps through the roll, then rotates, scales
/// and adds isotropic noise. Returns the cloud and the `(t, h)` parameters.
pub fn gen_swiss_roll(
    n: usize,
    noise_sigma: f64,
    params: &SwissRollParams,
    rng: &mut Rng,
) -> Result<(PointCloud, Tensor)> {
    if n == 0 {
        return Err(Error::Domain("n must be at least 1".into()));
    }
    let mut data = Vec::with_capacity(3 * n);
    let mut latent = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let t = rng.uniform_range(params.t_min, params.t_max);
        let h = rng.uniform_range(0.0, params.height);
        let p = rotate(&params.rotation, swiss_roll_point(t, h));
        for v in p {
            data.push(params.scale * v + noise_sigma * rng.normal());
        }
        latent.extend([t, h]);
    }
    Ok((
        PointCloud::new(Tensor::from_rows(n, 3, data)?)?,
        Tensor::from_rows(n, 2, latent)?,
    ))
}

/// Shuffled split into `round(n * fraction)` training and the remaining test
/// indices.
pub fn split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Domain(format!("split fraction must be in (0, 1), got {fraction}")));
    }
    let mut rng = Rng::new(seed);
    let perm = rng.permutation(n);
    let n_train = ((n as f64) * fraction).round() as usize;
    let (a, b) = perm.split_at(n_train.min(n));
    Ok((a.to_vec(), b.to_vec()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub params: serde_json::Value,
    pub seed: u64,
    pub files: Vec<FileHash>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub ids: Vec<String>,
    pub sequences: Vec<String>,
    pub activity: Option<Vec<f64>>,
}

impl SequenceDataset {
    pub fn from_sequences(sequences: Vec<String>) -> Self {
        Self {
            ids: (0..sequences.len()).map(|i| format!("s{i}")).collect(),
            sequences,
            activity: None,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            sequences: idx.iter().map(|&i| self.sequences[i].clone()).collect(),
            activity: self.activity.as_ref().map(|a| idx.iter().map(|&i| a[i]).collect()),
        }
    }

    pub fn validate(&self, alphabet: &[char], max_len: usize) -> Result<()> {
        for (id, s) in self.ids.iter().zip(&self.sequences) {
            if s.chars().count() > max_len {
                return Err(Error::Input(format!("sequence {id} is longer than {max_len}")));
            }
            if let Some(c) = s.chars().find(|c| !alphabet.contains(c)) {
                return Err(Error::Input(format!("sequence {id} has residue `{c}` outside the alphabet")));
            }
        }
        Ok(())
    }

    /// Columns `id,sequence[,activity]`.
    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id", "sequence"];
        if self.activity.is_some() {
            header.push("activity");
        }
        w.write_record(&header).expect("in-memory write");
        for i in 0..self.len() {
            let mut rec = vec![self.ids[i].clone(), self.sequences[i].clone()];
            if let Some(a) = &self.activity {
                rec.push(format!("{:?}", a[i]));
            }
            w.write_record(&rec).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::write_atomic(path, &self.to_csv_bytes())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let fmt = |m: String| Error::format(path, m);
        let mut rdr = csv::Reader::from_path(path).map_err(|e| fmt(e.to_string()))?;
        let headers = rdr.headers().map_err(|e| fmt(e.to_string()))?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let seq_col = col("sequence").ok_or_else(|| fmt("missing `sequence` column".into()))?;
        let id_col = col("id");
        let act_col = col("activity");
        let mut out = Self {
            ids: Vec::new(),
            sequences: Vec::new(),
            activity: act_col.map(|_| Vec::new()),
        };
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| fmt(e.to_string()))?;
            out.sequences.push(rec[seq_col].trim().to_string());
            out.ids.push(match id_col {
                Some(c) => rec[c].to_string(),
                None => format!("s{line}"),
            });
            if let (Some(c), Some(acts)) = (act_col, out.activity.as_mut()) {
                let v = rec[c]
                    .trim()
                    .parse()
                    .map_err(|_| fmt(format!("row {}: bad activity", line + 1)))?;
                acts.push(v);
            }
        }
        Ok(out)
    }
}

/// Maps sequences to `L * e` vectors: a learned row per residue plus a fixed
/// sine-cosine position code. The pad row is zero and pad positions carry
/// no position code, so the empty sequence encodes to the zero vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceCodec {
    pub alphabet: Vec<char>,
    pub max_len: usize,
    pub embed_dim: usize,
    /// `(|alphabet| + 1) x e`; row 0 is the pad token.
    pub table: Tensor,
}

pub const PAD: usize = 0;

impl SequenceCodec {
    pub fn new(alphabet: &[char], max_len: usize, embed_dim: usize, rng: &mut Rng) -> Result<Self> {
        if alphabet.is_empty() || max_len == 0 || embed_dim == 0 {
            return Err(Error::Domain("codec needs a non-empty alphabet, length and width".into()));
        }
        let mut uniq = alphabet.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != alphabet.len() {
            return Err(Error::Domain("alphabet has duplicate residues".into()));
        }
        let mut table = rng.normal_tensor(alphabet.len() + 1, embed_dim);
        for v in table.row_mut(PAD) {
            *v = 0.0;
        }
        Ok(Self {
            alphabet: alphabet.to_vec(),
            max_len,
            embed_dim,
            table,
        })
    }

    pub fn dim(&self) -> usize {
        self.max_len * self.embed_dim
    }

    /// Position code for slot `p`: `sin(p w_i), cos(p w_i)` with
    /// `w_i = 10000^(-2i/e)`.
    pub fn positional(&self, p: usize) -> Vec<f64> {
        let e = self.embed_dim;
        (0..e)
            .map(|c| {
                let i = c / 2;
                let w = 10000f64.powf(-2.0 * i as f64 / e as f64);
                let a = p as f64 * w;
                if c % 2 == 0 {
                    a.sin()
                } else {
                    a.cos()
                }
            })
            .collect()
    }

    /// Token ids padded to `max_len`.
    pub fn tokens(&self, seq: &str) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(self.max_len);
        for c in seq.chars() {
            let k = self
                .alphabet
                .iter()
                .position(|a| *a == c)
                .ok_or_else(|| Error::Input(format!("residue `{c}` is not in the codec alphabet")))?;
            out.push(k + 1);
        }
        if out.len() > self.max_len {
            return Err(Error::Input(format!("sequence longer than {}", self.max_len)));
        }
        out.resize(self.max_len, PAD);
        Ok(out)
    }

    /// Fixed position codes for a token layout (zero at pad slots), flattened.
    pub fn position_codes(&self, tokens: &[usize]) -> Vec<f64> {
        let e = self.embed_dim;
        let mut out = vec![0.0; tokens.len() * e];
        for (p, &t) in tokens.iter().enumerate() {
            if t != PAD {
                out[p * e..(p + 1) * e].copy_from_slice(&self.positional(p));
            }
        }
        out
    }

    pub fn encode(&self, seq: &str) -> Result<Vec<f64>> {
        let toks = self.tokens(seq)?;
        let mut v = self.position_codes(&toks);
        let e = self.embed_dim;
        for (p, &t) in toks.iter().enumerate() {
            for (o, w) in v[p * e..(p + 1) * e].iter_mut().zip(self.table.row(t)) {
                *o += w;
            }
        }
        Ok(v)
    }

    pub fn encode_all(&self, ds: &SequenceDataset) -> Result<PointCloud> {
        let mut data = Vec::with_capacity(ds.len() * self.dim());
        for s in &ds.sequences {
            data.extend(self.encode(s)?);
        }
        let mut pc = PointCloud::new(Tensor::from_rows(ds.len(), self.dim(), data)?)?;
        pc.ids = Some(ds.ids.clone());
        Ok(pc)
    }

    /// Nearest candidate per position. Positions closest to the pad token
    /// are dropped, so a pad inside the vector reads as a deletion.
    pub fn decode(&self, v: &[f64]) -> Result<String> {
        if v.len() != self.dim() {
            return Err(Error::shape("decode", format!("expected {} values, got {}", self.dim(), v.len())));
        }
        let e = self.embed_dim;
        let mut out = String::new();
        for p in 0..self.max_len {
            let x = &v[p * e..(p + 1) * e];
            let pos = self.positional(p);
            let mut best = (x.iter().map(|a| a * a).sum::<f64>(), PAD);
            for k in 1..=self.alphabet.len() {
                let d: f64 = x
                    .iter()
                    .zip(self.table.row(k))
                    .zip(&pos)
                    .map(|((a, w), q)| (a - w - q).powi(2))
                    .sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            if best.1 != PAD {
                out.push(self.alphabet[best.1 - 1]);
            }
        }
        Ok(out)
    }

    pub fn decode_all(&self, points: &Tensor) -> Result<SequenceDataset> {
        let seqs = (0..points.rows())
            .map(|r| self.decode(points.row(r)))
            .collect::<Result<Vec<_>>>()?;
        Ok(SequenceDataset::from_sequences(seqs))
    }

    /// Smallest distance between two decoding candidates at any position.
    pub fn min_candidate_gap(&self) -> f64 {
        let mut gap = f64::INFINITY;
        for p in 0..self.max_len {
            let pos = self.positional(p);
            let cand: Vec<Vec<f64>> = std::iter::once(vec![0.0; self.embed_dim])
                .chain((1..=self.alphabet.len()).map(|k| {
                    self.table.row(k).iter().zip(&pos).map(|(w, q)| w + q).collect()
                }))
                .collect();
            for a in 0..cand.len() {
                for b in 0..a {
                    gap = gap.min(crate::numerics::tensor::euclidean(&cand[a], &cand[b]));
                }
            }
        }
        gap
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::write_json(path, &persist::Envelope::new("codec", self))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        persist::read_json::<persist::Envelope<Self>>(&path)?.into_payload("codec", &path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusParams {
    pub n: usize,
    pub alphabet: Vec<char>,
    pub min_len: usize,
    pub max_len: usize,
    /// Number of motif families the sequences mutate from.
    pub families: usize,
    /// Per-position substitution probability applied to a family motif.
    pub mutation_rate: f64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            n: 300,
            alphabet: vec!['A', 'E', 'K', 'L'],
            min_len: 6,
            max_len: 12,
            families: 6,
            mutation_rate: 0.15,
        }
    }
}

/// Synthetic peptide-like corpus: a few random motif families, each member a
/// point-mutated and length-trimmed copy of its family motif. Duplicates are
/// kept, as in real assay data.
pub fn gen_sequence_corpus(p: &CorpusParams, rng: &mut Rng) -> Result<SequenceDataset> {
    if p.alphabet.is_empty() || p.min_len > p.max_len || p.families == 0 || p.n == 0 {
        return Err(Error::Domain("invalid corpus parameters".into()));
    }
    let k = p.alphabet.len();
    let motifs: Vec<Vec<char>> = (0..p.families)
        .map(|_| (0..p.max_len).map(|_| p.alphabet[rng.below(k)]).collect())
        .collect();
    let mut seqs = Vec::with_capacity(p.n);
    for i in 0..p.n {
        let m = &motifs[i % p.families];
        let len = p.min_len + rng.below(p.max_len - p.min_len + 1);
        let s: String = m[..len]
            .iter()
            .map(|&c| {
                if rng.uniform() < p.mutation_rate {
                    p.alphabet[rng.below(k)]
                } else {
                    c
                }
            })
            .collect();
        seqs.push(s);
    }
    Ok(SequenceDataset::from_sequences(seqs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_closed_form_points() {
        assert_eq!(arch_point(0.0), [0.0, 1.0]);
        let p = arch_point(1.0);
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1].abs() < 1e-15);
    }

    #[test]
    fn noiseless_arch_is_on_half_circle() {
        let pc = gen_arch(1000, 0.0, &mut Rng::new(3)).unwrap();
        for r in 0..pc.n() {
            let (a, b) = (pc.data.get(r, 0), pc.data.get(r, 1));
            assert!(b >= 0.0);
            assert!(((a * a + b * b).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noisy_arch_radial_residual() {
        for seed in 0..5 {
            let pc = gen_arch(500, 0.1, &mut Rng::new(seed)).unwrap();
            let mean: f64 = (0..500)
                .map(|r| ((pc.data.get(r, 0).powi(2) + pc.data.get(r, 1).powi(2)).sqrt() - 1.0).abs())
                .sum::<f64>()
                / 500.0;
            assert!(mean < 0.15, "{mean}");
        }
    }

    #[test]
    fn swiss_roll_direct_evaluation() {
        let p = swiss_roll_point(PI, 0.0);
        assert!((p[0] + PI).abs() < 1e-15 && p[1] == 0.0 && p[2].abs() < 1e-15);
        let params = SwissRollParams {
            rotation: IDENTITY3,
            scale: 1.0,
            ..Default::default()
        };
        let (pc, th) = gen_swiss_roll(20, 0.0, &params, &mut Rng::new(0)).unwrap();
        for r in 0..20 {
            let q = swiss_roll_point(th.get(r, 0), th.get(r, 1));
            assert_eq!(pc.data.row(r), &q);
        }
    }

    #[test]
    fn swiss_roll_rotation_preserves_norm() {
        let r = default_rotation();
        let base = SwissRollParams {
            rotation: IDENTITY3,
            ..Default::default()
        };
        let rotated = SwissRollParams {
            rotation: r,
            ..Default::default()
        };
        let (a, _) = gen_swiss_roll(50, 0.0, &base, &mut Rng::new(5)).unwrap();
        let (b, _) = gen_swiss_roll(50, 0.0, &rotated, &mut Rng::new(5)).unwrap();
        for i in 0..50 {
            let na: f64 = a.data.row(i).iter().map(|v| v * v).sum();
            let nb: f64 = b.data.row(i).iter().map(|v| v * v).sum();
            assert!((na - nb).abs() < 1e-12);
        }
        let (c, _) = gen_swiss_roll(50, 0.0, &rotated, &mut Rng::new(5)).unwrap();
        assert_eq!(b, c);
    }

    #[test]
    fn split_partitions() {
        let (tr, te) = split(10, 0.8, 4).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        let mut all: Vec<usize> = tr.iter().chain(&te).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split(10, 0.8, 4).unwrap(), (tr, te));
        assert!(split(10, 1.0, 0).is_err());
    }

    #[test]
    fn point_cloud_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pc.csv");
        let mut pc = gen_arch(7, 0.1, &mut Rng::new(1)).unwrap();
        pc.save_csv(&p).unwrap();
        assert_eq!(PointCloud::load_csv(&p).unwrap(), pc);
        pc.ids = Some((0..7).map(|i| format!("p{i}")).collect());
        pc.save_csv(&p).unwrap();
        assert_eq!(PointCloud::load_csv(&p).unwrap(), pc);
        std::fs::write(&p, "1.0,2.0\n3.5,-1\n").unwrap();
        let raw = PointCloud::load_csv(&p).unwrap();
        assert_eq!(raw.data.data(), &[1.0, 2.0, 3.5, -1.0]);
        std::fs::write(&p, "1.0,2.0\n3.5\n").unwrap();
        assert!(PointCloud::load_csv(&p).is_err());
    }

    fn codec4() -> SequenceCodec {
        SequenceCodec::new(&['A', 'C', 'G', 'T'], 5, 8, &mut Rng::new(2)).unwrap()
    }

    #[test]
    fn empty_sequence_is_zero() {
        let c = codec4();
        assert!(c.encode("").unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(c.decode(&vec![0.0; c.dim()]).unwrap(), "");
    }

    #[test]
    fn codec_round_trip_exhaustive_short() {
        let c = codec4();
        let mut all = vec![String::new()];
        let mut frontier = vec![String::new()];
        for _ in 0..3 {
            let mut next = Vec::new();
            for s in &frontier {
                for a in ['A', 'C', 'G', 'T'] {
                    next.push(format!("{s}{a}"));
                }
            }
            all.extend(next.iter().cloned());
            frontier = next;
        }
        assert_eq!(all.len(), 85);
        for s in &all {
            assert_eq!(&c.decode(&c.encode(s).unwrap()).unwrap(), s);
        }
    }

    #[test]
    fn codec_round_trip_random() {
        let c = codec4();
        let mut rng = Rng::new(8);
        for _ in 0..100 {
            let len = rng.below(6);
            let s: String = (0..len).map(|_| c.alphabet[rng.below(4)]).collect();
            assert_eq!(c.decode(&c.encode(&s).unwrap()).unwrap(), s);
        }
    }

    #[test]
    fn single_substitution_changes_one_block() {
        let c = codec4();
        let a = c.encode("ACGTA").unwrap();
        let b = c.encode("ACTTA").unwrap();
        for p in 0..5 {
            let same = a[p * 8..(p + 1) * 8] == b[p * 8..(p + 1) * 8];
            assert_eq!(same, p != 2);
        }
    }

    #[test]
    fn small_perturbation_keeps_decoding() {
        let c = codec4();
        let margin = 0.5 * c.min_candidate_gap();
        let mut rng = Rng::new(4);
        for s in ["", "A", "GATC", "TTTTT"] {
            let mut v = c.encode(s).unwrap();
            let e = 8;
            for p in 0..5 {
                // Perturb each block by just under half the gap.
                let dir: Vec<f64> = (0..e).map(|_| rng.normal()).collect();
                let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
                for k in 0..e {
                    v[p * e + k] += 0.99 * margin * dir[k] / norm;
                }
            }
            assert_eq!(c.decode(&v).unwrap(), s);
        }
    }

    #[test]
    fn interior_pad_reads_as_deletion() {
        let c = codec4();
        let mut v = c.encode("GATCA").unwrap();
        for x in &mut v[8..16] {
            *x = 0.0;
        }
        assert_eq!(c.decode(&v).unwrap(), "GTCA");
    }

    #[test]
    fn codec_rejects_bad_residue() {
        let c = codec4();
        assert!(matches!(c.encode("AXG"), Err(Error::Input(_))));
        assert!(c.encode("AAAAAA").is_err());
    }

    #[test]
    fn corpus_is_valid_and_deterministic() {
        let p = CorpusParams::default();
        let a = gen_sequence_corpus(&p, &mut Rng::new(0)).unwrap();
        let b = gen_sequence_corpus(&p, &mut Rng::new(0)).unwrap();
        assert_eq!(a, b);
        a.validate(&p.alphabet, p.max_len).unwrap();
        assert!(a.sequences.iter().all(|s| s.len() >= p.min_len));
    }

    #[test]
    fn sequence_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let mut ds = gen_sequence_corpus(&CorpusParams::default(), &mut Rng::new(1)).unwrap();
        ds.activity = Some((0..ds.len()).map(|i| i as f64 * 0.1).collect());
        ds.save_csv(&path).unwrap();
        assert_eq!(SequenceDataset::load_csv(&path).unwrap(), ds);
    }
}
