use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use pfm_core::datasets::{
    gen_arch, gen_sequence_corpus, gen_swiss_roll, split, DatasetManifest, FileHash, PointCloud, SequenceCodec, SequenceDataset,
};
use pfm_core::evaluation::{
    analogue_report, analogue_sequences, interpolation_rmse, latent_std, one_nn_accuracy, AnalogueReport,
    InterpolationReport,
};
use pfm_core::flow_matching::{base_draws, sample, train_flow, trajectory, write_trajectory_csv, FlowMode, FlowModel, FlowReport};
use pfm_core::geometry::Space;
use pfm_core::isometry_trainer::{ablation_metrics, train_isometry, train_isometry_sequences, AblationMetrics, TrainReport};
use pfm_core::manifold_metrics::{
    graph_geodesics, knn_graph, shortest_paths, CompositeMetric, DistanceMatrix, PropertyEvaluator, PropertyTables,
};
use pfm_core::node_diffeo::DiffeoModel;
use pfm_core::numerics::{Rng, Tensor};
use pfm_core::persist;

use crate::config::{DatasetSpec, ExperimentConfig, MetricSpec};

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const POINTS: &str = "points.csv";
pub const SEQUENCES: &str = "sequences.csv";
pub const INTRINSIC: &str = "intrinsic.csv";
pub const CODEC: &str = "codec.json";
pub const CODEC_TRAINED: &str = "codec_trained.json";
pub const DISTANCES: &str = "distances.bin";
pub const DIFFEO: &str = "diffeo.json";
pub const ISOMETRY_REPORT: &str = "isometry_report.json";
pub const ISOMETRY_HISTORY: &str = "isometry_history.csv";
pub const FLOW: &str = "flow.json";
pub const FLOW_REPORT: &str = "flow_report.json";
pub const FLOW_HISTORY: &str = "flow_history.csv";
pub const SAMPLES: &str = "samples.csv";
pub const TRAJECTORY_DIR: &str = "trajectory";
pub const EVALUATION: &str = "evaluation.json";
pub const INTERPOLATION_CSV: &str = "interpolation.csv";
pub const ANALOGUE: &str = "analogue.json";
pub const ANALOGUE_CSV: &str = "analogue.csv";

/// Substream of the experiment seed used for the codec's initial table.
const CODEC_STREAM: u64 = 7;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_name: String,
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub config_sha256: String,
}

impl Ctx {
    pub fn new(cfg: ExperimentConfig, config_bytes: &[u8]) -> Self {
        Self {
            cfg,
            config_sha256: persist::sha256_hex(config_bytes),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn require(&self, name: &str, stage: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            bail!("{} is missing; run `{stage}` first", p.display());
        }
        Ok(p)
    }

    fn hashes(&self, paths: &[PathBuf]) -> Result<Vec<FileHash>> {
        paths
            .iter()
            .map(|p| {
                let rel = p.strip_prefix(&self.cfg.out).unwrap_or(p);
                Ok(FileHash {
                    path: rel.display().to_string(),
                    sha256: persist::sha256_file(p)?,
                })
            })
            .collect()
    }

    fn manifest(&self, stage: &str, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
        let m = Manifest {
            stage: stage.to_string(),
            config_name: self.cfg.name.clone(),
            config_sha256: self.config_sha256.clone(),
            seed: self.cfg.seed,
            inputs: self.hashes(inputs)?,
            outputs: self.hashes(outputs)?,
        };
        persist::write_json(self.path(&format!("manifest_{stage}.json")), &m)?;
        Ok(())
    }

    fn points(&self) -> Result<(PathBuf, Tensor)> {
        let p = self.require(POINTS, "make-dataset")?;
        Ok((p.clone(), PointCloud::load_csv(&p)?.data))
    }

    fn sequences(&self) -> Result<(PathBuf, SequenceDataset)> {
        let p = self.require(SEQUENCES, "make-dataset")?;
        Ok((p.clone(), SequenceDataset::load_csv(&p)?))
    }

    fn distances(&self) -> Result<(PathBuf, DistanceMatrix)> {
        let p = self.require(DISTANCES, "distances")?;
        Ok((p.clone(), DistanceMatrix::load(&p)?.0))
    }

    fn diffeo(&self) -> Result<(PathBuf, DiffeoModel)> {
        let p = self.require(DIFFEO, "train-isometry")?;
        Ok((p.clone(), DiffeoModel::load(&p)?))
    }

    /// The codec after isometry training if there is one, else the initial.
    fn codec(&self) -> Result<(PathBuf, SequenceCodec)> {
        let trained = self.path(CODEC_TRAINED);
        let p = if trained.exists() { trained } else { self.require(CODEC, "make-dataset")? };
        Ok((p.clone(), SequenceCodec::load(&p)?))
    }

    /// Model inputs: stored points, or sequences encoded by the current codec.
    fn model_inputs(&self) -> Result<(Vec<PathBuf>, Tensor)> {
        if self.cfg.dataset.is_sequence() {
            let (sp, seqs) = self.sequences()?;
            let (cp, codec) = self.codec()?;
            Ok((vec![sp, cp], codec.encode_all(&seqs)?.data))
        } else {
            let (p, x) = self.points()?;
            Ok((vec![p], x))
        }
    }

    fn isometry_report(&self) -> Result<StoredIsometryReport> {
        let p = self.require(ISOMETRY_REPORT, "train-isometry")?;
        Ok(persist::read_json(p)?)
    }

    fn evaluators(&self) -> Result<Vec<PropertyEvaluator>> {
        let tables = match &self.cfg.metric {
            MetricSpec::Sequence { properties: Some(p) } => PropertyTables::load(p)?,
            _ => PropertyTables::standard(),
        };
        Ok(PropertyEvaluator::standard_set(&tables))
    }
}

fn alphabet_of(ds: &SequenceDataset) -> Vec<char> {
    let set: BTreeSet<char> = ds.sequences.iter().flat_map(|s| s.chars()).collect();
    set.into_iter().collect()
}

pub fn make_dataset(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut rng = Rng::new(cfg.seed);
    let mut outputs = Vec::new();
    let mut inputs = Vec::new();
    match &cfg.dataset {
        DatasetSpec::Arch { n, noise } => {
            gen_arch(*n, *noise, &mut rng)?.save_csv(ctx.path(POINTS))?;
            outputs.push(ctx.path(POINTS));
        }
        DatasetSpec::SwissRoll { n, noise, roll } => {
            let (pc, intrinsic) = gen_swiss_roll(*n, *noise, roll, &mut rng)?;
            pc.save_csv(ctx.path(POINTS))?;
            PointCloud::new(intrinsic)?.save_csv(ctx.path(INTRINSIC))?;
            outputs.extend([ctx.path(POINTS), ctx.path(INTRINSIC)]);
        }
        DatasetSpec::PointsCsv { path } => {
            PointCloud::load_csv(path)?.save_csv(ctx.path(POINTS))?;
            inputs.push(path.clone());
            outputs.push(ctx.path(POINTS));
        }
        DatasetSpec::SequenceCorpus { codec, .. } | DatasetSpec::SequencesCsv { codec, .. } => {
            let ds = match &cfg.dataset {
                DatasetSpec::SequenceCorpus { corpus, .. } => gen_sequence_corpus(corpus, &mut rng)?,
                DatasetSpec::SequencesCsv { path, .. } => {
                    inputs.push(path.clone());
                    SequenceDataset::load_csv(path)?
                }
                _ => unreachable!(),
            };
            let longest = ds.sequences.iter().map(|s| s.chars().count()).max().unwrap_or(1);
            let max_len = codec.max_len.unwrap_or(longest);
            let alphabet = alphabet_of(&ds);
            ds.validate(&alphabet, max_len)?;
            let c = SequenceCodec::new(&alphabet, max_len, codec.embed_dim, &mut Rng::substream(cfg.seed, CODEC_STREAM))?;
            ds.save_csv(ctx.path(SEQUENCES))?;
            c.save(ctx.path(CODEC))?;
            c.encode_all(&ds)?.save_csv(ctx.path(POINTS))?;
            outputs.extend([ctx.path(SEQUENCES), ctx.path(CODEC), ctx.path(POINTS)]);
        }
    }
    let dataset = DatasetManifest {
        name: cfg.name.clone(),
        params: serde_json::to_value(&cfg.dataset)?,
        seed: cfg.seed,
        files: ctx.hashes(&outputs)?,
    };
    persist::write_json(ctx.path(DATASET_MANIFEST), &dataset)?;
    outputs.push(ctx.path(DATASET_MANIFEST));
    ctx.manifest("make-dataset", &inputs, &outputs)
}

pub fn distances(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let out = ctx.path(DISTANCES);
    let (points_path, x) = ctx.points()?;
    let dataset_hash = Some(persist::sha256_file(&points_path)?);
    let mut inputs = vec![points_path];
    let d = match &cfg.metric {
        MetricSpec::Isomap { k } => graph_geodesics(&knn_graph(&x, *k)?)?,
        MetricSpec::Sequence { properties } => {
            let (sp, ds) = ctx.sequences()?;
            inputs.push(sp);
            if let Some(p) = properties {
                inputs.push(p.clone());
            }
            let (train, _) = split(ds.len(), cfg.isometry.split, cfg.seed)?;
            let train_seqs: Vec<String> = train.iter().map(|&i| ds.sequences[i].clone()).collect();
            let metric = CompositeMetric::fit(ctx.evaluators()?, &train_seqs)?;
            metric.distance_matrix(&ds.sequences)?
        }
        MetricSpec::File { path } => {
            inputs.push(path.clone());
            let (d, _) = DistanceMatrix::load(path)?;
            if d.n() != x.rows() {
                bail!("distance file covers {} samples, dataset has {}", d.n(), x.rows());
            }
            d
        }
    };
    d.save(&out, dataset_hash)?;
    ctx.manifest("distances", &inputs, &[out.clone(), DistanceMatrix::sidecar_path(&out)])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredIsometryReport {
    pub parameter_count: usize,
    #[serde(flatten)]
    pub report: TrainReport,
}

pub fn train_isometry_stage(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let (dp, d) = ctx.distances()?;
    let mut outputs = vec![ctx.path(DIFFEO), ctx.path(ISOMETRY_REPORT), ctx.path(ISOMETRY_HISTORY)];
    let (inputs, model, report) = if cfg.dataset.is_sequence() {
        let (sp, ds) = ctx.sequences()?;
        let cp = ctx.require(CODEC, "make-dataset")?;
        let codec = SequenceCodec::load(&cp)?;
        let out = train_isometry_sequences(&ds.sequences, &codec, &d, &cfg.isometry)?;
        if cfg.isometry.train_embedding {
            out.codec.as_ref().expect("sequence training returns its codec").save(ctx.path(CODEC_TRAINED))?;
            outputs.push(ctx.path(CODEC_TRAINED));
        } else if ctx.path(CODEC_TRAINED).exists() {
            std::fs::remove_file(ctx.path(CODEC_TRAINED))?;
        }
        (vec![sp, cp, dp], out.model, out.report)
    } else {
        let (pp, x) = ctx.points()?;
        let (m, r) = train_isometry(&x, &d, &cfg.isometry)?;
        (vec![pp, dp], m, r)
    };
    let mut model = model;
    model.config_hash = Some(ctx.config_sha256.clone());
    model.save(ctx.path(DIFFEO))?;
    report.write_csv(ctx.path(ISOMETRY_HISTORY))?;
    let stored = StoredIsometryReport {
        parameter_count: model.field.parameter_count(),
        report,
    };
    persist::write_json(ctx.path(ISOMETRY_REPORT), &stored)?;
    log::info!(
        "isometry: best epoch {:?}, eps_inv {:.3e}, eps_ld {:.3e}, eps_iso {:.3e}",
        stored.report.best_epoch,
        stored.report.metrics.eps_inv,
        stored.report.metrics.eps_ld,
        stored.report.metrics.eps_iso
    );
    ctx.manifest("train-isometry", &inputs, &outputs)
}

fn flow_spec(ctx: &Ctx) -> Result<&crate::config::FlowSpec> {
    ctx.cfg.flow.as_ref().context("the config has no [flow] section")
}

pub fn train_flow_stage(ctx: &Ctx) -> Result<()> {
    let spec = flow_spec(ctx)?;
    let (mut inputs, x) = ctx.model_inputs()?;
    let diffeo = if spec.mode == FlowMode::Cfm {
        None
    } else {
        let (p, m) = ctx.diffeo()?;
        inputs.push(p);
        Some(m)
    };
    let (flow, report) = train_flow(&x, &spec.train, spec.mode, diffeo.as_ref())?;
    flow.save(ctx.path(FLOW))?;
    persist::write_json(ctx.path(FLOW_REPORT), &report)?;
    persist::write_atomic(ctx.path(FLOW_HISTORY), &report.to_csv_bytes())?;
    log::info!("flow {}: {} parameters, best epoch {:?}", spec.mode.name(), report.parameter_count, report.best_epoch);
    ctx.manifest("train-flow", &inputs, &[ctx.path(FLOW), ctx.path(FLOW_REPORT), ctx.path(FLOW_HISTORY)])
}

fn load_flow(ctx: &Ctx) -> Result<(Vec<PathBuf>, FlowModel, FlowReport, Option<DiffeoModel>)> {
    let fp = ctx.require(FLOW, "train-flow")?;
    let rp = ctx.require(FLOW_REPORT, "train-flow")?;
    let flow = FlowModel::load(&fp)?;
    let report: FlowReport = persist::read_json(&rp)?;
    let mut inputs = vec![fp, rp];
    let diffeo = if flow.space == Space::Data {
        None
    } else {
        let (p, m) = ctx.diffeo()?;
        inputs.push(p);
        Some(m)
    };
    Ok((inputs, flow, report, diffeo))
}

pub fn generate(ctx: &Ctx) -> Result<()> {
    let spec = flow_spec(ctx)?;
    let (inputs, flow, report, diffeo) = load_flow(ctx)?;
    let n = spec.n_samples.unwrap_or(report.test_indices.len());
    let samples = sample(&flow, n, ctx.cfg.seed, diffeo.as_ref())?;
    PointCloud::new(samples)?.save_csv(ctx.path(SAMPLES))?;
    let mut outputs = vec![ctx.path(SAMPLES)];
    if spec.n_frames >= 2 {
        let frames = trajectory(&flow, &base_draws(flow.dim, n, ctx.cfg.seed), spec.n_frames, diffeo.as_ref())?;
        outputs.extend(write_trajectory_csv(ctx.path(TRAJECTORY_DIR), &frames)?);
    }
    ctx.manifest("generate", &inputs, &outputs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub mode: FlowMode,
    pub parameter_count: usize,
    pub n_generated: usize,
    pub n_reference: usize,
    pub one_nn_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub name: String,
    pub seed: u64,
    pub isometry_parameter_count: usize,
    pub ablation: AblationMetrics,
    pub interpolation: Vec<InterpolationReport>,
    pub generation: Option<GenerationSummary>,
}

pub fn evaluate(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let (mut inputs, x) = ctx.model_inputs()?;
    let (dip, diffeo) = ctx.diffeo()?;
    let (dp, d) = ctx.distances()?;
    inputs.extend([dip, dp, ctx.path(ISOMETRY_REPORT)]);
    let iso = ctx.isometry_report()?;
    let test = &iso.report.test_indices;
    let ablation = ablation_metrics(&diffeo, &x.select_rows(test), &d.restrict(test))?;

    let mut interpolation = Vec::new();
    match (&cfg.metric, cfg.dataset.is_sequence()) {
        (MetricSpec::Isomap { k }, false) => {
            let paths = shortest_paths(&knn_graph(&x, *k)?)?;
            for &method in &cfg.evaluation.interpolation {
                interpolation.push(interpolation_rmse(Some(&diffeo), &x, &paths, test, method, cfg.evaluation.n_pairs)?);
            }
        }
        _ if !cfg.evaluation.interpolation.is_empty() => {
            log::warn!("interpolation needs Isomap geodesics on point data; skipped");
        }
        _ => {}
    }

    let mut generation = None;
    if cfg.flow.is_some() && ctx.path(SAMPLES).exists() {
        let (flow_inputs, flow, report, _) = load_flow(ctx)?;
        inputs.extend(flow_inputs);
        inputs.push(ctx.path(SAMPLES));
        let samples = PointCloud::load_csv(ctx.path(SAMPLES))?.data;
        let reference = x.select_rows(&report.test_indices);
        generation = Some(GenerationSummary {
            mode: report.mode,
            parameter_count: flow.parameter_count(),
            n_generated: samples.rows(),
            n_reference: reference.rows(),
            one_nn_accuracy: one_nn_accuracy(&samples, &reference)?,
        });
    }

    let rep = EvaluationReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        isometry_parameter_count: iso.parameter_count,
        ablation,
        interpolation,
        generation,
    };
    persist::write_json(ctx.path(EVALUATION), &rep)?;
    persist::write_atomic(ctx.path(INTERPOLATION_CSV), &interpolation_csv(&rep.interpolation))?;
    for r in &rep.interpolation {
        log::info!("interpolation {:?}: rmse {:.4} +- {:.4}", r.method, r.mean, r.std);
    }
    if let Some(g) = &rep.generation {
        log::info!("1-NN accuracy {:.4}", g.one_nn_accuracy);
    }
    ctx.manifest("evaluate", &inputs, &[ctx.path(EVALUATION), ctx.path(INTERPOLATION_CSV)])
}

fn interpolation_csv(reports: &[InterpolationReport]) -> Vec<u8> {
    let mut out = String::from("method,i,j,graph_distance,rmse\n");
    for r in reports {
        let m = serde_json::to_value(r.method).expect("enum serialises");
        for p in &r.pairs {
            out.push_str(&format!(
                "{},{},{},{:?},{:?}\n",
                m.as_str().unwrap_or_default(),
                p.i,
                p.j,
                p.graph_distance,
                p.rmse
            ));
        }
    }
    out.into_bytes()
}

pub fn analogue(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let spec = cfg.analogue.clone().context("the config has no [analogue] section")?;
    if !cfg.dataset.is_sequence() {
        bail!("analogue generation needs a sequence dataset");
    }
    let (sp, ds) = ctx.sequences()?;
    let (cp, codec) = ctx.codec()?;
    let (dip, diffeo) = ctx.diffeo()?;
    let iso = ctx.isometry_report()?;
    let x = codec.encode_all(&ds)?.data;
    let sigma = latent_std(&diffeo, &x.select_rows(&iso.report.train_indices))?;
    let evaluators = ctx.evaluators()?;
    let mut reports: Vec<AnalogueReport> = Vec::new();
    let mut outputs = Vec::new();
    for &tau in &spec.taus {
        let generated = analogue_sequences(&diffeo, &codec, &ds.sequences, &sigma, tau, cfg.seed)?;
        let name = format!("analogues_tau_{tau}.csv");
        generated.save_csv(ctx.path(&name))?;
        outputs.push(ctx.path(&name));
        let rep = analogue_report(tau, &ds.sequences, &generated.sequences, &ds.sequences, &evaluators, spec.alpha)?;
        log::info!(
            "tau {tau}: {} unique, {} in data, {} novel, {}/{} KS non-significant",
            rep.total,
            rep.in_data,
            rep.novel,
            rep.non_significant,
            rep.tested
        );
        reports.push(rep);
    }
    persist::write_json(ctx.path(ANALOGUE), &reports)?;
    persist::write_atomic(ctx.path(ANALOGUE_CSV), &analogue_csv(&reports))?;
    outputs.extend([ctx.path(ANALOGUE), ctx.path(ANALOGUE_CSV)]);
    ctx.manifest("analogue", &[sp, cp, dip], &outputs)
}

fn analogue_csv(reports: &[AnalogueReport]) -> Vec<u8> {
    let mut out = String::from("tau,total,in_data,novel,non_significant,tested\n");
    for r in reports {
        out.push_str(&format!(
            "{:?},{},{},{},{},{}\n",
            r.tau, r.total, r.in_data, r.novel, r.non_significant, r.tested
        ));
    }
    out.into_bytes()
}

pub fn ensure_out_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}
