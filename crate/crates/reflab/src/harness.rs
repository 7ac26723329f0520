//! Experiment surface: dataset files (JSONL), configuration, the staged
//! generation/diagnosis/adversarial pipeline, evaluation, perturbation
//! reports, dataset statistics, and report rendering.
//!
//! Every file this module writes is canonical: object keys sorted,
//! floats as shortest round-trip decimals, no timestamps — identical
//! inputs produce byte-identical outputs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{
    nj_filter, shuffle_tokens, stage1_split, stage2_adversarialize, stage3_validate,
    AnnotatorPanel, VoteRecord,
};
use crate::error::{Error, Result};
use crate::geometry::correct_at_iou;
use crate::model::{predict_box, EncoderKind, ModelParams, QaInstance, Tensors, TrainingExample};
use crate::rng::mix;
use crate::training::{
    train, ContrastiveConfig, EpochMetrics, GroundingData, MtlConfig, QaData, Regime, TrainConfig,
};
use crate::vocab::Pos;
use crate::worldgen::{
    generate_instance, generate_qa, Expression, Form, GenConfig, Parse, Scene,
};

pub const SCHEMA_VERSION: u32 = 1;

const GEN_TAG: u64 = 0x67656e;
const QA_TAG: u64 = 0x7161;
const DIAG_TAG: u64 = 0x6469_6167;
const ADV_TAG: u64 = 0x616476;
const SHUF_TAG: u64 = 0x5348_5546;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    /// Test-pool instances not yet diagnosed into easy/hard.
    Test,
    Easy,
    Hard,
    Adv,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::Easy => "easy",
            Split::Hard => "hard",
            Split::Adv => "adv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub stage_flags: Vec<String>,
}

/// One dataset line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub schema_version: u32,
    pub instance_id: u64,
    pub scene: Scene,
    pub tokens: Vec<String>,
    pub pos: Vec<Pos>,
    pub parse: Option<Parse>,
    pub gold_box: u32,
    pub form: Form,
    pub split: Split,
    pub provenance: Provenance,
}

impl InstanceRecord {
    pub fn new(scene: Scene, expr: Expression, split: Split, seed: u64, flag: &str) -> Self {
        InstanceRecord {
            schema_version: SCHEMA_VERSION,
            instance_id: expr.expr_id,
            tokens: expr.tokens,
            pos: expr.pos,
            parse: expr.parse,
            gold_box: expr.gold_box,
            form: expr.form,
            scene,
            split,
            provenance: Provenance {
                seed,
                stage_flags: vec![flag.to_string()],
            },
        }
    }

    pub fn expression(&self) -> Expression {
        Expression {
            expr_id: self.instance_id,
            tokens: self.tokens.clone(),
            pos: self.pos.clone(),
            parse: self.parse,
            gold_box: self.gold_box,
            form: self.form,
        }
    }

    pub fn training_example(&self) -> TrainingExample {
        TrainingExample::new(self.scene.clone(), self.expression())
    }
}

/// Serialize with sorted object keys (via the Value intermediate).
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_value(value)?.to_string())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = String::new();
    for r in records {
        out.push_str(&to_canonical_json(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::Malformed {
        file: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            file: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_dataset(path: &Path) -> Result<Vec<InstanceRecord>> {
    let records: Vec<InstanceRecord> = read_jsonl(path)?;
    for (i, r) in records.iter().enumerate() {
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Malformed {
                file: path.display().to_string(),
                line: i + 1,
                msg: format!(
                    "schema_version {} != supported {SCHEMA_VERSION}",
                    r.schema_version
                ),
            });
        }
    }
    Ok(records)
}

/// Everything one experiment needs; all fields have defaults so a config
/// file may specify any subset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub n_instances: usize,
    pub n_qa: usize,
    pub train_frac: f64,
    pub dev_frac: f64,
    pub encoder: EncoderKind,
    pub regime: Regime,
    pub noise_rate: f64,
    pub iou_threshold: f64,
    pub gen: GenConfig,
    /// Generator for QA scenes; falls back to `gen` when absent.
    pub qa_gen: Option<GenConfig>,
    pub train: TrainConfig,
    pub contrastive: ContrastiveConfig,
    pub mtl: MtlConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_instances: 2000,
            n_qa: 400,
            train_frac: 0.6,
            dev_frac: 0.1,
            encoder: EncoderKind::Seq,
            regime: Regime::Ce,
            noise_rate: 0.03,
            iou_threshold: 0.5,
            gen: GenConfig::default(),
            qa_gen: None,
            train: TrainConfig::default(),
            contrastive: ContrastiveConfig::default(),
            mtl: MtlConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_instances == 0
            || self.train_frac < 0.0
            || self.dev_frac < 0.0
            || self.train_frac + self.dev_frac >= 1.0
            || !(0.0..=1.0).contains(&self.noise_rate)
            || !(0.0..1.0).contains(&self.iou_threshold)
        {
            return Err(Error::BadConfig(
                "experiment: bad fractions/noise/threshold".into(),
            ));
        }
        self.gen.validate()?;
        if let Some(qa_gen) = &self.qa_gen {
            qa_gen.validate()?;
        }
        self.train.validate()?;
        self.contrastive.validate()?;
        self.mtl.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Malformed {
            file: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Malformed {
                file: path.display().to_string(),
                line: e.line(),
                msg: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Generate the raw dataset: train/dev assigned by index fraction, the
/// remainder entering the test pool for stage-1 diagnosis.
pub fn generate_records(seed: u64, cfg: &ExperimentConfig) -> Result<Vec<InstanceRecord>> {
    cfg.validate()?;
    let n = cfg.n_instances;
    let n_train = (n as f64 * cfg.train_frac) as usize;
    let n_dev = (n as f64 * cfg.dev_frac) as usize;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let iseed = mix(mix(seed, GEN_TAG), i as u64);
        let (scene, expr) = generate_instance(iseed, &cfg.gen)?;
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        };
        out.push(InstanceRecord::new(scene, expr, split, seed, "generated"));
    }
    Ok(out)
}

pub fn generate_qa_instances(seed: u64, cfg: &ExperimentConfig) -> Result<Vec<QaInstance>> {
    let gen = cfg.qa_gen.as_ref().unwrap_or(&cfg.gen);
    (0..cfg.n_qa)
        .map(|i| {
            let (scene, qa) = generate_qa(mix(mix(seed, QA_TAG), i as u64), gen)?;
            Ok(QaInstance { scene, qa })
        })
        .collect()
}

/// Stage 1: run the bag-of-words panel over the test pool and relabel
/// each instance easy or hard.
pub fn diagnose_records(
    records: &mut [InstanceRecord],
    seed: u64,
    cfg: &ExperimentConfig,
) -> Result<Vec<VoteRecord>> {
    let panel = AnnotatorPanel::stage1(mix(seed, DIAG_TAG), cfg.noise_rate);
    let pool: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].split == Split::Test)
        .collect();
    let instances: Vec<(Scene, Expression)> = pool
        .iter()
        .map(|&i| (records[i].scene.clone(), records[i].expression()))
        .collect();
    let outcome = stage1_split(&instances, &panel);
    for &j in &outcome.easy {
        let r = &mut records[pool[j]];
        r.split = Split::Easy;
        r.provenance.stage_flags.push("stage1_easy".into());
    }
    for &j in &outcome.hard {
        let r = &mut records[pool[j]];
        r.split = Split::Hard;
        r.provenance.stage_flags.push("stage1_hard".into());
    }
    Ok(outcome.votes)
}

/// Stages 2+3: swap noun phrases on hard instances toward the annotators'
/// confusion target, keep only swaps a full-parse panel re-validates.
pub fn adversarial_records(
    records: &[InstanceRecord],
    votes: &[VoteRecord],
    seed: u64,
    cfg: &ExperimentConfig,
) -> Result<Vec<InstanceRecord>> {
    let votes_by_id: BTreeMap<u64, &VoteRecord> =
        votes.iter().map(|v| (v.instance_id, v)).collect();
    let panel3 = AnnotatorPanel::stage3(mix(seed, ADV_TAG), cfg.noise_rate);
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.split == Split::Hard) {
        let Some(vote) = votes_by_id.get(&r.instance_id) else {
            continue;
        };
        let expr = r.expression();
        let adv_id = mix(r.instance_id, ADV_TAG);
        let Ok(adv) = stage2_adversarialize(&r.scene, &expr, vote, adv_id) else {
            continue;
        };
        if !stage3_validate(&r.scene, &adv, &panel3) {
            continue;
        }
        let mut rec = InstanceRecord::new(r.scene.clone(), adv, Split::Adv, seed, "stage2_swap");
        rec.provenance.stage_flags.push("stage3_validated".into());
        out.push(rec);
    }
    Ok(out)
}

/// Per-split accuracy at the given IoU threshold. Splits with no
/// instances are absent from the map; "test" aggregates easy + hard and
/// "overall" covers every record.
pub fn evaluate(
    params: &ModelParams,
    records: &[InstanceRecord],
    threshold: f64,
) -> Result<BTreeMap<String, f64>> {
    let mut hits: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut add = |key: &'static str, ok: bool| {
        let e = hits.entry(key).or_insert((0, 0));
        e.1 += 1;
        if ok {
            e.0 += 1;
        }
    };
    for r in records {
        let pred = predict_box(params, &r.scene, &r.tokens)?;
        let ok = correct_at_iou(
            r.scene.get(pred).unwrap(),
            r.scene.get(r.gold_box).unwrap(),
            threshold,
        );
        add(r.split.as_str(), ok);
        if matches!(r.split, Split::Easy | Split::Hard) {
            add("test", ok);
        }
        add("overall", ok);
    }
    Ok(hits
        .into_iter()
        .map(|(k, (c, n))| (k.to_string(), c as f64 / n as f64))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbRow {
    pub n: usize,
    pub original: f64,
    pub shuf: f64,
    pub nj: f64,
    /// Instances with no nouns/adjectives, excluded from the nj column.
    pub nj_excluded: usize,
}

/// Accuracy under original / shuffled / noun+adjective-only tokens for
/// each evaluation split present in the dataset.
pub fn perturbation_report(
    params: &ModelParams,
    records: &[InstanceRecord],
    threshold: f64,
    seed: u64,
) -> Result<BTreeMap<String, PerturbRow>> {
    let mut acc: BTreeMap<&str, (usize, usize, usize, usize, usize)> = BTreeMap::new();
    for r in records {
        if !matches!(r.split, Split::Easy | Split::Hard | Split::Adv) {
            continue;
        }
        let gold = r.scene.get(r.gold_box).unwrap();
        let correct = |tokens: &[String]| -> Result<bool> {
            let pred = predict_box(params, &r.scene, tokens)?;
            Ok(correct_at_iou(r.scene.get(pred).unwrap(), gold, threshold))
        };
        let expr = r.expression();
        let shuf = shuffle_tokens(&expr, mix(mix(seed, SHUF_TAG), r.instance_id));
        let e = acc.entry(r.split.as_str()).or_insert((0, 0, 0, 0, 0));
        e.0 += 1;
        if correct(&r.tokens)? {
            e.1 += 1;
        }
        if correct(&shuf.tokens)? {
            e.2 += 1;
        }
        match nj_filter(&expr) {
            Ok(nj) => {
                if correct(&nj.tokens)? {
                    e.3 += 1;
                }
            }
            Err(_) => e.4 += 1,
        }
    }
    Ok(acc
        .into_iter()
        .map(|(k, (n, o, s, j, x))| {
            let nj_n = n - x;
            (
                k.to_string(),
                PerturbRow {
                    n,
                    original: o as f64 / n as f64,
                    shuf: s as f64 / n as f64,
                    nj: if nj_n > 0 { j as f64 / nj_n as f64 } else { 0.0 },
                    nj_excluded: x,
                },
            )
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub count: usize,
    pub mean_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub splits: BTreeMap<String, SplitStats>,
    pub relation_counts: BTreeMap<String, usize>,
    pub category_counts: BTreeMap<String, usize>,
}

pub fn dataset_stats(records: &[InstanceRecord]) -> DatasetStats {
    let mut splits: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut relation_counts = BTreeMap::new();
    let mut category_counts = BTreeMap::new();
    for r in records {
        let e = splits.entry(r.split.as_str().to_string()).or_insert((0, 0));
        e.0 += 1;
        e.1 += r.tokens.len();
        if let Some(parse) = &r.parse {
            if let Some(rel) = parse.relation {
                let name = serde_json::to_value(rel).unwrap();
                *relation_counts
                    .entry(name.as_str().unwrap().to_string())
                    .or_insert(0) += 1;
            }
        }
        let gold = r.scene.get(r.gold_box).unwrap();
        *category_counts
            .entry(gold.category.token().to_string())
            .or_insert(0) += 1;
    }
    DatasetStats {
        total: records.len(),
        splits: splits
            .into_iter()
            .map(|(k, (n, len))| {
                (
                    k,
                    SplitStats {
                        count: n,
                        mean_length: len as f64 / n as f64,
                    },
                )
            })
            .collect(),
        relation_counts,
        category_counts,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub config_sha256: String,
    pub tool_version: String,
}

pub fn build_manifest(cfg: &ExperimentConfig, seed: u64) -> Result<Manifest> {
    let canonical = to_canonical_json(cfg)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(Manifest {
        schema_version: SCHEMA_VERSION,
        seed,
        config_sha256: format!("{digest:x}"),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    schema_version: u32,
    encoder: EncoderKind,
    dim: usize,
    shapes: BTreeMap<String, Vec<usize>>,
    tensors: Tensors,
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut shapes = BTreeMap::new();
    for (name, v) in params.tensors.fields() {
        let rows = match name {
            "q" | "c" | "d0" => 1,
            _ => v.len() / params.dim.max(1),
        };
        shapes.insert(name.to_string(), vec![rows, v.len() / rows]);
    }
    let ck = Checkpoint {
        schema_version: SCHEMA_VERSION,
        encoder: params.encoder,
        dim: params.dim,
        shapes,
        tensors: params.tensors.clone(),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_canonical_json(&ck)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::Malformed {
        file: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        file: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let malformed = |msg: String| Error::Malformed {
        file: path.display().to_string(),
        line: 0,
        msg,
    };
    if ck.schema_version != SCHEMA_VERSION {
        return Err(malformed(format!(
            "checkpoint schema_version {}",
            ck.schema_version
        )));
    }
    let want = Tensors::zeros(ck.dim);
    for ((name, got), (_, expect)) in ck.tensors.fields().iter().zip(want.fields()) {
        if got.len() != expect.len() {
            return Err(malformed(format!(
                "tensor `{name}` has {} entries, expected {}",
                got.len(),
                expect.len()
            )));
        }
        let shape = ck
            .shapes
            .get(*name)
            .ok_or_else(|| malformed(format!("missing shape for `{name}`")))?;
        if shape.iter().product::<usize>() != got.len() {
            return Err(malformed(format!("shape mismatch for `{name}`")));
        }
    }
    let params = ModelParams {
        encoder: ck.encoder,
        dim: ck.dim,
        tensors: ck.tensors,
    };
    params.tensors.check_finite("checkpoint load")?;
    Ok(params)
}

pub fn records_for_split(records: &[InstanceRecord], split: Split) -> Vec<TrainingExample> {
    records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| r.training_example())
        .collect()
}

/// Train per the config's regime on a diagnosed dataset; returns the
/// final parameters and the metrics log.
pub fn train_from_records(
    records: &[InstanceRecord],
    seed: u64,
    cfg: &ExperimentConfig,
) -> Result<(ModelParams, Vec<EpochMetrics>)> {
    let train_set = records_for_split(records, Split::Train);
    let dev_set = records_for_split(records, Split::Dev);
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    let needs_qa = matches!(cfg.regime, Regime::Mtl | Regime::Tl);
    let qa_all = if needs_qa {
        generate_qa_instances(seed, cfg)?
    } else {
        Vec::new()
    };
    let qa_split = (qa_all.len() * 4) / 5;
    let qa = needs_qa.then(|| QaData {
        train: &qa_all[..qa_split],
        dev: &qa_all[qa_split..],
    });
    train(
        cfg.encoder,
        cfg.regime,
        &GroundingData {
            train: &train_set,
            dev: &dev_set,
        },
        qa.as_ref(),
        &tcfg,
        &cfg.contrastive,
        &cfg.mtl,
    )
}

pub fn render_markdown_report(
    eval: &BTreeMap<String, f64>,
    stats: &DatasetStats,
    perturb: Option<&BTreeMap<String, PerturbRow>>,
) -> String {
    let mut md = String::new();
    md.push_str("# Experiment report\n\n## Split accuracy\n\n");
    md.push_str("| split | accuracy |\n|---|---|\n");
    for key in ["dev", "test", "easy", "hard", "adv", "train", "overall"] {
        if let Some(v) = eval.get(key) {
            md.push_str(&format!("| {key} | {v:.4} |\n"));
        }
    }
    if let Some(p) = perturb {
        md.push_str("\n## Perturbations\n\n| split | n | original | shuf | n+j | n+j excluded |\n|---|---|---|---|---|---|\n");
        for (k, row) in p {
            md.push_str(&format!(
                "| {k} | {} | {:.4} | {:.4} | {:.4} | {} |\n",
                row.n, row.original, row.shuf, row.nj, row.nj_excluded
            ));
        }
    }
    md.push_str("\n## Dataset\n\n| split | count | mean length |\n|---|---|---|\n");
    for (k, s) in &stats.splits {
        md.push_str(&format!("| {k} | {} | {:.2} |\n", s.count, s.mean_length));
    }
    md.push_str("\n### Relations\n\n| relation | count |\n|---|---|\n");
    for (k, n) in &stats.relation_counts {
        md.push_str(&format!("| {k} | {n} |\n"));
    }
    md.push_str("\n### Gold-box categories\n\n| category | count |\n|---|---|\n");
    for (k, n) in &stats.category_counts {
        md.push_str(&format!("| {k} | {n} |\n"));
    }
    md
}

pub fn render_csv_report(
    eval: &BTreeMap<String, f64>,
    stats: &DatasetStats,
    perturb: Option<&BTreeMap<String, PerturbRow>>,
) -> String {
    let mut csv = String::from("table,key,metric,value\n");
    for (k, v) in eval {
        csv.push_str(&format!("accuracy,{k},accuracy,{v}\n"));
    }
    if let Some(p) = perturb {
        for (k, row) in p {
            csv.push_str(&format!("perturbation,{k},original,{}\n", row.original));
            csv.push_str(&format!("perturbation,{k},shuf,{}\n", row.shuf));
            csv.push_str(&format!("perturbation,{k},nj,{}\n", row.nj));
            csv.push_str(&format!("perturbation,{k},nj_excluded,{}\n", row.nj_excluded));
        }
    }
    for (k, s) in &stats.splits {
        csv.push_str(&format!("dataset,{k},count,{}\n", s.count));
        csv.push_str(&format!("dataset,{k},mean_length,{}\n", s.mean_length));
    }
    for (k, n) in &stats.relation_counts {
        csv.push_str(&format!("relations,{k},count,{n}\n"));
    }
    for (k, n) in &stats.category_counts {
        csv.push_str(&format!("categories,{k},count,{n}\n"));
    }
    csv
}

pub struct PipelineOutputs {
    pub dataset: PathBuf,
    pub votes: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub eval: PathBuf,
    pub report_md: PathBuf,
    pub report_csv: PathBuf,
    pub manifest: PathBuf,
    pub eval_map: BTreeMap<String, f64>,
}

/// Run generate -> diagnose -> adversarial -> train -> eval -> report
/// into `out`. Byte-identical across runs with the same (cfg, seed).
pub fn run_pipeline(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<PipelineOutputs> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut records = generate_records(seed, cfg)?;
    let votes = diagnose_records(&mut records, seed, cfg)?;
    let adv = adversarial_records(&records, &votes, seed, cfg)?;
    records.extend(adv);

    let dataset = out.join("dataset.jsonl");
    let votes_path = out.join("votes.jsonl");
    write_jsonl(&dataset, &records)?;
    write_jsonl(&votes_path, &votes)?;

    let (params, log) = train_from_records(&records, seed, cfg)?;
    let metrics = out.join("metrics.jsonl");
    write_jsonl(&metrics, &log)?;
    let checkpoint = out.join("checkpoint.json");
    save_checkpoint(&checkpoint, &params)?;

    let eval_map = evaluate(&params, &records, cfg.iou_threshold)?;
    let eval_path = out.join("eval.json");
    fs::write(&eval_path, to_canonical_json(&eval_map)? + "\n")?;

    let stats = dataset_stats(&records);
    let perturb = perturbation_report(&params, &records, cfg.iou_threshold, seed)?;
    let report_md = out.join("report.md");
    let report_csv = out.join("report.csv");
    fs::write(&report_md, render_markdown_report(&eval_map, &stats, Some(&perturb)))?;
    fs::write(&report_csv, render_csv_report(&eval_map, &stats, Some(&perturb)))?;

    let manifest = out.join("manifest.json");
    fs::write(&manifest, to_canonical_json(&build_manifest(cfg, seed)?)? + "\n")?;

    Ok(PipelineOutputs {
        dataset,
        votes: votes_path,
        metrics,
        checkpoint,
        eval: eval_path,
        report_md,
        report_csv,
        manifest,
        eval_map,
    })
}

/// Append canonical JSONL lines (used by the CLI for metrics).
pub fn append_jsonl<T: Serialize>(file: &mut fs::File, record: &T) -> Result<()> {
    writeln!(file, "{}", to_canonical_json(record)?)?;
    Ok(())
}
