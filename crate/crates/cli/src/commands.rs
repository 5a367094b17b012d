//! One function per subcommand. Each reads its inputs, does all the work,
//! stages its outputs and commits them only on success.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use demandkit::attribution::{aggregate_groups, integrated_gradients, AttributionResult, Stage1Target, Stage2Target};
use demandkit::counterfactual::{run_sweep, sample_listings, OraclePrice, PriceModel, SweepResult, TwoStagePrice};
use demandkit::encoder::{
    format_embeddings, load_external_embeddings, EmbeddingSource, EmbeddingTable, EncoderSource, FeatureSchema,
    NUMERIC_FEATURES,
};
use demandkit::metrics::{assemble_report, collect_predictions, observed_targets, EvalReport, ModelPredictions};
use demandkit::nn::Checkpoint;
use demandkit::ols::{build_design, fit_ols, log_price, predict_ols, HedonicLayout, OlsFit};
use demandkit::simulator::{generate_dataset, AuctionRecord, Dataset, SPLIT_FILES};
use demandkit::stage1::{train_stage1, Stage1Model, STAGE1_TARGET_NAMES};
use demandkit::stage2::{predict_listing, train_direct, train_stage2, Decoder, DirectModel, Stage2Config};
use demandkit::training::LossHistory;

use crate::config::{ModelKind, RunConfig, SweepModel};
use crate::error::{CliError, CliResult, Context};
use crate::output::{Manifest, Staging};

pub const STAGE1_CHECKPOINT: &str = "stage1.ckpt";
pub const STAGE2_CHECKPOINT: &str = "stage2.ckpt";
pub const DIRECT_CHECKPOINT: &str = "direct.ckpt";
pub const STAGE1_EMBEDDINGS: &str = "stage1_embeddings.dev";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Stage1,
    Stage2,
    Direct,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Stage1 => "stage1",
            TrainMode::Stage2 => "stage2",
            TrainMode::Direct => "direct",
        }
    }
}

/// Scalar that `attribute` explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributionTarget {
    /// Stage-1 head output over the feature vector.
    Stage1(usize),
    /// Expected log bid at a rank over the embedding.
    Stage2(usize),
}

impl AttributionTarget {
    pub fn parse(s: &str, j_max: usize) -> CliResult<Self> {
        let bad = || CliError::config(format!("attribution target {s:?}: expected stage1:<output> or stage2:rank<j>"));
        let (stage, what) = s.split_once(':').ok_or_else(bad)?;
        match stage {
            "stage1" => STAGE1_TARGET_NAMES
                .iter()
                .position(|n| *n == what)
                .map(AttributionTarget::Stage1)
                .ok_or_else(bad),
            "stage2" => {
                let rank: usize = what.strip_prefix("rank").and_then(|r| r.parse().ok()).ok_or_else(bad)?;
                if rank < 2 || rank > j_max {
                    return Err(CliError::config(format!("attribution rank {rank} outside 2..={j_max}")));
                }
                Ok(AttributionTarget::Stage2(rank))
            }
            _ => Err(bad()),
        }
    }
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::data(format!("{what} not found at {}", path.display())))
    }
}

fn load_dataset(cfg: &RunConfig, inputs: &mut Vec<PathBuf>) -> CliResult<Dataset> {
    let dir = cfg.data_dir();
    for f in SPLIT_FILES {
        let p = dir.join(f);
        require(&p, "dataset split")?;
        inputs.push(p);
    }
    Dataset::read(&dir).ctx("dataset")
}

fn load_checkpoint(cfg: &RunConfig, name: &str, inputs: &mut Vec<PathBuf>) -> CliResult<Checkpoint> {
    let p = cfg.models_dir().join(name);
    require(&p, "checkpoint")?;
    let ck = Checkpoint::load(&p).ctx("checkpoint")?;
    inputs.push(p);
    Ok(ck)
}

fn included(records: &[AuctionRecord]) -> Vec<AuctionRecord> {
    records.iter().filter(|r| !r.excluded).cloned().collect()
}

/// Embeddings consumed by Stage 2: an external file when configured,
/// otherwise the Stage-1 encoder.
pub enum Embeddings {
    External(EmbeddingTable),
    Stage1(Box<Stage1Model>),
}

impl Embeddings {
    fn load(cfg: &RunConfig, inputs: &mut Vec<PathBuf>) -> CliResult<Self> {
        match cfg.embeddings_path() {
            Some(p) => {
                require(&p, "embedding file")?;
                let t = load_external_embeddings(&p).ctx("embeddings")?;
                inputs.push(p);
                Ok(Embeddings::External(t))
            }
            None => {
                let ck = load_checkpoint(cfg, STAGE1_CHECKPOINT, inputs)?;
                Ok(Embeddings::Stage1(Box::new(Stage1Model::from_checkpoint(&ck).ctx("stage1")?)))
            }
        }
    }

    fn with_source<T>(&self, f: impl FnOnce(&(dyn EmbeddingSource + Sync)) -> T) -> T {
        match self {
            Embeddings::External(t) => f(t),
            Embeddings::Stage1(m) => f(&EncoderSource {
                encoder: &m.encoder,
                schema: &m.schema,
            }),
        }
    }
}

fn finish(command: &str, cfg: &RunConfig, inputs: &[PathBuf], mut staging: Staging) -> CliResult<Vec<PathBuf>> {
    Manifest::new(command, cfg, inputs)?.stage(&mut staging, cfg)?;
    staging.commit()
}

pub fn cmd_simulate(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let ds = generate_dataset(&cfg.ground_truth, &cfg.simulation, cfg.seed).ctx("simulator")?;
    let mut staging = Staging::new(&cfg.out);
    let dir = cfg.data_dir();
    for (name, records) in SPLIT_FILES.iter().zip(ds.splits()) {
        let p = staging.path(&dir.join(name))?;
        demandkit::simulator::write_jsonl(&p, records).ctx("simulator")?;
    }
    finish("simulate", cfg, &[], staging)
}

fn stage_loss(staging: &mut Staging, cfg: &RunConfig, name: &str, h: &LossHistory) -> CliResult<()> {
    staging.write(&cfg.out.join(format!("{name}_loss.csv")), h.to_csv())
}

fn stage_checkpoint(staging: &mut Staging, path: &Path, ck: &Checkpoint) -> CliResult<()> {
    let p = staging.path(path)?;
    ck.save(&p).ctx("checkpoint")
}

pub fn cmd_train(cfg: &RunConfig, mode: TrainMode) -> CliResult<Vec<PathBuf>> {
    let mut inputs = Vec::new();
    let ds = load_dataset(cfg, &mut inputs)?;
    let train = included(&ds.train);
    if train.is_empty() {
        return Err(CliError::data("training split has no usable listings"));
    }
    let models = cfg.models_dir();
    let mut staging = Staging::new(&cfg.out);
    match mode {
        TrainMode::Stage1 => {
            let schema = FeatureSchema::fit(train.iter().map(|r| &r.features)).ctx("stage1")?;
            let (m, h) = train_stage1(&train, &schema, &cfg.stage1, cfg.seed).ctx("stage1")?;
            stage_checkpoint(&mut staging, &models.join(STAGE1_CHECKPOINT), &m.to_checkpoint().ctx("stage1")?)?;
            stage_loss(&mut staging, cfg, "stage1", &h)?;
            let mut table = EmbeddingTable::new(cfg.stage1.embedding_dim);
            for r in ds.splits().into_iter().flatten().filter(|r| !r.excluded) {
                let x = m.schema.vectorize(&r.features).ctx("stage1")?;
                table.insert(&r.listing_id, m.embed(&x).ctx("stage1")?).ctx("stage1")?;
            }
            staging.write(&models.join(STAGE1_EMBEDDINGS), format_embeddings(&table))?;
        }
        TrainMode::Stage2 => {
            let emb = Embeddings::load(cfg, &mut inputs)?;
            let (dec, h) = emb.with_source(|src| train_stage2(src, &train, &cfg.stage2, cfg.seed)).ctx("stage2")?;
            stage_checkpoint(&mut staging, &models.join(STAGE2_CHECKPOINT), &dec.to_checkpoint(&cfg.stage2).ctx("stage2")?)?;
            stage_loss(&mut staging, cfg, "stage2", &h)?;
        }
        TrainMode::Direct => {
            let schema = FeatureSchema::fit(train.iter().map(|r| &r.features)).ctx("direct")?;
            let (m, h) = train_direct(&train, &schema, &cfg.direct, &cfg.stage2, cfg.seed).ctx("direct")?;
            stage_checkpoint(&mut staging, &models.join(DIRECT_CHECKPOINT), &m.to_checkpoint(&cfg.stage2).ctx("direct")?)?;
            stage_loss(&mut staging, cfg, "direct", &h)?;
        }
    }
    finish(&format!("train {}", mode.name()), cfg, &inputs, staging)
}

struct OlsModel {
    layout: HedonicLayout,
    fit: OlsFit,
}

impl OlsModel {
    fn fit(cfg: &RunConfig, train: &[AuctionRecord]) -> CliResult<Self> {
        let (layout, design, y) = build_design(train, &cfg.ols).ctx("ols")?;
        let fit = fit_ols(&design, &y).ctx("ols")?;
        Ok(OlsModel { layout, fit })
    }

    fn predict(&self, r: &AuctionRecord) -> demandkit::Result<f64> {
        Ok(predict_ols(&self.fit, &self.layout.design([&r.features])?)?[0])
    }
}

pub fn cmd_evaluate(cfg: &RunConfig, models: &[ModelKind]) -> CliResult<Vec<PathBuf>> {
    let mut inputs = Vec::new();
    let ds = load_dataset(cfg, &mut inputs)?;
    let mut ts: Option<(Embeddings, Decoder, Stage2Config)> = None;
    let mut de: Option<(DirectModel, Stage2Config)> = None;
    let mut ols = None;
    for m in models {
        match m {
            ModelKind::Ts if ts.is_none() => {
                let ck = load_checkpoint(cfg, STAGE2_CHECKPOINT, &mut inputs)?;
                let (dec, c) = Decoder::from_checkpoint(&ck).ctx("stage2")?;
                ts = Some((Embeddings::load(cfg, &mut inputs)?, dec, c));
            }
            ModelKind::De if de.is_none() => {
                let ck = load_checkpoint(cfg, DIRECT_CHECKPOINT, &mut inputs)?;
                de = Some(DirectModel::from_checkpoint(&ck).ctx("direct")?);
            }
            ModelKind::Ols if ols.is_none() => ols = Some(OlsModel::fit(cfg, &included(&ds.train))?),
            _ => {}
        }
    }
    let j_max = ts
        .as_ref()
        .map(|t| t.2.j_max)
        .or(de.as_ref().map(|d| d.1.j_max))
        .unwrap_or(cfg.stage2.j_max);

    let score = |records: &[AuctionRecord]| -> CliResult<(EvalReport, Vec<ModelPredictions>)> {
        let targets = observed_targets(records, j_max);
        let mut preds = Vec::new();
        for m in models {
            let p = match m {
                ModelKind::Ts => {
                    let (emb, dec, c) = ts.as_ref().expect("loaded above");
                    let model = c.structural_model().ctx("stage2")?;
                    emb.with_source(|src| {
                        collect_predictions("ts", records, &targets, |r| {
                            Ok(predict_listing(src, dec, &model, &r.listing_id, &r.features)?.1.expected_log_bids)
                        })
                    })
                    .ctx("evaluate ts")?
                }
                ModelKind::De => {
                    let (dm, c) = de.as_ref().expect("loaded above");
                    let model = c.structural_model().ctx("direct")?;
                    collect_predictions("de", records, &targets, |r| {
                        Ok(predict_listing(dm, &dm.decoder, &model, &r.listing_id, &r.features)?.1.expected_log_bids)
                    })
                    .ctx("evaluate de")?
                }
                ModelKind::Ols => {
                    let o = ols.as_ref().expect("fitted above");
                    collect_predictions("ols", records, &targets, |r| Ok(vec![o.predict(r)?])).ctx("evaluate ols")?
                }
            };
            preds.push(p);
        }
        let report = assemble_report(&preds, &targets, cfg.evaluation.hit_tolerance).ctx("evaluate")?;
        Ok((report, preds))
    };

    let mut staging = Staging::new(&cfg.out);
    let (val, val_preds) = score(&ds.validation)?;
    staging.write(&cfg.out.join("metrics.csv"), val.to_csv())?;
    let mut table = format!("validation\n{}", val.to_table());
    let mut pred_csv = String::from("split,model,listing_id,rank,predicted_log_bid\n");
    append_predictions(&mut pred_csv, "validation", &val_preds);
    if observed_targets(&ds.zero_shot, j_max).is_empty() {
        log::warn!("zero-shot slice is empty; no zero-shot metrics written");
    } else {
        let (zs, zs_preds) = score(&ds.zero_shot)?;
        staging.write(&cfg.out.join("metrics_zero_shot.csv"), zs.to_csv())?;
        write!(table, "\nzero-shot\n{}", zs.to_table()).unwrap();
        append_predictions(&mut pred_csv, "zero_shot", &zs_preds);
    }
    staging.write(&cfg.out.join("comparison.txt"), &table)?;
    staging.write(&cfg.out.join("predictions.csv"), pred_csv)?;
    finish("evaluate", cfg, &inputs, staging)
}

fn append_predictions(out: &mut String, split: &str, preds: &[ModelPredictions]) {
    for m in preds {
        for (id, p) in &m.predictions {
            for (k, v) in p.iter().enumerate() {
                writeln!(out, "{split},{},{id},{},{v:?}", m.model, k + 2).unwrap();
            }
        }
    }
}

fn feature_groups(schema: &FeatureSchema) -> Vec<(String, Vec<usize>)> {
    let labels = schema.labels();
    let mut groups: Vec<(String, Vec<usize>)> = labels[..NUMERIC_FEATURES]
        .iter()
        .enumerate()
        .map(|(i, l)| (l.clone(), vec![i]))
        .collect();
    let b = schema.brands.len();
    groups.push(("brand".into(), (NUMERIC_FEATURES..NUMERIC_FEATURES + b).collect()));
    groups.push(("body_style".into(), (NUMERIC_FEATURES + b..schema.dim()).collect()));
    groups
}

pub fn cmd_attribute(cfg: &RunConfig, listings: &[String], target: &str) -> CliResult<Vec<PathBuf>> {
    let mut inputs = Vec::new();
    let ds = load_dataset(cfg, &mut inputs)?;
    let target = AttributionTarget::parse(target, cfg.stage2.j_max)?;
    let by_id: BTreeMap<&str, &AuctionRecord> = ds
        .splits()
        .into_iter()
        .flatten()
        .map(|r| (r.listing_id.as_str(), r))
        .collect();
    let chosen: Vec<&AuctionRecord> = if listings.is_empty() {
        ds.validation.iter().filter(|r| !r.excluded).take(cfg.attribution.count).collect()
    } else {
        listings
            .iter()
            .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| CliError::data(format!("unknown listing {id:?}"))))
            .collect::<CliResult<_>>()?
    };
    if chosen.is_empty() {
        return Err(CliError::data("no listings to attribute"));
    }
    let stage1_ck = load_checkpoint(cfg, STAGE1_CHECKPOINT, &mut inputs)?;
    let m1 = Stage1Model::from_checkpoint(&stage1_ck).ctx("stage1")?;
    let steps = cfg.attribution.steps;
    let mut results: Vec<(&AuctionRecord, AttributionResult, Vec<String>, Option<Vec<(String, f64)>>)> = Vec::new();
    match target {
        AttributionTarget::Stage1(k) => {
            let t = Stage1Target { model: &m1, output: k };
            let groups = feature_groups(&m1.schema);
            for r in &chosen {
                let x = m1.schema.vectorize(&r.features).ctx("attribution")?;
                let res = integrated_gradients(&t, &x, &vec![0.0; x.len()], steps, "zero").ctx("attribution")?;
                let agg = aggregate_groups(&res, &groups).ctx("attribution")?;
                results.push((r, res, m1.schema.labels(), Some(agg)));
            }
        }
        AttributionTarget::Stage2(rank) => {
            if cfg.embeddings_path().is_some() {
                return Err(CliError::config("attribution over embeddings needs the stage-1 encoder, not an external file"));
            }
            let ck = load_checkpoint(cfg, STAGE2_CHECKPOINT, &mut inputs)?;
            let (dec, c2) = Decoder::from_checkpoint(&ck).ctx("stage2")?;
            let model = c2.structural_model().ctx("stage2")?;
            let t = Stage2Target {
                decoder: &dec,
                model: &model,
                rank,
            };
            let labels: Vec<String> = (0..dec.input_dim()).map(|i| format!("e{i}")).collect();
            for r in &chosen {
                let e = m1.embed(&m1.schema.vectorize(&r.features).ctx("attribution")?).ctx("attribution")?;
                let res = integrated_gradients(&t, e.values(), &vec![0.0; e.dim()], steps, "zero").ctx("attribution")?;
                results.push((r, res, labels.clone(), None));
            }
        }
    }
    let dir = cfg.out.join("attribution");
    let mut staging = Staging::new(&cfg.out);
    let mut summary = String::from("listing_id,f_input,f_baseline,completeness_gap,tolerance,pass\n");
    for (r, res, labels, groups) in &results {
        staging.write(&dir.join(format!("{}.csv", r.listing_id)), res.to_csv(labels))?;
        if let Some(g) = groups {
            staging.write(&dir.join(format!("{}_groups.csv", r.listing_id)), res.groups_csv(g))?;
        }
        writeln!(
            summary,
            "{},{:?},{:?},{:?},{:?},{}",
            r.listing_id,
            res.f_input,
            res.f_baseline,
            res.completeness_gap,
            res.tolerance(),
            res.passes()
        )
        .unwrap();
        if !res.passes() {
            log::warn!("{}: completeness gap {} above tolerance {}", r.listing_id, res.completeness_gap, res.tolerance());
        }
    }
    staging.write(&dir.join("summary.csv"), summary)?;
    finish("attribute", cfg, &inputs, staging)
}

pub fn cmd_sweep(cfg: &RunConfig, model: SweepModel) -> CliResult<Vec<PathBuf>> {
    let mut inputs = Vec::new();
    let ds = load_dataset(cfg, &mut inputs)?;
    let spec = cfg.sweep.spec();
    let pool: Vec<AuctionRecord> = included(&ds.validation);
    let sample = sample_listings(&pool, spec.sample_size, cfg.seed);
    let result: SweepResult = match model {
        SweepModel::Oracle => {
            let grid = cfg.ground_truth.grid().ctx("sweep")?;
            let mut c2 = cfg.stage2.clone();
            c2.n_min = grid.n_min;
            c2.n_max = grid.n_max;
            let sm = c2.structural_model().ctx("sweep")?;
            let oracle = OraclePrice {
                map: &cfg.ground_truth,
                model: &sm,
            };
            run_sweep(&oracle, &sample, &spec).ctx("sweep")?
        }
        SweepModel::TwoStage => {
            if cfg.embeddings_path().is_some() {
                return Err(CliError::config("sweeps re-encode edited features and need the stage-1 encoder"));
            }
            let m1 = Stage1Model::from_checkpoint(&load_checkpoint(cfg, STAGE1_CHECKPOINT, &mut inputs)?).ctx("stage1")?;
            let (dec, c2) =
                Decoder::from_checkpoint(&load_checkpoint(cfg, STAGE2_CHECKPOINT, &mut inputs)?).ctx("stage2")?;
            let sm = c2.structural_model().ctx("stage2")?;
            let src = EncoderSource {
                encoder: &m1.encoder,
                schema: &m1.schema,
            };
            let price = TwoStagePrice {
                source: &src,
                decoder: &dec,
                model: &sm,
            };
            run_sweep(&price as &dyn PriceModel, &sample, &spec).ctx("sweep")?
        }
    };
    let mut staging = Staging::new(&cfg.out);
    staging.write(&cfg.out.join("sweep_curves.csv"), result.curves_csv())?;
    staging.write(&cfg.out.join("sweep_aggregate.csv"), result.aggregate_csv().ctx("sweep")?)?;
    finish("sweep", cfg, &inputs, staging)
}

pub fn cmd_ols(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let mut inputs = Vec::new();
    let ds = load_dataset(cfg, &mut inputs)?;
    let o = OlsModel::fit(cfg, &included(&ds.train))?;
    let mut preds = String::from("split,listing_id,predicted_log_price,observed_log_price\n");
    for (split, records) in ["train", "validation", "zero_shot"].iter().zip(ds.splits()) {
        for r in records.iter().filter(|r| !r.excluded) {
            let p = o.predict(r).ctx("ols")?;
            let obs = log_price(r).ctx("ols")?;
            writeln!(preds, "{split},{},{p:?},{obs:?}", r.listing_id).unwrap();
        }
    }
    let summary = format!(
        "{{\n  \"n\": {},\n  \"columns\": {},\n  \"r2\": {:?},\n  \"rmse\": {:?}\n}}\n",
        o.fit.n,
        o.fit.columns.len(),
        o.fit.r2,
        o.fit.rmse
    );
    let mut staging = Staging::new(&cfg.out);
    staging.write(&cfg.out.join("ols_coefficients.csv"), o.fit.to_csv())?;
    staging.write(&cfg.out.join("ols_predictions.csv"), preds)?;
    staging.write(&cfg.out.join("ols_summary.json"), summary)?;
    finish("ols", cfg, &inputs, staging)
}
