//! Small end-to-end runs through simulation, both trainers, evaluation,
//! attribution and sweeps.

use demandkit::attribution::{integrated_gradients, Stage1Target, Stage2Target, DEFAULT_STEPS};
use demandkit::counterfactual::{monotonicity_report, run_sweep, sample_listings, SweepSpec, TwoStagePrice};
use demandkit::encoder::{EncoderSource, FeatureSchema};
use demandkit::metrics::{assemble_report, collect_predictions, observed_targets, DEFAULT_HIT_TOLERANCE};
use demandkit::ols::{build_design, fit_ols, predict_ols, HedonicSpec};
use demandkit::simulator::{generate_dataset, AuctionRecord, GroundTruthMap, SimulationConfig};
use demandkit::stage1::{train_stage1, Stage1Config};
use demandkit::stage2::{predict_listing, train_direct, train_stage2, DirectConfig, Stage2Config};
use demandkit::structural::QuadratureConfig;

fn small_data(seed: u64) -> (Vec<AuctionRecord>, Vec<AuctionRecord>) {
    let cfg = SimulationConfig {
        count: 240,
        ..SimulationConfig::default()
    };
    let ds = generate_dataset(&GroundTruthMap::default(), &cfg, seed).unwrap();
    let train = ds.train.into_iter().filter(|r| !r.excluded).collect();
    (train, ds.validation)
}

fn small_stage1() -> Stage1Config {
    let mut c = Stage1Config {
        hidden: 16,
        embedding_dim: 8,
        epochs: 4,
        ..Stage1Config::default()
    };
    c.optimizer.warmup_steps = 5;
    c
}

fn small_stage2() -> Stage2Config {
    let mut c = Stage2Config {
        kappa: 2,
        n_min: 2,
        n_max: 20,
        epochs: 2,
        quadrature: QuadratureConfig {
            points: 128,
            ..QuadratureConfig::default()
        },
        ..Stage2Config::default()
    };
    c.optimizer.warmup_steps = 4;
    c
}

#[test]
fn two_stage_direct_and_ols_report() {
    let (train, val) = small_data(21);
    let schema = FeatureSchema::fit(train.iter().map(|r| &r.features)).unwrap();
    let (m1, h1) = train_stage1(&train, &schema, &small_stage1(), 21).unwrap();
    assert!(h1.final_epoch_mean().unwrap().is_finite());
    let src = EncoderSource {
        encoder: &m1.encoder,
        schema: &m1.schema,
    };
    let c2 = small_stage2();
    let (dec, h2) = train_stage2(&src, &train, &c2, 21).unwrap();
    let first = h2.epoch_means()[0];
    assert!(h2.final_epoch_mean().unwrap() <= first * 1.5);
    let (dm, _) = train_direct(&train, &schema, &DirectConfig { hidden: 16, embedding_dim: 8 }, &c2, 21).unwrap();
    let model = c2.structural_model().unwrap();

    let targets = observed_targets(&val, c2.j_max);
    let ts = collect_predictions("ts", &val, &targets, |r| {
        Ok(predict_listing(&src, &dec, &model, &r.listing_id, &r.features)?.1.expected_log_bids)
    })
    .unwrap();
    let de = collect_predictions("de", &val, &targets, |r| {
        Ok(predict_listing(&dm, &dm.decoder, &model, &r.listing_id, &r.features)?.1.expected_log_bids)
    })
    .unwrap();
    let (layout, design, y) = build_design(&train, &HedonicSpec::default()).unwrap();
    let fit = fit_ols(&design, &y).unwrap();
    let ols = collect_predictions("ols", &val, &targets, |r| {
        let d = layout.design([&r.features])?;
        predict_ols(&fit, &d)
    })
    .unwrap();
    let report = assemble_report(&[ts, de, ols], &targets, DEFAULT_HIT_TOLERANCE).unwrap();
    // Four ranks for each structural model, one for OLS.
    assert_eq!(report.rows.len(), 9);
    for r in &report.rows {
        assert_eq!(r.metrics.n, targets.len());
        assert!(r.metrics.rmse_log.is_finite() && r.metrics.rmse_log > 0.0);
    }
    let table = report.to_table();
    assert!(table.contains("ts") && table.contains("de") && table.contains("ols"));
}

#[test]
fn trained_models_attribute_and_sweep() {
    let (train, val) = small_data(5);
    let schema = FeatureSchema::fit(train.iter().map(|r| &r.features)).unwrap();
    let (m1, _) = train_stage1(&train, &schema, &small_stage1(), 5).unwrap();
    let src = EncoderSource {
        encoder: &m1.encoder,
        schema: &m1.schema,
    };
    let c2 = Stage2Config {
        epochs: 1,
        ..small_stage2()
    };
    let (dec, _) = train_stage2(&src, &train, &c2, 5).unwrap();
    let model = c2.structural_model().unwrap();

    let x = schema.vectorize(&val[0].features).unwrap();
    let t1 = Stage1Target { model: &m1, output: 0 };
    let r1 = integrated_gradients(&t1, &x, &vec![0.0; x.len()], DEFAULT_STEPS, "zero").unwrap();
    assert!(r1.passes(), "gap {} tol {}", r1.completeness_gap, r1.tolerance());

    let e = m1.embed(&x).unwrap();
    let t2 = Stage2Target {
        decoder: &dec,
        model: &model,
        rank: 2,
    };
    let r2 = integrated_gradients(&t2, e.values(), &vec![0.0; e.dim()], 32, "zero").unwrap();
    assert_eq!(r2.attributions.len(), e.dim());
    assert!(r2.completeness_gap.is_finite());

    let price = TwoStagePrice {
        source: &src,
        decoder: &dec,
        model: &model,
    };
    let spec = SweepSpec {
        sample_size: 10,
        ..SweepSpec::default()
    };
    let sample = sample_listings(&val, spec.sample_size, 5);
    let res = run_sweep(&price, &sample, &spec).unwrap();
    assert_eq!(res.curves.len(), 10);
    let rep = monotonicity_report(&res.curves).unwrap();
    assert!((0.0..=1.0).contains(&rep.fraction_monotone));
    for c in res.curves.iter().filter_map(|c| c.normalized.as_ref()) {
        assert_eq!((c[0], c[5]), (1.0, 0.0));
    }
}

#[test]
fn training_is_deterministic() {
    let (train, _) = small_data(8);
    let schema = FeatureSchema::fit(train.iter().map(|r| &r.features)).unwrap();
    let (a, ha) = train_stage1(&train, &schema, &small_stage1(), 8).unwrap();
    let (b, hb) = train_stage1(&train, &schema, &small_stage1(), 8).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha.to_csv(), hb.to_csv());
}
