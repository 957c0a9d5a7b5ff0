use windscale_core::grid::{FieldGrid, VariableId};
use windscale_core::inference::{Baseline, Downscaler, TrimEdge};
use windscale_core::metrics::{aggregate, evaluate, median, EvalOptions, Method, MetricReport, Oracle, Region};
use windscale_core::networks::{Generator, GeneratorSpec};
use windscale_core::preprocess::fit_norm;
use windscale_core::synth::{make_dataset, Dataset, SynthConfig};

fn dataset() -> Dataset {
    make_dataset(&SynthConfig { n_hours: 16, ..SynthConfig::default() }).unwrap()
}

#[test]
fn oracle_scores_zero_and_rows_are_complete() {
    let ds = dataset();
    let regions = vec![Region { name: "corner".into(), top: 0, left: 0, height: 32, width: 32 }];
    let opts = EvalOptions { regions, workers: 3, ..EvalOptions::default() };
    let methods: [&dyn Method; 3] = [&Oracle, &Baseline::Bilinear, &Baseline::Nearest];
    let report = evaluate(&ds.test, &methods, &opts).unwrap();
    assert_eq!(report.rows.len(), ds.test.len() * 3 * 2 * 2);
    for r in report.rows.iter().filter(|r| r.method == "oracle") {
        assert_eq!((r.rmse, r.lsd), (0.0, 0.0));
    }
    let serial = evaluate(&ds.test, &methods, &EvalOptions { workers: 1, ..opts.clone() }).unwrap();
    assert_eq!(serial, report);
    assert_eq!(MetricReport::parse_tsv(&report.to_tsv()).unwrap(), report);
    assert_eq!(report.methods(), vec!["oracle", "bilinear", "nearest"]);
}

#[test]
fn bilinear_spectrum_is_further_from_truth_than_nearest() {
    let ds = dataset();
    let methods: [&dyn Method; 2] = [&Baseline::Bilinear, &Baseline::Nearest];
    let report = evaluate(&ds.test, &methods, &EvalOptions::default()).unwrap();
    for c in VariableId::PREDICTANDS {
        let lsd = |m: &str| {
            let v: Vec<f64> = report.rows.iter().filter(|r| r.method == m && r.component == c).map(|r| r.lsd).collect();
            median(&v).unwrap()
        };
        assert!(lsd("bilinear") > lsd("nearest"), "{c}: {} vs {}", lsd("bilinear"), lsd("nearest"));
    }
    assert_eq!(aggregate(&report.rows).unwrap().len(), 2 * 2);
}

fn tiny_downscaler(ds: &Dataset) -> Downscaler<f64> {
    let spec = GeneratorSpec { trunk_width: 8, n_rrdb: 1, dense_blocks: 1, growth: 4, cov_widths: [4, 4, 8], ..GeneratorSpec::default() };
    Downscaler::new(Generator::new(spec, 3).unwrap(), fit_norm(&ds.train).unwrap())
}

#[test]
fn whole_domain_output_has_trimmed_shape() {
    let ds = dataset();
    let d = tiny_downscaler(&ds);
    let pair = &ds.test[0];
    let low = pair.low.window(0, 0, 8, 8).unwrap();
    let out = d.downscale_domain(&low, &pair.covariates.window(0, 0, 61, 59).unwrap()).unwrap();
    assert_eq!(out.hw(), (56, 56));
    assert_eq!(out.channels(), &VariableId::PREDICTANDS);
    let again = d.downscale_domain(&low, &pair.covariates.window(0, 0, 61, 59).unwrap()).unwrap();
    assert_eq!(out, again);
    let sym = Downscaler { edge: TrimEdge::Symmetric, ..d.clone() };
    assert_eq!(sym.downscale_domain(&low, &pair.covariates.window(0, 0, 61, 59).unwrap()).unwrap().hw(), (56, 56));
    assert!(d.downscale_domain(&low.window(0, 0, 6, 8).unwrap(), &pair.covariates).is_err());
}

#[test]
fn stitched_tiles_match_the_whole_domain() {
    let ds = make_dataset(&SynthConfig { n_hours: 10, domain_hw: (256, 256), ..SynthConfig::default() }).unwrap();
    let d = tiny_downscaler(&ds);
    let margin = d.generator.receptive_radius().div_ceil(8);
    let pair = &ds.test[0];
    let whole = d.downscale_domain(&pair.low, &pair.covariates).unwrap();
    let tiled = d.downscale_tiled(&pair.low, &pair.covariates, 2 * margin + 6, margin).unwrap();
    let scale = whole.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = whole.data().iter().zip(tiled.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(worst <= 1e-10 * scale, "max deviation {worst} of {scale}");
    let _: &FieldGrid = &tiled;
}
