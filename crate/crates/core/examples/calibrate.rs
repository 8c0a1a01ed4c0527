// convergence probe on the benchmark geometry: trains full and reduced
// variants on one synthetic corpus and reports per-epoch validation error,
// stopping epochs, wall time, and the margin over linear interpolation
use helix_core::analysis::{embedding_structure, metrics};
use helix_core::baselines::impute_linear;
use helix_core::data::{make_windows, normalize_apply, normalize_fit, split_plan, window_range};
use helix_core::missingness::{corrupt, synth_spatial, Pattern, SyntheticSpec};
use helix_core::model::{HelixModel, ModelConfig, Variant};
use helix_core::rng::{stream, StreamKind};
use helix_core::tensor::Tensor;
use helix_core::training::{fit, impute, TrainConfig, WindowSet};
use std::time::Instant;

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let seeds: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let spec = SyntheticSpec::default();

    for seed in 0..seeds {
        let mut drng = stream(seed, StreamKind::Data, 0);
        let synth = synth_spatial(&spec, &mut drng).unwrap();
        let full = Tensor::filled(synth.values.shape().to_vec(), 1.0);
        let mut crng = stream(seed, StreamKind::Masking, 0);
        let cor = corrupt(&synth.values, &full, Pattern::Point, 0.5, 4, 3, spec.t_window, &mut crng).unwrap();

        let plan = split_plan(cor.values.shape()[0], spec.t_window).unwrap();
        let f = spec.n_features;
        let train_rows = plan.n_train * spec.t_window;
        let train_values = Tensor::new(vec![train_rows, f], cor.values.data()[..train_rows * f].to_vec()).unwrap();
        let train_mask = Tensor::new(vec![train_rows, f], cor.mask.data()[..train_rows * f].to_vec()).unwrap();
        let stats = normalize_fit(&train_values, &train_mask).unwrap();
        let normalized = normalize_apply(&cor.values, &stats).unwrap();
        let masked: Vec<f64> = normalized.data().iter().zip(cor.mask.data()).map(|(&v, &m)| v * m).collect();
        let masked = Tensor::new(normalized.shape().to_vec(), masked).unwrap();
        let values_w = make_windows(&masked, &plan).unwrap();
        let mask_w = make_windows(&cor.mask, &plan).unwrap();
        let truth_norm = normalize_apply(&synth.values, &stats).unwrap();
        let truth_w = make_windows(&truth_norm, &plan).unwrap();
        let eval_w = make_windows(&cor.eval_mask, &plan).unwrap();

        let set = |r: std::ops::Range<usize>| {
            WindowSet::new(window_range(&values_w, r.clone()).unwrap(), window_range(&mask_w, r).unwrap()).unwrap()
        };
        let train = set(plan.train_range());
        let val = set(plan.val_range());
        let test = set(plan.test_range());
        let truth_test = window_range(&truth_w, plan.test_range()).unwrap();
        let eval_test = window_range(&eval_w, plan.test_range()).unwrap();

        // linear-interp baseline on the normalized corrupted series
        let lin = impute_linear(&masked, &cor.mask).unwrap();
        let lin_w = make_windows(&lin, &plan).unwrap();
        let lin_test = window_range(&lin_w, plan.test_range()).unwrap();
        let lin_report = metrics(&truth_test, &lin_test, &eval_test).unwrap();
        println!("seed {}  linear-interp test MAE {:.5}", seed, lin_report.mae);

        for variant in [Variant::Full, Variant::NoFeatid] {
            let mut mc = ModelConfig::default();
            mc.n_features = f;
            mc.variant = variant;
            let model = HelixModel::init(mc, seed).unwrap();
            let tc = TrainConfig { epochs, seed, ..TrainConfig::default() };
            let t0 = Instant::now();
            let res = fit(model, &train, &val, &tc).unwrap();
            let dt = t0.elapsed().as_secs_f64();
            let imputed = impute(&res.model, &test, tc.batch_size).unwrap();
            let report = metrics(&truth_test, &imputed, &eval_test).unwrap();
            let ran = res.history.len();
            println!(
                "seed {} {:?}  epochs_run {}  best {:?}  {:.1}s ({:.2}s/epoch)  test MAE {:.5}  vs linear {:+.1}%",
                seed,
                variant,
                ran,
                res.best_epoch,
                dt,
                dt / ran.max(1) as f64,
                report.mae,
                100.0 * (report.mae - lin_report.mae) / lin_report.mae,
            );
            if variant == Variant::Full {
                let curve: Vec<String> =
                    res.history.iter().map(|h| format!("{:.4}", h.val_mae)).collect();
                println!("  val curve: {}", curve.join(" "));
                if let Some(t) = res.model.feat_id.as_ref() {
                    let sr = embedding_structure(t, &synth.coords).unwrap();
                    println!("  embedding r = {:.3}  p = {:.2e}", sr.pearson.r, sr.pearson.p);
                }
            }
        }
    }
}
