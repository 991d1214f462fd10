use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::time::Instant;

use photoscene_core::bundle;
use photoscene_core::fit::{GraphSelectionConfig, LossWeights, OptimizeConfig, ReoptimizeConfig};
use photoscene_core::pipeline::{self, BaselineMethod, PipelineConfig};
use photoscene_core::synth::SynthConfig;

fn rotations() -> Vec<f64> {
    vec![0.0, FRAC_PI_4, FRAC_PI_2, 3.0 * FRAC_PI_4]
}

#[test]
fn diagnose_one_scene() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        image_h: 256,
        image_w: 256,
        n_views: 2,
        n_parts: 2,
        graph_ids: vec!["wood".into(), "checker".into()],
        texture_res: 128,
        noise: 0.0,
        misalign_px: 4.0,
        exposure_spread: 0.3,
        rotations: vec![0.0],
        log_scales: vec![0.0],
        translations: vec![0.0, 0.5],
        diffuse_only: true,
        seed: 9000,
        ..SynthConfig::default()
    };
    let cfg_path = dir.path().join("synth.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&synth).unwrap()).unwrap();
    let scene = dir.path().join("scene");
    let truth = pipeline::run_gen_synthetic(Some(cfg_path.as_path()), None, &scene).unwrap();
    println!("== truth ==");
    for p in &truth.parts {
        println!(
            "  {}: graph {} rot {:.4} log_scale {:.3} trans {:?} misalign {:?}",
            p.part_id, p.graph_id, p.phi.rotation, p.phi.log_scale, p.phi.translation, p.misalign
        );
        println!("    theta {:?}", p.theta.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    }
    println!("  light_coeffs {:?}", truth.light_coeffs);
    println!("  exposures {:?}", truth.exposures);

    let fitcfg = PipelineConfig {
        seed: 4242,
        jobs: 1,
        fit_texture_res: 128,
        lighting_rounds: 2,
        view_consensus_tau: 0.5,
        diffuse_only: true,
        loss_weights: LossWeights::default(),
        optimize: OptimizeConfig {
            rounds: 2,
            adam_iters: 80,
            lr: 0.05,
            rotations: rotations(),
            log_scales: vec![0.0],
            translations: vec![0.0, 0.5],
            ..OptimizeConfig::default()
        },
        reoptimize: ReoptimizeConfig::default(),
        selection: GraphSelectionConfig {
            samples_per_graph: 10,
            k: 5,
            exemplar_resolution: 64,
        },
    };
    let run = dir.path().join("run");
    let t0 = Instant::now();
    let report = pipeline::run_fit(&scene, &fitcfg, &run).unwrap();
    println!("== fit ({:.0}s) ==", t0.elapsed().as_secs_f64());
    for p in &report.parts {
        println!(
            "  {}: mode {:?} view {:?} graph {:?} final_loss {:?} albedo_scale {:?} rough_scale {:?}",
            p.part_id, p.mode, p.selected_view, p.graph_id, p.final_loss, p.albedo_scale, p.roughness_scale
        );
        if let Some(t) = &p.selection_tallies {
            let s: Vec<String> = t
                .iter()
                .filter(|e| e.votes > 0)
                .map(|e| format!("{}:{}", e.graph_id, e.votes))
                .collect();
            println!("    tallies {}", s.join(" "));
        }
    }
    let assets = bundle::load_fitted_assets(&run).unwrap();
    for p in &assets.parts {
        if let Some(f) = &p.fit {
            println!(
                "  {}: fitted phi rot {:.4} log_scale {:.3} trans {:?}",
                p.part_id, f.phi.rotation, f.phi.log_scale, f.phi.translation
            );
            println!(
                "    theta {:?}",
                f.theta.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
            );
            println!("    loss trace head {:?} tail {:?}",
                &f.loss_trace[..f.loss_trace.len().min(3)],
                &f.loss_trace[f.loss_trace.len().saturating_sub(3)..]);
        }
    }
    println!("  solved coeffs r {:?}", assets.light_coeffs.x_r);
    println!("  solved coeffs g {:?}", assets.light_coeffs.x_g);
    println!("  solved exposures {:?}", assets.exposures.values);

    let m = pipeline::run_metrics(&scene, &run, None, None).unwrap();
    for pm in &m.parts {
        println!("  metrics {}: rmse {:.4} samples {}", pm.part_id, pm.rmse, pm.samples);
    }
    println!("  mean rmse {:.4} mean ssim {:.4}", m.mean_rmse, m.mean_ssim);

    let bd = dir.path().join("base");
    pipeline::run_baseline(&scene, BaselineMethod::PixelMedian, &bd).unwrap();
    let bm = pipeline::run_metrics(&scene, &bd, None, None).unwrap();
    println!("  baseline mean rmse {:.4}", bm.mean_rmse);
}
