use pigp::infer::hmc::{hmc_sample, HmcConfig};
use pigp::infer::diagnostics;
use pigp::kernel::Inputs;
use pigp::model::predict_u;
use pigp::presets::*;
use pigp::sim::HeatField;
use std::time::Instant;

fn main() {
    // 20x20 grid for RMSE
    let mut pts = Vec::new();
    for i in 0..20 {
        for j in 0..20 {
            pts.push((i as f64 + 0.5) / 20.0);
            pts.push((j as f64 + 0.5) / 20.0);
        }
    }
    let grid = Inputs::from_rows(2, pts);
    let u_true: Vec<f64> = grid.iter().map(|p| HeatField::u(p[0], p[1])).collect();

    for seed in 0..3u64 {
        for biased in [false, true] {
            let data = simulate_heat_study(&HeatStudy::standard(biased, seed)).unwrap();
            for bias_model in if biased { vec![false, true] } else { vec![false] } {
                let model = heat_model(bias_model);
                let cfg = HmcConfig { chains: 3, warmup: 500, iters: 500, seed, leapfrog: 16, ..Default::default() };
                let t0 = Instant::now();
                let draws = hmc_sample(&model, &data, &cfg).unwrap();
                let d = diagnostics(&draws);
                let layout = model.layout();
                let total = draws.chains * draws.iters;
                let step = (total / 100).max(1);
                let mut mean_acc = vec![0.0; grid.len()];
                let mut count = 0;
                for k in (0..total).step_by(step) {
                    let (c, i) = (k / draws.iters, k % draws.iters);
                    let x: Vec<f64> = (0..draws.dim()).map(|p| draws.get(c, i, p)).collect();
                    let (bk, mean_u, variant, noise) = model.concrete(&layout, &x).unwrap();
                    let (m, _) = predict_u(&bk, &mean_u, &variant, &noise, &data, &grid).unwrap();
                    for j in 0..grid.len() { mean_acc[j] += m[j]; }
                    count += 1;
                }
                let rmse = ((0..grid.len()).map(|j| {
                    let e = mean_acc[j] / count as f64 - u_true[j];
                    e * e
                }).sum::<f64>() / grid.len() as f64).sqrt();
                let ia = draws.param_index("alpha").unwrap();
                let (alo, ahi) = draws.credible_interval(ia, 0.90);
                println!("seed {seed} data{} model{}: {:>5.0}s alpha[{:.3},{:.3}] mean={:.3} rmse={:.4} maxrhat={:.3}",
                    if biased {"+b"} else {"  "}, if bias_model {"+B"} else {"  "},
                    t0.elapsed().as_secs_f64(), alo, ahi, draws.mean(ia), rmse, d.max_rhat().unwrap());
            }
        }
    }
}
