use pigp::infer::hmc::{hmc_sample, HmcConfig};
use pigp::infer::diagnostics;
use pigp::kernel::{Inputs, KernelFamily};
use pigp::model::predict_u;
use pigp::presets::*;
use std::time::Instant;

fn main() {
    let truth = WkTruth::Wk3 { r1: 0.05, r2: 1.0, c: 1.1 };
    for seed in 0..5u64 {
        let mut study = WkStudy::standard(truth, seed);
        study.n_per_cycle = 16;
        let data = simulate_wk_study(&study).unwrap();
        let grid = Inputs::from_1d(data.grid.clone());
        for disc in [true] {
            let model = wk2_model(KernelFamily::Se1d, disc);
            let cfg = HmcConfig { chains: 3, warmup: 500, iters: 500, seed, leapfrog: 16, ..Default::default() };
            let t0 = Instant::now();
            let draws = hmc_sample(&model, &data.obs, &cfg).unwrap();
            let d = diagnostics(&draws);
            let layout = model.layout();
            // posterior predictive mean of pressure over thinned draws
            let total = draws.chains * draws.iters;
            let step = (total / 100).max(1);
            let mut mean_acc = vec![0.0; grid.len()];
            let mut count = 0;
            for k in (0..total).step_by(step) {
                let (c, i) = (k / draws.iters, k % draws.iters);
                let x: Vec<f64> = (0..draws.dim()).map(|p| draws.get(c, i, p)).collect();
                let (bk, mean_u, variant, noise) = model.concrete(&layout, &x).unwrap();
                let (m, _) = predict_u(&bk, &mean_u, &variant, &noise, &data.obs, &grid).unwrap();
                for j in 0..grid.len() { mean_acc[j] += m[j]; }
                count += 1;
            }
            let rmse = (0..grid.len()).map(|j| {
                let e = mean_acc[j] / count as f64 - data.p_true[j];
                e * e
            }).sum::<f64>() / grid.len() as f64;
            let ir = draws.param_index("R").unwrap();
            let ic = draws.param_index("C").unwrap();
            let isp = draws.param_index("sigma_u").unwrap();
            let (rlo, rhi) = draws.credible_interval(ir, 0.90);
            let (clo, chi) = draws.credible_interval(ic, 0.90);
            let (slo, shi) = draws.credible_interval(isp, 0.90);
            println!("seed {seed} {}: {:>5.1}s R[{:.3},{:.3}] C[{:.3},{:.3}] sigP[{:.2},{:.2}] mean sigP={:.2} rmse={:.3} maxrhat={:.3}",
                if disc {"wk2+d"} else {"wk2  "}, t0.elapsed().as_secs_f64(),
                rlo, rhi, clo, chi, slo, shi, draws.mean(isp), rmse.sqrt(), d.max_rhat().unwrap());
        }
    }
}
