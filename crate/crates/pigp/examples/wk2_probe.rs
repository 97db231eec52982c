use pigp::infer::hmc::{hmc_sample, HmcConfig};
use pigp::infer::diagnostics;
use pigp::kernel::KernelFamily;
use pigp::presets::*;
use std::time::Instant;

fn main() {
    let t_all = Instant::now();
    let mut cover_r = 0; let mut cover_c = 0; let mut rhat_ok = 0;
    for seed in 0..10u64 {
        let mut study = WkStudy::standard(WkTruth::Wk2 { r: 1.0, c: 1.1 }, seed);
        study.n_per_cycle = 9;
        let data = simulate_wk_study(&study).unwrap();
        let model = wk2_model(KernelFamily::Se1d, false);
        let cfg = HmcConfig { chains: 3, warmup: 400, iters: 400, seed, leapfrog: 16, ..Default::default() };
        let t0 = Instant::now();
        let draws = hmc_sample(&model, &data.obs, &cfg).unwrap();
        let d = diagnostics(&draws);
        let ir = draws.param_index("R").unwrap();
        let ic = draws.param_index("C").unwrap();
        let (rlo, rhi) = draws.credible_interval(ir, 0.90);
        let (clo, chi) = draws.credible_interval(ic, 0.90);
        let cr = rlo <= 1.0 && 1.0 <= rhi;
        let cc = clo <= 1.1 && 1.1 <= chi;
        let mr = d.max_rhat().unwrap();
        if cr { cover_r += 1; }
        if cc { cover_c += 1; }
        if mr < 1.05 { rhat_ok += 1; }
        println!("seed {seed}: {:>5.1}s R[{:.3},{:.3}]{} C[{:.3},{:.3}]{} maxrhat={:.3}",
            t0.elapsed().as_secs_f64(), rlo, rhi, if cr {"+"} else {"-"},
            clo, chi, if cc {"+"} else {"-"}, mr);
    }
    println!("coverage R {cover_r}/10 C {cover_c}/10 rhat_ok {rhat_ok}/10, total {:.0}s", t_all.elapsed().as_secs_f64());
}
