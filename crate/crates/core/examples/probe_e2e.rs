// scratch probe: desk-scale end-to-end run
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specfuse::datapipe::{spatial_batch, spectral_batch, synth_scene};
use specfuse::degradation::{bicubic_upsample, make_partition_srf, DegradationModel};
use specfuse::diffusion::NoiseSchedule;
use specfuse::metrics::psnr;
use specfuse::networks::{train_network, SpatialNet, SpectralNet};
use specfuse::sampler::{run_fusion, SamplerConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let train_steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(600);
    let t_steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(100);
    let patch: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(32);
    let base: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(16);
    let argm: bool = args.get(5).map(|s| s == "1").unwrap_or(true);
    let seed: u64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(42);

    let t0 = Instant::now();
    let scene = synth_scene(64, 64, 31, 8, seed).unwrap();
    let model = DegradationModel::new(4, make_partition_srf(31, 4).unwrap(), 35.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let (lr, msi) = specfuse::degradation::simulate_pair(&scene, &model, &mut rng).unwrap();

    // baseline: bicubic upsample of the LR-HSI
    let upsampled = bicubic_upsample(&lr, 4).unwrap();
    let base_psnr = psnr(&scene, &upsampled).unwrap();
    println!("baseline bicubic PSNR: {base_psnr:.2} dB");

    let schedule = NoiseSchedule::exponential(t_steps).unwrap();
    let d = 8;

    let mut net_rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let mut spectral = SpectralNet::new(31, &mut net_rng);
    let mut spatial = SpatialNet::new(d, base, &mut net_rng);

    let t1 = Instant::now();
    let lr_c = lr.clone();
    let tr1 = train_network(&mut spectral, |r| spectral_batch(&lr_c, d, r), &schedule, train_steps, 1e-3, seed + 3).unwrap();
    println!("spectral train: {:.1}s, loss {:.4} -> {:.4}", t1.elapsed().as_secs_f64(), tr1[0], tr1[tr1.len()-1]);

    let t2 = Instant::now();
    let msi_c = msi.clone();
    let tr2 = train_network(&mut spatial, |r| spatial_batch(&msi_c, d, (patch, patch), r), &schedule, train_steps, 1e-3, seed + 4).unwrap();
    println!("spatial train: {:.1}s, loss {:.4} -> {:.4}", t2.elapsed().as_secs_f64(), tr2[0], tr2[tr2.len()-1]);

    let cfg = SamplerConfig { steps: t_steps, subspace_dim: d, argm_enabled: argm, ..Default::default() };
    let t3 = Instant::now();
    let mut fuse_rng = ChaCha8Rng::seed_from_u64(seed + 5);
    match run_fusion(&lr, &msi, &spatial, &spectral, &model, &cfg, &schedule, &mut fuse_rng) {
        Ok((fused, diag)) => {
            println!("fusion: {:.1}s", t3.elapsed().as_secs_f64());
            let fused_psnr = psnr(&scene, &fused).unwrap();
            println!("fused PSNR: {fused_psnr:.2} dB (margin {:+.2} dB)", fused_psnr - base_psnr);
            println!("guidance loss: {:.3} -> {:.3}", diag.guidance_loss[0], diag.guidance_loss.last().unwrap());
            println!("residual loss: {:.3} -> {:.3} (ratio {:.4})", diag.residual_loss[0],
                     diag.residual_loss.last().unwrap(),
                     diag.residual_loss.last().unwrap() / diag.residual_loss[0]);
            println!("total: {:.1}s", t0.elapsed().as_secs_f64());
        }
        Err(e) => println!("FUSION FAILED: {e}"),
    }
}
