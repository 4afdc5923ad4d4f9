//! Trajectory diagnosis probe.
use cri::degrade::{self, DegradationSpec};
use cri::generator::{ClassLabel, Generator, LatentZ};
use cri::harness::config::RunConfig;
use cri::invert::{InversionMode, Inverter};
use cri::rng;

#[test]
fn traj() {
    let cfg = RunConfig::default();
    let gen = cfg.build_generator();
    let fx = cfg.build_extractor().unwrap();
    let inv = Inverter::new(&gen, &fx);
    let class = ClassLabel(1);
    let mut r = rng::stream(42, "target");
    let z = LatentZ::sample(&mut r, 16);
    let clean = gen.synthesize(&gen.map(&z, class).unwrap()).unwrap();
    let spec = DegradationSpec::centered_mask(32, 32, 0.25);
    let degraded = degrade::apply(&spec, &clean).unwrap();
    let mut icfg = cfg.invert_config(InversionMode::Cri, 7);
    icfg.cluster.samples = 4000;
    icfg.schedule.stage2_iters = 0;
    let result = inv.invert(&degraded, class, &spec, &icfg, cfg.generator.seed, None).unwrap();
    println!("centroid idx {} dists {:?}", result.centroid_index,
        result.centroid_distances.iter().map(|d| format!("{d:.1}")).collect::<Vec<_>>());
    for rec in result.stage1.iter().take(12) {
        println!("it {:3}: total {:.6} perc {:.6} pix {:.6} pen {:.6}", rec.iter, rec.total, rec.perceptual, rec.pixel, rec.penalty);
    }
    for rec in result.stage1.iter().skip(12).step_by(25) {
        println!("it {:3}: total {:.6} perc {:.6} pix {:.6} pen {:.6}", rec.iter, rec.total, rec.perceptual, rec.pixel, rec.penalty);
    }
    println!("best at {}", result.stage1_best_iter);
}
