//! Manual timing probes (ignored by default).

use refneus_core::synth::{generate_scene, SceneSpec};
use refneus_core::train::{train, TrainConfig};

fn probe(label: &str, cfg: &TrainConfig, scene: &refneus_core::scene::SceneDataset) {
    let t0 = std::time::Instant::now();
    let _ = train(scene, cfg, None, None).unwrap();
    let dt = t0.elapsed();
    println!(
        "{label}: 40 iters in {:.2}s -> {:.1} ms/iter",
        dt.as_secs_f64(),
        dt.as_secs_f64() * 1000.0 / 40.0
    );
}

#[test]
#[ignore]
fn time_desk_iterations() {
    let scene = generate_scene(&SceneSpec::glossy_sphere(7)).unwrap();
    let mut cfg = TrainConfig::desk();
    cfg.total_iters = 40;
    cfg.warmup_iters = 30;

    // no scoring, no mesh
    let mut c1 = cfg.clone();
    c1.mesh_update_period = 1000;
    c1.use_reflection_score = false;
    probe("fwd/bwd only      ", &c1, &scene.dataset);

    // scoring without visibility (no mesh)
    let mut c2 = cfg.clone();
    c2.mesh_update_period = 1000;
    c2.use_visibility = false;
    probe("plus score (eq6)  ", &c2, &scene.dataset);

    // full with visibility but extraction outside the window
    let mut c3 = cfg.clone();
    c3.mesh_update_period = 10;
    probe("vis steady state  ", &c3, &scene.dataset);
}
