use refneus_core::field::*;
use refneus_core::linalg::Mat;

#[test]
#[ignore]
fn time_network_passes() {
    let mut sdf = SdfNetwork::<f32>::new(SdfConfig::desk());
    sdf.init_geometric(0.5, 1);
    let mut rad = RadianceNetwork::<f32>::new(RadianceConfig::desk());
    rad.init_uniform(2);

    let b = 1536;
    let pts: Vec<[f32; 3]> = (0..b)
        .map(|i| {
            let t = i as f32 / b as f32;
            [t.sin() * 0.5, t.cos() * 0.5, (t * 7.0).sin() * 0.5]
        })
        .collect();
    let mut ws = SdfWorkspace::new(&sdf, b);
    let reps = 64;

    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        sdf.forward(&pts, &mut ws, false);
    }
    println!("sdf fwd values : {:.2} ms/batch", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        sdf.forward(&pts, &mut ws, true);
    }
    println!("sdf fwd+tangent: {:.2} ms/batch", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let adj_sdf = vec![1.0f32; b];
    let adj_feat = Mat::zeros(b, sdf.config.feature_dim);
    let adj_grad = vec![[0.1f32; 3]; b];
    let mut grads = vec![0.0f32; sdf.param_len()];
    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        sdf.forward(&pts, &mut ws, true);
        sdf.backward(&mut ws, b, &adj_sdf, &adj_feat, &adj_grad, &mut grads);
    }
    println!("sdf fwd+bwd    : {:.2} ms/batch", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let normals = vec![[0.0f32, 0.0, 1.0]; b];
    let dirs = vec![[0.0f32, 0.0, -1.0]; b];
    let feats = Mat::zeros(b, rad.config.feature_dim);
    let mut ws_rad = RadianceWorkspace::new(&rad, b);
    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        rad.forward(&pts, &normals, &dirs, &feats, &mut ws_rad);
    }
    println!("rad fwd        : {:.2} ms/batch", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    let adj_rgb = vec![[0.1f32; 3]; b];
    let mut rgrads = vec![0.0f32; rad.param_len()];
    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        rad.forward(&pts, &normals, &dirs, &feats, &mut ws_rad);
        rad.backward(&mut ws_rad, b, &adj_rgb, &mut rgrads);
    }
    println!("rad fwd+bwd    : {:.2} ms/batch", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}
