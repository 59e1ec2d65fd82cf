//! Integrated positional encoding of a pixel frustum against a Monte-Carlo
//! average of the point encoding, plus coarse-to-fine annealing weights.
//!
//! `cargo run --release --example ipe_encoding`

use nalgebra::Vector3;
use posefield::ipe::{
    frustum_to_gaussian, ipe_encode, ipe_encode_annealed, ipe_monte_carlo, positional_encoding, ConicalFrustum, EncodingConfig,
};

fn main() -> posefield::Result<()> {
    let f = ConicalFrustum::new(Vector3::new(0.2, -0.1, 0.3), Vector3::new(0.0, 0.6, 0.8), 0.02, 2.0, 2.15)?;
    let octaves = 4;
    let gauss = frustum_to_gaussian(&f);
    let closed = ipe_encode(&gauss, octaves);
    let point = positional_encoding(&gauss.mean, octaves);
    let mc = ipe_monte_carlo(&f, octaves, 200_000, 1)?;
    println!("{:>4} {:>10} {:>10} {:>10} {:>9}", "k", "ipe", "monte", "point", "std err");
    for k in 0..closed.len() {
        println!("{k:>4} {:>10.5} {:>10.5} {:>10.5} {:>9.1e}", closed[k], mc.mean[k], point[k], mc.std_error[k]);
    }
    println!("acceptance rate {:.3}", mc.accepted as f64 / mc.proposed as f64);

    for t in [0.0, 1.5, 3.0, 4.0] {
        let cfg = EncodingConfig { octaves, anneal_t: t, anneal_b: 1.0 };
        let w: Vec<String> = cfg.weights().iter().map(|w| format!("{w:.3}")).collect();
        let enc = ipe_encode_annealed(&gauss, &cfg);
        println!("t = {t}: octave weights [{}], |features| = {:.4}", w.join(", "), enc.iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    Ok(())
}
