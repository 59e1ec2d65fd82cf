//! Reverse-mode gradients on a small quaternion expression, checked against
//! central differences.
//!
//! `cargo run --release --example autodiff_basics`

use posefield::autodiff::Tape;

fn f(tape: &Tape, q: &[f64], v: &[f64]) -> f64 {
    let qv = tape.const_vector(q).normalize();
    let p = tape.const_vector(v);
    qv.quat_mul(p).tanh().dot(qv).item()
}

fn main() -> posefield::Result<()> {
    let q = [0.9, 0.1, -0.3, 0.2];
    let v = [0.0, 0.5, 0.25, -1.0];
    let tape = Tape::new();
    let qv = tape.vector(&q);
    let out = qv.normalize().quat_mul(tape.const_vector(&v)).tanh().dot(qv.normalize());
    let grads = tape.backward(out)?;
    let g = grads.wrt(qv);
    println!("f = {:.6}, {} tape nodes", out.item(), tape.len());
    let h = 1e-6;
    for k in 0..4 {
        let (mut up, mut down) = (q, q);
        up[k] += h;
        down[k] -= h;
        let scratch = Tape::new();
        let numeric = (f(&scratch, &up, &v) - f(&scratch, &down, &v)) / (2.0 * h);
        println!("d f / d q[{k}]: reverse {:+.8}  central {:+.8}", g[k], numeric);
    }
    Ok(())
}
