/// Sinusoidal position vector: even entries `sin(t / 10000^(2i/d))`, odd
/// entries the matching cosine.
pub fn positional_term(t: usize, d_model: usize) -> Vec<f64> {
    let mut out = vec![0.0; d_model];
    write_positional(t, &mut out);
    out
}

pub(crate) fn write_positional(t: usize, out: &mut [f64]) {
    let d = out.len() as f64;
    for (i, pair) in out.chunks_mut(2).enumerate() {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d);
        let angle = t as f64 * freq;
        pair[0] = angle.sin();
        if pair.len() > 1 {
            pair[1] = angle.cos();
        }
    }
}
