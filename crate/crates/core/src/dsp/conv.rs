use num_complex::Complex64;
use rustfft::FftPlanner;

/// Linear convolution of `a` and `b` via FFT, truncated to `out_len` samples.
pub fn fft_convolve(a: &[f64], b: &[f64], out_len: usize) -> Vec<f64> {
    if a.is_empty() || b.is_empty() || out_len == 0 {
        return vec![0.0; out_len];
    }
    let full = a.len() + b.len() - 1;
    let n = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let lift = |x: &[f64]| {
        let mut v: Vec<Complex64> = x.iter().map(|&s| Complex64::new(s, 0.0)).collect();
        v.resize(n, Complex64::new(0.0, 0.0));
        v
    };
    let mut fa = lift(a);
    let mut fb = lift(b);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    let scale = 1.0 / n as f64;
    (0..out_len)
        .map(|i| if i < full { fa[i].re * scale } else { 0.0 })
        .collect()
}
