use outreg::tensor::*;
use std::time::Instant;
fn main() {
    for &wd in &[16usize, 32] {
        let x = FeatureField::filled(wd, 64, 64, 0.3);
        let k = ConvKernelStack::from_vec(wd, wd, 3, 3, vec![0.01; wd*wd*9]).unwrap();
        let t = Instant::now();
        for _ in 0..10 { let _ = conv2d(&x, &k).unwrap(); }
        let a = t.elapsed().as_secs_f64()/10.0;
        let t = Instant::now();
        for _ in 0..10 { let _ = conv2d_adjoint_input(&x, &k).unwrap(); }
        let b = t.elapsed().as_secs_f64()/10.0;
        let t = Instant::now();
        for _ in 0..10 { let _ = conv2d_adjoint_weights(&x, &x, k.shape()).unwrap(); }
        let c = t.elapsed().as_secs_f64()/10.0;
        let macs = (wd*wd*9*4096) as f64;
        println!("width {wd}: fwd {:.2}ms ({:.2} GMAC/s) adjin {:.2}ms adjw {:.2}ms ({:.2} GMAC/s)", a*1e3, macs/a/1e9, b*1e3, c*1e3, macs/c/1e9);
    }
}
