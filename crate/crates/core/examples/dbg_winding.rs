use num_complex::Complex64;
use regkit_core::piecewise::PiecewisePoly;
use regkit_core::regularization::{assemble_q_ms, s_n, CoefficientSet, OrderSpec};
use regkit_core::spectral::{integrate_fundamental, winding, Region};

fn main() {
    let order = OrderSpec::new(2).unwrap();
    let set = CoefficientSet::new(order, vec![PiecewisePoly::zero(); 2], true).unwrap();
    let f = s_n(&assemble_q_ms(&set)).unwrap();
    let coarse = |lambda: Complex64| {
        integrate_fundamental(&f, lambda, 1e-6).map(|fm| fm.c1[(0, 0)])
    };
    let left = ((6.0f64 + 0.1 + 0.1) * std::f64::consts::PI).powi(2) + 20.0;
    let region = Region::new(-left, 2.0, -2.0, 2.0).unwrap();
    println!("full: {:?}", winding(&coarse, region));
    // bisect manually to find the failing subregion
    let mut stack = vec![region];
    while let Some(r) = stack.pop() {
        match winding(&coarse, r) {
            Ok(_) => {}
            Err(_) => {
                println!("unstable: [{}, {}] x [{}, {}]", r.re0, r.re1, r.im0, r.im1);
                if r.re1 - r.re0 > 20.0 {
                    let mid = 0.5 * (r.re0 + r.re1);
                    stack.push(Region::new(r.re0, mid, r.im0, r.im1).unwrap());
                    stack.push(Region::new(mid, r.re1, r.im0, r.im1).unwrap());
                } else {
                    // sample the boundary values
                    for t in 0..=20 {
                        let x = r.re0 + (r.re1 - r.re0) * t as f64 / 20.0;
                        let v = coarse(Complex64::new(x, r.im1)).unwrap();
                        println!("  top edge x={x:.3}: |v|={:.3e} arg={:.3}", v.norm(), v.arg());
                    }
                    break;
                }
            }
        }
    }
}
