use dnlfusion::gradcheck::{full_model_check, GradCheckSettings};

#[test]
fn h_sweep() {
    for h in [1e-5, 1e-6, 1e-7] {
        let settings = GradCheckSettings { h, tol_rel: 1e-4 };
        let r = full_model_check(settings).unwrap();
        println!("h={h:e}: {}", r.line());
    }
}
