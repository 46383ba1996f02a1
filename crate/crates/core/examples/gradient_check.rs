//! Verify the tape's gradients against central finite differences.
//!
//! Every parameter tensor gets a few sampled coordinates; each is
//! perturbed both ways and the difference quotient of the full
//! multi-stage loss is compared with the analytic value.

use evidepth::gradcheck::{micro_grad_check, GradCheckSettings};
use std::time::Instant;

fn main() -> evidepth::Result<()> {
    let settings = GradCheckSettings::default();
    let t0 = Instant::now();
    let report = micro_grad_check(&settings)?;
    let (name, idx, fd, ad) = &report.worst;
    println!(
        "{} coordinates in {:.1} s, max relative error {:.3e}",
        report.n_checked,
        t0.elapsed().as_secs_f64(),
        report.max_rel_err
    );
    println!("worst: {name}[{idx}]  fd {fd:.6e}  analytic {ad:.6e}");
    Ok(())
}
