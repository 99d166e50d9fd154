use anyhow::Result;
use clap::Args;
use hds_core::tensor::set_conv_backward_fault;
use hds_core::verify::run_checks;

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupts the convolution backward pass, to show the checks catch it.
    #[arg(long, hide = true)]
    pub inject_conv_fault: bool,
}

pub fn run(a: &VerifyArgs) -> Result<()> {
    set_conv_backward_fault(a.inject_conv_fault);
    let results = run_checks(a.seed);
    set_conv_backward_fault(false);
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    println!("{} checks, {failed} failed", results.len());
    if failed > 0 {
        anyhow::bail!("{failed} of {} checks failed", results.len());
    }
    Ok(())
}
