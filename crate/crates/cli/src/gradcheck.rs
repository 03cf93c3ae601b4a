use radiomamba_core::diagnostics::{gradcheck_suite, GradScope};
use radiomamba_core::{Error, Result};

#[derive(clap::Args)]
pub struct Args {
    /// `ops`, `ssm`, `block`, `model` or `all`
    #[arg(long, default_value = "all")]
    scope: String,
    /// Override the scope's tolerance (ops/ssm 1e-4, block 1e-3, model 3e-3)
    #[arg(long)]
    tol: Option<f64>,
    /// Perturb every backward rule; the checks must then fail
    #[arg(long)]
    corrupt_backward: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

pub fn run(a: Args) -> Result<()> {
    let scopes = match a.scope.as_str() {
        "all" => GradScope::ALL.to_vec(),
        s => vec![s.parse()?],
    };
    let (mut total, mut failed) = (0, 0);
    for scope in scopes {
        for case in gradcheck_suite(scope, a.tol, a.corrupt_backward, a.seed)? {
            let r = &case.report;
            println!(
                "{:<5} {:<28} {:>5} entries  max err {:.3e}  tol {:.0e}  {}",
                scope.as_str(),
                case.name,
                r.checked,
                r.max_error,
                r.tol,
                if r.passed() { "PASS" } else { "FAIL" }
            );
            total += 1;
            failed += usize::from(!r.passed());
        }
    }
    println!("{} of {total} checks passed", total - failed);
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} gradient checks failed")));
    }
    Ok(())
}
