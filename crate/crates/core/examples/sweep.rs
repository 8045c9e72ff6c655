//! A σ-scale sweep driven from a TOML config, as `flatcal sweep` runs it,
//! printed as the CSV the command writes.

use flatcal::cli::commands::{run_sweep, sweep_csv};
use flatcal::cli::RunConfig;

const CONFIG: &str = r#"
task_seeds = [0, 1]
seeds = [0, 1]

[task]
n_test = 100

[tta]
method = "fpp-init-tpt"

[fpp]
iterations = 300

[sweep]
param = "fpp.sigma_scale"
values = [0.25, 1.0, 4.0]
"#;

fn main() -> flatcal::Result<()> {
    let cfg = RunConfig::from_toml(CONFIG)?;
    cfg.validate()?;
    let rows = run_sweep(&cfg)?;
    print!("{}", sweep_csv("fpp.sigma_scale", &rows));
    Ok(())
}
