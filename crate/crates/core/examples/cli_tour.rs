//! Drives the command-line interface in-process: pretrain, adapt with the
//! pretrained prompts, then report, all in a temporary directory.

use flatcal::cli::main_with_args;

fn main() -> std::io::Result<()> {
    let dir = tempfile::tempdir()?;
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "task_seeds = [0]\nseeds = [0]\n[task]\nn_test = 60\n[tta]\nmethod = \"fpp-init-tpt\"\n[fpp]\niterations = 200\n",
    )?;
    let out = dir.path().join("out");
    for cmd in ["pretrain", "adapt", "report"] {
        let args = ["flatcal", cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
        let code = main_with_args(args);
        println!("flatcal {cmd} -> exit {code}\n");
    }
    let mut files: Vec<_> = walk(&out)?;
    files.sort();
    println!("files written:");
    for f in files {
        println!("  {}", f.strip_prefix(&out).unwrap().display());
    }
    Ok(())
}

fn walk(dir: &std::path::Path) -> std::io::Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            out.extend(walk(&p)?);
        } else {
            out.push(p);
        }
    }
    Ok(out)
}
