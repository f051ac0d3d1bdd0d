use std::process::ExitCode;

use anyhow::{Context, Result};

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FLOWADAPT_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("FLOWADAPT_THREADS must be a positive integer, got `{v}`"))?;
        anyhow::ensure!(n > 0, "FLOWADAPT_THREADS must be positive");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let result = init_threads().and_then(|()| flowadapt_cli::run(std::env::args().collect()));
    match result {
        Ok((summary, _)) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            if let Some(clap_err) = e.downcast_ref::<clap::Error>() {
                // help and version requests are not failures
                let _ = clap_err.print();
                return if clap_err.use_stderr() {
                    ExitCode::from(2)
                } else {
                    ExitCode::SUCCESS
                };
            }
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
