use clap::Parser;

fn main() -> anyhow::Result<()> {
    let args = eegar::cli::Args::parse();
    eegar::cli::run(&args)?;
    Ok(())
}
