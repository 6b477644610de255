use clap::Parser;
use env_logger::Env;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(Env::new().filter_or("FASTFLOW_LOG", "info")).init();
    fastflow_cli::run(fastflow_cli::Cli::parse())
}
