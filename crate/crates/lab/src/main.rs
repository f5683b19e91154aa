use clap::Parser;

fn main() -> anyhow::Result<()> {
    groundlab::cli::run(groundlab::cli::Cli::parse())
}
