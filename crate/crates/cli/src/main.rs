use clap::Parser;
use filmrelax_cli::{run, Args};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    std::process::exit(run(&args));
}
