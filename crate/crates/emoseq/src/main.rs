fn main() { std::process::exit(emoseq::cli::run_cli(std::env::args_os())); }
