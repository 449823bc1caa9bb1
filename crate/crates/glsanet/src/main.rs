fn main() { std::process::exit(glsanet::cli::run_from_env()) }
