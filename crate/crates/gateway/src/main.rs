fn main() {
    std::process::exit(lwe_gateway::cli::run(std::env::args_os()));
}
