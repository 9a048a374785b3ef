fn main() {
    std::process::exit(adamae_cli::run_cli(std::env::args_os()));
}
