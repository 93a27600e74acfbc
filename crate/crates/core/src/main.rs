fn main() {
    std::process::exit(lowrank::cli::run_cli(std::env::args_os()));
}
