fn main() {
    std::process::exit(carpe_cli::run(std::env::args_os()));
}
