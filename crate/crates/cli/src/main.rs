fn main() {
    std::process::exit(whitener_cli::run(std::env::args_os()));
}
