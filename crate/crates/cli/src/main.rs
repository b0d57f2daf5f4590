fn main() {
    std::process::exit(erg_cli::run(std::env::args_os()));
}
