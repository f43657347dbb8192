fn main() {
    std::process::exit(tsda_cli::run(std::env::args_os()));
}
