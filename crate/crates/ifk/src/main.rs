fn main() {
    std::process::exit(ifk::cli::run(std::env::args_os()));
}
