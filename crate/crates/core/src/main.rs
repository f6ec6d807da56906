fn main() {
    std::process::exit(probefield::cli::run(std::env::args_os()));
}
