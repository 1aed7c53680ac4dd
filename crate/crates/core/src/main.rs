fn main() {
    std::process::exit(pyramidforge::cli::run(std::env::args_os()));
}
