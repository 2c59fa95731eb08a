fn main() {
    std::process::exit(tiltfed::cli::run(std::env::args_os()));
}
