fn main() {
    std::process::exit(ofscil::cli::run(std::env::args_os()));
}
