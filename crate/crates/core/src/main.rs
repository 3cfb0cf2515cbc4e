fn main() {
    std::process::exit(ergolil::cli::run(std::env::args_os()));
}
