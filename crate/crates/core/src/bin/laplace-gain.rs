fn main() {
    std::process::exit(laplace_gain::cli::run(std::env::args_os()));
}
