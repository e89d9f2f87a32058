fn main() {
    std::process::exit(dpq::cli::run(std::env::args_os()));
}
