fn main() {
    std::process::exit(featloc::cli::run_from_args(std::env::args_os()));
}
