fn main() {
    std::process::exit(drift_ptq::cli::main_with_args(std::env::args_os()));
}
