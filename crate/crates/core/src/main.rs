fn main() {
    std::process::exit(ltcontext::cli::run_from_args(std::env::args_os()));
}
