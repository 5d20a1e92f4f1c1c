fn main() {
    let code = acmoe::cli::run_from_args(std::env::args_os());
    std::process::exit(code);
}
