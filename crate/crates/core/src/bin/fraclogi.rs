fn main() {
    std::process::exit(fraclogi::cli::main_with_args(std::env::args_os()));
}
