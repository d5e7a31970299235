fn main() {
    std::process::exit(gad_core::cli::main_with_args(std::env::args_os()));
}
