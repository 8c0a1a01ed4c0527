fn main() {
    std::process::exit(helix_core::cli::main_with_args(std::env::args_os()));
}
