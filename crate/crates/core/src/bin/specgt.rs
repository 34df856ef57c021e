fn main() {
    std::process::exit(specgt::cli::main_with_args(std::env::args_os()));
}
