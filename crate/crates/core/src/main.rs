fn main() {
    std::process::exit(deepplan::cli::main_with_args(std::env::args_os()));
}
