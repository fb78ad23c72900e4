fn main() {
    std::process::exit(megafusion::cli::main_with_args(std::env::args_os()));
}
