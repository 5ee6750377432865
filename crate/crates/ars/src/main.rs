fn main() {
    std::process::exit(ars::cli::main_with_args(std::env::args_os()));
}
