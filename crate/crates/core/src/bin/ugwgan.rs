fn main() {
    std::process::exit(ugwgan::cli::main_with_args(std::env::args_os()));
}
