fn main() {
    std::process::exit(rasc::cli::main_with_args(std::env::args_os()));
}
