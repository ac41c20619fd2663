fn main() {
    std::process::exit(fedrane::cli::main_with_args(std::env::args_os()));
}
