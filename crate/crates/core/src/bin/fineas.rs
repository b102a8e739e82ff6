fn main() {
    std::process::exit(fineas::cli::main_with_args(std::env::args_os()));
}
