fn main() {
    std::process::exit(textslu::cli::main_with_args(std::env::args_os()));
}
