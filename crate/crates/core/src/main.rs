fn main() {
    std::process::exit(fedreact::cli::main_with_args(std::env::args_os()));
}
