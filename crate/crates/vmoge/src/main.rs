fn main() {
    std::process::exit(vmoge::cli::main_with_args(std::env::args_os()));
}
