fn main() {
    std::process::exit(kcchain::cli::main_with_args(std::env::args_os()));
}
