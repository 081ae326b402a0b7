fn main() {
    std::process::exit(dualvae::cli::main_with_args(std::env::args_os()));
}
