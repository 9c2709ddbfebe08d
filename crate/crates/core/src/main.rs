fn main() {
    std::process::exit(pqvae::cli::run(std::env::args_os()));
}
