fn main() {
    std::process::exit(cae_cli::run(std::env::args_os()));
}
