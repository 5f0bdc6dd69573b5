fn main() {
    std::process::exit(optlab_cli::run(std::env::args_os()));
}
