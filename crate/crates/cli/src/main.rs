fn main() {
    std::process::exit(tridet_cli::run(std::env::args_os()));
}
