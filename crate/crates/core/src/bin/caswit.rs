fn main() {
    std::process::exit(caswit::cli::run(std::env::args_os()));
}
