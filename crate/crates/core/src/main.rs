fn main() {
    std::process::exit(pcnn::cli::run(std::env::args_os()));
}
