fn main() {
    std::process::exit(protofaith::evalio::cli::run(std::env::args_os()));
}
