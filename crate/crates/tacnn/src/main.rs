fn main() {
    std::process::exit(tacnn::cli::run());
}
