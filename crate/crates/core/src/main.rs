fn main() {
    std::process::exit(jointnlp::cli::run(std::env::args_os()));
}
