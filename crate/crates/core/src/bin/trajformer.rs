fn main() {
    std::process::exit(trajformer::cli::run(std::env::args_os()));
}
