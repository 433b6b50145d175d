fn main() {
    std::process::exit(embanon::cli::run(std::env::args_os()));
}
