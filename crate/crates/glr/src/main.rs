fn main() {
    std::process::exit(glr::cli::run(std::env::args()));
}
