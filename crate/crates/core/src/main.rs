fn main() {
    std::process::exit(posterflow::cli::run());
}
