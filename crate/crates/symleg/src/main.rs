fn main() {
    std::process::exit(symleg::cli::run());
}
