fn main() {
    std::process::exit(vow::cli::run());
}
