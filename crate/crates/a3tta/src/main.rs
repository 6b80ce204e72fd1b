fn main() {
    std::process::exit(a3tta::cli::run());
}
