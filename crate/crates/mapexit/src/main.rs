fn main() {
    std::process::exit(mapexit::cli::run());
}
