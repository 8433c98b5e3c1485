fn main() {
    std::process::exit(sopgan::cli::run());
}
