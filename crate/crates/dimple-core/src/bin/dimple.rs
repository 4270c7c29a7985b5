fn main() {
    std::process::exit(dimple_core::cli::run());
}
