fn main() {
    std::process::exit(vicl_core::cli::run());
}
