fn main() {
    std::process::exit(emtsim::cli::main());
}
