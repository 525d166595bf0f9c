fn main() {
    std::process::exit(kolmo::cli::main());
}
