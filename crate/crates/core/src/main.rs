fn main() {
    std::process::exit(voltreg::cli::main());
}
